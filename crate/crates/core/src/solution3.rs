//! Solution 3: PST buckets below a static MPST over bucket representatives,
//! with an auxiliary PST for violations and global rebuilding of the upper
//! level once per epoch.
//!
//! An epoch lasts `n0` updates, `n0` being the size when it began. During
//! the epoch the next upper level is staged a few representatives per
//! update; at its end the auxiliary points drain into their buckets and the
//! new MPST swaps in. The bucket partition itself is recomputed only when
//! the size drifts out of `[n/2, 2n]` of the last chopping.

use std::collections::HashMap;

use crate::bucketed::bucket_size;
use crate::error::{audit_ensure, AuditError, Error, Result};
use crate::metrics::{MetricsSnapshot, StructureMetrics};
use crate::mpst::Mpst;
use crate::point::{check_unique_ids, Key, Point, PointId, Query3};
use crate::pst::Pst;
use crate::xindex::XIndex;
use crate::ThreeSided;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Loc {
    Bucket(usize),
    Aux,
}

#[derive(Clone, Debug)]
pub struct S3Bucket {
    pub low: Key,
    pub pst: Pst,
    /// Representative held by the current upper level.
    pub rep: Option<Point>,
    /// Representative staged for the next upper level.
    staged: Option<Point>,
    /// Whether `staged` is current.
    fresh: bool,
}

#[derive(Clone, Debug)]
pub struct Solution3 {
    buckets: Vec<S3Bucket>,
    /// Lows of buckets `1..`, mapping to bucket indices.
    lows: XIndex<usize>,
    upper: Mpst,
    /// Bucket of each upper-level leaf.
    upper_bucket: Vec<usize>,
    aux: Pst,
    loc: HashMap<PointId, Loc>,
    n0: usize,
    n_chop: usize,
    epoch_len: usize,
    ops_in_epoch: usize,
    /// Next bucket to stage, and buckets staged per update.
    cursor: usize,
    per_update: usize,
    metrics: StructureMetrics,
}

impl Default for Solution3 {
    fn default() -> Self {
        Solution3::new()
    }
}

impl Solution3 {
    pub fn new() -> Self {
        Solution3::build(&[]).unwrap()
    }

    pub fn build(points: &[Point]) -> Result<Self> {
        check_unique_ids(points)?;
        let mut s = Solution3 {
            buckets: Vec::new(),
            lows: XIndex::new(),
            upper: Mpst::build(&[])?,
            upper_bucket: Vec::new(),
            aux: Pst::new(),
            loc: HashMap::new(),
            n0: 0,
            n_chop: 0,
            epoch_len: 1,
            ops_in_epoch: 0,
            cursor: 0,
            per_update: 0,
            metrics: StructureMetrics::default(),
        };
        s.chop(points.to_vec());
        Ok(s)
    }

    fn chop(&mut self, mut points: Vec<Point>) {
        points.sort_by_key(Point::xkey);
        let n = points.len();
        self.buckets.clear();
        self.loc.clear();
        for (i, chunk) in points.chunks(bucket_size(n).max(1)).enumerate() {
            let pst = Pst::from_points(chunk).expect("unique ids");
            for p in chunk {
                self.loc.insert(p.id, Loc::Bucket(i));
            }
            let rep = pst.min_y();
            self.buckets.push(S3Bucket {
                low: if i == 0 { Key::NEG_INFINITY } else { chunk[0].xkey() },
                pst,
                rep,
                staged: rep,
                fresh: true,
            });
        }
        self.lows = XIndex::build(
            self.buckets
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, b)| (b.low, i))
                .collect(),
        )
        .expect("bucket lows increase");
        self.aux = Pst::new();
        self.n_chop = n;
        self.install_upper();
    }

    /// Builds the upper level from the staged representatives and starts a
    /// new epoch.
    fn install_upper(&mut self) {
        let mut reps = Vec::new();
        self.upper_bucket.clear();
        for (i, b) in self.buckets.iter_mut().enumerate() {
            b.rep = b.staged;
            b.fresh = false;
            if let Some(r) = b.rep {
                reps.push(r);
                self.upper_bucket.push(i);
            }
        }
        self.upper = Mpst::build(&reps).expect("unique ids");
        self.metrics.rebuilds.incr();
        self.n0 = self.len();
        self.epoch_len = self.n0.max(1);
        self.ops_in_epoch = 0;
        self.cursor = 0;
        self.per_update = self.buckets.len().div_ceil(self.epoch_len);
    }

    pub fn len(&self) -> usize {
        self.loc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loc.is_empty()
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn buckets(&self) -> &[S3Bucket] {
        &self.buckets
    }

    pub fn upper(&self) -> &Mpst {
        &self.upper
    }

    pub fn aux_len(&self) -> usize {
        self.aux.len()
    }

    pub fn in_aux(&self, id: PointId) -> bool {
        self.loc.get(&id) == Some(&Loc::Aux)
    }

    pub fn bucket_of(&self, id: PointId) -> Option<usize> {
        match self.loc.get(&id)? {
            Loc::Bucket(b) => Some(*b),
            Loc::Aux => None,
        }
    }

    /// Size when the current epoch began.
    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn epoch_len(&self) -> usize {
        self.epoch_len
    }

    pub fn ops_in_epoch(&self) -> usize {
        self.ops_in_epoch
    }

    /// Representatives staged per update in this epoch.
    pub fn stage_rate(&self) -> usize {
        self.per_update
    }

    /// Buckets whose representative has been staged this epoch.
    pub fn staged(&self) -> usize {
        self.cursor
    }

    pub fn metrics(&self) -> &StructureMetrics {
        &self.metrics
    }

    fn bucket_for(&self, key: Key) -> usize {
        self.lows.predecessor(key).map_or(0, |(_, &b)| b)
    }

    fn all_points(&self) -> Vec<Point> {
        let mut pts: Vec<Point> = self.buckets.iter().flat_map(|b| b.pst.points().copied()).collect();
        pts.extend(self.aux.points().copied());
        pts
    }

    fn touch(&mut self, b: usize) {
        self.buckets[b].fresh = false;
    }

    fn stage_step(&mut self) {
        let end = (self.cursor + self.per_update).min(self.buckets.len());
        for b in self.cursor..end {
            let bucket = &mut self.buckets[b];
            bucket.staged = bucket.pst.min_y();
            bucket.fresh = true;
        }
        self.metrics.rebuild_units.add((end - self.cursor) as u64);
        self.cursor = end;
    }

    fn end_epoch(&mut self) {
        let drained: Vec<Point> = self.aux.points().copied().collect();
        for p in drained {
            let b = self.bucket_for(p.xkey());
            self.aux.delete(p.id).expect("buffered point");
            self.buckets[b].pst.insert(p).expect("unique ids");
            self.loc.insert(p.id, Loc::Bucket(b));
            self.touch(b);
        }
        let n = self.len();
        if n > 2 * self.n_chop || 2 * n < self.n_chop {
            let pts = self.all_points();
            self.metrics.rebuild_units.add(pts.len() as u64);
            self.chop(pts);
            return;
        }
        let mut late = 0;
        for b in &mut self.buckets {
            if !b.fresh {
                b.staged = b.pst.min_y();
                late += 1;
            }
        }
        self.metrics.rebuild_units.add(late);
        self.install_upper();
    }

    fn tick(&mut self) {
        self.stage_step();
        self.ops_in_epoch += 1;
        if self.ops_in_epoch >= self.epoch_len {
            self.end_epoch();
        }
    }

    pub fn insert(&mut self, p: Point) -> Result<()> {
        if self.loc.contains_key(&p.id) {
            return Err(Error::DuplicateId(p.id));
        }
        if self.buckets.is_empty() {
            self.chop(vec![p]);
            return Ok(());
        }
        let b = self.bucket_for(p.xkey());
        if self.buckets[b].rep.is_none_or(|r| p.ykey() < r.ykey()) {
            self.metrics.violations.incr();
            self.aux.insert(p)?;
            self.loc.insert(p.id, Loc::Aux);
        } else {
            self.buckets[b].pst.insert(p)?;
            self.loc.insert(p.id, Loc::Bucket(b));
            if self.buckets[b].staged.is_none_or(|s| p.ykey() < s.ykey()) {
                self.touch(b);
            }
        }
        self.tick();
        Ok(())
    }

    pub fn delete(&mut self, id: PointId) -> Result<Point> {
        let p = match self.loc.remove(&id).ok_or(Error::NotFound(id))? {
            Loc::Aux => self.aux.delete(id)?,
            Loc::Bucket(b) => {
                let p = self.buckets[b].pst.delete(id)?;
                if self.buckets[b].staged.is_some_and(|s| s.id == id) {
                    self.touch(b);
                }
                p
            }
        };
        self.tick();
        Ok(p)
    }

    pub fn query_into(&self, q: &Query3, out: &mut Vec<PointId>) {
        let mut visits = self.aux.query_into(q, out);
        if !self.buckets.is_empty() {
            let ba = self.bucket_for(q.lo_key());
            let bb = self.bucket_for(q.hi_key());
            visits += self.buckets[ba].pst.query_into(q, out);
            if bb != ba {
                visits += self.buckets[bb].pst.query_into(q, out);
            }
            let u = self.upper_bucket.partition_point(|&b| b <= ba);
            let w = self.upper_bucket.partition_point(|&b| b < bb);
            if u < w {
                let mut leaves = Vec::new();
                self.upper.leaves_below(u, w - 1, q.c, &mut leaves);
                for k in leaves {
                    visits += self.buckets[self.upper_bucket[k as usize]].pst.query_into(q, out);
                }
            }
        }
        self.metrics.node_visits.add(visits);
    }

    pub fn query(&self, q: &Query3) -> Vec<PointId> {
        let mut out = Vec::new();
        self.query_into(q, &mut out);
        out.sort_unstable();
        out
    }

    pub fn audit(&self) -> Result<(), AuditError> {
        self.aux.audit()?;
        self.lows.audit()?;
        audit_ensure!(
            self.lows.len() + 1 == self.buckets.len().max(1),
            None,
            "bucket index size mismatch"
        );
        audit_ensure!(
            self.upper.len() == self.upper_bucket.len(),
            None,
            "upper leaf map size mismatch"
        );
        for (k, &b) in self.upper_bucket.iter().enumerate() {
            audit_ensure!(
                k == 0 || self.upper_bucket[k - 1] < b,
                Some(b),
                "upper leaves out of bucket order"
            );
            audit_ensure!(
                self.buckets[b].rep == Some(self.upper.points()[k]),
                Some(b),
                "upper leaf {k} is not the rep"
            );
        }
        let mut stored = self.aux.len();
        for (i, b) in self.buckets.iter().enumerate() {
            b.pst
                .audit()
                .map_err(|e| AuditError::new(Some(i), format!("bucket pst: {e}")))?;
            stored += b.pst.len();
            if i == 0 {
                audit_ensure!(b.low == Key::NEG_INFINITY, Some(0), "first bucket not open below");
            } else {
                audit_ensure!(self.buckets[i - 1].low < b.low, Some(i), "bucket lows out of order");
                audit_ensure!(self.lows.get(b.low) == Some(&i), Some(i), "bucket index stale");
            }
            let high = self.buckets.get(i + 1).map_or(Key::INFINITY, |n| n.low);
            let advertised = b.rep.is_some() == self.upper_bucket.binary_search(&i).is_ok();
            audit_ensure!(advertised, Some(i), "rep and upper level disagree");
            for p in b.pst.points() {
                audit_ensure!(
                    b.low <= p.xkey() && p.xkey() < high,
                    Some(i),
                    "point {} outside bucket range",
                    p.id
                );
                audit_ensure!(
                    self.loc.get(&p.id) == Some(&Loc::Bucket(i)),
                    Some(i),
                    "location of {} stale",
                    p.id
                );
                audit_ensure!(
                    b.rep.is_some_and(|r| r.ykey() <= p.ykey()),
                    Some(i),
                    "point {} undercuts the advertised rep",
                    p.id
                );
            }
            if b.fresh {
                audit_ensure!(i < self.cursor, Some(i), "staged ahead of the cursor");
                audit_ensure!(b.staged == b.pst.min_y(), Some(i), "staged rep stale but marked fresh");
            }
        }
        for p in self.aux.points() {
            audit_ensure!(
                self.loc.get(&p.id) == Some(&Loc::Aux),
                None,
                "buffered point {} not located",
                p.id
            );
        }
        audit_ensure!(
            stored == self.loc.len(),
            None,
            "{} stored but {} located",
            stored,
            self.loc.len()
        );
        audit_ensure!(self.ops_in_epoch < self.epoch_len, None, "epoch overran");
        audit_ensure!(
            self.per_update * self.epoch_len >= self.buckets.len(),
            None,
            "staging rate cannot finish within the epoch"
        );
        Ok(())
    }
}

impl ThreeSided for Solution3 {
    fn len(&self) -> usize {
        Solution3::len(self)
    }

    fn insert(&mut self, p: Point) -> Result<()> {
        Solution3::insert(self, p)
    }

    fn delete(&mut self, id: PointId) -> Result<Point> {
        Solution3::delete(self, id)
    }

    fn query_into(&self, q: &Query3, out: &mut Vec<PointId>) {
        Solution3::query_into(self, q, out)
    }

    fn metrics(&self) -> MetricsSnapshot {
        let mut m = self.metrics.snapshot();
        m.aux_size = self.aux.len() as u64;
        m.scanned_entries += self.upper.metrics().scanned_entries.get();
        m
    }

    fn audit(&self) -> Result<(), AuditError> {
        Solution3::audit(self)
    }

    fn points(&self) -> Vec<Point> {
        self.all_points()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::DistributionSpec;
    use crate::point::brute_force_query;
    use crate::point::fixtures::{p8, q};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(id: PointId, x: f64, y: f64) -> Point {
        Point::new(id, x, y).unwrap()
    }

    #[test]
    fn build_examples() {
        let e = Solution3::new();
        assert!(e.is_empty());
        assert!(e.query(&q(0., 9., 9.)).is_empty());
        e.audit().unwrap();
        let s = Solution3::build(&p8()).unwrap();
        s.audit().unwrap();
        assert_eq!(s.bucket_count(), 2);
        let reps: Vec<PointId> = s.upper().points().iter().map(|p| p.id).collect();
        assert_eq!(reps, vec![4, 6]);
        assert_eq!(s.query(&q(2., 6., 3.)), vec![2, 4, 6]);
        assert_eq!(s.epoch_len(), 8);
    }

    #[test]
    fn uniform_4096_audits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> = (0..4096).map(|i| pt(i, rng.gen(), rng.gen())).collect();
        let s = Solution3::build(&pts).unwrap();
        s.audit().unwrap();
        assert_eq!(s.bucket_count(), 4096usize.div_ceil(13));
    }

    #[test]
    fn violations_and_epoch_swap() {
        let mut s = Solution3::build(&p8()).unwrap();
        s.insert(pt(20, 4.5, 9.0)).unwrap();
        assert_eq!((s.aux_len(), s.bucket_of(20)), (0, Some(0)));
        s.insert(pt(21, 4.5, 0.5)).unwrap();
        assert!(s.in_aux(21));
        assert_eq!(s.metrics().violations.get(), 1);
        assert_eq!(s.query(&q(4., 5., 0.6)), vec![21]);
        s.delete(4).unwrap();
        assert_eq!(s.buckets()[0].rep.unwrap().id, 4);
        assert_eq!(s.query(&q(2., 6., 3.)), vec![2, 6, 21]);
        for i in 0..4 {
            s.insert(pt(30 + i, 100.0 + i as f64, 50.0)).unwrap();
            s.audit().unwrap();
        }
        assert_eq!(s.ops_in_epoch(), 7);
        let rebuilds = s.metrics().rebuilds.get();
        s.insert(pt(40, -5.0, 60.0)).unwrap();
        assert_eq!(s.metrics().rebuilds.get(), rebuilds + 1);
        assert_eq!(s.aux_len(), 0);
        assert_eq!(s.bucket_of(21), Some(0));
        assert_eq!(s.buckets()[0].rep.unwrap().id, 21);
        assert_eq!(s.n0(), 14);
        s.audit().unwrap();
    }

    #[test]
    fn answers_held_in_aux_are_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut live: Vec<Point> = (0..500).map(|i| pt(i, rng.gen(), 1.0 + rng.gen::<f64>())).collect();
        let mut s = Solution3::build(&live).unwrap();
        for i in 0..40 {
            let p = pt(1000 + i, rng.gen(), rng.gen::<f64>() * 0.5);
            s.insert(p).unwrap();
            live.push(p);
        }
        assert_eq!(s.aux_len(), 40);
        let qq = q(0.0, 1.0, 0.9);
        assert_eq!(s.query(&qq).len(), 40);
        assert_eq!(s.query(&qq), brute_force_query(&live, &qq));
    }

    #[test]
    fn zipf_workloads_match_oracle() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let zipf = DistributionSpec::Zipf { n: 1_000_000, s: 1.2 }.sampler().unwrap();
            let n0 = rng.gen_range(0..300);
            let mut live: Vec<Point> = (0..n0).map(|i| pt(i, rng.gen(), zipf.sample(&mut rng))).collect();
            let mut s = Solution3::build(&live).unwrap();
            let mut next = n0;
            for _ in 0..1500 {
                let r: f64 = rng.gen();
                if r < 0.4 || live.is_empty() {
                    let p = pt(next, rng.gen(), zipf.sample(&mut rng));
                    next += 1;
                    s.insert(p).unwrap();
                    live.push(p);
                } else if r < 0.7 {
                    let p = live.swap_remove(rng.gen_range(0..live.len()));
                    assert_eq!(s.delete(p.id).unwrap(), p);
                } else {
                    let a: f64 = rng.gen();
                    let qq = q(a, a + rng.gen::<f64>() * 0.4, zipf.sample(&mut rng));
                    assert_eq!(s.query(&qq), brute_force_query(&live, &qq));
                }
                s.audit().unwrap();
            }
        }
    }

    #[test]
    fn errors() {
        let mut s = Solution3::build(&p8()).unwrap();
        assert_eq!(s.insert(pt(1, 0., 0.)), Err(Error::DuplicateId(1)));
        assert_eq!(s.delete(99), Err(Error::NotFound(99)));
        for id in 1..=8 {
            s.delete(id).unwrap();
        }
        s.audit().unwrap();
        assert!(s.query(&q(-1e9, 1e9, 1e9)).is_empty());
        s.insert(pt(1, 0.0, 0.0)).unwrap();
        assert_eq!(s.query(&q(-1., 1., 1.)), vec![1]);
    }
}
