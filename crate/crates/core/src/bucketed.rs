//! Solution 1: logarithmic PST buckets, an upper PST over bucket minima and
//! an auxiliary PST for violating insertions.
//!
//! A point *violates* when its y-key undercuts the representative its bucket
//! advertises upstairs. Violators wait in the auxiliary PST. Every
//! `⌈log₂ n0⌉` updates an epoch ends: the buffered violators are handed to
//! their buckets, but stay physically in the buffer (as *shadow* points) until
//! the bucket's new representative reaches the upper level. One such pending
//! upper-level update is applied per subsequent update.
//!
//! Deleting a representative also queues a pending update. Until it is
//! applied the upper level keeps the stale, smaller-y representative, which
//! can only cause an extra bucket descent.

use std::collections::{HashMap, VecDeque};

use crate::error::{audit_ensure, AuditError, Error, Result};
use crate::metrics::{MetricsSnapshot, StructureMetrics};
use crate::point::{check_unique_ids, Key, Point, PointId, Query3};
use crate::pst::Pst;
use crate::ThreeSided;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Loc {
    Bucket(usize),
    /// Violator buffered since the current epoch began.
    Aux,
    /// Flushed to the bucket; held in the buffer until the bucket's pending
    /// update applies.
    Shadow(usize),
}

#[derive(Clone, Debug)]
pub struct Bucket {
    /// Smallest x-key the bucket covers; the next bucket's `low` bounds it
    /// from above.
    pub low: Key,
    pub pst: Pst,
    /// The representative the upper level currently holds.
    pub rep: Option<Point>,
    pending: bool,
    shadow: Vec<PointId>,
}

#[derive(Clone, Debug, Default)]
pub struct BucketedPst {
    buckets: Vec<Bucket>,
    upper: Pst,
    rep_bucket: HashMap<PointId, usize>,
    aux: Pst,
    loc: HashMap<PointId, Loc>,
    pending: VecDeque<usize>,
    n0: usize,
    epoch_len: usize,
    ops_in_epoch: usize,
    metrics: StructureMetrics,
}

pub(crate) fn bucket_size(n: usize) -> usize {
    ((n + 2) as f64).log2().ceil() as usize
}

pub(crate) fn log_epoch_len(n0: usize) -> usize {
    (n0 as f64).log2().ceil().max(1.0) as usize
}

/// Index of the bucket covering `key`, given ascending bucket lows whose
/// first entry is −∞.
pub(crate) fn covering(lows: impl Fn(usize) -> Key, count: usize, key: Key) -> usize {
    let (mut lo, mut hi) = (1, count);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if lows(mid) <= key {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo - 1
}

impl BucketedPst {
    pub fn new() -> Self {
        BucketedPst::build(&[]).unwrap()
    }

    pub fn build(points: &[Point]) -> Result<Self> {
        check_unique_ids(points)?;
        let mut s = BucketedPst::default();
        s.rebuild_from(points.to_vec());
        Ok(s)
    }

    fn rebuild_from(&mut self, mut points: Vec<Point>) {
        points.sort_by_key(Point::xkey);
        let n = points.len();
        self.buckets.clear();
        self.loc.clear();
        for (i, chunk) in points.chunks(bucket_size(n).max(1)).enumerate() {
            let pst = Pst::from_points(chunk).expect("unique ids");
            let low = if i == 0 { Key::NEG_INFINITY } else { chunk[0].xkey() };
            for p in chunk {
                self.loc.insert(p.id, Loc::Bucket(i));
            }
            self.buckets.push(Bucket {
                low,
                rep: pst.min_y(),
                pst,
                pending: false,
                shadow: Vec::new(),
            });
        }
        let reps: Vec<Point> = self.buckets.iter().filter_map(|b| b.rep).collect();
        self.rep_bucket = self
            .buckets
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.rep.map(|r| (r.id, i)))
            .collect();
        self.upper = Pst::from_points(&reps).expect("unique ids");
        self.aux = Pst::new();
        self.pending.clear();
        self.n0 = n;
        self.epoch_len = log_epoch_len(n);
        self.ops_in_epoch = 0;
    }

    fn all_points(&self) -> Vec<Point> {
        let mut pts: Vec<Point> = self.buckets.iter().flat_map(|b| b.pst.points().copied()).collect();
        pts.extend(self.aux.points().copied());
        pts
    }

    fn global_rebuild(&mut self) {
        self.metrics.rebuilds.incr();
        let pts = self.all_points();
        self.metrics.rebuild_units.add(pts.len() as u64);
        self.rebuild_from(pts);
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

    pub fn buckets(&self) -> &[Bucket] {
        &self.buckets
    }

    pub fn aux_len(&self) -> usize {
        self.aux.len()
    }

    pub fn shadow_len(&self) -> usize {
        self.buckets.iter().map(|b| b.shadow.len()).sum()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn epoch_len(&self) -> usize {
        self.epoch_len
    }

    pub fn ops_in_epoch(&self) -> usize {
        self.ops_in_epoch
    }

    /// Size at the last global rebuild.
    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn in_aux(&self, id: PointId) -> bool {
        matches!(self.loc.get(&id), Some(Loc::Aux | Loc::Shadow(_)))
    }

    /// Bucket holding the point, counting shadow points as their bucket's.
    pub fn bucket_of(&self, id: PointId) -> Option<usize> {
        match self.loc.get(&id)? {
            Loc::Bucket(b) | Loc::Shadow(b) => Some(*b),
            Loc::Aux => None,
        }
    }

    pub fn metrics(&self) -> &StructureMetrics {
        &self.metrics
    }

    fn bucket_for(&self, key: Key) -> usize {
        covering(|i| self.buckets[i].low, self.buckets.len(), key)
    }

    fn queue(&mut self, b: usize) {
        if !self.buckets[b].pending {
            self.buckets[b].pending = true;
            self.pending.push_back(b);
        }
    }

    /// Moves the bucket's shadow points in and publishes its new minimum.
    fn apply_pending(&mut self) -> bool {
        let Some(b) = self.pending.pop_front() else {
            return false;
        };
        self.metrics.pending_applied.incr();
        for id in std::mem::take(&mut self.buckets[b].shadow) {
            let p = self.aux.delete(id).expect("shadow point in buffer");
            self.buckets[b].pst.insert(p).expect("unique ids");
            self.loc.insert(id, Loc::Bucket(b));
        }
        let bucket = &mut self.buckets[b];
        bucket.pending = false;
        let new = bucket.pst.min_y();
        let old = std::mem::replace(&mut bucket.rep, new);
        if old.map(|p| p.id) != new.map(|p| p.id) {
            if let Some(o) = old {
                self.upper.delete(o.id).expect("advertised rep");
                self.rep_bucket.remove(&o.id);
            }
            if let Some(r) = new {
                self.upper.insert(r).expect("fresh rep");
                self.rep_bucket.insert(r.id, b);
            }
        }
        true
    }

    fn epoch_tick(&mut self) {
        self.ops_in_epoch += 1;
        if self.ops_in_epoch >= self.epoch_len {
            while self.apply_pending() {}
            let mut fresh: Vec<(Key, PointId)> = self
                .loc
                .iter()
                .filter(|(_, l)| **l == Loc::Aux)
                .map(|(&id, _)| (self.aux.get(id).unwrap().xkey(), id))
                .collect();
            fresh.sort_unstable();
            for (key, id) in fresh {
                let b = self.bucket_for(key);
                self.loc.insert(id, Loc::Shadow(b));
                self.buckets[b].shadow.push(id);
                self.queue(b);
            }
            self.ops_in_epoch = 0;
        }
        let n = self.len();
        if n > 2 * self.n0 || n < self.n0 / 2 {
            self.global_rebuild();
        }
    }

    pub fn insert(&mut self, p: Point) -> Result<()> {
        if self.loc.contains_key(&p.id) {
            return Err(Error::DuplicateId(p.id));
        }
        if self.buckets.is_empty() {
            let mut pts = self.all_points();
            pts.push(p);
            self.metrics.rebuilds.incr();
            self.rebuild_from(pts);
            return Ok(());
        }
        self.apply_pending();
        let b = self.bucket_for(p.xkey());
        let violates = self.buckets[b].rep.is_none_or(|r| p.ykey() < r.ykey());
        if violates {
            self.metrics.violations.incr();
            self.aux.insert(p)?;
            self.loc.insert(p.id, Loc::Aux);
        } else {
            self.buckets[b].pst.insert(p)?;
            self.loc.insert(p.id, Loc::Bucket(b));
        }
        self.epoch_tick();
        Ok(())
    }

    pub fn delete(&mut self, id: PointId) -> Result<Point> {
        if !self.loc.contains_key(&id) {
            return Err(Error::NotFound(id));
        }
        self.apply_pending();
        let loc = self.loc.remove(&id).unwrap();
        let p = match loc {
            Loc::Aux => self.aux.delete(id)?,
            Loc::Shadow(b) => {
                self.buckets[b].shadow.retain(|&s| s != id);
                self.aux.delete(id)?
            }
            Loc::Bucket(b) => {
                let p = self.buckets[b].pst.delete(id)?;
                if self.buckets[b].rep.map(|r| r.id) == Some(id) {
                    self.queue(b);
                }
                p
            }
        };
        self.epoch_tick();
        Ok(p)
    }

    pub fn query_into(&self, q: &Query3, out: &mut Vec<PointId>) {
        let mut visits = self.aux.query_into(q, out);
        if !self.buckets.is_empty() {
            let mut reps = Vec::new();
            visits += self.upper.query_into(q, &mut reps);
            let mut hit: Vec<usize> = reps.iter().map(|id| self.rep_bucket[id]).collect();
            hit.push(self.bucket_for(q.lo_key()));
            hit.push(self.bucket_for(q.hi_key()));
            hit.sort_unstable();
            hit.dedup();
            for b in hit {
                visits += self.buckets[b].pst.query_into(q, out);
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
        self.upper.audit()?;
        self.aux.audit()?;
        audit_ensure!(
            self.upper.len() == self.rep_bucket.len(),
            None,
            "upper/rep map size mismatch"
        );
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
            }
            let high = self.buckets.get(i + 1).map_or(Key::INFINITY, |n| n.low);
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
                // conservative representative: nothing in the bucket undercuts it
                let r = b.rep;
                audit_ensure!(
                    r.is_some_and(|r| r.ykey() <= p.ykey()),
                    Some(i),
                    "point {} undercuts the advertised rep",
                    p.id
                );
            }
            if let Some(r) = b.rep {
                audit_ensure!(
                    self.upper.get(r.id) == Some(&r),
                    Some(i),
                    "rep {} missing upstairs",
                    r.id
                );
                audit_ensure!(self.rep_bucket.get(&r.id) == Some(&i), Some(i), "rep map stale");
                let stale = !b.pst.contains(r.id);
                audit_ensure!(
                    !stale || b.pending,
                    Some(i),
                    "stale rep {} without pending update",
                    r.id
                );
            }
            for id in &b.shadow {
                audit_ensure!(b.pending, Some(i), "shadow point {} without pending update", id);
                audit_ensure!(self.aux.contains(*id), Some(i), "shadow point {} not query-visible", id);
                audit_ensure!(
                    self.loc.get(id) == Some(&Loc::Shadow(i)),
                    Some(i),
                    "shadow location stale"
                );
            }
            audit_ensure!(b.pending == self.pending.contains(&i), Some(i), "pending flag mismatch");
        }
        for p in self.aux.points() {
            audit_ensure!(
                matches!(self.loc.get(&p.id), Some(Loc::Aux | Loc::Shadow(_))),
                None,
                "buffered point {} not located in the buffer",
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
        Ok(())
    }
}

impl ThreeSided for BucketedPst {
    fn len(&self) -> usize {
        BucketedPst::len(self)
    }

    fn insert(&mut self, p: Point) -> Result<()> {
        BucketedPst::insert(self, p)
    }

    fn delete(&mut self, id: PointId) -> Result<Point> {
        BucketedPst::delete(self, id)
    }

    fn query_into(&self, q: &Query3, out: &mut Vec<PointId>) {
        BucketedPst::query_into(self, q, out)
    }

    fn metrics(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            aux_size: self.aux.len() as u64,
            ..self.metrics.snapshot()
        }
    }

    fn audit(&self) -> Result<(), AuditError> {
        BucketedPst::audit(self)
    }

    fn points(&self) -> Vec<Point> {
        self.all_points()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point::brute_force_query;
    use crate::point::fixtures::{p8, q};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(id: PointId, x: f64, y: f64) -> Point {
        Point::new(id, x, y).unwrap()
    }

    #[test]
    fn build_examples() {
        let e = BucketedPst::new();
        assert_eq!((e.bucket_count(), e.aux_len(), e.len()), (0, 0, 0));
        let s = BucketedPst::build(&p8()).unwrap();
        s.audit().unwrap();
        assert_eq!(s.bucket_count(), 2);
        assert_eq!(s.buckets()[0].rep.unwrap().id, 4);
        assert_eq!(s.buckets()[1].rep.unwrap().id, 6);
        assert_eq!(s.epoch_len(), 3);
        assert_eq!(s.query(&q(2., 6., 3.)), vec![2, 4, 6]);
        assert!(s.query(&q(0., 9., 0.)).is_empty());
    }

    #[test]
    fn chopping_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Point> = (0..1024).map(|i| pt(i, rng.gen(), rng.gen())).collect();
        let s = BucketedPst::build(&pts).unwrap();
        let size = bucket_size(1024);
        assert_eq!(size, 11);
        assert_eq!(s.bucket_count(), 1024usize.div_ceil(size));
        let sizes: Vec<usize> = s.buckets().iter().map(|b| b.pst.len()).collect();
        assert!(sizes[..sizes.len() - 1].iter().all(|&l| l == size));
        assert_eq!(*sizes.last().unwrap(), 1024 - size * (sizes.len() - 1));
        s.audit().unwrap();
    }

    #[test]
    fn violation_and_epoch_flush() {
        let mut s = BucketedPst::build(&p8()).unwrap();
        s.insert(pt(20, 4.5, 9.0)).unwrap();
        assert_eq!(s.bucket_of(20), Some(0));
        assert_eq!(s.metrics().violations.get(), 0);
        s.insert(pt(21, 4.5, 0.5)).unwrap();
        assert!(s.in_aux(21));
        assert_eq!(s.metrics().violations.get(), 1);
        assert_eq!(s.query(&q(4., 5., 0.6)), vec![21]);
        s.audit().unwrap();
        // third update closes the epoch of length ⌈log₂ 8⌉ = 3
        s.delete(20).unwrap();
        assert_eq!(s.ops_in_epoch(), 0);
        assert_eq!(s.bucket_of(21), Some(0));
        assert!(s.in_aux(21));
        assert_eq!((s.pending_len(), s.shadow_len()), (1, 1));
        s.audit().unwrap();
        // the next update applies the pending representative change
        s.insert(pt(22, 7.5, 9.0)).unwrap();
        assert!(!s.in_aux(21));
        assert_eq!(s.aux_len(), 0);
        assert_eq!(s.buckets()[0].rep.unwrap().id, 21);
        assert_eq!(s.query(&q(4., 5., 0.6)), vec![21]);
        s.audit().unwrap();
    }

    #[test]
    fn deleting_a_representative() {
        let mut s = BucketedPst::build(&p8()).unwrap();
        s.delete(4).unwrap();
        assert_eq!(s.query(&q(2., 6., 3.)), vec![2, 6]);
        s.audit().unwrap();
        assert_eq!(s.pending_len(), 1);
        assert_eq!(s.buckets()[0].rep.unwrap().id, 4);
        s.insert(pt(30, 3.5, 50.0)).unwrap();
        s.delete(30).unwrap();
        assert_eq!(s.aux_len(), 0);
        for id in [1, 2, 3, 5, 6, 7, 8] {
            s.delete(id).unwrap();
            s.audit().unwrap();
        }
        assert!(s.is_empty());
        assert!(s.query(&q(-1e9, 1e9, 1e9)).is_empty());
        s.insert(pt(1, 0.0, 0.0)).unwrap();
        assert_eq!(s.query(&q(-1., 1., 1.)), vec![1]);
    }

    #[test]
    fn pending_update_swaps_upper_rep() {
        let mut s = BucketedPst::build(&p8()).unwrap();
        s.delete(6).unwrap();
        assert_eq!(s.pending_len(), 1);
        s.insert(pt(40, 100.0, 100.0)).unwrap();
        assert_eq!(s.pending_len(), 0);
        assert_eq!(s.buckets()[1].rep.unwrap().id, 8);
        assert_eq!(s.query(&q(5., 8., 4.)), vec![8]);
        assert!(s.upper.contains(8) && !s.upper.contains(6));
        s.audit().unwrap();
    }

    #[test]
    fn random_workloads_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for round in 0..20 {
            let n0 = rng.gen_range(0..300);
            let mut live: Vec<Point> = (0..n0).map(|i| pt(i, rng.gen(), rng.gen())).collect();
            let mut s = BucketedPst::build(&live).unwrap();
            let mut next = n0;
            for _ in 0..1500 {
                let r: f64 = rng.gen();
                if r < 0.4 || live.is_empty() {
                    let y = if round % 3 == 0 { -(next as f64) } else { rng.gen() };
                    let p = pt(next, rng.gen(), y);
                    next += 1;
                    s.insert(p).unwrap();
                    live.push(p);
                } else if r < 0.6 {
                    let p = live.swap_remove(rng.gen_range(0..live.len()));
                    assert_eq!(s.delete(p.id).unwrap(), p);
                } else {
                    let a: f64 = rng.gen();
                    let qq = q(a, a + rng.gen::<f64>() * 0.5, rng.gen());
                    assert_eq!(s.query(&qq), brute_force_query(&live, &qq));
                }
                s.audit().unwrap();
            }
        }
    }
}
