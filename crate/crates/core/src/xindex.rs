//! Predecessor dictionary over effective x-keys.
//!
//! Two levels: a sorted array of bucket separators, then small sorted
//! buckets of `(key, handle)` entries. Both levels are searched by
//! interpolation followed by `√size` jumps; a round that fails to shrink the
//! range fourfold hands over to plain binary search, so the worst case stays
//! logarithmic while smooth inputs need `O(log log n)` probes on average.

use crate::error::{audit_ensure, AuditError, Error, Result};
use crate::metrics::Counter;
use crate::point::Key;

const LINEAR_CUTOFF: usize = 8;
const MAX_JUMPS: usize = 2;

#[derive(Clone, Debug)]
pub struct XIndex<H> {
    /// `seps[i]` bounds bucket `i` from below; bucket 0 extends to −∞.
    seps: Vec<Key>,
    buckets: Vec<Vec<(Key, H)>>,
    count: usize,
    target: usize,
    rebuilt_at: usize,
    probes: Counter,
}

impl<H> Default for XIndex<H> {
    fn default() -> Self {
        XIndex {
            seps: Vec::new(),
            buckets: Vec::new(),
            count: 0,
            target: 1,
            rebuilt_at: 0,
            probes: Counter::default(),
        }
    }
}

fn bucket_target(n: usize) -> usize {
    ((n + 2) as f64).log2().ceil().max(1.0) as usize
}

/// Number of leading items whose key is `≤ key`, with probes counted.
fn rank<T>(items: &[T], key: Key, key_of: impl Fn(&T) -> Key, probes: &mut u64) -> usize {
    let mut lo = 0;
    let mut hi = items.len();
    let mut probe = |i: usize| {
        *probes += 1;
        key_of(&items[i]) <= key
    };
    let interpolate = key.v.is_finite();
    while interpolate && hi - lo > LINEAR_CUTOFF {
        let size = hi - lo;
        let (vlo, vhi) = (key_of(&items[lo]).v, key_of(&items[hi - 1]).v);
        if !(vlo < vhi) {
            break;
        }
        let frac = ((key.v - vlo) / (vhi - vlo)).clamp(0.0, 1.0);
        let pos = lo + ((size - 1) as f64 * frac) as usize;
        let step = (size as f64).sqrt() as usize;
        if probe(pos) {
            lo = pos + 1;
            for _ in 0..MAX_JUMPS {
                let p = lo + step - 1;
                if p >= hi {
                    break;
                }
                if probe(p) {
                    lo = p + 1;
                } else {
                    hi = p;
                    break;
                }
            }
        } else {
            hi = pos;
            for _ in 0..MAX_JUMPS {
                if hi < lo + step {
                    break;
                }
                let p = hi - step;
                if probe(p) {
                    lo = p + 1;
                    break;
                }
                hi = p;
            }
        }
        if hi - lo > size / 4 {
            break;
        }
    }
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if probe(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

impl<H: Clone> XIndex<H> {
    pub fn new() -> Self {
        XIndex::default()
    }

    /// Builds from strictly increasing keys.
    pub fn build(entries: Vec<(Key, H)>) -> Result<Self> {
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::domain("index keys must be strictly increasing"));
        }
        let mut ix = XIndex::new();
        ix.rebuild_from(entries);
        Ok(ix)
    }

    fn rebuild_from(&mut self, entries: Vec<(Key, H)>) {
        self.count = entries.len();
        self.rebuilt_at = self.count;
        self.target = bucket_target(self.count);
        self.seps.clear();
        self.buckets.clear();
        let mut it = entries.into_iter().peekable();
        while it.peek().is_some() {
            let b: Vec<(Key, H)> = it.by_ref().take(self.target).collect();
            self.seps.push(b[0].0);
            self.buckets.push(b);
        }
    }

    fn maybe_rebuild(&mut self) {
        if self.count > 2 * self.rebuilt_at.max(1) || self.count < self.rebuilt_at / 2 {
            let entries: Vec<(Key, H)> = self.buckets.drain(..).flatten().collect();
            self.rebuild_from(entries);
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    /// Cumulative probe count over all searches.
    pub fn probes(&self) -> u64 {
        self.probes.get()
    }

    pub fn reset_probes(&self) {
        self.probes.reset();
    }

    /// Bucket covering `key` and the in-bucket rank of `key`.
    fn locate(&self, key: Key) -> Option<(usize, usize)> {
        if self.buckets.is_empty() {
            return None;
        }
        let mut probes = 0;
        let b = rank(&self.seps, key, |k| *k, &mut probes).max(1) - 1;
        let r = rank(&self.buckets[b], key, |e| e.0, &mut probes);
        self.probes.add(probes);
        Some((b, r))
    }

    /// Greatest entry with key `≤ key`.
    pub fn predecessor(&self, key: Key) -> Option<(Key, &H)> {
        let (b, r) = self.locate(key)?;
        let e = if r > 0 {
            &self.buckets[b][r - 1]
        } else if b > 0 {
            self.buckets[b - 1].last()?
        } else {
            return None;
        };
        Some((e.0, &e.1))
    }

    /// Smallest entry with key `≥ key`.
    pub fn successor(&self, key: Key) -> Option<(Key, &H)> {
        let (b, r) = self.locate(key)?;
        let bucket = &self.buckets[b];
        let e = if r > 0 && bucket[r - 1].0 == key {
            &bucket[r - 1]
        } else if r < bucket.len() {
            &bucket[r]
        } else {
            self.buckets.get(b + 1)?.first()?
        };
        Some((e.0, &e.1))
    }

    /// Handle of the greatest key whose coordinate is `≤ x`.
    pub fn search(&self, x: f64) -> Option<&H> {
        self.predecessor(Key::highest(x)).map(|(_, h)| h)
    }

    pub fn get(&self, key: Key) -> Option<&H> {
        self.predecessor(key).filter(|(k, _)| *k == key).map(|(_, h)| h)
    }

    pub fn get_mut(&mut self, key: Key) -> Option<&mut H> {
        let (b, r) = self.locate(key)?;
        let e = self.buckets[b].get_mut(r.checked_sub(1)?)?;
        (e.0 == key).then_some(&mut e.1)
    }

    pub fn insert(&mut self, key: Key, handle: H) -> Result<()> {
        let Some((b, r)) = self.locate(key) else {
            self.rebuild_from(vec![(key, handle)]);
            return Ok(());
        };
        if r > 0 && self.buckets[b][r - 1].0 == key {
            return Err(Error::domain(format!("key {key:?} already indexed")));
        }
        self.buckets[b].insert(r, (key, handle));
        if b == 0 && r == 0 {
            self.seps[0] = key;
        }
        self.count += 1;
        if self.buckets[b].len() > 2 * self.target {
            let half = self.buckets[b].len() / 2;
            let tail = self.buckets[b].split_off(half);
            self.seps.insert(b + 1, tail[0].0);
            self.buckets.insert(b + 1, tail);
        }
        self.maybe_rebuild();
        Ok(())
    }

    pub fn remove(&mut self, key: Key) -> Result<H> {
        let found = self
            .locate(key)
            .filter(|&(b, r)| r > 0 && self.buckets[b][r - 1].0 == key);
        let Some((b, r)) = found else {
            return Err(Error::domain(format!("key {key:?} not indexed")));
        };
        let (_, h) = self.buckets[b].remove(r - 1);
        self.count -= 1;
        if self.buckets[b].is_empty() {
            self.buckets.remove(b);
            self.seps.remove(b);
        }
        self.maybe_rebuild();
        Ok(h)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Key, H)> {
        self.buckets.iter().flatten()
    }

    pub fn audit(&self) -> Result<(), AuditError> {
        audit_ensure!(self.seps.len() == self.buckets.len(), None, "separator count mismatch");
        let mut total = 0;
        let mut prev: Option<Key> = None;
        for (i, b) in self.buckets.iter().enumerate() {
            audit_ensure!(!b.is_empty(), Some(i), "empty bucket");
            audit_ensure!(
                b.len() <= 2 * self.target,
                Some(i),
                "bucket load {} over {}",
                b.len(),
                2 * self.target
            );
            audit_ensure!(self.seps[i] <= b[0].0, Some(i), "key below its separator");
            if i > 0 {
                audit_ensure!(prev.unwrap() < self.seps[i], Some(i), "separator below previous bucket");
            }
            for e in b {
                audit_ensure!(prev.is_none_or(|p| p < e.0), Some(i), "keys out of order");
                prev = Some(e.0);
            }
            total += b.len();
        }
        audit_ensure!(total == self.count, None, "count {} but {} keys", self.count, total);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{generate, DistributionSpec};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k(x: f64, id: u64) -> Key {
        Key::new(x, id)
    }

    fn p8_index() -> XIndex<u64> {
        XIndex::build((1..=8).map(|i| (k(i as f64, i), i)).collect()).unwrap()
    }

    /// Predecessor by scan over a sorted slice.
    fn oracle_pred(sorted: &[Key], key: Key) -> Option<Key> {
        sorted.iter().rev().find(|&&s| s <= key).copied()
    }

    #[test]
    fn examples() {
        let empty = XIndex::<u64>::new();
        assert_eq!(empty.search(3.0), None);
        let ix = p8_index();
        ix.audit().unwrap();
        assert_eq!(ix.search(4.5), Some(&4));
        assert_eq!(ix.search(0.5), None);
        assert_eq!(ix.search(6.9), Some(&6));
        assert_eq!(ix.search(8.0), Some(&8));
        assert_eq!(ix.successor(Key::lowest(4.5)).map(|e| *e.1), Some(5));
        assert_eq!(ix.successor(k(4.0, 4)).map(|e| *e.1), Some(4));
        assert_eq!(ix.successor(Key::lowest(8.5)), None);
        assert!(XIndex::build(vec![(k(2., 1), 0), (k(1., 2), 0)]).is_err());
        assert!(XIndex::build(vec![(k(1., 1), 0), (k(1., 1), 0)]).is_err());
    }

    #[test]
    fn insert_then_search() {
        let mut ix = XIndex::new();
        ix.insert(k(3.0, 7), 'a').unwrap();
        assert_eq!(ix.search(3.0), Some(&'a'));
        assert!(ix.insert(k(3.0, 7), 'b').is_err());
        assert_eq!(ix.remove(k(3.0, 7)), Ok('a'));
        assert!(ix.remove(k(3.0, 7)).is_err());
        assert!(ix.is_empty());
    }

    #[test]
    fn separator_deletion() {
        let mut ix: XIndex<u64> = XIndex::build((0..100).map(|i| (k(i as f64, i), i)).collect()).unwrap();
        let seps = ix.seps.clone();
        for s in &seps[1..] {
            ix.remove(*s).unwrap();
            ix.audit().unwrap();
            assert_eq!(ix.search(s.v), Some(&(s.id - 1)));
            assert_eq!(ix.search(s.v + 0.5), Some(&(s.id - 1)));
            assert_eq!(ix.search(s.v + 1.0), Some(&(s.id + 1)));
        }
    }

    #[test]
    fn inserts_below_the_minimum() {
        let mut ix: XIndex<u64> = XIndex::build((0..20).map(|i| (k(1.0 + i as f64, i), i)).collect()).unwrap();
        for i in 20..80 {
            ix.insert(k(0.0, 100 - i), i).unwrap();
            ix.audit().unwrap();
        }
        let keys: Vec<Key> = ix.iter().map(|e| e.0).collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(ix.get(k(0.0, 21)), Some(&79));
    }

    #[test]
    fn insert_delete_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ix = XIndex::new();
        let mut keys: Vec<Key> = (0..1000).map(|i| k(rng.gen(), i)).collect();
        let mut live: Vec<Key> = Vec::new();
        for &key in &keys {
            ix.insert(key, key.id).unwrap();
            live.insert(live.partition_point(|&s| s < key), key);
            let probe = k(rng.gen(), u64::MAX - 1);
            assert_eq!(ix.predecessor(probe).map(|e| e.0), oracle_pred(&live, probe));
        }
        ix.audit().unwrap();
        keys.shuffle(&mut rng);
        for &key in &keys {
            assert_eq!(ix.remove(key), Ok(key.id));
            live.retain(|&s| s != key);
            let probe = k(rng.gen(), u64::MAX - 1);
            assert_eq!(ix.predecessor(probe).map(|e| e.0), oracle_pred(&live, probe));
            assert_eq!(
                ix.successor(probe).map(|e| e.0),
                live.iter().find(|&&s| s >= probe).copied()
            );
            ix.audit().unwrap();
        }
        assert!(ix.is_empty());
    }

    #[test]
    fn random_workloads_match_oracle() {
        let specs = [
            "uniform:0,1",
            "grid:50",
            "zipf:1000,1.2",
            "mix:0.9*uniform:0,1+0.1*uniform:0.5,0.5000001",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for w in 0..200 {
            let spec: DistributionSpec = specs[w % specs.len()].parse().unwrap();
            let n = rng.gen_range(1..=4096);
            let xs = generate(&spec, n, &mut rng).unwrap();
            let mut keys: Vec<Key> = xs.iter().enumerate().map(|(i, &x)| k(x, i as u64)).collect();
            let (init, rest) = keys.split_at_mut(n / 2);
            init.sort();
            let mut live = init.to_vec();
            let mut ix = XIndex::build(live.iter().map(|&k| (k, k.id)).collect()).unwrap();
            for &key in rest.iter() {
                if rng.gen_bool(0.3) && !live.is_empty() {
                    let victim = live.remove(rng.gen_range(0..live.len()));
                    ix.remove(victim).unwrap();
                }
                ix.insert(key, key.id).unwrap();
                live.insert(live.partition_point(|&s| s < key), key);
                let x = xs[rng.gen_range(0..n)] + if rng.gen_bool(0.5) { 0.0 } else { 1e-9 };
                assert_eq!(ix.search(x).copied(), oracle_pred(&live, Key::highest(x)).map(|k| k.id));
            }
            ix.audit().unwrap();
        }
    }

    fn mean_probes(n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        xs.sort_by(f64::total_cmp);
        let ix = XIndex::build(xs.iter().enumerate().map(|(i, &x)| (k(x, i as u64), ())).collect()).unwrap();
        let searches = 20_000;
        for _ in 0..searches {
            ix.search(rng.gen());
        }
        ix.probes() as f64 / searches as f64
    }

    #[test]
    fn uniform_probe_counts() {
        let n = 100_000;
        let m = mean_probes(n, 13);
        let bound = 2.0 * (n as f64).log2().log2() + 4.0;
        assert!(m <= bound, "mean probes {m} over {bound}");
        let growth = mean_probes(1 << 18, 14) - mean_probes(1 << 10, 14);
        assert!(growth <= 2.0, "probe growth {growth}");
    }

    #[test]
    fn adversarial_fallback_is_logarithmic() {
        let spec: DistributionSpec = "mix:0.5*uniform:0,1+0.5*uniform:1e6,1000001".parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for n in [16usize, 256, 4096, 65536] {
            let mut xs = generate(&spec, n, &mut rng).unwrap();
            // geometric spike: interpolation is useless here
            xs.extend((0..n as i32).map(|i| 2f64.powi(-(i % 1000))));
            xs.sort_by(f64::total_cmp);
            let ix = XIndex::build(xs.iter().enumerate().map(|(i, &x)| (k(x, i as u64), ())).collect()).unwrap();
            let bound = 2.0 * (ix.len() as f64).log2() + 8.0;
            for _ in 0..2000 {
                let before = ix.probes();
                ix.search(xs[rng.gen_range(0..xs.len())]);
                let used = (ix.probes() - before) as f64;
                assert!(used <= bound, "n={n}: {used} probes over {bound}");
            }
        }
    }
}
