//! Static range-minimum queries over a fixed sequence.
//!
//! Sparse table: level `k` holds, for every start position, the argmin of the
//! window of length `2^k`. A query reads two overlapping windows.

use crate::error::{Error, Result};

/// Table and value reads performed by one query.
pub const PROBES_PER_QUERY: usize = 4;

#[derive(Clone, Debug)]
pub struct RmqIndex<T> {
    values: Vec<T>,
    /// `levels[k][i]` is the argmin of `values[i .. i + 2^k]`.
    levels: Vec<Vec<u32>>,
}

impl<T: PartialOrd + Copy> RmqIndex<T> {
    pub fn build(values: Vec<T>) -> Self {
        let n = values.len();
        let mut levels: Vec<Vec<u32>> = Vec::new();
        if n > 0 {
            levels.push((0..n as u32).collect());
            let mut width = 1;
            while 2 * width <= n {
                let prev = levels.last().unwrap();
                let next: Vec<u32> = (0..=n - 2 * width)
                    .map(|i| {
                        let (l, r) = (prev[i], prev[i + width]);
                        if values[r as usize] < values[l as usize] {
                            r
                        } else {
                            l
                        }
                    })
                    .collect();
                levels.push(next);
                width *= 2;
            }
        }
        RmqIndex { values, levels }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn value(&self, i: usize) -> T {
        self.values[i]
    }

    /// Entries stored in the table; the cost of building it.
    pub fn table_size(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// Position of the minimum in `values[i..=j]`, leftmost on ties.
    pub fn query(&self, i: usize, j: usize) -> Result<usize> {
        if i > j || j >= self.values.len() {
            return Err(Error::domain(format!(
                "rmq range [{i}, {j}] invalid for length {}",
                self.values.len()
            )));
        }
        Ok(self.query_unchecked(i, j))
    }

    /// As [`query`](Self::query), adding the number of table and value
    /// reads performed to `probes`.
    pub fn query_counted(&self, i: usize, j: usize, probes: &mut u64) -> Result<usize> {
        let pos = self.query(i, j)?;
        *probes += PROBES_PER_QUERY as u64;
        Ok(pos)
    }

    #[inline]
    pub(crate) fn query_unchecked(&self, i: usize, j: usize) -> usize {
        let len = j - i + 1;
        let k = (usize::BITS - 1 - len.leading_zeros()) as usize;
        let level = &self.levels[k];
        let l = level[i] as usize;
        let r = level[j + 1 - (1 << k)] as usize;
        if self.values[r] < self.values[l] {
            r
        } else {
            l
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Linear-scan argmin, leftmost on ties.
    fn scan_argmin(v: &[f64], i: usize, j: usize) -> usize {
        let mut best = i;
        for k in i..=j {
            if v[k] < v[best] {
                best = k;
            }
        }
        best
    }

    #[test]
    fn examples() {
        let empty = RmqIndex::<f64>::build(vec![]);
        assert!(empty.query(0, 0).is_err());

        let idx = RmqIndex::build(vec![5., 3., 8., 1., 7., 2., 6., 4.]);
        assert_eq!(idx.query(0, 7).unwrap(), 3);
        assert_eq!(idx.query(4, 6).unwrap(), 5);
        for k in 0..8 {
            assert_eq!(idx.query(k, k).unwrap(), k);
        }
        assert!(idx.query(3, 2).is_err());
        assert!(idx.query(0, 8).is_err());

        let ties = RmqIndex::build(vec![2., 2., 2.]);
        for i in 0..3 {
            for j in i..3 {
                assert_eq!(ties.query(i, j).unwrap(), i);
            }
        }
    }

    #[test]
    fn oracle_equivalence_random_arrays() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=256);
            // coarse values so ties occur
            let v: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..40) as f64) * 0.5).collect();
            let idx = RmqIndex::build(v.clone());
            for i in 0..n {
                for j in i..n {
                    let mut probes = 0;
                    assert_eq!(idx.query_counted(i, j, &mut probes).unwrap(), scan_argmin(&v, i, j));
                    assert!(probes <= 4);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn matches_scan(v in prop::collection::vec(-1000.0f64..1000.0, 1..64), a in 0usize..64, b in 0usize..64) {
            let n = v.len();
            let (i, j) = ((a % n).min(b % n), (a % n).max(b % n));
            let idx = RmqIndex::build(v.clone());
            prop_assert_eq!(idx.query(i, j).unwrap(), scan_argmin(&v, i, j));
        }
    }
}
