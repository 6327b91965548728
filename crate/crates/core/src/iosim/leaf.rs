//! A leaf holding at most `B²` points in `O(K/B)` blocks.
//!
//! The blocks come from sweeping a horizontal line downwards over the points.
//! Initially the points are cut by x into blocks of `B`. Each time the line
//! passes a point, that point dies. When two x-adjacent active blocks hold
//! fewer than `B/2` live points between them, both retire and a new block
//! holding their live points replaces them. For a query `y ≤ c` the blocks
//! active at line position `c` partition the live points by x, and any two
//! neighbours among them hold at least `B/2` answers. The catalog recording
//! every block's x-range and activity interval fits in `O(1)` blocks.
//!
//! Updates are buffered in one block and applied by rebuilding once `B` of
//! them have gathered. A separate block keeps a y-sorted prefix of the
//! smallest points, which the enclosing tree uses as the leaf's point list.

use std::collections::HashSet;

use super::store::{BlockId, BlockStore};
use crate::error::{audit_ensure, AuditError, Result};
use crate::point::{Key, Point, PointId, Query3};

#[derive(Clone, Debug)]
struct Entry {
    /// x-keys of the block's first and last point; `None` if it is empty.
    span: Option<(Key, Key)>,
    /// Active while `dies ≤ line < born`; `None` means unbounded.
    born: Option<Key>,
    dies: Option<Key>,
    block: BlockId,
    initial: bool,
}

impl Entry {
    fn active(&self, line: Key) -> bool {
        self.born.is_none_or(|b| line < b) && self.dies.is_none_or(|d| d <= line)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Pending {
    Insert(Point),
    Delete(PointId),
}

#[derive(Clone, Debug)]
pub struct ExtLeaf {
    b: usize,
    catalog: Vec<Entry>,
    catalog_blocks: Vec<BlockId>,
    buffer: Vec<Pending>,
    buffer_block: BlockId,
    min_block: BlockId,
    min_len: usize,
    len: usize,
}

struct SweepBlock {
    points: Vec<Point>,
    born: Option<Key>,
    dies: Option<Key>,
}

/// Blocks produced by the downward sweep over `points` (sorted by x).
fn sweep(points: &[Point], b: usize) -> Vec<SweepBlock> {
    let mut blocks: Vec<SweepBlock> = points
        .chunks(b)
        .map(|c| SweepBlock {
            points: c.to_vec(),
            born: None,
            dies: None,
        })
        .collect();
    let mut live: Vec<usize> = blocks.iter().map(|s| s.points.len()).collect();
    let mut active: Vec<usize> = (0..blocks.len()).collect();
    let mut owner: std::collections::HashMap<PointId, usize> =
        points.iter().enumerate().map(|(i, p)| (p.id, i / b)).collect();
    let mut order: Vec<Point> = points.to_vec();
    order.sort_by_key(|p| std::cmp::Reverse(p.ykey()));
    for p in order {
        let line = p.ykey();
        let mut blk = owner[&p.id];
        live[blk] -= 1;
        loop {
            let pos = active.iter().position(|&a| a == blk).unwrap();
            let pair = [pos.checked_sub(1), (pos + 1 < active.len()).then_some(pos + 1)]
                .into_iter()
                .flatten()
                .map(|o| (pos.min(o), pos.max(o)))
                .find(|&(l, r)| 2 * (live[active[l]] + live[active[r]]) < b);
            let Some((l, r)) = pair else { break };
            let (x, y) = (active[l], active[r]);
            let merged: Vec<Point> = blocks[x]
                .points
                .iter()
                .chain(&blocks[y].points)
                .filter(|q| q.ykey() < line)
                .copied()
                .collect();
            blocks[x].dies = Some(line);
            blocks[y].dies = Some(line);
            let id = blocks.len();
            for q in &merged {
                owner.insert(q.id, id);
            }
            live.push(merged.len());
            blocks.push(SweepBlock {
                points: merged,
                born: Some(line),
                dies: None,
            });
            active.splice(l..=r, [id]);
            blk = id;
        }
    }
    blocks
}

impl ExtLeaf {
    /// Catalog entries per metadata block.
    fn entries_per_block(b: usize) -> usize {
        (3 * b / 5).max(1)
    }

    /// Up to `2·B²` points, which a merge may produce just before it splits.
    pub fn build(store: &mut BlockStore, mut points: Vec<Point>) -> ExtLeaf {
        let b = store.block_size();
        assert!(points.len() <= 2 * b * b, "leaf over capacity");
        points.sort_by_key(Point::xkey);
        let catalog: Vec<Entry> = sweep(&points, b)
            .into_iter()
            .map(|s| Entry {
                span: s.points.first().map(|f| (f.xkey(), s.points.last().unwrap().xkey())),
                born: s.born,
                dies: s.dies,
                initial: s.born.is_none(),
                block: store.alloc(s.points),
            })
            .collect();
        let catalog_blocks = (0..catalog.len().div_ceil(Self::entries_per_block(b)).max(1))
            .map(|_| store.alloc_meta())
            .collect();
        let mut by_y = points.clone();
        by_y.sort_by_key(Point::ykey);
        by_y.truncate(b);
        let min_len = by_y.len();
        ExtLeaf {
            b,
            catalog,
            catalog_blocks,
            buffer: Vec::new(),
            buffer_block: store.alloc_meta(),
            min_block: store.alloc(by_y),
            min_len,
            len: points.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Block holding the y-sorted prefix of the leaf's smallest points.
    pub fn min_block(&self) -> BlockId {
        self.min_block
    }

    pub fn min_len(&self) -> usize {
        self.min_len
    }

    /// Blocks in use, metadata included.
    pub fn block_count(&self) -> usize {
        self.catalog.len() + self.catalog_blocks.len() + 2
    }

    /// Sweep blocks, excluding the catalog, buffer and prefix blocks.
    pub fn data_blocks(&self) -> usize {
        self.catalog.len()
    }

    fn read_catalog(&self, store: &mut BlockStore) {
        for &m in &self.catalog_blocks {
            store.touch(m).expect("catalog block");
        }
    }

    /// Current contents, reading the base blocks and the buffer.
    fn load(&self, store: &mut BlockStore) -> Vec<Point> {
        self.read_catalog(store);
        let mut pts: Vec<Point> = Vec::with_capacity(self.len);
        for e in self.catalog.iter().filter(|e| e.initial) {
            pts.extend_from_slice(store.read(e.block).expect("leaf block"));
        }
        if !self.buffer.is_empty() {
            store.touch(self.buffer_block).expect("buffer block");
        }
        self.apply_buffer(pts)
    }

    fn apply_buffer(&self, mut pts: Vec<Point>) -> Vec<Point> {
        let gone: HashSet<PointId> = self
            .buffer
            .iter()
            .filter_map(|op| match op {
                Pending::Delete(id) => Some(*id),
                _ => None,
            })
            .collect();
        pts.retain(|p| !gone.contains(&p.id));
        pts.extend(self.buffer.iter().filter_map(|op| match op {
            Pending::Insert(p) => Some(*p),
            _ => None,
        }));
        pts
    }

    fn release(&self, store: &mut BlockStore) {
        for e in &self.catalog {
            store.free(e.block).expect("leaf block");
        }
        for &m in self.catalog_blocks.iter().chain([&self.buffer_block, &self.min_block]) {
            store.free(m).expect("leaf block");
        }
    }

    fn rebuild(&mut self, store: &mut BlockStore) {
        let pts = self.load(store);
        self.release(store);
        *self = ExtLeaf::build(store, pts);
    }

    /// Removes every point and frees the leaf's blocks.
    pub fn take_all(self, store: &mut BlockStore) -> Vec<Point> {
        let pts = self.load(store);
        self.release(store);
        pts
    }

    /// Returns whether the leaf was rebuilt.
    fn push(&mut self, store: &mut BlockStore, op: Pending) -> bool {
        store.touch_mut(self.buffer_block).expect("buffer block");
        self.buffer.push(op);
        let full = self.buffer.len() >= self.b;
        if full {
            self.rebuild(store);
        }
        full
    }

    /// Adds `p`; returns whether the prefix block changed.
    pub fn insert(&mut self, store: &mut BlockStore, p: Point) -> bool {
        assert!(self.len <= self.b * self.b, "leaf over capacity");
        let mut prefix = store.read(self.min_block).expect("prefix block").to_vec();
        let changed = if prefix.last().is_none_or(|m| p.ykey() < m.ykey()) {
            let at = prefix.partition_point(|q| q.ykey() < p.ykey());
            prefix.insert(at, p);
            prefix.truncate(self.b);
            true
        } else if prefix.len() < self.b && prefix.len() == self.len {
            prefix.push(p);
            true
        } else {
            false
        };
        if changed {
            self.min_len = prefix.len();
            store.write(self.min_block, prefix).expect("prefix block");
        }
        self.len += 1;
        self.push(store, Pending::Insert(p)) || changed
    }

    /// Removes `p`, which must be stored here; returns whether the prefix
    /// block changed.
    pub fn delete(&mut self, store: &mut BlockStore, p: Point) -> bool {
        let mut prefix = store.read(self.min_block).expect("prefix block").to_vec();
        let changed = match prefix.iter().position(|q| q.id == p.id) {
            Some(i) => {
                prefix.remove(i);
                self.min_len = prefix.len();
                store.write(self.min_block, prefix).expect("prefix block");
                true
            }
            None => false,
        };
        self.len -= 1;
        let buffered = self.buffer.iter().position(|op| *op == Pending::Insert(p));
        match buffered {
            Some(i) => {
                store.touch_mut(self.buffer_block).expect("buffer block");
                self.buffer.remove(i);
            }
            None => {
                if self.push(store, Pending::Delete(p.id)) {
                    return true;
                }
            }
        }
        if self.min_len == 0 && self.len > 0 {
            self.rebuild(store);
        }
        changed
    }

    /// Removes and returns the point of minimum y.
    pub fn pop_min(&mut self, store: &mut BlockStore) -> Option<Point> {
        let first = *store.read(self.min_block).expect("prefix block").first()?;
        self.delete(store, first);
        Some(first)
    }

    /// Appends the points matching `q` whose y-key exceeds `above`.
    pub fn query(&self, store: &mut BlockStore, q: &Query3, above: Option<Key>, out: &mut Vec<PointId>) {
        if self.len == 0 {
            return;
        }
        let line = q.c_key();
        let (lo, hi) = (q.lo_key(), q.hi_key());
        let keep = |p: &Point| q.contains(p) && above.is_none_or(|k| p.ykey() > k);
        self.read_catalog(store);
        let gone: HashSet<PointId> = self
            .buffer
            .iter()
            .filter_map(|op| match op {
                Pending::Delete(id) => Some(*id),
                _ => None,
            })
            .collect();
        for e in &self.catalog {
            let Some((first, last)) = e.span else { continue };
            if !e.active(line) || last < lo || first > hi {
                continue;
            }
            let pts = store.read(e.block).expect("leaf block");
            out.extend(pts.iter().filter(|p| keep(p) && !gone.contains(&p.id)).map(|p| p.id));
        }
        if !self.buffer.is_empty() {
            store.touch(self.buffer_block).expect("buffer block");
            for op in &self.buffer {
                if let Pending::Insert(p) = op {
                    if keep(p) {
                        out.push(p.id);
                    }
                }
            }
        }
    }

    /// Current points, without transfers.
    pub fn points(&self, store: &BlockStore) -> Vec<Point> {
        let mut pts = Vec::new();
        for e in self.catalog.iter().filter(|e| e.initial) {
            pts.extend_from_slice(store.peek(e.block).expect("leaf block"));
        }
        self.apply_buffer(pts)
    }

    /// The prefix block's points, without transfers.
    pub fn prefix(&self, store: &BlockStore) -> Vec<Point> {
        store.peek(self.min_block).expect("prefix block").to_vec()
    }

    pub fn audit(&self, store: &BlockStore) -> Result<(), AuditError> {
        let b = self.b;
        let mut pts = self.points(store);
        audit_ensure!(
            pts.len() == self.len,
            None,
            "leaf holds {} points, expected {}",
            pts.len(),
            self.len
        );
        audit_ensure!(self.len <= b * b, None, "leaf over capacity");
        let base = self.catalog.iter().filter(|e| e.initial).count();
        audit_ensure!(
            self.catalog.len() <= 2 * base.max(1),
            None,
            "{} sweep blocks for {} base blocks",
            self.catalog.len(),
            base
        );
        audit_ensure!(self.buffer.len() < b, None, "buffer overfull");
        pts.sort_by_key(Point::ykey);
        let prefix = self.prefix(store);
        audit_ensure!(prefix.len() == self.min_len, None, "prefix length mirror stale");
        audit_ensure!(prefix.len() <= b, None, "prefix block overfull");
        audit_ensure!(
            prefix.as_slice() == &pts[..prefix.len()],
            None,
            "prefix block is not the smallest points"
        );
        audit_ensure!(
            self.len == 0 || !prefix.is_empty(),
            None,
            "empty prefix block in a non-empty leaf"
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point::brute_force_query;
    use crate::point::fixtures::q;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n as u64)
            .map(|i| Point::new(i, rng.gen(), rng.gen()).unwrap())
            .collect()
    }

    fn answer(leaf: &ExtLeaf, store: &mut BlockStore, qq: &Query3) -> Vec<PointId> {
        let mut out = Vec::new();
        leaf.query(store, qq, None, &mut out);
        out.sort_unstable();
        out
    }

    #[test]
    fn empty_leaf() {
        let mut s = BlockStore::new(4, 16).unwrap();
        let leaf = ExtLeaf::build(&mut s, Vec::new());
        s.drop_cache();
        s.reset_stats();
        assert!(answer(&leaf, &mut s, &q(0., 1., 1.)).is_empty());
        assert!(s.stats().reads <= 1);
        leaf.audit(&s).unwrap();
    }

    #[test]
    fn full_range_on_sixteen_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = BlockStore::new(4, 16).unwrap();
        let pts = random_points(&mut rng, 16);
        let leaf = ExtLeaf::build(&mut s, pts);
        leaf.audit(&s).unwrap();
        s.drop_cache();
        s.reset_stats();
        assert_eq!(answer(&leaf, &mut s, &q(-1., 2., 2.)), (0..16).collect::<Vec<_>>());
        // catalog blocks plus the four base blocks
        assert!(s.stats().reads <= 3 * (16 / 4 + 1), "{:?}", s.stats());
    }

    #[test]
    fn sweep_catalog_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for b in [4, 8, 16] {
            let pts = random_points(&mut rng, b * b);
            let mut sorted = pts.clone();
            sorted.sort_by_key(Point::xkey);
            let blocks = sweep(&sorted, b);
            assert!(blocks.len() <= 2 * b);
            assert!(blocks.iter().all(|s| s.points.len() <= b));
        }
    }

    #[test]
    fn random_queries_match_and_stay_output_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for b in [4, 8, 16] {
            let mut s = BlockStore::new(b, 4 * b).unwrap();
            let pts = random_points(&mut rng, b * b);
            let leaf = ExtLeaf::build(&mut s, pts.clone());
            for _ in 0..200 {
                let a: f64 = rng.gen();
                let qq = q(a, a + rng.gen::<f64>() * 0.5, rng.gen::<f64>() * 0.5);
                s.drop_cache();
                s.reset_stats();
                let got = answer(&leaf, &mut s, &qq);
                let want = brute_force_query(&pts, &qq);
                assert_eq!(got, want);
                let catalog = leaf.catalog_blocks.len() as u64;
                assert!(
                    s.stats().reads <= catalog + 3 + 4 * want.len() as u64 / b as u64,
                    "b={b} t={} {:?}",
                    want.len(),
                    s.stats()
                );
            }
        }
    }

    #[test]
    fn updates_keep_prefix_and_answers() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = 4;
        let mut s = BlockStore::new(b, 8).unwrap();
        let mut live = random_points(&mut rng, 10);
        let mut leaf = ExtLeaf::build(&mut s, live.clone());
        let mut next = 100;
        for step in 0..600 {
            if live.len() < b * b && (live.is_empty() || rng.gen_bool(0.5)) {
                let p = Point::new(next, rng.gen(), rng.gen()).unwrap();
                next += 1;
                leaf.insert(&mut s, p);
                live.push(p);
            } else if step % 3 == 0 {
                let p = leaf.pop_min(&mut s).unwrap();
                let i = live.iter().position(|x| x.id == p.id).unwrap();
                let m = live.iter().map(|p| p.ykey()).min().unwrap();
                assert_eq!(p.ykey(), m);
                live.swap_remove(i);
            } else {
                let p = live.swap_remove(rng.gen_range(0..live.len()));
                leaf.delete(&mut s, p);
            }
            leaf.audit(&s).unwrap();
            let qq = q(rng.gen(), 1.0, rng.gen());
            assert_eq!(answer(&leaf, &mut s, &qq), brute_force_query(&live, &qq));
        }
        let mut all = leaf.take_all(&mut s);
        all.sort_by_key(|p| p.id);
        live.sort_by_key(|p| p.id);
        assert_eq!(all, live);
    }

    #[test]
    fn threshold_skips_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = BlockStore::new(4, 8).unwrap();
        let pts = random_points(&mut rng, 12);
        let leaf = ExtLeaf::build(&mut s, pts.clone());
        let prefix = leaf.prefix(&s);
        let mut out = Vec::new();
        leaf.query(&mut s, &q(-1., 2., 2.), Some(prefix.last().unwrap().ykey()), &mut out);
        assert_eq!(out.len(), 12 - prefix.len());
        assert!(out.iter().all(|id| prefix.iter().all(|p| p.id != *id)));
    }
}
