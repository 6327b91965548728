use std::io::{Read, Write};
use std::num::NonZeroUsize;

use lru::LruCache;

use crate::error::{Error, Result};
use crate::point::Point;

pub type BlockId = u64;

/// Block transfer counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IoStats {
    pub reads: u64,
    pub writes: u64,
    pub cache_hits: u64,
}

impl IoStats {
    /// Reads plus writes.
    pub fn transfers(&self) -> u64 {
        self.reads + self.writes
    }

    pub fn since(&self, earlier: &IoStats) -> IoStats {
        IoStats {
            reads: self.reads - earlier.reads,
            writes: self.writes - earlier.writes,
            cache_hits: self.cache_hits - earlier.cache_hits,
        }
    }
}

#[derive(Clone, Debug)]
enum Slot {
    Free,
    Points(Vec<Point>),
    /// Holds bookkeeping whose contents live with the owning structure; only
    /// its transfers are simulated.
    Meta,
}

/// A simulated disk of blocks of `B` points behind an LRU cache of `M`
/// blocks.
///
/// Touching a resident block costs nothing and counts a cache hit. Touching
/// any other block costs one read, and evicting a dirty block costs one
/// write. Freshly allocated blocks start resident and dirty.
#[derive(Debug)]
pub struct BlockStore {
    b: usize,
    m: usize,
    slots: Vec<Slot>,
    free: Vec<BlockId>,
    /// Resident blocks and their dirty flags.
    cache: LruCache<BlockId, bool>,
    stats: IoStats,
}

const RECORD: usize = 24;
const PAD_ID: u64 = u64::MAX;

impl BlockStore {
    pub fn new(b: usize, m: usize) -> Result<Self> {
        if b == 0 {
            return Err(Error::config("block size must be positive"));
        }
        let cap = NonZeroUsize::new(m).ok_or_else(|| Error::config("cache must hold at least one block"))?;
        Ok(BlockStore {
            b,
            m,
            slots: Vec::new(),
            free: Vec::new(),
            cache: LruCache::new(cap),
            stats: IoStats::default(),
        })
    }

    /// Points per block.
    pub fn block_size(&self) -> usize {
        self.b
    }

    /// Cache capacity in blocks.
    pub fn capacity(&self) -> usize {
        self.m
    }

    pub fn stats(&self) -> IoStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = IoStats::default();
    }

    /// Live blocks, point and metadata alike.
    pub fn live_blocks(&self) -> usize {
        self.slots.len() - self.free.len()
    }

    pub fn resident(&self) -> usize {
        self.cache.len()
    }

    pub fn is_resident(&self, id: BlockId) -> bool {
        self.cache.contains(&id)
    }

    fn slot(&self, id: BlockId) -> Result<&Slot> {
        match self.slots.get(id as usize) {
            Some(Slot::Free) | None => Err(Error::InvalidBlock(id)),
            Some(s) => Ok(s),
        }
    }

    fn access(&mut self, id: BlockId, dirty: bool) {
        if let Some(d) = self.cache.get_mut(&id) {
            *d |= dirty;
            self.stats.cache_hits += 1;
            return;
        }
        self.stats.reads += 1;
        self.admit(id, dirty);
    }

    fn admit(&mut self, id: BlockId, dirty: bool) {
        if let Some((_, true)) = self.cache.push(id, dirty).filter(|(old, _)| *old != id) {
            self.stats.writes += 1;
        }
    }

    fn allocate(&mut self, slot: Slot) -> BlockId {
        let id = match self.free.pop() {
            Some(id) => {
                self.slots[id as usize] = slot;
                id
            }
            None => {
                self.slots.push(slot);
                (self.slots.len() - 1) as BlockId
            }
        };
        self.admit(id, true);
        id
    }

    /// A new block holding `points`; at most `B` of them.
    pub fn alloc(&mut self, points: Vec<Point>) -> BlockId {
        assert!(points.len() <= self.b, "block overflow");
        self.allocate(Slot::Points(points))
    }

    /// Stores `points` in as few new blocks as possible.
    pub fn alloc_run(&mut self, points: &[Point]) -> Vec<BlockId> {
        points.chunks(self.b).map(|c| self.alloc(c.to_vec())).collect()
    }

    /// A new metadata block.
    pub fn alloc_meta(&mut self) -> BlockId {
        self.allocate(Slot::Meta)
    }

    pub fn read(&mut self, id: BlockId) -> Result<&[Point]> {
        if !matches!(self.slot(id)?, Slot::Points(_)) {
            return Err(Error::InvalidBlock(id));
        }
        self.access(id, false);
        match &self.slots[id as usize] {
            Slot::Points(p) => Ok(p),
            _ => unreachable!(),
        }
    }

    pub fn write(&mut self, id: BlockId, points: Vec<Point>) -> Result<()> {
        if !matches!(self.slot(id)?, Slot::Points(_)) {
            return Err(Error::InvalidBlock(id));
        }
        if points.len() > self.b {
            return Err(Error::domain(format!(
                "{} points exceed block size {}",
                points.len(),
                self.b
            )));
        }
        self.access(id, true);
        self.slots[id as usize] = Slot::Points(points);
        Ok(())
    }

    /// Reads a metadata block.
    pub fn touch(&mut self, id: BlockId) -> Result<()> {
        self.slot(id)?;
        self.access(id, false);
        Ok(())
    }

    /// Rewrites a metadata block.
    pub fn touch_mut(&mut self, id: BlockId) -> Result<()> {
        self.slot(id)?;
        self.access(id, true);
        Ok(())
    }

    /// Contents without any transfer; for audits.
    pub fn peek(&self, id: BlockId) -> Result<&[Point]> {
        match self.slot(id)? {
            Slot::Points(p) => Ok(p),
            _ => Err(Error::InvalidBlock(id)),
        }
    }

    /// Discards a block without writing it back.
    pub fn free(&mut self, id: BlockId) -> Result<()> {
        self.slot(id)?;
        self.cache.pop(&id);
        self.slots[id as usize] = Slot::Free;
        self.free.push(id);
        Ok(())
    }

    /// Writes back every dirty resident block.
    pub fn flush(&mut self) {
        for (_, dirty) in self.cache.iter_mut() {
            if *dirty {
                *dirty = false;
                self.stats.writes += 1;
            }
        }
    }

    /// Empties the cache, writing back dirty blocks.
    pub fn drop_cache(&mut self) {
        self.flush();
        self.cache.clear();
    }

    /// Writes every point block as an 8-byte little-endian id followed by
    /// `B` records of id, x and y (8 bytes each, little-endian). Short
    /// blocks are padded with records whose id is `u64::MAX`.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + self.b * RECORD);
        for (id, slot) in self.slots.iter().enumerate() {
            let Slot::Points(points) = slot else { continue };
            buf.clear();
            buf.extend_from_slice(&(id as u64).to_le_bytes());
            for i in 0..self.b {
                let (pid, x, y) = points.get(i).map_or((PAD_ID, 0.0, 0.0), |p| (p.id, p.x, p.y));
                buf.extend_from_slice(&pid.to_le_bytes());
                buf.extend_from_slice(&x.to_le_bytes());
                buf.extend_from_slice(&y.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Rebuilds a store from [`BlockStore::dump`] output. Ids missing from the
    /// file become free blocks; the cache starts empty.
    pub fn restore<R: Read>(mut r: R, b: usize, m: usize) -> Result<Self> {
        let mut store = BlockStore::new(b, m)?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let stride = 8 + b * RECORD;
        if bytes.len() % stride != 0 {
            return Err(Error::Io(format!(
                "dump length {} is not a multiple of {stride}",
                bytes.len()
            )));
        }
        let word = |s: &[u8]| u64::from_le_bytes(s.try_into().unwrap());
        for chunk in bytes.chunks(stride) {
            let id = word(&chunk[..8]) as usize;
            let mut points = Vec::new();
            for rec in chunk[8..].chunks(RECORD) {
                let pid = word(&rec[..8]);
                if pid == PAD_ID {
                    continue;
                }
                let x = f64::from_bits(word(&rec[8..16]));
                let y = f64::from_bits(word(&rec[16..24]));
                points.push(Point::new(pid, x, y)?);
            }
            if store.slots.len() <= id {
                store.slots.resize(id + 1, Slot::Free);
            }
            if !matches!(store.slots[id], Slot::Free) {
                return Err(Error::Io(format!("block {id} appears twice")));
            }
            store.slots[id] = Slot::Points(points);
        }
        store.free = (0..store.slots.len() as u64)
            .rev()
            .filter(|&i| matches!(store.slots[i as usize], Slot::Free))
            .collect();
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(ids: std::ops::Range<u64>) -> Vec<Point> {
        ids.map(|i| Point::new(i, i as f64, -(i as f64)).unwrap()).collect()
    }

    fn cold(b: usize, m: usize, blocks: usize) -> (BlockStore, Vec<BlockId>) {
        let mut s = BlockStore::new(b, m).unwrap();
        let ids = (0..blocks)
            .map(|i| s.alloc(pts(i as u64 * 10..i as u64 * 10 + 2)))
            .collect();
        s.drop_cache();
        s.reset_stats();
        (s, ids)
    }

    #[test]
    fn repeated_read_hits_cache() {
        let (mut s, ids) = cold(4, 2, 1);
        s.read(ids[0]).unwrap();
        s.read(ids[0]).unwrap();
        assert_eq!((s.stats().reads, s.stats().cache_hits), (1, 1));
    }

    #[test]
    fn single_block_cache_evicts() {
        let (mut s, ids) = cold(4, 1, 2);
        for &i in &[ids[0], ids[1], ids[0]] {
            s.read(i).unwrap();
        }
        assert_eq!(s.stats().reads, 3);
        assert_eq!(s.stats().writes, 0);
    }

    #[test]
    fn sequential_scan() {
        let (mut s, ids) = cold(4, 3, 10);
        for &i in &ids {
            s.read(i).unwrap();
        }
        assert_eq!(s.stats().reads, 10);
        assert!(s.resident() <= 3);
    }

    #[test]
    fn dirty_eviction_writes() {
        let (mut s, ids) = cold(4, 1, 2);
        s.write(ids[0], pts(0..3)).unwrap();
        s.read(ids[1]).unwrap();
        assert_eq!(
            s.stats(),
            IoStats {
                reads: 2,
                writes: 1,
                cache_hits: 0
            }
        );
        assert_eq!(s.read(ids[0]).unwrap().len(), 3);
    }

    #[test]
    fn invalid_ids_and_overflow() {
        let (mut s, ids) = cold(2, 1, 1);
        assert_eq!(s.read(99).unwrap_err(), Error::InvalidBlock(99));
        assert!(s.write(ids[0], pts(0..3)).is_err());
        s.free(ids[0]).unwrap();
        assert_eq!(s.read(ids[0]).unwrap_err(), Error::InvalidBlock(ids[0]));
        let meta = s.alloc_meta();
        assert!(s.read(meta).is_err());
        s.touch(meta).unwrap();
    }

    #[test]
    fn dump_round_trip() {
        let mut s = BlockStore::new(3, 2).unwrap();
        let a = s.alloc(pts(0..3));
        let b = s.alloc(pts(5..6));
        let gone = s.alloc(pts(7..8));
        s.free(gone).unwrap();
        s.alloc_meta();
        let mut bytes = Vec::new();
        s.dump(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 2 * (8 + 3 * 24));
        let mut r = BlockStore::restore(bytes.as_slice(), 3, 2).unwrap();
        assert_eq!(r.read(a).unwrap(), pts(0..3).as_slice());
        assert_eq!(r.read(b).unwrap(), pts(5..6).as_slice());
        assert!(r.read(gone).is_err());
        assert!(BlockStore::restore(&bytes[..10], 3, 2).is_err());
    }
}
