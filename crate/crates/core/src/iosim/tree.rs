//! The external weight-balanced exponential tree.
//!
//! Leaves are [`ExtLeaf`]s of up to `B²` points. A node at level `i ≥ 1`
//! weighs (in points) about `w_i = ⌈B^(2·(7/6)^i)⌉` and keeps a block of the
//! `B` smallest points of its subtree not kept higher up, so the lists form
//! a min-heap on y. For every child interval `[k, l]` a node also keeps a
//! table entry: the children's lists over that interval merged by y. A query
//! walks the two boundary paths and scans the table entry for the children
//! strictly inside the query, descending into every child whose whole list
//! was reported.
//!
//! Leaves are found through a static B-tree over leaf boundaries whose
//! transfers are counted apart from the tree's.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use super::leaf::ExtLeaf;
use super::store::{BlockId, BlockStore, IoStats};
use crate::error::{audit_ensure, AuditError, Error, Result};
use crate::metrics::{MetricsSnapshot, StructureMetrics};
use crate::point::{check_unique_ids, Key, Point, PointId, Query3};
use crate::ThreeSided;

const NIL: usize = usize::MAX;

/// Block size, cache size and the derived weight table.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtParams {
    b: usize,
    m: usize,
    table: Vec<usize>,
}

impl ExtParams {
    /// `B ≥ 2` points per block and an `M`-block cache.
    pub fn new(b: usize, m: usize) -> Result<Self> {
        if b < 2 {
            return Err(Error::config(format!("block size must be at least 2, got {b}")));
        }
        if m == 0 {
            return Err(Error::config("cache must hold at least one block"));
        }
        let mut table = vec![b * b];
        for i in 1.. {
            let e = (b as f64).log2() * 2.0 * (7.0f64 / 6.0).powi(i);
            if e >= 60.0 {
                table.push(usize::MAX / 8);
                break;
            }
            table.push(e.exp2().ceil() as usize);
        }
        Ok(ExtParams { b, m, table })
    }

    /// `M = 4·B`.
    pub fn with_block(b: usize) -> Result<Self> {
        ExtParams::new(b, 4 * b)
    }

    pub fn block_size(&self) -> usize {
        self.b
    }

    pub fn cache_blocks(&self) -> usize {
        self.m
    }

    /// `w_i`; `w_0 = B²` is the leaf capacity.
    pub fn weight(&self, level: u32) -> usize {
        self.table[(level as usize).min(self.table.len() - 1)]
    }

    /// `d_i = w_i / w_{i−1}`.
    pub fn degree(&self, level: u32) -> f64 {
        if level == 0 {
            return 1.0;
        }
        self.weight(level) as f64 / self.weight(level - 1) as f64
    }

    /// Heaviest possible child of a level-`i` node.
    fn max_child(&self, level: u32) -> usize {
        if level <= 1 {
            self.b * self.b
        } else {
            2 * self.weight(level - 1) - 1
        }
    }

    /// Assigns consecutive children of the given weights to level-`i`
    /// parents, preferring about `w_i` per parent and keeping every parent
    /// inside its weight band when some grouping allows it. Everything goes
    /// under one root as soon as a root could hold it.
    fn group(&self, level: u32, weights: &[usize]) -> Vec<usize> {
        let total: usize = weights.iter().sum();
        let wi = self.weight(level);
        let floor = self.min_weight(level);
        let split = |groups: usize| -> Vec<usize> {
            let per = total as f64 / groups as f64;
            let mut cum = 0usize;
            weights
                .iter()
                .map(|&w| {
                    let g = ((cum as f64 + w as f64 / 2.0) / per) as usize;
                    cum += w;
                    g.min(groups - 1)
                })
                .collect()
        };
        let valid = |assign: &[usize], groups: usize| {
            let mut sums = vec![0usize; groups];
            for (&g, &w) in assign.iter().zip(weights) {
                sums[g] += w;
            }
            sums.iter().all(|&s| s < 2 * wi && (groups == 1 || s >= floor))
        };
        if total < 2 * wi {
            return vec![0; weights.len()];
        }
        let start = ((total as f64 / wi as f64).round() as usize).clamp(1, weights.len());
        for delta in 0..weights.len() {
            for g in [start.checked_sub(delta), start.checked_add(delta)]
                .into_iter()
                .flatten()
            {
                if g == 0 || g > weights.len() {
                    continue;
                }
                let assign = split(g);
                let used = assign.last().map_or(0, |&l| l + 1);
                let dense: Vec<usize> = {
                    let mut seen = vec![usize::MAX; g];
                    let mut k = 0;
                    assign
                        .iter()
                        .map(|&a| {
                            if seen[a] == usize::MAX {
                                seen[a] = k;
                                k += 1;
                            }
                            seen[a]
                        })
                        .collect()
                };
                if valid(&dense, used) {
                    return dense;
                }
            }
        }
        split(start)
    }

    /// Lightest non-root node at level `i ≥ 1`: `½·w_i + 1`, lowered where
    /// children are too coarse for a split to land there.
    pub fn min_weight(&self, level: u32) -> usize {
        let w = self.weight(level);
        (w / 2 + 1)
            .min(w.saturating_sub(self.max_child(level).div_ceil(2)))
            .max(1)
    }
}

#[derive(Clone, Debug)]
struct ENode {
    level: u32,
    parent: usize,
    pos: usize,
    /// Lower x boundary of the subtree.
    low: Key,
    children: Vec<usize>,
    /// Points whose x falls in the subtree, wherever they are kept.
    weight: usize,
    plist: BlockId,
    plist_len: usize,
    /// Entry `[k, l]` sits at `l·(l+1)/2 + k`.
    table: Vec<Vec<BlockId>>,
    leaf: Option<ExtLeaf>,
    dirty: bool,
    alive: bool,
}

fn tri(k: usize, l: usize) -> usize {
    l * (l + 1) / 2 + k
}

#[derive(Debug)]
pub struct ExtWbTree {
    params: ExtParams,
    store: RefCell<BlockStore>,
    nodes: Vec<ENode>,
    free: Vec<usize>,
    root: Option<usize>,
    /// Leaf boundaries in x order.
    leaves: Vec<(Key, usize)>,
    xaccess_height: u32,
    xaccess_ios: Cell<u64>,
    dir: HashMap<PointId, Point>,
    dirty: Vec<usize>,
    table_ios: u64,
    metrics: StructureMetrics,
}

impl ExtWbTree {
    pub fn new(params: ExtParams) -> Self {
        let store = BlockStore::new(params.b, params.m).expect("validated parameters");
        ExtWbTree {
            params,
            store: RefCell::new(store),
            nodes: Vec::new(),
            free: Vec::new(),
            root: None,
            leaves: Vec::new(),
            xaccess_height: 0,
            xaccess_ios: Cell::new(0),
            dir: HashMap::new(),
            dirty: Vec::new(),
            table_ios: 0,
            metrics: StructureMetrics::default(),
        }
    }

    /// Leaves of `B²` points, then levels grouped by weight.
    pub fn build(points: &[Point], params: ExtParams) -> Result<Self> {
        check_unique_ids(points)?;
        let mut t = ExtWbTree::new(params);
        let mut pts = points.to_vec();
        pts.sort_by_key(Point::xkey);
        if pts.is_empty() {
            return Ok(t);
        }
        let cap = t.params.b * t.params.b;
        let mut cur: Vec<usize> = Vec::new();
        for (i, chunk) in pts.chunks(cap).enumerate() {
            let low = if i == 0 { Key::NEG_INFINITY } else { chunk[0].xkey() };
            cur.push(t.new_leaf(low, chunk.to_vec(), chunk.len()));
        }
        for p in &pts {
            t.dir.insert(p.id, *p);
        }
        let mut level = 0;
        while cur.len() > 1 {
            level += 1;
            let weights: Vec<usize> = cur.iter().map(|&c| t.nodes[c].weight).collect();
            let assign = t.params.group(level, &weights);
            let mut parents: Vec<usize> = Vec::new();
            for (&c, &g) in cur.iter().zip(&assign) {
                if parents.len() <= g {
                    let low = t.nodes[c].low;
                    parents.push(t.new_internal(level, low));
                }
                let p = *parents.last().unwrap();
                t.attach(p, c);
            }
            for &p in &parents {
                t.fill(p);
            }
            cur = parents;
        }
        t.root = Some(cur[0]);
        t.flush_tables();
        t.rebuild_xaccess();
        Ok(t)
    }

    pub fn params(&self) -> &ExtParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.dir.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dir.is_empty()
    }

    /// Level of the root; 0 when the root is a leaf or the tree is empty.
    pub fn height(&self) -> u32 {
        self.root.map_or(0, |r| self.nodes[r].level)
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    /// Transfers of the tree proper.
    pub fn io_stats(&self) -> IoStats {
        self.store.borrow().stats()
    }

    /// Transfers charged to leaf lookups.
    pub fn xaccess_ios(&self) -> u64 {
        self.xaccess_ios.get()
    }

    /// Transfers spent rebuilding tables.
    pub fn table_ios(&self) -> u64 {
        self.table_ios
    }

    pub fn reset_io(&self) {
        self.store.borrow_mut().reset_stats();
        self.xaccess_ios.set(0);
    }

    /// Writes back and evicts every cached block.
    pub fn drop_cache(&self) {
        self.store.borrow_mut().drop_cache();
    }

    pub fn store(&self) -> std::cell::Ref<'_, BlockStore> {
        self.store.borrow()
    }

    pub fn live_blocks(&self) -> usize {
        self.store.borrow().live_blocks()
    }

    pub fn metrics(&self) -> &StructureMetrics {
        &self.metrics
    }

    pub fn points(&self) -> Vec<Point> {
        let mut v: Vec<Point> = self.dir.values().copied().collect();
        v.sort_by_key(|p| p.id);
        v
    }

    fn alloc(&mut self, node: ENode) -> usize {
        if let Some(i) = self.free.pop() {
            self.nodes[i] = node;
            i
        } else {
            self.nodes.push(node);
            self.nodes.len() - 1
        }
    }

    fn new_leaf(&mut self, low: Key, pts: Vec<Point>, weight: usize) -> usize {
        let leaf = ExtLeaf::build(self.store.get_mut(), pts);
        self.alloc(ENode {
            level: 0,
            parent: NIL,
            pos: 0,
            low,
            children: Vec::new(),
            weight,
            plist: leaf.min_block(),
            plist_len: leaf.min_len(),
            table: Vec::new(),
            leaf: Some(leaf),
            dirty: false,
            alive: true,
        })
    }

    fn new_internal(&mut self, level: u32, low: Key) -> usize {
        let plist = self.store.get_mut().alloc(Vec::new());
        let x = self.alloc(ENode {
            level,
            parent: NIL,
            pos: 0,
            low,
            children: Vec::new(),
            weight: 0,
            plist,
            plist_len: 0,
            table: Vec::new(),
            leaf: None,
            dirty: false,
            alive: true,
        });
        self.mark(x);
        x
    }

    fn release(&mut self, x: usize) {
        let n = &mut self.nodes[x];
        n.alive = false;
        n.children.clear();
        let table = std::mem::take(&mut n.table);
        let plist = n.plist;
        let store = self.store.get_mut();
        for id in table.into_iter().flatten() {
            store.free(id).expect("table block");
        }
        if n.level > 0 {
            store.free(plist).expect("list block");
        }
        self.free.push(x);
    }

    fn attach(&mut self, p: usize, c: usize) {
        let wc = self.nodes[c].weight;
        self.nodes[p].children.push(c);
        self.nodes[p].weight += wc;
        self.nodes[c].parent = p;
        self.nodes[c].pos = self.nodes[p].children.len() - 1;
        self.mark(p);
    }

    fn renumber(&mut self, p: usize, from: usize) {
        for i in from..self.nodes[p].children.len() {
            let c = self.nodes[p].children[i];
            self.nodes[c].parent = p;
            self.nodes[c].pos = i;
        }
        self.mark(p);
    }

    /// Schedules `x`'s table for rebuilding.
    fn mark(&mut self, x: usize) {
        if x != NIL && self.nodes[x].alive && self.nodes[x].leaf.is_none() && !self.nodes[x].dirty {
            self.nodes[x].dirty = true;
            self.dirty.push(x);
        }
    }

    fn mark_parent(&mut self, x: usize) {
        let p = self.nodes[x].parent;
        self.mark(p);
    }

    fn sync_leaf(&mut self, x: usize) {
        let leaf = self.nodes[x].leaf.as_ref().unwrap();
        let (b, l) = (leaf.min_block(), leaf.min_len());
        self.nodes[x].plist = b;
        self.nodes[x].plist_len = l;
    }

    fn read_plist(&mut self, x: usize) -> Vec<Point> {
        let id = self.nodes[x].plist;
        self.store.get_mut().read(id).expect("list block").to_vec()
    }

    fn write_plist(&mut self, x: usize, pl: Vec<Point>) {
        debug_assert!(self.nodes[x].leaf.is_none());
        self.nodes[x].plist_len = pl.len();
        let id = self.nodes[x].plist;
        self.store.get_mut().write(id, pl).expect("list block");
        self.mark_parent(x);
    }

    fn child_toward(&self, x: usize, key: Key) -> usize {
        let ch = &self.nodes[x].children;
        let i = ch.partition_point(|&c| self.nodes[c].low <= key);
        ch[i.max(1) - 1]
    }

    fn rebuild_xaccess(&mut self) {
        self.leaves.clear();
        if let Some(r) = self.root {
            let mut stack = vec![r];
            while let Some(x) = stack.pop() {
                if self.nodes[x].leaf.is_some() {
                    self.leaves.push((self.nodes[x].low, x));
                } else {
                    stack.extend(self.nodes[x].children.iter().rev());
                }
            }
        }
        let b = self.params.b as f64;
        self.xaccess_height = ((self.leaves.len().max(1) as f64).ln() / b.ln()).ceil().max(1.0) as u32;
        self.xaccess_ios
            .set(self.xaccess_ios.get() + self.leaves.len().div_ceil(self.params.b) as u64);
    }

    /// Leaf whose range holds `key`, charging one transfer per B-tree level.
    fn leaf_for(&self, key: Key) -> usize {
        self.xaccess_ios
            .set(self.xaccess_ios.get() + self.xaccess_height as u64);
        let i = self.leaves.partition_point(|&(low, _)| low <= key);
        self.leaves[i.max(1) - 1].1
    }

    fn leaf_high(&self, x: usize) -> Key {
        let i = self.leaves.partition_point(|&(low, _)| low <= self.nodes[x].low);
        self.leaves.get(i).map_or(Key::INFINITY, |&(low, _)| low)
    }

    fn path_up(&self, mut x: usize) -> Vec<usize> {
        let mut v = vec![x];
        while self.nodes[x].parent != NIL {
            x = self.nodes[x].parent;
            v.push(x);
        }
        v
    }

    /// Rebuilds every stale table.
    fn flush_tables(&mut self) {
        let before = self.store.get_mut().stats().transfers();
        for x in std::mem::take(&mut self.dirty) {
            if !self.nodes[x].alive || !self.nodes[x].dirty {
                continue;
            }
            self.nodes[x].dirty = false;
            let store = self.store.get_mut();
            for id in std::mem::take(&mut self.nodes[x].table).into_iter().flatten() {
                store.free(id).expect("table block");
            }
            let lists: Vec<Vec<Point>> = self.nodes[x]
                .children
                .iter()
                .map(|&c| store.read(self.nodes[c].plist).expect("list block").to_vec())
                .collect();
            let d = lists.len();
            let mut table = vec![Vec::new(); d * (d + 1) / 2];
            for l in 0..d {
                for k in 0..=l {
                    let mut merged: Vec<Point> = lists[k..=l].iter().flatten().copied().collect();
                    merged.sort_by_key(Point::ykey);
                    table[tri(k, l)] = store.alloc_run(&merged);
                }
            }
            let written: usize = table.iter().map(Vec::len).sum();
            self.metrics.aux_rebuild_work.add((written + d) as u64);
            self.nodes[x].table = table;
        }
        self.table_ios += self.store.get_mut().stats().transfers() - before;
    }

    /// Refills `x`'s list from its children until it holds `B` points or
    /// the subtree has none left.
    fn fill(&mut self, x: usize) {
        if self.nodes[x].leaf.is_some() {
            return;
        }
        let b = self.params.b;
        let mut pl = self.read_plist(x);
        while pl.len() < b {
            let mut best: Option<(Key, usize)> = None;
            for i in 0..self.nodes[x].children.len() {
                let c = self.nodes[x].children[i];
                if self.nodes[c].plist_len == 0 {
                    continue;
                }
                let head = self.store.get_mut().read(self.nodes[c].plist).expect("list block")[0].ykey();
                if best.is_none_or(|(k, _)| head < k) {
                    best = Some((head, c));
                }
            }
            let Some((_, c)) = best else { break };
            pl.push(self.take_min(c));
        }
        self.write_plist(x, pl);
    }

    fn take_min(&mut self, c: usize) -> Point {
        if let Some(leaf) = self.nodes[c].leaf.as_mut() {
            let p = leaf.pop_min(self.store.get_mut()).expect("non-empty leaf");
            self.sync_leaf(c);
            self.mark_parent(c);
            return p;
        }
        let mut pl = self.read_plist(c);
        let p = pl.remove(0);
        self.write_plist(c, pl);
        self.fill(c);
        p
    }

    /// Places `p`, whose leaf lies below `x`, at `x` or further down.
    fn swap_down(&mut self, mut x: usize, mut p: Point) {
        let b = self.params.b;
        loop {
            if self.nodes[x].leaf.is_some() {
                let leaf = self.nodes[x].leaf.as_mut().unwrap();
                if leaf.insert(self.store.get_mut(), p) {
                    self.mark_parent(x);
                }
                self.sync_leaf(x);
                return;
            }
            let mut pl = self.read_plist(x);
            if pl.len() < b || p.ykey() < pl.last().unwrap().ykey() {
                let at = pl.partition_point(|q| q.ykey() < p.ykey());
                pl.insert(at, p);
                let excess = (pl.len() > b).then(|| pl.pop().unwrap());
                self.write_plist(x, pl);
                match excess {
                    Some(e) => p = e,
                    None => return,
                }
            }
            x = self.child_toward(x, p.xkey());
        }
    }

    pub fn insert(&mut self, p: Point) -> Result<()> {
        if self.dir.contains_key(&p.id) {
            return Err(Error::DuplicateId(p.id));
        }
        self.dir.insert(p.id, p);
        let Some(root) = self.root else {
            let leaf = self.new_leaf(Key::NEG_INFINITY, vec![p], 1);
            self.root = Some(leaf);
            self.rebuild_xaccess();
            return Ok(());
        };
        let leaf = self.leaf_for(p.xkey());
        for &a in &self.path_up(leaf) {
            self.nodes[a].weight += 1;
        }
        self.swap_down(root, p);
        let parents: Vec<usize> = self.path_up(leaf)[1..].to_vec();
        if self.nodes[leaf].weight > self.params.b * self.params.b {
            self.split_leaf(leaf);
        }
        for u in parents {
            if self.nodes[u].alive && self.overflowed(u) {
                self.split(u);
            }
        }
        self.flush_tables();
        Ok(())
    }

    pub fn delete(&mut self, id: PointId) -> Result<Point> {
        let p = self.dir.remove(&id).ok_or(Error::NotFound(id))?;
        let leaf = self.leaf_for(p.xkey());
        let path = self.path_up(leaf);
        for &a in &path {
            self.nodes[a].weight -= 1;
        }
        let mut found = false;
        for &x in path[1..].iter().rev() {
            let mut pl = self.read_plist(x);
            if let Some(i) = pl.iter().position(|q| q.id == id) {
                pl.remove(i);
                self.write_plist(x, pl);
                self.fill(x);
                found = true;
                break;
            }
        }
        if !found {
            let l = self.nodes[leaf].leaf.as_mut().unwrap();
            if l.delete(self.store.get_mut(), p) {
                self.mark_parent(leaf);
            }
            self.sync_leaf(leaf);
        }
        if self.dir.is_empty() {
            let root = self.root.take().unwrap();
            self.release_subtree(root);
            self.dirty.clear();
            self.rebuild_xaccess();
            return Ok(p);
        }
        let parent = self.nodes[leaf].parent;
        if parent != NIL && self.leaf_underflowed(leaf) {
            self.merge_leaf(leaf);
        }
        let mut u = parent;
        while u != NIL {
            if self.underflowed(u) {
                u = self.fix_underflow(u);
            } else {
                u = self.nodes[u].parent;
            }
        }
        self.collapse_root();
        self.flush_tables();
        Ok(p)
    }

    fn release_subtree(&mut self, x: usize) {
        for c in self.nodes[x].children.clone() {
            self.release_subtree(c);
        }
        if let Some(leaf) = self.nodes[x].leaf.take() {
            leaf.take_all(self.store.get_mut());
        }
        self.release(x);
    }

    fn overflowed(&self, x: usize) -> bool {
        let n = &self.nodes[x];
        n.level >= 1 && n.weight >= 2 * self.params.weight(n.level)
    }

    fn underflowed(&self, x: usize) -> bool {
        let n = &self.nodes[x];
        n.alive && n.level >= 1 && n.parent != NIL && n.weight < self.params.min_weight(n.level)
    }

    fn leaf_underflowed(&self, x: usize) -> bool {
        let n = &self.nodes[x];
        let b = self.params.b;
        n.parent != NIL && self.nodes[n.parent].children.len() > 1 && 4 * n.weight < b * b
    }

    /// Points kept above `x` whose x-key falls in `[lo, hi)`.
    fn held_above(&mut self, x: usize, lo: Key, hi: Key) -> Vec<Point> {
        let mut held = Vec::new();
        for a in self.path_up(x).into_iter().skip(1) {
            held.extend(
                self.read_plist(a)
                    .into_iter()
                    .filter(|p| lo <= p.xkey() && p.xkey() < hi),
            );
        }
        held
    }

    /// Splits an over-full leaf into two by weight.
    fn split_leaf(&mut self, x: usize) {
        self.metrics.rebalances.incr();
        let before = self.store.get_mut().stats().transfers();
        let (lo, hi) = (self.nodes[x].low, self.leaf_high(x));
        let stored = self.nodes[x].leaf.take().unwrap().take_all(self.store.get_mut());
        let held = self.held_above(x, lo, hi);
        let mut keys: Vec<Key> = stored.iter().chain(&held).map(Point::xkey).collect();
        keys.sort_unstable();
        let cut = keys[keys.len() / 2];
        let (left, right): (Vec<Point>, Vec<Point>) = stored.into_iter().partition(|p| p.xkey() < cut);
        let wl = keys.len() / 2;
        let wr = keys.len() - wl;
        let fresh = ExtLeaf::build(self.store.get_mut(), left);
        self.nodes[x].leaf = Some(fresh);
        self.nodes[x].weight = wl;
        self.sync_leaf(x);
        let y = self.new_leaf(cut, right, wr);
        self.adopt_sibling(x, y);
        self.rebuild_xaccess();
        let spent = self.store.get_mut().stats().transfers() - before;
        self.metrics.rebalance_work.add(spent);
    }

    /// Hangs `y` right after `x`, growing a new root if `x` was the root.
    fn adopt_sibling(&mut self, x: usize, y: usize) {
        let parent = self.nodes[x].parent;
        if parent == NIL {
            let level = self.nodes[x].level + 1;
            let low = self.nodes[x].low;
            let r = self.new_internal(level, low);
            self.attach(r, x);
            self.attach(r, y);
            self.root = Some(r);
            self.fill(r);
        } else {
            let at = self.nodes[x].pos + 1;
            self.nodes[parent].children.insert(at, y);
            self.renumber(parent, at);
        }
    }

    /// Merges an under-full leaf with an adjacent sibling, splitting again if
    /// the result is over-full.
    fn merge_leaf(&mut self, x: usize) {
        self.metrics.rebalances.incr();
        let before = self.store.get_mut().stats().transfers();
        let parent = self.nodes[x].parent;
        let pos = self.nodes[x].pos;
        let (l, r) = if pos > 0 {
            (self.nodes[parent].children[pos - 1], x)
        } else {
            (x, self.nodes[parent].children[pos + 1])
        };
        let store = self.store.get_mut();
        let mut pts = self.nodes[l].leaf.take().unwrap().take_all(store);
        pts.extend(self.nodes[r].leaf.take().unwrap().take_all(store));
        let weight = self.nodes[l].weight + self.nodes[r].weight;
        let merged = ExtLeaf::build(store, pts);
        self.nodes[l].leaf = Some(merged);
        self.nodes[l].weight = weight;
        self.sync_leaf(l);
        let rp = self.nodes[r].pos;
        self.nodes[parent].children.remove(rp);
        self.renumber(parent, rp);
        self.release(r);
        self.rebuild_xaccess();
        if weight > self.params.b * self.params.b {
            self.split_leaf(l);
        }
        let spent = self.store.get_mut().stats().transfers() - before;
        self.metrics.rebalance_work.add(spent);
    }

    fn split_index(&self, x: usize) -> usize {
        let n = &self.nodes[x];
        let wi = self.params.weight(n.level);
        let m = n.children.len();
        let mut before = 0;
        for (k, &c) in n.children.iter().enumerate() {
            let wc = self.nodes[c].weight;
            if before + wc > wi {
                let rest = n.weight - before - wc;
                let s = if before <= rest { k + 1 } else { k };
                return s.clamp(1, m - 1);
            }
            before += wc;
        }
        m - 1
    }

    fn split(&mut self, u: usize) {
        self.metrics.rebalances.incr();
        let before = self.store.get_mut().stats().transfers();
        let s = self.split_index(u);
        let level = self.nodes[u].level;
        let moved: Vec<usize> = self.nodes[u].children.split_off(s);
        let low = self.nodes[moved[0]].low;
        let v = self.new_internal(level, low);
        for c in moved {
            self.attach(v, c);
        }
        self.nodes[u].weight -= self.nodes[v].weight;
        self.mark(u);
        let pl = self.read_plist(u);
        let (mine, theirs): (Vec<Point>, Vec<Point>) = pl.into_iter().partition(|p| p.xkey() < low);
        self.write_plist(u, mine);
        self.write_plist(v, theirs);
        let was_root = self.nodes[u].parent == NIL;
        self.fill(u);
        self.fill(v);
        self.adopt_sibling(u, v);
        if was_root {
            self.rebuild_xaccess();
        }
        let spent = self.store.get_mut().stats().transfers() - before;
        self.metrics.rebalance_work.add(spent);
    }

    /// Merges the under-full node `u` into an adjacent sibling, sharing when
    /// the result is heavy. Returns the node to continue checking from.
    fn fix_underflow(&mut self, u: usize) -> usize {
        let parent = self.nodes[u].parent;
        if self.nodes[parent].children.len() == 1 {
            if self.nodes[parent].parent == NIL {
                return parent;
            }
            let cont = self.fix_underflow(parent);
            if self.underflowed(u) && self.nodes[self.nodes[u].parent].children.len() > 1 {
                self.fix_underflow(u);
            }
            return cont;
        }
        self.metrics.rebalances.incr();
        let before = self.store.get_mut().stats().transfers();
        let pos = self.nodes[u].pos;
        let (l, r) = if pos > 0 {
            (self.nodes[parent].children[pos - 1], u)
        } else {
            (u, self.nodes[parent].children[pos + 1])
        };
        let moved = std::mem::take(&mut self.nodes[r].children);
        for c in moved {
            self.attach(l, c);
        }
        let mut pl = self.read_plist(l);
        pl.extend(self.read_plist(r));
        pl.sort_by_key(Point::ykey);
        let excess = pl.split_off(pl.len().min(self.params.b));
        let rp = self.nodes[r].pos;
        self.nodes[parent].children.remove(rp);
        self.renumber(parent, rp);
        self.release(r);
        self.write_plist(l, pl);
        for e in excess {
            let c = self.child_toward(l, e.xkey());
            self.swap_down(c, e);
        }
        let level = self.nodes[l].level;
        let wi = self.params.weight(level);
        let w = self.nodes[l].weight;
        if 2 * w > 3 * wi {
            let s = self.split_index(l);
            let left: usize = self.nodes[l].children[..s].iter().map(|&c| self.nodes[c].weight).sum();
            let floor = self.params.min_weight(level);
            if w >= 2 * wi || (left >= floor && w - left >= floor) {
                self.split(l);
            }
        }
        let spent = self.store.get_mut().stats().transfers() - before;
        self.metrics.rebalance_work.add(spent);
        parent
    }

    fn collapse_root(&mut self) {
        while let Some(r) = self.root {
            if self.nodes[r].children.len() != 1 {
                return;
            }
            let c = self.nodes[r].children[0];
            let pl = self.read_plist(r);
            self.nodes[c].parent = NIL;
            self.nodes[c].pos = 0;
            self.release(r);
            self.root = Some(c);
            for p in pl {
                self.swap_down(c, p);
            }
            self.rebuild_xaccess();
        }
    }

    /// Scans table entry `[k, l]` of `x` up to `c`, then descends into every
    /// child whose list was reported whole.
    fn scan_table(&self, store: &mut BlockStore, x: usize, k: usize, l: usize, q: &Query3, out: &mut Vec<PointId>) {
        let ck = q.c_key();
        let n = &self.nodes[x];
        let mut count = vec![0usize; l - k + 1];
        let mut last = vec![Key::NEG_INFINITY; l - k + 1];
        'scan: for &blk in &n.table[tri(k, l)] {
            for p in store.read(blk).expect("table block") {
                if p.ykey() > ck {
                    break 'scan;
                }
                if q.contains_x(p.x) {
                    out.push(p.id);
                }
                let i = n.children.partition_point(|&c| self.nodes[c].low <= p.xkey()) - 1;
                count[i - k] += 1;
                last[i - k] = p.ykey();
            }
        }
        for i in k..=l {
            let c = n.children[i];
            let cn = &self.nodes[c];
            if count[i - k] == 0 || count[i - k] < cn.plist_len {
                continue;
            }
            match &cn.leaf {
                Some(leaf) if leaf.len() > cn.plist_len => leaf.query(store, q, Some(last[i - k]), out),
                Some(_) => {}
                None if cn.plist_len == self.params.b => {
                    let d = cn.children.len();
                    self.scan_table(store, c, 0, d - 1, q, out);
                }
                None => {}
            }
        }
    }

    /// Walks both boundary paths from the root down. A path stops at the
    /// first list that is not full or reaches above `c`, since nothing below
    /// it can qualify.
    pub fn query_into(&self, q: &Query3, out: &mut Vec<PointId>) {
        let Some(root) = self.root else { return };
        let store = &mut *self.store.borrow_mut();
        let before = store.stats().transfers();
        let la = self.leaf_for(q.lo_key());
        let lb = if q.hi_key() < self.leaf_high(la) {
            la
        } else {
            self.leaf_for(q.hi_key())
        };
        let mut pa = self.path_up(la);
        let mut pb = self.path_up(lb);
        pa.reverse();
        pb.reverse();
        debug_assert_eq!(pa[0], root);
        let split = (0..pa.len()).find(|&i| pa[i] != pb[i]).unwrap_or(pa.len());
        'common: {
            for i in 0..split {
                let x = pa[i];
                if let Some(leaf) = &self.nodes[x].leaf {
                    leaf.query(store, q, None, out);
                    break 'common;
                }
                let full = self.visit(store, x, q, out);
                if i + 1 == split && full {
                    let (k, l) = (self.nodes[pa[i + 1]].pos, self.nodes[pb[i + 1]].pos);
                    if k + 1 < l {
                        self.scan_table(store, x, k + 1, l - 1, q, out);
                    }
                }
                if !full {
                    break 'common;
                }
            }
            for (path, left) in [(&pa, true), (&pb, false)] {
                for i in split..path.len() {
                    let x = path[i];
                    if let Some(leaf) = &self.nodes[x].leaf {
                        leaf.query(store, q, None, out);
                        break;
                    }
                    let full = self.visit(store, x, q, out);
                    if full {
                        let (k, d) = (self.nodes[path[i + 1]].pos, self.nodes[x].children.len());
                        if left && k + 1 < d {
                            self.scan_table(store, x, k + 1, d - 1, q, out);
                        } else if !left && k > 0 {
                            self.scan_table(store, x, 0, k - 1, q, out);
                        }
                    }
                    if !full {
                        break;
                    }
                }
            }
        }
        self.metrics.node_visits.add(store.stats().transfers() - before);
    }

    /// Reports from `x`'s list; true if the list is full and lies at or
    /// below `c`.
    fn visit(&self, store: &mut BlockStore, x: usize, q: &Query3, out: &mut Vec<PointId>) -> bool {
        let ck = q.c_key();
        let pl = store.read(self.nodes[x].plist).expect("list block");
        out.extend(pl.iter().filter(|p| q.contains(p)).map(|p| p.id));
        pl.len() == self.params.b && pl.last().unwrap().ykey() <= ck
    }

    pub fn query(&self, q: &Query3) -> Vec<PointId> {
        let mut out = Vec::new();
        self.query_into(q, &mut out);
        out.sort_unstable();
        out
    }

    pub fn audit(&self) -> Result<(), AuditError> {
        let store = self.store.borrow();
        let Some(root) = self.root else {
            audit_ensure!(
                self.dir.is_empty() && self.leaves.is_empty(),
                None,
                "no root but points stored"
            );
            return Ok(());
        };
        audit_ensure!(self.nodes[root].parent == NIL, Some(root), "root has a parent");
        audit_ensure!(
            self.nodes[root].low == Key::NEG_INFINITY,
            Some(root),
            "root not open below"
        );
        let mut leaves = Vec::new();
        let mut seen = HashMap::new();
        self.audit_node(&store, root, &mut leaves, &mut seen)?;
        audit_ensure!(leaves == self.leaves, None, "leaf index stale");
        audit_ensure!(
            seen.len() == self.dir.len(),
            None,
            "{} points kept, {} known",
            seen.len(),
            self.dir.len()
        );
        let mut weights = vec![0usize; leaves.len()];
        for p in self.dir.values() {
            let i = leaves.partition_point(|&(low, _)| low <= p.xkey()) - 1;
            weights[i] += 1;
            let holder = seen.get(&p.id).copied();
            audit_ensure!(holder.is_some(), None, "point {} not kept anywhere", p.id);
            let on_path = self.path_up(leaves[i].1).contains(&holder.unwrap());
            audit_ensure!(on_path, holder, "point {} kept off its leaf path", p.id);
        }
        for (&(_, x), &w) in leaves.iter().zip(&weights) {
            audit_ensure!(
                self.nodes[x].weight == w,
                Some(x),
                "leaf weight {} but {} points in range",
                self.nodes[x].weight,
                w
            );
        }
        Ok(())
    }

    fn audit_node(
        &self,
        store: &BlockStore,
        x: usize,
        leaves: &mut Vec<(Key, usize)>,
        seen: &mut HashMap<PointId, usize>,
    ) -> Result<(), AuditError> {
        let n = &self.nodes[x];
        let b = self.params.b;
        audit_ensure!(n.alive, Some(x), "dead node reachable");
        let pl = store
            .peek(n.plist)
            .map_err(|e| AuditError::new(Some(x), e.to_string()))?;
        audit_ensure!(
            pl.len() == n.plist_len && pl.len() <= b,
            Some(x),
            "list length {} (mirror {})",
            pl.len(),
            n.plist_len
        );
        audit_ensure!(
            pl.windows(2).all(|w| w[0].ykey() < w[1].ykey()),
            Some(x),
            "list not sorted by y"
        );
        if let Some(leaf) = &n.leaf {
            leaf.audit(store)
                .map_err(|e| AuditError::new(Some(x), format!("leaf: {}", e.message)))?;
            audit_ensure!(n.level == 0 && n.children.is_empty(), Some(x), "malformed leaf");
            audit_ensure!(leaf.min_block() == n.plist, Some(x), "leaf list mirror stale");
            audit_ensure!(leaf.len() <= b * b && n.weight <= b * b, Some(x), "leaf over capacity");
            for p in leaf.points(store) {
                audit_ensure!(seen.insert(p.id, x).is_none(), Some(x), "point {} kept twice", p.id);
                audit_ensure!(self.dir.get(&p.id) == Some(&p), Some(x), "unknown point {}", p.id);
            }
            leaves.push((n.low, x));
            return Ok(());
        }
        for p in pl {
            audit_ensure!(seen.insert(p.id, x).is_none(), Some(x), "point {} kept twice", p.id);
            audit_ensure!(self.dir.get(&p.id) == Some(p), Some(x), "unknown point {}", p.id);
        }
        audit_ensure!(!n.children.is_empty(), Some(x), "internal node without children");
        let wi = self.params.weight(n.level);
        audit_ensure!(
            n.weight < 2 * wi,
            Some(x),
            "weight {} reaches 2·w_{} = {}",
            n.weight,
            n.level,
            2 * wi
        );
        if n.parent != NIL {
            let floor = self.params.min_weight(n.level);
            audit_ensure!(
                n.weight >= floor,
                Some(x),
                "weight {} below {} at level {}",
                n.weight,
                floor,
                n.level
            );
        }
        audit_ensure!(!n.dirty, Some(x), "table left stale");
        let d = n.children.len();
        audit_ensure!(
            n.table.len() == d * (d + 1) / 2,
            Some(x),
            "table has {} entries for {} children",
            n.table.len(),
            d
        );
        let mut lists = Vec::with_capacity(d);
        let mut weight = 0;
        for (i, &c) in n.children.iter().enumerate() {
            let cn = &self.nodes[c];
            audit_ensure!(cn.parent == x && cn.pos == i, Some(c), "bad parent link");
            audit_ensure!(cn.level + 1 == n.level, Some(c), "leaf depths differ");
            if i == 0 {
                audit_ensure!(cn.low == n.low, Some(c), "first child boundary differs from parent");
            } else {
                audit_ensure!(
                    self.nodes[n.children[i - 1]].low < cn.low,
                    Some(c),
                    "child boundaries out of order"
                );
            }
            let cl = store
                .peek(cn.plist)
                .map_err(|e| AuditError::new(Some(c), e.to_string()))?
                .to_vec();
            if let (Some(top), Some(first)) = (pl.last(), cl.first()) {
                audit_ensure!(top.ykey() < first.ykey(), Some(c), "heap order violated");
            }
            if pl.len() < b {
                audit_ensure!(
                    cl.is_empty(),
                    Some(c),
                    "child holds points under a list that is not full"
                );
            }
            weight += cn.weight;
            lists.push(cl);
            self.audit_node(store, c, leaves, seen)?;
        }
        audit_ensure!(
            weight == n.weight,
            Some(x),
            "weight {} but children sum {}",
            n.weight,
            weight
        );
        for l in 0..d {
            for k in 0..=l {
                let mut want: Vec<Point> = lists[k..=l].iter().flatten().copied().collect();
                want.sort_by_key(Point::ykey);
                let mut got = Vec::new();
                for &blk in &n.table[tri(k, l)] {
                    got.extend_from_slice(store.peek(blk).map_err(|e| AuditError::new(Some(x), e.to_string()))?);
                }
                audit_ensure!(got == want, Some(x), "table entry [{k}, {l}] stale");
            }
        }
        Ok(())
    }
}

impl ThreeSided for ExtWbTree {
    fn len(&self) -> usize {
        ExtWbTree::len(self)
    }

    fn insert(&mut self, p: Point) -> Result<()> {
        ExtWbTree::insert(self, p)
    }

    fn delete(&mut self, id: PointId) -> Result<Point> {
        ExtWbTree::delete(self, id)
    }

    fn query_into(&self, q: &Query3, out: &mut Vec<PointId>) {
        ExtWbTree::query_into(self, q, out)
    }

    fn metrics(&self) -> MetricsSnapshot {
        let io = self.io_stats();
        MetricsSnapshot {
            io_reads: io.reads,
            io_writes: io.writes,
            cache_hits: io.cache_hits,
            ..self.metrics.snapshot()
        }
    }

    fn audit(&self) -> Result<(), AuditError> {
        ExtWbTree::audit(self)
    }

    fn points(&self) -> Vec<Point> {
        ExtWbTree::points(self)
    }
}
