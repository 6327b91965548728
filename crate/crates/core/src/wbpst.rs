//! Solution 2: a weight-balanced exponential search tree augmented as a
//! priority search tree.
//!
//! Leaves sit at level 0 and hold one point each. A non-root node at level
//! `i ≥ 1` carries between `½·w_i + 1` and `2·w_i − 1` leaves, where
//! `w_i = ⌈c1^(c2^i)⌉`, so degrees grow doubly exponentially towards the root
//! and the height is `Θ(log log n)`. Each node holds at most one tournament
//! point (min-heap on y along every leaf-to-root path) and an RMQ index over
//! the y-keys of its children's tournament points.
//!
//! Leaves are located through an [`XIndex`] over their x-keys, so nodes need
//! no routing keys.

use std::collections::HashMap;

use crate::error::{audit_ensure, AuditError, Error, Result};
use crate::metrics::{MetricsSnapshot, StructureMetrics};
use crate::point::{check_unique_ids, Key, Point, PointId, Query3};
use crate::rmq::RmqIndex;
use crate::xindex::XIndex;
use crate::ThreeSided;

const NIL: usize = usize::MAX;

/// Weight parameters `w_i = ⌈c1^(c2^i)⌉`.
#[derive(Clone, Debug, PartialEq)]
pub struct WbParams {
    c1: f64,
    c2: f64,
    small: bool,
    table: Vec<usize>,
}

impl Default for WbParams {
    /// `c1 = 2^6`, `c2 = 3/2`.
    fn default() -> Self {
        WbParams::new(64.0, 1.5).expect("valid defaults")
    }
}

impl WbParams {
    /// Requires `1 < c2 < 2` and `c1 ≥ 2^(3/(c2−1))`.
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        if !(c2 > 1.0 && c2 < 2.0) {
            return Err(Error::config(format!("c2 must lie in (1, 2), got {c2}")));
        }
        let floor = 2f64.powf(3.0 / (c2 - 1.0));
        if !(c1 >= floor) {
            return Err(Error::config(format!("c1 must be at least {floor}, got {c1}")));
        }
        Ok(Self::make(c1, c2, false))
    }

    /// Accepts any `c1 ≥ 4` so that trees over a few thousand points have
    /// more than one level. Such parameters are flagged by
    /// [`WbParams::is_small`].
    pub fn with_override(c1: f64, c2: f64) -> Result<Self> {
        if !(c2 > 1.0 && c2 < 2.0) {
            return Err(Error::config(format!("c2 must lie in (1, 2), got {c2}")));
        }
        if !(c1 >= 4.0) {
            return Err(Error::config(format!("c1 must be at least 4, got {c1}")));
        }
        let strict = c1 >= 2f64.powf(3.0 / (c2 - 1.0));
        Ok(Self::make(c1, c2, !strict))
    }

    /// Desk-scale parameters: `c1 = 8`, `c2 = 3/2`.
    pub fn test() -> Self {
        WbParams::with_override(8.0, 1.5).expect("valid test parameters")
    }

    fn make(c1: f64, c2: f64, small: bool) -> Self {
        let mut table = Vec::new();
        let mut i = 0;
        loop {
            let e = c1.log2() * c2.powi(i);
            if e >= 60.0 {
                table.push(usize::MAX / 8);
                break;
            }
            table.push(e.exp2().ceil() as usize);
            i += 1;
        }
        WbParams { c1, c2, small, table }
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn c2(&self) -> f64 {
        self.c2
    }

    /// True when `c1` is below the bound that makes rebalanced weights land
    /// in `[⅝·w_i, 14/8·w_i]`.
    pub fn is_small(&self) -> bool {
        self.small
    }

    pub fn weight(&self, level: u32) -> usize {
        let last = self.table.len() - 1;
        self.table[(level as usize).min(last)]
    }
}

#[derive(Clone, Debug)]
struct WNode {
    level: u32,
    parent: usize,
    /// Index among the parent's children.
    pos: usize,
    children: Vec<usize>,
    weight: usize,
    leaf: Option<Point>,
    slot: Option<Point>,
    rmq: RmqIndex<Key>,
    dirty: bool,
    alive: bool,
    /// Updates that passed through this node since it was last rebalanced.
    touches: u64,
    rebalanced: bool,
}

impl WNode {
    fn new(level: u32) -> Self {
        WNode {
            level,
            parent: NIL,
            pos: 0,
            children: Vec::new(),
            weight: 0,
            leaf: None,
            slot: None,
            rmq: RmqIndex::build(Vec::new()),
            dirty: false,
            alive: true,
            touches: 0,
            rebalanced: false,
        }
    }
}

fn slot_key(s: Option<Point>) -> Key {
    s.map_or(Key::INFINITY, |p| p.ykey())
}

/// Arena index of a tree node.
pub type NodeId = usize;

#[derive(Clone, Debug)]
pub struct WbPst {
    params: WbParams,
    nodes: Vec<WNode>,
    free: Vec<usize>,
    root: Option<usize>,
    xdict: XIndex<usize>,
    leaf_of: HashMap<PointId, usize>,
    dirty: Vec<usize>,
    metrics: StructureMetrics,
}

impl WbPst {
    pub fn new(params: WbParams) -> Self {
        WbPst {
            params,
            nodes: Vec::new(),
            free: Vec::new(),
            root: None,
            xdict: XIndex::new(),
            leaf_of: HashMap::new(),
            dirty: Vec::new(),
            metrics: StructureMetrics::default(),
        }
    }

    /// Bottom-up construction over points in any order.
    pub fn build(points: &[Point], params: WbParams) -> Result<Self> {
        check_unique_ids(points)?;
        let mut pts = points.to_vec();
        pts.sort_by_key(Point::xkey);
        let mut t = WbPst::new(params);
        if pts.is_empty() {
            return Ok(t);
        }
        let mut cur: Vec<usize> = pts
            .iter()
            .map(|&p| {
                let mut leaf = WNode::new(0);
                leaf.leaf = Some(p);
                leaf.slot = Some(p);
                leaf.weight = 1;
                t.alloc(leaf)
            })
            .collect();
        for (&leaf, p) in cur.iter().zip(&pts) {
            t.leaf_of.insert(p.id, leaf);
        }
        t.xdict = XIndex::build(cur.iter().zip(&pts).map(|(&l, p)| (p.xkey(), l)).collect())?;
        let total = pts.len();
        let mut level = 0;
        while cur.len() > 1 {
            level += 1;
            let wi = t.params.weight(level) as f64;
            let groups = ((total as f64 / wi).round() as usize).max(1);
            let per = total as f64 / groups as f64;
            let mut parents: Vec<usize> = Vec::with_capacity(groups);
            let mut cum = 0usize;
            for &c in &cur {
                let wc = t.nodes[c].weight;
                let g = (((cum as f64 + wc as f64 / 2.0) / per) as usize).min(groups - 1);
                cum += wc;
                if parents.len() <= g {
                    parents.push(t.alloc(WNode::new(level)));
                }
                let p = *parents.last().unwrap();
                t.attach(p, c);
            }
            for &p in &parents {
                t.mark(p);
                t.bubble_down(p);
            }
            cur = parents;
        }
        t.root = Some(cur[0]);
        for x in 0..t.nodes.len() {
            t.mark(x);
        }
        t.flush_rmq(false);
        Ok(t)
    }

    pub fn params(&self) -> &WbParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.leaf_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaf_of.is_empty()
    }

    /// Level of the root; 0 for a single leaf or an empty tree.
    pub fn height(&self) -> u32 {
        self.root.map_or(0, |r| self.nodes[r].level)
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    pub fn children(&self, x: NodeId) -> &[NodeId] {
        &self.nodes[x].children
    }

    pub fn level(&self, x: NodeId) -> u32 {
        self.nodes[x].level
    }

    pub fn weight(&self, x: NodeId) -> usize {
        self.nodes[x].weight
    }

    pub fn stored_point(&self, x: NodeId) -> Option<Point> {
        self.nodes[x].slot
    }

    pub fn metrics(&self) -> &StructureMetrics {
        &self.metrics
    }

    pub fn xdict(&self) -> &XIndex<usize> {
        &self.xdict
    }

    pub fn points(&self) -> Vec<Point> {
        self.xdict.iter().map(|&(_, l)| self.nodes[l].leaf.unwrap()).collect()
    }

    fn alloc(&mut self, node: WNode) -> usize {
        if let Some(i) = self.free.pop() {
            self.nodes[i] = node;
            i
        } else {
            self.nodes.push(node);
            self.nodes.len() - 1
        }
    }

    fn release(&mut self, x: usize) {
        self.nodes[x].alive = false;
        self.nodes[x].children.clear();
        self.free.push(x);
    }

    /// Appends `c` to `p`'s children.
    fn attach(&mut self, p: usize, c: usize) {
        let wc = self.nodes[c].weight;
        let n = &mut self.nodes[p];
        n.children.push(c);
        n.weight += wc;
        let pos = self.nodes[p].children.len() - 1;
        self.nodes[c].parent = p;
        self.nodes[c].pos = pos;
    }

    fn renumber(&mut self, p: usize, from: usize) {
        for i in from..self.nodes[p].children.len() {
            let c = self.nodes[p].children[i];
            self.nodes[c].parent = p;
            self.nodes[c].pos = i;
        }
        self.mark(p);
    }

    fn mark(&mut self, x: usize) {
        let n = &mut self.nodes[x];
        if n.alive && n.leaf.is_none() && !n.dirty {
            n.dirty = true;
            self.dirty.push(x);
        }
    }

    fn set_slot(&mut self, x: usize, s: Option<Point>) {
        self.nodes[x].slot = s;
        let p = self.nodes[x].parent;
        if p != NIL {
            self.mark(p);
        }
    }

    /// Rebuilds every stale RMQ index; returns the work spent.
    fn flush_rmq(&mut self, count: bool) -> u64 {
        let mut work = 0;
        for x in std::mem::take(&mut self.dirty) {
            if !self.nodes[x].alive || !self.nodes[x].dirty {
                continue;
            }
            let keys: Vec<Key> = self.nodes[x]
                .children
                .iter()
                .map(|&c| slot_key(self.nodes[c].slot))
                .collect();
            work += keys.len() as u64;
            let n = &mut self.nodes[x];
            n.rmq = RmqIndex::build(keys);
            n.dirty = false;
        }
        if count {
            self.metrics.aux_rebuild_work.add(work);
        }
        work
    }

    /// Child of `x` whose tournament point is smallest, if any child has one.
    fn min_child(&self, x: usize) -> Option<usize> {
        let n = &self.nodes[x];
        let best = if !n.dirty && !n.children.is_empty() && n.rmq.len() == n.children.len() {
            n.children[n.rmq.query_unchecked(0, n.children.len() - 1)]
        } else {
            *n.children.iter().min_by_key(|&&c| slot_key(self.nodes[c].slot))?
        };
        self.nodes[best].slot.is_some().then_some(best)
    }

    /// Refills the empty slot at `x` from below.
    fn bubble_down(&mut self, mut x: usize) {
        debug_assert!(self.nodes[x].slot.is_none());
        while let Some(c) = self.min_child(x) {
            let s = self.nodes[c].slot;
            self.set_slot(x, s);
            self.set_slot(c, None);
            x = c;
        }
    }

    /// Child of `x` on the path to `leaf`.
    fn child_toward(&self, x: usize, leaf: usize) -> usize {
        let mut c = leaf;
        while self.nodes[c].parent != x {
            c = self.nodes[c].parent;
        }
        c
    }

    fn is_ancestor(&self, x: usize, mut leaf: usize) -> bool {
        while leaf != NIL {
            if leaf == x {
                return true;
            }
            leaf = self.nodes[leaf].parent;
        }
        false
    }

    /// Places `p`, whose leaf lies in `T_x`, at `x` or below, displacing
    /// larger points towards their leaves.
    fn swap_down(&mut self, mut x: usize, mut p: Point) {
        loop {
            match self.nodes[x].slot {
                None => {
                    self.set_slot(x, Some(p));
                    return;
                }
                Some(q) if p.ykey() < q.ykey() => {
                    self.set_slot(x, Some(p));
                    p = q;
                }
                Some(_) => {}
            }
            x = self.child_toward(x, self.leaf_of[&p.id]);
        }
    }

    fn note_rebalance(&mut self, x: usize) {
        self.metrics.rebalances.incr();
        let n = &self.nodes[x];
        let need = (self.params.weight(n.level) as u64).div_ceil(8);
        if n.rebalanced && n.touches < need {
            self.metrics.early_rebalances.incr();
        }
    }

    fn fresh(&mut self, x: usize) {
        self.nodes[x].touches = 0;
        self.nodes[x].rebalanced = true;
    }

    /// Where a split of `x`'s children falls: the first index of the right
    /// part.
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
        self.note_rebalance(u);
        let s = self.split_index(u);
        let level = self.nodes[u].level;
        let moved: Vec<usize> = self.nodes[u].children.split_off(s);
        let v = self.alloc(WNode::new(level));
        for c in moved {
            self.attach(v, c);
        }
        self.nodes[u].weight -= self.nodes[v].weight;
        self.metrics
            .rebalance_work
            .add((self.nodes[u].children.len() + self.nodes[v].children.len()) as u64);
        self.mark(u);
        self.mark(v);
        let parent = self.nodes[u].parent;
        if parent == NIL {
            let r = self.alloc(WNode::new(level + 1));
            self.attach(r, u);
            self.attach(r, v);
            self.root = Some(r);
            self.mark(r);
        } else {
            let at = self.nodes[u].pos + 1;
            self.nodes[parent].children.insert(at, v);
            self.renumber(parent, at);
            self.metrics
                .rebalance_work
                .add(self.nodes[parent].children.len() as u64);
        }
        if let Some(q) = self.nodes[u].slot {
            if self.is_ancestor(v, self.leaf_of[&q.id]) {
                self.set_slot(v, Some(q));
                self.set_slot(u, None);
                self.bubble_down(u);
            } else {
                self.bubble_down(v);
            }
        }
        if parent == NIL {
            let r = self.root.unwrap();
            self.bubble_down(r);
        }
        self.fresh(u);
        self.fresh(v);
    }

    fn overflowed(&self, x: usize) -> bool {
        let n = &self.nodes[x];
        n.level >= 1 && n.weight >= 2 * self.params.weight(n.level)
    }

    fn underflowed(&self, x: usize) -> bool {
        let n = &self.nodes[x];
        n.level >= 1 && n.parent != NIL && 2 * n.weight < self.params.weight(n.level) + 2
    }

    pub fn insert(&mut self, p: Point) -> Result<()> {
        if self.leaf_of.contains_key(&p.id) {
            return Err(Error::DuplicateId(p.id));
        }
        let key = p.xkey();
        let neighbour = match self.xdict.predecessor(key) {
            Some((_, &l)) => Some((l, true)),
            None => self.xdict.successor(key).map(|(_, &l)| (l, false)),
        };
        let mut leaf = WNode::new(0);
        leaf.leaf = Some(p);
        leaf.weight = 1;
        let leaf = self.alloc(leaf);
        self.leaf_of.insert(p.id, leaf);
        self.xdict.insert(key, leaf)?;
        let Some((nb, after)) = neighbour else {
            self.set_slot(leaf, Some(p));
            self.root = Some(leaf);
            return Ok(());
        };
        let parent = self.nodes[nb].parent;
        if parent == NIL {
            // the root is a single leaf: grow a level-1 root over both
            let r = self.alloc(WNode::new(1));
            let (l, rr) = if after { (nb, leaf) } else { (leaf, nb) };
            self.attach(r, l);
            self.attach(r, rr);
            self.root = Some(r);
            let q = self.nodes[nb].slot;
            self.set_slot(nb, None);
            self.set_slot(r, q);
            self.mark(r);
        } else {
            let at = self.nodes[nb].pos + usize::from(after);
            self.nodes[parent].children.insert(at, leaf);
            self.renumber(parent, at);
            let mut a = parent;
            while a != NIL {
                self.nodes[a].weight += 1;
                self.nodes[a].touches += 1;
                a = self.nodes[a].parent;
            }
            let mut u = parent;
            while u != NIL {
                let next = self.nodes[u].parent;
                if self.overflowed(u) {
                    self.split(u);
                }
                u = next;
            }
        }
        let r = self.root.unwrap();
        self.swap_down(r, p);
        self.flush_rmq(true);
        Ok(())
    }

    pub fn delete(&mut self, id: PointId) -> Result<Point> {
        let leaf = self.leaf_of.get(&id).copied().ok_or(Error::NotFound(id))?;
        let p = self.nodes[leaf].leaf.unwrap();
        let mut holder = leaf;
        while self.nodes[holder].slot.map(|s| s.id) != Some(id) {
            holder = self.nodes[holder].parent;
        }
        self.set_slot(holder, None);
        self.bubble_down(holder);
        self.leaf_of.remove(&id);
        self.xdict.remove(p.xkey())?;
        let parent = self.nodes[leaf].parent;
        if parent == NIL {
            self.release(leaf);
            self.root = None;
            self.dirty.clear();
            return Ok(p);
        }
        let at = self.nodes[leaf].pos;
        self.nodes[parent].children.remove(at);
        self.renumber(parent, at);
        self.release(leaf);
        let mut a = parent;
        while a != NIL {
            self.nodes[a].weight -= 1;
            self.nodes[a].touches += 1;
            a = self.nodes[a].parent;
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
        self.flush_rmq(true);
        Ok(p)
    }

    /// Replaces a root with a single child by that child.
    fn collapse_root(&mut self) {
        while let Some(r) = self.root {
            if self.nodes[r].children.len() != 1 {
                return;
            }
            let c = self.nodes[r].children[0];
            let q = self.nodes[r].slot;
            self.nodes[c].parent = NIL;
            self.nodes[c].pos = 0;
            self.release(r);
            self.root = Some(c);
            if let Some(q) = q {
                self.swap_down(c, q);
            }
        }
    }

    /// Merges the underflowed node `u` into an adjacent sibling, sharing if
    /// the result is heavy. Returns the node to continue checking from.
    fn fix_underflow(&mut self, u: usize) -> usize {
        let parent = self.nodes[u].parent;
        if self.nodes[parent].children.len() == 1 {
            if self.nodes[parent].parent == NIL {
                return parent;
            }
            // the lone parent underflows with `u`; give `u` siblings first
            let cont = self.fix_underflow(parent);
            if self.nodes[u].alive && self.underflowed(u) && self.nodes[self.nodes[u].parent].children.len() > 1 {
                self.fix_underflow(u);
            }
            return cont;
        }
        self.note_rebalance(u);
        let pos = self.nodes[u].pos;
        let (v, u_left) = if pos > 0 {
            (self.nodes[parent].children[pos - 1], false)
        } else {
            (self.nodes[parent].children[pos + 1], true)
        };
        let moved = std::mem::take(&mut self.nodes[u].children);
        let added = self.nodes[u].weight;
        if u_left {
            let mut merged = moved;
            merged.append(&mut self.nodes[v].children);
            self.nodes[v].children = merged;
        } else {
            self.nodes[v].children.extend(moved);
        }
        self.nodes[v].weight += added;
        self.renumber(v, 0);
        let qu = self.nodes[u].slot.take();
        self.nodes[parent].children.remove(pos);
        self.renumber(parent, pos);
        self.release(u);
        self.metrics
            .rebalance_work
            .add((self.nodes[v].children.len() + self.nodes[parent].children.len()) as u64);
        if let Some(qu) = qu {
            let qv = self.nodes[v].slot;
            let carry = match qv {
                Some(qv) if qv.ykey() < qu.ykey() => qu,
                _ => {
                    self.set_slot(v, Some(qu));
                    match qv {
                        Some(qv) => qv,
                        None => {
                            self.fresh(v);
                            return self.after_merge(v, parent);
                        }
                    }
                }
            };
            self.swap_down(v, carry);
        }
        self.fresh(v);
        self.after_merge(v, parent)
    }

    fn after_merge(&mut self, v: usize, parent: usize) -> usize {
        let level = self.nodes[v].level;
        let wi = self.params.weight(level);
        let wv = self.nodes[v].weight;
        if 2 * wv > 3 * wi {
            let must = wv >= 2 * wi;
            let s = self.split_index(v);
            let left: usize = self.nodes[v].children[..s].iter().map(|&c| self.nodes[c].weight).sum();
            let ok = |w: usize| 2 * w >= wi + 2;
            if must || (ok(left) && ok(wv - left)) {
                self.split(v);
            }
        }
        parent
    }

    /// Reports every point of `T_x` with `y ≤ c`; returns the nodes visited.
    pub fn report_subtree(&self, x: NodeId, c: f64, out: &mut Vec<PointId>) -> u64 {
        let mut visits = 0;
        self.subtree(x, Key::highest(c), out, &mut visits);
        visits
    }

    fn member(&self, x: usize, ck: Key) -> bool {
        self.nodes[x].slot.is_some_and(|s| s.ykey() <= ck)
    }

    fn subtree(&self, x: usize, ck: Key, out: &mut Vec<PointId>, visits: &mut u64) {
        *visits += 1;
        if !self.member(x, ck) {
            return;
        }
        out.push(self.nodes[x].slot.unwrap().id);
        let m = self.nodes[x].children.len();
        if m > 0 {
            self.expand(x, 0, m - 1, ck, out, visits);
        }
    }

    /// RMQ-driven report over children `lo..=hi` of `x`.
    fn expand(&self, x: usize, lo: usize, hi: usize, ck: Key, out: &mut Vec<PointId>, visits: &mut u64) {
        let n = &self.nodes[x];
        let m = n.rmq.query_unchecked(lo, hi);
        let c = n.children[m];
        if !self.member(c, ck) {
            *visits += 1;
            return;
        }
        self.subtree(c, ck, out, visits);
        if m > lo {
            self.expand(x, lo, m - 1, ck, out, visits);
        }
        if m < hi {
            self.expand(x, m + 1, hi, ck, out, visits);
        }
    }

    /// Like [`WbPst::expand`] on a boundary path node: every member child
    /// starts a subtree report whose visits are checked against `3·(t+1)`.
    fn expand_path(&self, x: usize, lo: usize, hi: usize, ck: Key, out: &mut Vec<PointId>, visits: &mut u64) {
        if lo > hi {
            return;
        }
        let n = &self.nodes[x];
        let m = n.rmq.query_unchecked(lo, hi);
        let c = n.children[m];
        *visits += 1;
        if !self.member(c, ck) {
            return;
        }
        let before = out.len();
        let mut sv = 0;
        self.subtree(c, ck, out, &mut sv);
        let t = (out.len() - before) as u64;
        self.metrics.subtree_calls.incr();
        self.metrics.subtree_visits.add(sv);
        if sv > 3 * (t + 1) {
            self.metrics.subtree_bound_exceeded.incr();
        }
        *visits += sv;
        if m > lo {
            self.expand_path(x, lo, m - 1, ck, out, visits);
        }
        self.expand_path(x, m + 1, hi, ck, out, visits);
    }

    pub fn query_into(&self, q: &Query3, out: &mut Vec<PointId>) -> u64 {
        let (Some((ka, &ua)), Some((kb, &ub))) = (self.xdict.successor(q.lo_key()), self.xdict.predecessor(q.hi_key()))
        else {
            return 0;
        };
        if ka > kb {
            return 0;
        }
        let ck = q.c_key();
        let path = |mut x: usize| {
            let mut v = vec![x];
            while self.nodes[x].parent != NIL {
                x = self.nodes[x].parent;
                v.push(x);
            }
            v
        };
        let (pa, pb) = (path(ua), path(ub));
        let top = (0..pa.len()).find(|&i| pa[i] == pb[i]).unwrap();
        let mut visits = 0;
        let check = |x: usize, out: &mut Vec<PointId>, visits: &mut u64| {
            *visits += 1;
            if let Some(s) = self.nodes[x].slot {
                if q.contains(&s) {
                    out.push(s.id);
                }
            }
        };
        for i in 0..top {
            check(pa[i], out, &mut visits);
            check(pb[i], out, &mut visits);
            if i > 0 {
                let (k, l) = (self.nodes[pa[i - 1]].pos, self.nodes[pb[i - 1]].pos);
                if self.member(pa[i], ck) {
                    let end = self.nodes[pa[i]].children.len() - 1;
                    self.expand_path(pa[i], k + 1, end, ck, out, &mut visits);
                }
                if self.member(pb[i], ck) && l > 0 {
                    self.expand_path(pb[i], 0, l - 1, ck, out, &mut visits);
                }
            }
        }
        let lca = pa[top];
        check(lca, out, &mut visits);
        if top > 0 && self.member(lca, ck) {
            let (k, l) = (self.nodes[pa[top - 1]].pos, self.nodes[pb[top - 1]].pos);
            if k + 1 < l {
                self.expand_path(lca, k + 1, l - 1, ck, out, &mut visits);
            }
        }
        for &x in &pa[top + 1..] {
            check(x, out, &mut visits);
        }
        self.metrics.node_visits.add(visits);
        visits
    }

    pub fn query(&self, q: &Query3) -> Vec<PointId> {
        let mut out = Vec::new();
        self.query_into(q, &mut out);
        out.sort_unstable();
        out
    }

    /// Recomputes weights, levels, heap order, RMQ contents and leaf order.
    pub fn audit(&self) -> Result<(), AuditError> {
        self.xdict.audit()?;
        let Some(root) = self.root else {
            audit_ensure!(
                self.leaf_of.is_empty() && self.xdict.is_empty(),
                None,
                "no root but points stored"
            );
            return Ok(());
        };
        audit_ensure!(self.nodes[root].parent == NIL, Some(root), "root has a parent");
        let mut leaves = Vec::new();
        let mut held = 0;
        self.audit_node(root, &mut leaves, &mut held)?;
        audit_ensure!(
            held == self.leaf_of.len(),
            None,
            "{held} points held, {} stored",
            self.leaf_of.len()
        );
        audit_ensure!(leaves.len() == self.xdict.len(), None, "leaf count differs from index");
        for (&leaf, &(k, l)) in leaves.iter().zip(self.xdict.iter()) {
            audit_ensure!(leaf == l, Some(leaf), "index points at the wrong leaf");
            audit_ensure!(
                self.nodes[leaf].leaf.unwrap().xkey() == k,
                Some(leaf),
                "index key mismatch"
            );
        }
        Ok(())
    }

    fn audit_node(&self, x: usize, leaves: &mut Vec<usize>, held: &mut usize) -> Result<(), AuditError> {
        let n = &self.nodes[x];
        audit_ensure!(n.alive, Some(x), "dead node reachable");
        if let Some(s) = n.slot {
            *held += 1;
            let leaf = self.leaf_of.get(&s.id).copied();
            audit_ensure!(
                leaf.is_some_and(|l| self.is_ancestor(x, l)),
                Some(x),
                "point {} stored off its leaf path",
                s.id
            );
            audit_ensure!(
                self.nodes[leaf.unwrap()].leaf == Some(s),
                Some(x),
                "point {} differs from its leaf",
                s.id
            );
        }
        if let Some(p) = n.leaf {
            audit_ensure!(
                n.level == 0 && n.children.is_empty() && n.weight == 1,
                Some(x),
                "malformed leaf"
            );
            audit_ensure!(
                self.leaf_of.get(&p.id) == Some(&x),
                Some(x),
                "leaf map stale for {}",
                p.id
            );
            if let Some(&prev) = leaves.last() {
                audit_ensure!(
                    self.nodes[prev].leaf.unwrap().xkey() < p.xkey(),
                    Some(x),
                    "leaves out of x order"
                );
            }
            leaves.push(x);
            return Ok(());
        }
        audit_ensure!(
            n.level >= 1 && !n.children.is_empty(),
            Some(x),
            "internal node without children"
        );
        let wi = self.params.weight(n.level);
        if n.parent != NIL {
            audit_ensure!(
                2 * n.weight >= wi + 2 && n.weight < 2 * wi,
                Some(x),
                "weight {} outside [{}/2 + 1, 2·{} − 1] at level {}",
                n.weight,
                wi,
                wi,
                n.level
            );
        } else {
            audit_ensure!(n.weight < 2 * wi, Some(x), "root weight {} overflows", n.weight);
        }
        audit_ensure!(!n.dirty, Some(x), "rmq left stale");
        audit_ensure!(n.rmq.len() == n.children.len(), Some(x), "rmq length mismatch");
        let mut weight = 0;
        for (i, &c) in n.children.iter().enumerate() {
            let cn = &self.nodes[c];
            audit_ensure!(cn.parent == x && cn.pos == i, Some(c), "bad parent link");
            audit_ensure!(cn.level + 1 == n.level, Some(c), "leaf depths differ");
            audit_ensure!(n.rmq.value(i) == slot_key(cn.slot), Some(x), "rmq entry {i} stale");
            match (n.slot, cn.slot) {
                (None, Some(_)) => audit_ensure!(false, Some(c), "filled slot under an empty one"),
                (Some(a), Some(b)) => audit_ensure!(a.ykey() < b.ykey(), Some(c), "heap order violated"),
                _ => {}
            }
            weight += cn.weight;
            self.audit_node(c, leaves, held)?;
        }
        audit_ensure!(
            weight == n.weight,
            Some(x),
            "weight {} but children sum {}",
            n.weight,
            weight
        );
        Ok(())
    }

    #[cfg(test)]
    fn corrupt_slot(&mut self, x: usize, p: Option<Point>) {
        self.nodes[x].slot = p;
    }
}

impl ThreeSided for WbPst {
    fn len(&self) -> usize {
        WbPst::len(self)
    }

    fn insert(&mut self, p: Point) -> Result<()> {
        WbPst::insert(self, p)
    }

    fn delete(&mut self, id: PointId) -> Result<Point> {
        WbPst::delete(self, id)
    }

    fn query_into(&self, q: &Query3, out: &mut Vec<PointId>) {
        WbPst::query_into(self, q, out);
    }

    fn metrics(&self) -> MetricsSnapshot {
        self.metrics.snapshot()
    }

    fn audit(&self) -> Result<(), AuditError> {
        WbPst::audit(self)
    }

    fn points(&self) -> Vec<Point> {
        WbPst::points(self)
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

    fn tiny() -> WbParams {
        WbParams::with_override(4.0, 1.5).unwrap()
    }

    #[test]
    fn weight_table() {
        let w = WbParams::default();
        assert_eq!((w.weight(0), w.weight(1), w.weight(2)), (64, 512, 11586));
        assert!(!w.is_small());
        assert_eq!(tiny().weight(1), 8);
        assert!(tiny().is_small());
        assert!(WbParams::new(4.0, 1.5).is_err());
        assert!(WbParams::new(64.0, 2.0).is_err());
        assert!(WbParams::with_override(3.0, 1.5).is_err());
    }

    #[test]
    fn p8_examples() {
        assert!(WbPst::build(&[], tiny()).unwrap().query(&q(0., 9., 9.)).is_empty());
        let t = WbPst::build(&p8(), tiny()).unwrap();
        t.audit().unwrap();
        assert_eq!(t.stored_point(t.root().unwrap()).unwrap().id, 4);
        assert_eq!(t.query(&q(2., 6., 3.)), vec![2, 4, 6]);
        assert_eq!(t.query(&q(4., 4., 1.)), vec![4]);
        assert!(t.query(&q(4., 4., 0.5)).is_empty());
        let v0 = t.metrics().node_visits.get();
        assert_eq!(t.query(&q(0., 9., 9.)), (1..=8).collect::<Vec<_>>());
        assert!(t.metrics().node_visits.get() - v0 <= 3 * 9);
    }

    #[test]
    fn inserts_from_empty_match_build() {
        let mut t = WbPst::new(tiny());
        for p in p8() {
            t.insert(p).unwrap();
            t.audit().unwrap();
        }
        assert_eq!(t.stored_point(t.root().unwrap()).unwrap().id, 4);
        assert_eq!(t.query(&q(2., 6., 3.)), vec![2, 4, 6]);
    }

    #[test]
    fn new_minimum_and_root_deletion() {
        let mut t = WbPst::build(&p8(), tiny()).unwrap();
        t.insert(pt(9, 4.5, -1.0)).unwrap();
        assert_eq!(t.stored_point(t.root().unwrap()).unwrap().id, 9);
        t.audit().unwrap();
        t.delete(9).unwrap();
        assert_eq!(t.stored_point(t.root().unwrap()).unwrap().id, 4);
        t.delete(4).unwrap();
        t.audit().unwrap();
        assert_eq!(t.stored_point(t.root().unwrap()).unwrap().id, 6);
        for id in [1, 2, 3, 5, 6, 7, 8] {
            t.delete(id).unwrap();
            t.audit().unwrap();
        }
        assert!(t.is_empty());
        assert_eq!(t.delete(1), Err(Error::NotFound(1)));
    }

    #[test]
    fn subtree_report_on_random_subtree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<Point> = (0..64).map(|i| pt(i, rng.gen(), rng.gen())).collect();
        let t = WbPst::build(&pts, tiny()).unwrap();
        let mut ys: Vec<f64> = pts.iter().map(|p| p.y).collect();
        ys.sort_by(f64::total_cmp);
        let c = ys[31];
        let root = t.root().unwrap();
        let mut out = Vec::new();
        let visits = t.report_subtree(root, c, &mut out);
        out.sort_unstable();
        assert_eq!(out, brute_force_query(&pts, &q(-1., 2., c)));
        assert!(visits <= 3 * (out.len() as u64 + 1));
        let mut none = Vec::new();
        assert_eq!(t.report_subtree(root, -1.0, &mut none), 1);
        assert!(none.is_empty());
        let mut all = Vec::new();
        t.report_subtree(root, 2.0, &mut all);
        assert_eq!(all.len(), 64);
    }

    #[test]
    fn audit_names_corrupted_node() {
        let mut t = WbPst::build(&p8(), tiny()).unwrap();
        let root = t.root().unwrap();
        let child = t.children(root)[0];
        let bogus = t.stored_point(root);
        t.corrupt_slot(child, bogus);
        let err = t.audit().unwrap_err();
        assert!(err.node.is_some());
    }

    fn random_workload(params: WbParams, seed: u64, ops: usize, grid: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coord = |rng: &mut ChaCha8Rng| if grid { rng.gen_range(1..=40) as f64 } else { rng.gen() };
        let n0 = rng.gen_range(0..400);
        let mut live: Vec<Point> = (0..n0).map(|i| pt(i, coord(&mut rng), coord(&mut rng))).collect();
        let mut t = WbPst::build(&live, params).unwrap();
        t.audit().unwrap();
        let mut next = n0;
        for _ in 0..ops {
            let r: f64 = rng.gen();
            if r < 0.45 || live.is_empty() {
                let p = pt(next, coord(&mut rng), coord(&mut rng));
                next += 1;
                t.insert(p).unwrap();
                live.push(p);
            } else if r < 0.75 {
                let p = live.swap_remove(rng.gen_range(0..live.len()));
                assert_eq!(t.delete(p.id).unwrap(), p);
            } else {
                let a = coord(&mut rng);
                let b = a + if grid {
                    rng.gen_range(0..10) as f64
                } else {
                    rng.gen::<f64>() * 0.3
                };
                let qq = q(a, b, coord(&mut rng));
                assert_eq!(t.query(&qq), brute_force_query(&live, &qq));
            }
            t.audit().unwrap();
        }
        assert_eq!(t.metrics().subtree_bound_exceeded.get(), 0);
    }

    #[test]
    fn random_workloads_tiny_params() {
        for seed in 0..12 {
            random_workload(tiny(), seed, 1500, seed % 2 == 0);
        }
    }

    #[test]
    fn random_workloads_test_params() {
        for seed in 100..106 {
            random_workload(WbParams::test(), seed, 3000, seed % 2 == 0);
        }
    }

    #[test]
    fn growth_and_shrinkage_keep_balance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = WbPst::new(WbParams::test());
        let mut ids = Vec::new();
        for i in 0..5000 {
            t.insert(pt(i, rng.gen(), rng.gen())).unwrap();
            ids.push(i);
        }
        t.audit().unwrap();
        assert!(t.height() >= 3);
        while ids.len() > 3 {
            let id = ids.swap_remove(rng.gen_range(0..ids.len()));
            t.delete(id).unwrap();
            if ids.len() % 97 == 0 {
                t.audit().unwrap();
            }
        }
        t.audit().unwrap();
        assert!(t.height() <= 1);
    }

    #[test]
    fn ten_thousand_updates_audited() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = WbPst::new(WbParams::test());
        let mut live = Vec::new();
        for i in 0..10_000u64 {
            if live.len() < 50 || rng.gen_bool(0.6) {
                t.insert(pt(i, rng.gen(), rng.gen())).unwrap();
                live.push(i);
            } else {
                let id = live.swap_remove(rng.gen_range(0..live.len()));
                t.delete(id).unwrap();
            }
            t.audit().unwrap();
        }
        assert_eq!(t.len(), live.len());
    }

    #[test]
    fn rebalances_are_spaced_by_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut t = WbPst::new(WbParams::default());
        let mut live = Vec::new();
        for i in 0..60_000u64 {
            if live.len() < 20_000 || rng.gen_bool(0.5) {
                t.insert(pt(i, rng.gen(), rng.gen())).unwrap();
                live.push(i);
            } else {
                let id = live.swap_remove(rng.gen_range(0..live.len()));
                t.delete(id).unwrap();
            }
        }
        assert!(t.metrics().rebalances.get() > 0);
        assert_eq!(t.metrics().early_rebalances.get(), 0);
    }

    #[test]
    fn rebuild_work_per_insert_stays_flat() {
        let mut per = Vec::new();
        for k in 12..=15 {
            let n = 1u64 << k;
            let mut rng = ChaCha8Rng::seed_from_u64(k);
            let mut t = WbPst::new(WbParams::test());
            for i in 0..n {
                t.insert(pt(i, rng.gen(), rng.gen())).unwrap();
            }
            let m = t.metrics();
            per.push((m.rebalance_work.get() + m.aux_rebuild_work.get()) as f64 / n as f64);
        }
        let lo = per.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = per.iter().cloned().fold(0.0, f64::max);
        assert!(hi <= 1.5 * lo, "{per:?}");
    }
}
