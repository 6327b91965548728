//! Dynamic priority search tree.
//!
//! A leaf-oriented binary search tree on x-keys whose nodes additionally hold
//! one *tournament* point each: the minimum-y point of the subtree that is not
//! already held higher up. Balance is kept by weight: a node whose heavier
//! child carries more than `BALANCE` of its leaves gets its subtree rebuilt
//! perfectly balanced, tournament points included.

use std::collections::{BTreeMap, HashSet};

use crate::error::{audit_ensure, AuditError, Error, Result};
use crate::metrics::{MetricsSnapshot, StructureMetrics};
use crate::point::{check_unique_ids, Key, Point, PointId, Query3};
use crate::ThreeSided;

const NIL: usize = usize::MAX;
const BALANCE: f64 = 0.75;

#[derive(Clone, Debug)]
struct Node {
    left: usize,
    right: usize,
    parent: usize,
    /// Leaf: the point's x-key. Internal: separates left (≤) from right (>).
    key: Key,
    /// Number of leaves below.
    weight: usize,
    leaf: Option<Point>,
    slot: Option<Point>,
}

impl Node {
    fn is_leaf(&self) -> bool {
        self.leaf.is_some()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Pst {
    nodes: Vec<Node>,
    free: Vec<usize>,
    root: Option<usize>,
    by_id: BTreeMap<PointId, Point>,
    metrics: StructureMetrics,
}

fn slot_key(slot: Option<Point>) -> Key {
    slot.map_or(Key::INFINITY, |p| p.ykey())
}

impl Pst {
    pub fn new() -> Self {
        Pst::default()
    }

    /// Bulk construction in `O(n log n)`; input order is irrelevant.
    pub fn from_points(points: &[Point]) -> Result<Self> {
        check_unique_ids(points)?;
        let mut sorted = points.to_vec();
        sorted.sort_by_key(Point::xkey);
        let mut t = Pst::new();
        if !sorted.is_empty() {
            let all: HashSet<PointId> = sorted.iter().map(|p| p.id).collect();
            let root = t.build(&sorted, &all);
            t.root = Some(root);
        }
        t.by_id = sorted.into_iter().map(|p| (p.id, p)).collect();
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn get(&self, id: PointId) -> Option<&Point> {
        self.by_id.get(&id)
    }

    pub fn contains(&self, id: PointId) -> bool {
        self.by_id.contains_key(&id)
    }

    /// Stored points in increasing id.
    pub fn points(&self) -> impl Iterator<Item = &Point> {
        self.by_id.values()
    }

    pub fn metrics(&self) -> &StructureMetrics {
        &self.metrics
    }

    /// The stored point with the smallest y-key.
    pub fn min_y(&self) -> Option<Point> {
        self.root.and_then(|r| self.nodes[r].slot)
    }

    pub fn height(&self) -> usize {
        fn h(t: &Pst, x: usize) -> usize {
            let n = &t.nodes[x];
            if n.is_leaf() {
                0
            } else {
                1 + h(t, n.left).max(h(t, n.right))
            }
        }
        self.root.map_or(0, |r| h(self, r))
    }

    fn alloc(&mut self, node: Node) -> usize {
        if let Some(i) = self.free.pop() {
            self.nodes[i] = node;
            i
        } else {
            self.nodes.push(node);
            self.nodes.len() - 1
        }
    }

    fn new_leaf(&mut self, p: Point, slot: Option<Point>) -> usize {
        self.alloc(Node {
            left: NIL,
            right: NIL,
            parent: NIL,
            key: p.xkey(),
            weight: 1,
            leaf: Some(p),
            slot,
        })
    }

    /// Balanced subtree over x-sorted `pts`; only ids in `avail` may occupy
    /// tournament slots (the rest are held above the subtree).
    fn build(&mut self, pts: &[Point], avail: &HashSet<PointId>) -> usize {
        if pts.len() == 1 {
            let p = pts[0];
            let slot = avail.contains(&p.id).then_some(p);
            return self.new_leaf(p, slot);
        }
        let mid = pts.len() / 2;
        let left = self.build(&pts[..mid], avail);
        let right = self.build(&pts[mid..], avail);
        let x = self.alloc(Node {
            left,
            right,
            parent: NIL,
            key: pts[mid - 1].xkey(),
            weight: pts.len(),
            leaf: None,
            slot: None,
        });
        self.nodes[left].parent = x;
        self.nodes[right].parent = x;
        self.refill(x);
        x
    }

    /// Fills the empty slot at `x` by pulling tournament winners upward.
    fn refill(&mut self, mut x: usize) {
        debug_assert!(self.nodes[x].slot.is_none());
        loop {
            let n = &self.nodes[x];
            if n.is_leaf() {
                return;
            }
            let (l, r) = (n.left, n.right);
            let c = if slot_key(self.nodes[l].slot) <= slot_key(self.nodes[r].slot) {
                l
            } else {
                r
            };
            match self.nodes[c].slot.take() {
                None => return,
                Some(p) => {
                    self.nodes[x].slot = Some(p);
                    x = c;
                }
            }
        }
    }

    /// Places `p`, whose leaf lies below `x`, into the tournament starting at
    /// `x`, displacing larger points downward.
    fn push_down(&mut self, mut x: usize, mut p: Point) {
        loop {
            let n = &mut self.nodes[x];
            match n.slot {
                None => {
                    n.slot = Some(p);
                    return;
                }
                Some(q) if p.ykey() < q.ykey() => {
                    n.slot = Some(p);
                    p = q;
                }
                Some(_) => {}
            }
            debug_assert!(!n.is_leaf(), "pushed past the leaf of {p}");
            x = if p.xkey() <= n.key { n.left } else { n.right };
        }
    }

    pub fn insert(&mut self, p: Point) -> Result<()> {
        if self.by_id.contains_key(&p.id) {
            return Err(Error::DuplicateId(p.id));
        }
        self.by_id.insert(p.id, p);
        let Some(root) = self.root else {
            let leaf = self.new_leaf(p, Some(p));
            self.root = Some(leaf);
            return Ok(());
        };
        let key = p.xkey();
        let mut x = root;
        while !self.nodes[x].is_leaf() {
            self.nodes[x].weight += 1;
            x = if key <= self.nodes[x].key {
                self.nodes[x].left
            } else {
                self.nodes[x].right
            };
        }
        // split leaf x into an internal node over (old leaf, new leaf)
        let old = self.nodes[x].leaf.unwrap();
        let old_slot = self.nodes[x].slot.take();
        let old_leaf = self.new_leaf(old, None);
        let new_leaf = self.new_leaf(p, None);
        let (l, r) = if key < old.xkey() {
            (new_leaf, old_leaf)
        } else {
            (old_leaf, new_leaf)
        };
        let sep = self.nodes[l].key;
        let n = &mut self.nodes[x];
        n.left = l;
        n.right = r;
        n.key = sep;
        n.weight = 2;
        n.leaf = None;
        n.slot = old_slot;
        self.nodes[l].parent = x;
        self.nodes[r].parent = x;
        self.push_down(root, p);
        self.rebalance_path(new_leaf);
        Ok(())
    }

    pub fn delete(&mut self, id: PointId) -> Result<Point> {
        let p = self.by_id.remove(&id).ok_or(Error::NotFound(id))?;
        let key = p.xkey();
        let mut x = self.root.expect("non-empty");
        loop {
            if self.nodes[x].slot.map(|s| s.id) == Some(id) {
                self.nodes[x].slot = None;
                self.refill(x);
            }
            if self.nodes[x].is_leaf() {
                break;
            }
            x = if key <= self.nodes[x].key {
                self.nodes[x].left
            } else {
                self.nodes[x].right
            };
        }
        let leaf = x;
        let parent = self.nodes[leaf].parent;
        if parent == NIL {
            self.root = None;
            self.free.push(leaf);
            return Ok(p);
        }
        let sibling = if self.nodes[parent].left == leaf {
            self.nodes[parent].right
        } else {
            self.nodes[parent].left
        };
        let held = self.nodes[parent].slot.take();
        let grand = self.nodes[parent].parent;
        self.nodes[sibling].parent = grand;
        if grand == NIL {
            self.root = Some(sibling);
        } else if self.nodes[grand].left == parent {
            self.nodes[grand].left = sibling;
        } else {
            self.nodes[grand].right = sibling;
        }
        self.free.push(leaf);
        self.free.push(parent);
        let mut a = grand;
        while a != NIL {
            self.nodes[a].weight -= 1;
            a = self.nodes[a].parent;
        }
        if let Some(q) = held {
            self.push_down(sibling, q);
        }
        self.rebalance_path(sibling);
        Ok(p)
    }

    fn unbalanced(&self, x: usize) -> bool {
        let n = &self.nodes[x];
        if n.is_leaf() {
            return false;
        }
        let heavy = self.nodes[n.left].weight.max(self.nodes[n.right].weight);
        heavy as f64 > BALANCE * n.weight as f64 + 0.5
    }

    /// Rebuilds the highest out-of-balance ancestor of `from` (inclusive).
    fn rebalance_path(&mut self, from: usize) {
        let mut worst = NIL;
        let mut x = from;
        while x != NIL {
            if self.unbalanced(x) {
                worst = x;
            }
            x = self.nodes[x].parent;
        }
        if worst != NIL {
            self.rebuild_subtree(worst);
        }
    }

    fn rebuild_subtree(&mut self, x: usize) {
        self.metrics.rebalances.incr();
        let parent = self.nodes[x].parent;
        let mut leaves = Vec::with_capacity(self.nodes[x].weight);
        let mut avail = HashSet::new();
        let mut stack = vec![x];
        // in-order leaf collection; right pushed first so left pops first
        while let Some(v) = stack.pop() {
            let n = &self.nodes[v];
            if let Some(s) = n.slot {
                avail.insert(s.id);
            }
            if let Some(p) = n.leaf {
                leaves.push(p);
            } else {
                stack.push(n.right);
                stack.push(n.left);
            }
            self.free.push(v);
        }
        self.metrics.rebalance_work.add(leaves.len() as u64);
        let new = self.build(&leaves, &avail);
        self.nodes[new].parent = parent;
        if parent == NIL {
            self.root = Some(new);
        } else if self.nodes[parent].left == x {
            self.nodes[parent].left = new;
        } else {
            self.nodes[parent].right = new;
        }
    }

    /// Reports into `out` and returns the number of nodes visited.
    pub fn query_into(&self, q: &Query3, out: &mut Vec<PointId>) -> u64 {
        let Some(root) = self.root else { return 0 };
        let (lo, hi, ck) = (q.lo_key(), q.hi_key(), q.c_key());
        let mut visits = 0;
        let mut stack = vec![root];
        while let Some(x) = stack.pop() {
            visits += 1;
            let n = &self.nodes[x];
            let Some(s) = n.slot else { continue };
            if s.ykey() > ck {
                continue;
            }
            if q.contains_x(s.x) {
                out.push(s.id);
            }
            if !n.is_leaf() {
                if lo <= n.key {
                    stack.push(n.left);
                }
                if hi > n.key {
                    stack.push(n.right);
                }
            }
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

    pub fn audit(&self) -> Result<(), AuditError> {
        let Some(root) = self.root else {
            audit_ensure!(self.by_id.is_empty(), None, "no root but {} points", self.by_id.len());
            return Ok(());
        };
        audit_ensure!(self.nodes[root].parent == NIL, Some(root), "root has a parent");
        let mut seen = HashSet::new();
        self.audit_node(root, Key::NEG_INFINITY, Key::INFINITY, None, &mut seen)?;
        audit_ensure!(
            seen.len() == self.by_id.len(),
            None,
            "{} points in slots, {} stored",
            seen.len(),
            self.by_id.len()
        );
        Ok(())
    }

    /// Checks the subtree at `x`, whose leaves must have keys in `(lo, hi]`
    /// (with `lo` exclusive unless −∞), below a node holding `above`.
    fn audit_node(
        &self,
        x: usize,
        lo: Key,
        hi: Key,
        above: Option<Key>,
        seen: &mut HashSet<PointId>,
    ) -> Result<usize, AuditError> {
        let n = &self.nodes[x];
        if let Some(s) = n.slot {
            audit_ensure!(seen.insert(s.id), Some(x), "point {} held twice", s.id);
            audit_ensure!(
                self.by_id.get(&s.id) == Some(&s),
                Some(x),
                "slot holds unknown point {}",
                s.id
            );
            let k = s.xkey();
            audit_ensure!(
                lo < k && k <= hi,
                Some(x),
                "slot point {} lies outside the subtree",
                s.id
            );
            if let Some(a) = above {
                audit_ensure!(a < s.ykey(), Some(x), "heap order violated below y-key {:?}", a);
            } else {
                audit_ensure!(
                    x == self.root.unwrap() || self.nodes[n.parent].slot.is_some(),
                    Some(x),
                    "filled slot under an empty one"
                );
            }
        }
        if let Some(p) = n.leaf {
            audit_ensure!(n.weight == 1, Some(x), "leaf weight {}", n.weight);
            audit_ensure!(n.key == p.xkey(), Some(x), "leaf key mismatch");
            audit_ensure!(lo < n.key && n.key <= hi, Some(x), "leaf {} out of order", p.id);
            audit_ensure!(
                self.by_id.contains_key(&p.id),
                Some(x),
                "leaf for deleted point {}",
                p.id
            );
            audit_ensure!(
                n.slot.is_none_or(|s| s.id == p.id),
                Some(x),
                "leaf holds a foreign point"
            );
            return Ok(1);
        }
        audit_ensure!(lo < n.key && n.key <= hi, Some(x), "separator out of range");
        for c in [n.left, n.right] {
            audit_ensure!(self.nodes[c].parent == x, Some(c), "bad parent link");
        }
        if n.slot.is_none() {
            for c in [n.left, n.right] {
                audit_ensure!(self.nodes[c].slot.is_none(), Some(c), "filled slot under an empty one");
            }
        }
        let ak = n.slot.map(|s| s.ykey());
        let wl = self.audit_node(n.left, lo, n.key, ak, seen)?;
        let wr = self.audit_node(n.right, n.key, hi, ak, seen)?;
        audit_ensure!(n.weight == wl + wr, Some(x), "weight {} != {} + {}", n.weight, wl, wr);
        audit_ensure!(!self.unbalanced(x), Some(x), "out of balance ({wl}, {wr})");
        Ok(n.weight)
    }
}

impl ThreeSided for Pst {
    fn len(&self) -> usize {
        Pst::len(self)
    }

    fn insert(&mut self, p: Point) -> Result<()> {
        Pst::insert(self, p)
    }

    fn delete(&mut self, id: PointId) -> Result<Point> {
        Pst::delete(self, id)
    }

    fn query_into(&self, q: &Query3, out: &mut Vec<PointId>) {
        Pst::query_into(self, q, out);
    }

    fn metrics(&self) -> MetricsSnapshot {
        self.metrics.snapshot()
    }

    fn audit(&self) -> Result<(), AuditError> {
        Pst::audit(self)
    }

    fn points(&self) -> Vec<Point> {
        self.by_id.values().copied().collect()
    }
}
