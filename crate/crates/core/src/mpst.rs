//! Static modified priority search tree.
//!
//! The tree is complete over a power-of-two number of leaves and laid out in
//! an array in inorder. Leaf `k` sits at array position `2k` and carries the
//! binary label `k`, so the depth of the lowest common ancestor of two leaves
//! is read off the highest set bit of the XOR of their labels.
//!
//! Every node keeps `S(v)`, its subtree's points in increasing y. Every leaf
//! `u` keeps, for each depth `j`, the nodes of its path at depth `≥ j`
//! (`P^j`) and the left and right hanging children of that subpath (`L^j`,
//! `R^j`), each sorted by subtree minimum. Given the two boundary leaves, a
//! query reads only list entries that report a point, plus one terminating
//! entry per list.

use crate::error::{audit_ensure, AuditError, Result};
use crate::metrics::{MetricsSnapshot, StructureMetrics};
use crate::point::{check_unique_ids, Key, Point, PointId, Query3};
use crate::xindex::XIndex;

/// Depth of the lowest common ancestor of the leaves labelled `u` and `w` in
/// a complete tree of height `h` (root at depth 0).
pub fn lca_depth(u: u64, w: u64, h: u32) -> u32 {
    let x = u ^ w;
    if x == 0 {
        h
    } else {
        h - (64 - x.leading_zeros())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ListKind {
    P = 0,
    L = 1,
    R = 2,
}

#[derive(Clone, Debug, Default)]
pub struct Mpst {
    /// Real leaves in x order.
    points: Vec<Point>,
    height: u32,
    /// Subtree minimum y-key per array position; `Key::INFINITY` when the
    /// subtree holds only padding.
    node_min: Vec<Key>,
    /// `S(v)` for position `v` is `s_store[s_off[v]..s_off[v + 1]]`, as leaf
    /// indices.
    s_off: Vec<u32>,
    s_store: Vec<u32>,
    /// Per (leaf, depth, kind) ranges into `lists`, which holds positions.
    list_off: Vec<u32>,
    lists: Vec<u32>,
    metrics: StructureMetrics,
}

impl Mpst {
    /// Builds over `points` in any order.
    pub fn build(points: &[Point]) -> Result<Self> {
        check_unique_ids(points)?;
        let mut pts = points.to_vec();
        pts.sort_by_key(Point::xkey);
        let n = pts.len();
        let mut t = Mpst {
            points: pts,
            ..Mpst::default()
        };
        if n == 0 {
            return Ok(t);
        }
        let height = n.next_power_of_two().trailing_zeros();
        t.height = height;
        let size = (2usize << height) - 1;
        t.node_min = vec![Key::INFINITY; size];

        // S lists level by level, merging children's lists
        let mut level: Vec<Vec<u32>> = (0..1usize << height)
            .map(|k| if k < n { vec![k as u32] } else { Vec::new() })
            .collect();
        let mut per_pos: Vec<Vec<u32>> = vec![Vec::new(); size];
        for d in (0..=height).rev() {
            for (i, list) in level.iter().enumerate() {
                let pos = t.pos(d, i);
                t.node_min[pos] = list.first().map_or(Key::INFINITY, |&k| t.points[k as usize].ykey());
                per_pos[pos] = list.clone();
            }
            if d > 0 {
                level = level
                    .chunks(2)
                    .map(|pair| merge_by_y(&t.points, &pair[0], &pair[1]))
                    .collect();
            }
        }
        t.s_off.push(0);
        for list in per_pos {
            t.s_store.extend(list);
            t.s_off.push(t.s_store.len() as u32);
        }

        t.list_off.push(0);
        for k in 0..n {
            for j in 0..=height {
                for kind in [ListKind::P, ListKind::L, ListKind::R] {
                    let mut nodes = t.path_list(k, j, kind);
                    nodes.sort_by_key(|&p| t.node_min[p]);
                    t.lists.extend(nodes.iter().map(|&p| p as u32));
                    t.list_off.push(t.lists.len() as u32);
                }
            }
        }
        Ok(t)
    }

    /// Nodes of the subpath of leaf `k` at depth `≥ j`, or its non-empty
    /// left or right hanging children, unsorted.
    fn path_list(&self, k: usize, j: u32, kind: ListKind) -> Vec<usize> {
        let h = self.height;
        let mut out = Vec::new();
        for d in j..=h {
            let i = k >> (h - d);
            match kind {
                ListKind::P => out.push(self.pos(d, i)),
                _ if d == h => {}
                _ => {
                    let goes_right = (k >> (h - d - 1)) & 1 == 1;
                    let sibling = (k >> (h - d - 1)) ^ 1;
                    let wanted = if kind == ListKind::L { goes_right } else { !goes_right };
                    let p = self.pos(d + 1, sibling);
                    if wanted && self.node_min[p] != Key::INFINITY {
                        out.push(p);
                    }
                }
            }
        }
        out
    }

    /// Array position of the `i`-th node at depth `d`.
    fn pos(&self, d: u32, i: usize) -> usize {
        ((2 * i + 1) << (self.height - d)) - 1
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Depth of the leaves; 0 for a single leaf.
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Points in leaf order.
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn root_pos(&self) -> usize {
        (1usize << self.height) - 1
    }

    pub fn leaf_pos(&self, k: usize) -> usize {
        2 * k
    }

    /// Binary label of leaf `k`.
    pub fn leaf_label(&self, k: usize) -> u64 {
        k as u64
    }

    /// `S(v)` for the node at array position `pos`.
    pub fn s_list(&self, pos: usize) -> impl Iterator<Item = &Point> {
        let r = self.s_off[pos] as usize..self.s_off[pos + 1] as usize;
        self.s_store[r].iter().map(|&k| &self.points[k as usize])
    }

    fn list(&self, k: usize, j: u32, kind: ListKind) -> &[u32] {
        let i = (k * (self.height as usize + 1) + j as usize) * 3 + kind as usize;
        &self.lists[self.list_off[i] as usize..self.list_off[i + 1] as usize]
    }

    /// Positions of `P^j(u)` for leaf `k`, in increasing subtree minimum.
    pub fn p_list(&self, k: usize, j: u32) -> &[u32] {
        self.list(k, j, ListKind::P)
    }

    pub fn l_list(&self, k: usize, j: u32) -> &[u32] {
        self.list(k, j, ListKind::L)
    }

    pub fn r_list(&self, k: usize, j: u32) -> &[u32] {
        self.list(k, j, ListKind::R)
    }

    pub fn metrics(&self) -> &StructureMetrics {
        &self.metrics
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        self.metrics.snapshot()
    }

    /// Dictionary from leaf x-keys to leaf indices.
    pub fn leaf_index(&self) -> XIndex<usize> {
        XIndex::build(self.points.iter().enumerate().map(|(k, p)| (p.xkey(), k)).collect())
            .expect("leaves are x-sorted")
    }

    /// Checks leaf order, every `S(v)` against its subtree, and every leaf
    /// list against its path.
    pub fn audit(&self) -> Result<(), AuditError> {
        let n = self.points.len();
        audit_ensure!(
            self.points.windows(2).all(|w| w[0].xkey() < w[1].xkey()),
            None,
            "leaves out of x order"
        );
        if n == 0 {
            return Ok(());
        }
        let h = self.height;
        for d in 0..=h {
            let span = 1usize << (h - d);
            for i in 0..1usize << d {
                let pos = self.pos(d, i);
                let s: Vec<u32> = self.s_store[self.s_off[pos] as usize..self.s_off[pos + 1] as usize].to_vec();
                let (lo, hi) = ((i * span).min(n), ((i + 1) * span).min(n));
                let mut members = s.clone();
                members.sort_unstable();
                audit_ensure!(
                    members.iter().map(|&k| k as usize).eq(lo..hi),
                    Some(pos),
                    "S list does not cover the subtree"
                );
                let ys: Vec<Key> = s.iter().map(|&k| self.points[k as usize].ykey()).collect();
                audit_ensure!(ys.windows(2).all(|w| w[0] < w[1]), Some(pos), "S list not y-sorted");
                audit_ensure!(
                    self.node_min[pos] == ys.first().copied().unwrap_or(Key::INFINITY),
                    Some(pos),
                    "stale subtree minimum"
                );
            }
        }
        for k in 0..n {
            for j in 0..=h {
                for kind in [ListKind::P, ListKind::L, ListKind::R] {
                    let l = self.list(k, j, kind);
                    audit_ensure!(
                        l.windows(2)
                            .all(|w| self.node_min[w[0] as usize] <= self.node_min[w[1] as usize]),
                        Some(self.leaf_pos(k)),
                        "{kind:?} list at depth {j} not sorted by minimum"
                    );
                    let mut got: Vec<usize> = l.iter().map(|&p| p as usize).collect();
                    got.sort_unstable();
                    let mut want = self.path_list(k, j, kind);
                    want.sort_unstable();
                    audit_ensure!(
                        got == want,
                        Some(self.leaf_pos(k)),
                        "{kind:?} list at depth {j} has the wrong nodes"
                    );
                }
            }
        }
        Ok(())
    }

    /// Pushes the indices of leaves `u..=w` with `y ≤ c`; the two boundary
    /// leaves are also filtered by the query's x-range. Returns the number of
    /// list entries read.
    fn scan(&self, u: usize, w: usize, q: &Query3, out: &mut Vec<u32>) -> u64 {
        debug_assert!(u <= w && w < self.points.len());
        let ck = q.c_key();
        let mut scanned = 0;
        let leaf = |k: usize, out: &mut Vec<u32>| {
            let p = &self.points[k];
            if p.ykey() <= ck && q.contains_x(p.x) {
                out.push(k as u32);
            }
        };
        let j = lca_depth(u as u64, w as u64, self.height);
        scanned += 1;
        let top = self.p_list(u, j)[0] as usize;
        if self.node_min[top] > ck {
            return scanned;
        }
        scanned += 1;
        leaf(u, out);
        if u == w {
            return scanned;
        }
        scanned += 1;
        leaf(w, out);
        for list in [self.r_list(u, j + 1), self.l_list(w, j + 1)] {
            for &v in list {
                scanned += 1;
                if self.node_min[v as usize] > ck {
                    break;
                }
                let r = self.s_off[v as usize] as usize..self.s_off[v as usize + 1] as usize;
                for &k in &self.s_store[r] {
                    scanned += 1;
                    if self.points[k as usize].ykey() > ck {
                        break;
                    }
                    out.push(k);
                }
            }
        }
        scanned
    }

    /// Points of leaves `u..=w` with `y ≤ c`.
    pub fn query_leaves(&self, u: usize, w: usize, c: f64) -> Vec<PointId> {
        let q = Query3 {
            a: f64::NEG_INFINITY,
            b: f64::INFINITY,
            c,
        };
        self.query_between(u, w, &q)
    }

    /// Leaf indices in `u..=w` whose point has `y ≤ c`, in no particular
    /// order.
    pub fn leaves_below(&self, u: usize, w: usize, c: f64, out: &mut Vec<u32>) {
        let q = Query3 {
            a: f64::NEG_INFINITY,
            b: f64::INFINITY,
            c,
        };
        let scanned = self.scan(u, w, &q, out);
        self.metrics.scanned_entries.add(scanned);
    }

    /// Answers `q` given its boundary leaves; `u` and `w` are filtered by x.
    pub fn query_between(&self, u: usize, w: usize, q: &Query3) -> Vec<PointId> {
        let mut hits = Vec::new();
        let scanned = self.scan(u, w, q, &mut hits);
        self.metrics.scanned_entries.add(scanned);
        let mut ids: Vec<PointId> = hits.iter().map(|&k| self.points[k as usize].id).collect();
        ids.sort_unstable();
        ids
    }

    /// Finds the boundary leaves through `xdict` (built by
    /// [`Mpst::leaf_index`]) and answers `q`.
    pub fn query_full(&self, q: &Query3, xdict: &XIndex<usize>) -> Vec<PointId> {
        match boundary_leaves(q, xdict) {
            Some((u, w)) => self.query_between(u, w, q),
            None => Vec::new(),
        }
    }

    /// Like [`Mpst::query_full`] with a binary search for the leaves.
    pub fn query(&self, q: &Query3) -> Vec<PointId> {
        let u = self.points.partition_point(|p| p.xkey() < q.lo_key());
        let w = self.points.partition_point(|p| p.xkey() <= q.hi_key());
        if u >= w {
            return Vec::new();
        }
        self.query_between(u, w - 1, q)
    }
}

pub(crate) fn boundary_leaves(q: &Query3, xdict: &XIndex<usize>) -> Option<(usize, usize)> {
    let (_, &u) = xdict.successor(q.lo_key())?;
    let (_, &w) = xdict.predecessor(q.hi_key())?;
    (u <= w).then_some((u, w))
}

fn merge_by_y(points: &[Point], a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if points[a[i] as usize].ykey() < points[b[j] as usize].ykey() {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// One level of pruning: the leaves are cut into groups of `⌈log₂ n⌉`, each
/// group is a flat MPST, and a top MPST is built over the groups' minimum
/// points. Groups strictly between the boundary groups are reached through
/// the top tree and queried over their whole x-range.
#[derive(Clone, Debug, Default)]
pub struct LayeredMpst {
    group: usize,
    groups: Vec<Mpst>,
    top: Mpst,
    len: usize,
    metrics: StructureMetrics,
}

impl LayeredMpst {
    pub fn build(points: &[Point]) -> Result<Self> {
        check_unique_ids(points)?;
        let mut pts = points.to_vec();
        pts.sort_by_key(Point::xkey);
        let n = pts.len();
        let group = (n as f64).log2().ceil().max(1.0) as usize;
        let groups: Vec<Mpst> = pts.chunks(group).map(Mpst::build).collect::<Result<_>>()?;
        let reps: Vec<Point> = groups
            .iter()
            .map(|g| {
                let root = g.root_pos();
                *g.s_list(root).next().expect("non-empty group")
            })
            .collect();
        Ok(LayeredMpst {
            group,
            top: Mpst::build(&reps)?,
            groups,
            len: n,
            metrics: StructureMetrics::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Leaves per group.
    pub fn group_size(&self) -> usize {
        self.group
    }

    pub fn groups(&self) -> &[Mpst] {
        &self.groups
    }

    pub fn top(&self) -> &Mpst {
        &self.top
    }

    pub fn metrics(&self) -> &StructureMetrics {
        &self.metrics
    }

    pub fn point(&self, k: usize) -> &Point {
        &self.groups[k / self.group].points[k % self.group]
    }

    pub fn leaf_index(&self) -> XIndex<usize> {
        XIndex::build((0..self.len).map(|k| (self.point(k).xkey(), k)).collect()).expect("leaves are x-sorted")
    }

    /// Audits every group and the top tree, and checks that the top tree
    /// holds each group's minimum.
    pub fn audit(&self) -> Result<(), AuditError> {
        audit_ensure!(
            self.groups.iter().map(Mpst::len).sum::<usize>() == self.len,
            None,
            "group sizes do not add up"
        );
        for (gi, g) in self.groups.iter().enumerate() {
            g.audit()
                .map_err(|e| AuditError::new(Some(gi), format!("group: {}", e.message)))?;
            audit_ensure!(
                self.top.points.get(gi).map(|p| p.id) == g.s_list(g.root_pos()).next().map(|p| p.id),
                Some(gi),
                "top tree lacks the group minimum"
            );
        }
        self.top
            .audit()
            .map_err(|e| AuditError::new(e.node, format!("top: {}", e.message)))
    }

    pub fn query_between(&self, u: usize, w: usize, q: &Query3) -> Vec<PointId> {
        let g = self.group;
        let (gu, gw) = (u / g, w / g);
        let mut hits: Vec<(usize, u32)> = Vec::new();
        let mut scanned = 0;
        let mut run = |gi: usize, lo: usize, hi: usize, q: &Query3, scanned: &mut u64| {
            let mut local = Vec::new();
            *scanned += self.groups[gi].scan(lo, hi, q, &mut local);
            hits.extend(local.into_iter().map(|k| (gi, k)));
        };
        if gu == gw {
            run(gu, u % g, w % g, q, &mut scanned);
        } else {
            run(gu, u % g, self.groups[gu].len() - 1, q, &mut scanned);
            run(gw, 0, w % g, q, &mut scanned);
            if gw > gu + 1 {
                let mut reps = Vec::new();
                scanned += self.top.scan(gu + 1, gw - 1, q, &mut reps);
                for gi in reps {
                    let gi = gi as usize;
                    let whole = Query3 {
                        a: self.groups[gi].points[0].x,
                        b: self.groups[gi].points.last().unwrap().x,
                        c: q.c,
                    };
                    run(gi, 0, self.groups[gi].len() - 1, &whole, &mut scanned);
                }
            }
        }
        self.metrics.scanned_entries.add(scanned);
        let mut ids: Vec<PointId> = hits
            .into_iter()
            .map(|(gi, k)| self.groups[gi].points[k as usize].id)
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn query_full(&self, q: &Query3, xdict: &XIndex<usize>) -> Vec<PointId> {
        match boundary_leaves(q, xdict) {
            Some((u, w)) => self.query_between(u, w, q),
            None => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point::brute_force_query;
    use crate::point::fixtures::{p8, q};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// LCA depth by walking parent indices upward.
    fn walk_lca(mut u: usize, mut w: usize, h: u32) -> u32 {
        let mut d = h;
        while u != w {
            u /= 2;
            w /= 2;
            d -= 1;
        }
        d
    }

    #[test]
    fn lca_examples() {
        assert_eq!(lca_depth(5, 5, 3), 3);
        assert_eq!(lca_depth(0b001, 0b110, 3), 0);
        assert_eq!(lca_depth(0b010, 0b011, 3), 2);
    }

    #[test]
    fn lca_matches_walk() {
        for h in 0..=8u32 {
            let l = 1usize << h;
            for u in 0..l {
                for w in 0..l {
                    assert_eq!(lca_depth(u as u64, w as u64, h), walk_lca(u, w, h));
                }
            }
        }
    }

    #[test]
    fn p8_structure() {
        let t = Mpst::build(&p8()).unwrap();
        assert_eq!(t.height(), 3);
        assert_eq!(t.s_list(t.root_pos()).next().unwrap().id, 4);
        // leaf p1: path root, (1,0), (2,0), leaf 0 with minima 1, 1, 3, 5
        let path: Vec<usize> = t.p_list(0, 0).iter().map(|&p| p as usize).collect();
        assert_eq!(path, vec![t.root_pos(), t.pos(1, 0), t.pos(2, 0), t.leaf_pos(0)]);
        let ys: Vec<f64> = path.iter().map(|&p| t.s_list(p).next().unwrap().y).collect();
        assert_eq!(ys, vec![1., 1., 3., 5.]);
        // right hanging children of p1's path by minimum: {p3,p4} 1, {p5..p8} 2, p2 3
        let r: Vec<usize> = t.r_list(0, 0).iter().map(|&p| p as usize).collect();
        assert_eq!(r, vec![t.pos(2, 1), t.pos(1, 1), t.leaf_pos(1)]);
        assert!(t.l_list(0, 0).is_empty());
    }

    #[test]
    fn p8_queries() {
        let t = Mpst::build(&p8()).unwrap();
        assert_eq!(t.query_leaves(1, 5, 3.), vec![2, 4, 6]);
        assert!(t.query_leaves(0, 7, 0.5).is_empty());
        assert_eq!(t.query_leaves(3, 3, 1.), vec![4]);
        assert!(t.query_leaves(2, 2, 7.).is_empty());
        let ix = t.leaf_index();
        assert_eq!(t.query_full(&q(2., 6., 3.), &ix), vec![2, 4, 6]);
        assert!(t.query_full(&q(2.1, 2.9, 9.), &ix).is_empty());
        assert!(Mpst::build(&[]).unwrap().query(&q(0., 1., 1.)).is_empty());
    }

    #[test]
    fn early_exit_reads_one_entry() {
        let t = Mpst::build(&p8()).unwrap();
        t.query_leaves(0, 7, 0.0);
        assert_eq!(t.metrics().scanned_entries.get(), 1);
    }

    #[test]
    fn random_builds_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for round in 0..200 {
            let n = rng.gen_range(1..=if round < 20 { 40 } else { 2048 });
            let grid = round % 2 == 1;
            let pts: Vec<Point> = (0..n as u64)
                .map(|i| {
                    if grid {
                        Point::new(i, rng.gen_range(1..=30) as f64, rng.gen_range(1..=30) as f64).unwrap()
                    } else {
                        Point::new(i, rng.gen(), rng.gen()).unwrap()
                    }
                })
                .collect();
            let flat = Mpst::build(&pts).unwrap();
            let layered = LayeredMpst::build(&pts).unwrap();
            if n <= 40 {
                flat.audit().unwrap();
                layered.audit().unwrap();
            }
            let ix = flat.leaf_index();
            let lix = layered.leaf_index();
            for _ in 0..100 {
                let qq = if grid {
                    let a = rng.gen_range(0..=31) as f64;
                    q(a, a + rng.gen_range(0..=10) as f64, rng.gen_range(0..=31) as f64)
                } else {
                    let a: f64 = rng.gen();
                    q(a, a + rng.gen::<f64>() * 0.5, rng.gen())
                };
                let want = brute_force_query(&pts, &qq);
                let before = (
                    flat.metrics().scanned_entries.get(),
                    layered.metrics().scanned_entries.get(),
                );
                assert_eq!(flat.query_full(&qq, &ix), want);
                assert_eq!(layered.query_full(&qq, &lix), want);
                let t = want.len() as u64;
                assert!(flat.metrics().scanned_entries.get() - before.0 <= 5 * (t + 1));
                assert!(layered.metrics().scanned_entries.get() - before.1 <= 11 * (t + 1));
            }
        }
    }

    #[test]
    fn audit_catches_a_stale_minimum() {
        let mut t = Mpst::build(&p8()).unwrap();
        t.audit().unwrap();
        let root = t.root_pos();
        t.node_min[root] = Key::INFINITY;
        assert_eq!(t.audit().unwrap_err().node, Some(root));
    }

    #[test]
    fn layered_chopping() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Point> = (0..64).map(|i| Point::new(i, rng.gen(), rng.gen()).unwrap()).collect();
        let t = LayeredMpst::build(&pts).unwrap();
        assert_eq!(t.group_size(), 6);
        assert_eq!(t.groups().len(), 11);
        assert!(t.groups().iter().all(|g| g.len() <= 6));
        assert_eq!(t.top().len(), 11);
        let single = LayeredMpst::build(&p8()[..1]).unwrap();
        assert_eq!(single.groups().len(), 1);
        assert_eq!(single.query_full(&q(0., 9., 9.), &single.leaf_index()), vec![1]);
        assert!(single.query_full(&q(0., 9., 4.), &single.leaf_index()).is_empty());
        let l8 = LayeredMpst::build(&p8()).unwrap();
        assert_eq!(l8.query_full(&q(2., 6., 3.), &l8.leaf_index()), vec![2, 4, 6]);
    }
}
