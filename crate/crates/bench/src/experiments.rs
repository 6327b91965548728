//! The statistical experiments. Each returns a [`Table`] whose rows depend
//! only on the arguments.

use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use threesided::bucketed::BucketedPst;
use threesided::dist::DistributionSpec;
use threesided::iosim::{BlockStore, ExtLeaf};
use threesided::mpst::{LayeredMpst, Mpst};
use threesided::solution3::Solution3;
use threesided::{brute_force_query, Point, PointId, Query3, Result, ThreeSided};

use crate::structures::{AnyStructure, BuildOptions, StructureKind};
use crate::table::Table;

/// Trials are cut into this many independently seeded chunks, so results do
/// not depend on how many threads run them.
const CHUNKS: u64 = 16;

fn chunk_rng(seed: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk + 1);
    rng
}

fn points_from(xs: &[f64], ys: &[f64], first_id: u64) -> Result<Vec<Point>> {
    xs.iter()
        .zip(ys)
        .enumerate()
        .map(|(i, (&x, &y))| Point::new(first_id + i as u64, x, y))
        .collect()
}

fn draw_points(n: usize, dx: &DistributionSpec, dy: &DistributionSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Point>> {
    let (sx, sy) = (dx.sampler()?, dy.sampler()?);
    let mut pts = Vec::with_capacity(n);
    for id in 0..n as u64 {
        pts.push(Point::new(id, sx.sample(rng), sy.sample(rng))?);
    }
    Ok(pts)
}

pub const MIN_PROB_COLUMNS: &[&str] = &["dist", "n", "trials", "hits", "estimate", "expected"];

/// Fraction of trials in which one more draw falls strictly below the
/// minimum of `n` earlier draws.
pub fn min_prob(n: usize, trials: u64, dist: &DistributionSpec, seed: u64) -> Result<Table> {
    let sampler = dist.sampler()?;
    let hits: u64 = thread::scope(|s| {
        let handles: Vec<_> = (0..CHUNKS)
            .map(|c| {
                let sampler = &sampler;
                s.spawn(move || {
                    let mut rng = chunk_rng(seed, c);
                    let count = trials / CHUNKS + u64::from(c < trials % CHUNKS);
                    let mut hits = 0;
                    for _ in 0..count {
                        let mut min = f64::INFINITY;
                        for _ in 0..n {
                            min = min.min(sampler.sample(&mut rng));
                        }
                        if sampler.sample(&mut rng) < min {
                            hits += 1;
                        }
                    }
                    hits
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("trial thread")).sum()
    });
    let mut t = Table::new(MIN_PROB_COLUMNS);
    t.push(vec![
        dist.to_string().into(),
        n.into(),
        trials.into(),
        hits.into(),
        (hits as f64 / trials.max(1) as f64).into(),
        (1.0 / (n as f64 + 1.0)).into(),
    ]);
    Ok(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochConfig {
    pub n: usize,
    pub epochs: usize,
    pub dist_x: DistributionSpec,
    pub dist_y: DistributionSpec,
    pub seed: u64,
    /// Every inserted y lies below all earlier ones.
    pub adversarial_y: bool,
}

pub const EPOCH_COLUMNS: &[&str] = &[
    "epoch",
    "n",
    "epoch_len",
    "inserts",
    "deletes",
    "violations",
    "aux_size",
    "size",
];

/// Epochs of `⌈log₂ n⌉` inserts into a bucketed PST, each insert followed by
/// the delete of a random live point.
pub fn violations_epoch(cfg: &EpochConfig) -> Result<Table> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pts = draw_points(cfg.n, &cfg.dist_x, &cfg.dist_y, &mut rng)?;
    let mut live: Vec<PointId> = pts.iter().map(|p| p.id).collect();
    let mut floor = pts.iter().map(|p| p.y).fold(0.0f64, f64::min);
    let mut s = BucketedPst::build(&pts)?;
    let (sx, sy) = (cfg.dist_x.sampler()?, cfg.dist_y.sampler()?);
    let len = (cfg.n.max(2) as f64).log2().ceil() as usize;
    let mut next = cfg.n as u64;
    let mut t = Table::new(EPOCH_COLUMNS);
    for e in 0..cfg.epochs {
        let before = s.metrics().violations.get();
        for _ in 0..len {
            let x = sx.sample(&mut rng);
            let y = if cfg.adversarial_y {
                floor -= 1.0;
                floor
            } else {
                sy.sample(&mut rng)
            };
            s.insert(Point::new(next, x, y)?)?;
            live.push(next);
            next += 1;
            let victim = live.swap_remove(rng.gen_range(0..live.len()));
            s.delete(victim)?;
        }
        s.audit()?;
        t.push(vec![
            e.into(),
            cfg.n.into(),
            len.into(),
            len.into(),
            len.into(),
            (s.metrics().violations.get() - before).into(),
            s.aux_len().into(),
            s.len().into(),
        ]);
    }
    Ok(t)
}

pub const LINEAR_COLUMNS: &[&str] = &["n", "updates", "violations", "aux_size", "max_aux", "epochs_done"];

/// One full epoch of Solution 3 (`n` updates, inserts alternating with
/// deletes of random live points), with rows at `checkpoints` evenly spaced
/// updates.
pub fn violations_linear(
    n: usize,
    dist_x: &DistributionSpec,
    dist_y: &DistributionSpec,
    seed: u64,
    checkpoints: usize,
) -> Result<Table> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = draw_points(n, dist_x, dist_y, &mut rng)?;
    let mut live: Vec<PointId> = pts.iter().map(|p| p.id).collect();
    let mut s = Solution3::build(&pts)?;
    let (sx, sy) = (dist_x.sampler()?, dist_y.sampler()?);
    let updates = s.epoch_len();
    let rebuilds0 = s.metrics().rebuilds.get();
    let mut next = n as u64;
    let mut max_aux = 0;
    let mut t = Table::new(LINEAR_COLUMNS);
    for u in 0..updates {
        if u % 2 == 0 || live.is_empty() {
            s.insert(Point::new(next, sx.sample(&mut rng), sy.sample(&mut rng))?)?;
            live.push(next);
            next += 1;
        } else {
            let victim = live.swap_remove(rng.gen_range(0..live.len()));
            s.delete(victim)?;
        }
        max_aux = max_aux.max(s.aux_len());
        let j = u + 1;
        if checkpoints > 0 && j * checkpoints / updates > u * checkpoints / updates {
            s.audit()?;
            t.push(vec![
                n.into(),
                j.into(),
                s.metrics().violations.get().into(),
                s.aux_len().into(),
                max_aux.into(),
                (s.metrics().rebuilds.get() - rebuilds0).into(),
            ]);
        }
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stratum {
    /// A slab of width `1/(4n)` with `c = 1`: about a quarter of a point
    /// reported, but every level searched.
    Empty,
    /// About `√n` points reported.
    Sqrt,
    /// About `n/4` points reported.
    Quarter,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Empty, Stratum::Sqrt, Stratum::Quarter];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Empty => "t0",
            Stratum::Sqrt => "sqrt",
            Stratum::Quarter => "quarter",
        }
    }

    /// A query on unit-square uniform points; the last two strata use a
    /// slab of width ½.
    pub fn query<R: Rng>(self, n: usize, rng: &mut R) -> Query3 {
        let (w, c) = match self {
            Stratum::Empty => (0.25 / n as f64, 1.0),
            Stratum::Sqrt => (0.5, 2.0 / (n as f64).sqrt()),
            Stratum::Quarter => (0.5, 0.5),
        };
        let a = rng.gen_range(0.0..1.0 - w);
        Query3::new(a, a + w, c).expect("finite bounds")
    }
}

pub const SCALING_COLUMNS: &[&str] = &[
    "structure",
    "n",
    "stratum",
    "queries",
    "mean_t",
    "mean_node_visits",
    "mean_scanned",
    "mean_io_reads",
    "max_work_ratio",
    "bound_exceeded",
];

/// Mean per-query counters on uniform points for each size and stratum.
/// `max_work_ratio` is the largest scanned-entries / (t + 1) seen. Answers
/// are checked against brute force when `check` is set.
pub fn scaling(
    kind: StructureKind,
    sizes: &[usize],
    queries: usize,
    seed: u64,
    opts: &BuildOptions,
    check: bool,
) -> Result<Table> {
    let mut t = Table::new(SCALING_COLUMNS);
    let unit = DistributionSpec::uniform(0.0, 1.0);
    for &n in sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).rotate_left(32));
        let pts = draw_points(n, &unit, &unit, &mut rng)?;
        let s = AnyStructure::build(kind, &pts, opts)?;
        s.audit()?;
        for stratum in Stratum::ALL {
            let (mut tt, mut visits, mut scanned, mut reads, mut worst) = (0u64, 0u64, 0u64, 0u64, 0.0f64);
            let exceeded0 = s.metrics().subtree_bound_exceeded;
            let mut out = Vec::new();
            for _ in 0..queries {
                let q = stratum.query(n, &mut rng);
                s.cool();
                let m0 = s.metrics();
                out.clear();
                s.query_into(&q, &mut out);
                let m1 = s.metrics();
                if check {
                    out.sort_unstable();
                    assert_eq!(out, brute_force_query(&pts, &q), "{kind} n={n} {q:?}");
                }
                let sc = m1.scanned_entries - m0.scanned_entries;
                tt += out.len() as u64;
                visits += m1.node_visits - m0.node_visits;
                scanned += sc;
                reads += m1.io_reads - m0.io_reads;
                worst = worst.max(sc as f64 / (out.len() as f64 + 1.0));
            }
            let k = queries.max(1) as f64;
            t.push(vec![
                kind.name().into(),
                n.into(),
                stratum.name().into(),
                queries.into(),
                (tt as f64 / k).into(),
                (visits as f64 / k).into(),
                (scanned as f64 / k).into(),
                (reads as f64 / k).into(),
                worst.into(),
                (s.metrics().subtree_bound_exceeded - exceeded0).into(),
            ]);
        }
    }
    Ok(t)
}

pub const MPST_WORK_COLUMNS: &[&str] = &[
    "build",
    "n",
    "queries",
    "max_ratio_flat",
    "max_ratio_layered",
    "mismatches",
];

/// Random static MPSTs (flat and layered) of up to `max_n` points; for each,
/// the largest scanned-entries / (t + 1) over `queries` random queries.
pub fn mpst_work(builds: usize, max_n: usize, queries: usize, seed: u64) -> Result<Table> {
    let mut t = Table::new(MPST_WORK_COLUMNS);
    let dists = [
        DistributionSpec::uniform(0.0, 1.0),
        DistributionSpec::Grid { m: 64 },
        DistributionSpec::Zipf { n: 1000, s: 1.2 },
    ];
    for i in 0..builds {
        let mut rng = chunk_rng(seed, i as u64);
        let n = rng.gen_range(1..=max_n);
        let (dx, dy) = (&dists[i % 2], &dists[(i / 2) % 3]);
        let pts = draw_points(n, dx, dy, &mut rng)?;
        let flat = Mpst::build(&pts)?;
        let layered = LayeredMpst::build(&pts)?;
        flat.audit()?;
        layered.audit()?;
        let (fx, lx) = (flat.leaf_index(), layered.leaf_index());
        let (sx, sy) = (dx.sampler()?, dy.sampler()?);
        let (mut wf, mut wl, mut bad) = (0.0f64, 0.0f64, 0u64);
        for _ in 0..queries {
            let (u, v) = (sx.sample(&mut rng), sx.sample(&mut rng));
            let q = Query3::new(u.min(v), u.max(v), sy.sample(&mut rng))?;
            let want = brute_force_query(&pts, &q);
            let k = want.len() as f64 + 1.0;
            let s0 = flat.metrics().scanned_entries.get();
            let got = flat.query_full(&q, &fx);
            wf = wf.max((flat.metrics().scanned_entries.get() - s0) as f64 / k);
            bad += u64::from(got != want);
            let s0 = layered.metrics().scanned_entries.get();
            let got = layered.query_full(&q, &lx);
            wl = wl.max((layered.metrics().scanned_entries.get() - s0) as f64 / k);
            bad += u64::from(got != want);
        }
        t.push(vec![
            i.into(),
            n.into(),
            queries.into(),
            wf.into(),
            wl.into(),
            bad.into(),
        ]);
    }
    Ok(t)
}

pub const LEAF_IO_COLUMNS: &[&str] = &[
    "b",
    "leaf",
    "updates",
    "queries",
    "max_ratio",
    "max_reads",
    "mismatches",
    "audit_failures",
];

/// Leaves of `B²` random points, some after random updates, queried with a
/// cold cache; the largest reads / (t/B + 1) per leaf.
pub fn leaf_io(blocks: &[usize], leaves: usize, queries: usize, seed: u64) -> Result<Table> {
    let mut t = Table::new(LEAF_IO_COLUMNS);
    for &b in blocks {
        for l in 0..leaves {
            let mut rng = chunk_rng(seed ^ b as u64, l as u64);
            let mut store = BlockStore::new(b, 4 * b)?;
            let k = b * b;
            let xs: Vec<f64> = (0..k).map(|_| rng.gen()).collect();
            let ys: Vec<f64> = (0..k).map(|_| rng.gen()).collect();
            let mut live = points_from(&xs, &ys, 0)?;
            let mut leaf = ExtLeaf::build(&mut store, live.clone());
            let updates = if l % 2 == 0 { 0 } else { rng.gen_range(1..=3 * b) };
            let mut next = k as u64;
            for _ in 0..updates {
                if rng.gen_bool(0.5) && live.len() < k {
                    let p = Point::new(next, rng.gen(), rng.gen())?;
                    next += 1;
                    leaf.insert(&mut store, p);
                    live.push(p);
                } else if !live.is_empty() {
                    let p = live.swap_remove(rng.gen_range(0..live.len()));
                    leaf.delete(&mut store, p);
                }
            }
            let audit_failures = u64::from(leaf.audit(&store).is_err());
            let (mut worst, mut max_reads, mut bad) = (0.0f64, 0u64, 0u64);
            let mut out = Vec::new();
            for _ in 0..queries {
                let a: f64 = rng.gen();
                let q = Query3::new(a, a + rng.gen::<f64>(), rng.gen())?;
                store.drop_cache();
                store.reset_stats();
                out.clear();
                leaf.query(&mut store, &q, None, &mut out);
                out.sort_unstable();
                let reads = store.stats().reads;
                bad += u64::from(out != brute_force_query(&live, &q));
                max_reads = max_reads.max(reads);
                worst = worst.max(reads as f64 / (out.len() as f64 / b as f64 + 1.0));
            }
            t.push(vec![
                b.into(),
                l.into(),
                updates.into(),
                queries.into(),
                worst.into(),
                max_reads.into(),
                bad.into(),
                audit_failures.into(),
            ]);
        }
    }
    Ok(t)
}

/// Least-squares slope and intercept of `ys` against `xs`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len().max(2) - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_prob_edge_and_small_cases() {
        let u = DistributionSpec::uniform(0.0, 1.0);
        let t = min_prob(0, 1000, &u, 1).unwrap();
        assert_eq!(t.values("estimate"), vec![1.0]);
        let t = min_prob(1, 200_000, &u, 2).unwrap();
        assert!((t.values("estimate")[0] - 0.5).abs() < 0.005);
        assert_eq!(min_prob(3, 5000, &u, 3).unwrap(), min_prob(3, 5000, &u, 3).unwrap());
    }

    #[test]
    fn adversarial_epochs_violate_every_insert() {
        let cfg = EpochConfig {
            n: 1024,
            epochs: 5,
            dist_x: DistributionSpec::uniform(0.0, 1.0),
            dist_y: DistributionSpec::uniform(0.0, 1.0),
            seed: 4,
            adversarial_y: true,
        };
        let t = violations_epoch(&cfg).unwrap();
        assert_eq!(t.len(), 5);
        for v in t.values("violations") {
            assert_eq!(v, 10.0);
        }
    }

    #[test]
    fn linear_epoch_rows() {
        let u = DistributionSpec::uniform(0.0, 1.0);
        let t = violations_linear(256, &u, &u, 5, 8).unwrap();
        assert_eq!(t.len(), 8);
        assert_eq!(t.values("updates").last(), Some(&256.0));
        assert_eq!(t.values("epochs_done").last(), Some(&1.0));
    }

    #[test]
    fn scaling_rows_and_strata() {
        let t = scaling(StructureKind::Pst, &[256, 1024], 20, 6, &BuildOptions::default(), true).unwrap();
        assert_eq!(t.len(), 6);
        let means = t.values("mean_t");
        assert!(means[0] < 2.0 && means[2] > 40.0, "{means:?}");
    }

    #[test]
    fn fitted_line() {
        let (s, c) = fit_line(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((s - 2.0).abs() < 1e-12 && (c - 1.0).abs() < 1e-12);
    }
}
