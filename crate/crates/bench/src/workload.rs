//! Seeded workloads: a generated script of updates and queries replayed
//! against one structure, with an optional brute-force cross-check.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use threesided::dist::DistributionSpec;
use threesided::{brute_force_query, Error, MetricsSnapshot, Point, PointId, Query3, Result, ThreeSided};

use crate::structures::{AnyStructure, BuildOptions, StructureKind};
use crate::table::{Cell, Table};

/// Percentages of inserts, deletes and queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mix {
    pub insert: u32,
    pub delete: u32,
    pub query: u32,
}

impl Mix {
    pub fn new(insert: u32, delete: u32, query: u32) -> Result<Self> {
        if insert + delete + query != 100 {
            return Err(Error::config(format!(
                "mix {insert}:{delete}:{query} does not sum to 100"
            )));
        }
        Ok(Mix { insert, delete, query })
    }
}

impl Default for Mix {
    fn default() -> Self {
        Mix {
            insert: 40,
            delete: 30,
            query: 30,
        }
    }
}

impl FromStr for Mix {
    type Err = Error;

    /// `insert:delete:query`, e.g. `40:30:30`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::config(format!("bad mix {s:?}, expected i:d:q"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let v: Vec<u32> = parts
            .iter()
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        Mix::new(v[0], v[1], v[2])
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.insert, self.delete, self.query)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadConfig {
    pub structure: StructureKind,
    pub dist_x: DistributionSpec,
    pub dist_y: DistributionSpec,
    pub n: usize,
    pub ops: usize,
    pub mix: Mix,
    pub seed: u64,
    pub build: BuildOptions,
    /// Rows in the result; fewer when there are fewer ops.
    pub checkpoints: usize,
    /// Largest initial size that is still cross-checked.
    pub oracle_cap: usize,
    /// Audit after every this many ops, and at every checkpoint; 0 disables.
    pub audit_every: usize,
}

impl WorkloadConfig {
    pub fn new(structure: StructureKind, n: usize, ops: usize, seed: u64) -> Self {
        WorkloadConfig {
            structure,
            dist_x: DistributionSpec::uniform(0.0, 1.0),
            dist_y: DistributionSpec::uniform(0.0, 1.0),
            n,
            ops,
            mix: Mix::default(),
            seed,
            build: BuildOptions::default(),
            checkpoints: 10,
            oracle_cap: 4096,
            audit_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Insert(Point),
    Delete(PointId),
    Query(Query3),
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Insert(p) => write!(f, "insert {} ({}, {})", p.id, p.x, p.y),
            Op::Delete(id) => write!(f, "delete {id}"),
            Op::Query(q) => write!(f, "query [{}, {}] x (-inf, {}]", q.a, q.b, q.c),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Script {
    pub initial: Vec<Point>,
    pub ops: Vec<Op>,
}

impl Script {
    /// Draws the initial points and the op sequence from `cfg.seed`.
    pub fn generate(cfg: &WorkloadConfig) -> Result<Script> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let sx = cfg.dist_x.sampler()?;
        let sy = cfg.dist_y.sampler()?;
        let mut initial = Vec::with_capacity(cfg.n);
        for id in 0..cfg.n as u64 {
            initial.push(Point::new(id, sx.sample(&mut rng), sy.sample(&mut rng))?);
        }
        let mut live: Vec<PointId> = initial.iter().map(|p| p.id).collect();
        let mut next = cfg.n as u64;
        let mut ops = Vec::with_capacity(cfg.ops);
        for _ in 0..cfg.ops {
            let r = rng.gen_range(0..100);
            let op = if r < cfg.mix.insert || (r < cfg.mix.insert + cfg.mix.delete && live.is_empty()) {
                let p = Point::new(next, sx.sample(&mut rng), sy.sample(&mut rng))?;
                next += 1;
                live.push(p.id);
                Op::Insert(p)
            } else if r < cfg.mix.insert + cfg.mix.delete {
                Op::Delete(live.swap_remove(rng.gen_range(0..live.len())))
            } else {
                let (u, v) = (sx.sample(&mut rng), sx.sample(&mut rng));
                Op::Query(Query3::new(u.min(v), u.max(v), sy.sample(&mut rng))?)
            };
            ops.push(op);
        }
        Ok(Script { initial, ops })
    }
}

/// A query answer that differs from brute force, with the shortest failing
/// op sequence found.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleMismatch {
    pub structure: String,
    /// Index of the failing op in the original script.
    pub step: usize,
    pub query: Query3,
    pub got: Vec<PointId>,
    pub want: Vec<PointId>,
    /// Ops that still reproduce a mismatch from the same initial points.
    pub prefix: Vec<Op>,
}

impl fmt::Display for OracleMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: oracle mismatch at op {} on [{}, {}] x (-inf, {}]: got {:?}, want {:?}",
            self.structure, self.step, self.query.a, self.query.b, self.query.c, self.got, self.want
        )?;
        writeln!(f, "minimized failing sequence ({} ops):", self.prefix.len())?;
        for op in &self.prefix {
            writeln!(f, "  {op}")?;
        }
        Ok(())
    }
}

impl std::error::Error for OracleMismatch {}

pub const RUN_COLUMNS: &[&str] = &[
    "structure",
    "step",
    "size",
    "inserts",
    "deletes",
    "queries",
    "reported",
    "node_visits",
    "scanned_entries",
    "violations",
    "aux_size",
    "rebuilds",
    "rebalances",
    "io_reads",
    "io_writes",
    "cache_hits",
    "bound_exceeded",
    "oracle_checks",
];

/// Brute-force model of the live set.
#[derive(Default)]
struct Model {
    points: Vec<Point>,
    at: HashMap<PointId, usize>,
}

impl Model {
    fn new(points: &[Point]) -> Self {
        let at = points.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
        Model {
            points: points.to_vec(),
            at,
        }
    }

    fn insert(&mut self, p: Point) {
        self.at.insert(p.id, self.points.len());
        self.points.push(p);
    }

    fn delete(&mut self, id: PointId) -> bool {
        let Some(i) = self.at.remove(&id) else { return false };
        self.points.swap_remove(i);
        if i < self.points.len() {
            self.at.insert(self.points[i].id, i);
        }
        true
    }
}

pub type Factory<'a> = dyn Fn(&[Point]) -> Result<Box<dyn ThreeSided>> + 'a;

/// Op index, answer given, answer wanted.
type Mismatch = (usize, Vec<PointId>, Vec<PointId>);

/// Replays `ops`, skipping deletes of absent ids, and returns the first
/// mismatching query's index with both answers.
fn first_mismatch(build: &Factory, initial: &[Point], ops: &[Op]) -> Result<Option<Mismatch>> {
    let mut s = build(initial)?;
    let mut m = Model::new(initial);
    for (i, op) in ops.iter().enumerate() {
        match *op {
            Op::Insert(p) => {
                if m.at.contains_key(&p.id) {
                    continue;
                }
                m.insert(p);
                s.insert(p)?;
            }
            Op::Delete(id) => {
                if m.delete(id) {
                    s.delete(id)?;
                }
            }
            Op::Query(q) => {
                let got = s.query(&q);
                let want = brute_force_query(&m.points, &q);
                if got != want {
                    return Ok(Some((i, got, want)));
                }
            }
        }
    }
    Ok(None)
}

/// Shrinks a failing sequence by dropping chunks of ops while some query
/// still mismatches.
pub fn minimize(build: &Factory, initial: &[Point], ops: &[Op]) -> Result<Vec<Op>> {
    let mut cur = ops.to_vec();
    let Some((end, _, _)) = first_mismatch(build, initial, &cur)? else {
        return Ok(cur);
    };
    cur.truncate(end + 1);
    let mut chunk = cur.len().div_ceil(2).max(1);
    let mut budget = 400;
    while budget > 0 {
        let mut start = 0;
        let mut shrunk = false;
        while start + 1 < cur.len() && budget > 0 {
            budget -= 1;
            let stop = (start + chunk).min(cur.len() - 1);
            let mut trial: Vec<Op> = cur[..start].to_vec();
            trial.extend_from_slice(&cur[stop..]);
            if let Some((end, _, _)) = first_mismatch(build, initial, &trial)? {
                trial.truncate(end + 1);
                cur = trial;
                shrunk = true;
            } else {
                start = stop;
            }
        }
        if !shrunk {
            if chunk == 1 {
                break;
            }
            chunk = chunk.div_ceil(2);
        }
    }
    Ok(cur)
}

fn metric_row(name: &str, step: usize, size: usize, counts: [u64; 4], m: &MetricsSnapshot, checks: u64) -> Vec<Cell> {
    vec![
        name.into(),
        step.into(),
        size.into(),
        counts[0].into(),
        counts[1].into(),
        counts[2].into(),
        counts[3].into(),
        m.node_visits.into(),
        m.scanned_entries.into(),
        m.violations.into(),
        m.aux_size.into(),
        m.rebuilds.into(),
        m.rebalances.into(),
        m.io_reads.into(),
        m.io_writes.into(),
        m.cache_hits.into(),
        m.subtree_bound_exceeded.into(),
        checks.into(),
    ]
}

/// Runs `script` on a structure made by `build`, emitting cumulative rows
/// at `checkpoints` evenly spaced ops.
pub fn run_script(
    name: &str,
    build: &Factory,
    script: &Script,
    checkpoints: usize,
    check: bool,
    audit_every: usize,
) -> anyhow::Result<Table> {
    let mut table = Table::new(RUN_COLUMNS);
    let mut s = build(&script.initial)?;
    let mut model = check.then(|| Model::new(&script.initial));
    let total = script.ops.len();
    let (mut ins, mut del, mut qs, mut rep, mut checks) = (0u64, 0u64, 0u64, 0u64, 0u64);
    let mut out = Vec::new();
    for (i, op) in script.ops.iter().enumerate() {
        match *op {
            Op::Insert(p) => {
                s.insert(p)?;
                ins += 1;
                if let Some(m) = model.as_mut() {
                    m.insert(p);
                }
            }
            Op::Delete(id) => {
                s.delete(id)?;
                del += 1;
                if let Some(m) = model.as_mut() {
                    m.delete(id);
                }
            }
            Op::Query(q) => {
                out.clear();
                s.query_into(&q, &mut out);
                out.sort_unstable();
                qs += 1;
                rep += out.len() as u64;
                if let Some(m) = &model {
                    let want = brute_force_query(&m.points, &q);
                    checks += 1;
                    if out != want {
                        let prefix = minimize(build, &script.initial, &script.ops[..=i])?;
                        return Err(OracleMismatch {
                            structure: name.to_string(),
                            step: i,
                            query: q,
                            got: out,
                            want,
                            prefix,
                        }
                        .into());
                    }
                }
            }
        }
        let j = i + 1;
        let at_checkpoint = checkpoints > 0 && j * checkpoints / total > i * checkpoints / total;
        if audit_every > 0 && (j % audit_every == 0 || at_checkpoint) {
            s.audit()
                .map_err(|e| anyhow::anyhow!("{name}: audit failed after op {i}: {e}"))?;
        }
        if at_checkpoint {
            table.push(metric_row(name, j, s.len(), [ins, del, qs, rep], &s.metrics(), checks));
        }
    }
    Ok(table)
}

/// Generates the configured script and runs it.
pub fn run_workload(cfg: &WorkloadConfig) -> anyhow::Result<Table> {
    let script = Script::generate(cfg)?;
    let opts = cfg.build.clone();
    let kind = cfg.structure;
    let build =
        move |pts: &[Point]| -> Result<Box<dyn ThreeSided>> { Ok(Box::new(AnyStructure::build(kind, pts, &opts)?)) };
    run_script(
        kind.name(),
        &build,
        &script,
        cfg.checkpoints,
        cfg.n <= cfg.oracle_cap,
        cfg.audit_every,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Drops every point with an even id from query answers.
    struct Lossy(Box<dyn ThreeSided>);

    impl ThreeSided for Lossy {
        fn len(&self) -> usize {
            self.0.len()
        }
        fn insert(&mut self, p: Point) -> Result<()> {
            self.0.insert(p)
        }
        fn delete(&mut self, id: PointId) -> Result<Point> {
            self.0.delete(id)
        }
        fn query_into(&self, q: &Query3, out: &mut Vec<PointId>) {
            let mut v = Vec::new();
            self.0.query_into(q, &mut v);
            out.extend(v.into_iter().filter(|&id| id % 2 == 1 || id < 20));
        }
        fn metrics(&self) -> MetricsSnapshot {
            self.0.metrics()
        }
        fn audit(&self) -> std::result::Result<(), threesided::AuditError> {
            self.0.audit()
        }
        fn points(&self) -> Vec<Point> {
            self.0.points()
        }
    }

    #[test]
    fn mix_parsing() {
        assert_eq!("50:25:25".parse::<Mix>().unwrap(), Mix::new(50, 25, 25).unwrap());
        assert!("50:25".parse::<Mix>().is_err());
        assert!("50:25:26".parse::<Mix>().is_err());
        assert!("a:b:c".parse::<Mix>().is_err());
        assert_eq!(Mix::default().to_string(), "40:30:30");
    }

    #[test]
    fn scripts_are_reproducible_and_valid() {
        let cfg = WorkloadConfig::new(StructureKind::Pst, 50, 500, 9);
        let s = Script::generate(&cfg).unwrap();
        assert_eq!(s, Script::generate(&cfg).unwrap());
        let mut live: std::collections::HashSet<PointId> = s.initial.iter().map(|p| p.id).collect();
        for op in &s.ops {
            match op {
                Op::Insert(p) => assert!(live.insert(p.id)),
                Op::Delete(id) => assert!(live.remove(id)),
                Op::Query(q) => assert!(q.a <= q.b),
            }
        }
    }

    #[test]
    fn zero_ops_gives_no_rows() {
        let cfg = WorkloadConfig::new(StructureKind::Wbpst, 100, 0, 1);
        assert!(run_workload(&cfg).unwrap().is_empty());
    }

    #[test]
    fn checkpoint_count() {
        let mut cfg = WorkloadConfig::new(StructureKind::Bucketed, 100, 95, 1);
        cfg.checkpoints = 10;
        let t = run_workload(&cfg).unwrap();
        assert_eq!(t.len(), 10);
        assert_eq!(t.values("step").last(), Some(&95.0));
        cfg.ops = 4;
        assert_eq!(run_workload(&cfg).unwrap().len(), 4);
    }

    #[test]
    fn mismatch_is_minimized() {
        let cfg = WorkloadConfig::new(StructureKind::Pst, 60, 400, 3);
        let script = Script::generate(&cfg).unwrap();
        let build = |pts: &[Point]| -> Result<Box<dyn ThreeSided>> {
            let inner = AnyStructure::build(StructureKind::Pst, pts, &BuildOptions::default())?;
            Ok(Box::new(Lossy(Box::new(inner))))
        };
        let err = run_script("lossy", &build, &script, 10, true, 0).unwrap_err();
        let m = err.downcast::<OracleMismatch>().unwrap();
        assert!(m.prefix.len() <= m.step + 1);
        assert!(matches!(m.prefix.last(), Some(Op::Query(_))));
        assert!(first_mismatch(&build, &script.initial, &m.prefix).unwrap().is_some());
        assert!(m.to_string().contains("minimized failing sequence"));
    }
}
