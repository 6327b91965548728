//! One enum over every structure the harness can drive.

use std::fmt;
use std::str::FromStr;

use clap::ValueEnum;
use threesided::bucketed::BucketedPst;
use threesided::iosim::{ExtParams, ExtWbTree};
use threesided::mpst::{LayeredMpst, Mpst};
use threesided::pst::Pst;
use threesided::solution3::Solution3;
use threesided::wbpst::{WbParams, WbPst};
use threesided::xindex::XIndex;
use threesided::{AuditError, Error, MetricsSnapshot, Point, PointId, Query3, Result, StructureMetrics, ThreeSided};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum StructureKind {
    Pst,
    Bucketed,
    Wbpst,
    MpstStatic,
    Solution3,
    ExtWb,
}

impl StructureKind {
    pub const ALL: [StructureKind; 6] = [
        StructureKind::Pst,
        StructureKind::Bucketed,
        StructureKind::Wbpst,
        StructureKind::MpstStatic,
        StructureKind::Solution3,
        StructureKind::ExtWb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StructureKind::Pst => "pst",
            StructureKind::Bucketed => "bucketed",
            StructureKind::Wbpst => "wbpst",
            StructureKind::MpstStatic => "mpst_static",
            StructureKind::Solution3 => "solution3",
            StructureKind::ExtWb => "ext_wb",
        }
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StructureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StructureKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown structure {s:?}")))
    }
}

/// Options that only some structures read.
#[derive(Clone, Debug, PartialEq)]
pub struct BuildOptions {
    pub wb: WbParams,
    pub block_size: usize,
    pub cache_blocks: usize,
    /// Use the layered MPST for `mpst_static`.
    pub layered: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            wb: WbParams::default(),
            block_size: 8,
            cache_blocks: 32,
            layered: false,
        }
    }
}

#[derive(Debug)]
enum StaticTree {
    Flat(Mpst),
    Layered(LayeredMpst),
}

impl StaticTree {
    fn build(points: &[Point], layered: bool) -> Result<Self> {
        Ok(if layered {
            StaticTree::Layered(LayeredMpst::build(points)?)
        } else {
            StaticTree::Flat(Mpst::build(points)?)
        })
    }

    fn metrics(&self) -> &StructureMetrics {
        match self {
            StaticTree::Flat(t) => t.metrics(),
            StaticTree::Layered(t) => t.metrics(),
        }
    }

    fn leaf_index(&self) -> XIndex<usize> {
        match self {
            StaticTree::Flat(t) => t.leaf_index(),
            StaticTree::Layered(t) => t.leaf_index(),
        }
    }
}

/// A static MPST made dynamic by rebuilding after every update.
#[derive(Debug)]
pub struct StaticMpst {
    points: Vec<Point>,
    tree: StaticTree,
    xdict: XIndex<usize>,
    rebuilds: u64,
}

impl StaticMpst {
    pub fn build(points: &[Point], layered: bool) -> Result<Self> {
        let tree = StaticTree::build(points, layered)?;
        let xdict = tree.leaf_index();
        Ok(StaticMpst {
            points: points.to_vec(),
            tree,
            xdict,
            rebuilds: 0,
        })
    }

    pub fn is_layered(&self) -> bool {
        matches!(self.tree, StaticTree::Layered(_))
    }

    fn rebuild(&mut self) -> Result<()> {
        let old = self.tree.metrics().clone();
        self.tree = StaticTree::build(&self.points, self.is_layered())?;
        self.xdict = self.tree.leaf_index();
        self.tree.metrics().scanned_entries.add(old.scanned_entries.get());
        self.tree.metrics().node_visits.add(old.node_visits.get());
        self.rebuilds += 1;
        Ok(())
    }
}

impl ThreeSided for StaticMpst {
    fn len(&self) -> usize {
        self.points.len()
    }

    fn insert(&mut self, p: Point) -> Result<()> {
        if self.points.iter().any(|q| q.id == p.id) {
            return Err(Error::DuplicateId(p.id));
        }
        self.points.push(p);
        self.rebuild()
    }

    fn delete(&mut self, id: PointId) -> Result<Point> {
        let i = self.points.iter().position(|q| q.id == id).ok_or(Error::NotFound(id))?;
        let p = self.points.swap_remove(i);
        self.rebuild()?;
        Ok(p)
    }

    fn query_into(&self, q: &Query3, out: &mut Vec<PointId>) {
        out.extend(match &self.tree {
            StaticTree::Flat(t) => t.query_full(q, &self.xdict),
            StaticTree::Layered(t) => t.query_full(q, &self.xdict),
        });
    }

    fn metrics(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            rebuilds: self.rebuilds,
            ..self.tree.metrics().snapshot()
        }
    }

    fn audit(&self) -> std::result::Result<(), AuditError> {
        let size = match &self.tree {
            StaticTree::Flat(t) => t.len(),
            StaticTree::Layered(t) => t.len(),
        };
        if size != self.points.len() || self.xdict.len() != size {
            return Err(AuditError::new(None, "static tree out of date"));
        }
        self.xdict.audit()?;
        match &self.tree {
            StaticTree::Flat(t) => t.audit(),
            StaticTree::Layered(t) => t.audit(),
        }
    }

    fn points(&self) -> Vec<Point> {
        self.points.clone()
    }
}

pub enum AnyStructure {
    Pst(Pst),
    Bucketed(BucketedPst),
    Wbpst(WbPst),
    MpstStatic(StaticMpst),
    Solution3(Solution3),
    ExtWb(ExtWbTree),
}

impl AnyStructure {
    pub fn build(kind: StructureKind, points: &[Point], opts: &BuildOptions) -> Result<Self> {
        Ok(match kind {
            StructureKind::Pst => AnyStructure::Pst(Pst::from_points(points)?),
            StructureKind::Bucketed => AnyStructure::Bucketed(BucketedPst::build(points)?),
            StructureKind::Wbpst => AnyStructure::Wbpst(WbPst::build(points, opts.wb.clone())?),
            StructureKind::MpstStatic => AnyStructure::MpstStatic(StaticMpst::build(points, opts.layered)?),
            StructureKind::Solution3 => AnyStructure::Solution3(Solution3::build(points)?),
            StructureKind::ExtWb => {
                let params = ExtParams::new(opts.block_size, opts.cache_blocks)?;
                AnyStructure::ExtWb(ExtWbTree::build(points, params)?)
            }
        })
    }

    pub fn kind(&self) -> StructureKind {
        match self {
            AnyStructure::Pst(_) => StructureKind::Pst,
            AnyStructure::Bucketed(_) => StructureKind::Bucketed,
            AnyStructure::Wbpst(_) => StructureKind::Wbpst,
            AnyStructure::MpstStatic(_) => StructureKind::MpstStatic,
            AnyStructure::Solution3(_) => StructureKind::Solution3,
            AnyStructure::ExtWb(_) => StructureKind::ExtWb,
        }
    }

    pub fn as_dyn(&self) -> &dyn ThreeSided {
        match self {
            AnyStructure::Pst(s) => s,
            AnyStructure::Bucketed(s) => s,
            AnyStructure::Wbpst(s) => s,
            AnyStructure::MpstStatic(s) => s,
            AnyStructure::Solution3(s) => s,
            AnyStructure::ExtWb(s) => s,
        }
    }

    pub fn as_dyn_mut(&mut self) -> &mut dyn ThreeSided {
        match self {
            AnyStructure::Pst(s) => s,
            AnyStructure::Bucketed(s) => s,
            AnyStructure::Wbpst(s) => s,
            AnyStructure::MpstStatic(s) => s,
            AnyStructure::Solution3(s) => s,
            AnyStructure::ExtWb(s) => s,
        }
    }

    /// Empties the block cache so the next query is measured cold.
    pub fn cool(&self) {
        if let AnyStructure::ExtWb(t) = self {
            t.drop_cache();
        }
    }
}

impl ThreeSided for AnyStructure {
    fn len(&self) -> usize {
        self.as_dyn().len()
    }

    fn insert(&mut self, p: Point) -> Result<()> {
        self.as_dyn_mut().insert(p)
    }

    fn delete(&mut self, id: PointId) -> Result<Point> {
        self.as_dyn_mut().delete(id)
    }

    fn query_into(&self, q: &Query3, out: &mut Vec<PointId>) {
        self.as_dyn().query_into(q, out)
    }

    fn metrics(&self) -> MetricsSnapshot {
        self.as_dyn().metrics()
    }

    fn audit(&self) -> std::result::Result<(), AuditError> {
        self.as_dyn().audit()
    }

    fn points(&self) -> Vec<Point> {
        self.as_dyn().points()
    }
}
