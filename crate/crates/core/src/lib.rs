//! Dynamic 3-sided planar range reporting.
//!
//! A query `[a, b] × (−∞, c]` reports every stored point with `a ≤ x ≤ b`
//! and `y ≤ c`. The crate provides:
//!
//! * [`pst::Pst`], the classic dynamic priority search tree;
//! * [`bucketed::BucketedPst`], logarithmic PST buckets under a PST of
//!   bucket minima with a buffer for violating insertions;
//! * [`wbpst::WbPst`], a weight-balanced exponential tree with per-node RMQ
//!   over children's tournament points;
//! * [`mpst::Mpst`], a static modified PST answering in `O(t)` list scans
//!   once the boundary leaves are known;
//! * [`solution3::Solution3`], PST buckets under an MPST that is rebuilt
//!   globally every `n` updates;
//! * [`iosim`], a simulated block store and an external-memory
//!   weight-balanced tree measured in block transfers.
//!
//! [`point::brute_force_query`] is the reference answer for all of them.

// `!(x > 0.0)` is how NaN gets rejected along with the rest.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bucketed;
pub mod dist;
pub mod error;
pub mod iosim;
pub mod metrics;
pub mod mpst;
pub mod point;
pub mod pst;
pub mod rmq;
pub mod solution3;
pub mod wbpst;
pub mod xindex;

pub use error::{AuditError, Error, Result};
pub use metrics::{MetricsSnapshot, StructureMetrics};
pub use point::{brute_force_query, Key, Point, PointId, PointSet, Query3};

/// Common surface of the dynamic structures, used by the workload runner.
pub trait ThreeSided {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&mut self, p: Point) -> Result<()>;

    fn delete(&mut self, id: PointId) -> Result<Point>;

    /// Appends the answer to `out` in no particular order.
    fn query_into(&self, q: &Query3, out: &mut Vec<PointId>);

    /// The answer, sorted by id.
    fn query(&self, q: &Query3) -> Vec<PointId> {
        let mut out = Vec::new();
        self.query_into(q, &mut out);
        out.sort_unstable();
        out
    }

    fn metrics(&self) -> MetricsSnapshot;

    fn audit(&self) -> Result<(), AuditError>;

    /// The stored points in unspecified order.
    fn points(&self) -> Vec<Point>;
}
