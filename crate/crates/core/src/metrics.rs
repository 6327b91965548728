use std::sync::atomic::{AtomicU64, Ordering};

/// A relaxed atomic counter, so queries can be instrumented through `&self`.
#[derive(Debug, Default)]
pub struct Counter(AtomicU64);

impl Counter {
    #[inline]
    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    #[inline]
    pub fn incr(&self) {
        self.add(1);
    }

    #[inline]
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for Counter {
    fn clone(&self) -> Self {
        Counter(AtomicU64::new(self.get()))
    }
}

/// Instrumentation shared by all structures. Not every structure uses
/// every counter.
#[derive(Debug, Default, Clone)]
pub struct StructureMetrics {
    /// Tree nodes touched by queries.
    pub node_visits: Counter,
    /// List entries read by queries (MPST).
    pub scanned_entries: Counter,
    /// Inserted points that undercut their bucket's representative.
    pub violations: Counter,
    /// Full rebuilds from scratch.
    pub rebuilds: Counter,
    /// Node splits, merges and shares; partial subtree rebuilds.
    pub rebalances: Counter,
    /// Work spent rebuilding per-node auxiliary structures because of rebalancing.
    pub rebalance_work: Counter,
    /// Total work spent rebuilding per-node auxiliary structures.
    pub aux_rebuild_work: Counter,
    /// Deferred upper-level representative updates applied.
    pub pending_applied: Counter,
    /// Work units spent by the incremental upper-level rebuild.
    pub rebuild_units: Counter,
    pub subtree_calls: Counter,
    pub subtree_visits: Counter,
    /// Subtree reports that visited more than `3·(t+1)` nodes.
    pub subtree_bound_exceeded: Counter,
    /// Rebalances of a node after fewer than `⌈w_i/8⌉` updates below it.
    pub early_rebalances: Counter,
}

impl StructureMetrics {
    pub fn snapshot(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            node_visits: self.node_visits.get(),
            scanned_entries: self.scanned_entries.get(),
            violations: self.violations.get(),
            rebuilds: self.rebuilds.get(),
            rebalances: self.rebalances.get(),
            rebalance_work: self.rebalance_work.get(),
            aux_rebuild_work: self.aux_rebuild_work.get(),
            pending_applied: self.pending_applied.get(),
            rebuild_units: self.rebuild_units.get(),
            subtree_calls: self.subtree_calls.get(),
            subtree_visits: self.subtree_visits.get(),
            subtree_bound_exceeded: self.subtree_bound_exceeded.get(),
            early_rebalances: self.early_rebalances.get(),
            ..MetricsSnapshot::default()
        }
    }
}

/// A plain copy of the counters at one instant, plus I/O and size figures
/// that individual structures fill in.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MetricsSnapshot {
    pub node_visits: u64,
    pub scanned_entries: u64,
    pub violations: u64,
    pub rebuilds: u64,
    pub rebalances: u64,
    pub rebalance_work: u64,
    pub aux_rebuild_work: u64,
    pub pending_applied: u64,
    pub rebuild_units: u64,
    pub subtree_calls: u64,
    pub subtree_visits: u64,
    pub subtree_bound_exceeded: u64,
    pub early_rebalances: u64,
    pub aux_size: u64,
    pub io_reads: u64,
    pub io_writes: u64,
    pub cache_hits: u64,
}
