//! Simulated external memory: a block store with an LRU cache, a leaf
//! structure for up to `B²` points, and an external weight-balanced
//! exponential tree built from them. Costs are block transfers.

mod leaf;
mod store;
mod tree;

pub use leaf::ExtLeaf;
pub use store::{BlockId, BlockStore, IoStats};
pub use tree::{ExtParams, ExtWbTree};
