//! Nested binary partitions of a 1-D interval and the prior over their cut points.
//!
//! Sets are addressed in heap order: the root (the whole domain) is node 0 and
//! node `k` has children `2k + 1` and `2k + 2`. Level `l` holds nodes
//! `2^l - 1 ..= 2^(l+1) - 2`. Within a level, set indices are 0-based and run
//! left to right. Intervals are half-open `[lo, hi)` except that the right end
//! of the domain belongs to the rightmost set.

mod prior;
mod tree;

pub use prior::PartitionPrior;
pub use tree::{Interval, PartitionTree, Violation};

/// Number of internal (cut-carrying) nodes of a depth-`depth` tree.
pub fn internal_node_count(depth: usize) -> usize {
    if depth <= 1 {
        0
    } else {
        (1usize << (depth - 1)) - 1
    }
}

/// Level of a heap-ordered node.
pub fn node_level(node: usize) -> usize {
    (usize::BITS - 1 - (node + 1).leading_zeros()) as usize
}

/// Heap index of the first node on `level`.
pub fn level_offset(level: usize) -> usize {
    (1usize << level) - 1
}
