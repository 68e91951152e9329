use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{internal_node_count, level_offset, node_level};
use crate::error::{MgpError, Result};

/// A real interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }
}

/// First invariant a candidate tree breaks.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Violation {
    #[error("domain [{lo}, {hi}) is empty or not finite")]
    EmptyDomain { lo: f64, hi: f64 },
    #[error("tree depth must be at least 1")]
    ZeroDepth,
    #[error("expected {expected} cuts, found {found}")]
    CutCount { expected: usize, found: usize },
    #[error("level {level} has {found} cuts, expected {expected}")]
    LevelCutCount {
        level: usize,
        expected: usize,
        found: usize,
    },
    #[error("cut level {level} outside 1..{depth}")]
    CutLevel { level: usize, depth: usize },
    #[error(
        "cut outside parent set: level {level} cut {index} at {value} not inside ({lo}, {hi})"
    )]
    CutOutsideParent {
        level: usize,
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
}

/// A nested binary partition `{A^0, ..., A^{L-1}}` of a 1-D domain.
///
/// Each internal node carries either a cut point strictly inside its set or
/// a null cut. A null cut replicates the parent set into its left child and
/// leaves an empty right child; it is how segments too small to split, and
/// the single-set hierarchical GP, are represented without changing arity.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "TreeJson", into = "TreeJson")]
pub struct PartitionTree {
    depth: usize,
    domain: Interval,
    cuts: Vec<Option<f64>>,
    sets: Vec<Interval>,
}

impl PartialEq for PartitionTree {
    fn eq(&self, other: &Self) -> bool {
        self.depth == other.depth && self.domain == other.domain && self.cuts == other.cuts
    }
}

impl PartitionTree {
    /// Builds and validates a tree from heap-ordered cuts.
    pub fn new(domain: Interval, depth: usize, cuts: Vec<Option<f64>>) -> Result<Self> {
        let tree = Self::unchecked(domain, depth, cuts);
        tree.validate()?;
        Ok(tree)
    }

    /// Builds a tree without checking invariants; see [`PartitionTree::validate`].
    pub fn unchecked(domain: Interval, depth: usize, cuts: Vec<Option<f64>>) -> Self {
        let n_sets = if depth == 0 { 0 } else { (1usize << depth) - 1 };
        let mut sets = Vec::with_capacity(n_sets);
        if n_sets > 0 {
            sets.push(domain);
        }
        for node in 0..internal_node_count(depth) {
            let parent = sets[node];
            let (left, right) = match cuts.get(node).copied().flatten() {
                Some(c) => (Interval::new(parent.lo, c), Interval::new(c, parent.hi)),
                None => (parent, Interval::new(parent.hi, parent.hi)),
            };
            sets.push(left);
            sets.push(right);
        }
        PartitionTree {
            depth,
            domain,
            cuts,
            sets,
        }
    }

    /// The single-set tree: every internal node carries a null cut.
    pub fn trivial(domain: Interval, depth: usize) -> Self {
        Self::unchecked(domain, depth, vec![None; internal_node_count(depth)])
    }

    /// Assembles the balanced tree from `2^(L-1) - 1` cut points in any order.
    ///
    /// The median becomes the root cut and each half recurses, so the in-order
    /// traversal of the result is the sorted cut list.
    pub fn from_sorted_cuts(domain: Interval, depth: usize, cuts: &[f64]) -> Result<Self> {
        let m = internal_node_count(depth);
        if cuts.len() != m {
            return Err(Violation::CutCount {
                expected: m,
                found: cuts.len(),
            }
            .into());
        }
        let mut sorted = cuts.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut heap = vec![None; m];
        fn fill(heap: &mut [Option<f64>], node: usize, sorted: &[f64]) {
            if node >= heap.len() || sorted.is_empty() {
                return;
            }
            let mid = sorted.len() / 2;
            heap[node] = Some(sorted[mid]);
            fill(heap, 2 * node + 1, &sorted[..mid]);
            fill(heap, 2 * node + 2, &sorted[mid + 1..]);
        }
        fill(&mut heap, 0, &sorted);
        Self::new(domain, depth, heap)
    }

    /// Checks every structural invariant and reports the first violation.
    pub fn validate(&self) -> std::result::Result<(), Violation> {
        let Interval { lo, hi } = self.domain;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Violation::EmptyDomain { lo, hi });
        }
        if self.depth == 0 {
            return Err(Violation::ZeroDepth);
        }
        let expected = internal_node_count(self.depth);
        if self.cuts.len() != expected {
            return Err(Violation::CutCount {
                expected,
                found: self.cuts.len(),
            });
        }
        for (node, cut) in self.cuts.iter().enumerate() {
            if let Some(c) = *cut {
                let parent = self.sets[node];
                if !(c > parent.lo && c < parent.hi) {
                    let level = node_level(node) + 1;
                    return Err(Violation::CutOutsideParent {
                        level,
                        index: node - level_offset(level - 1),
                        value: c,
                        lo: parent.lo,
                        hi: parent.hi,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn domain(&self) -> Interval {
        self.domain
    }

    /// Heap-ordered cuts of the internal nodes.
    pub fn cuts(&self) -> &[Option<f64>] {
        &self.cuts
    }

    /// Interval of a heap-ordered set.
    pub fn set(&self, node: usize) -> Interval {
        self.sets[node]
    }

    /// Interval of set `index` on `level`.
    pub fn level_set(&self, level: usize, index: usize) -> Interval {
        self.sets[level_offset(level) + index]
    }

    /// All `2^level` sets on `level`, left to right.
    pub fn level_sets(&self, level: usize) -> &[Interval] {
        let start = level_offset(level);
        &self.sets[start..start + (1usize << level)]
    }

    /// Non-null cut points, heap order.
    pub fn cut_points(&self) -> Vec<f64> {
        self.cuts.iter().flatten().copied().collect()
    }

    /// `(level, value)` for every internal node, level-major and left to right.
    /// The level is that of the two sets the cut creates (1 for the root cut).
    pub fn level_cuts(&self) -> Vec<(usize, Option<f64>)> {
        self.cuts
            .iter()
            .enumerate()
            .map(|(node, c)| (node_level(node) + 1, *c))
            .collect()
    }

    /// Non-null cuts that create level-`level` sets.
    pub fn cuts_at_level(&self, level: usize) -> Vec<f64> {
        if level == 0 || level >= self.depth {
            return Vec::new();
        }
        let start = level_offset(level - 1);
        self.cuts[start..start + (1usize << (level - 1))]
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    fn check_location(&self, x: f64) -> Result<()> {
        if x >= self.domain.lo && x <= self.domain.hi {
            Ok(())
        } else {
            Err(MgpError::Domain {
                x,
                lo: self.domain.lo,
                hi: self.domain.hi,
            })
        }
    }

    /// 0-based index `r` of the level-`level` set containing `x`.
    pub fn set_index(&self, level: usize, x: f64) -> Result<usize> {
        self.check_location(x)?;
        if level >= self.depth {
            return Err(MgpError::Level {
                level,
                depth: self.depth,
            });
        }
        Ok(self.descend(level, x) - level_offset(level))
    }

    fn descend(&self, level: usize, x: f64) -> usize {
        let mut node = 0;
        for _ in 0..level {
            node = match self.cuts[node] {
                Some(c) if x >= c => 2 * node + 2,
                _ => 2 * node + 1,
            };
        }
        node
    }

    /// Largest level whose sets contain both `x` and `y`.
    pub fn deepest_shared_level(&self, x: f64, y: f64) -> Result<usize> {
        self.check_location(x)?;
        self.check_location(y)?;
        let mut node = 0;
        for level in 0..self.depth - 1 {
            let side = |v: f64| matches!(self.cuts[node], Some(c) if v >= c);
            if side(x) != side(y) {
                return Ok(level);
            }
            node = if side(x) { 2 * node + 2 } else { 2 * node + 1 };
        }
        Ok(self.depth - 1)
    }

    /// Observation index ranges of every set for ascending `locs`, heap order.
    pub fn segments(&self, locs: &[f64]) -> Vec<Range<usize>> {
        let mut segs = Vec::with_capacity(self.sets.len());
        if self.depth == 0 {
            return segs;
        }
        segs.push(0..locs.len());
        for node in 0..internal_node_count(self.depth) {
            let seg = segs[node].clone();
            match self.cuts[node] {
                Some(c) => {
                    let split = seg.start + locs[seg.clone()].partition_point(|&x| x < c);
                    segs.push(seg.start..split);
                    segs.push(split..seg.end);
                }
                None => {
                    segs.push(seg.clone());
                    segs.push(seg.end..seg.end);
                }
            }
        }
        segs
    }
}

#[derive(Serialize, Deserialize)]
struct TreeJson {
    #[serde(rename = "L")]
    depth: usize,
    domain: [f64; 2],
    cuts: Vec<(usize, Option<f64>)>,
}

impl From<PartitionTree> for TreeJson {
    fn from(t: PartitionTree) -> Self {
        TreeJson {
            depth: t.depth,
            domain: [t.domain.lo, t.domain.hi],
            cuts: t.level_cuts(),
        }
    }
}

impl TryFrom<TreeJson> for PartitionTree {
    type Error = Violation;

    fn try_from(j: TreeJson) -> std::result::Result<Self, Violation> {
        if j.depth == 0 {
            return Err(Violation::ZeroDepth);
        }
        let mut per_level: Vec<Vec<Option<f64>>> = vec![Vec::new(); j.depth];
        for (level, value) in j.cuts {
            if level == 0 || level >= j.depth {
                return Err(Violation::CutLevel {
                    level,
                    depth: j.depth,
                });
            }
            per_level[level].push(value);
        }
        let mut cuts = Vec::with_capacity(internal_node_count(j.depth));
        for (level, values) in per_level.into_iter().enumerate().skip(1) {
            let expected = 1usize << (level - 1);
            if values.len() != expected {
                return Err(Violation::LevelCutCount {
                    level,
                    expected,
                    found: values.len(),
                });
            }
            cuts.extend(values);
        }
        let tree = PartitionTree::unchecked(Interval::new(j.domain[0], j.domain[1]), j.depth, cuts);
        tree.validate()?;
        Ok(tree)
    }
}

impl fmt::Display for PartitionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L={} [", self.depth)?;
        for (i, (level, c)) in self.level_cuts().into_iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            match c {
                Some(c) => write!(f, "{level}:{c:.4}")?,
                None => write!(f, "{level}:-")?,
            }
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> Interval {
        Interval::new(0.0, 1.0)
    }

    fn three_level() -> PartitionTree {
        PartitionTree::new(unit(), 3, vec![Some(0.5), Some(0.25), Some(0.75)]).unwrap()
    }

    #[test]
    fn validate_examples() {
        assert!(PartitionTree::new(unit(), 1, vec![]).is_ok());
        assert!(PartitionTree::new(unit(), 2, vec![Some(0.5)]).is_ok());
        let bad = PartitionTree::unchecked(unit(), 3, vec![Some(0.5), Some(0.7), Some(0.75)]);
        let v = bad.validate().unwrap_err();
        assert!(matches!(
            v,
            Violation::CutOutsideParent {
                level: 2,
                index: 0,
                ..
            }
        ));
        assert!(v.to_string().contains("cut outside parent set"));
    }

    #[test]
    fn validate_rejects_wrong_count_and_domain() {
        let t = PartitionTree::unchecked(unit(), 3, vec![Some(0.5)]);
        assert!(matches!(
            t.validate(),
            Err(Violation::CutCount {
                expected: 3,
                found: 1
            })
        ));
        let t = PartitionTree::unchecked(Interval::new(1.0, 1.0), 1, vec![]);
        assert!(matches!(t.validate(), Err(Violation::EmptyDomain { .. })));
    }

    #[test]
    fn cut_below_null_cut_is_invalid() {
        // The right child of a null cut is empty and cannot be cut.
        let t = PartitionTree::unchecked(unit(), 3, vec![None, Some(0.3), Some(0.9)]);
        assert!(matches!(
            t.validate(),
            Err(Violation::CutOutsideParent {
                level: 2,
                index: 1,
                ..
            })
        ));
        assert!(PartitionTree::new(unit(), 3, vec![None, Some(0.3), None]).is_ok());
    }

    #[test]
    fn set_index_examples() {
        let t = PartitionTree::new(unit(), 2, vec![Some(0.5)]).unwrap();
        assert_eq!(t.set_index(0, 0.9).unwrap(), 0);
        assert_eq!(t.set_index(1, 0.25).unwrap(), 0);
        assert_eq!(t.set_index(1, 0.75).unwrap(), 1);
        assert_eq!(t.set_index(1, 0.5).unwrap(), 1);
        // right end of the domain belongs to the rightmost set
        assert_eq!(t.set_index(1, 1.0).unwrap(), 1);
        assert!(matches!(t.set_index(1, 1.5), Err(MgpError::Domain { .. })));
        assert!(matches!(t.set_index(2, 0.5), Err(MgpError::Level { .. })));
    }

    #[test]
    fn deepest_shared_level_examples() {
        let t2 = PartitionTree::new(unit(), 2, vec![Some(0.5)]).unwrap();
        assert_eq!(t2.deepest_shared_level(0.3, 0.3).unwrap(), 1);
        assert_eq!(t2.deepest_shared_level(0.2, 0.8).unwrap(), 0);
        let t3 = three_level();
        assert_eq!(t3.deepest_shared_level(0.1, 0.2).unwrap(), 2);
        assert_eq!(t3.deepest_shared_level(0.1, 0.3).unwrap(), 1);
        assert!(t3.deepest_shared_level(0.1, -0.2).is_err());
    }

    #[test]
    fn null_cut_keeps_parent_in_left_child() {
        let t = PartitionTree::trivial(unit(), 3);
        assert_eq!(t.set_index(2, 0.99).unwrap(), 0);
        assert_eq!(t.level_set(1, 0), unit());
        assert_eq!(t.level_set(1, 1).length(), 0.0);
        assert_eq!(t.deepest_shared_level(0.0, 1.0).unwrap(), 2);
        let segs = t.segments(&[0.0, 0.5, 1.0]);
        assert_eq!(segs[1], 0..3);
        assert_eq!(segs[2], 3..3);
    }

    #[test]
    fn segments_follow_half_open_convention() {
        let t = three_level();
        let locs = [0.0, 0.25, 0.4, 0.5, 0.8, 1.0];
        let segs = t.segments(&locs);
        assert_eq!(segs[1], 0..3);
        assert_eq!(segs[2], 3..6);
        assert_eq!(segs[3], 0..1);
        assert_eq!(segs[4], 1..3);
        assert_eq!(segs[5], 3..4);
        assert_eq!(segs[6], 4..6);
        for (i, &x) in locs.iter().enumerate() {
            let r = t.set_index(2, x).unwrap();
            assert!(segs[3 + r].contains(&i));
        }
    }

    #[test]
    fn json_format() {
        let t = three_level();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(
            s,
            r#"{"L":3,"domain":[0.0,1.0],"cuts":[[1,0.5],[2,0.25],[2,0.75]]}"#
        );
        let back: PartitionTree = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        let bad = r#"{"L":3,"domain":[0.0,1.0],"cuts":[[1,0.5],[2,0.7],[2,0.75]]}"#;
        assert!(serde_json::from_str::<PartitionTree>(bad).is_err());
        let null = r#"{"L":2,"domain":[0.0,1.0],"cuts":[[1,null]]}"#;
        let t: PartitionTree = serde_json::from_str(null).unwrap();
        assert_eq!(t, PartitionTree::trivial(unit(), 2));
    }

    fn arb_tree() -> impl Strategy<Value = PartitionTree> {
        (1usize..=5).prop_flat_map(|depth| {
            let m = internal_node_count(depth);
            proptest::collection::btree_set(1u32..10_000, m).prop_map(move |set| {
                let cuts: Vec<f64> = set.into_iter().map(|v| v as f64 / 10_000.0).collect();
                PartitionTree::from_sorted_cuts(unit(), depth, &cuts).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn levels_nest(t in arb_tree(), x in 0.0f64..=1.0) {
            for level in 1..t.depth() {
                let child = t.set_index(level, x).unwrap();
                let parent = t.set_index(level - 1, x).unwrap();
                prop_assert_eq!(child / 2, parent);
                let s = t.level_set(level, child);
                let p = t.level_set(level - 1, parent);
                prop_assert!(s.lo >= p.lo && s.hi <= p.hi);
            }
        }

        #[test]
        fn levels_tile_domain(t in arb_tree()) {
            for level in 0..t.depth() {
                let sets = t.level_sets(level);
                prop_assert_eq!(sets[0].lo, 0.0);
                prop_assert_eq!(sets[sets.len() - 1].hi, 1.0);
                for w in sets.windows(2) {
                    prop_assert_eq!(w[0].hi, w[1].lo);
                }
            }
        }

        #[test]
        fn shared_level_symmetric(t in arb_tree(), x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
            prop_assert_eq!(t.deepest_shared_level(x, y).unwrap(), t.deepest_shared_level(y, x).unwrap());
            let l = t.deepest_shared_level(x, y).unwrap();
            prop_assert_eq!(t.set_index(l, x).unwrap(), t.set_index(l, y).unwrap());
            if l + 1 < t.depth() {
                prop_assert_ne!(t.set_index(l + 1, x).unwrap(), t.set_index(l + 1, y).unwrap());
            }
        }

        #[test]
        fn cut_list_round_trip(t in arb_tree()) {
            let rebuilt = PartitionTree::from_sorted_cuts(t.domain(), t.depth(), &t.cut_points()).unwrap();
            prop_assert_eq!(&rebuilt, &t);
            let json = serde_json::to_string(&t).unwrap();
            let back: PartitionTree = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
