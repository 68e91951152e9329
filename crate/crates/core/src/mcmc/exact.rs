//! Exhaustive posterior over trees for small instances.
//!
//! A tree reachable by the proposal is characterised by which observation
//! gap each cut falls in. When the likelihood depends on a tree only through
//! that assignment (fixed bandwidth), the posterior mass of an assignment is
//! its likelihood times the prior mass of the gaps its cuts occupy.

use std::ops::Range;

use super::TreePosterior;
use crate::error::{MgpError, Result};
use crate::kernels::BandwidthMode;
use crate::linalg::log_sum_exp;
use crate::partition::{internal_node_count, Interval, PartitionTree};

/// Heap-ordered size of the left block of every cut; `None` for null cuts.
pub type Signature = Vec<Option<usize>>;

pub fn signature(tree: &PartitionTree, locs: &[f64]) -> Signature {
    let segs = tree.segments(locs);
    tree.cuts()
        .iter()
        .enumerate()
        .map(|(v, c)| c.map(|_| segs[2 * v + 1].len()))
        .collect()
}

/// One representative tree per reachable signature, with each cut at the
/// middle of its gap.
pub fn enumerate_trees(locs: &[f64], depth: usize, domain: Interval) -> Result<Vec<PartitionTree>> {
    let m = internal_node_count(depth);
    let mut out = Vec::new();
    let mut segs = vec![0..0; 2 * m + 1];
    segs[0] = 0..locs.len();
    let mut cuts = Vec::with_capacity(m);
    fill(locs, 0, m, &mut segs, &mut cuts, &mut |cuts| {
        out.push(PartitionTree::new(domain, depth, cuts.to_vec()));
    });
    out.into_iter().collect()
}

fn fill(
    locs: &[f64],
    v: usize,
    m: usize,
    segs: &mut Vec<Range<usize>>,
    cuts: &mut Vec<Option<f64>>,
    emit: &mut dyn FnMut(&[Option<f64>]),
) {
    if v == m {
        emit(cuts);
        return;
    }
    let seg = segs[v].clone();
    if seg.len() < 2 {
        segs[2 * v + 1] = seg.clone();
        segs[2 * v + 2] = seg.end..seg.end;
        cuts.push(None);
        fill(locs, v + 1, m, segs, cuts, emit);
        cuts.pop();
        return;
    }
    for k in 1..seg.len() {
        let split = seg.start + k;
        segs[2 * v + 1] = seg.start..split;
        segs[2 * v + 2] = split..seg.end;
        cuts.push(Some(0.5 * (locs[split - 1] + locs[split])));
        fill(locs, v + 1, m, segs, cuts, emit);
        cuts.pop();
    }
}

/// Normalized posterior probabilities of `trees`, each standing for its
/// whole signature class. Requires fixed bandwidth.
pub fn exact_posterior(post: &TreePosterior, trees: &[PartitionTree]) -> Result<Vec<f64>> {
    if post.theta().bandwidth_mode != BandwidthMode::Fixed {
        return Err(MgpError::InvalidInput(
            "exact enumeration needs fixed bandwidth; fractal bandwidth varies within a gap".into(),
        ));
    }
    let locs = post.data().locs();
    let log_mass: Vec<f64> = trees
        .iter()
        .map(|t| {
            let gaps: f64 = t
                .cut_points()
                .iter()
                .map(|&z| {
                    let k = locs.partition_point(|&x| x < z);
                    post.prior().mass(locs[k - 1], locs[k]).ln()
                })
                .sum();
            Ok(post.log_likelihood(t)? + gaps)
        })
        .collect::<Result<_>>()?;
    let z = log_sum_exp(&log_mass);
    if !z.is_finite() {
        return Err(MgpError::DegeneratePosterior);
    }
    Ok(log_mass.iter().map(|l| (l - z).exp()).collect())
}
