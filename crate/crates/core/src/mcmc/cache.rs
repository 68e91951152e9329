use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::Result;
use crate::kernels::{effective_bandwidth, sq_exp, Hyperparams};
use crate::partition::{internal_node_count, node_level, PartitionTree};

/// Per-level covariance blocks `K_1, ..., K_{L-1}` and the trial covariance
/// `Sigma` built from them.
///
/// Re-proposing the subtree under a node only touches the rows and columns
/// of that node's observations, so a move rebuilds those blocks and leaves
/// the rest of every level untouched.
#[derive(Debug, Clone)]
pub(crate) struct LevelCache {
    levels: Vec<DMatrix<f64>>,
    sigma: DMatrix<f64>,
}

/// Freshly computed blocks for the levels below `node`, local to `region`.
pub(crate) struct RegionUpdate {
    node: usize,
    region: Range<usize>,
    blocks: Vec<DMatrix<f64>>,
    sigma: DMatrix<f64>,
}

impl RegionUpdate {
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
}

impl LevelCache {
    pub fn build(
        locs: &[f64],
        tree: &PartitionTree,
        segs: &[Range<usize>],
        theta: &Hyperparams,
    ) -> Result<Self> {
        let n = locs.len();
        let empty = LevelCache {
            levels: vec![DMatrix::zeros(n, n); tree.depth().saturating_sub(1)],
            sigma: DMatrix::zeros(n, n),
        };
        let update = empty.propose(locs, tree, segs, theta, 0)?;
        let mut cache = empty;
        cache.commit(update);
        Ok(cache)
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Blocks and trial covariance after replacing the subtree under `node`
    /// by the one in `tree`, whose observation ranges are `segs`.
    pub fn propose(
        &self,
        locs: &[f64],
        tree: &PartitionTree,
        segs: &[Range<usize>],
        theta: &Hyperparams,
        node: usize,
    ) -> Result<RegionUpdate> {
        let depth = tree.depth();
        let top = if internal_node_count(depth) == 0 {
            0
        } else {
            node_level(node)
        };
        let region = segs[node].clone();
        let r = region.len();
        let mut blocks = Vec::with_capacity(depth.saturating_sub(top + 1));
        for level in top + 1..depth {
            let mut blk = DMatrix::zeros(r, r);
            let d = theta.d[level];
            if d != 0.0 {
                let width = 1usize << (level - top);
                let first = (node + 1) * width - 1;
                for v in first..first + width {
                    let seg = segs[v].clone();
                    if seg.is_empty() {
                        continue;
                    }
                    let k = effective_bandwidth(theta.kappa, tree.set(v), theta.bandwidth_mode)?;
                    for j in seg.clone() {
                        let lj = j - region.start;
                        blk[(lj, lj)] = d;
                        for i in (j + 1)..seg.end {
                            let v = sq_exp(locs[i], locs[j], d, k);
                            blk[(i - region.start, lj)] = v;
                            blk[(lj, i - region.start)] = v;
                        }
                    }
                }
            }
            blocks.push(blk);
        }
        let mut sigma = self.sigma.clone();
        for lj in 0..r {
            for li in 0..r {
                let (i, j) = (region.start + li, region.start + lj);
                let mut v = if i == j { theta.sigma2 } else { 0.0 };
                for level in 1..=top {
                    v += self.levels[level - 1][(i, j)];
                }
                for blk in &blocks {
                    v += blk[(li, lj)];
                }
                sigma[(i, j)] = v;
            }
        }
        Ok(RegionUpdate {
            node,
            region,
            blocks,
            sigma,
        })
    }

    pub fn commit(&mut self, update: RegionUpdate) {
        let RegionUpdate {
            node,
            region,
            blocks,
            sigma,
        } = update;
        let top = self.levels.len() + 1 - blocks.len();
        debug_assert!(self.levels.is_empty() || node_level(node) + 1 == top);
        for (blk, level) in blocks.into_iter().zip(top..) {
            self.levels[level - 1]
                .view_mut((region.start, region.start), (region.len(), region.len()))
                .copy_from(&blk);
        }
        self.sigma = sigma;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{self, BandwidthMode};
    use crate::partition::Interval;

    #[test]
    fn region_update_matches_fresh_build() {
        let locs: Vec<f64> = (0..30).map(|i| (i as f64 + 0.5) / 30.0).collect();
        let dom = Interval::new(0.0, 1.0);
        let theta =
            Hyperparams::new(vec![2.0, 1.0, 0.6, 0.3], 8.0, 0.2, BandwidthMode::Fractal).unwrap();
        let a = PartitionTree::from_sorted_cuts(dom, 4, &[0.1, 0.2, 0.35, 0.5, 0.62, 0.8, 0.9])
            .unwrap();
        let mut cuts = a.cuts().to_vec();
        // redraw the subtree under node 2 (right half)
        cuts[2] = Some(0.71);
        cuts[5] = Some(0.6);
        cuts[6] = None;
        let b = PartitionTree::new(dom, 4, cuts).unwrap();
        let sa = a.segments(&locs);
        let sb = b.segments(&locs);
        let mut cache = LevelCache::build(&locs, &a, &sa, &theta).unwrap();
        assert!(
            (cache.sigma() - kernels::trial_cov(&locs, &a, &theta).unwrap())
                .abs()
                .max()
                < 1e-12
        );
        let up = cache.propose(&locs, &b, &sb, &theta, 2).unwrap();
        let fresh = kernels::trial_cov(&locs, &b, &theta).unwrap();
        assert!((up.sigma() - &fresh).abs().max() < 1e-12);
        cache.commit(up);
        for level in 1..4 {
            let k = kernels::level_cov(&locs, &b, &theta, level).unwrap();
            assert!((&cache.levels[level - 1] - k).abs().max() < 1e-12);
        }
        // back to the first tree through the root
        let up = cache.propose(&locs, &a, &sa, &theta, 0).unwrap();
        cache.commit(up);
        assert!(
            (cache.sigma() - kernels::trial_cov(&locs, &a, &theta).unwrap())
                .abs()
                .max()
                < 1e-12
        );
    }

    #[test]
    fn single_level_tree_is_nugget_only() {
        let locs = [0.1, 0.4, 0.8];
        let tree = PartitionTree::trivial(Interval::new(0.0, 1.0), 1);
        let theta = Hyperparams::new(vec![1.0], 3.0, 0.5, BandwidthMode::Fractal).unwrap();
        let cache = LevelCache::build(&locs, &tree, &tree.segments(&locs), &theta).unwrap();
        assert_eq!(cache.sigma(), &DMatrix::from_diagonal_element(3, 3, 0.5));
    }
}
