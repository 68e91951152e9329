//! Normalized-cut proposals for partition trees.
//!
//! Every cut splits the observations of its parent set into a contiguous
//! left block `A` and right block `B`. Splits are weighted by the inverse
//! normalized cut `cut(A,B) (1/assoc(A,V) + 1/assoc(B,V))` over the cost
//! matrix restricted to the parent segment `V`; the continuous cut point is
//! then placed uniformly in the gap between the two neighbouring locations.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::DMatrix;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{MgpError, Result};
use crate::likelihood::TrialSet;
use crate::linalg;
use crate::partition::{internal_node_count, Interval, PartitionTree};

/// Normalized cuts below this are floored before inversion.
pub const NCUT_FLOOR: f64 = 1e-12;

/// Symmetric nonnegative affinity between observed locations.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    w: DMatrix<f64>,
}

impl CostMatrix {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if !w.is_square() || w.nrows() == 0 {
            return Err(MgpError::InvalidInput(
                "cost matrix must be square and nonempty".into(),
            ));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MgpError::InvalidInput(
                "cost matrix entries must be finite and nonnegative".into(),
            ));
        }
        if w != w.transpose() {
            return Err(MgpError::InvalidInput(
                "cost matrix must be symmetric".into(),
            ));
        }
        Ok(CostMatrix { w })
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.w[(u, v)]
    }
}

/// Absolute Pearson correlation across trials for every pair of locations.
pub fn empirical_cost_matrix(data: &TrialSet) -> Result<CostMatrix> {
    let j = data.num_trials();
    if j < 2 {
        return Err(MgpError::InvalidInput(
            "empirical correlation needs at least two trials".into(),
        ));
    }
    let y = data.matrix();
    let n = y.nrows();
    let mut z = DMatrix::zeros(n, j);
    for u in 0..n {
        let row = y.row(u);
        let mean = row.sum() / j as f64;
        let ss: f64 = row.iter().map(|v| (v - mean).powi(2)).sum();
        if !(ss > 0.0) {
            return Err(MgpError::DegenerateColumn { index: u });
        }
        let s = ss.sqrt();
        for t in 0..j {
            z[(u, t)] = (row[t] - mean) / s;
        }
    }
    let mut w = &z * z.transpose();
    for u in 0..n {
        w[(u, u)] = 1.0;
        for v in 0..u {
            let c = w[(u, v)].abs().min(1.0);
            w[(u, v)] = c;
            w[(v, u)] = c;
        }
    }
    CostMatrix::new(w)
}

/// Normalized cut of the segment `seg` split after its first `k` points.
pub fn ncut_value(w: &CostMatrix, seg: Range<usize>, k: usize) -> Result<f64> {
    if seg.len() < 2 || seg.end > w.n() {
        return Err(MgpError::UncuttableSegment { len: seg.len() });
    }
    if k == 0 || k >= seg.len() {
        return Err(MgpError::InvalidInput(format!(
            "split {k} outside 1..{}",
            seg.len() - 1
        )));
    }
    Ok(split_ncuts(w, seg)[k - 1])
}

/// Normalized cuts of all `len - 1` contiguous splits of `seg`, in O(len^2).
pub fn split_ncuts(w: &CostMatrix, seg: Range<usize>) -> Vec<f64> {
    let m = seg.len();
    if m < 2 {
        return Vec::new();
    }
    let s = seg.start;
    // row sums within the segment, and the part to the left of the diagonal
    let mut row = vec![0.0; m];
    let mut left = vec![0.0; m];
    for a in 0..m {
        for b in 0..m {
            let v = w.get(s + a, s + b);
            row[a] += v;
            if b < a {
                left[a] += v;
            }
        }
    }
    let total: f64 = row.iter().sum();
    let mut out = Vec::with_capacity(m - 1);
    let mut cut = 0.0;
    let mut assoc_a = 0.0;
    for a in 0..m - 1 {
        // move point a from B into A
        let diag = w.get(s + a, s + a);
        let right = row[a] - left[a] - diag;
        cut += right - left[a];
        assoc_a += row[a];
        let assoc_b = total - assoc_a;
        let cut = cut.max(0.0);
        out.push(if assoc_a <= 0.0 || assoc_b <= 0.0 {
            f64::INFINITY
        } else {
            cut * (1.0 / assoc_a + 1.0 / assoc_b)
        });
    }
    out
}

/// Normalized log-probabilities over the splits of `seg`; `-inf` for
/// splits with infinite normalized cut.
pub fn split_log_probs(w: &CostMatrix, seg: Range<usize>) -> Result<Vec<f64>> {
    if seg.len() < 2 {
        return Err(MgpError::UncuttableSegment { len: seg.len() });
    }
    let logits: Vec<f64> = split_ncuts(w, seg)
        .into_iter()
        .map(|c| {
            if c.is_finite() {
                -c.max(NCUT_FLOOR).ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let z = linalg::log_sum_exp(&logits);
    if !z.is_finite() {
        return Err(MgpError::NoFiniteCut);
    }
    Ok(logits.into_iter().map(|l| l - z).collect())
}

/// Draws a split size `k` of `seg` with probability proportional to the
/// inverse normalized cut; returns `k` and its log-probability.
pub fn cut_proposal<R: Rng + ?Sized>(
    w: &CostMatrix,
    seg: Range<usize>,
    rng: &mut R,
) -> Result<(usize, f64)> {
    let dist = SplitDist::new(w, seg)?;
    Ok(dist.sample(rng))
}

#[derive(Debug, Clone)]
struct SplitDist {
    log_p: Vec<f64>,
    index: Option<WeightedIndex<f64>>,
}

impl SplitDist {
    fn new(w: &CostMatrix, seg: Range<usize>) -> Result<Self> {
        let log_p = split_log_probs(w, seg)?;
        let index = if log_p.len() > 1 {
            let weights: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
            Some(WeightedIndex::new(&weights).map_err(|_| MgpError::NoFiniteCut)?)
        } else {
            None
        };
        Ok(SplitDist { log_p, index })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        let i = self.index.as_ref().map_or(0, |d| d.sample(rng));
        (i + 1, self.log_p[i])
    }
}

/// Proposal over partition trees for fixed locations and cost matrix.
///
/// Split distributions are memoized per observation segment; a sampler
/// revisits the same segments many times.
#[derive(Debug, Clone)]
pub struct TreeProposal {
    w: CostMatrix,
    locs: Vec<f64>,
    domain: Interval,
    depth: usize,
    cache: HashMap<(usize, usize), SplitDist>,
}

impl TreeProposal {
    pub fn new(w: CostMatrix, locs: &[f64], domain: Interval, depth: usize) -> Result<Self> {
        if w.n() != locs.len() {
            return Err(MgpError::InvalidInput(format!(
                "cost matrix is {0}x{0} for {1} locations",
                w.n(),
                locs.len()
            )));
        }
        if locs.windows(2).any(|p| !(p[0] < p[1])) {
            return Err(MgpError::InvalidInput(
                "locations must be strictly ascending".into(),
            ));
        }
        if depth == 0 {
            return Err(crate::partition::Violation::ZeroDepth.into());
        }
        if let Some(&x) = locs.iter().find(|&&x| !(x >= domain.lo && x <= domain.hi)) {
            return Err(MgpError::Domain {
                x,
                lo: domain.lo,
                hi: domain.hi,
            });
        }
        Ok(TreeProposal {
            w,
            locs: locs.to_vec(),
            domain,
            depth,
            cache: HashMap::new(),
        })
    }

    pub fn cost(&self) -> &CostMatrix {
        &self.w
    }

    pub fn locs(&self) -> &[f64] {
        &self.locs
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn domain(&self) -> Interval {
        self.domain
    }

    fn dist(&mut self, seg: &Range<usize>) -> Result<&SplitDist> {
        let key = (seg.start, seg.end);
        if !self.cache.contains_key(&key) {
            let d = SplitDist::new(&self.w, seg.clone())?;
            self.cache.insert(key, d);
        }
        Ok(&self.cache[&key])
    }

    /// Draws the cut of one segment: `None` if it has fewer than two
    /// observations. Returns the cut and its log-density including the
    /// uniform placement within the gap.
    fn draw_cut<R: Rng + ?Sized>(
        &mut self,
        seg: &Range<usize>,
        rng: &mut R,
    ) -> Result<(Option<f64>, f64)> {
        if seg.len() < 2 {
            return Ok((None, 0.0));
        }
        let (k, lp) = self.dist(seg)?.sample(rng);
        let (a, b) = (self.locs[seg.start + k - 1], self.locs[seg.start + k]);
        let z = loop {
            let z = rng.gen_range(a..b);
            if z > a {
                break z;
            }
        };
        Ok((Some(z), lp - (b - a).ln()))
    }

    /// Log-density of `cut` as the cut of segment `seg`.
    fn cut_log_density(&mut self, seg: &Range<usize>, cut: Option<f64>) -> Result<f64> {
        match (seg.len() < 2, cut) {
            (true, None) => Ok(0.0),
            (true, Some(z)) => Err(MgpError::ZeroDensity(format!(
                "cut {z} in a segment with fewer than two observations"
            ))),
            (false, None) => Err(MgpError::ZeroDensity(
                "null cut in a cuttable segment".into(),
            )),
            (false, Some(z)) => {
                let k = self.locs[seg.clone()].partition_point(|&x| x < z);
                if k == 0 || k == seg.len() || self.locs[seg.start + k] == z {
                    return Err(MgpError::ZeroDensity(format!(
                        "cut {z} is not inside a gap of its segment"
                    )));
                }
                let (a, b) = (self.locs[seg.start + k - 1], self.locs[seg.start + k]);
                let lp = self.dist(seg)?.log_p[k - 1];
                if lp == f64::NEG_INFINITY {
                    return Err(MgpError::ZeroDensity(format!(
                        "cut {z} has infinite normalized cut"
                    )));
                }
                Ok(lp - (b - a).ln())
            }
        }
    }

    /// Draws a full tree top-down, left to right; returns it with `log q`.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(PartitionTree, f64)> {
        let base = PartitionTree::trivial(self.domain, self.depth);
        self.resample_subtree(&base, 0, rng)
    }

    /// Redraws the cut of `node` and of every internal node below it.
    /// Returns the new tree and the log-density of the redrawn cuts.
    pub fn resample_subtree<R: Rng + ?Sized>(
        &mut self,
        tree: &PartitionTree,
        node: usize,
        rng: &mut R,
    ) -> Result<(PartitionTree, f64)> {
        self.check_tree(tree)?;
        let m = internal_node_count(self.depth);
        if node >= m && node != 0 {
            return Err(MgpError::InvalidInput(format!(
                "node {node} is not internal"
            )));
        }
        let mut cuts = tree.cuts().to_vec();
        let mut segs = tree.segments(&self.locs);
        let mut log_q = 0.0;
        for level_nodes in subtree_levels(node, m) {
            for v in level_nodes {
                let seg = segs[v].clone();
                let (cut, lq) = self.draw_cut(&seg, rng)?;
                cuts[v] = cut;
                log_q += lq;
                let (l, r) = split_segment(&self.locs, &seg, cut);
                segs[2 * v + 1] = l;
                segs[2 * v + 2] = r;
            }
        }
        Ok((PartitionTree::new(self.domain, self.depth, cuts)?, log_q))
    }

    /// `log q` of a whole tree.
    pub fn log_density(&mut self, tree: &PartitionTree) -> Result<f64> {
        self.subtree_log_density(tree, 0)
    }

    /// Log-density of the cuts at `node` and below, given the cuts above.
    pub fn subtree_log_density(&mut self, tree: &PartitionTree, node: usize) -> Result<f64> {
        self.check_tree(tree)?;
        let m = internal_node_count(self.depth);
        if node >= m && node != 0 {
            return Err(MgpError::InvalidInput(format!(
                "node {node} is not internal"
            )));
        }
        let segs = tree.segments(&self.locs);
        let mut total = 0.0;
        for level_nodes in subtree_levels(node, m) {
            for v in level_nodes {
                total += self.cut_log_density(&segs[v], tree.cuts()[v])?;
            }
        }
        Ok(total)
    }

    fn check_tree(&self, tree: &PartitionTree) -> Result<()> {
        if tree.depth() != self.depth || tree.domain() != self.domain {
            return Err(MgpError::InvalidInput(
                "tree does not match the proposal's depth and domain".into(),
            ));
        }
        Ok(())
    }
}

/// Internal nodes of the subtree rooted at `node`, grouped by level.
pub fn subtree_levels(node: usize, internal: usize) -> impl Iterator<Item = Range<usize>> {
    (0..).map_while(move |t: u32| {
        let width = 1usize << t;
        let first = (node + 1) * width - 1;
        (first < internal).then(|| first..(first + width).min(internal))
    })
}

fn split_segment(
    locs: &[f64],
    seg: &Range<usize>,
    cut: Option<f64>,
) -> (Range<usize>, Range<usize>) {
    match cut {
        Some(c) => {
            let k = seg.start + locs[seg.clone()].partition_point(|&x| x < c);
            (seg.start..k, k..seg.end)
        }
        None => (seg.clone(), seg.end..seg.end),
    }
}

/// Samples a tree from the normalized-cut proposal; returns it with `log q`.
pub fn sample_tree_proposal<R: Rng + ?Sized>(
    w: &CostMatrix,
    depth: usize,
    locs: &[f64],
    domain: Interval,
    rng: &mut R,
) -> Result<(PartitionTree, f64)> {
    TreeProposal::new(w.clone(), locs, domain, depth)?.sample(rng)
}

/// `log q` of `tree` under the normalized-cut proposal.
pub fn proposal_log_density(tree: &PartitionTree, w: &CostMatrix, locs: &[f64]) -> Result<f64> {
    TreeProposal::new(w.clone(), locs, tree.domain(), tree.depth())?.log_density(tree)
}

/// Deterministic segmentation: each node takes its minimum normalized cut
/// (leftmost on ties) with the cut point at the middle of the gap.
pub fn greedy_ncut_tree(
    w: &CostMatrix,
    depth: usize,
    locs: &[f64],
    domain: Interval,
) -> Result<PartitionTree> {
    let prop = TreeProposal::new(w.clone(), locs, domain, depth)?;
    let m = internal_node_count(depth);
    let mut cuts = vec![None; m];
    let mut segs = PartitionTree::trivial(domain, depth).segments(locs);
    for v in 0..m {
        let seg = segs[v].clone();
        let cut = if seg.len() < 2 {
            None
        } else {
            let nc = split_ncuts(&prop.w, seg.clone());
            let best = nc.iter().copied().fold(f64::INFINITY, f64::min);
            if !best.is_finite() {
                return Err(MgpError::NoFiniteCut);
            }
            let tol = NCUT_FLOOR.max(best.abs() * 1e-12);
            let k = nc
                .iter()
                .position(|&c| c <= best + tol)
                .expect("minimum exists")
                + 1;
            Some(0.5 * (locs[seg.start + k - 1] + locs[seg.start + k]))
        };
        cuts[v] = cut;
        let (l, r) = split_segment(locs, &seg, cut);
        segs[2 * v + 1] = l;
        segs[2 * v + 2] = r;
    }
    PartitionTree::new(domain, depth, cuts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ones(n: usize) -> CostMatrix {
        CostMatrix::new(DMatrix::from_element(n, n, 1.0)).unwrap()
    }

    fn two_blocks(n: usize, k: usize, inner: f64, cross: f64) -> CostMatrix {
        CostMatrix::new(DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else if (i < k) == (j < k) {
                inner
            } else {
                cross
            }
        }))
        .unwrap()
    }

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
    }

    fn random_cost(rng: &mut ChaCha8Rng, n: usize) -> CostMatrix {
        let mut w = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.0..1.0));
        w = (&w + w.transpose()) * 0.5;
        w.fill_diagonal(1.0);
        CostMatrix::new(w).unwrap()
    }

    /// Brute-force normalized cut straight from the definition.
    fn ncut_oracle(w: &CostMatrix, seg: Range<usize>, k: usize) -> f64 {
        let a: Vec<usize> = (seg.start..seg.start + k).collect();
        let b: Vec<usize> = (seg.start + k..seg.end).collect();
        let sum = |x: &[usize], y: &[usize]| {
            x.iter()
                .flat_map(|&u| y.iter().map(move |&v| (u, v)))
                .map(|(u, v)| w.get(u, v))
                .sum::<f64>()
        };
        let v: Vec<usize> = seg.collect();
        let cut = sum(&a, &b);
        cut / sum(&a, &v) + cut / sum(&b, &v)
    }

    #[test]
    fn ncut_examples() {
        let w = two_blocks(6, 3, 0.7, 0.0);
        assert_eq!(ncut_value(&w, 0..6, 3).unwrap(), 0.0);
        assert!((ncut_value(&ones(4), 0..4, 2).unwrap() - 1.0).abs() < 1e-15);
        assert!(ncut_value(&ones(4), 0..1, 1).is_err());
        assert!(ncut_value(&ones(4), 0..4, 4).is_err());
    }

    #[test]
    fn ncut_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = rng.gen_range(2..12);
            let w = random_cost(&mut rng, n);
            let s = rng.gen_range(0..n - 1);
            let e = rng.gen_range(s + 2..=n);
            let fast = split_ncuts(&w, s..e);
            for k in 1..e - s {
                assert!((fast[k - 1] - ncut_oracle(&w, s..e, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ncut_symmetric_in_labels() {
        // reversing the segment swaps A and B
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_cost(&mut rng, 7);
        let rev = CostMatrix::new(DMatrix::from_fn(7, 7, |i, j| w.get(6 - i, 6 - j))).unwrap();
        for k in 1..7 {
            assert!(
                (ncut_value(&w, 0..7, k).unwrap() - ncut_value(&rev, 0..7, 7 - k).unwrap()).abs()
                    < 1e-12
            );
        }
    }

    #[test]
    fn zero_association_is_excluded() {
        let mut m = DMatrix::from_element(3, 3, 1.0);
        m.row_mut(0).fill(0.0);
        m.column_mut(0).fill(0.0);
        let w = CostMatrix::new(m).unwrap();
        let nc = split_ncuts(&w, 0..3);
        assert_eq!(nc[0], f64::INFINITY);
        let lp = split_log_probs(&w, 0..3).unwrap();
        assert_eq!(lp[0], f64::NEG_INFINITY);
        assert!((lp[1].exp() - 1.0).abs() < 1e-15);
        let zero = CostMatrix::new(DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            split_log_probs(&zero, 0..2),
            Err(MgpError::NoFiniteCut)
        ));
    }

    #[test]
    fn cut_proposal_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (k, lp) = cut_proposal(&ones(5), 2..4, &mut rng).unwrap();
        assert_eq!((k, lp), (1, 0.0));
        assert!(matches!(
            cut_proposal(&ones(5), 2..3, &mut rng),
            Err(MgpError::UncuttableSegment { len: 1 })
        ));
        // two splits of a 3-point uniform segment are mirror images
        let lp = split_log_probs(&ones(3), 0..3).unwrap();
        assert!((lp[0].exp() - 0.5).abs() < 1e-15 && (lp[1].exp() - 0.5).abs() < 1e-15);
        // a zero cross-block boundary dominates after flooring
        let w = two_blocks(6, 3, 0.5, 0.0);
        let lp = split_log_probs(&w, 0..6).unwrap();
        let others: f64 = split_ncuts(&w, 0..6)
            .iter()
            .filter(|c| **c > 0.0)
            .map(|c| 1.0 / c)
            .sum();
        let expect = (1.0 / NCUT_FLOOR) / (1.0 / NCUT_FLOOR + others);
        assert!((lp[2].exp() - expect).abs() < 1e-12);
        assert!(lp[2].exp() > 0.99);
    }

    #[test]
    fn cut_proposal_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_cost(&mut rng, 6);
        let p: Vec<f64> = split_log_probs(&w, 0..6)
            .unwrap()
            .iter()
            .map(|l| l.exp())
            .collect();
        let draws = 40_000;
        let mut counts = vec![0usize; 5];
        for _ in 0..draws {
            let (k, lp) = cut_proposal(&w, 0..6, &mut rng).unwrap();
            assert!((lp.exp() - p[k - 1]).abs() < 1e-15);
            counts[k - 1] += 1;
        }
        for k in 0..5 {
            let f = counts[k] as f64 / draws as f64;
            let se = (p[k] * (1.0 - p[k]) / draws as f64).sqrt();
            assert!(
                (f - p[k]).abs() < 4.0 * se + 1e-9,
                "split {k}: {f} vs {}",
                p[k]
            );
        }
    }

    #[test]
    fn empirical_cost_examples() {
        let locs = vec![0.1, 0.5, 0.9];
        let same = TrialSet::new(locs.clone(), vec![vec![1.0, 2.0, 3.0]; 2]).unwrap();
        assert!(matches!(
            empirical_cost_matrix(&same),
            Err(MgpError::DegenerateColumn { index: 0 })
        ));
        let anti = TrialSet::new(
            locs.clone(),
            vec![
                vec![1.0, -1.0, 0.3],
                vec![2.0, -2.0, 0.1],
                vec![-0.5, 0.5, 0.2],
            ],
        )
        .unwrap();
        let w = empirical_cost_matrix(&anti).unwrap();
        assert!((w.get(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(w.get(2, 2), 1.0);
        assert!(w.matrix().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn empirical_cost_recovers_block_correlation() {
        // 4 locations, blocks {0,1} and {2,3}
        let block = |rho_in: f64, rho_out: f64| {
            DMatrix::from_fn(4, 4, |i, j| {
                if i == j {
                    1.0
                } else if (i < 2) == (j < 2) {
                    rho_in
                } else {
                    rho_out
                }
            })
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut estimate = |truth: &DMatrix<f64>, j: usize| {
            let l = truth.clone().cholesky().unwrap().l();
            let trials: Vec<Vec<f64>> = (0..j)
                .map(|_| {
                    let z = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
                    (&l * z).iter().copied().collect()
                })
                .collect();
            let w =
                empirical_cost_matrix(&TrialSet::new(vec![0.0, 0.3, 0.6, 0.9], trials).unwrap())
                    .unwrap();
            (w.matrix() - truth.abs()).abs().max()
        };
        // sampling sd at J=50 is below 0.03 for these correlations
        assert!(estimate(&block(0.98, -0.9), 50) < 0.1);
        assert!(estimate(&block(0.9, 0.0), 20_000) < 0.03);
    }

    /// Every tree the proposal can produce for `locs` and `depth`, as lists of
    /// heap-ordered split sizes; `None` for uncuttable segments.
    fn enumerate_splits(n: usize, depth: usize) -> Vec<Vec<Option<usize>>> {
        let m = internal_node_count(depth);
        let mut out = Vec::new();
        fn rec(
            v: usize,
            m: usize,
            segs: &mut Vec<Range<usize>>,
            acc: &mut Vec<Option<usize>>,
            out: &mut Vec<Vec<Option<usize>>>,
        ) {
            if v == m {
                out.push(acc.clone());
                return;
            }
            let seg = segs[v].clone();
            let opts: Vec<Option<usize>> = if seg.len() < 2 {
                vec![None]
            } else {
                (1..seg.len()).map(Some).collect()
            };
            for k in opts {
                let (l, r) = match k {
                    Some(k) => (seg.start..seg.start + k, seg.start + k..seg.end),
                    None => (seg.clone(), seg.end..seg.end),
                };
                segs[2 * v + 1] = l;
                segs[2 * v + 2] = r;
                acc.push(k);
                rec(v + 1, m, segs, acc, out);
                acc.pop();
            }
        }
        let mut segs = vec![0..0; 2 * m + 1];
        segs[0] = 0..n;
        rec(0, m, &mut segs, &mut Vec::new(), &mut out);
        out
    }

    /// Product of per-node split probabilities straight from the oracle ncut.
    fn split_probability(w: &CostMatrix, n: usize, splits: &[Option<usize>]) -> f64 {
        let mut segs = vec![0..0; 2 * splits.len() + 1];
        segs[0] = 0..n;
        let mut p = 1.0;
        for (v, k) in splits.iter().enumerate() {
            let seg = segs[v].clone();
            if let Some(k) = *k {
                let inv: Vec<f64> = (1..seg.len())
                    .map(|j| 1.0 / ncut_oracle(w, seg.clone(), j).max(NCUT_FLOOR))
                    .collect();
                p *= inv[k - 1] / inv.iter().sum::<f64>();
                segs[2 * v + 1] = seg.start..seg.start + k;
                segs[2 * v + 2] = seg.start + k..seg.end;
            } else {
                segs[2 * v + 1] = seg.clone();
                segs[2 * v + 2] = seg.end..seg.end;
            }
        }
        p
    }

    fn splits_of(tree: &PartitionTree, locs: &[f64]) -> Vec<Option<usize>> {
        let segs = tree.segments(locs);
        tree.cuts()
            .iter()
            .enumerate()
            .map(|(v, c)| c.map(|_| segs[2 * v + 1].len()))
            .collect()
    }

    fn gap_log_width(tree: &PartitionTree, locs: &[f64]) -> f64 {
        tree.cut_points()
            .iter()
            .map(|&z| {
                let k = locs.partition_point(|&x| x < z);
                -(locs[k] - locs[k - 1]).ln()
            })
            .sum()
    }

    #[test]
    fn trivial_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dom = Interval::new(0.0, 1.0);
        let (t, lq) = sample_tree_proposal(&ones(5), 1, &grid(5), dom, &mut rng).unwrap();
        assert_eq!((t.cuts().len(), lq), (0, 0.0));
        let (t, lq) = sample_tree_proposal(&ones(2), 2, &[0.2, 0.6], dom, &mut rng).unwrap();
        let z = t.cuts()[0].unwrap();
        assert!(z > 0.2 && z < 0.6);
        // one forced split; only the placement density remains
        assert!((lq + (0.4f64).ln()).abs() < 1e-12);
        assert_eq!(proposal_log_density(&t, &ones(2), &[0.2, 0.6]).unwrap(), lq);
    }

    #[test]
    fn tree_frequencies_match_product_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 8;
        let w = random_cost(&mut rng, n);
        let locs = grid(n);
        let trees = enumerate_splits(n, 3);
        let exact: HashMap<Vec<Option<usize>>, f64> = trees
            .iter()
            .map(|t| (t.clone(), split_probability(&w, n, t)))
            .collect();
        assert!((exact.values().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut prop = TreeProposal::new(w.clone(), &locs, Interval::new(0.0, 1.0), 3).unwrap();
        let draws = 100_000;
        let mut counts: HashMap<Vec<Option<usize>>, usize> = HashMap::new();
        for _ in 0..draws {
            let (t, lq) = prop.sample(&mut rng).unwrap();
            let s = splits_of(&t, &locs);
            let expect = exact[&s].ln() + gap_log_width(&t, &locs);
            assert!((lq - expect).abs() < 1e-9);
            *counts.entry(s).or_default() += 1;
        }
        for (t, p) in &exact {
            let f = *counts.get(t).unwrap_or(&0) as f64 / draws as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((f - p).abs() <= 3.0 * se + 1e-4, "{t:?}: {f} vs {p}");
        }
    }

    #[test]
    fn densities_sum_to_one_over_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 6;
        let w = random_cost(&mut rng, n);
        let locs = grid(n);
        let dom = Interval::new(0.0, 1.0);
        let mut total = 0.0;
        for splits in enumerate_splits(n, 3) {
            // place each cut at the middle of its gap and undo the placement density
            let mut segs = vec![0..0; 7];
            segs[0] = 0..n;
            let mut cuts = Vec::new();
            for (v, k) in splits.iter().enumerate() {
                let seg = segs[v].clone();
                let cut = k.map(|k| 0.5 * (locs[seg.start + k - 1] + locs[seg.start + k]));
                let (l, r) = split_segment(&locs, &seg, cut);
                segs[2 * v + 1] = l;
                segs[2 * v + 2] = r;
                cuts.push(cut);
            }
            let tree = PartitionTree::new(dom, 3, cuts).unwrap();
            let lq = proposal_log_density(&tree, &w, &locs).unwrap();
            total += (lq - gap_log_width(&tree, &locs)).exp();
        }
        assert!((total - 1.0).abs() < 1e-10, "{total}");
    }

    #[test]
    fn density_rejects_unreachable_trees() {
        let w = ones(4);
        let locs = [0.1, 0.3, 0.5, 0.7];
        let dom = Interval::new(0.0, 1.0);
        let outside = PartitionTree::new(dom, 2, vec![Some(0.05)]).unwrap();
        assert!(matches!(
            proposal_log_density(&outside, &w, &locs),
            Err(MgpError::ZeroDensity(_))
        ));
        let on_obs = PartitionTree::new(dom, 2, vec![Some(0.3)]).unwrap();
        assert!(matches!(
            proposal_log_density(&on_obs, &w, &locs),
            Err(MgpError::ZeroDensity(_))
        ));
        let null = PartitionTree::trivial(dom, 2);
        assert!(matches!(
            proposal_log_density(&null, &w, &locs),
            Err(MgpError::ZeroDensity(_))
        ));
    }

    #[test]
    fn uncuttable_segments_get_null_cuts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let locs = [0.1, 0.5, 0.9];
        let dom = Interval::new(0.0, 1.0);
        for _ in 0..50 {
            let (t, lq) = sample_tree_proposal(&ones(3), 3, &locs, dom, &mut rng).unwrap();
            assert_eq!(t.cuts().iter().filter(|c| c.is_none()).count(), 1);
            assert_eq!(proposal_log_density(&t, &ones(3), &locs).unwrap(), lq);
        }
    }

    #[test]
    fn subtree_resampling_keeps_the_rest() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 20;
        let w = random_cost(&mut rng, n);
        let mut prop = TreeProposal::new(w, &grid(n), Interval::new(0.0, 1.0), 4).unwrap();
        let (tree, lq) = prop.sample(&mut rng).unwrap();
        let (new, lq_sub) = prop.resample_subtree(&tree, 2, &mut rng).unwrap();
        for v in [0usize, 1, 3, 4] {
            assert_eq!(tree.cuts()[v], new.cuts()[v]);
        }
        assert_eq!(prop.subtree_log_density(&new, 2).unwrap(), lq_sub);
        let rest = lq - prop.subtree_log_density(&tree, 2).unwrap();
        assert!((prop.log_density(&new).unwrap() - (rest + lq_sub)).abs() < 1e-12);
        assert_eq!(subtree_levels(2, 7).collect::<Vec<_>>(), vec![2..3, 5..7]);
        assert_eq!(
            subtree_levels(0, 7).collect::<Vec<_>>(),
            vec![0..1, 1..3, 3..7]
        );
        assert_eq!(subtree_levels(0, 0).count(), 0);
    }

    #[test]
    fn greedy_examples() {
        let dom = Interval::new(0.0, 1.0);
        let locs = grid(8);
        let w = two_blocks(8, 3, 0.8, 0.0);
        let t = greedy_ncut_tree(&w, 2, &locs, dom).unwrap();
        assert_eq!(t.cuts()[0], Some(0.5 * (locs[2] + locs[3])));
        assert_eq!(greedy_ncut_tree(&w, 1, &locs, dom).unwrap().cuts().len(), 0);
        // every split of a uniform segment has ncut 1; the leftmost wins
        let locs4 = grid(4);
        for k in 1..4 {
            assert!((ncut_value(&ones(4), 0..4, k).unwrap() - 1.0).abs() < 1e-15);
        }
        let t = greedy_ncut_tree(&ones(4), 2, &locs4, dom).unwrap();
        assert_eq!(t.cuts()[0], Some(0.5 * (locs4[0] + locs4[1])));
    }

    proptest! {
        #[test]
        fn split_probabilities_sum_to_one(seed in 0u64..1000, n in 2usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_cost(&mut rng, n);
            let p: f64 = split_log_probs(&w, 0..n).unwrap().iter().map(|l| l.exp()).sum();
            prop_assert!((p - 1.0).abs() < 1e-12);
        }

        #[test]
        fn probabilities_are_scale_free(seed in 0u64..1000, n in 2usize..12, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_cost(&mut rng, n);
            let scaled = CostMatrix::new(w.matrix() * scale).unwrap();
            let a = split_log_probs(&w, 0..n).unwrap();
            let b = split_log_probs(&scaled, 0..n).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn sampled_density_is_reproduced(seed in 0u64..1000, n in 2usize..30, depth in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_cost(&mut rng, n);
            let locs = grid(n);
            let (t, lq) = sample_tree_proposal(&w, depth, &locs, Interval::new(0.0, 1.0), &mut rng).unwrap();
            prop_assert_eq!(proposal_log_density(&t, &w, &locs).unwrap(), lq);
        }
    }
}
