//! Forward simulation from the mGP generative model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MgpError, Result};
use crate::kernels::{self, effective_bandwidth, sq_exp, Hyperparams};
use crate::likelihood::TrialSet;
use crate::linalg;
use crate::partition::{
    internal_node_count, level_offset, Interval, PartitionPrior, PartitionTree,
};

/// Tree draws allowed before a specification is declared infeasible.
pub const REJECTION_BUDGET: usize = 100_000;

/// Everything needed to simulate one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub trials: usize,
    pub domain: [f64; 2],
    pub theta: Hyperparams,
    /// Cut-point density; uniform on the domain when absent.
    #[serde(default)]
    pub prior: Option<PartitionPrior>,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(MgpError::Config("synthetic data needs n >= 2".into()));
        }
        if self.trials == 0 {
            return Err(MgpError::Config(
                "synthetic data needs at least one trial".into(),
            ));
        }
        let [lo, hi] = self.domain;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(MgpError::Config(format!("empty domain [{lo}, {hi}]")));
        }
        self.theta.validate()
    }

    pub fn depth(&self) -> usize {
        self.theta.levels()
    }

    pub fn interval(&self) -> Interval {
        Interval::new(self.domain[0], self.domain[1])
    }

    /// `n` evenly spaced locations spanning the domain.
    pub fn locations(&self) -> Vec<f64> {
        let [lo, hi] = self.domain;
        (0..self.n)
            .map(|i| lo + (hi - lo) * i as f64 / (self.n - 1) as f64)
            .collect()
    }

    pub fn cut_prior(&self) -> Result<PartitionPrior> {
        match &self.prior {
            Some(p) => Ok(p.clone()),
            None => PartitionPrior::uniform(self.interval()),
        }
    }
}

/// Scales `d^0 = d0` and `d^l = d0 exp(-rate l)` for `l = 1..depth-1`.
pub fn decaying_scales(d0: f64, rate: f64, depth: usize) -> Vec<f64> {
    (0..depth)
        .map(|l| {
            if l == 0 {
                d0
            } else {
                d0 * (-rate * l as f64).exp()
            }
        })
        .collect()
}

/// Latent functions behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub tree: PartitionTree,
    pub theta: Hyperparams,
    pub locs: Vec<f64>,
    pub f0: Vec<f64>,
    /// `levels[j][l - 1]` is trial `j`'s level-`l` function, noise excluded.
    pub levels: Vec<Vec<Vec<f64>>>,
}

/// Draws `2^(L-1) - 1` cut points from `prior` and arranges them into the
/// balanced tree, redrawing until every cut separates observations and
/// every internal set holds at least two of them.
pub fn sample_tree<R: Rng + ?Sized>(
    prior: &PartitionPrior,
    depth: usize,
    locs: &[f64],
    rng: &mut R,
) -> Result<PartitionTree> {
    let m = internal_node_count(depth);
    let domain = prior.domain();
    for _ in 0..REJECTION_BUDGET {
        let cuts: Vec<f64> = (0..m).map(|_| prior.sample(rng)).collect();
        let Ok(tree) = PartitionTree::from_sorted_cuts(domain, depth, &cuts) else {
            continue;
        };
        let segs = tree.segments(locs);
        let ok = (0..m).all(|v| {
            segs[v].len() >= 2 && !segs[2 * v + 1].is_empty() && !segs[2 * v + 2].is_empty()
        });
        if ok {
            return Ok(tree);
        }
    }
    Err(MgpError::InvalidInput(format!(
        "no tree with {m} cuts separating the {} locations after {REJECTION_BUDGET} draws",
        locs.len()
    )))
}

/// Samples trials for a fixed tree; factorizations are reused across trials.
#[derive(Debug, Clone)]
pub struct Generator {
    locs: Vec<f64>,
    theta: Hyperparams,
    parent: DMatrix<f64>,
    /// Per level `l >= 1`: `(first index, lower factor)` of each nonempty set.
    blocks: Vec<Vec<(usize, DMatrix<f64>)>>,
}

impl Generator {
    pub fn new(locs: &[f64], tree: &PartitionTree, theta: &Hyperparams) -> Result<Self> {
        theta.check_tree(tree)?;
        let k0 = kernels::level_cov(locs, tree, theta, 0)?;
        let parent = linalg::cholesky(&k0)?.l();
        let segs = tree.segments(locs);
        let mut blocks = Vec::new();
        for level in 1..tree.depth() {
            let mut lv = Vec::new();
            let d = theta.d[level];
            let start = level_offset(level);
            for node in start..start + (1usize << level) {
                let seg = segs[node].clone();
                if seg.is_empty() || d == 0.0 {
                    continue;
                }
                let k = effective_bandwidth(theta.kappa, tree.set(node), theta.bandwidth_mode)?;
                let cov = DMatrix::from_fn(seg.len(), seg.len(), |i, j| {
                    sq_exp(locs[seg.start + i], locs[seg.start + j], d, k)
                });
                lv.push((seg.start, linalg::cholesky(&cov)?.l()));
            }
            blocks.push(lv);
        }
        Ok(Generator {
            locs: locs.to_vec(),
            theta: theta.clone(),
            parent,
            blocks,
        })
    }

    fn normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
    }

    /// `f0 ~ N(0, K_0)`.
    pub fn sample_parent<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        &self.parent * Self::normal(rng, self.locs.len())
    }

    /// One trial around `f0`: the level functions and the noisy observation.
    pub fn sample_trial<R: Rng + ?Sized>(
        &self,
        f0: &DVector<f64>,
        rng: &mut R,
    ) -> (Vec<DVector<f64>>, DVector<f64>) {
        let mut f = f0.clone();
        let mut levels = Vec::with_capacity(self.blocks.len());
        for lv in &self.blocks {
            for (start, l) in lv {
                let dev = l * Self::normal(rng, l.nrows());
                let mut rows = f.rows_mut(*start, l.nrows());
                rows += dev;
            }
            levels.push(f.clone());
        }
        let s = self.theta.sigma2.sqrt();
        let y = f + Self::normal(rng, self.locs.len()) * s;
        (levels, y)
    }
}

/// Draws a tree, a shared parent and `spec.trials` trials.
pub fn sample_dataset(spec: &SynthSpec) -> Result<(TrialSet, Truth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let locs = spec.locations();
    let tree = sample_tree(&spec.cut_prior()?, spec.depth(), &locs, &mut rng)?;
    let gen = Generator::new(&locs, &tree, &spec.theta)?;
    let f0 = gen.sample_parent(&mut rng);
    let mut ys = DMatrix::zeros(locs.len(), spec.trials);
    let mut levels = Vec::with_capacity(spec.trials);
    for j in 0..spec.trials {
        let (lv, y) = gen.sample_trial(&f0, &mut rng);
        ys.set_column(j, &y);
        levels.push(
            lv.into_iter()
                .map(|v| v.iter().copied().collect())
                .collect(),
        );
    }
    let truth = Truth {
        tree,
        theta: spec.theta.clone(),
        locs: locs.clone(),
        f0: f0.iter().copied().collect(),
        levels,
    };
    Ok((TrialSet::from_matrix(locs, ys)?, truth))
}

/// Pairwise closed-form mGP correlation with unit diagonal.
pub fn true_correlation_matrix(
    tree: &PartitionTree,
    theta: &Hyperparams,
    locs: &[f64],
) -> Result<DMatrix<f64>> {
    kernels::correlation_matrix(locs, tree, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::BandwidthMode;

    fn unit() -> Interval {
        Interval::new(0.0, 1.0)
    }

    fn spec(n: usize, trials: usize, d: Vec<f64>, sigma2: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            n,
            trials,
            domain: [0.0, 1.0],
            theta: Hyperparams {
                d,
                kappa: 10.0,
                sigma2,
                bandwidth_mode: BandwidthMode::Fractal,
            },
            prior: None,
            seed,
        }
    }

    #[test]
    fn tree_sampling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prior = PartitionPrior::uniform(unit()).unwrap();
        let locs: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        assert!(sample_tree(&prior, 1, &locs, &mut rng)
            .unwrap()
            .cuts()
            .is_empty());
        let draws: Vec<f64> = (0..20_000)
            .map(|_| sample_tree(&prior, 2, &locs, &mut rng).unwrap().cuts()[0].unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 4.0 * (1.0f64 / 12.0 / 20_000.0).sqrt());
        assert!((var - 1.0 / 12.0).abs() < 0.003);
        // three locations cannot hold a depth-4 tree
        assert!(sample_tree(&prior, 4, &[0.1, 0.5, 0.9], &mut rng).is_err());
    }

    #[test]
    fn middle_cut_is_median_of_three() {
        // median of 3 uniforms is Beta(2,2): density 6 z (1 - z)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prior = PartitionPrior::uniform(unit()).unwrap();
        let locs: Vec<f64> = (0..2000).map(|i| (i as f64 + 0.5) / 2000.0).collect();
        let draws = 100_000;
        let bins = 10;
        let mut counts = vec![0usize; bins];
        for _ in 0..draws {
            let z = sample_tree(&prior, 3, &locs, &mut rng).unwrap().cuts()[0].unwrap();
            counts[((z * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let cdf = |z: f64| 3.0 * z * z - 2.0 * z * z * z;
        for b in 0..bins {
            let p = cdf((b + 1) as f64 / bins as f64) - cdf(b as f64 / bins as f64);
            let f = counts[b] as f64 / draws as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((f - p).abs() < 4.0 * se, "bin {b}: {f} vs {p}");
        }
    }

    #[test]
    fn noiseless_parent_only_trials_are_identical() {
        let s = spec(20, 4, vec![2.0, 0.0, 0.0], 0.0, 3);
        let (data, truth) = sample_dataset(&s).unwrap();
        for j in 0..4 {
            let y: Vec<f64> = data.trial(j).iter().copied().collect();
            assert_eq!(y, truth.f0);
        }
    }

    #[test]
    fn seeds_reproduce() {
        let s = spec(30, 5, decaying_scales(1.0, 0.5, 3), 0.1, 4);
        assert_eq!(sample_dataset(&s).unwrap(), sample_dataset(&s).unwrap());
        let other = SynthSpec {
            seed: 5,
            ..s.clone()
        };
        assert_ne!(
            sample_dataset(&s).unwrap().0,
            sample_dataset(&other).unwrap().0
        );
    }

    #[test]
    fn scale_decay() {
        let d = decaying_scales(5.0, 0.5, 5);
        assert_eq!(d[0], 5.0);
        assert!((d[1] - 5.0 * (-0.5f64).exp()).abs() < 1e-15);
        assert!((d[4] - 5.0 * (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn truth_records_round_trip() {
        let s = spec(12, 2, vec![1.0, 0.5], 0.2, 6);
        let (_, truth) = sample_dataset(&s).unwrap();
        let json = serde_json::to_string(&truth).unwrap();
        assert_eq!(serde_json::from_str::<Truth>(&json).unwrap(), truth);
        assert_eq!(truth.levels.len(), 2);
        assert_eq!(truth.levels[0].len(), 1);
    }

    #[test]
    fn correlation_examples() {
        let locs = [0.1, 0.3, 0.6, 0.9];
        let tree = PartitionTree::new(unit(), 2, vec![Some(0.5)]).unwrap();
        let zero = Hyperparams::new(vec![0.0, 0.0], 10.0, 1.0, BandwidthMode::Fractal).unwrap();
        assert_eq!(
            true_correlation_matrix(&tree, &zero, &locs).unwrap(),
            DMatrix::identity(4, 4)
        );
        // with no parent, only points in the same level-1 set correlate
        let theta = Hyperparams::new(vec![0.0, 1.0], 1.0, 0.1, BandwidthMode::Fractal).unwrap();
        let c = true_correlation_matrix(&tree, &theta, &locs).unwrap();
        assert!(c[(0, 1)] > 0.5 && c[(2, 3)] > 0.5);
        assert_eq!(c[(0, 2)], 0.0);
        assert_eq!(c[(1, 3)], 0.0);
        let cov = kernels::total_cov(&locs, &tree, &theta).unwrap();
        assert!((kernels::cov_to_corr(&cov) - c).abs().max() < 1e-10);
    }

    /// Sample covariance of the rows of `x` (draws x dims) and the standard
    /// error of each entry under normality.
    fn cov_with_se(
        samples: &[DVector<f64>],
        other: &[DVector<f64>],
        truth: &DMatrix<f64>,
        var_a: &DMatrix<f64>,
        var_b: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = samples[0].len();
        let m = samples.len() as f64;
        let mut c = DMatrix::zeros(n, n);
        for (a, b) in samples.iter().zip(other) {
            c += a * b.transpose();
        }
        c /= m;
        let se = DMatrix::from_fn(n, n, |i, j| {
            ((var_a[(i, i)] * var_b[(j, j)] + truth[(i, j)].powi(2)) / m).sqrt()
        });
        (c, se)
    }

    #[test]
    fn law_matches_covariance_structure() {
        let locs: Vec<f64> = (0..6).map(|i| (i as f64 + 0.5) / 6.0).collect();
        let tree = PartitionTree::new(unit(), 3, vec![Some(0.45), Some(0.2), Some(0.8)]).unwrap();
        let theta =
            Hyperparams::new(vec![1.0, 0.6, 0.4], 3.0, 0.2, BandwidthMode::Fractal).unwrap();
        let gen = Generator::new(&locs, &tree, &theta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 100_000;
        let (mut first, mut second) = (Vec::with_capacity(draws), Vec::with_capacity(draws));
        for _ in 0..draws {
            let f0 = gen.sample_parent(&mut rng);
            first.push(gen.sample_trial(&f0, &mut rng).1);
            second.push(gen.sample_trial(&f0, &mut rng).1);
        }
        let total = kernels::total_cov(&locs, &tree, &theta).unwrap();
        let k0 = kernels::level_cov(&locs, &tree, &theta, 0).unwrap();
        // within a trial: total covariance
        let (c, se) = cov_with_se(&first, &first, &total, &total, &total);
        for (e, s) in (c - &total).iter().zip(se.iter()) {
            assert!(e.abs() < 3.0 * s, "{e} vs se {s}");
        }
        // across trials sharing f0: the parent covariance
        let (c, se) = cov_with_se(&first, &second, &k0, &total, &total);
        for (e, s) in (c - &k0).iter().zip(se.iter()) {
            assert!(e.abs() < 3.0 * s, "{e} vs se {s}");
        }
        // marginal variance at each location
        for i in 0..6 {
            assert!((total[(i, i)] - theta.total_variance()).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_correlation_matches_closed_form_at_scale() {
        // f0 resampled per trial so the empirical correlation targets the
        // full closed form; trial sd of a correlation r is (1 - r^2)/sqrt(J)
        let s = spec(200, 1, decaying_scales(5.0, 0.5, 5), 0.1, 8);
        let locs = s.locations();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tree = sample_tree(&s.cut_prior().unwrap(), 5, &locs, &mut rng).unwrap();
        let gen = Generator::new(&locs, &tree, &s.theta).unwrap();
        let j = 5000;
        let mut ys = DMatrix::zeros(200, j);
        for t in 0..j {
            let f0 = gen.sample_parent(&mut rng);
            ys.set_column(t, &gen.sample_trial(&f0, &mut rng).1);
        }
        let truth = true_correlation_matrix(&tree, &s.theta, &locs).unwrap();
        let emp =
            crate::ncut::empirical_cost_matrix(&TrialSet::from_matrix(locs, ys).unwrap()).unwrap();
        for (e, t) in emp.matrix().iter().zip(truth.iter()) {
            let tol = (5.0 * (1.0 - t * t) / (j as f64).sqrt()).max(0.05);
            assert!((e - t.abs()).abs() < tol, "{e} vs {t}");
        }
    }
}
