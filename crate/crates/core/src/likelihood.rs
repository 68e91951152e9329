//! Closed-form Gaussian computations conditioned on a partition tree:
//! single- and multi-trial marginals, the posterior of the shared parent
//! function and predictive distributions for new trials.
//!
//! With `Sigma = sigma2 I + sum_{l>=1} K_l`, `s = sum_j y_j` and
//! `M = J K_0 + Sigma`, the multi-trial marginal is evaluated as
//!
//! ```text
//! log p(Y) = -(nJ/2) log 2pi - 1/2 log|M| - (J-1)/2 log|Sigma|
//!            - 1/2 sum_j y_j' Sigma^{-1} y_j + (s' Sigma^{-1} s - s' M^{-1} s) / (2J)
//! ```
//!
//! which is the shared-parent marginal rearranged so that `K_0` is never
//! factorized on its own; smooth parent kernels make `K_0` numerically singular.

use nalgebra::{DMatrix, DVector};

use crate::error::{MgpError, Result};
use crate::kernels::{self, Hyperparams};
use crate::linalg::{self, BlockCholesky};
use crate::partition::{Interval, PartitionTree};

/// Trials observed at shared ascending locations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    locs: Vec<f64>,
    /// n x J, one column per trial.
    trials: DMatrix<f64>,
}

impl TrialSet {
    pub fn new(locs: Vec<f64>, trials: Vec<Vec<f64>>) -> Result<Self> {
        if trials.is_empty() {
            return Err(MgpError::InvalidInput(
                "at least one trial is required".into(),
            ));
        }
        let n = locs.len();
        if let Some((j, t)) = trials.iter().enumerate().find(|(_, t)| t.len() != n) {
            return Err(MgpError::InvalidInput(format!(
                "trial {j} has {} values for {n} locations",
                t.len()
            )));
        }
        let m = DMatrix::from_fn(n, trials.len(), |i, j| trials[j][i]);
        Self::from_matrix(locs, m)
    }

    /// `trials` is n x J with one trial per column.
    pub fn from_matrix(locs: Vec<f64>, trials: DMatrix<f64>) -> Result<Self> {
        let set = TrialSet { locs, trials };
        set.check()?;
        if set.trials.ncols() == 0 {
            return Err(MgpError::InvalidInput(
                "at least one trial is required".into(),
            ));
        }
        Ok(set)
    }

    /// Locations with no trials; used for prior predictive calls.
    pub fn empty(locs: Vec<f64>) -> Result<Self> {
        let n = locs.len();
        let set = TrialSet {
            locs,
            trials: DMatrix::zeros(n, 0),
        };
        set.check()?;
        Ok(set)
    }

    fn check(&self) -> Result<()> {
        if self.locs.len() < 2 {
            return Err(MgpError::InvalidInput(
                "at least two locations are required".into(),
            ));
        }
        if self.locs.iter().any(|x| !x.is_finite()) || self.locs.windows(2).any(|w| !(w[0] < w[1]))
        {
            return Err(MgpError::InvalidInput(
                "locations must be finite and strictly ascending".into(),
            ));
        }
        if self.trials.nrows() != self.locs.len() {
            return Err(MgpError::InvalidInput(
                "trial length does not match locations".into(),
            ));
        }
        if self.trials.iter().any(|v| !v.is_finite()) {
            return Err(MgpError::InvalidInput("trial values must be finite".into()));
        }
        Ok(())
    }

    pub fn locs(&self) -> &[f64] {
        &self.locs
    }

    pub fn n(&self) -> usize {
        self.locs.len()
    }

    pub fn num_trials(&self) -> usize {
        self.trials.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.trials
    }

    pub fn trial(&self, j: usize) -> DVector<f64> {
        self.trials.column(j).into_owned()
    }

    pub fn sum(&self) -> DVector<f64> {
        self.trials.column_sum()
    }

    /// Trials `range` as a new set.
    pub fn select(&self, range: std::ops::Range<usize>) -> Result<TrialSet> {
        let cols = self.trials.columns(range.start, range.len()).into_owned();
        if cols.ncols() == 0 {
            return TrialSet::empty(self.locs.clone());
        }
        TrialSet::from_matrix(self.locs.clone(), cols)
    }

    /// Average over locations of the across-trial sample variance.
    pub fn mean_trial_variance(&self) -> Result<f64> {
        let j = self.num_trials();
        if j < 2 {
            return Err(MgpError::InvalidInput(
                "sample variance needs at least two trials".into(),
            ));
        }
        let total: f64 = self
            .trials
            .row_iter()
            .map(|row| {
                let mean = row.sum() / j as f64;
                row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (j - 1) as f64
            })
            .sum();
        Ok(total / self.n() as f64)
    }
}

/// A Gaussian over function values at the observed locations.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        linalg::mvn_log_density(x, &self.mean, &self.cov)
    }

    /// Pointwise variances.
    pub fn variances(&self) -> DVector<f64> {
        self.cov.diagonal()
    }
}

/// Log-density of one trial under `N(0, sigma2 I + sum_l K_l)`.
pub fn single_trial_log_marginal(
    y: &DVector<f64>,
    locs: &[f64],
    tree: &PartitionTree,
    theta: &Hyperparams,
) -> Result<f64> {
    check_len(y.len(), locs.len())?;
    let cov = kernels::total_cov(locs, tree, theta)?;
    linalg::mvn_log_density(y, &DVector::zeros(locs.len()), &cov)
}

/// Log-density of one trial given the level-`level` function values `f`.
pub fn conditional_log_likelihood(
    y: &DVector<f64>,
    locs: &[f64],
    tree: &PartitionTree,
    theta: &Hyperparams,
    f: &DVector<f64>,
    level: usize,
) -> Result<f64> {
    check_len(y.len(), locs.len())?;
    check_len(f.len(), locs.len())?;
    let cov = kernels::residual_cov(locs, tree, theta, level)?;
    linalg::mvn_log_density(y, f, &cov)
}

fn check_len(got: usize, n: usize) -> Result<()> {
    if got != n {
        return Err(MgpError::InvalidInput(format!(
            "vector of length {got} for {n} locations"
        )));
    }
    Ok(())
}

/// Tree-independent pieces of the multi-trial marginal: the data and
/// `J K_0`. Reused across every tree a sampler visits.
#[derive(Debug, Clone)]
pub struct MultiTrialEvaluator {
    trials: DMatrix<f64>,
    sum: DVector<f64>,
    parent: DMatrix<f64>,
    scaled_parent: DMatrix<f64>,
    parent_scale: f64,
}

impl MultiTrialEvaluator {
    pub fn new(data: &TrialSet, parent_cov: DMatrix<f64>, parent_scale: f64) -> Self {
        let j = data.num_trials() as f64;
        MultiTrialEvaluator {
            trials: data.matrix().clone(),
            sum: data.sum(),
            scaled_parent: &parent_cov * j,
            parent: parent_cov,
            parent_scale,
        }
    }

    /// Builds `K_0` for `data` on `domain` under `theta`; level 0 does not
    /// depend on the cuts.
    pub fn for_data(data: &TrialSet, domain: Interval, theta: &Hyperparams) -> Result<Self> {
        let root = PartitionTree::trivial(domain, theta.levels());
        let k0 = kernels::level_cov(data.locs(), &root, theta, 0)?;
        Ok(Self::new(data, k0, theta.d[0]))
    }

    pub fn num_trials(&self) -> usize {
        self.trials.ncols()
    }

    /// Multi-trial log marginal given the trial covariance `sigma`.
    pub fn log_marginal(&self, sigma: &DMatrix<f64>) -> Result<f64> {
        let n = sigma.nrows() as f64;
        let j = self.num_trials();
        if j == 0 {
            return Ok(0.0);
        }
        let jf = j as f64;
        let sig = BlockCholesky::new(sigma)?;
        let quad = sig.quad_form_columns(&self.trials);
        let base = -0.5 * n * jf * linalg::ln_2pi() - 0.5 * quad;
        if self.parent_scale == 0.0 {
            // f0 == 0: trials are independent N(0, Sigma)
            return Ok(base - 0.5 * jf * sig.log_det());
        }
        let m = &self.scaled_parent + sigma;
        let mf = BlockCholesky::new(&m)?;
        let shrink = (sig.quad_form(&self.sum) - mf.quad_form(&self.sum)) / (2.0 * jf);
        Ok(base - 0.5 * mf.log_det() - 0.5 * (jf - 1.0) * sig.log_det() + shrink)
    }

    /// Posterior of the parent function and the predictive of a new trial.
    pub fn posterior(&self, sigma: &DMatrix<f64>) -> Result<ParentPosterior> {
        if self.parent_scale == 0.0 {
            return Err(MgpError::SingularParent);
        }
        let j = self.num_trials() as f64;
        let m = &self.scaled_parent + sigma;
        let mf = BlockCholesky::new(&m)?;
        let k0 = &self.parent;
        let mean = if j > 0.0 {
            k0 * mf.solve(&self.sum)
        } else {
            DVector::zeros(sigma.nrows())
        };
        let mut cov = if j > 0.0 {
            let z = mf.solve_lower(k0);
            k0 - (z.transpose() * z) * j
        } else {
            k0.clone()
        };
        linalg::symmetrize(&mut cov);
        Ok(ParentPosterior {
            mean,
            cov,
            sigma: sigma.clone(),
        })
    }
}

/// Posterior `N(mean, cov)` of `f0` and the trial covariance it was built with.
#[derive(Debug, Clone)]
pub struct ParentPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
}

impl ParentPosterior {
    pub fn parent(&self) -> GaussianBelief {
        GaussianBelief {
            mean: self.mean.clone(),
            cov: self.cov.clone(),
        }
    }

    pub fn predictive(&self) -> GaussianBelief {
        let mut cov = &self.sigma + &self.cov;
        linalg::symmetrize(&mut cov);
        GaussianBelief {
            mean: self.mean.clone(),
            cov,
        }
    }
}

fn evaluator_for(
    data: &TrialSet,
    tree: &PartitionTree,
    theta: &Hyperparams,
) -> Result<MultiTrialEvaluator> {
    theta.check_tree(tree)?;
    let k0 = kernels::level_cov(data.locs(), tree, theta, 0)?;
    Ok(MultiTrialEvaluator::new(data, k0, theta.d[0]))
}

/// `log p(Y | tree)` with the parent function shared across trials.
pub fn multi_trial_log_marginal(
    data: &TrialSet,
    tree: &PartitionTree,
    theta: &Hyperparams,
) -> Result<f64> {
    let eval = evaluator_for(data, tree, theta)?;
    let sigma = kernels::trial_cov(data.locs(), tree, theta)?;
    eval.log_marginal(&sigma)
}

fn parent_posterior(
    data: &TrialSet,
    tree: &PartitionTree,
    theta: &Hyperparams,
) -> Result<ParentPosterior> {
    let eval = evaluator_for(data, tree, theta)?;
    let sigma = kernels::trial_cov(data.locs(), tree, theta)?;
    eval.posterior(&sigma)
}

/// Posterior of `f0` at the observed locations.
pub fn posterior_parent(
    data: &TrialSet,
    tree: &PartitionTree,
    theta: &Hyperparams,
) -> Result<GaussianBelief> {
    Ok(parent_posterior(data, tree, theta)?.parent())
}

/// Predictive distribution of a new trial. With zero trials this is the
/// prior `N(0, Sigma + K_0)`.
pub fn predictive_new_trial(
    data: &TrialSet,
    tree: &PartitionTree,
    theta: &Hyperparams,
) -> Result<GaussianBelief> {
    Ok(parent_posterior(data, tree, theta)?.predictive())
}

/// Conditions `belief` on observed `(index, value)` pairs. Returns the
/// remaining indices in ascending order and the belief over them.
pub fn predictive_conditional(
    belief: &GaussianBelief,
    observed: &[(usize, f64)],
) -> Result<(Vec<usize>, GaussianBelief)> {
    let n = belief.dim();
    let mut is_obs = vec![false; n];
    for &(i, v) in observed {
        if i >= n || is_obs[i] || !v.is_finite() {
            return Err(MgpError::InvalidInput(format!("bad observed index {i}")));
        }
        is_obs[i] = true;
    }
    let free: Vec<usize> = (0..n).filter(|&i| !is_obs[i]).collect();
    if free.is_empty() {
        return Err(MgpError::InvalidInput("every index is observed".into()));
    }
    if observed.is_empty() {
        return Ok((free, belief.clone()));
    }
    let obs: Vec<usize> = observed.iter().map(|&(i, _)| i).collect();
    let c_oo = belief.cov.select_rows(&obs).select_columns(&obs);
    let c_uo = belief.cov.select_rows(&free).select_columns(&obs);
    let c_uu = belief.cov.select_rows(&free).select_columns(&free);
    let resid =
        DVector::from_iterator(obs.len(), observed.iter().map(|&(i, v)| v - belief.mean[i]));
    let f = linalg::cholesky(&c_oo)?;
    let mean = belief.mean.select_rows(&free) + &c_uo * f.solve(&resid);
    let z = f
        .l_dirty()
        .solve_lower_triangular(&c_uo.transpose())
        .expect("positive diagonal");
    let mut cov = c_uu - z.transpose() * z;
    linalg::symmetrize(&mut cov);
    Ok((free, GaussianBelief { mean, cov }))
}
