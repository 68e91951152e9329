//! Baselines, predictive metrics and the synthetic-study harness.
//!
//! The GP and hierarchical GP baselines are the mGP itself on degenerate
//! trees: one level, or two levels whose only level-1 set is the whole
//! domain. Every metric below therefore runs through the same likelihood
//! code for all three models.

mod experiment;
mod grid;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MgpError, Result};
use crate::kernels::{BandwidthMode, Hyperparams};
use crate::likelihood::{
    multi_trial_log_marginal, predictive_new_trial, GaussianBelief, MultiTrialEvaluator, TrialSet,
};
use crate::linalg::{self, log_sum_exp};
use crate::mcmc::PosteriorSample;
use crate::partition::{Interval, PartitionTree};

pub use experiment::{
    mgp_name, run_experiment, run_synthetic_experiment, ExperimentOutput, ExperimentSpec, FitSpec,
    FittedMgp, MetricReport, ModelMetrics, MseComparison,
};
pub use grid::{grid_optimize, BaselineGrid, GridResult};

/// Smallest nugget coefficient accepted for models with a trial level.
pub const MIN_NUGGET: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "GP")]
    Gp,
    #[serde(rename = "hGP")]
    Hgp,
    #[serde(rename = "mGP")]
    Mgp,
}

/// Hyperparameters tied to the average per-location sample variance
/// `s2` of the training trials: `d^0 = alpha0 s2`, `sigma2 = beta s2`, and
/// `d^l = alpha1 exp(-rho l) s2` below the root (`alpha1 s2` for the hGP).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub kind: ModelKind,
    pub kappa: f64,
    pub alpha0: f64,
    #[serde(default)]
    pub alpha1: f64,
    pub beta: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "default_mode")]
    pub bandwidth_mode: BandwidthMode,
}

fn default_mode() -> BandwidthMode {
    BandwidthMode::Fixed
}

impl BaselineSpec {
    pub fn gp(kappa: f64, alpha0: f64, beta: f64) -> Self {
        BaselineSpec {
            kind: ModelKind::Gp,
            kappa,
            alpha0,
            alpha1: 0.0,
            beta,
            rho: 0.0,
            bandwidth_mode: BandwidthMode::Fixed,
        }
    }

    pub fn hgp(kappa: f64, alpha0: f64, alpha1: f64, beta: f64) -> Self {
        BaselineSpec {
            kind: ModelKind::Hgp,
            kappa,
            alpha0,
            alpha1,
            beta,
            rho: 0.0,
            bandwidth_mode: BandwidthMode::Fixed,
        }
    }

    pub fn mgp(
        kappa: f64,
        alpha0: f64,
        alpha1: f64,
        beta: f64,
        rho: f64,
        bandwidth_mode: BandwidthMode,
    ) -> Self {
        BaselineSpec {
            kind: ModelKind::Mgp,
            kappa,
            alpha0,
            alpha1,
            beta,
            rho,
            bandwidth_mode,
        }
    }

    /// The simulation-study inference rule: every scale and the nugget at a
    /// third of the sample variance, decaying by `exp(-0.5 l)` below the root.
    pub fn mismatched_mgp(kappa: f64, bandwidth_mode: BandwidthMode) -> Self {
        Self::mgp(kappa, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.5, bandwidth_mode)
    }

    /// GP with the mGP's parent scale whose nugget absorbs all remaining
    /// mGP variance, for an mGP with `levels` levels.
    pub fn gp_matched_to(mgp: &BaselineSpec, levels: usize) -> Self {
        Self::gp(
            mgp.kappa,
            mgp.alpha0,
            mgp.beta + mgp.trial_level_sum(levels),
        )
    }

    /// hGP with the mGP's parent scale and nugget whose trial level carries
    /// the summed mGP trial-level scales.
    pub fn hgp_matched_to(mgp: &BaselineSpec, levels: usize) -> Self {
        Self::hgp(mgp.kappa, mgp.alpha0, mgp.trial_level_sum(levels), mgp.beta)
    }

    fn trial_level_sum(&self, levels: usize) -> f64 {
        (1..levels)
            .map(|l| self.alpha1 * (-self.rho * l as f64).exp())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let coefs = [self.kappa, self.alpha0, self.alpha1, self.beta, self.rho];
        if coefs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) || self.kappa == 0.0 {
            return Err(MgpError::Config(format!("invalid coefficients {coefs:?}")));
        }
        if self.kind != ModelKind::Gp && self.beta < MIN_NUGGET {
            return Err(MgpError::Config(format!(
                "nugget coefficient {} below {MIN_NUGGET}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Hyperparameters for sample variance `s2`; `levels` is used by the mGP only.
    pub fn hyperparams(&self, s2: f64, levels: usize) -> Result<Hyperparams> {
        self.validate()?;
        let d = match self.kind {
            ModelKind::Gp => vec![self.alpha0 * s2],
            ModelKind::Hgp => vec![self.alpha0 * s2, self.alpha1 * s2],
            ModelKind::Mgp => (0..levels)
                .map(|l| {
                    if l == 0 {
                        self.alpha0 * s2
                    } else {
                        self.alpha1 * (-self.rho * l as f64).exp() * s2
                    }
                })
                .collect(),
        };
        Hyperparams::new(d, self.kappa, self.beta * s2, self.bandwidth_mode)
    }
}

/// Tree of a one-level model.
pub fn gp_tree(domain: Interval) -> PartitionTree {
    PartitionTree::trivial(domain, 1)
}

/// Tree of the two-level model without cuts.
pub fn hgp_tree(domain: Interval) -> PartitionTree {
    PartitionTree::trivial(domain, 2)
}

pub fn gp_log_marginal(data: &TrialSet, theta: &Hyperparams, domain: Interval) -> Result<f64> {
    multi_trial_log_marginal(data, &gp_tree(domain), theta)
}

pub fn gp_predict(
    data: &TrialSet,
    theta: &Hyperparams,
    domain: Interval,
) -> Result<GaussianBelief> {
    predictive_new_trial(data, &gp_tree(domain), theta)
}

pub fn hgp_log_marginal(data: &TrialSet, theta: &Hyperparams, domain: Interval) -> Result<f64> {
    multi_trial_log_marginal(data, &hgp_tree(domain), theta)
}

pub fn hgp_predict(
    data: &TrialSet,
    theta: &Hyperparams,
    domain: Interval,
) -> Result<GaussianBelief> {
    predictive_new_trial(data, &hgp_tree(domain), theta)
}

/// A weighted set of trees under shared hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveModel {
    theta: Hyperparams,
    components: Vec<(PartitionTree, f64)>,
}

impl PredictiveModel {
    pub fn single(tree: PartitionTree, theta: Hyperparams) -> Self {
        PredictiveModel {
            theta,
            components: vec![(tree, 1.0)],
        }
    }

    pub fn gp(theta: Hyperparams, domain: Interval) -> Self {
        Self::single(gp_tree(domain), theta)
    }

    pub fn hgp(theta: Hyperparams, domain: Interval) -> Self {
        Self::single(hgp_tree(domain), theta)
    }

    /// Posterior samples with repeated trees merged; weights are the
    /// samples' masses, normalized.
    pub fn from_samples(samples: &[PosteriorSample], theta: Hyperparams) -> Result<Self> {
        if samples.is_empty() {
            return Err(MgpError::InvalidInput("no posterior samples".into()));
        }
        let mut components: Vec<(PartitionTree, f64)> = Vec::new();
        for s in samples {
            match components.iter_mut().find(|(t, _)| *t == s.tree) {
                Some((_, w)) => *w += s.mass(),
                None => components.push((s.tree.clone(), s.mass())),
            }
        }
        let total: f64 = components.iter().map(|(_, w)| w).sum();
        if !(total > 0.0) {
            return Err(MgpError::DegeneratePosterior);
        }
        for (_, w) in components.iter_mut() {
            *w /= total;
        }
        Ok(PredictiveModel { theta, components })
    }

    pub fn theta(&self) -> &Hyperparams {
        &self.theta
    }

    pub fn components(&self) -> &[(PartitionTree, f64)] {
        &self.components
    }

    /// Evaluates every requested quantity, one tree at a time.
    pub fn evaluate(
        &self,
        train: &TrialSet,
        heldout: &[DVector<f64>],
        window: Option<Window>,
    ) -> Result<Evaluation> {
        let n = train.n();
        if heldout.iter().any(|y| y.len() != n) {
            return Err(MgpError::InvalidInput(
                "heldout trial length does not match locations".into(),
            ));
        }
        if let Some(w) = window {
            w.check(n)?;
        }
        let per_tree: Vec<TreeEvaluation> = self
            .components
            .par_iter()
            .map(|(tree, weight)| evaluate_tree(tree, *weight, &self.theta, train, heldout, window))
            .collect::<Result<_>>()?;
        let mut parent_mean = DVector::zeros(n);
        for t in &per_tree {
            parent_mean += &t.parent_mean * t.weight;
        }
        let log_w: Vec<f64> = per_tree.iter().map(|t| t.weight.ln()).collect();
        let heldout_log_likelihood = (0..heldout.len())
            .map(|i| {
                let terms: Vec<f64> = per_tree
                    .iter()
                    .zip(&log_w)
                    .map(|(t, lw)| lw + t.heldout[i])
                    .collect();
                log_sum_exp(&terms)
            })
            .collect();
        let windows = window.map(|w| {
            (0..heldout.len())
                .map(|i| {
                    let h = w.len();
                    let mut mean = DVector::zeros(h);
                    let mut second = DVector::zeros(h);
                    for t in &per_tree {
                        let (m, v) = &t.windows[i];
                        mean += m * t.weight;
                        second += (v + m.component_mul(m)) * t.weight;
                    }
                    let variance = second - mean.component_mul(&mean);
                    WindowPrediction {
                        indices: w.indices(),
                        mean,
                        variance,
                    }
                })
                .collect()
        });
        Ok(Evaluation {
            parent_mean,
            heldout_log_likelihood,
            windows,
        })
    }
}

/// Forecast window: observe the first `tau - 1` values (1-based) and
/// predict values `tau ..= tau + horizon`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub tau: usize,
    pub horizon: usize,
}

impl Window {
    pub fn new(tau: usize, horizon: usize, n: usize) -> Result<Self> {
        let w = Window { tau, horizon };
        w.check(n)?;
        Ok(w)
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(MgpError::InvalidInput("empty prediction window".into()));
        }
        if self.tau == 0 || self.tau + self.horizon > n {
            return Err(MgpError::InvalidInput(format!(
                "window {}..={} outside 1..={n}",
                self.tau,
                self.tau + self.horizon
            )));
        }
        Ok(())
    }

    /// 0-based indices conditioned on.
    pub fn observed(&self) -> std::ops::Range<usize> {
        0..self.tau - 1
    }

    /// 0-based indices predicted.
    pub fn indices(&self) -> Vec<usize> {
        (self.tau - 1..self.tau + self.horizon).collect()
    }

    pub fn len(&self) -> usize {
        self.horizon + 1
    }
}

/// Tree-averaged prediction over a window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPrediction {
    pub indices: Vec<usize>,
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

impl WindowPrediction {
    pub fn mse(&self, y: &DVector<f64>) -> f64 {
        let sq: f64 = self
            .indices
            .iter()
            .zip(self.mean.iter())
            .map(|(&i, m)| (y[i] - m).powi(2))
            .sum();
        sq / self.indices.len() as f64
    }
}

/// Tree-averaged quantities for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Posterior mean of the parent function.
    pub parent_mean: DVector<f64>,
    /// Log of the tree-averaged predictive density of each heldout trial.
    pub heldout_log_likelihood: Vec<f64>,
    pub windows: Option<Vec<WindowPrediction>>,
}

struct TreeEvaluation {
    weight: f64,
    parent_mean: DVector<f64>,
    heldout: Vec<f64>,
    windows: Vec<(DVector<f64>, DVector<f64>)>,
}

fn evaluate_tree(
    tree: &PartitionTree,
    weight: f64,
    theta: &Hyperparams,
    train: &TrialSet,
    heldout: &[DVector<f64>],
    window: Option<Window>,
) -> Result<TreeEvaluation> {
    let eval = MultiTrialEvaluator::for_data(train, tree.domain(), theta)?;
    let sigma = crate::kernels::trial_cov(train.locs(), tree, theta)?;
    let post = eval.posterior(&sigma)?;
    let pred = post.predictive();
    let factor = linalg::cholesky(&pred.cov)?;
    let heldout_ll = heldout
        .iter()
        .map(|y| linalg::mvn_log_density_factored(y, &pred.mean, &factor))
        .collect();
    let mut windows = Vec::new();
    if let Some(w) = window {
        // same conditioning as `predictive_conditional`, with the observed
        // block factorized once for all heldout trials
        let obs: Vec<usize> = w.observed().collect();
        let idx = w.indices();
        let m_w = pred.mean.select_rows(&idx);
        let c_ww = pred.cov.select_rows(&idx).select_columns(&idx).diagonal();
        if obs.is_empty() {
            windows = heldout
                .iter()
                .map(|_| (m_w.clone(), c_ww.clone()))
                .collect();
        } else {
            let c_ow = pred.cov.select_rows(&obs).select_columns(&idx);
            let f = linalg::cholesky(&pred.cov.select_rows(&obs).select_columns(&obs))?;
            let z = f
                .l_dirty()
                .solve_lower_triangular(&c_ow)
                .expect("positive diagonal");
            let var = DVector::from_fn(idx.len(), |j, _| c_ww[j] - z.column(j).norm_squared());
            let gain = f.solve(&c_ow);
            let m_o = pred.mean.select_rows(&obs);
            for y in heldout {
                let r = y.select_rows(&obs) - &m_o;
                windows.push((&m_w + gain.tr_mul(&r), var.clone()));
            }
        }
    }
    Ok(TreeEvaluation {
        weight,
        parent_mean: post.mean,
        heldout: heldout_ll,
        windows,
    })
}

/// Log of the tree-averaged predictive density of heldout trial `y`.
pub fn heldout_log_likelihood(
    model: &PredictiveModel,
    train: &TrialSet,
    y: &DVector<f64>,
) -> Result<f64> {
    Ok(model
        .evaluate(train, std::slice::from_ref(y), None)?
        .heldout_log_likelihood[0])
}

/// Mean squared error of the tree-averaged forecast of `y` over `window`.
pub fn predictive_mse(
    model: &PredictiveModel,
    train: &TrialSet,
    y: &DVector<f64>,
    window: Window,
) -> Result<f64> {
    let ev = model.evaluate(train, std::slice::from_ref(y), Some(window))?;
    Ok(ev.windows.expect("window requested")[0].mse(y))
}

/// Tree-averaged forecast of `y` over `window`.
pub fn predict_window(
    model: &PredictiveModel,
    train: &TrialSet,
    y: &DVector<f64>,
    window: Window,
) -> Result<WindowPrediction> {
    let ev = model.evaluate(train, std::slice::from_ref(y), Some(window))?;
    Ok(ev.windows.expect("window requested").remove(0))
}

/// RMSE between the tree-averaged posterior mean of `f0` and `truth`.
pub fn f0_error(model: &PredictiveModel, train: &TrialSet, truth: &[f64]) -> Result<f64> {
    if truth.len() != train.n() {
        return Err(MgpError::InvalidInput(
            "true parent length does not match locations".into(),
        ));
    }
    let ev = model.evaluate(train, &[], None)?;
    Ok(rmse(&ev.parent_mean, truth))
}

pub fn rmse(estimate: &DVector<f64>, truth: &[f64]) -> f64 {
    let sq: f64 = estimate
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    (sq / truth.len() as f64).sqrt()
}

/// Normalized histogram of cut locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
}

/// Histogram of level-`level` cut points over `samples`, each sample
/// weighted by its mass; `bins` equal bins over `domain`.
pub fn changepoint_histogram(
    samples: &[PosteriorSample],
    level: usize,
    bins: usize,
    domain: Interval,
) -> Result<Histogram> {
    if samples.is_empty() || bins == 0 {
        return Err(MgpError::InvalidInput(
            "histogram needs samples and at least one bin".into(),
        ));
    }
    let width = domain.length() / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|b| domain.lo + width * b as f64).collect();
    let mut mass = vec![0.0; bins];
    for s in samples {
        for z in s.tree.cuts_at_level(level) {
            let b = (((z - domain.lo) / width) as usize).min(bins - 1);
            mass[b] += s.mass();
        }
    }
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        mass.iter_mut().for_each(|m| *m /= total);
    }
    Ok(Histogram { edges, mass })
}
