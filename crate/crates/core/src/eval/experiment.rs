use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    changepoint_histogram, gp_tree, hgp_tree, rmse, BaselineSpec, Evaluation, Histogram, ModelKind,
    PredictiveModel, Window,
};
use crate::error::{MgpError, Result};
use crate::likelihood::{multi_trial_log_marginal, TrialSet};
use crate::mcmc::{
    map_partition, pooled_samples, run_chains, ChainOutput, PosteriorSample, SamplerConfig,
    TreePosterior,
};
use crate::ncut::{empirical_cost_matrix, greedy_ncut_tree};
use crate::partition::{Interval, PartitionPrior, PartitionTree};
use crate::synth::{sample_dataset, true_correlation_matrix, SynthSpec, Truth};

/// A simulate-fit-score run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Data generator; its trial count includes the heldout trials.
    pub synth: SynthSpec,
    #[serde(default)]
    pub fit: FitSpec,
}

/// How models are fitted and scored on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSpec {
    /// Trailing trials held out for scoring.
    pub heldout: usize,
    pub sampler: SamplerConfig,
    /// Depths of the fitted mGPs. GP and hGP baselines are matched to the first.
    pub levels: Vec<usize>,
    /// Coefficient rule for the fitted mGPs. On simulated data it defaults to
    /// the mismatched third-of-variance rule with the generator's bandwidth.
    pub inference: Option<BaselineSpec>,
    pub baselines: bool,
    pub window: Option<Window>,
    pub histogram_bins: usize,
}

impl Default for FitSpec {
    fn default() -> Self {
        FitSpec {
            heldout: 10,
            sampler: SamplerConfig::default(),
            levels: vec![5],
            inference: None,
            baselines: true,
            window: None,
            histogram_bins: 50,
        }
    }
}

impl FitSpec {
    /// Checks the spec against a dataset of `trials` trials of length `n`.
    pub fn validate(&self, n: usize, trials: usize) -> Result<()> {
        self.sampler.validate()?;
        if self.heldout == 0 || self.heldout + 2 > trials {
            return Err(MgpError::Config(format!(
                "{} heldout trials leave fewer than two of {trials} for training",
                self.heldout
            )));
        }
        if self.levels.is_empty() || self.levels.contains(&0) {
            return Err(MgpError::Config(
                "levels must be a nonempty list of depths >= 1".into(),
            ));
        }
        if self.histogram_bins == 0 {
            return Err(MgpError::Config("histogram needs at least one bin".into()));
        }
        if let Some(w) = &self.window {
            w.check(n).map_err(|e| MgpError::Config(e.to_string()))?;
        }
        if let Some(inf) = &self.inference {
            if inf.kind != ModelKind::Mgp {
                return Err(MgpError::Config(
                    "inference rule must be of kind mGP".into(),
                ));
            }
            inf.validate()?;
        }
        Ok(())
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.fit.validate(self.synth.n, self.synth.trials)
    }

    pub fn inference_rule(&self) -> BaselineSpec {
        self.fit.inference.clone().unwrap_or_else(|| {
            BaselineSpec::mismatched_mgp(self.synth.theta.kappa, self.synth.theta.bandwidth_mode)
        })
    }
}

/// Scores of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub name: String,
    pub kind: ModelKind,
    pub levels: usize,
    pub heldout_log_likelihood: Vec<f64>,
    pub heldout_mean: f64,
    pub heldout_se: f64,
    /// Against the generating parent function, when known.
    pub f0_rmse: Option<f64>,
    pub predictive_mse: Option<Vec<f64>>,
    pub mean_predictive_mse: Option<f64>,
    pub map_level1_cut: Option<f64>,
    /// Number of locations left of the MAP level-1 cut.
    pub map_level1_index: Option<usize>,
    pub map_log_likelihood: Option<f64>,
    pub true_tree_log_likelihood: Option<f64>,
    pub greedy_tree_log_likelihood: Option<f64>,
    pub acceptance_rate: Option<f64>,
    pub distinct_trees: usize,
}

/// Percent decrease of a model's forecast MSE relative to a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseComparison {
    pub model: String,
    pub baseline: String,
    pub mean_of_ratios: f64,
    pub ratio_of_means: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seed: u64,
    pub n: usize,
    pub training_trials: usize,
    pub heldout_trials: usize,
    pub sigma_hat2: f64,
    pub true_level1_cut: Option<f64>,
    pub true_level1_index: Option<usize>,
    pub models: Vec<ModelMetrics>,
    pub mse_comparisons: Vec<MseComparison>,
}

impl MetricReport {
    pub fn model(&self, name: &str) -> Option<&ModelMetrics> {
        self.models.iter().find(|m| m.name == name)
    }
}

/// Sampler output for one fitted depth.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedMgp {
    pub levels: usize,
    pub chains: Vec<ChainOutput>,
    pub map: PosteriorSample,
    pub greedy_tree: PartitionTree,
    pub level1_histogram: Histogram,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: MetricReport,
    pub data: TrialSet,
    pub truth: Option<Truth>,
    pub fits: Vec<FittedMgp>,
    pub true_correlation: Option<DMatrix<f64>>,
    pub empirical_correlation: DMatrix<f64>,
}

pub fn mgp_name(levels: usize) -> String {
    format!("mGP(L={levels})")
}

fn gap_index(locs: &[f64], z: f64) -> usize {
    locs.partition_point(|&x| x < z)
}

fn level1_cut(tree: &PartitionTree) -> Option<f64> {
    tree.cuts_at_level(1).first().copied()
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn metrics(
    name: String,
    kind: ModelKind,
    levels: usize,
    ev: &Evaluation,
    heldout: &[DVector<f64>],
    truth: Option<&Truth>,
    distinct_trees: usize,
) -> ModelMetrics {
    let (heldout_mean, heldout_se) = mean_se(&ev.heldout_log_likelihood);
    let predictive_mse: Option<Vec<f64>> = ev
        .windows
        .as_ref()
        .map(|ws| ws.iter().zip(heldout).map(|(w, y)| w.mse(y)).collect());
    ModelMetrics {
        name,
        kind,
        levels,
        heldout_log_likelihood: ev.heldout_log_likelihood.clone(),
        heldout_mean,
        heldout_se,
        f0_rmse: truth.map(|t| rmse(&ev.parent_mean, &t.f0)),
        mean_predictive_mse: predictive_mse.as_ref().map(|m| mean_se(m).0),
        predictive_mse,
        map_level1_cut: None,
        map_level1_index: None,
        map_log_likelihood: None,
        true_tree_log_likelihood: None,
        greedy_tree_log_likelihood: None,
        acceptance_rate: None,
        distinct_trees,
    }
}

/// Simulates a dataset and runs [`run_experiment`] on it.
pub fn run_synthetic_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let (data, truth) = sample_dataset(&spec.synth)?;
    let mut fit = spec.fit.clone();
    fit.inference = Some(spec.inference_rule());
    let mut out = run_experiment(data, spec.synth.interval(), Some(truth), &fit)?;
    out.report.seed = spec.synth.seed;
    Ok(out)
}

/// Fits an mGP per requested depth plus the GP and hGP baselines on the
/// leading trials of `data`, and scores all of them on the trailing
/// `fit.heldout` trials. `fit.inference` is required.
pub fn run_experiment(
    data: TrialSet,
    domain: Interval,
    truth: Option<Truth>,
    fit: &FitSpec,
) -> Result<ExperimentOutput> {
    fit.validate(data.n(), data.num_trials())?;
    let rule = fit.inference.clone().ok_or_else(|| {
        MgpError::Config("an inference rule is required for a dataset without a generator".into())
    })?;
    let j = data.num_trials();
    let train = data.select(0..j - fit.heldout)?;
    let heldout: Vec<DVector<f64>> = (j - fit.heldout..j).map(|t| data.trial(t)).collect();
    let locs = train.locs().to_vec();
    let s2 = train.mean_trial_variance()?;
    let cost = empirical_cost_matrix(&train)?;
    let prior = PartitionPrior::uniform(domain)?;
    let window = fit.window;
    let truth_ref = truth.as_ref();

    let mut models = Vec::new();
    let mut fits = Vec::new();
    for &levels in &fit.levels {
        let theta = rule.hyperparams(s2, levels)?;
        let post = TreePosterior::new(train.clone(), cost.clone(), prior.clone(), theta.clone())?;
        log::info!(
            "fitting {} on {} training trials",
            mgp_name(levels),
            train.num_trials()
        );
        let chains = run_chains(&post, &fit.sampler)?;
        let samples = pooled_samples(&chains);
        let map = map_partition(&samples)?.clone();
        let model = PredictiveModel::from_samples(&samples, theta.clone())?;
        let ev = model.evaluate(&train, &heldout, window)?;
        let mut m = metrics(
            mgp_name(levels),
            ModelKind::Mgp,
            levels,
            &ev,
            &heldout,
            truth_ref,
            model.components().len(),
        );
        m.map_level1_cut = level1_cut(&map.tree);
        m.map_level1_index = m.map_level1_cut.map(|z| gap_index(&locs, z));
        m.map_log_likelihood = Some(map.log_likelihood);
        let greedy_tree = greedy_ncut_tree(&cost, levels, &locs, domain)?;
        m.greedy_tree_log_likelihood =
            Some(multi_trial_log_marginal(&train, &greedy_tree, &theta)?);
        if let Some(t) = truth_ref.filter(|t| t.tree.depth() == levels) {
            m.true_tree_log_likelihood = Some(multi_trial_log_marginal(&train, &t.tree, &theta)?);
        }
        let accepted: usize = chains.iter().map(|c| c.accepted).sum();
        let iterations: usize = chains.iter().map(|c| c.trace.len()).sum();
        m.acceptance_rate = Some(accepted as f64 / iterations as f64);
        models.push(m);
        let level1_histogram = changepoint_histogram(&samples, 1, fit.histogram_bins, domain)?;
        fits.push(FittedMgp {
            levels,
            chains,
            map,
            greedy_tree,
            level1_histogram,
        });
    }

    if fit.baselines {
        let reference = fit.levels[0];
        let gp = BaselineSpec::gp_matched_to(&rule, reference).hyperparams(s2, 1)?;
        let hgp = BaselineSpec::hgp_matched_to(&rule, reference).hyperparams(s2, 2)?;
        for (name, kind, tree, theta) in [
            ("GP", ModelKind::Gp, gp_tree(domain), gp),
            ("hGP", ModelKind::Hgp, hgp_tree(domain), hgp),
        ] {
            let levels = tree.depth();
            let ev = PredictiveModel::single(tree, theta).evaluate(&train, &heldout, window)?;
            models.push(metrics(
                name.to_string(),
                kind,
                levels,
                &ev,
                &heldout,
                truth_ref,
                1,
            ));
        }
    }

    let mut mse_comparisons = Vec::new();
    for m in models.iter().filter(|m| m.kind == ModelKind::Mgp) {
        for b in models.iter().filter(|b| b.kind != ModelKind::Mgp) {
            if let (Some(mm), Some(bm)) = (&m.predictive_mse, &b.predictive_mse) {
                let ratios: Vec<f64> = mm
                    .iter()
                    .zip(bm)
                    .map(|(a, b)| 100.0 * (1.0 - a / b))
                    .collect();
                let mean_m = mean_se(mm).0;
                let mean_b = mean_se(bm).0;
                mse_comparisons.push(MseComparison {
                    model: m.name.clone(),
                    baseline: b.name.clone(),
                    mean_of_ratios: mean_se(&ratios).0,
                    ratio_of_means: 100.0 * (1.0 - mean_m / mean_b),
                });
            }
        }
    }

    let true_level1_cut = truth_ref.and_then(|t| level1_cut(&t.tree));
    let report = MetricReport {
        seed: fit.sampler.seed,
        n: data.n(),
        training_trials: train.num_trials(),
        heldout_trials: fit.heldout,
        sigma_hat2: s2,
        true_level1_cut,
        true_level1_index: true_level1_cut.map(|z| gap_index(&locs, z)),
        models,
        mse_comparisons,
    };
    let true_correlation = match truth_ref {
        Some(t) => Some(true_correlation_matrix(&t.tree, &t.theta, &locs)?),
        None => None,
    };
    Ok(ExperimentOutput {
        true_correlation,
        empirical_correlation: cost.matrix().clone(),
        report,
        data,
        truth,
        fits,
    })
}
