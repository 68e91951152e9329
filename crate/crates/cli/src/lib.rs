//! Command-line front end: simulate, segment, fit, predict and evaluate.
//!
//! Every command writes its artifacts plus a `manifest.json` into the output
//! directory. Results depend only on the config, the inputs and the seed.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mgp::error::ErrorClass;
use mgp::eval::{
    changepoint_histogram, grid_optimize, mgp_name, predict_window, run_experiment,
    run_synthetic_experiment, BaselineGrid, BaselineSpec, ExperimentOutput, ExperimentSpec,
    FitSpec, PredictiveModel, Window,
};
use mgp::io;
use mgp::kernels::Hyperparams;
use mgp::likelihood::TrialSet;
use mgp::mcmc::{
    importance_sample, map_partition, pooled_samples, run_chains, PosteriorSample, TreePosterior,
};
use mgp::ncut::{empirical_cost_matrix, greedy_ncut_tree};
use mgp::partition::{Interval, PartitionPrior};
use mgp::synth::{sample_dataset, SynthSpec};
use mgp::{MgpError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "mgp",
    version,
    about = "Multiresolution Gaussian processes for multi-trial functional data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; all cores when unset.
    #[arg(long, global = true, env = "MGP_THREADS")]
    pub threads: Option<usize>,

    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Metropolis-Hastings chains.
    Mh,
    /// Importance sampling from the cut proposal.
    Is,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset from the config's `synth` section.
    Simulate,
    /// Greedy normalized-cut segmentation of a dataset.
    NcutSegment {
        /// Trial CSV; overrides the config's `data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Tree depth; defaults to the first entry of `fit.levels`.
        #[arg(long)]
        levels: Option<usize>,
    },
    /// Sample partition trees from the posterior.
    Fit {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "mh")]
        method: Method,
    },
    /// Forecast a window of new trials, averaged over posterior trees.
    Predict {
        /// Training trials the samples were fitted to.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Samples written by `fit`.
        #[arg(long)]
        samples: PathBuf,
        /// Hyperparameters written by `fit`; the config's when absent.
        #[arg(long)]
        hyperparams: Option<PathBuf>,
        /// Trials whose first `tau - 1` values are observed.
        #[arg(long)]
        target: Option<PathBuf>,
        /// 1-based index of the first predicted value.
        #[arg(long)]
        tau: usize,
        /// Values predicted after `tau`.
        #[arg(long)]
        horizon: usize,
    },
    /// Fit and score mGP, GP and hGP models on simulated or given data.
    Evaluate,
}

/// Shared configuration for all subcommands. Relative paths are resolved
/// against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synth: Option<SynthSpec>,
    /// Trial CSV.
    pub data: Option<PathBuf>,
    /// Domain of the cut points; the observation span when absent.
    pub domain: Option<[f64; 2]>,
    /// Fixed hyperparameters for `fit` and `predict`.
    pub hyperparams: Option<Hyperparams>,
    /// Searched around `fit.inference` by `fit` when no hyperparameters are given.
    pub grid: Option<BaselineGrid>,
    /// Cut-point density; uniform over the domain when absent.
    pub prior: Option<PartitionPrior>,
    pub fit: FitSpec,
    /// Importance-sampling draws.
    pub draws: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: None,
            data: None,
            domain: None,
            hyperparams: None,
            grid: None,
            prior: None,
            fit: FitSpec::default(),
            draws: 10_000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| MgpError::Config(format!("invalid config: {e}")))?;
        if let Some(p) = &cfg.data {
            if p.is_relative() {
                cfg.data = Some(base.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if let Some(p) = &self.prior {
            PartitionPrior::piecewise(p.edges().to_vec(), p.densities().to_vec())
                .map_err(|e| MgpError::Config(e.to_string()))?;
        }
        if let Some(t) = &self.hyperparams {
            t.validate().map_err(|e| MgpError::Config(e.to_string()))?;
        }
        if let Some([lo, hi]) = self.domain {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(MgpError::Config(format!("empty domain [{lo}, {hi}]")));
            }
        }
        self.fit
            .sampler
            .validate()
            .map_err(|e| MgpError::Config(e.to_string()))?;
        if self.draws == 0 {
            return Err(MgpError::Config("draws must be positive".into()));
        }
        Ok(())
    }

    /// Coefficient rule for fitted mGPs: `fit.inference`, or the mismatched
    /// rule with the generator's bandwidth.
    fn inference_rule(&self) -> Result<BaselineSpec> {
        if let Some(r) = &self.fit.inference {
            return Ok(r.clone());
        }
        match &self.synth {
            Some(s) => Ok(BaselineSpec::mismatched_mgp(
                s.theta.kappa,
                s.theta.bandwidth_mode,
            )),
            None => Err(MgpError::Config(
                "set `hyperparams` or `fit.inference`".into(),
            )),
        }
    }
}

/// Process exit code for an error: 2 config, 3 data, 4 numerical.
pub fn exit_code(e: &MgpError) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    version: String,
    seed: Option<u64>,
    config_sha256: Option<String>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Output directory plus the bookkeeping that ends up in the manifest.
struct Run {
    out_dir: PathBuf,
    command: &'static str,
    seed: Option<u64>,
    config_sha256: Option<String>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    fn file(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.outputs.push(name.to_string());
        Ok(BufWriter::new(File::create(self.out_dir.join(name))?))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut w = self.file(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        self.inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn finish(mut self) -> Result<Vec<PathBuf>> {
        let manifest = Manifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config_sha256: self.config_sha256.clone(),
            inputs: std::mem::take(&mut self.inputs),
            outputs: self.outputs.clone(),
        };
        self.json("manifest.json", &manifest)?;
        Ok(self.outputs.iter().map(|o| self.out_dir.join(o)).collect())
    }
}

/// A loaded config together with the global flags.
pub struct Context {
    pub config: ExperimentConfig,
    config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
}

impl Context {
    pub fn new(config_path: Option<&Path>, seed: Option<u64>, out_dir: &Path) -> Result<Self> {
        let (config, config_sha256) = match config_path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    MgpError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                let base = p.parent().unwrap_or(Path::new("."));
                (
                    ExperimentConfig::from_json(&text, base)?,
                    Some(sha256_hex(text.as_bytes())),
                )
            }
            None => (ExperimentConfig::default(), None),
        };
        Ok(Context {
            config,
            config_sha256,
            seed,
            out_dir: out_dir.to_path_buf(),
        })
    }

    fn run(&self, command: &'static str, seed: Option<u64>) -> Result<Run> {
        fs::create_dir_all(&self.out_dir)?;
        Ok(Run {
            out_dir: self.out_dir.clone(),
            command,
            seed,
            config_sha256: self.config_sha256.clone(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    fn data_path(&self, flag: Option<&Path>) -> Result<PathBuf> {
        let path = flag
            .map(Path::to_path_buf)
            .or_else(|| self.config.data.clone())
            .ok_or_else(|| {
                MgpError::Config("no dataset: pass --data or set `data` in the config".into())
            })?;
        if !path.is_file() {
            return Err(MgpError::Config(format!(
                "dataset {} not found",
                path.display()
            )));
        }
        Ok(path)
    }

    fn domain(&self, data: &TrialSet) -> Interval {
        match self.config.domain {
            Some([lo, hi]) => Interval::new(lo, hi),
            None => Interval::new(data.locs()[0], data.locs()[data.n() - 1]),
        }
    }

    fn prior(&self, domain: Interval) -> Result<PartitionPrior> {
        match &self.config.prior {
            Some(p) => Ok(p.clone()),
            None => PartitionPrior::uniform(domain),
        }
    }
}

pub fn cmd_simulate(ctx: &Context) -> Result<Vec<PathBuf>> {
    let mut spec = ctx
        .config
        .synth
        .clone()
        .ok_or_else(|| MgpError::Config("simulate needs a `synth` section".into()))?;
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    let (data, truth) = sample_dataset(&spec)?;
    let mut run = ctx.run("simulate", Some(spec.seed))?;
    io::write_trials(run.file("trials.csv")?, &data)?;
    run.json("truth.json", &truth)?;
    run.finish()
}

pub fn cmd_ncut(ctx: &Context, data: Option<&Path>, levels: Option<usize>) -> Result<Vec<PathBuf>> {
    let path = ctx.data_path(data)?;
    let data = io::load_trials(&path)?;
    let levels = levels.unwrap_or(ctx.config.fit.levels[0]);
    if levels == 0 {
        return Err(MgpError::Config("levels must be at least 1".into()));
    }
    let domain = ctx.domain(&data);
    let cost = empirical_cost_matrix(&data)?;
    let tree = greedy_ncut_tree(&cost, levels, data.locs(), domain)?;
    let mut run = ctx.run("ncut-segment", None)?;
    run.input(&path)?;
    run.json("greedy_tree.json", &tree)?;
    io::write_boundaries(run.file("boundaries.csv")?, &tree)?;
    run.finish()
}

/// Hyperparameters used by `fit`: the config's own, a grid search around the
/// inference rule on the greedy tree, or the inference rule itself.
fn fit_hyperparams(ctx: &Context, data: &TrialSet, domain: Interval) -> Result<Hyperparams> {
    if let Some(t) = &ctx.config.hyperparams {
        return Ok(t.clone());
    }
    let rule = ctx.config.inference_rule()?;
    let levels = ctx.config.fit.levels[0];
    let s2 = data.mean_trial_variance()?;
    let rule = match &ctx.config.grid {
        Some(grid) => {
            let tree =
                greedy_ncut_tree(&empirical_cost_matrix(data)?, levels, data.locs(), domain)?;
            let best = grid_optimize(data, &rule, grid, domain, &[tree])?;
            log::info!(
                "grid search picked {:?} with objective {:.3}",
                best.best,
                best.objective
            );
            best.best
        }
        None => rule,
    };
    rule.hyperparams(s2, levels)
}

#[derive(Debug, Serialize)]
struct FitSummary {
    method: Method,
    levels: usize,
    samples: usize,
    distinct_trees: usize,
    acceptance_rate: Option<f64>,
    effective_sample_size: Option<f64>,
    map_log_likelihood: f64,
}

pub fn cmd_fit(ctx: &Context, data: Option<&Path>, method: Method) -> Result<Vec<PathBuf>> {
    let path = ctx.data_path(data)?;
    let data = io::load_trials(&path)?;
    let domain = ctx.domain(&data);
    let theta = fit_hyperparams(ctx, &data, domain)?;
    let cost = empirical_cost_matrix(&data)?;
    let post = TreePosterior::new(data, cost, ctx.prior(domain)?, theta.clone())?;
    let mut sampler = ctx.config.fit.sampler.clone();
    if let Some(s) = ctx.seed {
        sampler.seed = s;
    }
    let mut run = ctx.run("fit", Some(sampler.seed))?;
    run.input(&path)?;
    let (samples, acceptance_rate, ess): (Vec<PosteriorSample>, _, _) = match method {
        Method::Mh => {
            log::info!(
                "running {} chains of {} iterations at depth {}",
                sampler.chains,
                sampler.iterations,
                theta.levels()
            );
            let chains = run_chains(&post, &sampler)?;
            io::write_trace(run.file("trace.csv")?, &chains)?;
            let accepted: usize = chains.iter().map(|c| c.accepted).sum();
            let total: usize = chains.iter().map(|c| c.trace.len()).sum();
            (
                pooled_samples(&chains),
                Some(accepted as f64 / total as f64),
                None,
            )
        }
        Method::Is => {
            log::info!(
                "drawing {} importance samples at depth {}",
                ctx.config.draws,
                theta.levels()
            );
            let w = importance_sample(&post, ctx.config.draws, sampler.seed)?;
            (w.samples, None, Some(w.ess))
        }
    };
    log::info!("kept {} samples", samples.len());
    let map = map_partition(&samples)?;
    io::write_samples(run.file("samples.jsonl")?, &samples)?;
    run.json("map_tree.json", &map.tree)?;
    run.json("hyperparams.json", &theta)?;
    if theta.levels() > 1 {
        let h = changepoint_histogram(&samples, 1, ctx.config.fit.histogram_bins, domain)?;
        io::write_histogram(run.file("histogram_level1.csv")?, &h)?;
    }
    let distinct_trees = PredictiveModel::from_samples(&samples, theta.clone())?
        .components()
        .len();
    let summary = FitSummary {
        method,
        levels: theta.levels(),
        samples: samples.len(),
        distinct_trees,
        acceptance_rate,
        effective_sample_size: ess,
        map_log_likelihood: map.log_likelihood,
    };
    run.json("fit_summary.json", &summary)?;
    run.finish()
}

pub struct PredictArgs<'a> {
    pub data: Option<&'a Path>,
    pub samples: &'a Path,
    pub hyperparams: Option<&'a Path>,
    pub target: Option<&'a Path>,
    pub tau: usize,
    pub horizon: usize,
}

pub fn cmd_predict(ctx: &Context, args: &PredictArgs) -> Result<Vec<PathBuf>> {
    let path = ctx.data_path(args.data)?;
    let train = io::load_trials(&path)?;
    let window = Window::new(args.tau, args.horizon, train.n())
        .map_err(|e| MgpError::Config(e.to_string()))?;
    let theta: Hyperparams = match (args.hyperparams, &ctx.config.hyperparams) {
        (Some(p), _) => {
            let theta: Hyperparams = serde_json::from_slice(&fs::read(p)?)?;
            theta.validate()?;
            theta
        }
        (None, Some(t)) => t.clone(),
        (None, None) => {
            return Err(MgpError::Config(
                "pass --hyperparams or set `hyperparams`".into(),
            ))
        }
    };
    let samples = io::read_samples(File::open(args.samples)?)?;
    if samples.iter().any(|s| s.tree.depth() != theta.levels()) {
        return Err(MgpError::InvalidInput(format!(
            "samples do not all have {} levels",
            theta.levels()
        )));
    }
    let targets: Vec<DVector<f64>> = match args.target {
        Some(t) => {
            let target = io::load_trials(t)?;
            if target.locs() != train.locs() {
                return Err(MgpError::InvalidInput(
                    "target locations differ from the training data".into(),
                ));
            }
            (0..target.num_trials()).map(|j| target.trial(j)).collect()
        }
        None if args.tau == 1 => vec![DVector::zeros(train.n())],
        None => return Err(MgpError::Config("--target is required when tau > 1".into())),
    };
    let model = PredictiveModel::from_samples(&samples, theta)?;
    let preds = targets
        .iter()
        .map(|y| predict_window(&model, &train, y, window))
        .collect::<Result<Vec<_>>>()?;
    let mut run = ctx.run("predict", None)?;
    run.input(&path)?;
    run.input(args.samples)?;
    if let Some(t) = args.target {
        run.input(t)?;
    }
    io::write_predictions(run.file("predictions.csv")?, &preds, train.locs())?;
    run.finish()
}

pub fn cmd_evaluate(ctx: &Context) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.config;
    let mut fit = cfg.fit.clone();
    if let Some(s) = ctx.seed {
        fit.sampler.seed = s;
    }
    let mut input = None;
    let out: ExperimentOutput = match (&cfg.synth, &cfg.data) {
        (Some(synth), None) => {
            let mut synth = synth.clone();
            if let Some(s) = ctx.seed {
                synth.seed = s;
            }
            run_synthetic_experiment(&ExperimentSpec {
                synth,
                fit: fit.clone(),
            })?
        }
        (None, Some(_)) => {
            let path = ctx.data_path(None)?;
            let data = io::load_trials(&path)?;
            input = Some(path);
            let domain = ctx.domain(&data);
            if fit.inference.is_none() {
                return Err(MgpError::Config(
                    "evaluating a dataset needs `fit.inference`".into(),
                ));
            }
            run_experiment(data, domain, None, &fit)?
        }
        _ => {
            return Err(MgpError::Config(
                "evaluate needs exactly one of `synth` and `data`".into(),
            ))
        }
    };
    let mut run = ctx.run("evaluate", Some(out.report.seed))?;
    if let Some(p) = &input {
        run.input(p)?;
    }
    run.json("report.json", &out.report)?;
    io::write_trials(run.file("trials.csv")?, &out.data)?;
    io::write_matrix(
        run.file("correlation_empirical.csv")?,
        &out.empirical_correlation,
    )?;
    if let Some(truth) = &out.truth {
        run.json("truth.json", truth)?;
    }
    if let Some(c) = &out.true_correlation {
        io::write_matrix(run.file("correlation_true.csv")?, c)?;
    }
    for f in &out.fits {
        let tag = format!("L{}", f.levels);
        io::write_trace(run.file(&format!("trace_{tag}.csv"))?, &f.chains)?;
        run.json(&format!("map_tree_{tag}.json"), &f.map.tree)?;
        run.json(&format!("greedy_tree_{tag}.json"), &f.greedy_tree)?;
        io::write_histogram(
            run.file(&format!("histogram_level1_{tag}.csv"))?,
            &f.level1_histogram,
        )?;
    }
    for m in &out.report.models {
        log::info!(
            "{:<10} heldout log-likelihood {:.2} ± {:.2}",
            m.name,
            m.heldout_mean,
            m.heldout_se
        );
    }
    if let Some(m) = out.report.model(&mgp_name(fit.levels[0])) {
        log::info!(
            "MAP level-1 cut {:?}, truth {:?}",
            m.map_level1_cut,
            out.report.true_level1_cut
        );
    }
    run.finish()
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let ctx = Context::new(cli.config.as_deref(), cli.seed, &cli.out_dir)?;
    let dispatch = || match &cli.command {
        Command::Simulate => cmd_simulate(&ctx),
        Command::NcutSegment { data, levels } => cmd_ncut(&ctx, data.as_deref(), *levels),
        Command::Fit { data, method } => cmd_fit(&ctx, data.as_deref(), *method),
        Command::Predict {
            data,
            samples,
            hyperparams,
            target,
            tau,
            horizon,
        } => cmd_predict(
            &ctx,
            &PredictArgs {
                data: data.as_deref(),
                samples,
                hyperparams: hyperparams.as_deref(),
                target: target.as_deref(),
                tau: *tau,
                horizon: *horizon,
            },
        ),
        Command::Evaluate => cmd_evaluate(&ctx),
    };
    match cli.threads {
        Some(0) => Err(MgpError::Config("--threads must be positive".into())),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| MgpError::Config(e.to_string()))?
            .install(dispatch),
        None => dispatch(),
    }
}
