//! Posterior inference over partition trees.
//!
//! Trees are proposed from the normalized-cut proposal, either whole
//! (global moves) or by redrawing the subtree below one node (local moves),
//! and accepted with the independence-chain Metropolis-Hastings ratio.
//! Importance sampling with the same proposal is also available.

mod cache;
pub mod exact;
mod importance;

use std::ops::Range;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MgpError, Result};
use crate::kernels::Hyperparams;
use crate::likelihood::{MultiTrialEvaluator, TrialSet};
use crate::ncut::{CostMatrix, TreeProposal};
use crate::partition::{internal_node_count, PartitionPrior, PartitionTree};

use cache::LevelCache;
pub use importance::{effective_sample_size, importance_sample, WeightedSamples};

/// Settings for [`run_chains`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    /// Iterations of pure global moves before local moves start;
    /// `iterations / 3` when unset.
    pub global_iterations: Option<usize>,
    /// Extra mass on the root node once local moves start.
    pub global_weight: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            iterations: 3000,
            burn_in: 1000,
            thin: 10,
            chains: 10,
            seed: 0,
            global_iterations: None,
            global_weight: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(MgpError::Config(format!(
                "burn-in {} must be below the iteration count {}",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(MgpError::Config("thinning must be at least 1".into()));
        }
        if self.chains == 0 {
            return Err(MgpError::Config("at least one chain is required".into()));
        }
        if !(0.0..=1.0).contains(&self.global_weight) {
            return Err(MgpError::Config("global weight must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn switch_point(&self) -> usize {
        self.global_iterations.unwrap_or(self.iterations / 3)
    }

    /// Whether iteration `i` (0-based) is kept as a sample.
    pub fn keeps(&self, i: usize) -> bool {
        i >= self.burn_in && (i - self.burn_in) % self.thin == 0
    }

    pub fn samples_per_chain(&self) -> usize {
        (self.burn_in..self.iterations)
            .filter(|&i| self.keeps(i))
            .count()
    }
}

/// One posterior draw with its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub tree: PartitionTree,
    pub log_likelihood: f64,
    pub log_prior: f64,
    pub log_proposal: f64,
    /// Self-normalized importance weight; absent for MCMC draws.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default)]
    pub chain: usize,
    #[serde(default)]
    pub iteration: usize,
}

impl PosteriorSample {
    /// Unnormalized log posterior `log p(Y|A) + log p(A)`.
    pub fn score(&self) -> f64 {
        self.log_likelihood + self.log_prior
    }

    /// Weight used when averaging over samples: the importance weight, or 1.
    pub fn mass(&self) -> f64 {
        self.weight.unwrap_or(1.0)
    }
}

/// Target distribution over trees: data, prior, hyperparameters and the
/// normalized-cut proposal built from a cost matrix.
#[derive(Debug, Clone)]
pub struct TreePosterior {
    data: TrialSet,
    prior: PartitionPrior,
    theta: Hyperparams,
    eval: MultiTrialEvaluator,
    proposal: TreeProposal,
}

impl TreePosterior {
    pub fn new(
        data: TrialSet,
        cost: CostMatrix,
        prior: PartitionPrior,
        theta: Hyperparams,
    ) -> Result<Self> {
        theta.validate()?;
        let proposal = TreeProposal::new(cost, data.locs(), prior.domain(), theta.levels())?;
        let eval = MultiTrialEvaluator::for_data(&data, prior.domain(), &theta)?;
        Ok(TreePosterior {
            data,
            prior,
            theta,
            eval,
            proposal,
        })
    }

    pub fn data(&self) -> &TrialSet {
        &self.data
    }

    pub fn prior(&self) -> &PartitionPrior {
        &self.prior
    }

    pub fn theta(&self) -> &Hyperparams {
        &self.theta
    }

    pub fn depth(&self) -> usize {
        self.theta.levels()
    }

    pub fn proposal(&self) -> &TreeProposal {
        &self.proposal
    }

    /// Multi-trial log marginal of the data under `tree`.
    pub fn log_likelihood(&self, tree: &PartitionTree) -> Result<f64> {
        let segs = tree.segments(self.data.locs());
        let cache = LevelCache::build(self.data.locs(), tree, &segs, &self.theta)?;
        self.eval.log_marginal(cache.sigma())
    }

    pub fn log_prior(&self, tree: &PartitionTree) -> f64 {
        self.prior.log_prior(tree)
    }

    /// Scores `tree` from scratch as a sample.
    pub fn sample_of(&self, tree: PartitionTree) -> Result<PosteriorSample> {
        let log_proposal = self.proposal.clone().log_density(&tree)?;
        Ok(PosteriorSample {
            log_likelihood: self.log_likelihood(&tree)?,
            log_prior: self.log_prior(&tree),
            log_proposal,
            weight: None,
            chain: 0,
            iteration: 0,
            tree,
        })
    }
}

/// Distribution over the internal nodes whose subtree a move redraws.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDist {
    probs: Vec<f64>,
}

impl NodeDist {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.probs.len() == 1 {
            return 0;
        }
        WeightedIndex::new(&self.probs)
            .expect("valid node weights")
            .sample(rng)
    }
}

/// Node-selection distribution at `iteration`: the root alone before the
/// switch point, then `global_weight` on the root mixed with a uniform
/// choice over all internal nodes.
pub fn node_schedule(iteration: usize, config: &SamplerConfig, depth: usize) -> NodeDist {
    let m = internal_node_count(depth).max(1);
    let mut probs = vec![0.0; m];
    if iteration < config.switch_point() || m == 1 {
        probs[0] = 1.0;
    } else {
        let w = config.global_weight;
        for p in probs.iter_mut() {
            *p = (1.0 - w) / m as f64;
        }
        probs[0] += w;
    }
    NodeDist { probs }
}

/// Current tree of a chain with its cached covariance blocks and scores.
#[derive(Debug, Clone)]
pub struct ChainState {
    tree: PartitionTree,
    segs: Vec<Range<usize>>,
    cache: LevelCache,
    log_likelihood: f64,
    log_prior: f64,
}

impl ChainState {
    pub fn new(post: &TreePosterior, tree: PartitionTree) -> Result<Self> {
        let segs = tree.segments(post.data.locs());
        let cache = LevelCache::build(post.data.locs(), &tree, &segs, &post.theta)?;
        let log_likelihood = post.eval.log_marginal(cache.sigma())?;
        let log_prior = post.log_prior(&tree);
        Ok(ChainState {
            tree,
            segs,
            cache,
            log_likelihood,
            log_prior,
        })
    }

    pub fn tree(&self) -> &PartitionTree {
        &self.tree
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn log_prior(&self) -> f64 {
        self.log_prior
    }

    fn to_sample(
        &self,
        proposal: &mut TreeProposal,
        chain: usize,
        iteration: usize,
    ) -> Result<PosteriorSample> {
        Ok(PosteriorSample {
            tree: self.tree.clone(),
            log_likelihood: self.log_likelihood,
            log_prior: self.log_prior,
            log_proposal: proposal.log_density(&self.tree)?,
            weight: None,
            chain,
            iteration,
        })
    }
}

/// Redraws the whole tree from the proposal and applies the MH test.
/// Returns whether the move was accepted.
pub fn global_step<R: Rng + ?Sized>(
    state: &mut ChainState,
    post: &TreePosterior,
    proposal: &mut TreeProposal,
    rng: &mut R,
) -> Result<bool> {
    local_step(state, post, proposal, 0, rng)
}

/// Redraws the cuts at `node` and below and applies the MH test with the
/// ratio restricted to the redrawn cuts. Returns whether it was accepted.
pub fn local_step<R: Rng + ?Sized>(
    state: &mut ChainState,
    post: &TreePosterior,
    proposal: &mut TreeProposal,
    node: usize,
    rng: &mut R,
) -> Result<bool> {
    let (tree, lq_new) = proposal.resample_subtree(&state.tree, node, rng)?;
    let u: f64 = rng.gen();
    if tree == state.tree {
        return Ok(true);
    }
    let log_prior = post.log_prior(&tree);
    if log_prior == f64::NEG_INFINITY {
        return Ok(false);
    }
    let lq_old = proposal.subtree_log_density(&state.tree, node)?;
    let segs = tree.segments(post.data.locs());
    let update = state
        .cache
        .propose(post.data.locs(), &tree, &segs, &post.theta, node)?;
    let log_likelihood = post.eval.log_marginal(update.sigma())?;
    let current = state.log_likelihood + state.log_prior - lq_old;
    let log_r = (log_likelihood + log_prior - lq_new) - current;
    let accept = current == f64::NEG_INFINITY || log_r >= 0.0 || u.ln() < log_r;
    if accept {
        state.cache.commit(update);
        state.tree = tree;
        state.segs = segs;
        state.log_likelihood = log_likelihood;
        state.log_prior = log_prior;
    }
    Ok(accept)
}

/// Output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub samples: Vec<PosteriorSample>,
    /// Log-likelihood of the current tree after every iteration.
    pub trace: Vec<f64>,
    pub accepted: usize,
}

impl ChainOutput {
    pub fn acceptance_rate(&self) -> f64 {
        if self.trace.is_empty() {
            0.0
        } else {
            self.accepted as f64 / self.trace.len() as f64
        }
    }
}

/// Random stream for chain `chain` under master seed `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Runs one chain from a proposal draw.
pub fn run_chain(
    post: &TreePosterior,
    config: &SamplerConfig,
    chain: usize,
) -> Result<ChainOutput> {
    config.validate()?;
    let mut rng = chain_rng(config.seed, chain);
    let mut proposal = post.proposal.clone();
    let (init, _) = proposal.sample(&mut rng)?;
    let mut state = ChainState::new(post, init)?;
    let mut out = ChainOutput {
        samples: Vec::with_capacity(config.samples_per_chain()),
        trace: Vec::with_capacity(config.iterations),
        accepted: 0,
    };
    let depth = post.depth();
    for i in 0..config.iterations {
        let node = node_schedule(i, config, depth).sample(&mut rng);
        if local_step(&mut state, post, &mut proposal, node, &mut rng)? {
            out.accepted += 1;
        }
        out.trace.push(state.log_likelihood);
        if config.keeps(i) {
            out.samples.push(state.to_sample(&mut proposal, chain, i)?);
        }
        if (i + 1) % 500 == 0 {
            log::info!(
                "chain {chain}: iteration {}/{}, log-likelihood {:.3}",
                i + 1,
                config.iterations,
                state.log_likelihood
            );
        }
    }
    Ok(out)
}

/// Runs `config.chains` independent chains in parallel.
pub fn run_chains(post: &TreePosterior, config: &SamplerConfig) -> Result<Vec<ChainOutput>> {
    config.validate()?;
    (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(post, config, c))
        .collect()
}

/// All kept samples of all chains, chain-major.
pub fn pooled_samples(chains: &[ChainOutput]) -> Vec<PosteriorSample> {
    chains
        .iter()
        .flat_map(|c| c.samples.iter().cloned())
        .collect()
}

/// Highest-scoring sample; the first one on ties.
pub fn map_partition(samples: &[PosteriorSample]) -> Result<&PosteriorSample> {
    let mut best: Option<&PosteriorSample> = None;
    for s in samples {
        if best.map_or(true, |b| s.score() > b.score()) {
            best = Some(s);
        }
    }
    best.ok_or_else(|| MgpError::InvalidInput("no samples".into()))
}
