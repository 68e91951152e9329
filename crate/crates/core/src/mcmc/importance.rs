use rayon::prelude::*;

use super::{chain_rng, PosteriorSample, TreePosterior};
use crate::error::{MgpError, Result};
use crate::linalg::log_sum_exp;

/// Importance-sampled trees with self-normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSamples {
    pub samples: Vec<PosteriorSample>,
    pub ess: f64,
}

/// `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// Draws `draws` independent trees from the proposal and weights each by
/// `p(Y|A) p(A) / q(A)`. Draw `i` uses its own random stream, so the result
/// does not depend on the thread count.
pub fn importance_sample(post: &TreePosterior, draws: usize, seed: u64) -> Result<WeightedSamples> {
    if draws == 0 {
        return Err(MgpError::InvalidInput(
            "at least one importance draw is required".into(),
        ));
    }
    let mut samples: Vec<PosteriorSample> = (0..draws)
        .into_par_iter()
        .map_init(
            || post.proposal().clone(),
            |prop, i| {
                let mut rng = chain_rng(seed, i);
                let (tree, log_proposal) = prop.sample(&mut rng)?;
                Ok(PosteriorSample {
                    log_likelihood: post.log_likelihood(&tree)?,
                    log_prior: post.log_prior(&tree),
                    log_proposal,
                    weight: None,
                    chain: 0,
                    iteration: i,
                    tree,
                })
            },
        )
        .collect::<Result<_>>()?;
    let log_w: Vec<f64> = samples.iter().map(|s| s.score() - s.log_proposal).collect();
    let z = log_sum_exp(&log_w);
    if !z.is_finite() {
        return Err(MgpError::DegeneratePosterior);
    }
    for (s, lw) in samples.iter_mut().zip(&log_w) {
        s.weight = Some((lw - z).exp());
    }
    let weights: Vec<f64> = samples.iter().map(|s| s.mass()).collect();
    Ok(WeightedSamples {
        ess: effective_sample_size(&weights),
        samples,
    })
}
