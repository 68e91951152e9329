//! Squared-exponential kernels and the partition-dependent covariance.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MgpError, Result};
use crate::partition::{level_offset, Interval, PartitionTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthMode {
    /// `kappa / |set|^2`: every child is locally as smooth as its parent.
    #[default]
    Fractal,
    /// `kappa` on every set.
    Fixed,
}

/// Per-level scales `d`, base bandwidth `kappa` and nugget `sigma2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub d: Vec<f64>,
    pub kappa: f64,
    pub sigma2: f64,
    #[serde(default)]
    pub bandwidth_mode: BandwidthMode,
}

impl Hyperparams {
    pub fn new(
        d: Vec<f64>,
        kappa: f64,
        sigma2: f64,
        bandwidth_mode: BandwidthMode,
    ) -> Result<Self> {
        let h = Hyperparams {
            d,
            kappa,
            sigma2,
            bandwidth_mode,
        };
        h.validate()?;
        Ok(h)
    }

    /// Checks ranges. Warns (does not fail) when the level scales below the
    /// root are not square-summable below one.
    pub fn validate(&self) -> Result<()> {
        if self.d.is_empty() {
            return Err(MgpError::InvalidInput(
                "at least one level scale is required".into(),
            ));
        }
        if self.d.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(MgpError::InvalidInput(format!(
                "scales must be >= 0: {:?}",
                self.d
            )));
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(MgpError::InvalidInput(format!(
                "kappa must be > 0, got {}",
                self.kappa
            )));
        }
        if !(self.sigma2.is_finite() && self.sigma2 >= 0.0) {
            return Err(MgpError::InvalidInput(format!(
                "sigma2 must be >= 0, got {}",
                self.sigma2
            )));
        }
        let tail: f64 = self.d.iter().skip(1).map(|d| d * d).sum();
        if tail >= 1.0 {
            log::warn!("sum of squared level scales below the root is {tail:.3} >= 1");
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.d.len()
    }

    pub(crate) fn check_tree(&self, tree: &PartitionTree) -> Result<()> {
        if tree.depth() != self.d.len() {
            return Err(MgpError::InvalidInput(format!(
                "tree has {} levels but {} scales were given",
                tree.depth(),
                self.d.len()
            )));
        }
        Ok(())
    }

    /// Total marginal variance of one observation.
    pub fn total_variance(&self) -> f64 {
        self.sigma2 + self.d.iter().sum::<f64>()
    }
}

/// `d * exp(-kappa_eff * (x - y)^2)`.
pub fn sq_exp(x: f64, y: f64, d: f64, kappa_eff: f64) -> f64 {
    let r = x - y;
    d * (-kappa_eff * r * r).exp()
}

/// Bandwidth used on `set`.
pub fn effective_bandwidth(kappa: f64, set: Interval, mode: BandwidthMode) -> Result<f64> {
    let len = set.length();
    if !(len > 0.0) {
        return Err(MgpError::DegenerateSet(len));
    }
    Ok(match mode {
        BandwidthMode::Fractal => kappa / (len * len),
        BandwidthMode::Fixed => kappa,
    })
}

/// Adds the level-`level` kernel blocks to `out` for ascending locations.
pub(crate) fn add_level_sorted(
    out: &mut DMatrix<f64>,
    locs: &[f64],
    tree: &PartitionTree,
    theta: &Hyperparams,
    level: usize,
    segments: &[Range<usize>],
) -> Result<()> {
    let d = theta.d[level];
    if d == 0.0 {
        return Ok(());
    }
    let start = level_offset(level);
    for node in start..start + (1usize << level) {
        let seg = segments[node].clone();
        if seg.is_empty() {
            continue;
        }
        let k = effective_bandwidth(theta.kappa, tree.set(node), theta.bandwidth_mode)?;
        for j in seg.clone() {
            out[(j, j)] += d;
            for i in (j + 1)..seg.end {
                let v = sq_exp(locs[i], locs[j], d, k);
                out[(i, j)] += v;
                out[(j, i)] += v;
            }
        }
    }
    Ok(())
}

fn check_locations(locs: &[f64], tree: &PartitionTree) -> Result<()> {
    let dom = tree.domain();
    match locs.iter().find(|&&x| !(x >= dom.lo && x <= dom.hi)) {
        Some(&x) => Err(MgpError::Domain {
            x,
            lo: dom.lo,
            hi: dom.hi,
        }),
        None => Ok(()),
    }
}

fn is_ascending(locs: &[f64]) -> bool {
    locs.windows(2).all(|w| w[0] <= w[1])
}

/// Level-specific covariance `K_l`: the level kernel between locations that
/// share a level-`level` set and exactly zero otherwise.
pub fn level_cov(
    locs: &[f64],
    tree: &PartitionTree,
    theta: &Hyperparams,
    level: usize,
) -> Result<DMatrix<f64>> {
    theta.check_tree(tree)?;
    check_locations(locs, tree)?;
    if level >= tree.depth() {
        return Err(MgpError::Level {
            level,
            depth: tree.depth(),
        });
    }
    let n = locs.len();
    let mut k = DMatrix::zeros(n, n);
    if is_ascending(locs) {
        add_level_sorted(&mut k, locs, tree, theta, level, &tree.segments(locs))?;
        return Ok(k);
    }
    let d = theta.d[level];
    if d == 0.0 {
        return Ok(k);
    }
    let members: Vec<usize> = locs
        .iter()
        .map(|&x| tree.set_index(level, x))
        .collect::<Result<_>>()?;
    let mut bandwidth = vec![None; 1usize << level];
    for j in 0..n {
        let r = members[j];
        let kappa = match bandwidth[r] {
            Some(v) => v,
            None => {
                let v = effective_bandwidth(
                    theta.kappa,
                    tree.level_set(level, r),
                    theta.bandwidth_mode,
                )?;
                bandwidth[r] = Some(v);
                v
            }
        };
        k[(j, j)] = d;
        for i in (j + 1)..n {
            if members[i] == r {
                let v = sq_exp(locs[i], locs[j], d, kappa);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
    }
    Ok(k)
}

/// `sigma2 * I + sum_{l in levels} K_l`.
fn cov_over_levels(
    locs: &[f64],
    tree: &PartitionTree,
    theta: &Hyperparams,
    levels: Range<usize>,
    nugget: f64,
) -> Result<DMatrix<f64>> {
    theta.check_tree(tree)?;
    check_locations(locs, tree)?;
    let n = locs.len();
    let mut out = DMatrix::from_diagonal_element(n, n, nugget);
    if is_ascending(locs) {
        let segs = tree.segments(locs);
        for level in levels {
            add_level_sorted(&mut out, locs, tree, theta, level, &segs)?;
        }
    } else {
        for level in levels {
            out += level_cov(locs, tree, theta, level)?;
        }
    }
    Ok(out)
}

/// Marginal covariance of one trial, `sigma2 * I + sum_l K_l`.
pub fn total_cov(locs: &[f64], tree: &PartitionTree, theta: &Hyperparams) -> Result<DMatrix<f64>> {
    cov_over_levels(locs, tree, theta, 0..tree.depth(), theta.sigma2)
}

/// Trial covariance given the parent function, `sigma2 * I + sum_{l >= 1} K_l`.
pub fn trial_cov(locs: &[f64], tree: &PartitionTree, theta: &Hyperparams) -> Result<DMatrix<f64>> {
    cov_over_levels(locs, tree, theta, 1..tree.depth(), theta.sigma2)
}

/// Residual covariance below `level`, `sigma2 * I + sum_{l > level} K_l`.
pub fn residual_cov(
    locs: &[f64],
    tree: &PartitionTree,
    theta: &Hyperparams,
    level: usize,
) -> Result<DMatrix<f64>> {
    if level >= tree.depth() {
        return Err(MgpError::Level {
            level,
            depth: tree.depth(),
        });
    }
    cov_over_levels(locs, tree, theta, level + 1..tree.depth(), theta.sigma2)
}

/// Closed-form correlation of two observations under the induced GP.
pub fn mgp_correlation(x: f64, y: f64, tree: &PartitionTree, theta: &Hyperparams) -> Result<f64> {
    theta.check_tree(tree)?;
    let shared = tree.deepest_shared_level(x, y)?;
    if x == y {
        return Ok(1.0);
    }
    let denom = theta.total_variance();
    if denom == 0.0 {
        return Ok(0.0);
    }
    let mut num = 0.0;
    for level in 0..=shared {
        let d = theta.d[level];
        if d == 0.0 {
            continue;
        }
        let set = tree.level_set(level, tree.set_index(level, x)?);
        let k = effective_bandwidth(theta.kappa, set, theta.bandwidth_mode)?;
        num += sq_exp(x, y, d, k);
    }
    Ok(num / denom)
}

/// Pairwise closed-form correlations with unit diagonal.
pub fn correlation_matrix(
    locs: &[f64],
    tree: &PartitionTree,
    theta: &Hyperparams,
) -> Result<DMatrix<f64>> {
    let n = locs.len();
    let mut c = DMatrix::identity(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = mgp_correlation(locs[i], locs[j], tree, theta)?;
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

/// Normalizes a covariance matrix to a correlation matrix.
pub fn cov_to_corr(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let sd: Vec<f64> = cov.diagonal().iter().map(|v| v.sqrt()).collect();
    DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| {
        cov[(i, j)] / (sd[i] * sd[j])
    })
}
