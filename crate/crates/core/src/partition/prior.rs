use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tree::{Interval, PartitionTree};
use crate::error::{MgpError, Result};

/// Piecewise-constant density `F` over the domain for the cut points.
///
/// A tree's prior is the product of the density at each of its cut points,
/// independent of which level a cut sits on. Null cuts contribute no factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPrior {
    edges: Vec<f64>,
    density: Vec<f64>,
}

impl PartitionPrior {
    pub fn uniform(domain: Interval) -> Result<Self> {
        Self::piecewise(vec![domain.lo, domain.hi], vec![1.0 / domain.length()])
    }

    /// `density[i]` applies on `[edges[i], edges[i+1])`; must integrate to one.
    pub fn piecewise(edges: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || density.len() + 1 != edges.len() {
            return Err(MgpError::InvalidPrior(format!(
                "{} edges for {} bins",
                edges.len(),
                density.len()
            )));
        }
        if edges.windows(2).any(|w| !(w[1] > w[0])) || edges.iter().any(|e| !e.is_finite()) {
            return Err(MgpError::InvalidPrior(
                "edges must be finite and increasing".into(),
            ));
        }
        if density.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(MgpError::InvalidPrior(
                "density must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = density
            .iter()
            .zip(edges.windows(2))
            .map(|(d, w)| d * (w[1] - w[0]))
            .sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MgpError::InvalidPrior(format!(
                "density integrates to {total}, not 1"
            )));
        }
        Ok(PartitionPrior { edges, density })
    }

    /// Kernel-smoothed density from weighted anchor points plus a uniform
    /// baseline, discretized onto `bins` equal-width bins and normalized.
    ///
    /// This is the shape used to elicit priors from earlier segmentations:
    /// anchors are cut locations and weights their cut strengths.
    pub fn kernel_smoothed(
        domain: Interval,
        anchors: &[(f64, f64)],
        bandwidth: f64,
        baseline: f64,
        bins: usize,
    ) -> Result<Self> {
        if bins == 0 || !(bandwidth > 0.0) || baseline < 0.0 {
            return Err(MgpError::InvalidPrior(
                "need bins > 0, bandwidth > 0 and baseline >= 0".into(),
            ));
        }
        let width = domain.length() / bins as f64;
        let edges: Vec<f64> = (0..=bins)
            .map(|i| {
                if i == bins {
                    domain.hi
                } else {
                    domain.lo + i as f64 * width
                }
            })
            .collect();
        let mut raw: Vec<f64> = (0..bins)
            .map(|i| {
                let mid = domain.lo + (i as f64 + 0.5) * width;
                baseline
                    + anchors
                        .iter()
                        .map(|&(z, w)| w * (-0.5 * ((mid - z) / bandwidth).powi(2)).exp())
                        .sum::<f64>()
            })
            .collect();
        let total: f64 = raw
            .iter()
            .zip(edges.windows(2))
            .map(|(d, w)| d * (w[1] - w[0]))
            .sum();
        if !(total > 0.0) {
            return Err(MgpError::InvalidPrior(
                "smoothed density has no mass".into(),
            ));
        }
        raw.iter_mut().for_each(|d| *d /= total);
        Self::piecewise(edges, raw)
    }

    pub fn domain(&self) -> Interval {
        Interval::new(self.edges[0], self.edges[self.edges.len() - 1])
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn densities(&self) -> &[f64] {
        &self.density
    }

    /// Density at `z`; zero outside the domain.
    pub fn density(&self, z: f64) -> f64 {
        let last = self.edges.len() - 1;
        if z < self.edges[0] || z > self.edges[last] {
            return 0.0;
        }
        let bin = self.edges.partition_point(|&e| e <= z).saturating_sub(1);
        self.density[bin.min(self.density.len() - 1)]
    }

    /// Prior probability of the interval `[a, b]`.
    pub fn mass(&self, a: f64, b: f64) -> f64 {
        self.density
            .iter()
            .zip(self.edges.windows(2))
            .map(|(d, w)| {
                let lo = w[0].max(a);
                let hi = w[1].min(b);
                if hi > lo {
                    d * (hi - lo)
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// `sum_i log f(z_i)` over the tree's cut points; `-inf` if any cut has
    /// zero density.
    pub fn log_prior(&self, tree: &PartitionTree) -> f64 {
        let lp: f64 = tree
            .cut_points()
            .iter()
            .map(|&z| self.density(z).ln())
            .sum();
        if lp == f64::NEG_INFINITY {
            log::debug!("tree {tree} has a cut with zero prior density");
        }
        lp
    }

    /// One draw from the density.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, w) in self.edges.windows(2).enumerate() {
            let m = self.density[i] * (w[1] - w[0]);
            if u < acc + m && m > 0.0 {
                let t = (u - acc) / m;
                return w[0] + t * (w[1] - w[0]);
            }
            acc += m;
        }
        // u landed in the rounding slack above the last positive bin
        let last = self.density.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        let (lo, hi) = (self.edges[last], self.edges[last + 1]);
        rng.gen_range(lo..hi)
    }
}
