use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gp_tree, hgp_tree, BaselineSpec, ModelKind};
use crate::error::{MgpError, Result};
use crate::likelihood::{multi_trial_log_marginal, TrialSet};
use crate::partition::{Interval, PartitionTree};

/// Candidate values per coefficient. Empty lists keep the template's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineGrid {
    pub kappa: Vec<f64>,
    pub alpha0: Vec<f64>,
    pub alpha1: Vec<f64>,
    pub beta: Vec<f64>,
    pub rho: Vec<f64>,
}

impl BaselineGrid {
    /// Every combination in nested order `kappa, alpha0, alpha1, beta, rho`.
    pub fn points(&self, template: &BaselineSpec) -> Vec<BaselineSpec> {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let uses_alpha1 = template.kind != ModelKind::Gp;
        let uses_rho = template.kind == ModelKind::Mgp;
        let alpha1 = if uses_alpha1 {
            or(&self.alpha1, template.alpha1)
        } else {
            vec![template.alpha1]
        };
        let rho = if uses_rho {
            or(&self.rho, template.rho)
        } else {
            vec![template.rho]
        };
        let mut out = Vec::new();
        for &kappa in &or(&self.kappa, template.kappa) {
            for &alpha0 in &or(&self.alpha0, template.alpha0) {
                for &a1 in &alpha1 {
                    for &beta in &or(&self.beta, template.beta) {
                        for &r in &rho {
                            out.push(BaselineSpec {
                                kappa,
                                alpha0,
                                alpha1: a1,
                                beta,
                                rho: r,
                                ..template.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Objective at every grid point and the maximizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: BaselineSpec,
    pub objective: f64,
    pub evaluated: Vec<(BaselineSpec, Option<f64>)>,
}

/// Exhaustive search for the coefficients maximizing the training log
/// marginal. For the mGP the objective is the mean log marginal over
/// `trees`, whose depth sets the number of levels. Points that are invalid
/// or numerically fail are skipped; ties go to the first point.
pub fn grid_optimize(
    train: &TrialSet,
    template: &BaselineSpec,
    grid: &BaselineGrid,
    domain: Interval,
    trees: &[PartitionTree],
) -> Result<GridResult> {
    let s2 = train.mean_trial_variance()?;
    let trees: Vec<PartitionTree> = match template.kind {
        ModelKind::Gp => vec![gp_tree(domain)],
        ModelKind::Hgp => vec![hgp_tree(domain)],
        ModelKind::Mgp if trees.is_empty() => {
            return Err(MgpError::Optimization(
                "mGP grid search needs tree samples".into(),
            ))
        }
        ModelKind::Mgp => trees.to_vec(),
    };
    let levels = trees[0].depth();
    let points = template_points(grid, template)?;
    let evaluated: Vec<(BaselineSpec, Option<f64>)> = points
        .into_par_iter()
        .map(|spec| {
            let value = objective(train, &spec, s2, levels, &trees);
            if let Err(e) = &value {
                log::debug!("grid point {spec:?} skipped: {e}");
            }
            (spec, value.ok().filter(|v| v.is_finite()))
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, v)) in evaluated.iter().enumerate() {
        if let Some(v) = *v {
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    let (i, objective) =
        best.ok_or_else(|| MgpError::Optimization("no grid point has a finite objective".into()))?;
    Ok(GridResult {
        best: evaluated[i].0.clone(),
        objective,
        evaluated,
    })
}

fn template_points(grid: &BaselineGrid, template: &BaselineSpec) -> Result<Vec<BaselineSpec>> {
    let points = grid.points(template);
    if points.is_empty() {
        return Err(MgpError::Optimization("empty grid".into()));
    }
    Ok(points)
}

fn objective(
    train: &TrialSet,
    spec: &BaselineSpec,
    s2: f64,
    levels: usize,
    trees: &[PartitionTree],
) -> Result<f64> {
    let theta = spec.hyperparams(s2, levels)?;
    let mut total = 0.0;
    for tree in trees {
        total += multi_trial_log_marginal(train, tree, &theta)?;
    }
    Ok(total / trees.len() as f64)
}
