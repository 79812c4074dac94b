//! Population size from a fitted model.
//!
//! Each class's observed mass `m_x` is the posterior-weighted count of
//! captured units; inflating by the class's capture probability gives
//! `N_x = m_x / (1 - q_x)`. The standard estimate sums every class, the
//! overcoverage-aware estimate only the target classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::model::{check_params, class_conditional, marginal_inclusion, miss_probability, Layout, ModelSpec, ParameterSet};
use crate::scalar::Scalar;
use crate::CaptureCounts;

/// A class whose capture probability is this close to 0 has no finite size.
pub const UNBOUNDED_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopEstimate<T> {
    pub class_sizes: Vec<T>,
    /// Posterior-weighted observed count per class, before inflation.
    pub observed_class_mass: Vec<T>,
    pub miss_probs: Vec<T>,
    pub total_all_classes: T,
    pub total_target_only: T,
    pub target_classes: Vec<usize>,
    pub observed_n: u64,
}

/// How to pick the target classes of a fit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetRule {
    /// The single class with the highest mean marginal inclusion.
    HighestMeanInclusion,
    All,
    Explicit(Vec<usize>),
}

fn observed_mass<T: Scalar>(spec: &ModelSpec, params: &ParameterSet<T>, counts: &CaptureCounts) -> Result<Vec<T>> {
    let estep = crate::fit::e_step(spec, params, counts)?;
    let mut mass = vec![T::zero(); spec.num_classes];
    for (i, row) in estep.posteriors.iter().enumerate().skip(1) {
        let n = T::from_count(counts.dense()[i]);
        for (m, &post) in mass.iter_mut().zip(row) {
            *m += n * post;
        }
    }
    Ok(mass)
}

/// Inflated class sizes with their observed masses and miss probabilities.
pub fn class_sizes<T: Scalar>(
    spec: &ModelSpec,
    params: &ParameterSet<T>,
    counts: &CaptureCounts,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    check_params(spec, params)?;
    let mass = observed_mass(spec, params, counts)?;
    let miss = miss_probability(spec, params)?.per_class;
    let layout = Layout::new(spec)?;
    let cond = class_conditional(&layout, params);
    let sizes = mass
        .iter()
        .zip(&miss)
        .zip(&cond)
        .enumerate()
        .map(|(x, ((&m, &q), probs))| {
            // summed over observable profiles to keep precision when q is near 1
            let seen: T = probs[1..].iter().copied().sum();
            if seen.as_f64() < UNBOUNDED_TOL {
                if m == T::zero() {
                    return Ok(T::zero());
                }
                return Err(Error::UnboundedEstimate {
                    class: x,
                    miss_prob: q.as_f64(),
                });
            }
            Ok(m / seen)
        })
        .collect::<Result<Vec<T>>>()?;
    Ok((sizes, mass, miss))
}

/// Estimate with the given target classes; the standard total is reported
/// alongside.
pub fn estimate_overcoverage<T: Scalar>(
    spec: &ModelSpec,
    params: &ParameterSet<T>,
    counts: &CaptureCounts,
    target_classes: &[usize],
) -> Result<PopEstimate<T>> {
    if target_classes.is_empty() {
        return Err(Error::Malformed("target class set is empty".into()));
    }
    if let Some(&x) = target_classes.iter().find(|&&x| x >= spec.num_classes) {
        return Err(Error::Dimension(format!(
            "target class {x} does not exist in a {}-class model",
            spec.num_classes
        )));
    }
    let mut targets = target_classes.to_vec();
    targets.sort_unstable();
    targets.dedup();
    let (class_sizes, observed_class_mass, miss_probs) = class_sizes(spec, params, counts)?;
    let total_all_classes = class_sizes.iter().copied().sum();
    let total_target_only = targets.iter().map(|&x| class_sizes[x]).sum();
    Ok(PopEstimate {
        class_sizes,
        observed_class_mass,
        miss_probs,
        total_all_classes,
        total_target_only,
        target_classes: targets,
        observed_n: counts.n(),
    })
}

/// Every class counted as target.
pub fn estimate_standard<T: Scalar>(
    spec: &ModelSpec,
    params: &ParameterSet<T>,
    counts: &CaptureCounts,
) -> Result<PopEstimate<T>> {
    let all: Vec<usize> = (0..spec.num_classes).collect();
    estimate_overcoverage(spec, params, counts, &all)
}

pub fn designate_target<T: Scalar>(spec: &ModelSpec, fit: &FitResult<T>, rule: &TargetRule) -> Result<Vec<usize>> {
    match rule {
        TargetRule::All => Ok((0..spec.num_classes).collect()),
        TargetRule::Explicit(classes) => {
            if classes.is_empty() {
                return Err(Error::Malformed("target class set is empty".into()));
            }
            if let Some(&x) = classes.iter().find(|&&x| x >= spec.num_classes) {
                return Err(Error::Dimension(format!("target class {x} does not exist")));
            }
            Ok(classes.clone())
        }
        TargetRule::HighestMeanInclusion => {
            let layout = Layout::new(spec)?;
            let margins = marginal_inclusion(&layout, &fit.params);
            let means: Vec<T> = margins.iter().map(|row| row.iter().copied().sum::<T>()).collect();
            let best = (0..means.len())
                .rev()
                .max_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap_or(std::cmp::Ordering::Equal))
                .expect("at least one class");
            Ok(vec![best])
        }
    }
}
