//! Maximum likelihood fitting by EM on the capture-conditional likelihood.
//!
//! The unobserved all-absent cell is treated as missing data alongside the
//! latent class. Each iteration computes class posteriors for the observed
//! profiles and then fits every class, missed units included, exactly for
//! those posteriors. Models with shared interaction terms follow that with
//! an ordinary EM step whose M-step runs IPF across classes. A candidate
//! that would lower the likelihood is replaced by a plain EM step, so the
//! recorded trace never decreases.

mod canonical;
mod init;
mod steps;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use canonical::canonicalize;
pub use steps::{e_step, m_step, EStep, ExpectedTable};

use crate::error::{Error, Result};
use crate::ipf::IpfControl;
use crate::model::{
    check_params, class_conditional, marginal_inclusion, mixture, CaptureProfile, Layout,
    ModelSpec, ParameterSet,
};
use crate::scalar::Scalar;
use crate::structure::{degrees_of_freedom, DfFlag, StructureReport};
use crate::CaptureCounts;
use steps::{class_solve_step, dense_counts, e_step_dense, loglik_from_probs, m_step_dense};

/// Estimates closer than this to 0 or 1 are reported as boundary estimates.
pub const BOUNDARY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub num_starts: usize,
    /// Relative change in log-likelihood that counts as converged; a
    /// largest parameter change below `tol / 10` also counts.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub ipf_tol: f64,
    pub ipf_max_iter: usize,
    /// Fit even when the model has negative degrees of freedom.
    #[serde(default)]
    pub force: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            num_starts: 20,
            tol: 1e-8,
            max_iter: 5000,
            seed: 0,
            ipf_tol: 1e-10,
            ipf_max_iter: 1000,
            force: false,
        }
    }
}

impl FitConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn ipf(&self) -> IpfControl {
        IpfControl {
            tol: self.ipf_tol,
            max_iter: self.ipf_max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub start_index: usize,
    pub cond_loglik: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest single-iteration drop in the log-likelihood trace (0 when
    /// the trace never decreases).
    pub max_decrease: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<T> {
    /// Canonicalized parameters.
    pub params: ParameterSet<T>,
    pub cond_loglik: T,
    pub iterations: usize,
    pub converged: bool,
    pub start_index: usize,
    pub loglik_trace: Vec<T>,
    /// Class posteriors of every observable profile, canonical class order.
    pub posteriors: BTreeMap<CaptureProfile, Vec<T>>,
    pub structure: StructureReport,
    pub aic: T,
    pub bic: T,
    /// Human-readable list of estimates within `BOUNDARY_TOL` of 0 or 1.
    pub boundary: Vec<String>,
    /// Always `"capture-conditional"`.
    pub likelihood: String,
    pub starts: Vec<StartSummary>,
}

impl<T> FitResult<T> {
    pub fn is_boundary(&self) -> bool {
        !self.boundary.is_empty()
    }
}

/// `sum_profile count * log(P(profile) / (1 - P(all absent)))`.
pub fn cond_loglik<T: Scalar>(spec: &ModelSpec, params: &ParameterSet<T>, counts: &CaptureCounts) -> Result<T> {
    check_params(spec, params)?;
    steps::check_counts(spec, counts)?;
    let layout = Layout::new(spec)?;
    Ok(loglik(&layout, params, &dense_counts(counts)))
}

fn loglik<T: Scalar>(layout: &Layout, params: &ParameterSet<T>, counts: &[T]) -> T {
    let probs = mixture(&params.class_weights, &class_conditional(layout, params));
    loglik_from_probs(&probs, counts)
}

fn max_abs_change<T: Scalar>(a: &ParameterSet<T>, b: &ParameterSet<T>) -> T {
    let flat = |p: &ParameterSet<T>| -> Vec<T> {
        p.class_weights
            .iter()
            .chain(p.inclusion_probs.iter().flatten())
            .chain(p.block_tables.iter().flatten().flatten())
            .chain(p.shared_interactions.iter().flatten())
            .copied()
            .collect()
    };
    flat(a)
        .into_iter()
        .zip(flat(b))
        .map(|(u, v)| (u - v).abs())
        .fold(T::zero(), T::max)
}

struct StartRun<T> {
    params: ParameterSet<T>,
    ll: T,
    trace: Vec<T>,
    iterations: usize,
    converged: bool,
    max_decrease: T,
}

fn run_start<T: Scalar>(
    layout: &Layout,
    counts: &[T],
    mut params: ParameterSet<T>,
    config: &FitConfig,
) -> Result<StartRun<T>> {
    let ipf = config.ipf();
    // tolerances below the scalar's resolution can never be met
    let floor = T::epsilon() * T::lit(2.0);
    let tol = T::lit(config.tol).max(floor);
    let param_tol = (T::lit(config.tol) / T::lit(10.0)).max(floor);
    let shared = !layout.shared_blocks.is_empty();

    let mut ll = loglik(layout, &params, counts);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut max_decrease = T::zero();
    for it in 1..=config.max_iter {
        iterations = it;
        let estep = e_step_dense(layout, &params, counts);
        let candidate = class_solve_step(layout, &params, &estep, ipf).and_then(|next| {
            if shared {
                let es = e_step_dense(layout, &next, counts);
                m_step_dense(layout, &next, &es.expected, ipf)
            } else {
                Ok(next)
            }
        });
        let (mut next, mut next_ll) = match candidate {
            Ok(next) => {
                let next_ll = loglik(layout, &next, counts);
                (next, next_ll)
            }
            Err(Error::IpfNonConvergence { .. }) => (params.clone(), T::neg_infinity()),
            Err(e) => return Err(e),
        };
        if !(next_ll >= ll) {
            next = m_step_dense(layout, &params, &estep.expected, ipf)?;
            next_ll = loglik(layout, &next, counts);
        }
        if !next_ll.is_finite() {
            return Err(Error::Degenerate(format!("log-likelihood became {next_ll}")));
        }
        let change = max_abs_change(&params, &next);
        let rel = (next_ll - ll).abs() / ll.abs().max(T::min_positive_value());
        max_decrease = max_decrease.max(ll - next_ll);
        params = next;
        ll = next_ll;
        trace.push(ll);
        if rel < tol || change < param_tol {
            converged = true;
            break;
        }
    }
    Ok(StartRun {
        params,
        ll,
        trace,
        iterations,
        converged,
        max_decrease,
    })
}

fn boundary_report<T: Scalar>(spec: &ModelSpec, layout: &Layout, params: &ParameterSet<T>) -> Vec<String> {
    let near = |v: T| {
        let v = v.as_f64();
        v < BOUNDARY_TOL || v > 1.0 - BOUNDARY_TOL
    };
    let mut out = Vec::new();
    if params.class_weights.len() > 1 {
        for (x, &w) in params.class_weights.iter().enumerate() {
            if near(w) {
                out.push(format!("class weight {x} = {w}"));
            }
        }
    }
    for (x, row) in marginal_inclusion(layout, params).iter().enumerate() {
        for (r, &p) in row.iter().enumerate() {
            if near(p) {
                out.push(format!("class {x} inclusion in {} = {p}", spec.register_names[r]));
            }
        }
    }
    for (t, tables) in params.block_tables.iter().enumerate() {
        for (x, table) in tables.iter().enumerate() {
            if table.iter().any(|&v| near(v)) {
                out.push(format!("class {x} has a boundary cell in dependence table {t}"));
            }
        }
    }
    out
}

/// Multi-start EM. The best capture-conditional log-likelihood wins, ties
/// going to the lowest start index; the result is canonicalized.
pub fn fit<T: Scalar>(spec: &ModelSpec, counts: &CaptureCounts, config: &FitConfig) -> Result<FitResult<T>> {
    let layout = Layout::new(spec)?;
    steps::check_counts(spec, counts)?;
    if counts.n() == 0 {
        return Err(Error::EmptyCounts);
    }
    if config.num_starts == 0 || !(config.tol > 0.0) {
        return Err(Error::Malformed("need at least one start and a positive tolerance".into()));
    }
    let structure = degrees_of_freedom(spec)?;
    if structure.df_flag == DfFlag::Negative && !config.force {
        return Err(Error::NegativeDf {
            df: structure.degrees_of_freedom,
        });
    }
    let dense: Vec<T> = dense_counts(counts);

    let runs: Vec<Result<StartRun<T>>> = (0..config.num_starts)
        .into_par_iter()
        .map(|s| {
            let start = if s == 0 {
                init::heuristic_start(spec, &layout, &dense)?
            } else {
                init::random_start(spec, &layout, config.seed, s)?
            };
            run_start(&layout, &dense, start, config)
        })
        .collect();

    let mut best: Option<(usize, &StartRun<T>)> = None;
    let mut last_error = None;
    let starts: Vec<StartSummary> = runs
        .iter()
        .enumerate()
        .map(|(s, run)| match run {
            Ok(r) => {
                if best.is_none_or(|(_, b)| r.ll > b.ll) {
                    best = Some((s, r));
                }
                StartSummary {
                    start_index: s,
                    cond_loglik: Some(r.ll.as_f64()),
                    iterations: r.iterations,
                    converged: r.converged,
                    max_decrease: r.max_decrease.as_f64(),
                    error: None,
                }
            }
            Err(e) => {
                last_error = Some(e.to_string());
                StartSummary {
                    start_index: s,
                    cond_loglik: None,
                    iterations: 0,
                    converged: false,
                    max_decrease: 0.0,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let (start_index, run) = best.ok_or_else(|| Error::AllStartsFailed(last_error.unwrap_or_default()))?;

    let order = canonical::canonical_order(&layout, &run.params);
    let params = run.params.permute_classes(&order);
    let estep = e_step_dense(&layout, &params, &dense);
    let posteriors = estep
        .posteriors
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, row)| (CaptureProfile::from_index(i, layout.num_registers), row.clone()))
        .collect();

    let p = T::from_i64(structure.parameter_count).unwrap();
    let n = T::from_count(counts.n());
    let two = T::lit(2.0);
    Ok(FitResult {
        boundary: boundary_report(spec, &layout, &params),
        cond_loglik: run.ll,
        iterations: run.iterations,
        converged: run.converged,
        start_index,
        loglik_trace: run.trace.clone(),
        posteriors,
        aic: -two * run.ll + two * p,
        bic: -two * run.ll + p * n.ln(),
        structure,
        likelihood: "capture-conditional".to_string(),
        starts,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn petersen() -> CaptureCounts {
        CaptureCounts::from_pairs(2, [("11", 50), ("10", 50), ("01", 50)]).unwrap()
    }

    #[test]
    fn single_class_fit_is_petersen() {
        let spec = ModelSpec::independence(["A", "B"], 1);
        let result: FitResult<f64> = fit(&spec, &petersen(), &FitConfig::with_seed(1)).unwrap();
        assert!(result.converged);
        for &p in &result.params.inclusion_probs[0] {
            assert!((p - 0.5).abs() < 1e-6);
        }
        assert_eq!(result.structure.degrees_of_freedom, 0);
        assert!((result.cond_loglik - 150.0 * (1.0f64 / 3.0).ln()).abs() < 1e-9);
    }

    #[test]
    fn negative_df_needs_force() {
        let spec = ModelSpec::independence(["A", "B"], 2);
        let err = fit::<f64>(&spec, &petersen(), &FitConfig::with_seed(1)).unwrap_err();
        assert!(matches!(err, Error::NegativeDf { df: -3 }));
        let forced = FitConfig {
            force: true,
            num_starts: 3,
            ..FitConfig::with_seed(1)
        };
        assert!(fit::<f64>(&spec, &petersen(), &forced).is_ok());
    }

    #[test]
    fn empty_counts_rejected() {
        let spec = ModelSpec::independence(["A", "B"], 1);
        let empty = CaptureCounts::zeros(2).unwrap();
        assert!(matches!(fit::<f64>(&spec, &empty, &FitConfig::default()), Err(Error::EmptyCounts)));
        let wrong = CaptureCounts::zeros(3).unwrap();
        assert!(matches!(fit::<f64>(&spec, &wrong, &FitConfig::default()), Err(Error::Dimension(_))));
    }

    #[test]
    fn max_iter_hit_is_not_converged() {
        let spec = ModelSpec::independence(["A", "B", "C", "D"], 2);
        let counts = CaptureCounts::from_pairs(
            4,
            [("1111", 40), ("1000", 30), ("0100", 25), ("0011", 10), ("1010", 12), ("0001", 33)],
        )
        .unwrap();
        let config = FitConfig {
            max_iter: 1,
            num_starts: 2,
            ..FitConfig::with_seed(3)
        };
        let result: FitResult<f64> = fit(&spec, &counts, &config).unwrap();
        assert!(!result.converged);
        assert_eq!(result.iterations, 1);
        assert_eq!(result.loglik_trace.len(), 2);
    }

    #[test]
    fn f32_fit_runs() {
        let spec = ModelSpec::independence(["A", "B"], 1);
        let result: FitResult<f32> = fit(&spec, &petersen(), &FitConfig::with_seed(1)).unwrap();
        for &p in &result.params.inclusion_probs[0] {
            assert!((p - 0.5).abs() < 1e-4);
        }
    }
}
