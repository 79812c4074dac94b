//! Replicated simulate-fit-estimate pipelines and the degrees-of-freedom
//! table.
//!
//! Replicate `r` draws its seed from ChaCha8 seeded with the master seed on
//! stream `r`, so reports do not depend on thread count or scheduling.

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counts::csv_err;
use crate::error::Result;
use crate::fit::{fit, FitConfig};
use crate::model::{marginal_inclusion, Layout, ModelSpec};
use crate::popsize::{designate_target, estimate_overcoverage, TargetRule};
use crate::sim::{preset_critique, preset_scenario1, simulate, CritiqueOverrides, GeneratingConfig, SimOutput};
use crate::structure::{degrees_of_freedom, DfFlag, StructureReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Scenario1Variant {
    Independence,
    /// Shared C–D interaction of the given log-scale size, in both the
    /// generating and the fitted model.
    SharedCd(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub reps: usize,
    pub population_size: u64,
    pub seed: u64,
    /// Its `seed` field is ignored; every replicate uses its own seed.
    pub fit: FitConfig,
    pub target_rule: TargetRule,
}

impl ExperimentConfig {
    pub fn new(reps: usize, population_size: u64, seed: u64) -> Self {
        Self {
            reps,
            population_size,
            seed,
            fit: FitConfig::default(),
            target_rule: TargetRule::HighestMeanInclusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub observed_n: u64,
    pub true_class_sizes: Vec<u64>,
    pub true_target_size: u64,
    pub converged: bool,
    pub boundary: bool,
    pub error: Option<String>,
    pub cond_loglik: Option<f64>,
    pub iterations: Option<usize>,
    pub fitted_weights: Option<Vec<f64>>,
    /// `[class][register]` marginal inclusion of the fitted model.
    pub fitted_inclusion: Option<Vec<Vec<f64>>>,
    pub target_classes: Option<Vec<usize>>,
    pub total_all_classes: Option<f64>,
    pub total_target_only: Option<f64>,
    /// Target-only total against the true target size.
    pub bias_target_only: Option<f64>,
    /// Standard total against the full generated population.
    pub bias_standard: Option<f64>,
    /// Observed posterior mass of fitted class 0 (lowest inclusion).
    pub low_class_mass: Option<f64>,
    /// `low_class_mass` split by the generating class of the units behind it.
    pub low_class_origin: Option<Vec<f64>>,
}

impl ReplicateRecord {
    /// Counted in the headline aggregates.
    pub fn included(&self) -> bool {
        self.error.is_none() && self.converged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub replicates: usize,
    pub included: usize,
    pub convergence_failures: usize,
    pub fit_errors: usize,
    pub boundary_estimates: usize,
    pub mean_bias_target_only: Option<f64>,
    pub median_bias_target_only: Option<f64>,
    pub mean_bias_standard: Option<f64>,
    pub median_bias_standard: Option<f64>,
    /// Share of included replicates whose target-only bias is negative.
    pub negative_target_only_share: Option<f64>,
    /// Mean over included replicates of each generating class's share of
    /// fitted class 0.
    pub mean_low_class_origin_share: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub toolkit_version: String,
    pub master_seed: u64,
    pub replicate_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment_id: String,
    pub config: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Scenario1Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<CritiqueOverrides>,
    /// Generating model of replicate 0; only the seed differs between replicates.
    pub generating: GeneratingConfig,
    pub fitted_model: ModelSpec,
    pub records: Vec<ReplicateRecord>,
    pub aggregates: Aggregates,
    pub provenance: Provenance,
}

pub fn replicate_seeds(master: u64, reps: usize) -> Vec<u64> {
    (0..reps)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(master);
            rng.set_stream(r as u64);
            rng.next_u64()
        })
        .collect()
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// Aggregates over the records; non-converged and failed replicates are
/// counted but left out of the bias summaries.
pub fn aggregate(records: &[ReplicateRecord]) -> Aggregates {
    let included: Vec<&ReplicateRecord> = records.iter().filter(|r| r.included()).collect();
    let target: Vec<f64> = included.iter().filter_map(|r| r.bias_target_only).collect();
    let standard: Vec<f64> = included.iter().filter_map(|r| r.bias_standard).collect();
    let shares: Vec<Vec<f64>> = included
        .iter()
        .filter_map(|r| r.low_class_origin.as_ref())
        .map(|origin| {
            let total: f64 = origin.iter().sum();
            origin.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect()
        })
        .collect();
    let mean_share = shares.first().map(|first| {
        (0..first.len())
            .map(|t| shares.iter().map(|s| s[t]).sum::<f64>() / shares.len() as f64)
            .collect()
    });
    Aggregates {
        replicates: records.len(),
        included: included.len(),
        convergence_failures: records.iter().filter(|r| r.error.is_none() && !r.converged).count(),
        fit_errors: records.iter().filter(|r| r.error.is_some()).count(),
        boundary_estimates: records.iter().filter(|r| r.boundary).count(),
        mean_bias_target_only: mean(&target),
        median_bias_target_only: median(&target),
        mean_bias_standard: mean(&standard),
        median_bias_standard: median(&standard),
        negative_target_only_share: (!target.is_empty())
            .then(|| target.iter().filter(|&&b| b < 0.0).count() as f64 / target.len() as f64),
        mean_low_class_origin_share: mean_share,
    }
}

fn run_replicate(
    replicate: usize,
    seed: u64,
    generating: &GeneratingConfig,
    fitted: &ModelSpec,
    config: &ExperimentConfig,
) -> ReplicateRecord {
    let mut generating = generating.clone();
    generating.seed = seed;
    let sim = match simulate(&generating) {
        Ok(sim) => sim,
        Err(e) => return failed(replicate, seed, None, e.to_string()),
    };
    let fit_config = FitConfig {
        seed,
        ..config.fit.clone()
    };
    let result = fit::<f64>(fitted, &sim.observed_counts, &fit_config).and_then(|f| {
        let targets = designate_target(fitted, &f, &config.target_rule)?;
        let est = estimate_overcoverage(fitted, &f.params, &sim.observed_counts, &targets)?;
        Ok((f, est))
    });
    let (f, est) = match result {
        Ok(v) => v,
        Err(e) => return failed(replicate, seed, Some(&sim), e.to_string()),
    };
    let layout = Layout::new(fitted).expect("fitted model already checked");
    let origin = sim
        .complete_table
        .iter()
        .map(|row| {
            f.posteriors
                .iter()
                .map(|(profile, post)| row[profile.index()] as f64 * post[0])
                .sum()
        })
        .collect();
    let truth = sim.true_target_size as f64;
    let population = generating.population_size as f64;
    ReplicateRecord {
        replicate,
        seed,
        observed_n: sim.observed_counts.n(),
        true_class_sizes: sim.true_class_sizes.clone(),
        true_target_size: sim.true_target_size,
        converged: f.converged,
        boundary: f.is_boundary(),
        error: None,
        cond_loglik: Some(f.cond_loglik),
        iterations: Some(f.iterations),
        fitted_weights: Some(f.params.class_weights.clone()),
        fitted_inclusion: Some(marginal_inclusion(&layout, &f.params)),
        target_classes: Some(est.target_classes.clone()),
        total_all_classes: Some(est.total_all_classes),
        total_target_only: Some(est.total_target_only),
        bias_target_only: Some((est.total_target_only - truth) / truth),
        bias_standard: Some((est.total_all_classes - population) / population),
        low_class_mass: Some(est.observed_class_mass[0]),
        low_class_origin: Some(origin),
    }
}

fn failed(replicate: usize, seed: u64, sim: Option<&SimOutput>, error: String) -> ReplicateRecord {
    ReplicateRecord {
        replicate,
        seed,
        observed_n: sim.map_or(0, |s| s.observed_counts.n()),
        true_class_sizes: sim.map_or_else(Vec::new, |s| s.true_class_sizes.clone()),
        true_target_size: sim.map_or(0, |s| s.true_target_size),
        converged: false,
        boundary: false,
        error: Some(error),
        cond_loglik: None,
        iterations: None,
        fitted_weights: None,
        fitted_inclusion: None,
        target_classes: None,
        total_all_classes: None,
        total_target_only: None,
        bias_target_only: None,
        bias_standard: None,
        low_class_mass: None,
        low_class_origin: None,
    }
}

fn run(
    experiment_id: &str,
    config: &ExperimentConfig,
    generating: GeneratingConfig,
    fitted_model: ModelSpec,
) -> Result<ExperimentReport> {
    generating.check()?;
    fitted_model.check()?;
    let seeds = replicate_seeds(config.seed, config.reps);
    let records: Vec<ReplicateRecord> = seeds
        .par_iter()
        .enumerate()
        .map(|(r, &seed)| run_replicate(r, seed, &generating, &fitted_model, config))
        .collect();
    let mut generating = generating;
    generating.seed = seeds.first().copied().unwrap_or(config.seed);
    Ok(ExperimentReport {
        experiment_id: experiment_id.to_string(),
        config: config.clone(),
        variant: None,
        overrides: None,
        generating,
        fitted_model,
        aggregates: aggregate(&records),
        records,
        provenance: Provenance {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: config.seed,
            replicate_seeds: seeds,
        },
    })
}

/// Scenario 1 data, fitted with the generating model's structure.
pub fn run_scenario1(config: &ExperimentConfig, variant: Scenario1Variant) -> Result<ExperimentReport> {
    let cd = match variant {
        Scenario1Variant::Independence => None,
        Scenario1Variant::SharedCd(v) => Some(v),
    };
    let generating = preset_scenario1(config.population_size, config.seed, cd);
    let fitted = generating.spec.clone();
    let mut report = run("scenario1", config, generating, fitted)?;
    report.variant = Some(variant);
    Ok(report)
}

/// Three-class truth (overcoverage, hard-to-reach target, mainstream
/// target) fitted with the two-class independence model.
pub fn run_critique(config: &ExperimentConfig, overrides: &CritiqueOverrides) -> Result<ExperimentReport> {
    let generating = preset_critique(config.population_size, config.seed, overrides)?;
    let fitted = ModelSpec::independence(generating.spec.register_names.clone(), 2);
    let mut report = run("critique", config, generating, fitted)?;
    report.overrides = Some(overrides.clone());
    Ok(report)
}

/// Four-register two-class models of growing size, ending at the first one
/// with negative degrees of freedom.
pub fn df_family_table() -> Vec<StructureReport> {
    let notations = [
        "[AX][BX][CX][DX]",
        "[AX][BX][CX][DX][CD]",
        "[AX][BX][CDX]",
        "[AX][BX][CDX][AB]",
        "[ABX][CDX]",
        "[AX][BCDX]",
        "[ABCDX]",
    ];
    let mut rows = Vec::new();
    for notation in notations {
        let spec = ModelSpec::parse_notation(notation, 2).expect("table notation is valid");
        let row = degrees_of_freedom(&spec).expect("table model is valid");
        let negative = row.df_flag == DfFlag::Negative;
        rows.push(row);
        if negative {
            break;
        }
    }
    rows
}

/// One row per replicate; vectors are written `;`-separated.
pub fn write_records_csv<W: Write>(report: &ExperimentReport, writer: W) -> Result<()> {
    fn opt<T: ToString>(v: &Option<T>) -> String {
        v.as_ref().map(T::to_string).unwrap_or_default()
    }
    fn join<T: ToString>(v: &[T]) -> String {
        v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "replicate",
        "seed",
        "observed_n",
        "true_class_sizes",
        "true_target_size",
        "converged",
        "boundary",
        "error",
        "cond_loglik",
        "iterations",
        "fitted_weights",
        "target_classes",
        "total_all_classes",
        "total_target_only",
        "bias_target_only",
        "bias_standard",
        "low_class_origin",
    ])
    .map_err(csv_err)?;
    for r in &report.records {
        w.write_record([
            r.replicate.to_string(),
            r.seed.to_string(),
            r.observed_n.to_string(),
            join(&r.true_class_sizes),
            r.true_target_size.to_string(),
            r.converged.to_string(),
            r.boundary.to_string(),
            r.error.clone().unwrap_or_default(),
            opt(&r.cond_loglik),
            opt(&r.iterations),
            r.fitted_weights.as_deref().map(join).unwrap_or_default(),
            r.target_classes.as_deref().map(join).unwrap_or_default(),
            opt(&r.total_all_classes),
            opt(&r.total_target_only),
            opt(&r.bias_target_only),
            opt(&r.bias_standard),
            r.low_class_origin.as_deref().map(join).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(reps: usize, seed: u64) -> ExperimentConfig {
        let mut config = ExperimentConfig::new(reps, 20_000, seed);
        config.fit.num_starts = 4;
        config
    }

    #[test]
    fn df_table_rows() {
        let rows = df_family_table();
        let got: Vec<(&str, i64, i64)> = rows
            .iter()
            .map(|r| (r.notation.as_str(), r.parameter_count, r.degrees_of_freedom))
            .collect();
        assert_eq!(
            got,
            [
                ("[AX][BX][CX][DX]", 9, 5),
                ("[AX][BX][CX][DX][CD]", 10, 4),
                ("[AX][BX][CDX]", 11, 3),
                ("[AX][BX][CDX][AB]", 12, 2),
                ("[ABX][CDX]", 13, 1),
                ("[AX][BCDX]", 17, -3),
            ]
        );
        assert_eq!(rows.last().unwrap().df_flag, DfFlag::Negative);
        assert!(rows[..5].iter().all(|r| r.df_flag == DfFlag::Ok));
    }

    #[test]
    fn replicate_seeds_are_stable_prefixes() {
        let a = replicate_seeds(9, 5);
        let b = replicate_seeds(9, 3);
        assert_eq!(&a[..3], &b[..]);
        let mut dedup = a.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 5);
    }

    #[test]
    fn scenario1_report_is_reproducible() {
        let config = small(2, 5);
        let a = run_scenario1(&config, Scenario1Variant::Independence).unwrap();
        let b = run_scenario1(&config, Scenario1Variant::Independence).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.records.len(), 2);
        assert_eq!(a.provenance.replicate_seeds, replicate_seeds(5, 2));
        assert_eq!(a.aggregates, aggregate(&a.records));
    }

    #[test]
    fn scenario1_target_only_is_close() {
        let report = run_scenario1(&small(3, 1), Scenario1Variant::Independence).unwrap();
        let bias = report.aggregates.mean_bias_target_only.unwrap();
        assert!(bias.abs() < 0.03, "{bias}");
        for r in &report.records {
            assert_eq!(r.target_classes.as_deref(), Some(&[1][..]));
        }
    }

    #[test]
    fn origin_decomposition_is_a_partition_of_fitted_low_class_mass() {
        let report = run_critique(&small(2, 3), &CritiqueOverrides::default()).unwrap();
        for r in &report.records {
            let origin = r.low_class_origin.as_ref().unwrap();
            assert_eq!(origin.len(), 3);
            let total: f64 = origin.iter().sum();
            let mass = r.low_class_mass.unwrap();
            assert!((total - mass).abs() < 1e-9 * mass.max(1.0), "{total} vs {mass}");
        }
    }

    #[test]
    fn aggregates_skip_unconverged_replicates() {
        let mut config = small(2, 4);
        config.fit.max_iter = 1;
        let report = run_scenario1(&config, Scenario1Variant::Independence).unwrap();
        assert_eq!(report.aggregates.replicates, 2);
        assert_eq!(report.aggregates.included, 0);
        assert_eq!(report.aggregates.convergence_failures, 2);
        assert_eq!(report.aggregates.mean_bias_target_only, None);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn records_csv_has_one_row_per_replicate() {
        let report = run_scenario1(&small(2, 8), Scenario1Variant::Independence).unwrap();
        let mut buf = Vec::new();
        write_records_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("replicate,seed,"));
    }
}
