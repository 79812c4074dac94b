//! Synthetic populations and capture counts under latent class regimes.
//!
//! Randomness comes from ChaCha8 seeded with the config seed. Stream 0 draws
//! the class sizes; stream `x + 1` draws the profiles of class `x`. Output
//! is therefore reproducible bit-for-bit and does not depend on how classes
//! are scheduled.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::counts::csv_err;
use crate::error::{Error, Result};
use crate::model::{check_params, class_conditional, CaptureProfile, Layout, ModelSpec, ParameterSet};
use crate::CaptureCounts;

/// Inclusion probabilities of the low-inclusion class in Scenario 1.
pub const SCENARIO1_LOW: [f64; 4] = [0.25, 0.20, 0.21, 0.29];
/// Inclusion probabilities of the high-inclusion class in Scenario 1.
pub const SCENARIO1_HIGH: [f64; 4] = [0.70, 0.82, 0.86, 0.83];
pub const SCENARIO1_WEIGHTS: [f64; 2] = [0.4, 0.6];

/// Defaults of the mixed overcoverage + heterogeneity regime. These are not
/// taken from any published scenario.
pub const CRITIQUE_WEIGHTS: [f64; 3] = [0.2, 0.3, 0.5];
pub const CRITIQUE_HARD_TO_REACH: [f64; 4] = [0.35, 0.30, 0.32, 0.28];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassRole {
    /// Part of the population whose size is wanted.
    Target,
    /// Erroneous records of units outside the population.
    Overcoverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratingConfig {
    pub spec: ModelSpec,
    pub params: ParameterSet<f64>,
    pub population_size: u64,
    pub class_roles: Vec<ClassRole>,
    pub seed: u64,
    /// Round `N * weight` (largest remainder) instead of drawing class sizes.
    #[serde(default)]
    pub fixed_classes: bool,
}

impl GeneratingConfig {
    pub fn target_classes(&self) -> Vec<usize> {
        self.class_roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == ClassRole::Target)
            .map(|(x, _)| x)
            .collect()
    }

    pub fn check(&self) -> Result<()> {
        check_params(&self.spec, &self.params)?;
        if self.class_roles.len() != self.spec.num_classes {
            return Err(Error::Dimension(format!(
                "{} class roles for {} classes",
                self.class_roles.len(),
                self.spec.num_classes
            )));
        }
        if self.target_classes().is_empty() {
            return Err(Error::Malformed("no class is labelled target".into()));
        }
        if self.population_size == 0 {
            return Err(Error::Malformed("population size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// `complete_table[class][profile]`, the all-absent profile included.
    pub complete_table: Vec<Vec<u64>>,
    pub observed_counts: CaptureCounts,
    pub true_target_size: u64,
    pub true_class_sizes: Vec<u64>,
}

impl SimOutput {
    pub fn num_registers(&self) -> usize {
        self.observed_counts.num_registers()
    }

    /// Complete table as CSV with columns `profile,class,count`.
    pub fn write_complete_csv<W: Write>(&self, writer: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            profile: String,
            class: usize,
            count: u64,
        }
        let k = self.num_registers();
        let mut w = csv::Writer::from_writer(writer);
        for (x, row) in self.complete_table.iter().enumerate() {
            for (i, &count) in row.iter().enumerate() {
                w.serialize(Row {
                    profile: CaptureProfile::from_index(i, k).to_string(),
                    class: x,
                    count,
                })
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Multinomial draw as a chain of conditional binomials.
fn multinomial(rng: &mut ChaCha8Rng, n: u64, probs: &[f64]) -> Vec<u64> {
    let mut out = vec![0; probs.len()];
    let mut left = n;
    let mut mass: f64 = probs.iter().sum();
    for (i, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if i + 1 == probs.len() {
            out[i] = left;
            break;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let draw = if q >= 1.0 {
            left
        } else if q <= 0.0 {
            0
        } else {
            Binomial::new(left, q).expect("valid binomial").sample(rng)
        };
        out[i] = draw;
        left -= draw;
        mass -= p;
    }
    out
}

/// Largest-remainder rounding of `n * weights`.
fn rounded_sizes(n: u64, weights: &[f64]) -> Vec<u64> {
    let exact: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut sizes: Vec<u64> = exact.iter().map(|v| v.floor() as u64).collect();
    let mut left = n - sizes.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &x in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if weights[x] > 0.0 {
            sizes[x] += 1;
            left -= 1;
        }
    }
    sizes
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn simulate(config: &GeneratingConfig) -> Result<SimOutput> {
    config.check()?;
    let layout = Layout::new(&config.spec)?;
    let k = config.spec.num_registers();
    let n = config.population_size;

    let class_sizes = if config.fixed_classes {
        rounded_sizes(n, &config.params.class_weights)
    } else {
        multinomial(&mut stream(config.seed, 0), n, &config.params.class_weights)
    };
    let conditional = class_conditional(&layout, &config.params);
    let complete_table: Vec<Vec<u64>> = class_sizes
        .iter()
        .zip(&conditional)
        .enumerate()
        .map(|(x, (&size, probs))| multinomial(&mut stream(config.seed, x as u64 + 1), size, probs))
        .collect();

    let mut dense = vec![0u64; 1 << k];
    for row in &complete_table {
        for (i, &c) in row.iter().enumerate().skip(1) {
            dense[i] += c;
        }
    }
    let true_target_size = config.target_classes().iter().map(|&x| class_sizes[x]).sum();
    Ok(SimOutput {
        observed_counts: CaptureCounts::from_dense(k, dense)?,
        complete_table,
        true_target_size,
        true_class_sizes: class_sizes,
    })
}

fn registers() -> [&'static str; 4] {
    ["A", "B", "C", "D"]
}

/// Scenario 1: a 40% low-inclusion class read as overcoverage and a 60%
/// high-inclusion target class. With `cd_interaction` the C–D association
/// is a shared log-scale interaction of that size; its value is a free input.
pub fn preset_scenario1(population_size: u64, seed: u64, cd_interaction: Option<f64>) -> GeneratingConfig {
    let mut spec = ModelSpec::independence(registers(), 2);
    if cd_interaction.is_some() {
        spec = spec.with_term(crate::model::DependenceTerm::shared(["C", "D"]));
    }
    let mut params = ParameterSet::from_independence(
        &spec,
        SCENARIO1_WEIGHTS.to_vec(),
        vec![SCENARIO1_LOW.to_vec(), SCENARIO1_HIGH.to_vec()],
    )
    .expect("preset is well formed");
    if let Some(lambda) = cd_interaction {
        params.shared_interactions[0][0] = lambda;
    }
    GeneratingConfig {
        spec,
        params,
        population_size,
        class_roles: vec![ClassRole::Overcoverage, ClassRole::Target],
        seed,
        fixed_classes: false,
    }
}

/// Joint table of two binary variables with margins `p1`, `p2` and the given
/// odds ratio, cells ordered `00, 01, 10, 11` (first variable most significant).
pub fn pair_table(p1: f64, p2: f64, odds_ratio: f64) -> [f64; 4] {
    let p11 = if (odds_ratio - 1.0).abs() < 1e-12 {
        p1 * p2
    } else {
        let a = odds_ratio - 1.0;
        let b = 1.0 + a * (p1 + p2);
        (b - (b * b - 4.0 * odds_ratio * a * p1 * p2).sqrt()) / (2.0 * a)
    };
    [1.0 - p1 - p2 + p11, p2 - p11, p1 - p11, p11]
}

/// Scenario 1 margins with a class-specific C–D association: class `x` gets
/// a C–D table with odds ratio `odds_ratios[x]`.
pub fn preset_scenario1_class_cd(population_size: u64, seed: u64, odds_ratios: [f64; 2]) -> GeneratingConfig {
    let spec = ModelSpec::independence(registers(), 2).with_term(crate::model::DependenceTerm::class_specific(["C", "D"]));
    let mut params = ParameterSet::from_independence(
        &spec,
        SCENARIO1_WEIGHTS.to_vec(),
        vec![SCENARIO1_LOW.to_vec(), SCENARIO1_HIGH.to_vec()],
    )
    .expect("preset is well formed");
    for x in 0..2 {
        let probs = &params.inclusion_probs[x];
        params.block_tables[0][x] = pair_table(probs[2], probs[3], odds_ratios[x]).to_vec();
    }
    GeneratingConfig {
        spec,
        params,
        population_size,
        class_roles: vec![ClassRole::Overcoverage, ClassRole::Target],
        seed,
        fixed_classes: false,
    }
}

/// Overrides for the mixed-regime preset; `None` keeps the default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CritiqueOverrides {
    /// Weights of (overcoverage, hard-to-reach target, mainstream target).
    pub weights: Option<Vec<f64>>,
    pub overcoverage_probs: Option<Vec<f64>>,
    pub hard_to_reach_probs: Option<Vec<f64>>,
    pub mainstream_probs: Option<Vec<f64>>,
}

/// Three classes: overcoverage with Scenario 1's low probabilities, a
/// hard-to-reach target class, and a mainstream target class with Scenario
/// 1's high probabilities.
pub fn preset_critique(population_size: u64, seed: u64, overrides: &CritiqueOverrides) -> Result<GeneratingConfig> {
    let spec = ModelSpec::independence(registers(), 3);
    let pick = |o: &Option<Vec<f64>>, d: &[f64]| o.clone().unwrap_or_else(|| d.to_vec());
    let params = ParameterSet::from_independence(
        &spec,
        pick(&overrides.weights, &CRITIQUE_WEIGHTS),
        vec![
            pick(&overrides.overcoverage_probs, &SCENARIO1_LOW),
            pick(&overrides.hard_to_reach_probs, &CRITIQUE_HARD_TO_REACH),
            pick(&overrides.mainstream_probs, &SCENARIO1_HIGH),
        ],
    )?;
    let config = GeneratingConfig {
        spec,
        params,
        population_size,
        class_roles: vec![ClassRole::Overcoverage, ClassRole::Target, ClassRole::Target],
        seed,
        fixed_classes: false,
    };
    config.check()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::full_distribution;

    #[test]
    fn everyone_captured() {
        let spec = ModelSpec::independence(registers(), 1);
        let params = ParameterSet::from_independence(&spec, vec![1.0], vec![vec![1.0; 4]]).unwrap();
        let config = GeneratingConfig {
            spec,
            params,
            population_size: 100,
            class_roles: vec![ClassRole::Target],
            seed: 1,
            fixed_classes: false,
        };
        let out = simulate(&config).unwrap();
        assert_eq!(out.observed_counts.n(), 100);
        assert_eq!(out.observed_counts.dense()[0b1111], 100);
        assert_eq!(out.true_target_size, 100);
    }

    #[test]
    fn deterministic_given_seed() {
        let config = preset_scenario1(50_000, 42, None);
        assert_eq!(simulate(&config).unwrap(), simulate(&config).unwrap());
        let other = preset_scenario1(50_000, 43, None);
        assert_ne!(simulate(&config).unwrap(), simulate(&other).unwrap());
    }

    #[test]
    fn scenario1_expected_cells() {
        let config = preset_scenario1(1_000_000, 7, None);
        let out = simulate(&config).unwrap();
        let n = 1e6;
        let check = |count: u64, p: f64| {
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!((count as f64 - n * p).abs() < 5.0 * sd, "{count} vs {}", n * p);
        };
        check(out.observed_counts.dense()[0b1111], 0.24705072);
        let missed: u64 = out.complete_table.iter().map(|r| r[0]).sum();
        check(missed, 0.13538712);
        assert_eq!(out.complete_table.iter().flatten().sum::<u64>(), 1_000_000);
    }

    #[test]
    fn frequencies_converge_to_model() {
        for (seed, cd) in [(1, None), (2, Some(0.8)), (3, None), (4, Some(-0.5))] {
            let config = preset_scenario1(1_000_000, seed, cd);
            let out = simulate(&config).unwrap();
            let dist = full_distribution(&config.spec, &config.params).unwrap();
            let n = 1e6;
            for (i, p) in dist.values().enumerate() {
                let count: u64 = out.complete_table.iter().map(|r| r[i]).sum();
                let freq = count as f64 / n;
                let bound = 5.0 * (p * (1.0 - p) / n).sqrt();
                assert!((freq - p).abs() < bound, "seed {seed} profile {i}: {freq} vs {p}");
            }
        }
    }

    #[test]
    fn observed_counts_drop_the_missed_row() {
        let out = simulate(&preset_scenario1(10_000, 5, None)).unwrap();
        assert_eq!(out.observed_counts.dense()[0], 0);
        for i in 1..16 {
            let total: u64 = out.complete_table.iter().map(|r| r[i]).sum();
            assert_eq!(out.observed_counts.dense()[i], total);
        }
        assert_eq!(out.true_class_sizes.iter().sum::<u64>(), 10_000);
        assert_eq!(out.true_target_size, out.true_class_sizes[1]);
    }

    #[test]
    fn preset_values() {
        let config = preset_scenario1(1_000_000, 7, None);
        assert_eq!(config.params.class_weights, vec![0.4, 0.6]);
        assert_eq!(config.params.inclusion_probs[1], vec![0.70, 0.82, 0.86, 0.83]);
        assert_eq!(config.target_classes(), vec![1]);
        assert!(config.spec.dependence_terms.is_empty());
    }

    #[test]
    fn zero_cd_interaction_matches_independence() {
        let a = preset_scenario1(1000, 7, Some(0.0));
        let b = preset_scenario1(1000, 7, None);
        let da = full_distribution(&a.spec, &a.params).unwrap();
        let db = full_distribution(&b.spec, &b.params).unwrap();
        for (p, q) in da.values().zip(db.values()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn critique_roles_and_target_size() {
        let config = preset_critique(100_000, 11, &CritiqueOverrides::default()).unwrap();
        assert_eq!(
            config.class_roles,
            vec![ClassRole::Overcoverage, ClassRole::Target, ClassRole::Target]
        );
        assert_eq!(config.params.inclusion_probs[0], SCENARIO1_LOW.to_vec());
        let expected: f64 = config.target_classes().iter().map(|&x| config.params.class_weights[x]).sum();
        assert!((expected - 0.8).abs() < 1e-12);
        let out = simulate(&config).unwrap();
        let sd = (100_000.0f64 * 0.8 * 0.2).sqrt();
        assert!((out.true_target_size as f64 - 80_000.0).abs() < 3.0 * sd);
    }

    #[test]
    fn critique_overrides_are_validated() {
        let bad = CritiqueOverrides {
            weights: Some(vec![0.5, 0.5, 0.5]),
            ..Default::default()
        };
        assert!(preset_critique(100, 1, &bad).is_err());
    }

    #[test]
    fn fixed_classes_round_expected_sizes() {
        let mut config = preset_critique(1001, 3, &CritiqueOverrides::default()).unwrap();
        config.fixed_classes = true;
        let out = simulate(&config).unwrap();
        assert_eq!(out.true_class_sizes, vec![200, 300, 501]);
    }

    #[test]
    fn pair_table_has_requested_margins_and_odds_ratio() {
        for (p1, p2, or) in [(0.21, 0.29, 2.0), (0.86, 0.83, 0.5), (0.3, 0.6, 1.0)] {
            let t = pair_table(p1, p2, or);
            assert!((t[2] + t[3] - p1).abs() < 1e-12);
            assert!((t[1] + t[3] - p2).abs() < 1e-12);
            assert!(t.iter().all(|&v| v > 0.0));
            let got = t[3] * t[0] / (t[1] * t[2]);
            assert!((got - or).abs() < 1e-9, "{got}");
        }
    }

    #[test]
    fn rounding_keeps_total() {
        assert_eq!(rounded_sizes(10, &[1.0 / 3.0; 3]).iter().sum::<u64>(), 10);
        assert_eq!(rounded_sizes(7, &[0.0, 1.0]), vec![0, 7]);
    }
}
