//! Parameter counting, degrees of freedom and a numerical identifiability
//! diagnostic.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    check_params, class_conditional, interaction_masks, mixture, BlockKind, Layout, ModelSpec,
    ParameterSet,
};

/// Largest register count accepted by [`jacobian_rank_check`].
pub const MAX_JACOBIAN_REGISTERS: usize = 10;
const FD_STEP: f64 = 1e-6;
const RANK_RTOL: f64 = 1e-8;
/// Interior margin for the rank check: any probability closer than this to
/// 0 or 1 is treated as a boundary point.
const INTERIOR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DfFlag {
    Ok,
    Saturated,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureReport {
    pub notation: String,
    pub independent_cells: i64,
    pub parameter_count: i64,
    pub degrees_of_freedom: i64,
    pub df_flag: DfFlag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jacobian_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_deficient: Option<bool>,
}

/// Free parameters per class contributed by one block.
fn per_class_params(kind: BlockKind, size: usize) -> usize {
    match kind {
        BlockKind::Single => 1,
        BlockKind::ClassSpecific { .. } => (1 << size) - 1,
        BlockKind::Shared { .. } => size,
    }
}

/// Number of independent parameters: `L - 1` class weights, the per-class
/// parameters of every block, and the interactions of shared terms (counted
/// once, not per class).
pub fn parameter_count(spec: &ModelSpec) -> Result<usize> {
    let layout = Layout::new(spec)?;
    let l = spec.num_classes;
    let mut count = l - 1;
    for block in &layout.blocks {
        count += l * per_class_params(block.kind, block.size());
        if let BlockKind::Shared { .. } = block.kind {
            count += interaction_masks(block.size()).len();
        }
    }
    Ok(count)
}

/// Observable cells are the `2^K - 1` profiles other than the all-absent one;
/// one of them is fixed by the observed total.
pub fn degrees_of_freedom(spec: &ModelSpec) -> Result<StructureReport> {
    let parameter_count = parameter_count(spec)? as i64;
    let independent_cells = (1i64 << spec.num_registers()) - 2;
    let df = independent_cells - parameter_count;
    let df_flag = match df {
        d if d > 0 => DfFlag::Ok,
        0 => DfFlag::Saturated,
        _ => DfFlag::Negative,
    };
    Ok(StructureReport {
        notation: spec.notation(),
        independent_cells,
        parameter_count,
        degrees_of_freedom: df,
        df_flag,
        jacobian_rank: None,
        rank_deficient: None,
    })
}

/// Unconstrained coordinates for a parameter set: softmax logits for the
/// class weights and class-specific tables, logits for probabilities, and
/// shared interactions as-is.
pub(crate) struct Chart<'a> {
    layout: &'a Layout,
    template: ParameterSet<f64>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_with_reference(logits: &[f64]) -> Vec<f64> {
    // reference entry has logit 0
    let max = logits.iter().copied().fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(logits.len() + 1);
    out.push((-max).exp());
    out.extend(logits.iter().map(|&v| (v - max).exp()));
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

impl<'a> Chart<'a> {
    pub(crate) fn new(layout: &'a Layout, template: ParameterSet<f64>) -> Self {
        Self { layout, template }
    }

    pub(crate) fn to_coords(&self, params: &ParameterSet<f64>) -> Result<Vec<f64>> {
        let interior = |what: &str, p: f64| {
            if p > INTERIOR_TOL && p < 1.0 - INTERIOR_TOL {
                Ok(p)
            } else {
                Err(Error::Degenerate(format!("{what} = {p} is not interior")))
            }
        };
        let mut out = Vec::new();
        if params.class_weights.len() > 1 {
            let w0 = interior("class weight 0", params.class_weights[0])?;
            for (x, &w) in params.class_weights.iter().enumerate().skip(1) {
                out.push((interior(&format!("class weight {x}"), w)? / w0).ln());
            }
        }
        for x in 0..self.layout.num_classes {
            for block in &self.layout.blocks {
                match block.kind {
                    BlockKind::Single | BlockKind::Shared { .. } => {
                        for &r in &block.registers {
                            let p = interior("inclusion probability", params.inclusion_probs[x][r])?;
                            out.push(logit(p));
                        }
                    }
                    BlockKind::ClassSpecific { table } => {
                        let tab = &params.block_tables[table][x];
                        let t0 = interior("table cell", tab[0])?;
                        for &v in &tab[1..] {
                            out.push((interior("table cell", v)? / t0).ln());
                        }
                    }
                }
            }
        }
        for lambdas in &params.shared_interactions {
            out.extend(lambdas.iter().copied());
        }
        Ok(out)
    }

    pub(crate) fn from_coords(&self, coords: &[f64]) -> ParameterSet<f64> {
        let l = self.layout.num_classes;
        let mut params = self.template.clone();
        let mut i = 0;
        params.class_weights = softmax_with_reference(&coords[..l - 1]);
        i += l - 1;
        for x in 0..l {
            for block in &self.layout.blocks {
                match block.kind {
                    BlockKind::Single | BlockKind::Shared { .. } => {
                        for &r in &block.registers {
                            params.inclusion_probs[x][r] = sigmoid(coords[i]);
                            i += 1;
                        }
                    }
                    BlockKind::ClassSpecific { table } => {
                        let n = block.num_cells() - 1;
                        params.block_tables[table][x] = softmax_with_reference(&coords[i..i + n]);
                        i += n;
                    }
                }
            }
        }
        for lambdas in params.shared_interactions.iter_mut() {
            for v in lambdas.iter_mut() {
                *v = coords[i];
                i += 1;
            }
        }
        debug_assert_eq!(i, coords.len());
        params.sync_block_margins(self.layout);
        params
    }
}

/// Capture-conditional probabilities of the observable profiles.
fn observable(layout: &Layout, params: &ParameterSet<f64>) -> Vec<f64> {
    let probs = mixture(&params.class_weights, &class_conditional(layout, params));
    let seen = 1.0 - probs[0];
    probs[1..].iter().map(|p| p / seen).collect()
}

fn numerical_rank(jac: DMatrix<f64>) -> usize {
    let sv = jac.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_RTOL * max).count()
}

fn rank_at(chart: &Chart<'_>, coords: &[f64]) -> usize {
    let layout = chart.layout;
    let rows = layout.num_profiles() - 1;
    let mut jac = DMatrix::zeros(rows, coords.len());
    let mut point = coords.to_vec();
    for j in 0..coords.len() {
        let orig = point[j];
        point[j] = orig + FD_STEP;
        let plus = observable(layout, &chart.from_coords(&point));
        point[j] = orig - FD_STEP;
        let minus = observable(layout, &chart.from_coords(&point));
        point[j] = orig;
        for (r, (a, b)) in plus.iter().zip(&minus).enumerate() {
            jac[(r, j)] = (a - b) / (2.0 * FD_STEP);
        }
    }
    numerical_rank(jac)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCheck {
    /// Largest numerical rank seen over the tested points.
    pub rank: usize,
    pub parameter_count: usize,
    /// Rank below the parameter count at every tested point.
    pub rank_deficient: bool,
    /// Rank at `params` first, then at each random point.
    pub point_ranks: Vec<usize>,
}

/// Numerical rank of the Jacobian of the map from parameters to observable
/// cell probabilities, at `params` and at `num_points` further random
/// interior points drawn from `seed`.
pub fn jacobian_rank_check(
    spec: &ModelSpec,
    params: &ParameterSet<f64>,
    num_points: usize,
    seed: u64,
) -> Result<RankCheck> {
    if spec.num_registers() > MAX_JACOBIAN_REGISTERS {
        return Err(Error::Capacity {
            registers: spec.num_registers(),
            max: MAX_JACOBIAN_REGISTERS,
        });
    }
    check_params(spec, params)?;
    let layout = Layout::new(spec)?;
    let chart = Chart::new(&layout, params.clone());
    let base = chart.to_coords(params)?;
    let parameter_count = base.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut point_ranks = vec![rank_at(&chart, &base)];
    for _ in 0..num_points {
        let coords: Vec<f64> = (0..parameter_count).map(|_| rng.random_range(-1.5..1.5)).collect();
        point_ranks.push(rank_at(&chart, &coords));
    }
    let rank = point_ranks.iter().copied().max().unwrap_or(0);
    Ok(RankCheck {
        rank,
        parameter_count,
        rank_deficient: point_ranks.iter().all(|&r| r < parameter_count),
        point_ranks,
    })
}

/// `degrees_of_freedom` with the rank diagnostic filled in.
pub fn structure_report_with_rank(
    spec: &ModelSpec,
    params: &ParameterSet<f64>,
    num_points: usize,
    seed: u64,
) -> Result<StructureReport> {
    let mut report = degrees_of_freedom(spec)?;
    let check = jacobian_rank_check(spec, params, num_points, seed)?;
    report.jacobian_rank = Some(check.rank);
    report.rank_deficient = Some(check.rank_deficient);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DependenceTerm;

    fn df(notation: &str, classes: usize) -> StructureReport {
        degrees_of_freedom(&ModelSpec::parse_notation(notation, classes).unwrap()).unwrap()
    }

    fn scenario1(spec: &ModelSpec) -> ParameterSet<f64> {
        ParameterSet::from_independence(
            spec,
            vec![0.4, 0.6],
            vec![vec![0.25, 0.20, 0.21, 0.29], vec![0.70, 0.82, 0.86, 0.83]],
        )
        .unwrap()
    }

    #[test]
    fn standard_model_counts() {
        let r = df("[AX][BX][CX][DX]", 2);
        assert_eq!(r.independent_cells, 14);
        assert_eq!(r.parameter_count, 9);
        assert_eq!(r.degrees_of_freedom, 5);
        assert_eq!(r.df_flag, DfFlag::Ok);
    }

    #[test]
    fn local_dependence_counts() {
        let r = df("[AX][BX][CDX]", 2);
        assert_eq!((r.parameter_count, r.degrees_of_freedom), (11, 3));
        let r = df("[AX][BX][CX][DX][CD]", 2);
        assert_eq!((r.parameter_count, r.degrees_of_freedom), (10, 4));
        let r = df("[ABX][CDX]", 2);
        assert_eq!((r.parameter_count, r.degrees_of_freedom), (13, 1));
        let r = df("[AX][BCDX]", 2);
        assert_eq!((r.parameter_count, r.degrees_of_freedom), (17, -3));
        assert_eq!(r.df_flag, DfFlag::Negative);
        let r = df("[AX][BX][CX][DX][ABCD]", 1);
        assert_eq!((r.parameter_count, r.degrees_of_freedom), (15, -1));
    }

    #[test]
    fn two_registers_two_classes_is_negative() {
        let r = df("[AX][BX]", 2);
        assert_eq!((r.independent_cells, r.parameter_count, r.degrees_of_freedom), (2, 5, -3));
        assert_eq!(r.df_flag, DfFlag::Negative);
    }

    #[test]
    fn saturated_flag() {
        // one class, two registers: 2 cells, 2 parameters
        let r = df("[A][B]", 1);
        assert_eq!(r.degrees_of_freedom, 0);
        assert_eq!(r.df_flag, DfFlag::Saturated);
    }

    #[test]
    fn single_class_independence_formula() {
        for k in 2..=8 {
            let names: Vec<String> = (0..k).map(|i| format!("R{i}")).collect();
            let r = degrees_of_freedom(&ModelSpec::independence(names, 1)).unwrap();
            assert_eq!(r.degrees_of_freedom, ((1i64 << k) - 2) - k as i64);
        }
    }

    #[test]
    fn df_ignores_register_order() {
        let a = ModelSpec::independence(["A", "B", "C", "D"], 2).with_term(DependenceTerm::class_specific(["C", "D"]));
        let b = ModelSpec::independence(["D", "B", "C", "A"], 2).with_term(DependenceTerm::class_specific(["D", "C"]));
        assert_eq!(
            degrees_of_freedom(&a).unwrap().degrees_of_freedom,
            degrees_of_freedom(&b).unwrap().degrees_of_freedom
        );
    }

    #[test]
    fn adding_a_term_lowers_df() {
        let base = ModelSpec::independence(["A", "B", "C", "D"], 2);
        let base_df = degrees_of_freedom(&base).unwrap().degrees_of_freedom;
        for term in [
            DependenceTerm::shared(["A", "B"]),
            DependenceTerm::class_specific(["A", "B"]),
            DependenceTerm::shared(["B", "C", "D"]),
            DependenceTerm::class_specific(["A", "C", "D"]),
        ] {
            let spec = base.clone().with_term(term);
            assert!(degrees_of_freedom(&spec).unwrap().degrees_of_freedom < base_df);
        }
    }

    #[test]
    fn chart_round_trip() {
        let spec = ModelSpec::parse_notation("[AX][BX][CDX]", 2).unwrap();
        let params = scenario1(&spec);
        let layout = Layout::new(&spec).unwrap();
        let chart = Chart::new(&layout, params.clone());
        let coords = chart.to_coords(&params).unwrap();
        assert_eq!(coords.len(), parameter_count(&spec).unwrap());
        let back = chart.from_coords(&coords);
        for (a, b) in back.inclusion_probs.iter().flatten().zip(params.inclusion_probs.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in back.class_weights.iter().zip(&params.class_weights) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_of_standard_model_at_scenario1() {
        let spec = ModelSpec::independence(["A", "B", "C", "D"], 2);
        let check = jacobian_rank_check(&spec, &scenario1(&spec), 3, 1).unwrap();
        assert_eq!(check.point_ranks[0], 9);
        assert_eq!(check.rank, 9);
        assert!(!check.rank_deficient);
    }

    #[test]
    fn rank_deficiency_with_two_registers() {
        let spec = ModelSpec::independence(["A", "B"], 2);
        let params = ParameterSet::from_independence(&spec, vec![0.4, 0.6], vec![vec![0.3, 0.2], vec![0.7, 0.8]]).unwrap();
        let check = jacobian_rank_check(&spec, &params, 4, 9).unwrap();
        assert!(check.rank <= 3);
        assert_eq!(check.parameter_count, 5);
        assert!(check.rank_deficient);
    }

    #[test]
    fn single_class_rank_is_register_count() {
        for k in 2..=5 {
            let names: Vec<String> = (0..k).map(|i| format!("R{i}")).collect();
            let spec = ModelSpec::independence(names, 1);
            let params = ParameterSet::from_independence(&spec, vec![1.0], vec![(0..k).map(|i| 0.2 + 0.1 * i as f64).collect()]).unwrap();
            let check = jacobian_rank_check(&spec, &params, 2, 3).unwrap();
            assert_eq!(check.rank, k);
            assert!(!check.rank_deficient);
        }
    }

    #[test]
    fn boundary_params_are_rejected() {
        let spec = ModelSpec::independence(["A", "B", "C", "D"], 2);
        let mut params = scenario1(&spec);
        params.inclusion_probs[0][0] = 0.0;
        assert!(matches!(
            jacobian_rank_check(&spec, &params, 1, 1),
            Err(Error::Degenerate(_))
        ));
    }
}
