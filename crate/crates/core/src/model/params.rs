use std::fmt;

use serde::{Deserialize, Serialize};

use super::spec::{interaction_masks, Layout, ModelSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One invariant breach, with a stable machine-readable code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: String,
    pub message: String,
}

impl Violation {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

/// Tolerance for simplex sums in validation.
const NORMALIZATION_TOL: f64 = 1e-12;
/// Tolerance for block margins against `inclusion_probs`.
const MARGIN_TOL: f64 = 1e-9;

/// Parameters of a latent class model.
///
/// `inclusion_probs[x][k]` is the probability of appearing in register `k`
/// for a unit in class `x`. For registers in a class-specific term that
/// column is the single-register margin of the class's joint table. For
/// registers in a shared term it is the main-effect probability before the
/// shared interaction is applied (the margin itself when the interaction is
/// zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet<T> {
    pub class_weights: Vec<T>,
    pub inclusion_probs: Vec<Vec<T>>,
    /// `block_tables[t][x]` is the joint table of class-specific term `t` in
    /// class `x`, indexed by block cell (first register = most significant bit).
    #[serde(default = "Vec::new")]
    pub block_tables: Vec<Vec<Vec<T>>>,
    /// `shared_interactions[s]` holds the log-scale interactions of shared
    /// term `s`, one per register subset of size two or more, ordered by
    /// block-cell mask.
    #[serde(default = "Vec::new")]
    pub shared_interactions: Vec<Vec<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    /// Independence parameters; block tables are filled with the product of
    /// the margins and shared interactions with zeros.
    pub fn from_independence(
        spec: &ModelSpec,
        class_weights: Vec<T>,
        inclusion_probs: Vec<Vec<T>>,
    ) -> Result<Self> {
        let layout = Layout::new(spec)?;
        let mut params = Self {
            class_weights,
            inclusion_probs,
            block_tables: Vec::new(),
            shared_interactions: Vec::new(),
        };
        if params.inclusion_probs.len() != spec.num_classes
            || params
                .inclusion_probs
                .iter()
                .any(|row| row.len() != spec.num_registers())
        {
            return Err(Error::Dimension(format!(
                "inclusion_probs must be {}x{}",
                spec.num_classes,
                spec.num_registers()
            )));
        }
        for &b in &layout.class_specific_blocks {
            let block = &layout.blocks[b];
            let tables = params
                .inclusion_probs
                .iter()
                .map(|row| {
                    (0..block.num_cells())
                        .map(|cell| {
                            block
                                .registers
                                .iter()
                                .enumerate()
                                .map(|(j, &r)| if block.bit(cell, j) { row[r] } else { T::one() - row[r] })
                                .fold(T::one(), |a, b| a * b)
                        })
                        .collect()
                })
                .collect();
            params.block_tables.push(tables);
        }
        for &b in &layout.shared_blocks {
            let m = layout.blocks[b].size();
            params
                .shared_interactions
                .push(vec![T::zero(); interaction_masks(m).len()]);
        }
        Ok(params)
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.len()
    }

    /// Rewrite the `inclusion_probs` columns of class-specific registers from
    /// the margins of their tables.
    pub fn sync_block_margins(&mut self, layout: &Layout) {
        for (t, &b) in layout.class_specific_blocks.iter().enumerate() {
            let block = &layout.blocks[b];
            for (x, table) in self.block_tables[t].iter().enumerate() {
                for (j, &r) in block.registers.iter().enumerate() {
                    let margin = table
                        .iter()
                        .enumerate()
                        .filter(|(cell, _)| block.bit(*cell, j))
                        .map(|(_, &v)| v)
                        .sum();
                    self.inclusion_probs[x][r] = margin;
                }
            }
        }
    }

    /// Permute classes so that new class `i` is old class `order[i]`.
    pub fn permute_classes(&self, order: &[usize]) -> Self {
        Self {
            class_weights: order.iter().map(|&x| self.class_weights[x]).collect(),
            inclusion_probs: order.iter().map(|&x| self.inclusion_probs[x].clone()).collect(),
            block_tables: self
                .block_tables
                .iter()
                .map(|tables| order.iter().map(|&x| tables[x].clone()).collect())
                .collect(),
            shared_interactions: self.shared_interactions.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        let c = |v: &T| U::lit(v.as_f64());
        ParameterSet {
            class_weights: self.class_weights.iter().map(c).collect(),
            inclusion_probs: self
                .inclusion_probs
                .iter()
                .map(|r| r.iter().map(c).collect())
                .collect(),
            block_tables: self
                .block_tables
                .iter()
                .map(|t| t.iter().map(|r| r.iter().map(c).collect()).collect())
                .collect(),
            shared_interactions: self
                .shared_interactions
                .iter()
                .map(|r| r.iter().map(c).collect())
                .collect(),
        }
    }
}

/// Check `params` against `spec`, reporting every breach.
pub fn validate<T: Scalar>(spec: &ModelSpec, params: &ParameterSet<T>) -> Vec<Violation> {
    let mut out = spec.violations();
    if !out.is_empty() {
        return out;
    }
    let layout = Layout::new(spec).expect("spec checked");
    let l = spec.num_classes;
    let k = spec.num_registers();

    let prob_ok = |p: T| p.is_finite() && p >= T::zero() && p <= T::one();

    if params.class_weights.len() != l {
        out.push(Violation::new(
            "weights-length",
            format!("expected {l} class weights, got {}", params.class_weights.len()),
        ));
    } else {
        for (x, &w) in params.class_weights.iter().enumerate() {
            if !prob_ok(w) {
                out.push(Violation::new(
                    "prob-out-of-range",
                    format!("class weight {x} = {w} outside [0, 1]"),
                ));
            }
        }
        let sum: T = params.class_weights.iter().copied().sum();
        if !((sum - T::one()).abs().as_f64() <= NORMALIZATION_TOL) {
            out.push(Violation::new(
                "weights-not-normalized",
                format!("class weights sum to {sum}"),
            ));
        }
    }

    if params.inclusion_probs.len() != l || params.inclusion_probs.iter().any(|r| r.len() != k) {
        out.push(Violation::new(
            "probs-shape",
            format!("inclusion_probs must be {l}x{k}"),
        ));
    } else {
        for (x, row) in params.inclusion_probs.iter().enumerate() {
            for (r, &p) in row.iter().enumerate() {
                if !prob_ok(p) {
                    out.push(Violation::new(
                        "prob-out-of-range",
                        format!(
                            "inclusion probability of class {x} in register {} = {p}",
                            spec.register_names[r]
                        ),
                    ));
                }
            }
        }
    }

    if params.block_tables.len() != layout.class_specific_blocks.len() {
        out.push(Violation::new(
            "block-table-shape",
            format!(
                "expected {} class-specific tables, got {}",
                layout.class_specific_blocks.len(),
                params.block_tables.len()
            ),
        ));
    } else {
        for (t, &b) in layout.class_specific_blocks.iter().enumerate() {
            let block = &layout.blocks[b];
            let tables = &params.block_tables[t];
            if tables.len() != l || tables.iter().any(|tab| tab.len() != block.num_cells()) {
                out.push(Violation::new(
                    "block-table-shape",
                    format!("table {t} must be {l}x{}", block.num_cells()),
                ));
                continue;
            }
            for (x, table) in tables.iter().enumerate() {
                if table.iter().any(|&v| !prob_ok(v)) {
                    out.push(Violation::new(
                        "prob-out-of-range",
                        format!("table {t} of class {x} has an entry outside [0, 1]"),
                    ));
                }
                let sum: T = table.iter().copied().sum();
                if !((sum - T::one()).abs().as_f64() <= NORMALIZATION_TOL) {
                    out.push(Violation::new(
                        "block-table-not-normalized",
                        format!("table {t} of class {x} sums to {sum}"),
                    ));
                }
                if params.inclusion_probs.len() == l {
                    for (j, &r) in block.registers.iter().enumerate() {
                        let margin: T = table
                            .iter()
                            .enumerate()
                            .filter(|(cell, _)| block.bit(*cell, j))
                            .map(|(_, &v)| v)
                            .sum();
                        let col = params.inclusion_probs[x].get(r).copied().unwrap_or(T::nan());
                        if !((margin - col).abs().as_f64() <= MARGIN_TOL) {
                            out.push(Violation::new(
                                "block-margin-mismatch",
                                format!(
                                    "table {t} of class {x}: margin of {} is {margin}, inclusion_probs has {col}",
                                    spec.register_names[r]
                                ),
                            ));
                        }
                    }
                }
            }
        }
    }

    if params.shared_interactions.len() != layout.shared_blocks.len() {
        out.push(Violation::new(
            "interaction-shape",
            format!(
                "expected {} shared interaction vectors, got {}",
                layout.shared_blocks.len(),
                params.shared_interactions.len()
            ),
        ));
    } else {
        for (s, &b) in layout.shared_blocks.iter().enumerate() {
            let want = interaction_masks(layout.blocks[b].size()).len();
            let got = &params.shared_interactions[s];
            if got.len() != want {
                out.push(Violation::new(
                    "interaction-shape",
                    format!("shared term {s} needs {want} interaction values, got {}", got.len()),
                ));
            } else if got.iter().any(|v| !v.is_finite()) {
                out.push(Violation::new(
                    "non-finite",
                    format!("shared term {s} has a non-finite interaction"),
                ));
            }
        }
    }
    out
}

/// `validate` as a `Result`.
pub fn check_params<T: Scalar>(spec: &ModelSpec, params: &ParameterSet<T>) -> Result<()> {
    let v = validate(spec, params);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(v))
    }
}
