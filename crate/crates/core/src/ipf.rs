//! Iterative proportional fitting of a dense table to a set of margins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpfControl {
    /// Largest tolerated margin error, relative to the table total.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IpfControl {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 1000,
        }
    }
}

/// A margin of the table: `map[cell]` is the margin cell that `cell` adds into.
#[derive(Debug, Clone)]
pub struct Margin<T> {
    pub map: Vec<usize>,
    pub target: Vec<T>,
}

impl<T: Scalar> Margin<T> {
    fn sums(&self, table: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.target.len()];
        for (&m, &v) in self.map.iter().zip(table) {
            out[m] += v;
        }
        out
    }
}

/// Scale `table` in place until every margin matches its target.
///
/// The starting table fixes the interactions that no margin constrains; a
/// table of ones yields the maximum likelihood fit of the hierarchical
/// log-linear model generated by the margins. Returns the number of cycles.
pub fn fit<T: Scalar>(table: &mut [T], margins: &[Margin<T>], control: IpfControl) -> Result<usize> {
    let total: T = margins
        .first()
        .map(|m| m.target.iter().copied().sum())
        .unwrap_or_else(T::one);
    let tol = T::lit(control.tol) * total.max(T::min_positive_value());
    let mut error = T::infinity();
    for iter in 1..=control.max_iter {
        for margin in margins {
            let sums = margin.sums(table);
            for (&m, v) in margin.map.iter().zip(table.iter_mut()) {
                *v = if sums[m] > T::zero() {
                    *v * (margin.target[m] / sums[m])
                } else {
                    T::zero()
                };
            }
        }
        error = margins
            .iter()
            .flat_map(|margin| {
                let sums = margin.sums(table);
                sums.into_iter()
                    .zip(margin.target.iter().copied())
                    .map(|(s, t)| (s - t).abs())
                    .collect::<Vec<_>>()
            })
            .fold(T::zero(), T::max);
        if error <= tol {
            return Ok(iter);
        }
    }
    Err(Error::IpfNonConvergence {
        iterations: control.max_iter,
        error: (error / total.max(T::min_positive_value())).as_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-way margins of a 2x2x2 table (x, c, d) for the model with all
    /// two-factor interactions.
    fn no_three_way(observed: &[f64]) -> Vec<Margin<f64>> {
        let idx = |f: fn(usize, usize, usize) -> usize| (0..8).map(|i| f(i >> 2, (i >> 1) & 1, i & 1)).collect::<Vec<_>>();
        let maps = [
            idx(|x, c, _| x * 2 + c),
            idx(|x, _, d| x * 2 + d),
            idx(|_, c, d| c * 2 + d),
        ];
        maps.into_iter()
            .map(|map| {
                let mut target = vec![0.0; 4];
                for (&m, &v) in map.iter().zip(observed) {
                    target[m] += v;
                }
                Margin { map, target }
            })
            .collect()
    }

    #[test]
    fn reproduces_margins_and_equalizes_odds_ratios() {
        let observed = [30.0, 10.0, 12.0, 25.0, 8.0, 20.0, 15.0, 40.0];
        let margins = no_three_way(&observed);
        let mut table = vec![1.0; 8];
        fit(&mut table, &margins, IpfControl::default()).unwrap();
        for m in &margins {
            for (s, t) in m.sums(&table).iter().zip(&m.target) {
                assert!((s - t).abs() < 1e-8);
            }
        }
        let lor = |x: usize| {
            let t = |c: usize, d: usize| table[x * 4 + c * 2 + d];
            (t(1, 1) * t(0, 0) / (t(1, 0) * t(0, 1))).ln()
        };
        assert!((lor(0) - lor(1)).abs() < 1e-8);
    }

    #[test]
    fn table_already_in_model_is_a_fixed_point() {
        // per-class independence with different margins: zero pooled
        // interaction in each class
        let mut observed = Vec::new();
        for (n, pc, pd) in [(40.0, 0.2, 0.3), (60.0, 0.8, 0.7)] {
            for c in 0..2 {
                for d in 0..2 {
                    let a = if c == 1 { pc } else { 1.0 - pc };
                    let b = if d == 1 { pd } else { 1.0 - pd };
                    observed.push(n * a * b);
                }
            }
        }
        let margins = no_three_way(&observed);
        let mut table = vec![1.0; 8];
        fit(&mut table, &margins, IpfControl { tol: 1e-13, max_iter: 10_000 }).unwrap();
        for (a, b) in table.iter().zip(&observed) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let observed = [30.0, 10.0, 12.0, 25.0, 8.0, 20.0, 15.0, 40.0];
        let margins = no_three_way(&observed);
        let mut table = vec![1.0; 8];
        let err = fit(&mut table, &margins, IpfControl { tol: 1e-15, max_iter: 2 }).unwrap_err();
        assert!(matches!(err, Error::IpfNonConvergence { iterations: 2, .. }));
    }
}
