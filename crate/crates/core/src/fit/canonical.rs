use std::cmp::Ordering;

use crate::model::{marginal_inclusion, Layout, ModelSpec, ParameterSet};
use crate::scalar::Scalar;
use crate::Result;

/// Class order that sorts classes by mean marginal inclusion probability,
/// ties broken by the lexicographic order of their margins, then by the
/// original index.
pub(crate) fn canonical_order<T: Scalar>(layout: &Layout, params: &ParameterSet<T>) -> Vec<usize> {
    let margins = marginal_inclusion(layout, params);
    let k = T::from_usize(layout.num_registers).unwrap();
    let means: Vec<T> = margins.iter().map(|row| row.iter().copied().sum::<T>() / k).collect();
    let mut order: Vec<usize> = (0..layout.num_classes).collect();
    order.sort_by(|&a, &b| {
        means[a]
            .partial_cmp(&means[b])
            .unwrap_or(Ordering::Equal)
            .then_with(|| {
                margins[a]
                    .iter()
                    .zip(&margins[b])
                    .map(|(u, v)| u.partial_cmp(v).unwrap_or(Ordering::Equal))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
            .then(a.cmp(&b))
    });
    order
}

/// Resolve label switching: classes ordered by ascending mean inclusion
/// probability across registers.
pub fn canonicalize<T: Scalar>(spec: &ModelSpec, params: &ParameterSet<T>) -> Result<ParameterSet<T>> {
    let layout = Layout::new(spec)?;
    Ok(params.permute_classes(&canonical_order(&layout, params)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario1(spec: &ModelSpec) -> ParameterSet<f64> {
        ParameterSet::from_independence(
            spec,
            vec![0.4, 0.6],
            vec![vec![0.25, 0.20, 0.21, 0.29], vec![0.70, 0.82, 0.86, 0.83]],
        )
        .unwrap()
    }

    #[test]
    fn swapped_classes_are_reordered() {
        let spec = ModelSpec::independence(["A", "B", "C", "D"], 2);
        let params = scenario1(&spec);
        let swapped = params.permute_classes(&[1, 0]);
        assert_eq!(swapped.class_weights, vec![0.6, 0.4]);
        let canon = canonicalize(&spec, &swapped).unwrap();
        assert_eq!(canon, params);
        // means 0.2375 and 0.8025
        let mean = |row: &Vec<f64>| row.iter().sum::<f64>() / 4.0;
        assert!((mean(&canon.inclusion_probs[0]) - 0.2375).abs() < 1e-15);
        assert!((mean(&canon.inclusion_probs[1]) - 0.8025).abs() < 1e-15);
    }

    #[test]
    fn canonical_is_a_fixed_point() {
        let spec = ModelSpec::independence(["A", "B", "C", "D"], 2);
        let params = scenario1(&spec);
        assert_eq!(canonicalize(&spec, &params).unwrap(), params);
    }

    #[test]
    fn identical_classes_keep_their_order() {
        let spec = ModelSpec::independence(["A", "B"], 2);
        let params = ParameterSet::from_independence(&spec, vec![0.3, 0.7], vec![vec![0.4, 0.5]; 2]).unwrap();
        assert_eq!(canonicalize(&spec, &params).unwrap(), params);
    }

    #[test]
    fn equal_means_use_lexicographic_margins() {
        let spec = ModelSpec::independence(["A", "B"], 2);
        let params =
            ParameterSet::from_independence(&spec, vec![0.3, 0.7], vec![vec![0.6, 0.4], vec![0.4, 0.6]]).unwrap();
        let canon = canonicalize(&spec, &params).unwrap();
        assert_eq!(canon.inclusion_probs[0], vec![0.4, 0.6]);
        assert_eq!(canon.class_weights, vec![0.7, 0.3]);
    }

    #[test]
    fn block_tables_move_with_their_class() {
        let spec = ModelSpec::parse_notation("[AX][BX][CDX]", 2).unwrap();
        let base = scenario1(&ModelSpec::independence(["A", "B", "C", "D"], 2));
        let params = ParameterSet::from_independence(&spec, base.class_weights, base.inclusion_probs).unwrap();
        let swapped = params.permute_classes(&[1, 0]);
        let canon = canonicalize(&spec, &swapped).unwrap();
        assert_eq!(canon.block_tables, params.block_tables);
    }
}
