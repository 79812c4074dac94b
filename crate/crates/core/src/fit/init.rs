use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{interaction_masks, Layout, ModelSpec, ParameterSet};
use crate::scalar::Scalar;
use crate::Result;

/// Distance kept from the corners of the probability simplex by random starts.
const CORNER_MARGIN: f64 = 0.1;

/// Start 0: split the observed units into `L` equal-mass groups by how many
/// registers they appear in, and use each group's capture proportions.
pub(crate) fn heuristic_start<T: Scalar>(spec: &ModelSpec, layout: &Layout, counts: &[T]) -> Result<ParameterSet<T>> {
    let l = spec.num_classes;
    let k = spec.num_registers();
    let mut order: Vec<usize> = (1..counts.len()).filter(|&p| counts[p] > T::zero()).collect();
    order.sort_by_key(|&p| (p.count_ones(), p));
    let n: T = counts.iter().copied().sum();

    let mut mass = vec![T::zero(); l];
    let mut hits = vec![vec![T::zero(); k]; l];
    let mut cum = T::zero();
    let share = n / T::from_usize(l).unwrap();
    for &p in &order {
        let mut left = counts[p];
        while left > T::zero() {
            let group = ((cum / share).to_usize().unwrap_or(l - 1)).min(l - 1);
            let room = if group == l - 1 {
                left
            } else {
                (share * T::from_usize(group + 1).unwrap() - cum).max(T::zero()).min(left)
            };
            let take = if room > T::zero() { room } else { left };
            mass[group] += take;
            for r in 0..k {
                if (p >> (k - 1 - r)) & 1 == 1 {
                    hits[group][r] += take;
                }
            }
            cum += take;
            left -= take;
        }
    }

    let lo = T::lit(0.05);
    let hi = T::lit(0.95);
    let probs: Vec<Vec<T>> = (0..l)
        .map(|x| {
            (0..k)
                .map(|r| {
                    if mass[x] > T::zero() {
                        (hits[x][r] / mass[x]).clamp_to(lo, hi)
                    } else {
                        T::lit(0.5)
                    }
                })
                .collect()
        })
        .collect();
    let mut weights: Vec<T> = mass.iter().map(|&m| (m / n).max(lo)).collect();
    let total: T = weights.iter().copied().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let mut params = ParameterSet::from_independence(spec, weights, probs)?;
    params.sync_block_margins(layout);
    Ok(params)
}

/// Starts 1.. : seeded uniform draws. Each start owns the ChaCha stream
/// numbered by its index, so a start's values do not depend on which other
/// starts run.
pub(crate) fn random_start<T: Scalar>(
    spec: &ModelSpec,
    layout: &Layout,
    seed: u64,
    start_index: usize,
) -> Result<ParameterSet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start_index as u64);
    let l = spec.num_classes;
    let k = spec.num_registers();

    let raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let weights: Vec<T> = if (l as f64) * CORNER_MARGIN < 1.0 {
        let free = 1.0 - CORNER_MARGIN * l as f64;
        raw.iter().map(|v| T::lit(CORNER_MARGIN + free * v / sum)).collect()
    } else {
        raw.iter().map(|v| T::lit(v / sum)).collect()
    };
    let probs: Vec<Vec<T>> = (0..l)
        .map(|_| (0..k).map(|_| T::lit(rng.random_range(CORNER_MARGIN..1.0 - CORNER_MARGIN))).collect())
        .collect();
    let mut params = ParameterSet::from_independence(spec, weights, probs)?;
    for (t, &b) in layout.class_specific_blocks.iter().enumerate() {
        let cells = layout.blocks[b].num_cells();
        for x in 0..l {
            let raw: Vec<f64> = (0..cells).map(|_| rng.random_range(CORNER_MARGIN..1.0)).collect();
            let s: f64 = raw.iter().sum();
            params.block_tables[t][x] = raw.iter().map(|v| T::lit(v / s)).collect();
        }
    }
    for (s, &b) in layout.shared_blocks.iter().enumerate() {
        let n = interaction_masks(layout.blocks[b].size()).len();
        params.shared_interactions[s] = (0..n).map(|_| T::lit(rng.random_range(-0.5..0.5))).collect();
    }
    params.sync_block_margins(layout);
    Ok(params)
}
