use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::params::{check_params, ParameterSet};
use super::spec::{interaction_masks, BlockKind, Layout, ModelSpec, MAX_REGISTERS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Presence/absence pattern of one unit across the registers.
///
/// Written as a bitstring whose first character is the first register.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CaptureProfile {
    pub bits: Vec<bool>,
}

impl CaptureProfile {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_index(index: usize, k: usize) -> Self {
        Self {
            bits: (0..k).map(|r| (index >> (k - 1 - r)) & 1 == 1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Profile index with the first register as the most significant bit, so
    /// numeric order matches bitstring order.
    pub fn index(&self) -> usize {
        self.bits.iter().fold(0, |acc, &b| (acc << 1) | b as usize)
    }

    pub fn is_unobserved(&self) -> bool {
        self.bits.iter().all(|b| !b)
    }
}

impl fmt::Display for CaptureProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for CaptureProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.len() > MAX_REGISTERS {
            return Err(Error::Malformed(format!("invalid capture profile {s:?}")));
        }
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::Malformed(format!("invalid capture profile {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }
}

impl Serialize for CaptureProfile {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CaptureProfile {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-class distribution of each block over its cells: `[class][block][cell]`.
pub(crate) fn block_distributions<T: Scalar>(
    layout: &Layout,
    params: &ParameterSet<T>,
) -> Vec<Vec<Vec<T>>> {
    (0..layout.num_classes)
        .map(|x| {
            layout
                .blocks
                .iter()
                .map(|block| match block.kind {
                    BlockKind::Single => {
                        let p = params.inclusion_probs[x][block.registers[0]];
                        vec![T::one() - p, p]
                    }
                    BlockKind::ClassSpecific { table } => params.block_tables[table][x].clone(),
                    BlockKind::Shared { shared } => {
                        let probs: Vec<T> = block
                            .registers
                            .iter()
                            .map(|&r| params.inclusion_probs[x][r])
                            .collect();
                        shared_block_distribution(&probs, &params.shared_interactions[shared])
                    }
                })
                .collect()
        })
        .collect()
}

/// Joint distribution of a shared block: main effects from `probs`, plus the
/// log-linear interactions added for every subset contained in the cell, then
/// renormalized.
pub(crate) fn shared_block_distribution<T: Scalar>(probs: &[T], interactions: &[T]) -> Vec<T> {
    let m = probs.len();
    let masks = interaction_masks(m);
    let mut weights: Vec<T> = (0..1usize << m)
        .map(|cell| {
            let mut w = T::one();
            for (j, &p) in probs.iter().enumerate() {
                w *= if (cell >> (m - 1 - j)) & 1 == 1 { p } else { T::one() - p };
            }
            let mut eta = T::zero();
            for (mask, &lambda) in masks.iter().zip(interactions) {
                if cell & mask == *mask {
                    eta += lambda;
                }
            }
            w * eta.exp()
        })
        .collect();
    let z: T = weights.iter().copied().sum();
    if z > T::zero() {
        for w in &mut weights {
            *w /= z;
        }
    }
    weights
}

/// `P(profile | class)` for every profile index: `[class][profile]`.
pub(crate) fn class_conditional<T: Scalar>(layout: &Layout, params: &ParameterSet<T>) -> Vec<Vec<T>> {
    let dists = block_distributions(layout, params);
    dists
        .iter()
        .map(|blocks| {
            (0..layout.num_profiles())
                .map(|profile| {
                    blocks
                        .iter()
                        .enumerate()
                        .fold(T::one(), |acc, (b, dist)| acc * dist[layout.cell(profile, b)])
                })
                .collect()
        })
        .collect()
}

/// Mixture probability of every profile index.
pub(crate) fn mixture<T: Scalar>(weights: &[T], conditional: &[Vec<T>]) -> Vec<T> {
    let n = conditional.first().map_or(0, Vec::len);
    (0..n)
        .map(|profile| {
            weights
                .iter()
                .zip(conditional)
                .fold(T::zero(), |acc, (&w, row)| acc + w * row[profile])
        })
        .collect()
}

fn prepare<T: Scalar>(spec: &ModelSpec, params: &ParameterSet<T>) -> Result<Layout> {
    if spec.num_registers() > MAX_REGISTERS {
        return Err(Error::Capacity {
            registers: spec.num_registers(),
            max: MAX_REGISTERS,
        });
    }
    check_params(spec, params)?;
    Layout::new(spec)
}

/// Probability that a unit drawn from the model shows `profile`.
pub fn cell_probability<T: Scalar>(
    spec: &ModelSpec,
    params: &ParameterSet<T>,
    profile: &CaptureProfile,
) -> Result<T> {
    if profile.len() != spec.num_registers() {
        return Err(Error::Dimension(format!(
            "profile {profile} has {} registers, spec has {}",
            profile.len(),
            spec.num_registers()
        )));
    }
    let layout = prepare(spec, params)?;
    let dists = block_distributions(&layout, params);
    let idx = profile.index();
    Ok(params
        .class_weights
        .iter()
        .zip(&dists)
        .fold(T::zero(), |acc, (&w, blocks)| {
            acc + w
                * blocks
                    .iter()
                    .enumerate()
                    .fold(T::one(), |a, (b, d)| a * d[layout.cell(idx, b)])
        }))
}

/// The complete table over all `2^K` profiles, including the unobservable one.
pub fn full_distribution<T: Scalar>(
    spec: &ModelSpec,
    params: &ParameterSet<T>,
) -> Result<BTreeMap<CaptureProfile, T>> {
    let layout = prepare(spec, params)?;
    let probs = mixture(&params.class_weights, &class_conditional(&layout, params));
    let k = layout.num_registers;
    Ok(probs
        .into_iter()
        .enumerate()
        .map(|(i, p)| (CaptureProfile::from_index(i, k), p))
        .collect())
}

/// Probability of being missed by every register.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissProbability<T> {
    pub overall: T,
    pub per_class: Vec<T>,
}

pub fn miss_probability<T: Scalar>(
    spec: &ModelSpec,
    params: &ParameterSet<T>,
) -> Result<MissProbability<T>> {
    let layout = prepare(spec, params)?;
    Ok(miss_probability_unchecked(&layout, params))
}

pub(crate) fn miss_probability_unchecked<T: Scalar>(
    layout: &Layout,
    params: &ParameterSet<T>,
) -> MissProbability<T> {
    let per_class: Vec<T> = block_distributions(layout, params)
        .iter()
        .map(|blocks| blocks.iter().fold(T::one(), |acc, d| acc * d[0]))
        .collect();
    let overall = params
        .class_weights
        .iter()
        .zip(&per_class)
        .fold(T::zero(), |acc, (&w, &q)| acc + w * q);
    MissProbability { overall, per_class }
}

/// Marginal inclusion probability of each register in each class, after any
/// shared interaction is applied: `[class][register]`.
pub fn marginal_inclusion<T: Scalar>(layout: &Layout, params: &ParameterSet<T>) -> Vec<Vec<T>> {
    let dists = block_distributions(layout, params);
    (0..layout.num_classes)
        .map(|x| {
            (0..layout.num_registers)
                .map(|r| {
                    let (b, j) = layout.register_block[r];
                    let block = &layout.blocks[b];
                    dists[x][b]
                        .iter()
                        .enumerate()
                        .filter(|(cell, _)| block.bit(*cell, j))
                        .fold(T::zero(), |acc, (_, &v)| acc + v)
                })
                .collect()
        })
        .collect()
}

/// Log odds ratio between the first two registers of a block, per class.
///
/// For blocks of more than two registers this is the conditional log odds
/// ratio with the remaining block registers absent.
pub fn block_log_odds_ratios<T: Scalar>(
    layout: &Layout,
    params: &ParameterSet<T>,
    block: usize,
) -> Vec<T> {
    let m = layout.blocks[block].size();
    assert!(m >= 2, "odds ratio needs a block of at least two registers");
    let hi = 1 << (m - 1);
    let lo = 1 << (m - 2);
    block_distributions(layout, params)
        .iter()
        .map(|blocks| {
            let d = &blocks[block];
            (d[hi | lo].ln() + d[0].ln()) - (d[hi].ln() + d[lo].ln())
        })
        .collect()
}
