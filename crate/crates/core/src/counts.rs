//! Observed counts over capture profiles and their CSV form
//! (`profile,count`, profile as a bitstring whose first character is the
//! first register).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CaptureProfile, MAX_REGISTERS};

/// Counts of the observable profiles. The all-absent profile is never stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureCounts {
    k: usize,
    /// Dense, indexed by profile index; entry 0 is always zero.
    counts: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    profile: String,
    count: u64,
}

impl CaptureCounts {
    /// Empty table for `k` registers.
    pub fn zeros(k: usize) -> Result<Self> {
        if k == 0 || k > MAX_REGISTERS {
            return Err(Error::Capacity {
                registers: k,
                max: MAX_REGISTERS,
            });
        }
        Ok(Self {
            k,
            counts: vec![0; 1 << k],
        })
    }

    /// Build from dense counts indexed by profile; `dense[0]` must be zero.
    pub fn from_dense(k: usize, dense: Vec<u64>) -> Result<Self> {
        let mut out = Self::zeros(k)?;
        if dense.len() != out.counts.len() {
            return Err(Error::Dimension(format!(
                "expected {} profile counts for {k} registers, got {}",
                out.counts.len(),
                dense.len()
            )));
        }
        if dense[0] != 0 {
            return Err(Error::Malformed(
                "the all-absent profile cannot be observed".into(),
            ));
        }
        out.counts = dense;
        Ok(out)
    }

    pub fn from_pairs<'a>(k: usize, pairs: impl IntoIterator<Item = (&'a str, u64)>) -> Result<Self> {
        let mut out = Self::zeros(k)?;
        let mut seen = vec![false; 1 << k];
        for (text, count) in pairs {
            let profile: CaptureProfile = text.parse()?;
            out.insert(&profile, count, &mut seen)?;
        }
        Ok(out)
    }

    fn insert(&mut self, profile: &CaptureProfile, count: u64, seen: &mut [bool]) -> Result<()> {
        if profile.len() != self.k {
            return Err(Error::Dimension(format!(
                "profile {profile} has {} registers, expected {}",
                profile.len(),
                self.k
            )));
        }
        if profile.is_unobserved() {
            return Err(Error::Malformed(format!(
                "profile {profile} (absent from every register) cannot be observed"
            )));
        }
        let i = profile.index();
        if seen[i] {
            return Err(Error::Malformed(format!("profile {profile} listed twice")));
        }
        seen[i] = true;
        self.counts[i] = count;
        Ok(())
    }

    pub fn num_registers(&self) -> usize {
        self.k
    }

    /// Total number of observed units.
    pub fn n(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn get(&self, profile: &CaptureProfile) -> u64 {
        if profile.len() != self.k {
            return 0;
        }
        self.counts[profile.index()]
    }

    pub fn dense(&self) -> &[u64] {
        &self.counts
    }

    /// Observable profiles with their counts, in bitstring order.
    pub fn iter(&self) -> impl Iterator<Item = (CaptureProfile, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .skip(1)
            .map(move |(i, &c)| (CaptureProfile::from_index(i, self.k), c))
    }

    pub fn to_map(&self) -> BTreeMap<CaptureProfile, u64> {
        self.iter().collect()
    }

    /// Every count multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        Self {
            k: self.k,
            counts: self.counts.iter().map(|c| c * factor).collect(),
        }
    }

    /// Parse the counts CSV. The register count is taken from the first row
    /// unless `expected_k` is given.
    pub fn read_csv<R: Read>(reader: R, expected_k: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["profile", "count"] {
            return Err(Error::Malformed(format!(
                "counts CSV header must be 'profile,count', got {:?}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut out: Option<(Self, Vec<bool>)> = None;
        for row in rdr.deserialize::<Row>() {
            let row = row.map_err(csv_err)?;
            let profile: CaptureProfile = row.profile.parse()?;
            let (table, seen) = match &mut out {
                Some(t) => t,
                None => {
                    let k = expected_k.unwrap_or(profile.len());
                    let table = Self::zeros(k)?;
                    let seen = vec![false; 1 << k];
                    out.insert((table, seen))
                }
            };
            table.insert(&profile, row.count, seen)?;
        }
        match out {
            Some((table, _)) => Ok(table),
            None => Err(Error::Malformed("counts CSV has no rows".into())),
        }
    }

    /// Write every observable profile, zero counts included.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (profile, count) in self.iter() {
            w.serialize(Row {
                profile: profile.to_string(),
                count,
            })
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Malformed(e.to_string())
}
