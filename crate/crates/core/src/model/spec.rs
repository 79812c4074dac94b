use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::Violation;
use crate::error::{Error, Result};

/// Upper bound on the number of registers for dense enumeration of profiles.
pub const MAX_REGISTERS: usize = 20;

/// A direct association between two or more registers that survives
/// conditioning on the latent class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependenceTerm {
    pub registers: Vec<String>,
    /// `true`: a separate joint table per class (`[CDX]`).
    /// `false`: one log-linear interaction shared by all classes (`[CD]`).
    pub class_specific: bool,
}

impl DependenceTerm {
    pub fn shared<S: Into<String>>(registers: impl IntoIterator<Item = S>) -> Self {
        Self {
            registers: registers.into_iter().map(Into::into).collect(),
            class_specific: false,
        }
    }

    pub fn class_specific<S: Into<String>>(registers: impl IntoIterator<Item = S>) -> Self {
        Self {
            registers: registers.into_iter().map(Into::into).collect(),
            class_specific: true,
        }
    }
}

/// Registers, number of latent classes and local dependence terms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(rename = "registers")]
    pub register_names: Vec<String>,
    #[serde(rename = "classes")]
    pub num_classes: usize,
    #[serde(rename = "dependence", default)]
    pub dependence_terms: Vec<DependenceTerm>,
}

impl ModelSpec {
    /// Conditional independence given the latent class.
    pub fn independence<S: Into<String>>(
        registers: impl IntoIterator<Item = S>,
        num_classes: usize,
    ) -> Self {
        Self {
            register_names: registers.into_iter().map(Into::into).collect(),
            num_classes,
            dependence_terms: Vec::new(),
        }
    }

    pub fn with_term(mut self, term: DependenceTerm) -> Self {
        self.dependence_terms.push(term);
        self
    }

    pub fn num_registers(&self) -> usize {
        self.register_names.len()
    }

    pub fn register_index(&self, name: &str) -> Option<usize> {
        self.register_names.iter().position(|r| r == name)
    }

    pub fn has_shared_terms(&self) -> bool {
        self.dependence_terms.iter().any(|t| !t.class_specific)
    }

    /// Every structural problem with the spec, empty when it is usable.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.register_names.len() < 2 {
            out.push(Violation::new(
                "too-few-registers",
                format!("need at least 2 registers, got {}", self.register_names.len()),
            ));
        }
        if self.register_names.len() > MAX_REGISTERS {
            out.push(Violation::new(
                "too-many-registers",
                format!("at most {MAX_REGISTERS} registers are supported"),
            ));
        }
        let mut names = BTreeSet::new();
        for name in &self.register_names {
            if !names.insert(name.as_str()) {
                out.push(Violation::new(
                    "duplicate-register",
                    format!("register {name:?} declared twice"),
                ));
            }
        }
        if self.num_classes == 0 {
            out.push(Violation::new("no-classes", "need at least one latent class"));
        }

        let mut used = BTreeSet::new();
        let mut seen_terms: Vec<BTreeSet<&str>> = Vec::new();
        for (t, term) in self.dependence_terms.iter().enumerate() {
            if term.registers.len() < 2 {
                out.push(Violation::new(
                    "term-too-small",
                    format!("dependence term {t} involves fewer than 2 registers"),
                ));
            }
            let set: BTreeSet<&str> = term.registers.iter().map(String::as_str).collect();
            if set.len() != term.registers.len() {
                out.push(Violation::new(
                    "duplicate-register",
                    format!("dependence term {t} lists a register twice"),
                ));
            }
            if seen_terms.contains(&set) {
                out.push(Violation::new(
                    "duplicate-term",
                    format!("dependence term {t} repeats an earlier term"),
                ));
            } else {
                for name in &set {
                    if self.register_index(name).is_none() {
                        out.push(Violation::new(
                            "unknown-register",
                            format!("dependence term {t} names undeclared register {name:?}"),
                        ));
                    } else if !used.insert(*name) {
                        out.push(Violation::new(
                            "register-in-multiple-terms",
                            format!("register {name:?} appears in more than one dependence term"),
                        ));
                    }
                }
                seen_terms.push(set);
            }
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(v))
        }
    }

    /// Log-linear notation such as `[AX][BX][CX][DX][CD]` or `[AX][BX][CDX]`.
    ///
    /// With a single class the latent symbol is dropped (`[A][B]`).
    pub fn notation(&self) -> String {
        let x = if self.num_classes > 1 { "X" } else { "" };
        let layout = match Layout::new(self) {
            Ok(l) => l,
            Err(_) => return "<invalid>".to_string(),
        };
        let mut out = String::new();
        for block in &layout.blocks {
            match block.kind {
                BlockKind::ClassSpecific { .. } => {
                    out.push('[');
                    for &r in &block.registers {
                        out.push_str(&self.register_names[r]);
                    }
                    out.push_str(x);
                    out.push(']');
                }
                _ => {
                    for &r in &block.registers {
                        out.push('[');
                        out.push_str(&self.register_names[r]);
                        out.push_str(x);
                        out.push(']');
                    }
                }
            }
        }
        for term in self.dependence_terms.iter().filter(|t| !t.class_specific) {
            out.push('[');
            for r in &term.registers {
                out.push_str(r);
            }
            out.push(']');
        }
        out
    }

    /// Parse bracket notation with single-letter register names and `X` as
    /// the latent variable. Registers are ordered by first appearance.
    ///
    /// A bracket containing `X` and two or more registers is a class-specific
    /// term; a bracket without `X` and two or more registers is a shared term.
    pub fn parse_notation(notation: &str, num_classes: usize) -> Result<Self> {
        let mut registers: Vec<String> = Vec::new();
        let mut terms = Vec::new();
        let mut with_latent: Vec<String> = Vec::new();
        let mut rest = notation.trim();
        if rest.is_empty() {
            return Err(Error::Malformed("empty model notation".into()));
        }
        while !rest.is_empty() {
            let body_end = match (rest.strip_prefix('['), rest.find(']')) {
                (Some(_), Some(end)) => end,
                _ => {
                    return Err(Error::Malformed(format!(
                        "expected '[...]' in model notation near {rest:?}"
                    )))
                }
            };
            let body = &rest[1..body_end];
            rest = rest[body_end + 1..].trim_start();

            let has_latent = body.contains('X');
            let members: Vec<String> = body
                .chars()
                .filter(|c| !c.is_whitespace() && *c != 'X')
                .map(|c| c.to_string())
                .collect();
            if members.is_empty() {
                return Err(Error::Malformed(format!("bracket [{body}] names no register")));
            }
            if let Some(bad) = members.iter().find(|m| !m.chars().all(|c| c.is_ascii_alphabetic())) {
                return Err(Error::Malformed(format!("invalid register symbol {bad:?}")));
            }
            for m in &members {
                if has_latent {
                    if with_latent.contains(m) {
                        return Err(Error::Malformed(format!(
                            "register {m} appears in more than one bracket with X"
                        )));
                    }
                    with_latent.push(m.clone());
                }
                if !registers.contains(m) {
                    registers.push(m.clone());
                }
            }
            if members.len() >= 2 {
                terms.push(DependenceTerm {
                    registers: members,
                    class_specific: has_latent,
                });
            }
        }
        let spec = ModelSpec {
            register_names: registers,
            num_classes,
            dependence_terms: terms,
        };
        spec.check()?;
        Ok(spec)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.notation())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Single,
    /// Index into the class-specific term list (and `ParameterSet::block_tables`).
    ClassSpecific { table: usize },
    /// Index into the shared term list (and `ParameterSet::shared_interactions`).
    Shared { shared: usize },
}

/// A group of registers whose joint distribution within a class is modelled
/// as one factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    /// Register indices in term order; the first is the most significant bit
    /// of the block cell index.
    pub registers: Vec<usize>,
    pub kind: BlockKind,
}

impl Block {
    pub fn size(&self) -> usize {
        self.registers.len()
    }

    pub fn num_cells(&self) -> usize {
        1 << self.registers.len()
    }

    /// Block cell index of a full profile index over `k` registers.
    #[inline]
    pub fn cell_of(&self, profile: usize, k: usize) -> usize {
        let mut cell = 0;
        for &r in &self.registers {
            cell = (cell << 1) | ((profile >> (k - 1 - r)) & 1);
        }
        cell
    }

    /// Whether position `j` of the block (0 = first register) is set in `cell`.
    #[inline]
    pub fn bit(&self, cell: usize, j: usize) -> bool {
        (cell >> (self.size() - 1 - j)) & 1 == 1
    }
}

/// Interaction subsets of a shared block with `m` registers: all block-cell
/// masks with at least two bits set, ascending.
pub fn interaction_masks(m: usize) -> Vec<usize> {
    (0..1usize << m).filter(|s| s.count_ones() >= 2).collect()
}

/// Factorization of the class-conditional distribution into blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub num_registers: usize,
    pub num_classes: usize,
    pub blocks: Vec<Block>,
    /// For each register, the block holding it and its position in that block.
    pub register_block: Vec<(usize, usize)>,
    /// Block index of each class-specific term, in term order.
    pub class_specific_blocks: Vec<usize>,
    /// Block index of each shared term, in term order.
    pub shared_blocks: Vec<usize>,
    /// Precomputed block cell for every (profile, block).
    cells: Vec<usize>,
}

impl Layout {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.check()?;
        let k = spec.num_registers();
        let mut term_of = vec![None; k];
        for (t, term) in spec.dependence_terms.iter().enumerate() {
            for name in &term.registers {
                let r = spec.register_index(name).expect("checked");
                term_of[r] = Some(t);
            }
        }

        let mut cs_index = vec![None; spec.dependence_terms.len()];
        let mut sh_index = vec![None; spec.dependence_terms.len()];
        let (mut ncs, mut nsh) = (0, 0);
        for (t, term) in spec.dependence_terms.iter().enumerate() {
            if term.class_specific {
                cs_index[t] = Some(ncs);
                ncs += 1;
            } else {
                sh_index[t] = Some(nsh);
                nsh += 1;
            }
        }

        let mut blocks: Vec<Block> = Vec::new();
        let mut term_block = vec![None; spec.dependence_terms.len()];
        let mut register_block = vec![(0, 0); k];
        for r in 0..k {
            match term_of[r] {
                None => {
                    register_block[r] = (blocks.len(), 0);
                    blocks.push(Block {
                        registers: vec![r],
                        kind: BlockKind::Single,
                    });
                }
                Some(t) => {
                    if term_block[t].is_some() {
                        continue;
                    }
                    let term = &spec.dependence_terms[t];
                    let registers: Vec<usize> = term
                        .registers
                        .iter()
                        .map(|n| spec.register_index(n).expect("checked"))
                        .collect();
                    let kind = match (cs_index[t], sh_index[t]) {
                        (Some(table), _) => BlockKind::ClassSpecific { table },
                        (_, Some(shared)) => BlockKind::Shared { shared },
                        _ => unreachable!(),
                    };
                    let b = blocks.len();
                    for (j, &reg) in registers.iter().enumerate() {
                        register_block[reg] = (b, j);
                    }
                    term_block[t] = Some(b);
                    blocks.push(Block { registers, kind });
                }
            }
        }

        let class_specific_blocks = (0..spec.dependence_terms.len())
            .filter(|&t| cs_index[t].is_some())
            .map(|t| term_block[t].expect("every term gets a block"))
            .collect();
        let shared_blocks = (0..spec.dependence_terms.len())
            .filter(|&t| sh_index[t].is_some())
            .map(|t| term_block[t].expect("every term gets a block"))
            .collect();

        let n_profiles = 1usize << k;
        let mut cells = Vec::with_capacity(n_profiles * blocks.len());
        for profile in 0..n_profiles {
            for block in &blocks {
                cells.push(block.cell_of(profile, k));
            }
        }

        Ok(Self {
            num_registers: k,
            num_classes: spec.num_classes,
            blocks,
            register_block,
            class_specific_blocks,
            shared_blocks,
            cells,
        })
    }

    pub fn num_profiles(&self) -> usize {
        1 << self.num_registers
    }

    #[inline]
    pub fn cell(&self, profile: usize, block: usize) -> usize {
        self.cells[profile * self.blocks.len() + block]
    }
}
