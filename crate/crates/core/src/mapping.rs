//! The ISA-to-IR mapping: buckets of ISA instructions per IR debug location,
//! IR-level energy characterization and phi-node tuning.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfg::detect_loops;
use crate::energy::{instruction_total_energy, EnergyError, EnergyModelParams};
use crate::ir::{build_ir_cfg, debug_index, DebugLoc, EirFunction, EirProgram, IrPos};
use crate::isa::{build_isa_cfg, IsaBlock, IsaProgram};
use crate::lower::{adjacent_assign, AdjacentPolicy};
use crate::scalar::Scalar;

pub const MAP_SCHEMA: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MappingError {
    #[error("untagged ISA instruction `{text}` at {func}:{block}[{index}]")]
    Untagged { func: String, block: String, index: usize, text: String },
    #[error("ISA instruction at {func}:{block}[{index}] carries unknown tag {tag}")]
    UnknownTag { func: String, block: String, index: usize, tag: DebugLoc },
    #[error("{func}:{block}: block has no tagged instruction to attribute fnops to")]
    UntaggedBlock { func: String, block: String },
    #[error("ISA instruction {0:?} appears in {1} buckets")]
    NotDisjoint(IsaRef, usize),
    #[error("ISA instruction {0:?} is in no bucket")]
    NotTotal(IsaRef),
    #[error("no ISA function for IR function {0}")]
    MissingFunction(String),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("{0}")]
    Cfg(String),
}

/// Position of an instruction in an ISA program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IsaRef {
    pub func: usize,
    pub block: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingTable {
    pub pairs: Vec<(IsaRef, DebugLoc)>,
    /// Every IR debug location, with the ISA instructions carrying it.
    pub reverse: BTreeMap<DebugLoc, Vec<IsaRef>>,
}

impl MappingTable {
    pub fn bucket(&self, d: DebugLoc) -> &[IsaRef] {
        self.reverse.get(&d).map_or(&[], Vec::as_slice)
    }

    /// Checks that buckets partition the instructions of `isa`.
    pub fn check(&self, isa: &IsaProgram) -> Result<(), MappingError> {
        let mut seen: BTreeMap<IsaRef, usize> = BTreeMap::new();
        for r in self.reverse.values().flatten() {
            *seen.entry(*r).or_insert(0) += 1;
        }
        for (r, n) in &seen {
            if *n != 1 {
                return Err(MappingError::NotDisjoint(*r, *n));
            }
        }
        for r in isa_refs(isa) {
            if !seen.contains_key(&r) {
                return Err(MappingError::NotTotal(r));
            }
        }
        Ok(())
    }
}

pub fn isa_refs(isa: &IsaProgram) -> impl Iterator<Item = IsaRef> + '_ {
    isa.functions.iter().enumerate().flat_map(|(fi, f)| {
        f.blocks.iter().enumerate().flat_map(move |(bi, b)| {
            (0..b.instrs.len()).map(move |ii| IsaRef { func: fi, block: bi, index: ii })
        })
    })
}

/// Relates every tagged ISA instruction to the IR instruction with the same tag.
pub fn build_mapping(ir: &EirProgram, isa: &IsaProgram) -> Result<MappingTable, MappingError> {
    let mut reverse: BTreeMap<DebugLoc, Vec<IsaRef>> =
        ir.instructions().filter_map(|i| i.dbg).map(|d| (d, Vec::new())).collect();
    let mut pairs = Vec::new();
    for r in isa_refs(isa) {
        let f = &isa.functions[r.func];
        let b = &f.blocks[r.block];
        let i = &b.instrs[r.index];
        let Some(tag) = i.dbg else {
            return Err(MappingError::Untagged {
                func: f.name.clone(),
                block: b.label.clone(),
                index: r.index,
                text: i.to_string(),
            });
        };
        let Some(bucket) = reverse.get_mut(&tag) else {
            return Err(MappingError::UnknownTag {
                func: f.name.clone(),
                block: b.label.clone(),
                index: r.index,
                tag,
            });
        };
        bucket.push(r);
        pairs.push((r, tag));
    }
    let table = MappingTable { pairs, reverse };
    table.check(isa)?;
    Ok(table)
}

/// Gives each untagged fnop the tag of an adjacent instruction.
pub fn attribute_fnops(isa: &IsaProgram, policy: AdjacentPolicy) -> Result<IsaProgram, MappingError> {
    let mut out = isa.clone();
    for f in &mut out.functions {
        for b in &mut f.blocks {
            *b = adjacent_assign(b, policy).ok_or_else(|| MappingError::UntaggedBlock {
                func: f.name.clone(),
                block: b.label.clone(),
            })?;
        }
    }
    Ok(out)
}

/// Energy attributed to IR instructions and IR blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct IrEnergyMap<T> {
    pub per_instr: BTreeMap<DebugLoc, T>,
    /// Function name, then block label.
    pub per_block: BTreeMap<String, BTreeMap<String, T>>,
}

impl<T: Scalar> IrEnergyMap<T> {
    pub fn block(&self, func: &str, block: &str) -> T {
        self.per_block.get(func).and_then(|m| m.get(block)).cloned().unwrap_or_else(T::zero)
    }

    pub fn total(&self) -> T {
        crate::scalar::sum(self.per_instr.values().cloned())
    }

    pub fn block_total(&self) -> T {
        crate::scalar::sum(self.per_block.values().flat_map(|m| m.values().cloned()))
    }

    fn add_block(&mut self, func: &str, block: &str, delta: T) {
        let slot = self
            .per_block
            .entry(func.to_string())
            .or_default()
            .entry(block.to_string())
            .or_insert_with(T::zero);
        *slot = slot.clone() + delta;
    }
}

fn isa_instr_energy<T: Scalar>(
    isa: &IsaProgram,
    r: IsaRef,
    nt: u32,
    params: &EnergyModelParams<T>,
) -> Result<T, EnergyError> {
    let op = isa.functions[r.func].blocks[r.block].instrs[r.index].op;
    instruction_total_energy(op, nt, params)
}

/// Energy of every ISA block, keyed like [`IrEnergyMap::per_block`].
pub fn isa_block_energies<T: Scalar>(
    isa: &IsaProgram,
    nt: u32,
    params: &EnergyModelParams<T>,
) -> Result<BTreeMap<String, BTreeMap<String, T>>, EnergyError> {
    let mut out = BTreeMap::new();
    for f in &isa.functions {
        let mut m = BTreeMap::new();
        for b in &f.blocks {
            m.insert(b.label.clone(), crate::energy::block_energy(b, nt, params)?);
        }
        out.insert(f.name.clone(), m);
    }
    Ok(out)
}

/// Sums the ISA energy of each bucket onto its IR instruction and IR block.
pub fn characterize_ir_energy<T: Scalar>(
    ir: &EirProgram,
    map: &MappingTable,
    isa: &IsaProgram,
    nt: u32,
    params: &EnergyModelParams<T>,
) -> Result<IrEnergyMap<T>, MappingError> {
    let index = debug_index(ir);
    let mut out = IrEnergyMap { per_instr: BTreeMap::new(), per_block: BTreeMap::new() };
    for f in &ir.functions {
        let m = out.per_block.entry(f.name.clone()).or_default();
        for b in &f.blocks {
            m.insert(b.label.clone(), T::zero());
        }
    }
    for (d, bucket) in &map.reverse {
        let mut e = T::zero();
        for r in bucket {
            e = e + isa_instr_energy(isa, *r, nt, params)?;
        }
        if let Some(IrPos { func, block, .. }) = index.get(d) {
            let f = &ir.functions[*func];
            out.add_block(&f.name, &f.blocks[*block].label, e.clone());
        }
        out.per_instr.insert(*d, e);
    }
    Ok(out)
}

/// The IR predecessor of `from_block` whose own (non-phi) instructions have
/// the most ISA instructions in `isa_block`; ties go to the smallest label.
pub fn find_ir_bb<'a>(
    ir_fn: &'a EirFunction,
    from_block: &str,
    isa_block: &IsaBlock,
) -> Option<&'a str> {
    let preds = ir_fn.predecessors();
    let mut best: Option<(usize, &str)> = None;
    let mut candidates: Vec<&str> = preds.get(from_block)?.clone();
    candidates.sort_unstable();
    for p in candidates {
        let own: BTreeSet<DebugLoc> = ir_fn
            .block(p)?
            .instrs
            .iter()
            .filter(|i| !i.is_phi())
            .filter_map(|i| i.dbg)
            .collect();
        let overlap = isa_block.instrs.iter().filter(|i| i.dbg.is_some_and(|d| own.contains(&d))).count();
        if overlap > 0 && best.is_none_or(|(n, _)| overlap > n) {
            best = Some((overlap, p));
        }
    }
    best.map(|(_, p)| p)
}

/// Moves the energy of phi copies hoisted out of a loop from the phi's IR
/// block to the matching IR predecessor.
pub fn tune_phi_nodes<T: Scalar>(
    ir: &EirProgram,
    isa: &IsaProgram,
    map: &MappingTable,
    energy: &IrEnergyMap<T>,
    nt: u32,
    params: &EnergyModelParams<T>,
) -> Result<IrEnergyMap<T>, MappingError> {
    let mut out = energy.clone();
    for f in &ir.functions {
        let fi = isa.function_index(&f.name).ok_or_else(|| MappingError::MissingFunction(f.name.clone()))?;
        let isa_fn = &isa.functions[fi];
        let ir_loops = detect_loops(&build_ir_cfg(f)).map_err(|e| MappingError::Cfg(e.to_string()))?;
        let isa_cfg = build_isa_cfg(isa_fn).map_err(|e| MappingError::Cfg(e.to_string()))?;
        let isa_loops = detect_loops(&isa_cfg).map_err(|e| MappingError::Cfg(e.to_string()))?;
        for (bi, b) in f.blocks.iter().enumerate() {
            for phi in b.phis() {
                let Some(d) = phi.dbg else { continue };
                for r in map.bucket(d) {
                    if r.func != fi || ir_loops.depth(bi) <= isa_loops.depth(r.block) {
                        continue;
                    }
                    if let Some(to) = find_ir_bb(f, &b.label, &isa_fn.blocks[r.block]) {
                        let e = isa_instr_energy(isa, *r, nt, params)?;
                        out.add_block(&f.name, &b.label, T::zero() - e.clone());
                        out.add_block(&f.name, to, e);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// JSON form of a mapping with its energy attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingDump {
    pub schema: u32,
    pub threads: u32,
    /// Debug id to `func:block:index` locations of its ISA instructions.
    pub buckets: BTreeMap<u32, Vec<String>>,
    pub per_instr: BTreeMap<u32, f64>,
    pub per_block: BTreeMap<String, BTreeMap<String, f64>>,
    pub isa_per_block: BTreeMap<String, BTreeMap<String, f64>>,
}

impl MappingDump {
    pub fn new<T: Scalar>(
        isa: &IsaProgram,
        map: &MappingTable,
        energy: &IrEnergyMap<T>,
        isa_blocks: &BTreeMap<String, BTreeMap<String, T>>,
        nt: u32,
    ) -> Self {
        let loc = |r: &IsaRef| {
            let f = &isa.functions[r.func];
            format!("{}:{}:{}", f.name, f.blocks[r.block].label, r.index)
        };
        let f64s = |m: &BTreeMap<String, BTreeMap<String, T>>| {
            m.iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|(b, e)| (b.clone(), e.to_f64_value())).collect()))
                .collect()
        };
        MappingDump {
            schema: MAP_SCHEMA,
            threads: nt,
            buckets: map.reverse.iter().map(|(d, rs)| (d.0, rs.iter().map(loc).collect())).collect(),
            per_instr: energy.per_instr.iter().map(|(d, e)| (d.0, e.to_f64_value())).collect(),
            per_block: f64s(&energy.per_block),
            isa_per_block: f64s(isa_blocks),
        }
    }
}
