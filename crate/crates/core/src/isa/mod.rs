//! XS-lite: the small target ISA, its timing rules, ISA-level CFGs and the
//! static fetch-no-op placement.

mod text;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfg::Cfg;
use crate::ir::{CmpPred, DebugLoc, ThreadDecl, DEFAULT_ENTRY};

pub use text::parse_isa;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Opcode {
    Ldc,
    Add,
    Sub,
    Mul,
    Divu,
    Remu,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Eq,
    Ltu,
    Lts,
    Ldw,
    Stw,
    Bf,
    Bt,
    Bu,
    Bl,
    Retsp,
    Mov,
    Out,
    In,
    Emitid,
    Fnop,
    Halt,
}

/// Coarse energy class of an opcode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpClass {
    Alu,
    Mem,
    Branch,
    Comm,
    Div,
    Fnop,
}

impl Opcode {
    pub const ALL: [Opcode; 27] = [
        Opcode::Ldc,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Mul,
        Opcode::Divu,
        Opcode::Remu,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Shl,
        Opcode::Shr,
        Opcode::Eq,
        Opcode::Ltu,
        Opcode::Lts,
        Opcode::Ldw,
        Opcode::Stw,
        Opcode::Bf,
        Opcode::Bt,
        Opcode::Bu,
        Opcode::Bl,
        Opcode::Retsp,
        Opcode::Mov,
        Opcode::Out,
        Opcode::In,
        Opcode::Emitid,
        Opcode::Fnop,
        Opcode::Halt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Opcode::Ldc => "ldc",
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Mul => "mul",
            Opcode::Divu => "divu",
            Opcode::Remu => "remu",
            Opcode::And => "and",
            Opcode::Or => "or",
            Opcode::Xor => "xor",
            Opcode::Shl => "shl",
            Opcode::Shr => "shr",
            Opcode::Eq => "eq",
            Opcode::Ltu => "ltu",
            Opcode::Lts => "lts",
            Opcode::Ldw => "ldw",
            Opcode::Stw => "stw",
            Opcode::Bf => "bf",
            Opcode::Bt => "bt",
            Opcode::Bu => "bu",
            Opcode::Bl => "bl",
            Opcode::Retsp => "retsp",
            Opcode::Mov => "mov",
            Opcode::Out => "out",
            Opcode::In => "in",
            Opcode::Emitid => "emitid",
            Opcode::Fnop => "fnop",
            Opcode::Halt => "halt",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Opcode::ALL.iter().copied().find(|o| o.name() == s)
    }

    pub fn class(self) -> OpClass {
        match self {
            Opcode::Ldw | Opcode::Stw => OpClass::Mem,
            Opcode::Bf | Opcode::Bt | Opcode::Bu | Opcode::Bl | Opcode::Retsp | Opcode::Halt => {
                OpClass::Branch
            }
            Opcode::Out | Opcode::In | Opcode::Emitid => OpClass::Comm,
            Opcode::Divu | Opcode::Remu => OpClass::Div,
            Opcode::Fnop => OpClass::Fnop,
            _ => OpClass::Alu,
        }
    }

    pub fn is_mem(self) -> bool {
        self.class() == OpClass::Mem
    }

    pub fn is_branch(self) -> bool {
        self.class() == OpClass::Branch
    }

    pub fn is_div(self) -> bool {
        matches!(self, Opcode::Divu | Opcode::Remu)
    }

    pub fn is_comm(self) -> bool {
        self.class() == OpClass::Comm
    }

    /// Ends a block (control never falls past it).
    pub fn is_terminator(self) -> bool {
        matches!(self, Opcode::Bu | Opcode::Retsp | Opcode::Halt)
    }

    /// Conditional or unconditional intra-function branch.
    pub fn is_local_branch(self) -> bool {
        matches!(self, Opcode::Bf | Opcode::Bt | Opcode::Bu)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reg {
    /// Argument / return register `r0..r3`, shared across frames.
    Arg(u8),
    /// Frame-local virtual register.
    Local(u32),
    Lr,
    Sp,
}

pub const ARG_REGS: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    Imm(i32),
    /// Block label inside the current function.
    Label(String),
    /// Function symbol for `bl`.
    Func(String),
    /// Comparison of a fused compare-and-branch.
    Pred(CmpPred),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsaInstr {
    pub op: Opcode,
    pub operands: Vec<Operand>,
    pub dbg: Option<DebugLoc>,
    /// Created by the backend without an IR counterpart.
    pub injected: bool,
}

impl IsaInstr {
    pub fn new(op: Opcode, operands: Vec<Operand>) -> Self {
        IsaInstr { op, operands, dbg: None, injected: false }
    }

    pub fn tagged(op: Opcode, operands: Vec<Operand>, dbg: Option<DebugLoc>) -> Self {
        IsaInstr { op, operands, dbg, injected: false }
    }

    pub fn injected(op: Opcode, operands: Vec<Operand>) -> Self {
        IsaInstr { op, operands, dbg: None, injected: true }
    }

    pub fn fnop() -> Self {
        IsaInstr::new(Opcode::Fnop, vec![])
    }

    pub fn is_fnop(&self) -> bool {
        self.op == Opcode::Fnop
    }

    pub fn label_targets(&self) -> impl Iterator<Item = &str> {
        let local = self.op.is_local_branch();
        self.operands.iter().filter_map(move |o| match o {
            Operand::Label(l) if local => Some(l.as_str()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsaBlock {
    pub label: String,
    pub instrs: Vec<IsaInstr>,
}

impl IsaBlock {
    /// Ends in a conditional branch, continuing with the next block in layout.
    pub fn falls_through(&self) -> bool {
        matches!(self.instrs.last().map(|i| i.op), Some(Opcode::Bt | Opcode::Bf))
    }

    /// Successor labels in branch order, duplicates removed.
    pub fn successors(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for i in &self.instrs {
            for t in i.label_targets() {
                if !out.contains(&t) {
                    out.push(t);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsaFunction {
    pub name: String,
    pub params: usize,
    /// The first block is the entry.
    pub blocks: Vec<IsaBlock>,
}

impl IsaFunction {
    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn instr_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instrs.len()).sum()
    }

    /// Successor block indices of block `bi`, including the layout successor
    /// when the block ends in a conditional branch.
    pub fn successors(&self, bi: usize) -> Result<Vec<usize>, IsaError> {
        let b = &self.blocks[bi];
        let mut out = Vec::new();
        for t in b.successors() {
            let idx = self.block_index(t).ok_or_else(|| IsaError::UnresolvedTarget {
                func: self.name.clone(),
                block: b.label.clone(),
                target: t.to_string(),
            })?;
            out.push(idx);
        }
        if b.falls_through() {
            if bi + 1 >= self.blocks.len() {
                return Err(IsaError::Malformed(format!("{}:{} falls off the function", self.name, b.label)));
            }
            if !out.contains(&(bi + 1)) {
                out.push(bi + 1);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsaProgram {
    pub entry: String,
    pub threads: Vec<ThreadDecl>,
    pub functions: Vec<IsaFunction>,
}

impl IsaProgram {
    pub fn function(&self, name: &str) -> Option<&IsaFunction> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    pub fn instr_count(&self) -> usize {
        self.functions.iter().map(IsaFunction::instr_count).sum()
    }

    pub fn instructions(&self) -> impl Iterator<Item = &IsaInstr> {
        self.functions.iter().flat_map(|f| f.blocks.iter().flat_map(|b| b.instrs.iter()))
    }

    pub fn fnop_count(&self) -> usize {
        self.instructions().filter(|i| i.is_fnop()).count()
    }

    /// Same launch rule as the IR program this was lowered from.
    pub fn effective_threads(&self) -> Vec<ThreadDecl> {
        if !self.threads.is_empty() {
            return self.threads.clone();
        }
        let nparams = self.function(&self.entry).map_or(0, |f| f.params);
        vec![ThreadDecl {
            function: self.entry.clone(),
            args: (0..nparams).map(crate::ir::ThreadArg::Input).collect(),
            core: 0,
        }]
    }

    /// Checks block shape and branch targets.
    pub fn validate(&self) -> Result<(), IsaError> {
        if self.threads.is_empty() && self.function(&self.entry).is_none() {
            return Err(IsaError::MissingEntry(self.entry.clone()));
        }
        for f in &self.functions {
            if f.blocks.is_empty() {
                return Err(IsaError::Malformed(format!("function {} has no blocks", f.name)));
            }
            for b in &f.blocks {
                let Some(last) = b.instrs.last() else {
                    return Err(IsaError::Malformed(format!("{}:{} is empty", f.name, b.label)));
                };
                if !last.op.is_terminator() && !b.falls_through() {
                    return Err(IsaError::Malformed(format!(
                        "{}:{} does not end in a branch, retsp or halt",
                        f.name, b.label
                    )));
                }
                let mut in_tail = false;
                for (k, i) in b.instrs.iter().enumerate() {
                    if i.op.is_terminator() && k + 1 != b.instrs.len() {
                        return Err(IsaError::Malformed(format!(
                            "{}:{} has {} before its end",
                            f.name, b.label, i.op
                        )));
                    }
                    if matches!(i.op, Opcode::Bt | Opcode::Bf) {
                        in_tail = true;
                    } else if in_tail && !i.op.is_terminator() {
                        return Err(IsaError::Malformed(format!(
                            "{}:{} has {} after a conditional branch",
                            f.name, b.label, i.op
                        )));
                    }
                    if i.is_fnop() && !i.operands.is_empty() {
                        return Err(IsaError::Malformed("fnop with operands".into()));
                    }
                    for t in i.label_targets() {
                        if f.block_index(t).is_none() {
                            return Err(IsaError::UnresolvedTarget {
                                func: f.name.clone(),
                                block: b.label.clone(),
                                target: t.to_string(),
                            });
                        }
                    }
                    if b.falls_through() && std::ptr::eq(b, f.blocks.last().unwrap()) {
                        return Err(IsaError::Malformed(format!("{}:{} falls off the function", f.name, b.label)));
                    }
                    if i.op == Opcode::Bl {
                        match i.operands.first() {
                            Some(Operand::Func(g)) if self.function(g).is_some() => {}
                            _ => {
                                return Err(IsaError::Malformed(format!(
                                    "{}:{} calls an unknown function",
                                    f.name, b.label
                                )))
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for IsaProgram {
    fn default() -> Self {
        IsaProgram { entry: DEFAULT_ENTRY.to_string(), threads: vec![], functions: vec![] }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IsaError {
    #[error("{func}:{block}: unresolved branch target {target}")]
    UnresolvedTarget { func: String, block: String, target: String },
    #[error("active thread count {0} outside 1..=8")]
    ThreadCount(u32),
    #[error("entry function {0} not found")]
    MissingEntry(String),
    #[error("malformed ISA program: {0}")]
    Malformed(String),
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
}

pub const MAX_THREADS: u32 = 8;

/// Deterministic pipeline timing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingRules {
    pub base_latency_cycles: u32,
    pub div_cycles: u32,
    pub buffer_capacity: u32,
}

impl Default for TimingRules {
    fn default() -> Self {
        TimingRules { base_latency_cycles: 4, div_cycles: 32, buffer_capacity: 4 }
    }
}

impl TimingRules {
    pub fn issue_slot_cycles(&self, nt: u32) -> u32 {
        nt.max(self.base_latency_cycles)
    }

    pub fn instruction_cycles(&self, op: Opcode, nt: u32) -> Result<u32, IsaError> {
        if !(1..=MAX_THREADS).contains(&nt) {
            return Err(IsaError::ThreadCount(nt));
        }
        let slot = self.issue_slot_cycles(nt);
        Ok(if op.is_div() { slot + self.div_cycles } else { slot })
    }
}

/// Cycles between issuing `i` and the thread's next issue under default timing.
pub fn instruction_cycles(i: &IsaInstr, nt: u32) -> Result<u32, IsaError> {
    TimingRules::default().instruction_cycles(i.op, nt)
}

/// Intra-procedural CFG of one function; `bl` does not end a block.
pub fn build_isa_cfg(f: &IsaFunction) -> Result<Cfg, IsaError> {
    let labels: Vec<String> = f.blocks.iter().map(|b| b.label.clone()).collect();
    let succs = (0..f.blocks.len()).map(|bi| f.successors(bi)).collect::<Result<_, _>>()?;
    Ok(Cfg::new(labels, succs, 0))
}

/// Inserts fetch no-ops where the fetch buffer would run dry.
///
/// Each block starts with a full buffer of `capacity` entries. Memory and
/// branch instructions drain one entry, other instructions are neutral and a
/// fetch no-op refills one entry.
pub fn place_fnops(p: &IsaProgram, capacity: u32) -> IsaProgram {
    let mut out = p.clone();
    for f in &mut out.functions {
        for b in &mut f.blocks {
            b.instrs = place_in_block(&b.instrs, capacity.max(1));
        }
    }
    out
}

fn place_in_block(instrs: &[IsaInstr], capacity: u32) -> Vec<IsaInstr> {
    let mut level = capacity;
    let mut out = Vec::with_capacity(instrs.len());
    for i in instrs {
        if i.is_fnop() {
            level = (level + 1).min(capacity);
        } else if i.op.is_mem() || i.op.is_branch() {
            if level == 0 {
                out.push(IsaInstr::fnop());
                level = 1;
            }
            level -= 1;
        }
        out.push(i.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(ops: &[Opcode]) -> IsaProgram {
        let instrs = ops.iter().map(|&o| IsaInstr::new(o, vec![])).collect();
        IsaProgram {
            functions: vec![IsaFunction {
                name: "main".into(),
                params: 0,
                blocks: vec![IsaBlock { label: "b".into(), instrs }],
            }],
            ..Default::default()
        }
    }

    fn ops(p: &IsaProgram) -> Vec<Opcode> {
        p.instructions().map(|i| i.op).collect()
    }

    #[test]
    fn timing_examples() {
        let t = TimingRules::default();
        assert_eq!(t.instruction_cycles(Opcode::Add, 1).unwrap(), 4);
        assert_eq!(t.instruction_cycles(Opcode::Add, 6).unwrap(), 6);
        assert_eq!(t.instruction_cycles(Opcode::Divu, 1).unwrap(), 36);
        assert_eq!(t.instruction_cycles(Opcode::Fnop, 3).unwrap(), 4);
        assert!(t.instruction_cycles(Opcode::Add, 0).is_err());
        assert!(t.instruction_cycles(Opcode::Add, 9).is_err());
        for nt in 1..=4 {
            assert_eq!(t.issue_slot_cycles(nt), 4);
        }
        for nt in 5..=8 {
            assert_eq!(t.issue_slot_cycles(nt), nt);
        }
    }

    #[test]
    fn alu_block_needs_no_fnops() {
        let p = place_fnops(&block(&[Opcode::Add; 20]), 4);
        assert_eq!(p.fnop_count(), 0);
        let p = place_fnops(&block(&[Opcode::Retsp]), 4);
        assert_eq!(p.fnop_count(), 0);
    }

    #[test]
    fn five_loads_need_one_fnop_before_the_fifth() {
        let p = place_fnops(&block(&[Opcode::Ldw; 5]), 4);
        let o = ops(&p);
        assert_eq!(o.len(), 6);
        assert_eq!(o[4], Opcode::Fnop);
        assert_eq!(p.fnop_count(), 1);
    }

    #[test]
    fn placement_is_idempotent() {
        let p = place_fnops(&block(&[Opcode::Ldw, Opcode::Stw, Opcode::Ldw, Opcode::Add, Opcode::Ldw, Opcode::Ldw, Opcode::Ldw, Opcode::Bu]), 2);
        assert_eq!(place_fnops(&p, 2), p);
    }

    #[test]
    fn halt_block_cfg() {
        let p = block(&[Opcode::Halt]);
        let cfg = build_isa_cfg(&p.functions[0]).unwrap();
        assert_eq!(cfg.len(), 1);
        assert!(cfg.edges().is_empty());
    }

    #[test]
    fn unresolved_target_is_reported() {
        let mut p = block(&[]);
        p.functions[0].blocks[0].instrs =
            vec![IsaInstr::new(Opcode::Bu, vec![Operand::Label("nowhere".into())])];
        assert!(matches!(
            build_isa_cfg(&p.functions[0]),
            Err(IsaError::UnresolvedTarget { .. })
        ));
        assert!(p.validate().is_err());
    }
}
