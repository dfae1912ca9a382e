//! EIR: the integer-only SSA intermediate representation.
//!
//! A program is a list of functions made of labelled blocks; every block ends
//! in exactly one terminator and phi-nodes form a prefix of their block.
//! Loop headers carry an inline `!bound K` annotation giving the maximum
//! number of back-edge traversals per entry into the loop.

mod parse;
mod print;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfg::Cfg;

pub use parse::parse_eir;
pub use validate::{validate, validate_structure};

/// Instruction identity used to relate IR and ISA instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DebugLoc(pub u32);

impl fmt::Display for DebugLoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An instruction operand: an SSA name (without the `%`) or a literal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Value {
    Ssa(String),
    Const(i32),
}

impl Value {
    pub fn ssa(name: &str) -> Self {
        Value::Ssa(name.to_string())
    }

    pub fn as_ssa(&self) -> Option<&str> {
        match self {
            Value::Ssa(s) => Some(s),
            Value::Const(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Udiv,
    Urem,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl BinOp {
    pub const ALL: [BinOp; 10] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Udiv,
        BinOp::Urem,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::Shr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Udiv => "udiv",
            BinOp::Urem => "urem",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        BinOp::ALL.into_iter().find(|op| op.name() == s)
    }

    /// 32-bit wrapping semantics shared by the interpreter and the simulator.
    /// Returns `None` on division by zero.
    pub fn eval(self, a: i32, b: i32) -> Option<i32> {
        let (ua, ub) = (a as u32, b as u32);
        Some(match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::Udiv => ua.checked_div(ub)? as i32,
            BinOp::Urem => ua.checked_rem(ub)? as i32,
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => ua.wrapping_shl(ub) as i32,
            BinOp::Shr => ua.wrapping_shr(ub) as i32,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CmpPred {
    Eq,
    Ult,
    Slt,
}

impl CmpPred {
    pub fn name(self) -> &'static str {
        match self {
            CmpPred::Eq => "eq",
            CmpPred::Ult => "ult",
            CmpPred::Slt => "slt",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "eq" => Some(CmpPred::Eq),
            "ult" => Some(CmpPred::Ult),
            "slt" => Some(CmpPred::Slt),
            _ => None,
        }
    }

    pub fn eval(self, a: i32, b: i32) -> bool {
        match self {
            CmpPred::Eq => a == b,
            CmpPred::Ult => (a as u32) < (b as u32),
            CmpPred::Slt => a < b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstKind {
    Const(i32),
    Bin(BinOp, Value, Value),
    Icmp(CmpPred, Value, Value),
    /// (predecessor label, incoming value)
    Phi(Vec<(String, Value)>),
    Br(String),
    BrCond(Value, String, String),
    /// scrutinee, default target, (case value, target)
    Switch(Value, String, Vec<(i32, String)>),
    Call(String, Vec<Value>),
    Ret(Option<Value>),
    Load(Value),
    /// value, address
    Store(Value, Value),
    /// channel, value
    ChanSend(Value, Value),
    ChanRecv(Value),
    /// Profiling marker carrying a block identifier.
    Emit(u32),
}

impl InstKind {
    pub fn opcode(&self) -> &'static str {
        match self {
            InstKind::Const(_) => "const",
            InstKind::Bin(op, ..) => op.name(),
            InstKind::Icmp(..) => "icmp",
            InstKind::Phi(_) => "phi",
            InstKind::Br(_) => "br",
            InstKind::BrCond(..) => "brcond",
            InstKind::Switch(..) => "switch",
            InstKind::Call(..) => "call",
            InstKind::Ret(_) => "ret",
            InstKind::Load(_) => "load",
            InstKind::Store(..) => "store",
            InstKind::ChanSend(..) => "chan_send",
            InstKind::ChanRecv(_) => "chan_recv",
            InstKind::Emit(_) => "emit",
        }
    }

    pub fn is_terminator(&self) -> bool {
        matches!(
            self,
            InstKind::Br(_) | InstKind::BrCond(..) | InstKind::Switch(..) | InstKind::Ret(_)
        )
    }

    /// Whether the instruction defines a value (`call` may or may not).
    pub fn requires_result(&self) -> Option<bool> {
        match self {
            InstKind::Const(_)
            | InstKind::Bin(..)
            | InstKind::Icmp(..)
            | InstKind::Phi(_)
            | InstKind::Load(_)
            | InstKind::ChanRecv(_) => Some(true),
            InstKind::Call(..) => None,
            _ => Some(false),
        }
    }

    /// Operand values in source order (phi incoming values included).
    pub fn operands(&self) -> Vec<&Value> {
        match self {
            InstKind::Const(_) | InstKind::Br(_) | InstKind::Emit(_) | InstKind::Ret(None) => vec![],
            InstKind::Bin(_, a, b) | InstKind::Icmp(_, a, b) => vec![a, b],
            InstKind::Phi(incs) => incs.iter().map(|(_, v)| v).collect(),
            InstKind::BrCond(c, ..) => vec![c],
            InstKind::Switch(v, ..) => vec![v],
            InstKind::Call(_, args) => args.iter().collect(),
            InstKind::Ret(Some(v)) | InstKind::Load(v) | InstKind::ChanRecv(v) => vec![v],
            InstKind::Store(a, b) | InstKind::ChanSend(a, b) => vec![a, b],
        }
    }

    /// Branch targets in order, duplicates preserved.
    pub fn targets(&self) -> Vec<&str> {
        match self {
            InstKind::Br(t) => vec![t],
            InstKind::BrCond(_, t, f) => vec![t, f],
            InstKind::Switch(_, d, cases) => {
                let mut v = vec![d.as_str()];
                v.extend(cases.iter().map(|(_, t)| t.as_str()));
                v
            }
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EirInstr {
    pub result: Option<String>,
    pub kind: InstKind,
    pub dbg: Option<DebugLoc>,
}

impl EirInstr {
    pub fn new(result: Option<&str>, kind: InstKind) -> Self {
        EirInstr { result: result.map(str::to_string), kind, dbg: None }
    }

    pub fn is_phi(&self) -> bool {
        matches!(self.kind, InstKind::Phi(_))
    }

    pub fn uses(&self) -> impl Iterator<Item = &str> {
        self.kind.operands().into_iter().filter_map(Value::as_ssa)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EirBlock {
    pub label: String,
    /// Maximum back-edge traversals per loop entry when this block heads a loop.
    pub bound: Option<u32>,
    pub instrs: Vec<EirInstr>,
}

impl EirBlock {
    pub fn terminator(&self) -> &EirInstr {
        self.instrs.last().expect("validated block has a terminator")
    }

    pub fn phis(&self) -> impl Iterator<Item = &EirInstr> {
        self.instrs.iter().take_while(|i| i.is_phi())
    }

    pub fn successors(&self) -> Vec<&str> {
        self.instrs.last().map(|t| t.kind.targets()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EirFunction {
    pub name: String,
    pub params: Vec<String>,
    /// The first block is the entry.
    pub blocks: Vec<EirBlock>,
}

impl EirFunction {
    pub fn block(&self, label: &str) -> Option<&EirBlock> {
        self.blocks.iter().find(|b| b.label == label)
    }

    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn instr_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instrs.len()).sum()
    }

    /// Predecessor labels of every block, derived from terminators.
    pub fn predecessors(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut preds: BTreeMap<&str, Vec<&str>> =
            self.blocks.iter().map(|b| (b.label.as_str(), Vec::new())).collect();
        for b in &self.blocks {
            let mut targets = b.successors();
            targets.dedup();
            let mut seen = Vec::new();
            for t in targets {
                if !seen.contains(&t) {
                    seen.push(t);
                    if let Some(p) = preds.get_mut(t) {
                        p.push(b.label.as_str());
                    }
                }
            }
        }
        preds
    }

    /// Number of uses of each SSA name (phi operands included).
    pub fn use_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for b in &self.blocks {
            for i in &b.instrs {
                for u in i.uses() {
                    *counts.entry(u).or_insert(0) += 1;
                }
            }
        }
        counts
    }
}

/// Argument of a thread declaration: a literal or a program input `$k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadArg {
    Lit(i32),
    Input(usize),
}

impl ThreadArg {
    pub fn resolve(self, inputs: &[i32]) -> i32 {
        match self {
            ThreadArg::Lit(v) => v,
            ThreadArg::Input(k) => inputs.get(k).copied().unwrap_or(0),
        }
    }
}

/// A hardware thread started at program launch, placed on a core.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadDecl {
    pub function: String,
    pub args: Vec<ThreadArg>,
    pub core: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EirProgram {
    pub entry: String,
    /// Explicit thread declarations; empty means one thread running `entry`.
    pub threads: Vec<ThreadDecl>,
    pub functions: Vec<EirFunction>,
}

pub const DEFAULT_ENTRY: &str = "main";

impl EirProgram {
    pub fn function(&self, name: &str) -> Option<&EirFunction> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    pub fn instr_count(&self) -> usize {
        self.functions.iter().map(EirFunction::instr_count).sum()
    }

    /// Threads actually launched: the declared ones, or the entry function
    /// receiving the program inputs as arguments.
    pub fn effective_threads(&self) -> Vec<ThreadDecl> {
        if !self.threads.is_empty() {
            return self.threads.clone();
        }
        let nparams = self.function(&self.entry).map_or(0, |f| f.params.len());
        vec![ThreadDecl {
            function: self.entry.clone(),
            args: (0..nparams).map(ThreadArg::Input).collect(),
            core: 0,
        }]
    }

    pub fn instructions(&self) -> impl Iterator<Item = &EirInstr> {
        self.functions.iter().flat_map(|f| f.blocks.iter().flat_map(|b| b.instrs.iter()))
    }
}

/// Location of an instruction inside a program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IrPos {
    pub func: usize,
    pub block: usize,
    pub index: usize,
}

/// Index from debug location to instruction position.
pub fn debug_index(p: &EirProgram) -> BTreeMap<DebugLoc, IrPos> {
    let mut idx = BTreeMap::new();
    for (fi, f) in p.functions.iter().enumerate() {
        for (bi, b) in f.blocks.iter().enumerate() {
            for (ii, i) in b.instrs.iter().enumerate() {
                if let Some(d) = i.dbg {
                    idx.insert(d, IrPos { func: fi, block: bi, index: ii });
                }
            }
        }
    }
    idx
}

/// Builds the intra-procedural CFG of a validated function.
pub fn build_ir_cfg(f: &EirFunction) -> Cfg {
    let labels: Vec<String> = f.blocks.iter().map(|b| b.label.clone()).collect();
    let succs = f
        .blocks
        .iter()
        .map(|b| {
            b.successors()
                .into_iter()
                .map(|t| f.block_index(t).expect("validated target"))
                .collect()
        })
        .collect();
    Cfg::new(labels, succs, 0)
}

/// Assigns debug locations `1..=n` in program order (function, block,
/// instruction). Any previous tags are replaced, so the pass is idempotent.
pub fn annotate_debug_locations(mut p: EirProgram) -> EirProgram {
    let mut next = 1u32;
    for f in &mut p.functions {
        for b in &mut f.blocks {
            for i in &mut b.instrs {
                i.dbg = Some(DebugLoc(next));
                next += 1;
            }
        }
    }
    p
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: unknown opcode `{op}`")]
    UnknownOpcode { line: usize, col: usize, op: String },
    #[error("duplicate function `{0}`")]
    DuplicateFunction(String),
    #[error("entry function `{0}` is not defined")]
    MissingEntry(String),
    #[error("function `{func}` has no blocks")]
    EmptyFunction { func: String },
    #[error("function `{func}`: duplicate block label `{label}`")]
    DuplicateLabel { func: String, label: String },
    #[error("function `{func}`: value %{name} defined more than once")]
    DuplicateDef { func: String, name: String },
    #[error("function `{func}`, block `{block}`: {msg}")]
    Malformed { func: String, block: String, msg: String },
    #[error("function `{func}`, block `{block}`: branch to unknown block `{target}`")]
    UnknownTarget { func: String, block: String, target: String },
    #[error("function `{func}`, block `{block}`: phi misses predecessor `{pred}`")]
    PhiMissesPredecessor { func: String, block: String, pred: String },
    #[error("function `{func}`, block `{block}`: phi lists `{pred}` which is not a unique predecessor")]
    PhiBadPredecessor { func: String, block: String, pred: String },
    #[error("function `{func}`, block `{block}`: call to undefined function `{callee}`")]
    UnknownCallee { func: String, block: String, callee: String },
    #[error("function `{func}`, block `{block}`: `{callee}` expects {expected} arguments, got {got}")]
    ArityMismatch { func: String, block: String, callee: String, expected: usize, got: usize },
    #[error("function `{func}`, block `{block}`: use of undefined value %{name}")]
    UndefinedValue { func: String, block: String, name: String },
    #[error("function `{func}`, block `{block}`: use of %{name} is not dominated by its definition")]
    NotDominated { func: String, block: String, name: String },
    #[error("thread declaration refers to undefined function `{0}`")]
    UnknownThreadFunction(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIAMOND: &str = "
fn main(%a) {
entry:
  %c = icmp slt %a, 10
  brcond %c, then, else
then:
  %x = add %a, 1
  br join
else:
  %y = sub %a, 1
  br join
join:
  %r = phi [then, %x], [else, %y]
  ret %r
}
";

    #[test]
    fn diamond_cfg_edges() {
        let p = parse_eir(DIAMOND).unwrap();
        let cfg = build_ir_cfg(&p.functions[0]);
        assert_eq!(cfg.len(), 4);
        let named: Vec<(&str, &str)> =
            cfg.edges().iter().map(|&(s, d)| (cfg.label(s), cfg.label(d))).collect();
        assert_eq!(
            named,
            vec![("entry", "then"), ("entry", "else"), ("then", "join"), ("else", "join")]
        );
    }

    #[test]
    fn straight_line_cfg() {
        let p = parse_eir("fn main(){ entry: ret 0 }").unwrap();
        let cfg = build_ir_cfg(&p.functions[0]);
        assert_eq!(cfg.len(), 1);
        assert!(cfg.edges().is_empty());
    }

    #[test]
    fn loop_cfg_has_back_edge() {
        let src = "
fn main(%n) {
entry:
  br header
header: !bound 10
  %i = phi [entry, 0], [body, %j]
  %c = icmp slt %i, %n
  brcond %c, body, exit
body:
  %j = add %i, 1
  br header
exit:
  ret %i
}";
        let p = parse_eir(src).unwrap();
        let cfg = build_ir_cfg(&p.functions[0]);
        let body = cfg.index_of("body").unwrap();
        let header = cfg.index_of("header").unwrap();
        assert!(cfg.edges().contains(&(body, header)));
        assert_eq!(p.functions[0].blocks[1].bound, Some(10));
    }

    #[test]
    fn cfg_edges_match_terminators() {
        let p = parse_eir(DIAMOND).unwrap();
        let f = &p.functions[0];
        let cfg = build_ir_cfg(f);
        for (i, b) in f.blocks.iter().enumerate() {
            let mut expect: Vec<&str> = b.successors();
            expect.dedup();
            let got: Vec<&str> = cfg.succs(i).iter().map(|&s| cfg.label(s)).collect();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn annotate_assigns_program_order() {
        let src = "
fn f(%a) {
entry:
  %x = add %a, 1
  %y = add %x, 2
  ret %y
}
fn main() {
entry:
  %a = const 3
  %b = call f(%a)
  %c = add %b, %a
  ret %c
}";
        let p = annotate_debug_locations(parse_eir(src).unwrap());
        let ids: Vec<u32> = p.instructions().map(|i| i.dbg.unwrap().0).collect();
        assert_eq!(ids, (1..=7).collect::<Vec<_>>());
        let f_ids: Vec<u32> =
            p.functions[0].blocks[0].instrs.iter().map(|i| i.dbg.unwrap().0).collect();
        assert_eq!(f_ids, vec![1, 2, 3]);
        let again = annotate_debug_locations(p.clone());
        assert_eq!(again, p);
    }

    #[test]
    fn binop_semantics_wrap() {
        assert_eq!(BinOp::Add.eval(i32::MAX, 1), Some(i32::MIN));
        assert_eq!(BinOp::Udiv.eval(-1, 2), Some((u32::MAX / 2) as i32));
        assert_eq!(BinOp::Urem.eval(5, 0), None);
        assert_eq!(BinOp::Shr.eval(-1, 28), Some(0xF));
        assert!(CmpPred::Ult.eval(1, -1));
        assert!(!CmpPred::Slt.eval(1, -1));
    }
}
