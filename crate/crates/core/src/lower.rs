//! EIR to XS-lite lowering with debug-location propagation.
//!
//! Tags follow four rules: an eliminated instruction loses its tag, a 1:1
//! translation copies it, a many:1 merge takes the tag of its first source and
//! a 1:many expansion tags every output. Backend-created instructions start
//! untagged and later borrow the tag of an adjacent instruction.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{
    self, BinOp, CmpPred, DebugLoc, EirFunction, EirInstr, EirProgram, InstKind, IrError, Value,
};
use crate::isa::{IsaBlock, IsaFunction, IsaInstr, IsaProgram, Opcode, Operand, Reg, ARG_REGS};

/// Largest literal encodable as an immediate operand.
pub const MAX_IMM: i32 = 0xFFFF;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LowerError {
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error("{func}:{block}: `emit` cannot be lowered")]
    Emit { func: String, block: String },
    #[error("{func}: call to {callee} passes {n} arguments, at most 4 are supported")]
    TooManyArgs { func: String, callee: String, n: usize },
    #[error("{func}: more than 4 parameters")]
    TooManyParams { func: String },
    #[error("{func}:{block}: block has no tagged instruction")]
    UntaggedBlock { func: String, block: String },
}

/// Direction searched first when borrowing a neighbour's tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacentPolicy {
    #[default]
    PrecedingFirst,
    FollowingFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LowerOptions {
    pub adjacent_policy: AdjacentPolicy,
    /// Give fully untagged blocks the tag of a branch targeting them instead of failing.
    pub attach_untagged_blocks: bool,
}

/// A fully untagged block and the tag it was given, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub func: String,
    pub block: String,
    pub assigned: Option<DebugLoc>,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.assigned {
            Some(d) => write!(f, "{}:{}: fully untagged block, attached to tag {d}", self.func, self.block),
            None => write!(f, "{}:{}: fully untagged block", self.func, self.block),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lowered {
    pub program: IsaProgram,
    pub diagnostics: Vec<Diagnostic>,
}

/// Lowers and assigns tags to backend-created instructions with default options.
pub fn lower(p: &EirProgram) -> Result<IsaProgram, LowerError> {
    Ok(lower_with(p, &LowerOptions::default())?.program)
}

pub fn lower_with(p: &EirProgram, opts: &LowerOptions) -> Result<Lowered, LowerError> {
    let raw = lower_raw(p)?;
    assign_program(&raw, opts)
}

/// Lowering only; injected and fused instructions are left untagged.
pub fn lower_raw(p: &EirProgram) -> Result<IsaProgram, LowerError> {
    ir::validate(p)?;
    let mut functions = Vec::with_capacity(p.functions.len());
    for f in &p.functions {
        functions.push(FnLowerer::new(f)?.run()?);
    }
    Ok(IsaProgram { entry: p.entry.clone(), threads: p.threads.clone(), functions })
}

/// Tags every untagged instruction from its nearest tagged neighbour.
/// Returns `None` when the block has no tagged instruction at all.
pub fn adjacent_assign(block: &IsaBlock, policy: AdjacentPolicy) -> Option<IsaBlock> {
    if block.instrs.iter().all(|i| i.dbg.is_none()) {
        return if block.instrs.is_empty() { Some(block.clone()) } else { None };
    }
    let n = block.instrs.len();
    let mut before = vec![None; n];
    let mut after = vec![None; n];
    let mut last = None;
    for k in 0..n {
        last = block.instrs[k].dbg.or(last);
        before[k] = last;
    }
    last = None;
    for k in (0..n).rev() {
        last = block.instrs[k].dbg.or(last);
        after[k] = last;
    }
    let mut out = block.clone();
    for (k, i) in out.instrs.iter_mut().enumerate() {
        if i.dbg.is_none() {
            i.dbg = match policy {
                AdjacentPolicy::PrecedingFirst => before[k].or(after[k]),
                AdjacentPolicy::FollowingFirst => after[k].or(before[k]),
            };
        }
    }
    Some(out)
}

/// Applies [`adjacent_assign`] to every block of a program.
pub fn assign_program(p: &IsaProgram, opts: &LowerOptions) -> Result<Lowered, LowerError> {
    let mut out = p.clone();
    let mut diagnostics = Vec::new();
    for f in &mut out.functions {
        let mut pending = Vec::new();
        for (bi, b) in f.blocks.iter_mut().enumerate() {
            match adjacent_assign(b, opts.adjacent_policy) {
                Some(nb) => *b = nb,
                None => pending.push(bi),
            }
        }
        for bi in pending {
            let label = f.blocks[bi].label.clone();
            let tag = if opts.attach_untagged_blocks { branch_tag_into(f, &label) } else { None };
            diagnostics.push(Diagnostic { func: f.name.clone(), block: label.clone(), assigned: tag });
            match tag {
                Some(t) => {
                    for i in &mut f.blocks[bi].instrs {
                        i.dbg = Some(t);
                    }
                }
                None => return Err(LowerError::UntaggedBlock { func: f.name.clone(), block: label }),
            }
        }
    }
    Ok(Lowered { program: out, diagnostics })
}

/// Tag of the first tagged branch instruction that targets `label`, a
/// conditional branch falling through into it included.
fn branch_tag_into(f: &IsaFunction, label: &str) -> Option<DebugLoc> {
    let target = f.block_index(label)?;
    f.blocks.iter().enumerate().find_map(|(j, b)| {
        let falls = b.falls_through() && j + 1 == target;
        b.instrs
            .iter()
            .enumerate()
            .filter(|(k, i)| i.label_targets().any(|t| t == label) || (falls && *k + 1 == b.instrs.len()))
            .find_map(|(_, i)| i.dbg)
    })
}

/// Live-in SSA names of every block; phi operands count as uses at the end
/// of the corresponding predecessor.
pub fn live_in_sets(f: &EirFunction) -> Vec<BTreeSet<String>> {
    let n = f.blocks.len();
    let index = |l: &str| f.block_index(l).expect("validated target");
    let mut up: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n];
    let mut defs: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n];
    // Phi operands flowing along each edge, keyed by predecessor.
    let mut edge_uses: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n];
    for (bi, b) in f.blocks.iter().enumerate() {
        for i in &b.instrs {
            if let InstKind::Phi(incs) = &i.kind {
                for (pred, v) in incs {
                    if let Value::Ssa(s) = v {
                        edge_uses[index(pred)].insert(s.clone());
                    }
                }
            } else {
                for u in i.uses() {
                    if !defs[bi].contains(u) {
                        up[bi].insert(u.to_string());
                    }
                }
            }
            if let Some(r) = &i.result {
                defs[bi].insert(r.clone());
            }
        }
    }
    let succs: Vec<Vec<usize>> =
        f.blocks.iter().map(|b| b.successors().into_iter().map(index).collect()).collect();
    let mut live_in = up.clone();
    let mut changed = true;
    while changed {
        changed = false;
        for bi in (0..n).rev() {
            let mut out: BTreeSet<String> = edge_uses[bi].clone();
            for &s in &succs[bi] {
                out.extend(live_in[s].iter().cloned());
            }
            let mut inn = up[bi].clone();
            inn.extend(out.into_iter().filter(|v| !defs[bi].contains(v)));
            if inn != live_in[bi] {
                live_in[bi] = inn;
                changed = true;
            }
        }
    }
    live_in
}

#[derive(Debug, Clone)]
enum Src {
    Reg(Reg),
    Imm(i32),
}

struct Move {
    dst: Reg,
    src: Src,
    dbg: Option<DebugLoc>,
}

/// Sequentializes a parallel copy, breaking cycles through `temp`.
fn sequentialize(mut moves: Vec<Move>, temp: Reg) -> Vec<IsaInstr> {
    moves.retain(|m| !matches!(m.src, Src::Reg(r) if r == m.dst));
    let mut out = Vec::new();
    while !moves.is_empty() {
        let reads = |moves: &[Move], r: Reg, skip: usize| {
            moves.iter().enumerate().any(|(k, m)| k != skip && matches!(m.src, Src::Reg(s) if s == r))
        };
        if let Some(k) = (0..moves.len()).find(|&k| !reads(&moves, moves[k].dst, k)) {
            let m = moves.remove(k);
            out.push(match m.src {
                Src::Reg(s) => IsaInstr::tagged(Opcode::Mov, vec![reg(m.dst), reg(s)], m.dbg),
                Src::Imm(v) => IsaInstr::tagged(Opcode::Ldc, vec![reg(m.dst), Operand::Imm(v)], m.dbg),
            });
            continue;
        }
        // Every remaining move is part of a cycle of register copies.
        let blocked = moves[0].dst;
        let reader = moves.iter().find(|m| matches!(m.src, Src::Reg(s) if s == blocked)).map(|m| m.dbg);
        out.push(IsaInstr::tagged(Opcode::Mov, vec![reg(temp), reg(blocked)], reader.flatten()));
        for m in &mut moves {
            if matches!(m.src, Src::Reg(s) if s == blocked) {
                m.src = Src::Reg(temp);
            }
        }
    }
    out
}

fn reg(r: Reg) -> Operand {
    Operand::Reg(r)
}

fn label(l: &str) -> Operand {
    Operand::Label(l.to_string())
}

fn fits_imm(v: i32) -> bool {
    (0..=MAX_IMM).contains(&v)
}

fn bin_opcode(op: BinOp) -> Opcode {
    match op {
        BinOp::Add => Opcode::Add,
        BinOp::Sub => Opcode::Sub,
        BinOp::Mul => Opcode::Mul,
        BinOp::Udiv => Opcode::Divu,
        BinOp::Urem => Opcode::Remu,
        BinOp::And => Opcode::And,
        BinOp::Or => Opcode::Or,
        BinOp::Xor => Opcode::Xor,
        BinOp::Shl => Opcode::Shl,
        BinOp::Shr => Opcode::Shr,
    }
}

fn cmp_opcode(p: CmpPred) -> Opcode {
    match p {
        CmpPred::Eq => Opcode::Eq,
        CmpPred::Ult => Opcode::Ltu,
        CmpPred::Slt => Opcode::Lts,
    }
}

/// Lowered terminator: instructions closing the main block plus any
/// cascade blocks it needs.
struct TermCode {
    group: Vec<IsaInstr>,
    cascade: Vec<IsaBlock>,
    reads: BTreeSet<Reg>,
    dbg: Option<DebugLoc>,
}

struct FnLowerer<'a> {
    f: &'a EirFunction,
    regs: BTreeMap<&'a str, Reg>,
    /// Definitions writing straight into a phi register.
    retarget: BTreeMap<&'a str, Reg>,
    scratch: [Reg; 3],
    uses: BTreeMap<&'a str, usize>,
    live_in: Vec<BTreeSet<String>>,
    labels: BTreeSet<String>,
}

impl<'a> FnLowerer<'a> {
    fn new(f: &'a EirFunction) -> Result<Self, LowerError> {
        if f.params.len() > ARG_REGS as usize {
            return Err(LowerError::TooManyParams { func: f.name.clone() });
        }
        let mut regs = BTreeMap::new();
        let mut next = 0u32;
        let names = f.params.iter().chain(
            f.blocks.iter().flat_map(|b| b.instrs.iter()).filter_map(|i| i.result.as_ref()),
        );
        for n in names {
            regs.insert(n.as_str(), Reg::Local(next));
            next += 1;
        }
        let mut me = FnLowerer {
            f,
            regs,
            retarget: BTreeMap::new(),
            scratch: [Reg::Local(next), Reg::Local(next + 1), Reg::Local(next + 2)],
            uses: f.use_counts(),
            live_in: live_in_sets(f),
            labels: f.blocks.iter().map(|b| b.label.clone()).collect(),
        };
        me.coalesce();
        Ok(me)
    }

    fn reg_of(&self, name: &str) -> Reg {
        self.retarget.get(name).copied().unwrap_or_else(|| self.regs[name])
    }

    fn fresh_label(&mut self, base: String) -> String {
        let mut l = base.clone();
        let mut k = 1;
        while self.labels.contains(&l) {
            l = format!("{base}.{k}");
            k += 1;
        }
        self.labels.insert(l.clone());
        l
    }

    /// Writes single-use phi inputs directly into the phi register when the
    /// old phi value is dead from that point on.
    fn coalesce(&mut self) {
        let f = self.f;
        let mut def_at: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for (bi, b) in f.blocks.iter().enumerate() {
            for (ii, i) in b.instrs.iter().enumerate() {
                if let (Some(r), false) = (&i.result, i.is_phi()) {
                    def_at.insert(r, (bi, ii));
                }
            }
        }
        for b in &f.blocks {
            for phi in b.phis() {
                let InstKind::Phi(incs) = &phi.kind else { continue };
                let p = phi.result.as_deref().expect("phi result");
                for (pred, v) in incs {
                    let Value::Ssa(j) = v else { continue };
                    let Some(&(pb, pi)) = def_at.get(j.as_str()) else { continue };
                    if f.blocks[pb].label != *pred || self.uses.get(j.as_str()) != Some(&1) {
                        continue;
                    }
                    if self.retarget.contains_key(j.as_str()) || self.phi_read_after(pb, pi, p) {
                        continue;
                    }
                    let pred_block = &f.blocks[pb];
                    let live_elsewhere = pred_block.successors().into_iter().any(|s| {
                        s != b.label && self.live_in[f.block_index(s).unwrap()].contains(p)
                    });
                    if !live_elsewhere {
                        self.retarget.insert(j.as_str(), self.regs[p]);
                    }
                }
            }
        }
    }

    /// Whether `name` is read after instruction `index` of block `bi`,
    /// including phi operands on the block's outgoing edges.
    fn phi_read_after(&self, bi: usize, index: usize, name: &str) -> bool {
        let b = &self.f.blocks[bi];
        if b.instrs[index + 1..].iter().any(|i| i.uses().any(|u| u == name)) {
            return true;
        }
        b.successors().into_iter().any(|s| {
            self.f.block(s).unwrap().phis().any(|phi| match &phi.kind {
                InstKind::Phi(incs) => incs
                    .iter()
                    .any(|(pl, v)| *pl == b.label && v.as_ssa() == Some(name)),
                _ => false,
            })
        })
    }

    /// Register holding `v`, materializing literals into `scratch`.
    fn val_reg(&self, v: &Value, scratch: Reg, out: &mut Vec<IsaInstr>) -> Reg {
        match v {
            Value::Ssa(s) => self.reg_of(s),
            Value::Const(c) => {
                out.push(IsaInstr::injected(Opcode::Ldc, vec![reg(scratch), Operand::Imm(*c)]));
                scratch
            }
        }
    }

    /// Register or immediate operand for `v`.
    fn val_opnd(&self, v: &Value, scratch: Reg, out: &mut Vec<IsaInstr>) -> Operand {
        match v {
            Value::Const(c) if fits_imm(*c) => Operand::Imm(*c),
            _ => reg(self.val_reg(v, scratch, out)),
        }
    }

    fn run(mut self) -> Result<IsaFunction, LowerError> {
        let mut blocks = Vec::new();
        for bi in 0..self.f.blocks.len() {
            blocks.extend(self.lower_block(bi)?);
        }
        let blocks = self.layout(blocks);
        Ok(IsaFunction { name: self.f.name.clone(), params: self.f.params.len(), blocks })
    }

    /// Turns `bt/bf …; bu @F` tails into fall-through branches so that every
    /// block executes in full whenever it is entered.
    fn layout(&mut self, blocks: Vec<IsaBlock>) -> Vec<IsaBlock> {
        let next: Vec<Option<String>> = (0..blocks.len()).map(|i| blocks.get(i + 1).map(|b| b.label.clone())).collect();
        let mut out = Vec::with_capacity(blocks.len());
        for (i, mut b) in blocks.into_iter().enumerate() {
            let k = b.instrs.len();
            let tail = k >= 2 && matches!(b.instrs[k - 2].op, Opcode::Bt | Opcode::Bf) && b.instrs[k - 1].op == Opcode::Bu;
            if !tail {
                out.push(b);
                continue;
            }
            let target = |i: &IsaInstr| match i.operands.last() {
                Some(Operand::Label(l)) => l.clone(),
                _ => unreachable!("branch without label"),
            };
            let bu = b.instrs.pop().expect("tail");
            let f_target = target(&bu);
            let t_target = target(&b.instrs[k - 2]);
            if next[i].as_deref() == Some(f_target.as_str()) {
                out.push(b);
            } else if next[i].as_deref() == Some(t_target.as_str()) {
                let cond = &mut b.instrs[k - 2];
                cond.op = if cond.op == Opcode::Bt { Opcode::Bf } else { Opcode::Bt };
                *cond.operands.last_mut().expect("label") = label(&f_target);
                out.push(b);
            } else {
                let name = self.fresh_label(format!("{}.ft", b.label));
                out.push(b);
                out.push(IsaBlock { label: name, instrs: vec![bu] });
            }
        }
        out
    }

    fn lower_block(&mut self, bi: usize) -> Result<Vec<IsaBlock>, LowerError> {
        let f = self.f;
        let b = &f.blocks[bi];
        let [s0, _, s2] = self.scratch;
        let mut body = Vec::new();
        if bi == 0 {
            body.push(IsaInstr::injected(Opcode::Stw, vec![reg(Reg::Lr), reg(Reg::Sp)]));
            for (k, p) in f.params.iter().enumerate() {
                body.push(IsaInstr::injected(
                    Opcode::Mov,
                    vec![reg(self.reg_of(p)), reg(Reg::Arg(k as u8))],
                ));
            }
        }
        let instrs: Vec<&EirInstr> = b.instrs.iter().filter(|i| !i.is_phi()).collect();
        let term_at = instrs.len() - 1;
        let mut fused: Option<&EirInstr> = None;
        let mut k = 0;
        while k < term_at {
            let i = instrs[k];
            let next = instrs[k + 1];
            let single = |name: &Option<String>| {
                name.as_deref().is_some_and(|n| self.uses.get(n) == Some(&1))
            };
            match (&i.kind, &next.kind) {
                (InstKind::Const(c), InstKind::Bin(op, a, Value::Ssa(s)))
                    if k + 1 < term_at
                        && fits_imm(*c)
                        && i.result.as_deref() == Some(s.as_str())
                        && single(&i.result) =>
                {
                    let ra = self.val_reg(a, s0, &mut body);
                    let dst = self.reg_of(next.result.as_deref().unwrap());
                    body.push(IsaInstr::tagged(
                        bin_opcode(*op),
                        vec![reg(dst), reg(ra), Operand::Imm(*c)],
                        i.dbg,
                    ));
                    k += 2;
                    continue;
                }
                (InstKind::Icmp(..), InstKind::BrCond(Value::Ssa(c), ..))
                    if k + 1 == term_at
                        && i.result.as_deref() == Some(c.as_str())
                        && single(&i.result) =>
                {
                    fused = Some(i);
                    k += 1;
                    continue;
                }
                _ => {}
            }
            self.lower_instr(b, i, &mut body)?;
            k += 1;
        }
        let term = self.lower_terminator(bi, instrs[term_at], fused)?;
        self.attach_phi_moves(bi, body, term, s2)
    }

    fn lower_instr(
        &self,
        b: &ir::EirBlock,
        i: &EirInstr,
        out: &mut Vec<IsaInstr>,
    ) -> Result<(), LowerError> {
        let [s0, s1, _] = self.scratch;
        let dst = || reg(self.reg_of(i.result.as_deref().expect("result")));
        let t = i.dbg;
        match &i.kind {
            InstKind::Const(c) => out.push(IsaInstr::tagged(Opcode::Ldc, vec![dst(), Operand::Imm(*c)], t)),
            InstKind::Bin(op, a, bv) => {
                let ra = self.val_reg(a, s0, out);
                let ob = self.val_opnd(bv, s1, out);
                out.push(IsaInstr::tagged(bin_opcode(*op), vec![dst(), reg(ra), ob], t));
            }
            InstKind::Icmp(p, a, bv) => {
                let ra = self.val_reg(a, s0, out);
                let ob = self.val_opnd(bv, s1, out);
                out.push(IsaInstr::tagged(cmp_opcode(*p), vec![dst(), reg(ra), ob], t));
            }
            InstKind::Call(callee, args) => {
                if args.len() > ARG_REGS as usize {
                    return Err(LowerError::TooManyArgs {
                        func: self.f.name.clone(),
                        callee: callee.clone(),
                        n: args.len(),
                    });
                }
                for (k, a) in args.iter().enumerate() {
                    let r = reg(Reg::Arg(k as u8));
                    out.push(match a {
                        Value::Ssa(s) => IsaInstr::tagged(Opcode::Mov, vec![r, reg(self.reg_of(s))], t),
                        Value::Const(c) => IsaInstr::tagged(Opcode::Ldc, vec![r, Operand::Imm(*c)], t),
                    });
                }
                out.push(IsaInstr::tagged(Opcode::Bl, vec![Operand::Func(callee.clone())], t));
                if i.result.is_some() {
                    out.push(IsaInstr::tagged(Opcode::Mov, vec![dst(), reg(Reg::Arg(0))], t));
                }
            }
            InstKind::Load(a) => {
                let oa = self.val_opnd(a, s0, out);
                out.push(IsaInstr::tagged(Opcode::Ldw, vec![dst(), oa], t));
            }
            InstKind::Store(v, a) => {
                let rv = self.val_reg(v, s0, out);
                let oa = self.val_opnd(a, s1, out);
                out.push(IsaInstr::tagged(Opcode::Stw, vec![reg(rv), oa], t));
            }
            InstKind::ChanSend(c, v) => {
                let oc = self.val_opnd(c, s0, out);
                let rv = self.val_reg(v, s1, out);
                out.push(IsaInstr::tagged(Opcode::Out, vec![oc, reg(rv)], t));
            }
            InstKind::ChanRecv(c) => {
                let oc = self.val_opnd(c, s0, out);
                out.push(IsaInstr::tagged(Opcode::In, vec![dst(), oc], t));
            }
            InstKind::Emit(_) => {
                return Err(LowerError::Emit { func: self.f.name.clone(), block: b.label.clone() })
            }
            InstKind::Phi(_)
            | InstKind::Br(_)
            | InstKind::BrCond(..)
            | InstKind::Switch(..)
            | InstKind::Ret(_) => unreachable!("handled by the block lowering"),
        }
        Ok(())
    }

    fn lower_terminator(
        &mut self,
        bi: usize,
        term: &EirInstr,
        fused: Option<&EirInstr>,
    ) -> Result<TermCode, LowerError> {
        let [s0, s1, s2] = self.scratch;
        let t = term.dbg;
        let mut group = Vec::new();
        let mut cascade = Vec::new();
        let mut reads = BTreeSet::new();
        let note = |reads: &mut BTreeSet<Reg>, o: &Operand| {
            if let Operand::Reg(r) = o {
                reads.insert(*r);
            }
        };
        match &term.kind {
            InstKind::Br(target) => group.push(IsaInstr::tagged(Opcode::Bu, vec![label(target)], t)),
            InstKind::BrCond(c, tt, ff) => {
                match fused.map(|i| &i.kind) {
                    Some(InstKind::Icmp(p, a, bv)) => {
                        let ra = reg(self.val_reg(a, s0, &mut group));
                        let ob = self.val_opnd(bv, s1, &mut group);
                        note(&mut reads, &ra);
                        note(&mut reads, &ob);
                        group.push(IsaInstr::tagged(
                            Opcode::Bt,
                            vec![Operand::Pred(*p), ra, ob, label(tt)],
                            t,
                        ));
                    }
                    _ => {
                        let rc = reg(self.val_reg(c, s0, &mut group));
                        note(&mut reads, &rc);
                        group.push(IsaInstr::tagged(Opcode::Bt, vec![rc, label(tt)], t));
                    }
                }
                group.push(IsaInstr::tagged(Opcode::Bu, vec![label(ff)], t));
            }
            InstKind::Ret(v) => {
                if let Some(v) = v {
                    let r0 = reg(Reg::Arg(0));
                    group.push(match v {
                        Value::Ssa(s) => {
                            reads.insert(self.reg_of(s));
                            IsaInstr::tagged(Opcode::Mov, vec![r0, reg(self.reg_of(s))], t)
                        }
                        Value::Const(c) => IsaInstr::tagged(Opcode::Ldc, vec![r0, Operand::Imm(*c)], t),
                    });
                }
                group.push(IsaInstr::injected(Opcode::Ldw, vec![reg(Reg::Lr), reg(Reg::Sp)]));
                group.push(IsaInstr::tagged(Opcode::Retsp, vec![], t));
            }
            InstKind::Switch(v, default, cases) => {
                if let Value::Ssa(s) = v {
                    reads.insert(self.reg_of(s));
                }
                if cases.is_empty() {
                    group.push(IsaInstr::tagged(Opcode::Bu, vec![label(default)], t));
                }
                let base = self.f.blocks[bi].label.clone();
                let names: Vec<String> =
                    (1..cases.len()).map(|k| self.fresh_label(format!("{base}.sw{k}"))).collect();
                for (k, (key, target)) in cases.iter().enumerate() {
                    let mut code = Vec::new();
                    let rv = self.val_reg(v, s0, &mut code);
                    let ok = self.val_opnd(&Value::Const(*key), s1, &mut code);
                    code.push(IsaInstr::tagged(Opcode::Eq, vec![reg(s2), reg(rv), ok], t));
                    code.push(IsaInstr::tagged(Opcode::Bt, vec![reg(s2), label(target)], t));
                    let next = if k + 1 < cases.len() { &names[k] } else { default };
                    code.push(IsaInstr::tagged(Opcode::Bu, vec![label(next)], t));
                    if k == 0 {
                        group = code;
                    } else {
                        cascade.push(IsaBlock { label: names[k - 1].clone(), instrs: code });
                    }
                }
            }
            _ => unreachable!("validated terminator"),
        }
        Ok(TermCode { group, cascade, reads, dbg: t })
    }

    /// Places phi copies for every outgoing edge, in the block when that is
    /// safe and on a new edge block otherwise.
    fn attach_phi_moves(
        &mut self,
        bi: usize,
        mut body: Vec<IsaInstr>,
        mut term: TermCode,
        temp: Reg,
    ) -> Result<Vec<IsaBlock>, LowerError> {
        let f = self.f;
        let b = &f.blocks[bi];
        let succs = b.successors();
        let mut succs_dedup: Vec<&str> = Vec::new();
        for s in succs {
            if !succs_dedup.contains(&s) {
                succs_dedup.push(s);
            }
        }
        // Registers whose values must survive into each successor.
        let across: Vec<BTreeSet<Reg>> = succs_dedup
            .iter()
            .map(|s| {
                let si = f.block_index(s).unwrap();
                let mut set: BTreeSet<Reg> = self.live_in[si].iter().map(|n| self.reg_of(n)).collect();
                for phi in f.blocks[si].phis() {
                    if let InstKind::Phi(incs) = &phi.kind {
                        for (pl, v) in incs {
                            if *pl == b.label {
                                if let Value::Ssa(n) = v {
                                    set.insert(self.reg_of(n));
                                }
                            }
                        }
                    }
                }
                set
            })
            .collect();
        let mut in_place: Vec<Move> = Vec::new();
        let mut splits: Vec<IsaBlock> = Vec::new();
        for (k, s) in succs_dedup.iter().enumerate() {
            let sb = f.block(s).unwrap();
            let mut moves = Vec::new();
            for phi in sb.phis() {
                let InstKind::Phi(incs) = &phi.kind else { continue };
                let dst = self.reg_of(phi.result.as_deref().unwrap());
                let v = &incs.iter().find(|(pl, _)| *pl == b.label).unwrap().1;
                let src = match v {
                    Value::Ssa(n) => Src::Reg(self.reg_of(n)),
                    Value::Const(c) => Src::Imm(*c),
                };
                if !matches!(src, Src::Reg(r) if r == dst) {
                    moves.push(Move { dst, src, dbg: phi.dbg });
                }
            }
            if moves.is_empty() {
                continue;
            }
            let conflict = succs_dedup.len() > 1
                && moves.iter().any(|m| {
                    term.reads.contains(&m.dst)
                        || across.iter().enumerate().any(|(j, set)| j != k && set.contains(&m.dst))
                });
            if !conflict {
                in_place.extend(moves);
                continue;
            }
            let name = self.fresh_label(format!("{}.{}", b.label, s));
            let mut code = sequentialize(moves, temp);
            code.push(IsaInstr::tagged(Opcode::Bu, vec![label(s)], term.dbg));
            let retarget = |i: &mut IsaInstr| {
                if i.op.is_local_branch() {
                    for o in &mut i.operands {
                        if matches!(o, Operand::Label(l) if l == s) {
                            *o = label(&name);
                        }
                    }
                }
            };
            term.group.iter_mut().for_each(retarget);
            term.cascade.iter_mut().flat_map(|c| c.instrs.iter_mut()).for_each(retarget);
            splits.push(IsaBlock { label: name, instrs: code });
        }
        body.extend(sequentialize(in_place, temp));
        body.extend(term.group);
        let mut out = vec![IsaBlock { label: b.label.clone(), instrs: body }];
        out.extend(term.cascade);
        out.extend(splits);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{annotate_debug_locations, parse_eir};

    fn lowered(src: &str) -> IsaProgram {
        lower(&annotate_debug_locations(parse_eir(src).unwrap())).unwrap()
    }

    fn block<'p>(p: &'p IsaProgram, l: &str) -> &'p IsaBlock {
        p.functions[0].blocks.iter().find(|b| b.label == l).unwrap()
    }

    #[test]
    fn add_keeps_its_tag() {
        let p = lowered("fn main(%a, %b) { e: %c = add %a, %b ret %c }");
        let add = p.instructions().find(|i| i.op == Opcode::Add).unwrap();
        assert_eq!(add.dbg, Some(DebugLoc(1)));
        assert!(p.instructions().all(|i| i.dbg.is_some()));
    }

    #[test]
    fn adjacent_assign_rules() {
        let mk = |tags: &[Option<u32>]| IsaBlock {
            label: "b".into(),
            instrs: tags
                .iter()
                .map(|t| IsaInstr::tagged(Opcode::Add, vec![], t.map(DebugLoc)))
                .collect(),
        };
        let got = adjacent_assign(&mk(&[None, Some(3), None]), AdjacentPolicy::PrecedingFirst).unwrap();
        assert!(got.instrs.iter().all(|i| i.dbg == Some(DebugLoc(3))));
        let full = mk(&[Some(1), Some(2)]);
        assert_eq!(adjacent_assign(&full, AdjacentPolicy::PrecedingFirst).unwrap(), full);
        let got = adjacent_assign(&mk(&[Some(1), None, Some(2)]), AdjacentPolicy::FollowingFirst).unwrap();
        assert_eq!(got.instrs[1].dbg, Some(DebugLoc(2)));
        assert!(adjacent_assign(&mk(&[None, None]), AdjacentPolicy::PrecedingFirst).is_none());
    }

    #[test]
    fn fused_branch_carries_branch_tag() {
        let src = "
fn main(%a) {
e:
  br t
t:
  %c = icmp ult %a, 10 !dbg 5
  brcond %c, x, y !dbg 6
x:
  ret 1 !dbg 7
y:
  ret 2 !dbg 8
}";
        let mut p = parse_eir(src).unwrap();
        p.functions[0].blocks[0].instrs[0].dbg = Some(DebugLoc(4));
        let raw = lower_raw(&p).unwrap();
        let t = block(&raw, "t");
        assert_eq!(t.instrs.len(), 1);
        assert_eq!(t.instrs[0].op, Opcode::Bf);
        assert_eq!(t.instrs[0].dbg, Some(DebugLoc(6)));
        assert_eq!(t.instrs[0].operands[0], Operand::Pred(CmpPred::Ult));
        assert_eq!(t.instrs[0].operands[3], Operand::Label("y".into()));
        let p = lower(&p).unwrap();
        assert!(p.instructions().all(|i| i.op != Opcode::Ltu));
    }

    #[test]
    fn loop_phi_copies_land_in_predecessors() {
        let src = "
fn main(%n) {
e:
  br h
h: !bound 100
  %a = phi [e, 1], [h, %b]
  %b = phi [e, 2], [h, %a]
  %i = phi [e, 0], [h, %j]
  %j = add %i, 1
  %s = add %a, %b
  %c = icmp ult %j, 100
  brcond %c, h, x
x:
  ret %s
}";
        let p = lowered(src);
        let ir = annotate_debug_locations(parse_eir(src).unwrap());
        let a_tag = ir.functions[0].blocks[1].instrs[0].dbg;
        let e = block(&p, "e");
        let h = block(&p, "h");
        let count = |b: &IsaBlock| b.instrs.iter().filter(|i| i.dbg == a_tag && i.op == Opcode::Ldc).count();
        assert_eq!(count(e), 1);
        assert!(h.instrs.iter().any(|i| i.dbg == a_tag && i.op == Opcode::Mov));
        assert_eq!(p.functions[0].blocks.len(), 3);
    }

    #[test]
    fn single_use_latch_update_is_coalesced() {
        let src = "
fn main() {
e:
  br h
h: !bound 9
  %i = phi [e, 0], [b, %j]
  %c = icmp ult %i, 10
  brcond %c, b, x
b:
  %j = add %i, 1
  br h
x:
  ret 0
}";
        let p = lowered(src);
        let b = block(&p, "b");
        assert_eq!(b.instrs.len(), 2);
        assert_eq!(b.instrs[0].operands[0], b.instrs[0].operands[1]);
    }

    #[test]
    fn critical_edge_is_split_when_phi_value_escapes() {
        let src = "
fn main() {
e:
  br h
h: !bound 9
  %i = phi [e, 0], [h, %j]
  %j = add %i, 1
  %c = icmp ult %j, 10
  brcond %c, h, x
x:
  %r = add %i, %j
  ret %r
}";
        let p = lowered(src);
        assert!(p.functions[0].blocks.iter().any(|b| b.label == "h.h"));
        p.validate().unwrap();
    }

    #[test]
    fn switch_becomes_cascade() {
        let src = "
fn main(%v) {
e:
  switch %v, d, [1, a], [2, b], [70000, c]
a:
  ret 1
b:
  ret 2
c:
  ret 3
d:
  ret 4
}";
        let p = lowered(src);
        assert_eq!(p.functions[0].blocks.len(), 8);
        let cfg = crate::isa::build_isa_cfg(&p.functions[0]).unwrap();
        assert_eq!(cfg.edges().len(), 7);
        let tag = Some(DebugLoc(1));
        assert!(p.functions[0].blocks[0].instrs.iter().any(|i| i.op == Opcode::Eq && i.dbg == tag));
    }

    #[test]
    fn swap_uses_temporary() {
        let moves = vec![
            Move { dst: Reg::Local(0), src: Src::Reg(Reg::Local(1)), dbg: Some(DebugLoc(1)) },
            Move { dst: Reg::Local(1), src: Src::Reg(Reg::Local(0)), dbg: Some(DebugLoc(2)) },
        ];
        let seq = sequentialize(moves, Reg::Local(9));
        assert_eq!(seq.len(), 3);
        let mut regs = [10, 20];
        let mut tmp = 0;
        for i in &seq {
            let get = |o: &Operand, regs: &[i32; 2], tmp: i32| match o {
                Operand::Reg(Reg::Local(9)) => tmp,
                Operand::Reg(Reg::Local(n)) => regs[*n as usize],
                _ => unreachable!(),
            };
            let v = get(&i.operands[1], &regs, tmp);
            match &i.operands[0] {
                Operand::Reg(Reg::Local(9)) => tmp = v,
                Operand::Reg(Reg::Local(n)) => regs[*n as usize] = v,
                _ => unreachable!(),
            }
        }
        assert_eq!(regs, [20, 10]);
    }

    #[test]
    fn emit_is_rejected() {
        let p = annotate_debug_locations(parse_eir("fn main() { e: emit 3 ret 0 }").unwrap());
        assert!(matches!(lower(&p), Err(LowerError::Emit { .. })));
    }

    #[test]
    fn untagged_block_reported_or_attached() {
        let src = "
fn main(%a) {
e:
  brcond %a, t, j !dbg 9
t:
  br j
j:
  ret 0 !dbg 3
}";
        let p = parse_eir(src).unwrap();
        assert!(matches!(lower(&p), Err(LowerError::UntaggedBlock { .. })));
        let opts = LowerOptions { attach_untagged_blocks: true, ..Default::default() };
        let out = lower_with(&p, &opts).unwrap();
        assert_eq!(out.diagnostics.len(), 1);
        assert_eq!(out.diagnostics[0].assigned, Some(DebugLoc(9)));
        assert!(out.program.instructions().all(|i| i.dbg.is_some()));
    }
}
