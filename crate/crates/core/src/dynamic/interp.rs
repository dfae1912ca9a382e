//! Reference interpreter for EIR and the block-count instrumentation pass.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::DynError;
use crate::ir::{EirFunction, EirInstr, EirProgram, InstKind, Value};

/// Adds an `emit` with a unique id at the head of every block, after its phis.
/// Ids are assigned from 1 in program order.
pub fn instrument_ir(p: &EirProgram) -> Result<EirProgram, DynError> {
    if p.instructions().any(|i| matches!(i.kind, InstKind::Emit(_))) {
        return Err(DynError::AlreadyInstrumented);
    }
    let mut out = p.clone();
    let mut id = 1u32;
    for f in &mut out.functions {
        for b in &mut f.blocks {
            let at = b.instrs.iter().take_while(|i| i.is_phi()).count();
            b.instrs.insert(at, EirInstr::new(None, InstKind::Emit(id)));
            id += 1;
        }
    }
    Ok(out)
}

/// Emit id to (function, block) for an instrumented program.
pub fn emit_table(p: &EirProgram) -> BTreeMap<u32, (String, String)> {
    let mut t = BTreeMap::new();
    for f in &p.functions {
        for b in &f.blocks {
            for i in &b.instrs {
                if let InstKind::Emit(id) = i.kind {
                    t.insert(id, (f.name.clone(), b.label.clone()));
                }
            }
        }
    }
    t
}

/// Block execution counts collected from emitted ids, per thread.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BbCounts {
    /// `func:block` → count, one map per thread.
    pub threads: Vec<BTreeMap<String, u64>>,
    /// `func:from->to` → traversals, one map per thread.
    #[serde(default)]
    pub edges: Vec<BTreeMap<String, u64>>,
    /// Invocations and returns per function, one map per thread.
    #[serde(default)]
    pub calls: Vec<BTreeMap<String, u64>>,
    #[serde(default)]
    pub returns: Vec<i32>,
}

pub fn block_key(func: &str, block: &str) -> String {
    format!("{func}:{block}")
}

pub fn split_key(key: &str) -> Option<(&str, &str)> {
    key.split_once(':')
}

impl BbCounts {
    pub fn get(&self, thread: usize, func: &str, block: &str) -> u64 {
        self.threads.get(thread).and_then(|m| m.get(&block_key(func, block))).copied().unwrap_or(0)
    }

    /// Counts summed over threads.
    pub fn merged(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for m in &self.threads {
            for (k, v) in m {
                *out.entry(k.clone()).or_insert(0) += v;
            }
        }
        out
    }

    /// Kirchhoff check: each block's count equals its incoming edge
    /// traversals (plus invocations for entry blocks) and its outgoing edge
    /// traversals (plus returns for exit blocks).
    pub fn check_flow(&self, p: &EirProgram) -> Result<(), String> {
        for (t, counts) in self.threads.iter().enumerate() {
            let edges = &self.edges[t];
            let calls = &self.calls[t];
            for f in &p.functions {
                let invoked = calls.get(&f.name).copied().unwrap_or(0);
                let mut returned = 0;
                for (bi, b) in f.blocks.iter().enumerate() {
                    let n = counts.get(&block_key(&f.name, &b.label)).copied().unwrap_or(0);
                    let edge = |from: &str, to: &str| {
                        edges.get(&format!("{}:{from}->{to}", f.name)).copied().unwrap_or(0)
                    };
                    let mut inflow: u64 = f
                        .blocks
                        .iter()
                        .filter(|pb| pb.successors().contains(&b.label.as_str()))
                        .map(|pb| edge(&pb.label, &b.label))
                        .sum();
                    if bi == 0 {
                        inflow += invoked;
                    }
                    let succ = b.successors();
                    let outflow: u64 = succ.iter().map(|s| edge(&b.label, s)).sum();
                    if inflow != n {
                        return Err(format!("thread {t}: {}:{} runs {n} times but is entered {inflow} times", f.name, b.label));
                    }
                    if succ.is_empty() {
                        returned += n;
                    } else if outflow != n {
                        return Err(format!("thread {t}: {}:{} runs {n} times but is left {outflow} times", f.name, b.label));
                    }
                }
                if returned != invoked {
                    return Err(format!("thread {t}: {} invoked {invoked} times, returned {returned}", f.name));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterpConfig {
    pub memory_words: usize,
    pub step_budget: u64,
}

impl Default for InterpConfig {
    fn default() -> Self {
        InterpConfig { memory_words: 1 << 14, step_budget: 500_000_000 }
    }
}

struct Frame<'a> {
    f: &'a EirFunction,
    block: usize,
    index: usize,
    vals: HashMap<&'a str, i32>,
    /// Where the caller stores the result.
    dest: Option<&'a str>,
}

enum Wait {
    Send(i32, i32),
    Recv(i32),
}

struct Th<'a> {
    frames: Vec<Frame<'a>>,
    mem: Vec<i32>,
    wait: Option<Wait>,
    done: bool,
    ret: i32,
}

fn enter<'a>(
    f: &'a EirFunction,
    args: &[i32],
    dest: Option<&'a str>,
    calls: &mut BTreeMap<String, u64>,
) -> Frame<'a> {
    let vals = f.params.iter().map(String::as_str).zip(args.iter().copied()).collect();
    *calls.entry(f.name.clone()).or_insert(0) += 1;
    let mut fr = Frame { f, block: 0, index: 0, vals, dest };
    skip_phis(&mut fr);
    fr
}

fn skip_phis(fr: &mut Frame<'_>) {
    fr.index = fr.f.blocks[fr.block].instrs.iter().take_while(|i| i.is_phi()).count();
}

fn eval(fr: &Frame<'_>, v: &Value) -> Result<i32, DynError> {
    match v {
        Value::Const(c) => Ok(*c),
        Value::Ssa(s) => fr.vals.get(s.as_str()).copied().ok_or_else(|| DynError::Undefined(s.clone())),
    }
}

fn addr(mem: &[i32], a: i32) -> Result<usize, DynError> {
    let u = a as u32 as usize;
    if u < mem.len() {
        Ok(u)
    } else {
        Err(DynError::OutOfBounds(u as i64))
    }
}

/// Executes the program directly, one instruction per runnable thread in
/// round-robin order, and collects the emitted block ids.
pub fn interpret_ir(p: &EirProgram, inputs: &[i32], cfg: &InterpConfig) -> Result<BbCounts, DynError> {
    let table = emit_table(p);
    let decls = p.effective_threads();
    let n = decls.len();
    let mut out = BbCounts {
        threads: vec![BTreeMap::new(); n],
        edges: vec![BTreeMap::new(); n],
        calls: vec![BTreeMap::new(); n],
        returns: vec![0; n],
    };
    let mut ths = Vec::with_capacity(n);
    for (ti, d) in decls.iter().enumerate() {
        let f = p.function(&d.function).ok_or_else(|| DynError::Malformed(format!("unknown function {}", d.function)))?;
        let args: Vec<i32> = d.args.iter().map(|a| a.resolve(inputs)).collect();
        let fr = enter(f, &args, None, &mut out.calls[ti]);
        ths.push(Th { frames: vec![fr], mem: vec![0; cfg.memory_words], wait: None, done: false, ret: 0 });
    }
    let mut steps = 0u64;
    loop {
        let mut progressed = false;
        for ti in 0..n {
            if ths[ti].done {
                continue;
            }
            if let Some(w) = &ths[ti].wait {
                // Rendezvous with any other thread waiting on the complementary operation.
                let (ch, sending) = match w {
                    Wait::Send(c, _) => (*c, true),
                    Wait::Recv(c) => (*c, false),
                };
                let partner = (0..n).find(|&j| {
                    j != ti
                        && match &ths[j].wait {
                            Some(Wait::Send(c, _)) => !sending && *c == ch,
                            Some(Wait::Recv(c)) => sending && *c == ch,
                            None => false,
                        }
                });
                let Some(j) = partner else { continue };
                let (s, r) = if sending { (ti, j) } else { (j, ti) };
                let Some(Wait::Send(_, v)) = ths[s].wait.take() else { unreachable!() };
                ths[r].wait = None;
                let fr = ths[r].frames.last_mut().expect("frame");
                let i = &fr.f.blocks[fr.block].instrs[fr.index];
                if let Some(d) = &i.result {
                    fr.vals.insert(d.as_str(), v);
                }
                fr.index += 1;
                ths[s].frames.last_mut().expect("frame").index += 1;
                progressed = true;
                continue;
            }
            steps += 1;
            if steps > cfg.step_budget {
                return Err(DynError::Budget(cfg.step_budget));
            }
            progressed = true;
            step(p, &table, &mut ths[ti], &mut out, ti)?;
        }
        if ths.iter().all(|t| t.done) {
            break;
        }
        if !progressed {
            let chans: BTreeSet<i32> = ths
                .iter()
                .filter_map(|t| match t.wait {
                    Some(Wait::Send(c, _)) | Some(Wait::Recv(c)) => Some(c),
                    None => None,
                })
                .collect();
            return Err(DynError::Deadlock(chans.into_iter().collect()));
        }
    }
    for (ti, t) in ths.iter().enumerate() {
        out.returns[ti] = t.ret;
    }
    Ok(out)
}

fn step<'a>(
    p: &'a EirProgram,
    table: &BTreeMap<u32, (String, String)>,
    th: &mut Th<'a>,
    out: &mut BbCounts,
    ti: usize,
) -> Result<(), DynError> {
    let fr = th.frames.last_mut().expect("frame");
    let f = fr.f;
    let i = &f.blocks[fr.block].instrs[fr.index];
    let set = |fr: &mut Frame<'a>, v: i32| {
        if let Some(d) = &i.result {
            fr.vals.insert(d.as_str(), v);
        }
    };
    let mut goto: Option<&str> = None;
    match &i.kind {
        InstKind::Const(c) => set(fr, *c),
        InstKind::Bin(op, a, b) => {
            let v = op.eval(eval(fr, a)?, eval(fr, b)?).ok_or(DynError::DivByZero)?;
            set(fr, v);
        }
        InstKind::Icmp(pr, a, b) => {
            let v = pr.eval(eval(fr, a)?, eval(fr, b)?) as i32;
            set(fr, v);
        }
        InstKind::Phi(_) => unreachable!("phis are evaluated on block entry"),
        InstKind::Load(a) => {
            let k = addr(&th.mem, eval(fr, a)?)?;
            let v = th.mem[k];
            set(fr, v);
        }
        InstKind::Store(v, a) => {
            let k = addr(&th.mem, eval(fr, a)?)?;
            th.mem[k] = eval(fr, v)?;
        }
        InstKind::Emit(id) => {
            let (fname, bname) = table.get(id).ok_or_else(|| DynError::Malformed(format!("unknown emit id {id}")))?;
            *out.threads[ti].entry(block_key(fname, bname)).or_insert(0) += 1;
        }
        InstKind::ChanSend(c, v) => {
            th.wait = Some(Wait::Send(eval(fr, c)?, eval(fr, v)?));
            return Ok(());
        }
        InstKind::ChanRecv(c) => {
            th.wait = Some(Wait::Recv(eval(fr, c)?));
            return Ok(());
        }
        InstKind::Call(g, args) => {
            let callee = p.function(g).ok_or_else(|| DynError::Malformed(format!("unknown function {g}")))?;
            let vals = args.iter().map(|a| eval(fr, a)).collect::<Result<Vec<_>, _>>()?;
            fr.index += 1;
            let dest = i.result.as_deref();
            let nf = enter(callee, &vals, dest, &mut out.calls[ti]);
            th.frames.push(nf);
            return Ok(());
        }
        InstKind::Ret(v) => {
            let rv = match v {
                Some(v) => eval(fr, v)?,
                None => 0,
            };
            let done = th.frames.pop().expect("frame");
            match th.frames.last_mut() {
                Some(caller) => {
                    if let Some(d) = done.dest {
                        caller.vals.insert(d, rv);
                    }
                }
                None => {
                    th.done = true;
                    th.ret = rv;
                }
            }
            return Ok(());
        }
        InstKind::Br(t) => goto = Some(t),
        InstKind::BrCond(c, t, e) => goto = Some(if eval(fr, c)? != 0 { t } else { e }),
        InstKind::Switch(v, d, cases) => {
            let x = eval(fr, v)?;
            goto = Some(cases.iter().find(|(k, _)| *k == x).map_or(d.as_str(), |(_, t)| t.as_str()));
        }
    }
    match goto {
        None => fr.index += 1,
        Some(target) => {
            let from = f.blocks[fr.block].label.as_str();
            let to = f.block_index(target).ok_or_else(|| DynError::Malformed(format!("unknown block {target}")))?;
            *out.edges[ti].entry(format!("{}:{from}->{target}", f.name)).or_insert(0) += 1;
            let mut incoming = Vec::new();
            for phi in f.blocks[to].phis() {
                let InstKind::Phi(incs) = &phi.kind else { unreachable!() };
                let (_, v) = incs
                    .iter()
                    .find(|(l, _)| l == from)
                    .ok_or_else(|| DynError::Malformed(format!("phi in {target} lacks {from}")))?;
                incoming.push((phi.result.as_deref().expect("phi result"), eval(fr, v)?));
            }
            for (d, v) in incoming {
                fr.vals.insert(d, v);
            }
            fr.block = to;
            skip_phis(fr);
        }
    }
    Ok(())
}

/// Counts for a program that is not instrumented: instruments a copy first.
pub fn profile_counts(p: &EirProgram, inputs: &[i32], cfg: &InterpConfig) -> Result<BbCounts, DynError> {
    interpret_ir(&instrument_ir(p)?, inputs, cfg)
}
