//! Cycle-accurate simulator for lowered programs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::DynError;
use crate::energy::{idle_cycles_energy, instruction_total_energy, EnergyError, EnergyModelParams};
use crate::ir::{BinOp, CmpPred};
use crate::isa::{IsaProgram, Opcode, Operand, Reg, ARG_REGS, MAX_THREADS};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IssConfig {
    /// Words of private memory per thread.
    pub memory_words: usize,
    pub cycle_budget: u64,
    /// Record one entry per issue slot.
    pub trace: bool,
}

impl Default for IssConfig {
    fn default() -> Self {
        IssConfig { memory_words: 1 << 14, cycle_budget: 2_000_000_000, trace: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueRecord {
    pub cycle: u64,
    pub thread: usize,
    pub core: u32,
    pub func: String,
    pub block: String,
    pub op: Opcode,
    pub nt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub cycle: u64,
    pub channel: i32,
    pub sender: usize,
    pub receiver: usize,
    pub crossing: bool,
}

/// Everything the simulator observed. Energy is derived from the counts so it
/// can be evaluated in any scalar.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub wall_cycles: u64,
    /// Cycles during which a populated core had no live thread, summed over cores.
    pub idle_cycles: u64,
    pub issued: Vec<u64>,
    pub div_stalls: u64,
    /// Issue count per (opcode, active thread count).
    pub op_counts: BTreeMap<(Opcode, u32), u64>,
    /// Block entries per thread, keyed `func:block`.
    pub block_counts: Vec<BTreeMap<String, u64>>,
    pub tokens: Vec<TokenRecord>,
    pub returns: Vec<i32>,
    pub slots: Vec<IssueRecord>,
}

impl Trace {
    pub fn crossing_tokens(&self) -> u64 {
        self.tokens.iter().filter(|t| t.crossing).count() as u64
    }

    pub fn instruction_energy<T: Scalar>(&self, params: &EnergyModelParams<T>) -> Result<T, EnergyError> {
        let mut total = T::zero();
        for ((op, nt), n) in &self.op_counts {
            total = total + instruction_total_energy(*op, *nt, params)? * T::from_count(*n);
        }
        Ok(total)
    }

    pub fn idle_energy<T: Scalar>(&self, params: &EnergyModelParams<T>) -> T {
        idle_cycles_energy(self.idle_cycles, params)
    }

    pub fn link_energy<T: Scalar>(&self, params: &EnergyModelParams<T>) -> T {
        params.link_cost.clone() * T::from_count(self.crossing_tokens())
    }

    pub fn energy<T: Scalar>(&self, params: &EnergyModelParams<T>) -> Result<T, EnergyError> {
        Ok(self.instruction_energy(params)? + self.idle_energy(params) + self.link_energy(params))
    }

    pub fn seconds<T: Scalar>(&self, params: &EnergyModelParams<T>) -> T {
        T::from_count(self.wall_cycles) * params.tclk.clone()
    }

    /// JSON lines, one record per issue slot.
    pub fn slots_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.slots {
            s.push_str(&serde_json::to_string(r).expect("serializable record"));
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RetAddr {
    Exit,
    To { func: usize, block: usize, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Running,
    Blocked { since: u64 },
    Finished { end: u64 },
}

#[derive(Debug, Clone, Copy)]
enum Pending {
    Send(i32),
    Recv(Reg),
}

struct Thread {
    core: u32,
    state: State,
    ready_at: u64,
    pending: Option<(i32, Pending)>,
    dead: Vec<(u64, u64)>,
    func: usize,
    block: usize,
    index: usize,
    args: [i32; ARG_REGS as usize],
    lr: RetAddr,
    lr_stack: Vec<RetAddr>,
    frames: Vec<Vec<i32>>,
    mem: Vec<i32>,
    last_issue: u64,
}

struct Decoded {
    /// Block index of each label operand, per instruction.
    targets: Vec<Vec<Vec<Option<usize>>>>,
    callees: Vec<Vec<Vec<Option<usize>>>>,
    locals: Vec<usize>,
}

fn decode(p: &IsaProgram) -> Result<Decoded, DynError> {
    let mut targets = Vec::new();
    let mut callees = Vec::new();
    let mut locals = Vec::new();
    for f in &p.functions {
        let mut ft = Vec::new();
        let mut fc = Vec::new();
        let mut nl = 0usize;
        for b in &f.blocks {
            let mut bt = Vec::new();
            let mut bc = Vec::new();
            for i in &b.instrs {
                let mut t = None;
                let mut c = None;
                for o in &i.operands {
                    match o {
                        Operand::Label(l) => {
                            t = Some(f.block_index(l).ok_or_else(|| {
                                DynError::Malformed(format!("{}:{}: unknown label {l}", f.name, b.label))
                            })?)
                        }
                        Operand::Func(g) => {
                            c = Some(
                                p.function_index(g)
                                    .ok_or_else(|| DynError::Malformed(format!("unknown function {g}")))?,
                            )
                        }
                        Operand::Reg(Reg::Local(n)) => nl = nl.max(*n as usize + 1),
                        _ => {}
                    }
                }
                bt.push(t);
                bc.push(c);
            }
            ft.push(bt);
            fc.push(bc);
        }
        targets.push(ft);
        callees.push(fc);
        locals.push(nl);
    }
    Ok(Decoded { targets, callees, locals })
}

impl Thread {
    fn read(&self, o: &Operand) -> Result<i32, DynError> {
        match o {
            Operand::Imm(v) => Ok(*v),
            Operand::Reg(Reg::Arg(k)) => Ok(self.args[*k as usize]),
            Operand::Reg(Reg::Local(n)) => Ok(self.frames.last().expect("frame")[*n as usize]),
            Operand::Reg(Reg::Sp) => Ok(0),
            other => Err(DynError::Malformed(format!("cannot read operand {other:?}"))),
        }
    }

    fn write(&mut self, o: &Operand, v: i32) -> Result<(), DynError> {
        self.write_reg(
            match o {
                Operand::Reg(r) => *r,
                other => return Err(DynError::Malformed(format!("cannot write operand {other:?}"))),
            },
            v,
        )
    }

    fn write_reg(&mut self, r: Reg, v: i32) -> Result<(), DynError> {
        match r {
            Reg::Arg(k) => self.args[k as usize] = v,
            Reg::Local(n) => self.frames.last_mut().expect("frame")[n as usize] = v,
            other => return Err(DynError::Malformed(format!("cannot write {other:?}"))),
        }
        Ok(())
    }

    fn addr(&self, o: &Operand) -> Result<usize, DynError> {
        let a = self.read(o)? as u32 as usize;
        if a < self.mem.len() {
            Ok(a)
        } else {
            Err(DynError::OutOfBounds(a as i64))
        }
    }

    fn live_at(&self, c: u64) -> bool {
        match self.state {
            State::Running => true,
            State::Blocked { since } => c < since,
            State::Finished { end } => c < end,
        }
    }
}

fn binop(op: Opcode) -> Option<BinOp> {
    Some(match op {
        Opcode::Add => BinOp::Add,
        Opcode::Sub => BinOp::Sub,
        Opcode::Mul => BinOp::Mul,
        Opcode::Divu => BinOp::Udiv,
        Opcode::Remu => BinOp::Urem,
        Opcode::And => BinOp::And,
        Opcode::Or => BinOp::Or,
        Opcode::Xor => BinOp::Xor,
        Opcode::Shl => BinOp::Shl,
        Opcode::Shr => BinOp::Shr,
        _ => return None,
    })
}

fn cmp(op: Opcode) -> Option<CmpPred> {
    Some(match op {
        Opcode::Eq => CmpPred::Eq,
        Opcode::Ltu => CmpPred::Ult,
        Opcode::Lts => CmpPred::Slt,
        _ => return None,
    })
}

/// Runs `p` until every thread finishes.
///
/// Each thread issues at most once per `max(Nt, 4)` cycles, where Nt counts
/// the live threads on its core at issue time. A thread whose channel partner
/// has not arrived by its next issue slot leaves the live set until matched.
pub fn iss_run<T: Scalar>(
    p: &IsaProgram,
    inputs: &[i32],
    params: &EnergyModelParams<T>,
    cfg: &IssConfig,
) -> Result<(Trace, T), DynError> {
    let trace = simulate(p, inputs, params.timing, cfg)?;
    let e = trace.energy(params)?;
    Ok((trace, e))
}

/// Simulation without energy evaluation.
pub fn simulate(
    p: &IsaProgram,
    inputs: &[i32],
    timing: crate::isa::TimingRules,
    cfg: &IssConfig,
) -> Result<Trace, DynError> {
    let dec = decode(p)?;
    let decls = p.effective_threads();
    let mut per_core: BTreeMap<u32, u32> = BTreeMap::new();
    for d in &decls {
        *per_core.entry(d.core).or_insert(0) += 1;
    }
    if let Some((c, n)) = per_core.iter().find(|(_, n)| **n > MAX_THREADS) {
        return Err(DynError::Config(format!("core {c} has {n} threads, at most {MAX_THREADS} supported")));
    }
    let mut threads = Vec::new();
    for d in &decls {
        let fi = p.function_index(&d.function).ok_or_else(|| DynError::Malformed(format!("unknown function {}", d.function)))?;
        if d.args.len() > ARG_REGS as usize {
            return Err(DynError::Config(format!("thread {} takes more than {ARG_REGS} arguments", d.function)));
        }
        let mut args = [0; ARG_REGS as usize];
        for (k, a) in d.args.iter().enumerate() {
            args[k] = a.resolve(inputs);
        }
        threads.push(Thread {
            core: d.core,
            state: State::Running,
            ready_at: 0,
            pending: None,
            dead: Vec::new(),
            func: fi,
            block: 0,
            index: 0,
            args,
            lr: RetAddr::Exit,
            lr_stack: Vec::new(),
            frames: vec![vec![0; dec.locals[fi]]],
            mem: vec![0; cfg.memory_words],
            last_issue: 0,
        });
    }
    let mut trace = Trace {
        issued: vec![0; threads.len()],
        block_counts: vec![BTreeMap::new(); threads.len()],
        returns: vec![0; threads.len()],
        ..Trace::default()
    };
    for (ti, t) in threads.iter().enumerate() {
        let f = &p.functions[t.func];
        *trace.block_counts[ti].entry(format!("{}:{}", f.name, f.blocks[0].label)).or_insert(0) += 1;
    }
    loop {
        let next = threads
            .iter()
            .enumerate()
            .filter(|(_, t)| t.state == State::Running)
            .min_by_key(|(i, t)| (t.ready_at, t.pending.is_some(), *i))
            .map(|(i, _)| i);
        let Some(ti) = next else {
            if threads.iter().all(|t| matches!(t.state, State::Finished { .. })) {
                break;
            }
            let chans: BTreeSet<i32> = threads.iter().filter_map(|t| t.pending.map(|(c, _)| c)).collect();
            return Err(DynError::Deadlock(chans.into_iter().collect()));
        };
        let c = threads[ti].ready_at;
        if threads[ti].pending.is_some() {
            threads[ti].state = State::Blocked { since: c };
            continue;
        }
        if c > cfg.cycle_budget {
            return Err(DynError::Budget(cfg.cycle_budget));
        }
        let core = threads[ti].core;
        let nt = threads.iter().filter(|t| t.core == core && t.live_at(c)).count() as u32;
        let (fi, bi, ii) = (threads[ti].func, threads[ti].block, threads[ti].index);
        let func = &p.functions[fi];
        let Some(instr) = func.blocks[bi].instrs.get(ii) else {
            return Err(DynError::Malformed(format!("{}:{} ends without a terminator", func.name, func.blocks[bi].label)));
        };
        let op = instr.op;
        let latency = u64::from(timing.instruction_cycles(op, nt).map_err(|e| DynError::Config(e.to_string()))?);
        *trace.op_counts.entry((op, nt)).or_insert(0) += 1;
        trace.issued[ti] += 1;
        if op.is_div() {
            trace.div_stalls += 1;
        }
        if cfg.trace {
            trace.slots.push(IssueRecord {
                cycle: c,
                thread: ti,
                core,
                func: func.name.clone(),
                block: func.blocks[bi].label.clone(),
                op,
                nt,
            });
        }
        let t = &mut threads[ti];
        t.ready_at = c + latency;
        t.last_issue = c;
        let ops = &instr.operands;
        let mut jump: Option<usize> = None;
        let mut finished = false;
        if let Some(b) = binop(op) {
            let v = b.eval(t.read(&ops[1])?, t.read(&ops[2])?).ok_or(DynError::DivByZero)?;
            t.write(&ops[0], v)?;
        } else if let Some(pr) = cmp(op) {
            let v = pr.eval(t.read(&ops[1])?, t.read(&ops[2])?) as i32;
            t.write(&ops[0], v)?;
        } else {
            match op {
                Opcode::Ldc | Opcode::Mov => {
                    let v = t.read(&ops[1])?;
                    t.write(&ops[0], v)?;
                }
                Opcode::Ldw => {
                    if ops[0] == Operand::Reg(Reg::Lr) && ops[1] == Operand::Reg(Reg::Sp) {
                        t.lr = t.lr_stack.pop().ok_or_else(|| DynError::Malformed("stack underflow".into()))?;
                    } else {
                        let a = t.addr(&ops[1])?;
                        let v = t.mem[a];
                        t.write(&ops[0], v)?;
                    }
                }
                Opcode::Stw => {
                    if ops[0] == Operand::Reg(Reg::Lr) && ops[1] == Operand::Reg(Reg::Sp) {
                        t.lr_stack.push(t.lr);
                    } else {
                        let v = t.read(&ops[0])?;
                        let a = t.addr(&ops[1])?;
                        t.mem[a] = v;
                    }
                }
                Opcode::Bt | Opcode::Bf => {
                    let cond = match ops.first() {
                        Some(Operand::Pred(pr)) => pr.eval(t.read(&ops[1])?, t.read(&ops[2])?),
                        Some(o) => t.read(o)? != 0,
                        None => return Err(DynError::Malformed("branch without operands".into())),
                    };
                    if cond == (op == Opcode::Bt) {
                        jump = dec.targets[fi][bi][ii];
                    }
                }
                Opcode::Bu => jump = dec.targets[fi][bi][ii],
                Opcode::Bl => {
                    let g = dec.callees[fi][bi][ii].ok_or_else(|| DynError::Malformed("bl without callee".into()))?;
                    t.lr = RetAddr::To { func: fi, block: bi, index: ii + 1 };
                    t.frames.push(vec![0; dec.locals[g]]);
                    t.func = g;
                    t.block = 0;
                    t.index = 0;
                    let f = &p.functions[g];
                    *trace.block_counts[ti].entry(format!("{}:{}", f.name, f.blocks[0].label)).or_insert(0) += 1;
                }
                Opcode::Retsp => match t.lr {
                    RetAddr::Exit => finished = true,
                    RetAddr::To { func, block, index } => {
                        t.frames.pop();
                        t.func = func;
                        t.block = block;
                        t.index = index;
                    }
                },
                Opcode::Halt => finished = true,
                Opcode::Fnop | Opcode::Emitid => {}
                Opcode::Out | Opcode::In => {
                    let (ch, mine) = if op == Opcode::Out {
                        (t.read(&ops[0])?, Pending::Send(t.read(&ops[1])?))
                    } else {
                        let Operand::Reg(r) = ops[0] else {
                            return Err(DynError::Malformed("in without destination register".into()));
                        };
                        (t.read(&ops[1])?, Pending::Recv(r))
                    };
                    let partner = threads.iter().position(|o| match o.pending {
                        Some((pc, Pending::Send(_))) => pc == ch && matches!(mine, Pending::Recv(_)),
                        Some((pc, Pending::Recv(_))) => pc == ch && matches!(mine, Pending::Send(_)),
                        None => false,
                    });
                    match partner {
                        Some(pj) if pj != ti => {
                            let (value, sender, receiver, rreg) = match (mine, threads[pj].pending.unwrap().1) {
                                (Pending::Send(v), Pending::Recv(r)) => (v, ti, pj, r),
                                (Pending::Recv(r), Pending::Send(v)) => (v, pj, ti, r),
                                _ => unreachable!(),
                            };
                            threads[receiver].write_reg(rreg, value)?;
                            let other = &mut threads[pj];
                            other.pending = None;
                            if let State::Blocked { since } = other.state {
                                other.dead.push((since, c + 1));
                                other.state = State::Running;
                                other.ready_at = other.ready_at.max(c + 1);
                            }
                            trace.tokens.push(TokenRecord {
                                cycle: c,
                                channel: ch,
                                sender,
                                receiver,
                                crossing: threads[sender].core != threads[receiver].core,
                            });
                        }
                        _ => threads[ti].pending = Some((ch, mine)),
                    }
                }
                _ => return Err(DynError::Malformed(format!("unsupported opcode {}", op.name()))),
            }
        }
        let t = &mut threads[ti];
        if finished {
            let end = c + latency;
            t.state = State::Finished { end };
            t.dead.push((end, u64::MAX));
            trace.returns[ti] = t.args[0];
            continue;
        }
        if op == Opcode::Bl || op == Opcode::Retsp {
            continue;
        }
        let blocks = &p.functions[t.func].blocks;
        let next_block = match jump {
            Some(b) => Some(b),
            None if t.index + 1 < blocks[t.block].instrs.len() => {
                t.index += 1;
                None
            }
            None if t.block + 1 < blocks.len() => Some(t.block + 1),
            None if t.frames.len() == 1 => {
                let end = c + latency;
                t.state = State::Finished { end };
                t.dead.push((end, u64::MAX));
                trace.returns[ti] = t.args[0];
                continue;
            }
            None => return Err(DynError::Malformed(format!("fell off the end of {}", p.functions[t.func].name))),
        };
        if let Some(b) = next_block {
            t.block = b;
            t.index = 0;
            let f = &p.functions[t.func];
            *trace.block_counts[ti].entry(format!("{}:{}", f.name, f.blocks[b].label)).or_insert(0) += 1;
        }
    }
    trace.wall_cycles = threads
        .iter()
        .map(|t| match t.state {
            State::Finished { end } => end,
            _ => t.ready_at,
        })
        .max()
        .unwrap_or(0);
    for core in per_core.keys() {
        let members: Vec<&Thread> = threads.iter().filter(|t| t.core == *core).collect();
        trace.idle_cycles += idle_cycles(&members, trace.wall_cycles);
    }
    Ok(trace)
}

/// Cycles in `[0, wall)` during which none of `members` is live.
fn idle_cycles(members: &[&Thread], wall: u64) -> u64 {
    let mut points: BTreeSet<u64> = BTreeSet::from([0, wall]);
    for t in members {
        for (a, b) in &t.dead {
            points.insert((*a).min(wall));
            points.insert((*b).min(wall));
        }
    }
    let pts: Vec<u64> = points.into_iter().collect();
    let mut idle = 0;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let all_dead = members.iter().all(|t| t.dead.iter().any(|(s, e)| *s <= a && a < *e));
        if all_dead {
            idle += b - a;
        }
    }
    idle
}
