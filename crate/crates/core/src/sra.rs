//! Static energy bounds via the implicit path enumeration technique.
//!
//! Each function's CFG becomes an integer program over block and edge
//! execution counts. Call sites are charged the bound of their callee, and
//! multi-threaded programs aggregate per-thread bounds.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfg::{detect_loops, Cfg};
use crate::energy::{idle_energy, EnergyError, EnergyModelParams};
use crate::ilp::{solve_ilp, IlpError, LinearProgram, Sense};
use crate::ir::{build_ir_cfg, EirProgram, InstKind, ThreadArg, ThreadDecl, Value};
use crate::isa::{build_isa_cfg, IsaProgram, Opcode, Operand};
use crate::mapping::IrEnergyMap;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SraError {
    #[error("{func}: loop header {header} has no !bound annotation")]
    MissingBound { func: String, header: String },
    #[error("recursive call chain through {0}")]
    Recursion(String),
    #[error("{func}: {msg}")]
    Irreducible { func: String, msg: String },
    #[error("unknown function {0}")]
    UnknownFunction(String),
    #[error("constraint line {line}: {msg}")]
    ConstraintSyntax { line: usize, msg: String },
    #[error("constraint `{0}` refers to blocks not found in any single function")]
    UnknownLabel(String),
    #[error("{func}: {err}")]
    Ilp { func: String, err: IlpError },
    #[error("channel in {func}:{block} cannot be resolved statically")]
    UnresolvedChannel { func: String, block: String },
    #[error("channel {0} has receivers on several cores")]
    AmbiguousChannel(i32),
    #[error("channel {0} has no receiver")]
    NoReceiver(i32),
    #[error("unbalanced workload: {0}")]
    Unbalanced(String),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Isa,
    Ir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Upper,
    Lower,
    Actual,
}

impl Direction {
    pub fn kind(self) -> BoundKind {
        match self {
            Direction::Max => BoundKind::Upper,
            Direction::Min => BoundKind::Lower,
        }
    }
}

/// `Σ coef · x[label] <sense> rhs`, optionally scoped to one function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserConstraint {
    pub terms: Vec<(i64, Option<String>, String)>,
    pub sense: Sense,
    pub rhs: i64,
    pub text: String,
}

/// Parses lines such as `x[then] + 2 x[main:inner] <= 1`; `#` starts a comment.
pub fn parse_constraints(text: &str) -> Result<Vec<UserConstraint>, SraError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |msg: &str| SraError::ConstraintSyntax { line, msg: msg.to_string() };
        let (lhs, sense, rhs) = if let Some((l, r)) = body.split_once("<=") {
            (l, Sense::Le, r)
        } else if let Some((l, r)) = body.split_once(">=") {
            (l, Sense::Ge, r)
        } else if let Some((l, r)) = body.split_once('=') {
            (l, Sense::Eq, r)
        } else {
            return Err(err("expected <=, >= or ="));
        };
        let rhs: i64 = rhs.trim().parse().map_err(|_| err("right-hand side must be an integer"))?;
        let mut terms = Vec::new();
        let mut rest = lhs.trim();
        let mut sign = 1i64;
        let mut first = true;
        while !rest.is_empty() {
            if let Some(r) = rest.strip_prefix('+') {
                sign = 1;
                rest = r.trim_start();
            } else if let Some(r) = rest.strip_prefix('-') {
                sign = -1;
                rest = r.trim_start();
            } else if !first {
                return Err(err("expected + or - between terms"));
            }
            let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
            let coef = if digits.is_empty() { 1 } else { digits.parse().map_err(|_| err("bad coefficient"))? };
            rest = rest[digits.len()..].trim_start();
            rest = rest.strip_prefix('*').unwrap_or(rest).trim_start();
            let r = rest.strip_prefix("x[").ok_or_else(|| err("expected x[label]"))?;
            let (name, tail) = r.split_once(']').ok_or_else(|| err("missing ]"))?;
            let (func, label) = match name.split_once(':') {
                Some((f, l)) => (Some(f.trim().to_string()), l.trim().to_string()),
                None => (None, name.trim().to_string()),
            };
            terms.push((sign * coef, func, label));
            rest = tail.trim_start();
            sign = 1;
            first = false;
        }
        if terms.is_empty() {
            return Err(err("no terms"));
        }
        out.push(UserConstraint { terms, sense, rhs, text: body.to_string() });
    }
    Ok(out)
}

/// The integer program for one CFG.
#[derive(Debug, Clone, PartialEq)]
pub struct IpetProblem<T> {
    pub lp: LinearProgram<T>,
    pub nodes: usize,
    /// Variable `nodes + k` counts traversals of `edges[k]`.
    pub edges: Vec<(usize, usize)>,
}

/// A user constraint resolved to `(coefficient, node)` terms, its sense and right-hand side.
pub type NodeRow = (Vec<(i64, usize)>, Sense, i64);

/// Builds the IPET formulation. `bounds` maps loop header nodes to the
/// maximum number of back-edge traversals per entry into the loop.
pub fn build_ipet<T: Scalar>(
    cfg: &Cfg,
    costs: &[T],
    bounds: &BTreeMap<usize, u32>,
    direction: Direction,
    user: &[NodeRow],
) -> Result<IpetProblem<T>, SraError> {
    let n = cfg.len();
    let edges = cfg.edges();
    let forest = detect_loops(cfg)
        .map_err(|e| SraError::Irreducible { func: String::new(), msg: e.to_string() })?;
    let mut lp = LinearProgram::new(n + edges.len(), direction == Direction::Max);
    for (v, c) in costs.iter().enumerate() {
        lp.objective[v] = c.clone();
    }
    let one = T::one;
    let reach = cfg.reachable();
    for v in 0..n {
        let ins: Vec<(usize, T)> = edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.1 == v)
            .map(|(k, _)| (n + k, one()))
            .collect();
        let outs: Vec<(usize, T)> = edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.0 == v)
            .map(|(k, _)| (n + k, one()))
            .collect();
        if !reach[v] {
            lp.add(vec![(v, one())], Sense::Eq, T::zero());
            continue;
        }
        // The entry node receives one implicit incoming traversal.
        let inflow = if v == cfg.entry() { one() } else { T::zero() };
        if !ins.is_empty() || v == cfg.entry() {
            let mut c = vec![(v, one())];
            c.extend(ins.into_iter().map(|(j, k)| (j, T::zero() - k)));
            lp.add(c, Sense::Eq, inflow);
        }
        if !outs.is_empty() {
            let mut c = vec![(v, one())];
            c.extend(outs.into_iter().map(|(j, k)| (j, T::zero() - k)));
            lp.add(c, Sense::Eq, T::zero());
        }
    }
    let edge_var = |e: &(usize, usize)| n + edges.iter().position(|x| x == e).expect("edge exists");
    for l in &forest.loops {
        let Some(&k) = bounds.get(&l.header) else {
            return Err(SraError::MissingBound { func: String::new(), header: cfg.label(l.header).to_string() });
        };
        let mut c: Vec<(usize, T)> = l.back_edges.iter().map(|e| (edge_var(e), one())).collect();
        let kk = T::from_count(u64::from(k));
        c.extend(l.entry_edges.iter().map(|e| (edge_var(e), T::zero() - kk.clone())));
        if l.header == cfg.entry() {
            lp.add(c, Sense::Le, kk);
        } else {
            lp.add(c, Sense::Le, T::zero());
        }
    }
    for (terms, sense, rhs) in user {
        let coeffs = terms.iter().map(|(c, v)| (*v, T::from_f64_value(*c as f64))).collect();
        lp.add(coeffs, *sense, T::from_f64_value(*rhs as f64));
    }
    Ok(IpetProblem { lp, nodes: n, edges })
}

/// Solves an IPET problem, returning the bound and per-node counts.
pub fn solve_ipet<T: Scalar>(p: &IpetProblem<T>) -> Result<(T, Vec<T>), IlpError> {
    let s = solve_ilp(&p.lp)?;
    Ok((s.objective, s.values[..p.nodes].to_vec()))
}

/// One function prepared for analysis.
#[derive(Debug, Clone)]
pub struct FlowGraph<T> {
    pub name: String,
    pub cfg: Cfg,
    pub costs: Vec<T>,
    /// Loop bound per header label.
    pub bounds: BTreeMap<String, u32>,
    /// Callees invoked from each node, one entry per call site.
    pub calls: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionBound<T> {
    pub bound: T,
    /// Execution count per block label of the witness path.
    pub flow: BTreeMap<String, T>,
}

fn analyze_function<T: Scalar>(
    graphs: &BTreeMap<&str, &FlowGraph<T>>,
    name: &str,
    direction: Direction,
    user: &[UserConstraint],
    memo: &mut BTreeMap<String, FunctionBound<T>>,
    stack: &mut Vec<String>,
) -> Result<T, SraError> {
    if let Some(b) = memo.get(name) {
        return Ok(b.bound.clone());
    }
    if stack.iter().any(|s| s == name) {
        return Err(SraError::Recursion(name.to_string()));
    }
    let g = *graphs.get(name).ok_or_else(|| SraError::UnknownFunction(name.to_string()))?;
    stack.push(name.to_string());
    let mut costs = g.costs.clone();
    for (v, callees) in g.calls.iter().enumerate() {
        for c in callees {
            let cb = analyze_function(graphs, c, direction, user, memo, stack)?;
            costs[v] = costs[v].clone() + cb;
        }
    }
    stack.pop();
    let mut bounds = BTreeMap::new();
    for (label, k) in &g.bounds {
        if let Some(v) = g.cfg.index_of(label) {
            bounds.insert(v, *k);
        }
    }
    let mut rows = Vec::new();
    for uc in user {
        if let Some(row) = constraint_row(uc, &g.name, &g.cfg)? {
            rows.push(row);
        }
    }
    let p = build_ipet(&g.cfg, &costs, &bounds, direction, &rows).map_err(|e| match e {
        SraError::MissingBound { header, .. } => SraError::MissingBound { func: g.name.clone(), header },
        SraError::Irreducible { msg, .. } => SraError::Irreducible { func: g.name.clone(), msg },
        other => other,
    })?;
    let (bound, counts) = solve_ipet(&p).map_err(|err| SraError::Ilp { func: g.name.clone(), err })?;
    let flow = counts.into_iter().enumerate().map(|(v, c)| (g.cfg.label(v).to_string(), c)).collect();
    memo.insert(name.to_string(), FunctionBound { bound: bound.clone(), flow });
    Ok(bound)
}

fn constraint_row(
    uc: &UserConstraint,
    func: &str,
    cfg: &Cfg,
) -> Result<Option<NodeRow>, SraError> {
    let scoped = uc.terms.iter().any(|(_, f, _)| f.is_some());
    if scoped && uc.terms.iter().any(|(_, f, _)| f.as_deref().is_some_and(|f| f != func)) {
        return Ok(None);
    }
    let mut terms = Vec::new();
    for (c, _, label) in &uc.terms {
        match cfg.index_of(label) {
            Some(v) => terms.push((*c, v)),
            None if scoped => return Err(SraError::UnknownLabel(uc.text.clone())),
            None => return Ok(None),
        }
    }
    Ok(Some((terms, uc.sense, uc.rhs)))
}

/// Bounds every function reachable from `root`, callees first.
pub fn analyze_graphs<T: Scalar>(
    graphs: &[FlowGraph<T>],
    root: &str,
    direction: Direction,
    user: &[UserConstraint],
) -> Result<BTreeMap<String, FunctionBound<T>>, SraError> {
    let by_name: BTreeMap<&str, &FlowGraph<T>> = graphs.iter().map(|g| (g.name.as_str(), g)).collect();
    for uc in user {
        let applies = graphs.iter().any(|g| matches!(constraint_row(uc, &g.name, &g.cfg), Ok(Some(_))));
        if !applies {
            return Err(SraError::UnknownLabel(uc.text.clone()));
        }
    }
    let mut memo = BTreeMap::new();
    analyze_function(&by_name, root, direction, user, &mut memo, &mut Vec::new())?;
    Ok(memo)
}

/// Extra joules per (function, block), e.g. link energy of crossing sends.
pub type BlockExtras<T> = BTreeMap<(String, String), T>;

fn ir_bounds(ir: &EirProgram, func: &str) -> BTreeMap<String, u32> {
    ir.function(func)
        .map(|f| f.blocks.iter().filter_map(|b| b.bound.map(|k| (b.label.clone(), k))).collect())
        .unwrap_or_default()
}

/// Flow graphs at ISA level: block costs are ISA block energies.
pub fn isa_graphs<T: Scalar>(
    ir: &EirProgram,
    isa: &IsaProgram,
    nt: u32,
    params: &EnergyModelParams<T>,
    extras: &BlockExtras<T>,
) -> Result<Vec<FlowGraph<T>>, SraError> {
    let mut out = Vec::new();
    for f in &isa.functions {
        let cfg = build_isa_cfg(f).map_err(|e| SraError::Other(e.to_string()))?;
        let mut costs = Vec::with_capacity(f.blocks.len());
        let mut calls = Vec::with_capacity(f.blocks.len());
        for b in &f.blocks {
            let mut c = crate::energy::block_energy(b, nt, params)?;
            if let Some(x) = extras.get(&(f.name.clone(), b.label.clone())) {
                c = c + x.clone();
            }
            costs.push(c);
            calls.push(
                b.instrs
                    .iter()
                    .filter(|i| i.op == Opcode::Bl)
                    .filter_map(|i| match i.operands.first() {
                        Some(Operand::Func(g)) => Some(g.clone()),
                        _ => None,
                    })
                    .collect(),
            );
        }
        out.push(FlowGraph { name: f.name.clone(), cfg, costs, bounds: ir_bounds(ir, &f.name), calls });
    }
    Ok(out)
}

/// Flow graphs at IR level: block costs come from the (tuned) IR energy map.
pub fn ir_graphs<T: Scalar>(
    ir: &EirProgram,
    energy: &IrEnergyMap<T>,
    extras: &BlockExtras<T>,
) -> Vec<FlowGraph<T>> {
    ir.functions
        .iter()
        .map(|f| {
            let cfg = build_ir_cfg(f);
            let costs = f
                .blocks
                .iter()
                .map(|b| {
                    let c = energy.block(&f.name, &b.label);
                    match extras.get(&(f.name.clone(), b.label.clone())) {
                        Some(x) => c + x.clone(),
                        None => c,
                    }
                })
                .collect();
            let calls = f
                .blocks
                .iter()
                .map(|b| {
                    b.instrs
                        .iter()
                        .filter_map(|i| match &i.kind {
                            InstKind::Call(g, _) => Some(g.clone()),
                            _ => None,
                        })
                        .collect()
                })
                .collect();
            FlowGraph { name: f.name.clone(), cfg, costs, bounds: ir_bounds(ir, &f.name), calls }
        })
        .collect()
}

/// Outcome of a static analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct SraResult<T> {
    pub bound: T,
    pub kind: BoundKind,
    pub level: Level,
    /// Witness counts of the root function of each thread.
    pub flows: Vec<BTreeMap<String, T>>,
    pub per_thread: Vec<T>,
    pub link_energy: T,
    pub idle_energy: T,
}

/// Functions reachable from `root` through calls.
pub fn reachable_functions(ir: &EirProgram, root: &str) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut work = vec![root.to_string()];
    while let Some(f) = work.pop() {
        if !seen.insert(f.clone()) {
            continue;
        }
        if let Some(func) = ir.function(&f) {
            for i in func.blocks.iter().flat_map(|b| b.instrs.iter()) {
                if let InstKind::Call(g, _) = &i.kind {
                    work.push(g.clone());
                }
            }
        }
    }
    seen
}

fn resolve_channel(ir: &EirProgram, t: &ThreadDecl, func: &str, v: &Value) -> Option<i32> {
    match v {
        Value::Const(c) => Some(*c),
        Value::Ssa(name) if func == t.function => {
            let k = ir.function(func)?.params.iter().position(|p| p == name)?;
            match t.args.get(k)? {
                ThreadArg::Lit(c) => Some(*c),
                ThreadArg::Input(_) => None,
            }
        }
        Value::Ssa(_) => None,
    }
}

/// Number of core-crossing sends in each block, per thread.
pub fn crossing_sends(ir: &EirProgram) -> Result<Vec<BTreeMap<(String, String), u64>>, SraError> {
    let threads = ir.effective_threads();
    let cores: BTreeSet<u32> = threads.iter().map(|t| t.core).collect();
    struct Site {
        thread: usize,
        func: String,
        block: String,
        send: bool,
        channel: Option<i32>,
    }
    let mut sites = Vec::new();
    for (ti, t) in threads.iter().enumerate() {
        for fname in reachable_functions(ir, &t.function) {
            let Some(f) = ir.function(&fname) else { continue };
            for b in &f.blocks {
                for i in &b.instrs {
                    let (send, ch) = match &i.kind {
                        InstKind::ChanSend(c, _) => (true, c),
                        InstKind::ChanRecv(c) => (false, c),
                        _ => continue,
                    };
                    sites.push(Site {
                        thread: ti,
                        func: fname.clone(),
                        block: b.label.clone(),
                        send,
                        channel: resolve_channel(ir, t, &fname, ch),
                    });
                }
            }
        }
    }
    let mut out = vec![BTreeMap::new(); threads.len()];
    if cores.len() <= 1 {
        return Ok(out);
    }
    if let Some(s) = sites.iter().find(|s| s.channel.is_none()) {
        return Err(SraError::UnresolvedChannel { func: s.func.clone(), block: s.block.clone() });
    }
    let mut receivers: BTreeMap<i32, BTreeSet<u32>> = BTreeMap::new();
    for s in sites.iter().filter(|s| !s.send) {
        receivers.entry(s.channel.unwrap()).or_default().insert(threads[s.thread].core);
    }
    for s in sites.iter().filter(|s| s.send) {
        let ch = s.channel.unwrap();
        let rc = receivers.get(&ch).ok_or(SraError::NoReceiver(ch))?;
        if rc.len() > 1 {
            return Err(SraError::AmbiguousChannel(ch));
        }
        if !rc.contains(&threads[s.thread].core) {
            *out[s.thread].entry((s.func.clone(), s.block.clone())).or_insert(0) += 1;
        }
    }
    Ok(out)
}

/// Active thread count of the core each thread runs on.
pub fn threads_per_core(threads: &[ThreadDecl]) -> Vec<u32> {
    threads.iter().map(|t| threads.iter().filter(|u| u.core == t.core).count() as u32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Single,
    Farm,
    Pipeline,
}

/// Classifies the thread structure; independent threads running different
/// code are not a balanced workload and are refused.
pub fn topology(ir: &EirProgram) -> Result<Topology, SraError> {
    let threads = ir.effective_threads();
    if threads.len() == 1 {
        return Ok(Topology::Single);
    }
    let communicates = ir
        .instructions()
        .any(|i| matches!(i.kind, InstKind::ChanSend(..) | InstKind::ChanRecv(_)));
    if communicates {
        return Ok(Topology::Pipeline);
    }
    let first = &threads[0].function;
    if threads.iter().all(|t| &t.function == first) {
        Ok(Topology::Farm)
    } else {
        Err(SraError::Unbalanced("independent threads run different functions".into()))
    }
}

/// Per-thread bounds at the given level, each thread at its core's thread
/// count, aggregated with link and idle energy.
///
/// `graphs_for` builds the flow graphs for a thread count and extra block costs.
pub fn analyze_threads<T: Scalar, F>(
    ir: &EirProgram,
    level: Level,
    params: &EnergyModelParams<T>,
    direction: Direction,
    user: &[UserConstraint],
    idle_seconds: &T,
    mut graphs_for: F,
) -> Result<SraResult<T>, SraError>
where
    F: FnMut(u32, &BlockExtras<T>) -> Result<Vec<FlowGraph<T>>, SraError>,
{
    topology(ir)?;
    let threads = ir.effective_threads();
    let nts = threads_per_core(&threads);
    let crossings = crossing_sends(ir)?;
    let mut per_thread = Vec::new();
    let mut flows = Vec::new();
    let mut link = T::zero();
    for (ti, t) in threads.iter().enumerate() {
        let nt = nts[ti];
        let extras: BlockExtras<T> = crossings[ti]
            .iter()
            .map(|(k, n)| (k.clone(), params.link_cost.clone() * T::from_count(*n)))
            .collect();
        let graphs = graphs_for(nt, &extras)?;
        let result = analyze_graphs(&graphs, &t.function, direction, user)?;
        let root = &result[&t.function];
        for ((f, b), x) in &extras {
            if f == &t.function {
                if let Some(c) = root.flow.get(b) {
                    link = link + x.clone() * c.clone();
                }
            }
        }
        per_thread.push(root.bound.clone());
        flows.push(root.flow.clone());
    }
    let idle = idle_energy(idle_seconds, params)?;
    let bound = crate::scalar::sum(per_thread.iter().cloned()) + idle.clone();
    Ok(SraResult { bound, kind: direction.kind(), level, flows, per_thread, link_energy: link, idle_energy: idle })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::rational;
    use num_rational::BigRational;

    fn q(n: i64) -> BigRational {
        rational(n, 1)
    }

    fn diamond() -> Cfg {
        Cfg::new(
            ["entry", "then", "else", "join"].iter().map(|s| s.to_string()).collect(),
            vec![vec![1, 2], vec![3], vec![3], vec![]],
            0,
        )
    }

    #[test]
    fn diamond_bounds() {
        let costs = vec![q(1), q(5), q(2), q(1)];
        let p = build_ipet(&diamond(), &costs, &BTreeMap::new(), Direction::Max, &[]).unwrap();
        let (b, flow) = solve_ipet(&p).unwrap();
        assert_eq!(b, q(7));
        assert_eq!(flow, vec![q(1), q(1), q(0), q(1)]);
        let p = build_ipet(&diamond(), &costs, &BTreeMap::new(), Direction::Min, &[]).unwrap();
        assert_eq!(solve_ipet(&p).unwrap().0, q(4));
        let zero = vec![q(0); 4];
        let p = build_ipet(&diamond(), &zero, &BTreeMap::new(), Direction::Max, &[]).unwrap();
        assert_eq!(solve_ipet(&p).unwrap().0, q(0));
    }

    #[test]
    fn loop_bound_semantics() {
        // pre -> header <-> body, header -> post
        let cfg = Cfg::new(
            ["pre", "header", "body", "post"].iter().map(|s| s.to_string()).collect(),
            vec![vec![1], vec![2, 3], vec![1], vec![]],
            0,
        );
        let costs = vec![q(0), q(1), q(5), q(0)];
        let bounds = BTreeMap::from([(1, 10)]);
        let p = build_ipet(&cfg, &costs, &bounds, Direction::Max, &[]).unwrap();
        assert_eq!(solve_ipet(&p).unwrap().0, q(61));
        let err = build_ipet(&cfg, &costs, &BTreeMap::new(), Direction::Max, &[]).unwrap_err();
        assert!(matches!(err, SraError::MissingBound { header, .. } if header == "header"));
    }

    #[test]
    fn self_loop_at_entry_is_bounded() {
        let cfg = Cfg::new(vec!["h".into(), "x".into()], vec![vec![0, 1], vec![]], 0);
        let p = build_ipet(&cfg, &[q(1), q(0)], &BTreeMap::from([(0, 3)]), Direction::Max, &[]).unwrap();
        assert_eq!(solve_ipet(&p).unwrap().0, q(4));
    }

    #[test]
    fn constraints_parse() {
        let cs = parse_constraints("# infeasible pair\nx[then] + x[main:inner] <= 1\n2 x[a] - x[b] >= 0\n").unwrap();
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[0].terms[1], (1, Some("main".into()), "inner".into()));
        assert_eq!(cs[1].terms, vec![(2, None, "a".into()), (-1, None, "b".into())]);
        assert_eq!(cs[1].sense, Sense::Ge);
        assert!(parse_constraints("x[a] < 1").is_err());
        assert!(parse_constraints("y[a] <= 1").is_err());
    }

    #[test]
    fn user_constraint_tightens_bound() {
        // entry -> (then | else) -> mid -> (inner | skip) -> exit
        let labels = ["entry", "then", "else", "mid", "inner", "skip", "exit"];
        let cfg = Cfg::new(
            labels.iter().map(|s| s.to_string()).collect(),
            vec![vec![1, 2], vec![3], vec![3], vec![4, 5], vec![6], vec![6], vec![]],
            0,
        );
        let costs = vec![q(0), q(10), q(1), q(0), q(10), q(1), q(0)];
        let g = FlowGraph { name: "main".into(), cfg, costs, bounds: BTreeMap::new(), calls: vec![vec![]; 7] };
        let free = analyze_graphs(std::slice::from_ref(&g), "main", Direction::Max, &[]).unwrap();
        assert_eq!(free["main"].bound, q(20));
        let uc = parse_constraints("x[then] + x[inner] <= 1").unwrap();
        let tight = analyze_graphs(&[g], "main", Direction::Max, &uc).unwrap();
        assert_eq!(tight["main"].bound, q(11));
    }

    #[test]
    fn calls_add_callee_bound_and_recursion_is_rejected() {
        let single = |name: &str, cost: i64, calls: Vec<String>| FlowGraph {
            name: name.into(),
            cfg: Cfg::new(vec!["b".into()], vec![vec![]], 0),
            costs: vec![q(cost)],
            bounds: BTreeMap::new(),
            calls: vec![calls],
        };
        let gs = vec![single("main", 1, vec!["f".into(), "f".into()]), single("f", 3, vec![])];
        assert_eq!(analyze_graphs(&gs, "main", Direction::Max, &[]).unwrap()["main"].bound, q(7));
        let gs = vec![single("main", 1, vec!["f".into()]), single("f", 3, vec!["main".into()])];
        assert!(matches!(analyze_graphs(&gs, "main", Direction::Max, &[]), Err(SraError::Recursion(_))));
    }
}
