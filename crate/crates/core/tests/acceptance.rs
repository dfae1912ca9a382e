//! Corpus-wide acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use num_traits::{Signed, Zero};

use etrace::cfg::Cfg;
use etrace::dynamic::{InterpConfig, IssConfig};
use etrace::ir::{build_ir_cfg, InstKind};
use etrace::isa::build_isa_cfg;
use etrace::mapping::isa_block_energies;
use etrace::report::{compare_corpus, explore, load_explore_file, ExploreReport};
use etrace::sra::{analyze_graphs, ir_graphs, isa_graphs, threads_per_core, FlowGraph};
use etrace::toolkit::{compile, load_corpus, Benchmark, Compiled};
use etrace::{BigRational, CompileOptions, Direction, ExactParams, Level, Opcode, Scalar};

type Q = BigRational;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn q(n: i64) -> Q {
    Q::from_integer(n.into())
}

fn rel(a: &Q, b: &Q) -> f64 {
    if b.is_zero() {
        return if a.is_zero() { 0.0 } else { f64::INFINITY };
    }
    ((a - b).abs() / b.abs()).to_f64_value()
}

/// Hand-coded per-instruction energy: the issue slot share plus divide stalls.
fn oracle_energy(op: Opcode, nt: u32, p: &ExactParams) -> Q {
    let np = nt.clamp(1, 4);
    let npq = q(i64::from(np));
    let slot = (p.ps.clone() + p.pi[&op].clone() * p.m[np as usize - 1].clone() * p.o.clone()) / npq.clone()
        * q(4)
        * p.tclk.clone();
    if matches!(op, Opcode::Divu | Opcode::Remu) {
        slot + (p.ps.clone() + p.pdi.clone()) / npq * q(32) * p.tclk.clone()
    } else {
        slot
    }
}

fn core_counts(c: &Compiled) -> BTreeSet<u32> {
    threads_per_core(&c.ir.effective_threads()).into_iter().collect()
}

fn isomorphic(c: &Compiled) -> bool {
    c.ir.functions.iter().zip(&c.isa.functions).all(|(f, g)| {
        let a = build_ir_cfg(f);
        let Ok(b) = build_isa_cfg(g) else { return false };
        let edges = |cfg: &Cfg| -> BTreeSet<(String, String)> {
            cfg.edges().into_iter().map(|(u, v)| (cfg.label(u).to_string(), cfg.label(v).to_string())).collect()
        };
        let labels = |cfg: &Cfg| cfg.labels().iter().cloned().collect::<BTreeSet<_>>();
        labels(&a) == labels(&b) && edges(&a) == edges(&b)
    })
}

fn communicates(c: &Compiled) -> bool {
    c.ir.instructions().any(|i| matches!(i.kind, InstKind::ChanSend(..) | InstKind::ChanRecv(_)))
}

struct Ctx {
    root: PathBuf,
    params: ExactParams,
    corpus: Vec<(Benchmark, Compiled)>,
}

impl Ctx {
    fn get(&self, name: &str) -> &(Benchmark, Compiled) {
        self.corpus.iter().find(|(b, _)| b.name == name).unwrap_or_else(|| panic!("benchmark {name}"))
    }

    fn bound(&self, name: &str, level: Level, d: Direction) -> Q {
        let (b, c) = self.get(name);
        c.sra(level, d, &self.params, &b.constraints, &q(0)).expect("sra").bound
    }
}

fn no_loss(ctx: &Ctx) -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (b, c) in &ctx.corpus {
        for nt in core_counts(c) {
            let isa: Q = c
                .isa
                .functions
                .iter()
                .flat_map(|f| f.blocks.iter().flat_map(|b| b.instrs.iter()))
                .map(|i| oracle_energy(i.op, nt, &ctx.params))
                .fold(q(0), |a, e| a + e);
            for tuned in [false, true] {
                let m = c.ir_energy(nt, &ctx.params, tuned).expect("ir energy");
                let per_instr = m.per_instr.values().fold(q(0), |a, e| a + e.clone());
                let per_block = m.per_block.values().flat_map(|v| v.values()).fold(q(0), |a, e| a + e.clone());
                let e = rel(&per_instr, &isa).max(rel(&per_block, &isa));
                if e > worst {
                    worst = e;
                    eprintln!("  no-loss deviation {e} on {} (nt={nt}, tuned={tuned})", b.name);
                }
                checked += 1;
            }
        }
    }
    outcome(worst <= 1e-12, format!("{checked} attributions, worst relative error {worst:e}"))
}

fn disjoint_total(ctx: &Ctx) -> Outcome {
    let mut bad = Vec::new();
    let (mut instrs, mut fnops) = (0usize, 0usize);
    for (b, c) in &ctx.corpus {
        let mut seen: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
        for refs in c.map.reverse.values() {
            for r in refs {
                *seen.entry((r.func, r.block, r.index)).or_default() += 1;
            }
        }
        for (fi, f) in c.isa.functions.iter().enumerate() {
            for (bi, blk) in f.blocks.iter().enumerate() {
                for (ii, i) in blk.instrs.iter().enumerate() {
                    instrs += 1;
                    fnops += usize::from(i.op == Opcode::Fnop);
                    if seen.get(&(fi, bi, ii)) != Some(&1) {
                        bad.push(format!("{}:{}:{}:{ii}", b.name, f.name, blk.label));
                    }
                }
            }
        }
        if seen.len() != c.isa.functions.iter().flat_map(|f| &f.blocks).map(|b| b.instrs.len()).sum::<usize>() {
            bad.push(format!("{}: bucket references outside the program", b.name));
        }
    }
    outcome(
        bad.is_empty(),
        format!("{instrs} ISA instructions ({fnops} fnops), {} violations {:?}", bad.len(), bad.iter().take(3).collect::<Vec<_>>()),
    )
}

fn safety(ctx: &Ctx) -> Outcome {
    let mut pairs = 0;
    let mut bad = Vec::new();
    let mut few = Vec::new();
    for (b, c) in &ctx.corpus {
        if b.inputs.len() < 20 {
            few.push(b.name.clone());
        }
        let max = ctx.bound(&b.name, Level::Isa, Direction::Max);
        let min = ctx.bound(&b.name, Level::Isa, Direction::Min);
        for inputs in &b.inputs {
            let (_, e) = c.simulate(inputs, &ctx.params, &IssConfig::default()).expect("simulate");
            pairs += 1;
            if !(min <= e && e <= max) {
                bad.push(format!("{}{inputs:?}", b.name));
            }
        }
    }
    outcome(
        bad.is_empty() && few.is_empty(),
        format!("{pairs} (benchmark, input) pairs; violations {bad:?}; under 20 inputs {few:?}"),
    )
}

fn cross_level(ctx: &Ctx) -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut inexact_iso = Vec::new();
    let mut iso = 0;
    for (b, c) in &ctx.corpus {
        let exact = isomorphic(c);
        iso += usize::from(exact);
        for d in [Direction::Max, Direction::Min] {
            let a = ctx.bound(&b.name, Level::Isa, d);
            let r = ctx.bound(&b.name, Level::Ir, d);
            let e = rel(&r, &a);
            if e > worst.0 {
                worst = (e, b.name.clone());
            }
            if exact && a != r {
                inexact_iso.push(b.name.clone());
            }
        }
    }
    outcome(
        worst.0 <= 0.05 && inexact_iso.is_empty(),
        format!(
            "worst {:.4}% on {}; {iso} isomorphic fixtures, inexact among them {inexact_iso:?}",
            worst.0 * 100.0,
            worst.1
        ),
    )
}

fn profiler(ctx: &Ctx) -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut inexact = Vec::new();
    let mut exact_fixtures = 0;
    for (b, c) in &ctx.corpus {
        let exact = isomorphic(c) && !communicates(c);
        exact_fixtures += usize::from(exact);
        for inputs in &b.inputs {
            let (_, iss) = c.simulate(inputs, &ctx.params, &IssConfig::default()).expect("simulate");
            let (_, est) = c.profile(inputs, &ctx.params, &InterpConfig::default()).expect("profile");
            let e = rel(&est.total, &iss);
            if e > worst.0 {
                worst = (e, b.name.clone());
            }
            if exact && est.total != iss {
                inexact.push(format!("{}{inputs:?}", b.name));
            }
        }
    }
    outcome(
        worst.0 <= 0.02 && inexact.is_empty(),
        format!(
            "worst {:.4}% on {}; {exact_fixtures} exact fixtures, inexact among them {inexact:?}",
            worst.0 * 100.0,
            worst.1
        ),
    )
}

fn phi_tuning(ctx: &Ctx) -> Outcome {
    let (b, c) = ctx.get("phi_loop");
    let p = &ctx.params;
    let f = &c.ir.functions[0];
    let phi_tags: BTreeSet<_> = f.blocks.iter().flat_map(|b| b.phis()).filter_map(|i| i.dbg).collect();
    let isa_f = &c.isa.functions[0];
    let pre = isa_f.blocks.iter().find(|b| b.label == "entry").expect("entry block");
    let movs = pre
        .instrs
        .iter()
        .filter(|i| i.dbg.is_some_and(|d| phi_tags.contains(&d)))
        .fold(q(0), |a, i| a + oracle_energy(i.op, 1, p));
    let untuned = c.ir_energy(1, p, false).expect("energy");
    let tuned = c.ir_energy(1, p, true).expect("energy");
    let truth = isa_block_energies(&c.isa, 1, p).expect("isa energy");
    let counts = c.counts(&b.inputs[0], &InterpConfig::default()).expect("counts");
    let n = counts.get(0, &f.name, "loop");
    let over = (untuned.block(&f.name, "loop") - truth[&f.name]["loop"].clone()) * q(n as i64);
    let trip_ok = counts.get(0, &f.name, "body") == 100;
    let overstated = over >= movs.clone() * q(100) && movs > q(0);
    let residual: Vec<String> = truth[&f.name]
        .iter()
        .filter(|(l, e)| tuned.block(&f.name, l) != **e)
        .map(|(l, _)| l.clone())
        .collect();
    outcome(
        trip_ok && overstated && residual.is_empty(),
        format!(
            "untuned loop overstatement {:.4e} J vs 100 x movs {:.4e} J; blocks differing after tuning {residual:?}",
            over.to_f64_value(),
            (movs * q(100)).to_f64_value()
        ),
    )
}

/// Exhaustive path enumeration over a bounded CFG.
struct Paths<'a> {
    cfg: &'a Cfg,
    costs: Vec<Q>,
    /// Header index per node, and its bound.
    headers: Vec<Option<(usize, u32)>>,
    back: BTreeSet<(usize, usize)>,
    /// Loops (by header index) containing each node.
    inside: Vec<BTreeSet<usize>>,
}

const PATH_LIMIT: u128 = 1_000_000;

fn dominators(cfg: &Cfg) -> Vec<BTreeSet<usize>> {
    let n = cfg.len();
    let all: BTreeSet<usize> = (0..n).collect();
    let mut dom = vec![all; n];
    dom[cfg.entry()] = [cfg.entry()].into();
    let mut changed = true;
    while changed {
        changed = false;
        for v in 0..n {
            if v == cfg.entry() {
                continue;
            }
            let mut new: Option<BTreeSet<usize>> = None;
            for &u in cfg.preds(v) {
                new = Some(match new {
                    None => dom[u].clone(),
                    Some(s) => s.intersection(&dom[u]).copied().collect(),
                });
            }
            let mut new = new.unwrap_or_default();
            new.insert(v);
            if new != dom[v] {
                dom[v] = new;
                changed = true;
            }
        }
    }
    dom
}

impl<'a> Paths<'a> {
    fn new(g: &'a FlowGraph<Q>, costs: Vec<Q>) -> Option<Self> {
        let cfg = &g.cfg;
        let dom = dominators(cfg);
        let mut back = BTreeSet::new();
        let mut bodies: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for (u, h) in cfg.edges() {
            if dom[u].contains(&h) {
                back.insert((u, h));
                let body = bodies.entry(h).or_insert_with(|| [h].into());
                let mut stack = vec![u];
                while let Some(x) = stack.pop() {
                    if body.insert(x) {
                        stack.extend(cfg.preds(x).iter().copied());
                    }
                }
            }
        }
        let mut headers = vec![None; cfg.len()];
        for (k, (&h, _)) in bodies.iter().enumerate() {
            headers[h] = Some((k, *g.bounds.get(cfg.label(h))?));
        }
        let mut inside = vec![BTreeSet::new(); cfg.len()];
        for (k, body) in bodies.values().enumerate() {
            for &x in body {
                inside[x].insert(k);
            }
        }
        Some(Paths { cfg, costs, headers, back, inside })
    }

    /// Counter state after moving to `v` over `edge`, or None if the bound forbids it.
    fn step(&self, counters: &[u32], edge: Option<(usize, usize)>, v: usize) -> Option<Vec<u32>> {
        let mut next: Vec<u32> =
            counters.iter().enumerate().map(|(k, &c)| if self.inside[v].contains(&k) { c } else { 0 }).collect();
        if let Some((k, bound)) = self.headers[v] {
            match edge {
                Some(e) if self.back.contains(&e) => {
                    next[k] += 1;
                    if next[k] > bound {
                        return None;
                    }
                }
                _ => next[k] = 0,
            }
        }
        Some(next)
    }

    fn count(&self, v: usize, counters: Vec<u32>, memo: &mut HashMap<(usize, Vec<u32>), u128>) -> u128 {
        if let Some(&n) = memo.get(&(v, counters.clone())) {
            return n;
        }
        let succs = self.cfg.succs(v);
        let n = if succs.is_empty() {
            1
        } else {
            let mut total = 0u128;
            for &w in succs {
                if let Some(c) = self.step(&counters, Some((v, w)), w) {
                    total = total.saturating_add(self.count(w, c, memo)).min(PATH_LIMIT + 1);
                }
            }
            total
        };
        memo.insert((v, counters), n);
        n
    }

    fn path_count(&self) -> u128 {
        let start = self.step(&vec![0; self.headers.iter().flatten().count()], None, self.cfg.entry()).unwrap();
        self.count(self.cfg.entry(), start, &mut HashMap::new())
    }

    /// Visits every complete path, keeping the best cost.
    fn enumerate(&self, max: bool) -> Option<Q> {
        let entry = self.cfg.entry();
        let start = self.step(&vec![0; self.headers.iter().flatten().count()], None, entry).unwrap();
        let mut best: Option<Q> = None;
        let mut stack = vec![(entry, start, self.costs[entry].clone())];
        while let Some((v, counters, cost)) = stack.pop() {
            let succs = self.cfg.succs(v);
            if succs.is_empty() {
                let better = match &best {
                    None => true,
                    Some(b) => (max && cost > *b) || (!max && cost < *b),
                };
                if better {
                    best = Some(cost);
                }
                continue;
            }
            for &w in succs {
                if let Some(c) = self.step(&counters, Some((v, w)), w) {
                    stack.push((w, c, cost.clone() + self.costs[w].clone()));
                }
            }
        }
        best
    }
}

fn ipet_oracle(ctx: &Ctx) -> Outcome {
    let (mut checked, mut skipped) = (0, 0);
    let mut bad = Vec::new();
    for (b, c) in &ctx.corpus {
        for nt in core_counts(c) {
            let energy = c.ir_energy(nt, &ctx.params, true).expect("ir energy");
            let levels = [
                ("isa", isa_graphs(&c.ir, &c.isa, nt, &ctx.params, &BTreeMap::new()).expect("graphs")),
                ("ir", ir_graphs(&c.ir, &energy, &BTreeMap::new())),
            ];
            for (level, graphs) in &levels {
                for max in [true, false] {
                    let d = if max { Direction::Max } else { Direction::Min };
                    // Callees first: reverse declaration order is not guaranteed, so iterate to a fixpoint.
                    let mut known: BTreeMap<String, Option<Q>> = BTreeMap::new();
                    while known.len() < graphs.len() {
                        let before = known.len();
                        for g in graphs {
                            if known.contains_key(&g.name) {
                                continue;
                            }
                            if !g.calls.iter().flatten().all(|f| known.contains_key(f)) {
                                continue;
                            }
                            let callees_ok = g.calls.iter().flatten().all(|f| known[f].is_some());
                            let costs: Option<Vec<Q>> = callees_ok.then(|| {
                                g.costs
                                    .iter()
                                    .zip(&g.calls)
                                    .map(|(cost, calls)| {
                                        calls.iter().fold(cost.clone(), |a, f| a + known[f].clone().unwrap())
                                    })
                                    .collect()
                            });
                            let paths = costs.and_then(|costs| Paths::new(g, costs));
                            let result = match paths {
                                Some(p) if p.path_count() <= PATH_LIMIT => {
                                    let oracle = p.enumerate(max).expect("a complete path");
                                    let ipet = analyze_graphs(graphs, &g.name, d, &[]).expect("ipet");
                                    if ipet[&g.name].bound != oracle {
                                        bad.push(format!("{}:{level}:{}:{}", b.name, g.name, if max { "max" } else { "min" }));
                                    }
                                    checked += 1;
                                    Some(oracle)
                                }
                                _ => {
                                    skipped += 1;
                                    None
                                }
                            };
                            known.insert(g.name.clone(), result);
                        }
                        assert!(known.len() > before, "call graph cycle in {}", b.name);
                    }
                }
            }
        }
    }
    outcome(
        bad.is_empty() && checked > 0,
        format!("{checked} problems matched the path-enumeration optimum, {skipped} over 1e6 paths skipped; mismatches {bad:?}"),
    )
}

fn explore_file(ctx: &Ctx, name: &str) -> ExploreReport {
    let path = ctx.root.join("explore").join(name);
    let file = load_explore_file(&path).expect("explore file");
    explore(None, &file, path.parent().unwrap(), &ctx.params, &CompileOptions::default()).expect("explore")
}

fn directions(ctx: &Ctx) -> Outcome {
    let farm = explore_file(ctx, "matmult.json");
    let threads: Vec<usize> = farm.rows.iter().map(|r| r.threads).collect();
    let pred: Vec<f64> = farm.rows.iter().map(|r| r.predicted_energy_j).collect();
    let sim: Vec<f64> = farm.rows.iter().map(|r| r.simulated_energy_j.unwrap_or(f64::NAN)).collect();
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let farm_ok = threads == [1, 2, 4] && decreasing(&pred) && decreasing(&sim);

    let pipe = explore_file(ctx, "biquad.json");
    let row = |n: &str| pipe.rows.iter().find(|r| r.name == n).expect("config");
    let (seq, pl) = (row("sequential"), row("pipeline"));
    let lower = pl.predicted_energy_j < seq.predicted_energy_j
        && pl.simulated_energy_j.unwrap() < seq.simulated_energy_j.unwrap();
    let throughput = pl.predicted_time_s <= seq.predicted_time_s
        && pl.simulated_time_s.unwrap() <= seq.simulated_time_s.unwrap();
    let shape = pl.threads == 7 && pl.v < seq.v && pl.f < seq.f;
    outcome(
        farm_ok && lower && throughput && shape,
        format!(
            "farm predicted {pred:?} simulated {sim:?}; pipeline {:.4e}/{:.4e} J vs sequential {:.4e}/{:.4e} J, time {:.4e}/{:.4e} s vs {:.4e}/{:.4e} s",
            pl.predicted_energy_j,
            pl.simulated_energy_j.unwrap(),
            seq.predicted_energy_j,
            seq.simulated_energy_j.unwrap(),
            pl.predicted_time_s,
            pl.simulated_time_s.unwrap(),
            seq.predicted_time_s,
            seq.simulated_time_s.unwrap(),
        ),
    )
}

fn bound_range(ctx: &Ctx) -> Outcome {
    let span = |n: &str| {
        let max = ctx.bound(n, Level::Isa, Direction::Max);
        let min = ctx.bound(n, Level::Isa, Direction::Min);
        (max.clone() - min.clone(), min)
    };
    let (early_range, early_min) = span("radix4_div");
    let (bal_range, bal_min) = span("radix4_div_balanced");
    outcome(
        early_range > bal_range && bal_min > early_min,
        format!(
            "range {:.4e} J (early return) vs {:.4e} J (balanced); min {:.4e} J vs {:.4e} J",
            early_range.to_f64_value(),
            bal_range.to_f64_value(),
            early_min.to_f64_value(),
            bal_min.to_f64_value()
        ),
    )
}

fn determinism(ctx: &Ctx) -> Outcome {
    let run = || {
        let corpus = load_corpus(&ctx.root).expect("corpus");
        let cmp = compare_corpus(&corpus, &ctx.params, &CompileOptions::default()).expect("compare");
        let mut s = serde_json::to_string_pretty(&cmp).unwrap();
        for f in ["matmult.json", "biquad.json"] {
            s.push_str(&serde_json::to_string_pretty(&explore_file(ctx, f)).unwrap());
        }
        s
    };
    let (a, b) = (run(), run());
    outcome(a == b, format!("{} bytes of compare and explore JSON per run", a.len()))
}

fn main() -> ExitCode {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../benchmarks");
    let corpus = load_corpus(&root).expect("benchmark corpus");
    let corpus = corpus
        .into_iter()
        .map(|b| {
            let c = compile(&b.program, &CompileOptions::default()).expect("compile");
            (b, c)
        })
        .collect();
    let ctx = Ctx { root, params: ExactParams::default(), corpus };
    let criteria: [(&str, fn(&Ctx) -> Outcome); 10] = [
        ("no-loss mapping", no_loss),
        ("mapping disjointness and totality", disjoint_total),
        ("bound safety", safety),
        ("cross-level SRA agreement", cross_level),
        ("profiler accuracy", profiler),
        ("phi-tuning efficacy", phi_tuning),
        ("IPET vs path enumeration", ipet_oracle),
        ("multi-threaded directions", directions),
        ("bound-range analysis", bound_range),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check(&ctx);
        failed += usize::from(!o.pass);
        println!("{} {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
