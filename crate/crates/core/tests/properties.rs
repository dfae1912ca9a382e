//! Property tests over randomly generated, well-formed programs.

use std::collections::BTreeSet;

use proptest::prelude::*;

use etrace::dynamic::{instrument_ir, InterpConfig, IssConfig};
use etrace::energy::{block_energy, instruction_energy};
use etrace::ir::{annotate_debug_locations, build_ir_cfg, parse_eir, EirProgram, InstKind};
use etrace::isa::{place_fnops, IsaBlock, IsaInstr, Opcode, TimingRules};
use etrace::mapping::isa_block_energies;
use etrace::sra::{build_ipet, solve_ipet, Direction, Level};
use etrace::toolkit::{compile, Compiled};
use etrace::{BigRational, CompileOptions, ExactParams, Params, Scalar};

type Q = BigRational;

fn zero() -> Q {
    Q::from_integer(0.into())
}

const BINOPS: [&str; 10] = ["add", "sub", "mul", "and", "or", "xor", "shl", "shr", "udiv", "urem"];
const PREDS: [&str; 3] = ["eq", "ult", "slt"];

/// Builds program text from a stream of choices.
struct Gen<'a> {
    choices: &'a [u32],
    at: usize,
    lines: Vec<String>,
    names: usize,
    labels: usize,
    block: String,
}

impl Gen<'_> {
    fn pick(&mut self, n: usize) -> usize {
        let c = self.choices.get(self.at).copied().unwrap_or(0);
        self.at += 1;
        c as usize % n
    }

    fn fresh(&mut self, prefix: &str) -> String {
        self.names += 1;
        format!("{prefix}{}", self.names)
    }

    fn label(&mut self, prefix: &str) -> String {
        self.labels += 1;
        format!("{prefix}{}", self.labels)
    }

    fn emit(&mut self, s: String) {
        self.lines.push(format!("  {s}"));
    }

    fn start(&mut self, label: &str, bound: Option<u32>) {
        match bound {
            Some(k) => self.lines.push(format!("{label}: !bound {k}")),
            None => self.lines.push(format!("{label}:")),
        }
        self.block = label.to_string();
    }

    fn value(&mut self, avail: &[String]) -> String {
        let i = self.pick(avail.len());
        format!("%{}", avail[i])
    }

    fn operand(&mut self, avail: &[String]) -> String {
        if self.pick(3) == 0 {
            format!("{}", self.pick(100) as i32 - 20)
        } else {
            self.value(avail)
        }
    }

    fn op(&mut self, avail: &mut Vec<String>, calls: bool) {
        let r = self.fresh("v");
        match self.pick(if calls { 5 } else { 4 }) {
            0 | 1 => {
                let op = BINOPS[self.pick(BINOPS.len())];
                let a = self.value(avail);
                let mut b = self.operand(avail);
                if op == "udiv" || op == "urem" {
                    let nz = self.fresh("nz");
                    self.emit(format!("%{nz} = or {b}, 1"));
                    b = format!("%{nz}");
                }
                self.emit(format!("%{r} = {op} {a}, {b}"));
            }
            2 => {
                let v = self.value(avail);
                let addr = self.pick(8);
                self.emit(format!("store {v}, {addr}"));
                let from = self.pick(8);
                self.emit(format!("%{r} = load {from}"));
            }
            3 => {
                let p = PREDS[self.pick(PREDS.len())];
                let a = self.value(avail);
                let b = self.operand(avail);
                self.emit(format!("%{r} = icmp {p} {a}, {b}"));
            }
            _ => {
                let a = self.value(avail);
                let b = self.operand(avail);
                self.emit(format!("%{r} = call helper({a}, {b})"));
            }
        }
        avail.push(r);
    }

    fn ops(&mut self, avail: &mut Vec<String>) {
        for _ in 0..1 + self.pick(3) {
            self.op(avail, true);
        }
    }

    fn segment(&mut self, avail: &mut Vec<String>, depth: u32) {
        match if depth >= 2 { 0 } else { self.pick(4) } {
            0 => self.ops(avail),
            1 => {
                let (t, e, j) = (self.label("t"), self.label("e"), self.label("j"));
                let c = self.fresh("c");
                let p = PREDS[self.pick(PREDS.len())];
                let (a, b) = (self.value(avail), self.operand(avail));
                self.emit(format!("%{c} = icmp {p} {a}, {b}"));
                self.emit(format!("brcond %{c}, {t}, {e}"));
                let mut arms = Vec::new();
                for label in [&t, &e] {
                    self.start(label, None);
                    let mut inner = avail.clone();
                    self.segment(&mut inner, depth + 1);
                    let v = self.value(&inner);
                    arms.push((self.block.clone(), v));
                    self.emit(format!("br {j}"));
                }
                self.start(&j, None);
                if self.pick(2) == 0 {
                    let r = self.fresh("p");
                    self.emit(format!("%{r} = phi [{}, {}], [{}, {}]", arms[0].0, arms[0].1, arms[1].0, arms[1].1));
                    avail.push(r);
                }
            }
            2 => {
                let (h, b, x) = (self.label("h"), self.label("b"), self.label("x"));
                let k = 1 + self.pick(5) as u32;
                let (lim, i, inext, c) = (self.fresh("lim"), self.fresh("i"), self.fresh("in"), self.fresh("c"));
                let src = self.value(avail);
                self.emit(format!("%{lim} = urem {src}, {}", k + 1));
                self.emit(format!("br {h}"));
                let pre = self.block.clone();
                self.start(&h, Some(k));
                let phi_at = self.lines.len();
                self.emit(String::new());
                self.emit(format!("%{c} = icmp ult %{i}, %{lim}"));
                self.emit(format!("brcond %{c}, {b}, {x}"));
                self.start(&b, None);
                let mut inner = avail.clone();
                inner.push(i.clone());
                self.segment(&mut inner, depth + 1);
                self.emit(format!("%{inext} = add %{i}, 1"));
                self.emit(format!("br {h}"));
                self.lines[phi_at] = format!("  %{i} = phi [{pre}, 0], [{}, %{inext}]", self.block);
                self.start(&x, None);
            }
            _ => {
                let labels: Vec<String> = (0..3).map(|_| self.label("s")).collect();
                let j = self.label("j");
                let sel = self.fresh("sel");
                let v = self.value(avail);
                self.emit(format!("%{sel} = and {v}, 3"));
                self.emit(format!("switch %{sel}, {}, [0, {}], [1, {}]", labels[2], labels[0], labels[1]));
                for l in &labels {
                    self.start(l, None);
                    let mut inner = avail.clone();
                    self.ops(&mut inner);
                    self.emit(format!("br {j}"));
                }
                self.start(&j, None);
            }
        }
    }
}

fn program(choices: &[u32]) -> String {
    let mut g = Gen { choices, at: 0, lines: Vec::new(), names: 0, labels: 0, block: String::new() };
    g.lines.push("fn main(%a, %b) {".into());
    g.start("entry", None);
    let mut avail = vec!["a".to_string(), "b".to_string()];
    for _ in 0..1 + g.pick(4) {
        g.segment(&mut avail, 0);
    }
    let r = g.value(&avail);
    g.emit(format!("ret {r}"));
    g.lines.push("}".into());
    g.lines.push(String::new());
    g.lines.push("fn helper(%x, %y) {".into());
    g.start("entry", None);
    let mut avail = vec!["x".to_string(), "y".to_string()];
    for _ in 0..1 + g.pick(3) {
        g.op(&mut avail, false);
    }
    let r = g.value(&avail);
    g.emit(format!("ret {r}"));
    g.lines.push("}".into());
    g.lines.join("\n") + "\n"
}

fn choices() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(any::<u32>(), 64..160)
}

fn build(choices: &[u32]) -> (String, EirProgram, Compiled) {
    let src = program(choices);
    let p = parse_eir(&src).unwrap_or_else(|e| panic!("{e}\n{src}"));
    let c = compile(&p, &CompileOptions::default()).unwrap_or_else(|e| panic!("{e}\n{src}"));
    (src, p, c)
}

fn isa_total(c: &Compiled, p: &ExactParams) -> Q {
    isa_block_energies(&c.isa, 1, p)
        .unwrap()
        .values()
        .flat_map(|m| m.values())
        .fold(zero(), |a, e| a + e.clone())
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: std::env::var("PROPTEST_CASES").ok().and_then(|s| s.parse().ok()).unwrap_or(48),
        ..ProptestConfig::default()
    })]

    #[test]
    fn text_round_trips(ch in choices()) {
        let (_, p, c) = build(&ch);
        prop_assert_eq!(&parse_eir(&p.to_string()).unwrap(), &p);
        prop_assert_eq!(&parse_eir(&c.ir.to_string()).unwrap(), &c.ir);
    }

    #[test]
    fn annotation_numbers_in_program_order(ch in choices()) {
        let (_, p, _) = build(&ch);
        let a = annotate_debug_locations(p.clone());
        let ids: Vec<u32> = a.instructions().map(|i| i.dbg.expect("tagged").0).collect();
        prop_assert_eq!(ids, (1..=p.instr_count() as u32).collect::<Vec<_>>());
        prop_assert_eq!(annotate_debug_locations(a.clone()), a);
    }

    #[test]
    fn cfg_edges_follow_terminators(ch in choices()) {
        let (_, p, _) = build(&ch);
        for f in &p.functions {
            let cfg = build_ir_cfg(f);
            let got: BTreeSet<(String, String)> = cfg
                .edges()
                .into_iter()
                .map(|(u, v)| (cfg.label(u).to_string(), cfg.label(v).to_string()))
                .collect();
            let mut want = BTreeSet::new();
            for b in &f.blocks {
                let targets: Vec<&str> = match &b.instrs.last().unwrap().kind {
                    InstKind::Br(t) => vec![t],
                    InstKind::BrCond(_, t, e) => vec![t, e],
                    InstKind::Switch(_, d, cases) => std::iter::once(d).chain(cases.iter().map(|(_, t)| t)).map(String::as_str).collect(),
                    _ => vec![],
                };
                for t in targets {
                    want.insert((b.label.clone(), t.to_string()));
                }
            }
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn mapping_loses_nothing(ch in choices()) {
        let (_, _, c) = build(&ch);
        let params = ExactParams::default();
        c.map.check(&c.isa).unwrap();
        let truth = isa_total(&c, &params);
        for tuned in [false, true] {
            let m = c.ir_energy(1, &params, tuned).unwrap();
            prop_assert_eq!(m.per_instr.values().fold(zero(), |a, e| a + e.clone()), truth.clone());
            prop_assert_eq!(m.per_block.values().flat_map(|v| v.values()).fold(zero(), |a, e| a + e.clone()), truth.clone());
        }
    }

    #[test]
    fn fnop_placement_is_idempotent(ch in choices()) {
        let (_, _, c) = build(&ch);
        let cap = TimingRules::default().buffer_capacity;
        prop_assert_eq!(place_fnops(&c.isa, cap), c.isa.clone());
    }

    #[test]
    fn bounds_bracket_simulation(ch in choices(), a in any::<i32>(), b in any::<i32>()) {
        let (src, _, c) = build(&ch);
        let params = ExactParams::default();
        let (trace, e) = c.simulate(&[a, b], &params, &IssConfig::default()).unwrap();
        let max = c.sra(Level::Isa, Direction::Max, &params, &[], &zero()).unwrap();
        let min = c.sra(Level::Isa, Direction::Min, &params, &[], &zero()).unwrap();
        prop_assert!(min.bound <= e && e <= max.bound, "{}", src);
        prop_assert_eq!(trace.wall_cycles, 4 * trace.issued[0] + 32 * trace.div_stalls);
        let (again, e2) = c.simulate(&[a, b], &params, &IssConfig::default()).unwrap();
        prop_assert_eq!(again, trace);
        prop_assert_eq!(e2, e);
    }

    #[test]
    fn counts_conserve_flow_and_are_deterministic(ch in choices(), a in any::<i32>(), b in any::<i32>()) {
        let (_, p, c) = build(&ch);
        let counts = c.counts(&[a, b], &InterpConfig::default()).unwrap();
        prop_assert_eq!(counts.get(0, "main", "entry"), 1);
        prop_assert_eq!(c.counts(&[a, b], &InterpConfig::default()).unwrap(), counts);
        let instrumented = instrument_ir(&c.ir).unwrap();
        prop_assert!(instrument_ir(&instrumented).is_err());
        let fresh = compile(&p, &CompileOptions::default()).unwrap();
        prop_assert_eq!(&fresh.isa, &c.isa);
    }

    #[test]
    fn ipet_objective_matches_witness(ch in choices()) {
        let (_, _, c) = build(&ch);
        let params = ExactParams::default();
        let energies = isa_block_energies(&c.isa, 1, &params).unwrap();
        let f = &c.ir.functions[1];
        let g = c.isa.functions.iter().find(|g| g.name == f.name).unwrap();
        let cfg = etrace::isa::build_isa_cfg(g).unwrap();
        let costs: Vec<Q> = cfg.labels().iter().map(|l| energies[&f.name][l].clone()).collect();
        for d in [Direction::Max, Direction::Min] {
            let problem = build_ipet(&cfg, &costs, &Default::default(), d, &[]).unwrap();
            let (obj, x) = solve_ipet(&problem).unwrap();
            let dot = costs.iter().zip(&x).fold(zero(), |a, (c, x)| a + c.clone() * x.clone());
            prop_assert_eq!(obj, dot);
        }
    }

    #[test]
    fn block_energy_is_linear(ops in prop::collection::vec(0usize..6, 0..20), split in 0usize..20, nt in 1u32..9) {
        let pool = [Opcode::Add, Opcode::Ldw, Opcode::Bu, Opcode::Divu, Opcode::Fnop, Opcode::Out];
        let instrs: Vec<IsaInstr> = ops.iter().map(|&o| IsaInstr::new(pool[o], vec![])).collect();
        let k = split.min(instrs.len());
        let block = |is: &[IsaInstr]| IsaBlock { label: "b".into(), instrs: is.to_vec() };
        let params = ExactParams::default();
        let whole = block_energy(&block(&instrs), nt, &params).unwrap();
        let parts = block_energy(&block(&instrs[..k]), nt, &params).unwrap()
            + block_energy(&block(&instrs[k..]), nt, &params).unwrap();
        prop_assert_eq!(whole, parts);
    }
}

#[test]
fn instruction_energy_falls_with_occupancy() {
    let params = Params::default();
    for op in [Opcode::Add, Opcode::Ldw, Opcode::Bt, Opcode::Divu, Opcode::Fnop] {
        let e: Vec<f64> = (1..=4).map(|nt| instruction_energy(op, nt, &params).unwrap()).collect();
        assert!(e.windows(2).all(|w| w[1] < w[0]), "{op:?} {e:?}");
    }
}

#[test]
fn straight_line_bound_equals_simulation() {
    let (_, _, c) = build(&[0; 4]);
    let params = ExactParams::default();
    let (_, e) = c.simulate(&[3, 4], &params, &IssConfig::default()).unwrap();
    let r = c.sra(Level::Isa, Direction::Max, &params, &[], &zero()).unwrap();
    assert_eq!(r.bound, e);
    assert!(r.bound.to_f64_value() > 0.0);
}
