//! JSON reports and the comparison and exploration drivers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamic::{BbCounts, InterpConfig, IssConfig, ProfileEstimate, Trace};
use crate::energy::{scale_params, EnergyModelParams};
use crate::ir::EirProgram;
use crate::scalar::Scalar;
use crate::sra::{BoundKind, Direction, Level, SraResult, UserConstraint};
use crate::toolkit::{compile, place_threads, read_file, Benchmark, CompileOptions, Compiled, ToolError};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub threads: usize,
    pub cores: usize,
    pub v: f64,
    pub f: f64,
}

impl RunConfig {
    pub fn of<T: Scalar>(p: &EirProgram, params: &EnergyModelParams<T>) -> Self {
        let threads = p.effective_threads();
        let mut cores: Vec<u32> = threads.iter().map(|t| t.core).collect();
        cores.sort_unstable();
        cores.dedup();
        RunConfig {
            threads: threads.len(),
            cores: cores.len(),
            v: params.vnom.to_f64_value(),
            f: params.fnom.to_f64_value(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundEntry {
    pub level: Level,
    pub kind: BoundKind,
    pub energy_j: f64,
    pub per_thread_j: Vec<f64>,
    pub link_j: f64,
    pub idle_j: f64,
    /// Witness block counts of each thread's root function.
    pub flow: Vec<BTreeMap<String, u64>>,
}

impl BoundEntry {
    pub fn new<T: Scalar>(r: &SraResult<T>) -> Self {
        BoundEntry {
            level: r.level,
            kind: r.kind,
            energy_j: r.bound.to_f64_value(),
            per_thread_j: r.per_thread.iter().map(Scalar::to_f64_value).collect(),
            link_j: r.link_energy.to_f64_value(),
            idle_j: r.idle_energy.to_f64_value(),
            flow: r
                .flows
                .iter()
                .map(|m| m.iter().map(|(k, v)| (k.clone(), v.to_f64_value().round() as u64)).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SraReport {
    pub schema: u32,
    pub command: String,
    pub program: String,
    pub config: RunConfig,
    pub bounds: Vec<BoundEntry>,
    /// |IR − ISA| / ISA per bound kind, when both levels were analysed.
    pub ir_vs_isa: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockRow {
    pub function: String,
    pub block: String,
    pub count: u64,
    pub energy_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileReport {
    pub schema: u32,
    pub command: String,
    pub program: String,
    pub config: RunConfig,
    pub inputs: Vec<i32>,
    pub total_j: f64,
    pub per_thread_j: Vec<f64>,
    pub link_j: f64,
    pub idle_j: f64,
    pub per_function_j: BTreeMap<String, f64>,
    pub blocks: Vec<BlockRow>,
    pub notes: Vec<String>,
}

impl ProfileReport {
    pub fn new<T: Scalar>(
        program: &str,
        config: RunConfig,
        inputs: &[i32],
        counts: &BbCounts,
        est: &ProfileEstimate<T>,
    ) -> Self {
        let merged = counts.merged();
        let blocks = est
            .per_block
            .iter()
            .map(|(k, e)| {
                let (f, b) = k.split_once(':').unwrap_or((k, ""));
                BlockRow {
                    function: f.to_string(),
                    block: b.to_string(),
                    count: merged.get(k).copied().unwrap_or(0),
                    energy_j: e.to_f64_value(),
                }
            })
            .collect();
        let mut notes = Vec::new();
        if config.threads > 1 {
            notes.push("steady-state estimate: pipeline fill and drain are not charged".to_string());
        }
        ProfileReport {
            schema: REPORT_SCHEMA,
            command: "profile".into(),
            program: program.to_string(),
            config,
            inputs: inputs.to_vec(),
            total_j: est.total.to_f64_value(),
            per_thread_j: est.per_thread.iter().map(Scalar::to_f64_value).collect(),
            link_j: est.link.to_f64_value(),
            idle_j: est.idle.to_f64_value(),
            per_function_j: est.per_function.iter().map(|(k, v)| (k.clone(), v.to_f64_value())).collect(),
            blocks,
            notes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimReport {
    pub schema: u32,
    pub command: String,
    pub program: String,
    pub config: RunConfig,
    pub inputs: Vec<i32>,
    pub energy_j: f64,
    pub instruction_j: f64,
    pub idle_j: f64,
    pub link_j: f64,
    pub wall_cycles: u64,
    pub seconds: f64,
    pub idle_cycles: u64,
    pub issued: Vec<u64>,
    pub div_stalls: u64,
    pub tokens: usize,
    pub crossing_tokens: u64,
    pub returns: Vec<i32>,
}

impl SimReport {
    pub fn new<T: Scalar>(
        program: &str,
        config: RunConfig,
        inputs: &[i32],
        trace: &Trace,
        params: &EnergyModelParams<T>,
    ) -> Result<Self, ToolError> {
        Ok(SimReport {
            schema: REPORT_SCHEMA,
            command: "simulate".into(),
            program: program.to_string(),
            config,
            inputs: inputs.to_vec(),
            energy_j: trace.energy(params)?.to_f64_value(),
            instruction_j: trace.instruction_energy(params)?.to_f64_value(),
            idle_j: trace.idle_energy(params).to_f64_value(),
            link_j: trace.link_energy(params).to_f64_value(),
            wall_cycles: trace.wall_cycles,
            seconds: trace.seconds(params).to_f64_value(),
            idle_cycles: trace.idle_cycles,
            issued: trace.issued.clone(),
            div_stalls: trace.div_stalls,
            tokens: trace.tokens.len(),
            crossing_tokens: trace.crossing_tokens(),
            returns: trace.returns.clone(),
        })
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (a - b).abs() / b.abs()
    }
}

/// Static analysis at one or both levels, for one or both directions.
pub fn sra_report<T: Scalar>(
    name: &str,
    c: &Compiled,
    levels: &[Level],
    directions: &[Direction],
    params: &EnergyModelParams<T>,
    user: &[UserConstraint],
    idle_seconds: &T,
) -> Result<SraReport, ToolError> {
    let mut bounds = Vec::new();
    for &level in levels {
        for &d in directions {
            bounds.push(BoundEntry::new(&c.sra(level, d, params, user, idle_seconds)?));
        }
    }
    let mut ir_vs_isa = BTreeMap::new();
    for &d in directions {
        let find = |l| bounds.iter().find(|b: &&BoundEntry| b.level == l && b.kind == d.kind());
        if let (Some(ir), Some(isa)) = (find(Level::Ir), find(Level::Isa)) {
            let key = match d.kind() {
                BoundKind::Upper => "upper",
                BoundKind::Lower => "lower",
                BoundKind::Actual => "actual",
            };
            ir_vs_isa.insert(key.to_string(), rel(ir.energy_j, isa.energy_j));
        }
    }
    let mut notes = Vec::new();
    if c.ir.effective_threads().len() > 1 {
        notes.push("multi-threaded bound: per-thread bounds aggregated, steady state only; loose".to_string());
    }
    Ok(SraReport {
        schema: REPORT_SCHEMA,
        command: "sra".into(),
        program: name.to_string(),
        config: RunConfig::of(&c.ir, params),
        bounds,
        ir_vs_isa,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRow {
    pub benchmark: String,
    pub threads: usize,
    /// Input vector of the representative run.
    pub inputs: Vec<i32>,
    pub iss_j: f64,
    pub profile_j: f64,
    pub sra_max_j: f64,
    pub sra_min_j: f64,
    pub ir_sra_max_j: f64,
    pub ir_sra_min_j: f64,
    pub rel_err_profile_vs_iss: f64,
    pub rel_dev_ir_vs_isa: f64,
    /// Worst profile error over every input vector.
    pub max_rel_err_profile_vs_iss: f64,
    pub inputs_checked: usize,
    /// SRA-min ≤ ISS ≤ SRA-max held for every input vector.
    pub safe: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareReport {
    pub schema: u32,
    pub command: String,
    pub rows: Vec<CompareRow>,
}

/// ISS, profile and static bounds of one benchmark over all its inputs.
pub fn compare_benchmark<T: Scalar>(
    b: &Benchmark,
    params: &EnergyModelParams<T>,
    opts: &CompileOptions,
) -> Result<CompareRow, ToolError> {
    let c = compile(&b.program, opts)?;
    let zero = T::zero();
    let bound = |level, d| c.sra(level, d, params, &b.constraints, &zero).map(|r| r.bound);
    let (max, min) = (bound(Level::Isa, Direction::Max)?, bound(Level::Isa, Direction::Min)?);
    let (ir_max, ir_min) = (bound(Level::Ir, Direction::Max)?, bound(Level::Ir, Direction::Min)?);
    let mut safe = true;
    let mut worst = 0.0f64;
    let mut first = None;
    for inputs in &b.inputs {
        let (_, iss) = c.simulate(inputs, params, &IssConfig::default())?;
        let (_, est) = c.profile(inputs, params, &InterpConfig::default())?;
        safe &= min <= iss && iss <= max;
        let err = rel(est.total.to_f64_value(), iss.to_f64_value());
        worst = worst.max(err);
        if first.is_none() {
            first = Some((inputs.clone(), iss, est.total, err));
        }
    }
    let (inputs, iss, prof, err) = first.ok_or_else(|| ToolError::Io {
        path: b.dir.display().to_string(),
        msg: "no input vectors".into(),
    })?;
    Ok(CompareRow {
        benchmark: b.name.clone(),
        threads: b.program.effective_threads().len(),
        inputs,
        iss_j: iss.to_f64_value(),
        profile_j: prof.to_f64_value(),
        sra_max_j: max.to_f64_value(),
        sra_min_j: min.to_f64_value(),
        ir_sra_max_j: ir_max.to_f64_value(),
        ir_sra_min_j: ir_min.to_f64_value(),
        rel_err_profile_vs_iss: err,
        rel_dev_ir_vs_isa: rel(ir_max.to_f64_value(), max.to_f64_value())
            .max(rel(ir_min.to_f64_value(), min.to_f64_value())),
        max_rel_err_profile_vs_iss: worst,
        inputs_checked: b.inputs.len(),
        safe,
    })
}

pub fn compare_corpus<T: Scalar>(
    corpus: &[Benchmark],
    params: &EnergyModelParams<T>,
    opts: &CompileOptions,
) -> Result<CompareReport, ToolError> {
    let rows = corpus.iter().map(|b| compare_benchmark(b, params, opts)).collect::<Result<_, _>>()?;
    Ok(CompareReport { schema: REPORT_SCHEMA, command: "compare".into(), rows })
}

fn pct(x: f64) -> String {
    format!("{:.2}%", x * 100.0)
}

impl CompareReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| benchmark | threads | ISS (J) | profile (J) | SRA max (J) | SRA min (J) | profile err | IR vs ISA | safe |\n\
             |---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {:.6e} | {:.6e} | {:.6e} | {:.6e} | {} | {} | {} |",
                r.benchmark,
                r.threads,
                r.iss_j,
                r.profile_j,
                r.sra_max_j,
                r.sra_min_j,
                pct(r.rel_err_profile_vs_iss),
                pct(r.rel_dev_ir_vs_isa),
                if r.safe { "yes" } else { "NO" }
            );
        }
        s
    }
}

/// One design point of an exploration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreConfig {
    pub name: String,
    /// Program path relative to the configuration file; defaults to the
    /// program given on the command line.
    #[serde(default)]
    pub program: Option<String>,
    pub v: f64,
    pub f: f64,
    /// Core of each thread, overriding the program's placement.
    #[serde(default)]
    pub cores: Option<Vec<u32>>,
    /// Inputs for a confirming simulation.
    #[serde(default)]
    pub inputs: Option<Vec<i32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreFile {
    /// Name of the configuration savings are measured against; the first by default.
    #[serde(default)]
    pub baseline: Option<String>,
    pub configs: Vec<ExploreConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreRow {
    pub name: String,
    pub program: String,
    pub threads: usize,
    pub cores: usize,
    pub v: f64,
    pub f: f64,
    pub predicted_energy_j: f64,
    pub predicted_time_s: f64,
    pub savings_pct: f64,
    pub simulated_energy_j: Option<f64>,
    pub simulated_time_s: Option<f64>,
    pub simulated_savings_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreReport {
    pub schema: u32,
    pub command: String,
    pub baseline: String,
    pub rows: Vec<ExploreRow>,
}

pub fn load_explore_file(path: &Path) -> Result<ExploreFile, ToolError> {
    serde_json::from_str(&read_file(path)?)
        .map_err(|e| ToolError::Io { path: path.display().to_string(), msg: e.to_string() })
}

/// Predicted (upper-bound) energy and time per configuration, with an
/// optional simulated confirmation, and savings against the baseline.
pub fn explore<T: Scalar>(
    default_program: Option<(&str, &EirProgram)>,
    file: &ExploreFile,
    base_dir: &Path,
    params: &EnergyModelParams<T>,
    opts: &CompileOptions,
) -> Result<ExploreReport, ToolError> {
    let mut rows = Vec::new();
    let mut exact: Vec<(T, Option<T>)> = Vec::new();
    for cfg in &file.configs {
        let (name, program) = match &cfg.program {
            Some(p) => {
                let path = base_dir.join(p);
                let prog = crate::ir::parse_eir(&read_file(&path)?)?;
                (p.clone(), prog)
            }
            None => match default_program {
                Some((n, p)) => (n.to_string(), p.clone()),
                None => {
                    return Err(ToolError::Io {
                        path: cfg.name.clone(),
                        msg: "configuration names no program".into(),
                    })
                }
            },
        };
        let program = match &cfg.cores {
            Some(cores) => place_threads(&program, cores)?,
            None => program,
        };
        let scaled = scale_params(params, &T::from_f64_value(cfg.v), &T::from_f64_value(cfg.f))?;
        let c = compile(&program, opts)?;
        let e = c.sra(Level::Isa, Direction::Max, &scaled, &[], &T::zero())?.bound;
        let t = c.time_bound(&scaled)?;
        let sim = match &cfg.inputs {
            Some(inputs) => Some(c.simulate(inputs, &scaled, &IssConfig::default())?),
            None => None,
        };
        let rc = RunConfig::of(&program, &scaled);
        rows.push(ExploreRow {
            name: cfg.name.clone(),
            program: name,
            threads: rc.threads,
            cores: rc.cores,
            v: cfg.v,
            f: cfg.f,
            predicted_energy_j: e.to_f64_value(),
            predicted_time_s: t.to_f64_value(),
            savings_pct: 0.0,
            simulated_energy_j: sim.as_ref().map(|(_, e)| e.to_f64_value()),
            simulated_time_s: sim.as_ref().map(|(tr, _)| tr.seconds(&scaled).to_f64_value()),
            simulated_savings_pct: None,
        });
        exact.push((e, sim.map(|(_, e)| e)));
    }
    let baseline = match &file.baseline {
        Some(b) => b.clone(),
        None => file.configs.first().map(|c| c.name.clone()).unwrap_or_default(),
    };
    let bi = file.configs.iter().position(|c| c.name == baseline).ok_or_else(|| ToolError::Io {
        path: baseline.clone(),
        msg: "baseline configuration not found".into(),
    })?;
    let savings = |base: &T, x: &T| {
        ((base.clone() - x.clone()) / base.clone() * T::from_count(100)).to_f64_value()
    };
    let (base_e, base_sim) = exact[bi].clone();
    for (row, (e, sim)) in rows.iter_mut().zip(&exact) {
        row.savings_pct = savings(&base_e, e);
        if let (Some(bs), Some(s)) = (&base_sim, sim) {
            row.simulated_savings_pct = Some(savings(bs, s));
        }
    }
    Ok(ExploreReport { schema: REPORT_SCHEMA, command: "explore".into(), baseline, rows })
}

impl ExploreReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| config | threads | cores | V | F (Hz) | predicted (J) | time (s) | savings | simulated (J) | simulated savings |\n\
             |---|---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let opt = |x: Option<f64>, f: &dyn Fn(f64) -> String| x.map_or("-".to_string(), f);
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.4e} | {:.6e} | {:.6e} | {:.2}% | {} | {} |",
                r.name,
                r.threads,
                r.cores,
                r.v,
                r.f,
                r.predicted_energy_j,
                r.predicted_time_s,
                r.savings_pct,
                opt(r.simulated_energy_j, &|x| format!("{x:.6e}")),
                opt(r.simulated_savings_pct, &|x| format!("{x:.2}%")),
            );
        }
        s
    }
}
