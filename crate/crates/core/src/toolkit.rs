//! End-to-end pipelines shared by the command-line tool and the tests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamic::{self, BbCounts, DynError, InterpConfig, IssConfig, ProfileEstimate, Trace};
use crate::energy::{EnergyError, EnergyModelParams};
use crate::ir::{self, annotate_debug_locations, parse_eir, EirProgram, IrError};
use crate::isa::{self, place_fnops, IsaProgram};
use crate::lower::{lower_with, Diagnostic, LowerError, LowerOptions};
use crate::mapping::{
    attribute_fnops, build_mapping, characterize_ir_energy, tune_phi_nodes, IrEnergyMap, MappingError,
    MappingTable,
};
use crate::scalar::Scalar;
use crate::sra::{
    analyze_graphs, analyze_threads, ir_graphs, isa_graphs, threads_per_core, Direction, FlowGraph, Level,
    SraError, SraResult, UserConstraint,
};

#[derive(Debug, Error)]
pub enum ToolError {
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Sra(#[from] SraError),
    #[error(transparent)]
    Dyn(#[from] DynError),
    #[error(transparent)]
    Isa(#[from] isa::IsaError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl ToolError {
    /// True for failures that indicate a bug rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, ToolError::Invariant(_))
            || matches!(self, ToolError::Mapping(MappingError::NotDisjoint(..) | MappingError::NotTotal(_)))
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        ToolError::Io { path: path.display().to_string(), msg: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CompileOptions {
    pub lower: LowerOptions,
    /// Use the debug locations present in the input instead of re-annotating.
    pub keep_dbg: bool,
}

/// A program lowered to ISA with fnops placed and the mapping built.
#[derive(Debug, Clone, PartialEq)]
pub struct Compiled {
    pub ir: EirProgram,
    pub isa: IsaProgram,
    pub map: MappingTable,
    pub diagnostics: Vec<Diagnostic>,
}

pub fn compile(p: &EirProgram, opts: &CompileOptions) -> Result<Compiled, ToolError> {
    let ir = if opts.keep_dbg {
        let mut seen = BTreeSet::new();
        for i in p.instructions() {
            if let Some(d) = i.dbg {
                if !seen.insert(d) {
                    return Err(ToolError::Ir(IrError::Malformed {
                        func: String::new(),
                        block: String::new(),
                        msg: format!("debug location {d} used twice"),
                    }));
                }
            }
        }
        p.clone()
    } else {
        annotate_debug_locations(p.clone())
    };
    let lowered = lower_with(&ir, &opts.lower)?;
    let placed = place_fnops(&lowered.program, crate::isa::TimingRules::default().buffer_capacity);
    let isa = attribute_fnops(&placed, opts.lower.adjacent_policy)?;
    isa.validate()?;
    let map = build_mapping(&ir, &isa)?;
    Ok(Compiled { ir, isa, map, diagnostics: lowered.diagnostics })
}

pub fn compile_source(src: &str, opts: &CompileOptions) -> Result<Compiled, ToolError> {
    compile(&parse_eir(src)?, opts)
}

impl Compiled {
    /// IR-level energy attribution at `nt` active threads.
    pub fn ir_energy<T: Scalar>(
        &self,
        nt: u32,
        params: &EnergyModelParams<T>,
        tuned: bool,
    ) -> Result<IrEnergyMap<T>, ToolError> {
        let e = characterize_ir_energy(&self.ir, &self.map, &self.isa, nt, params)?;
        if tuned {
            Ok(tune_phi_nodes(&self.ir, &self.isa, &self.map, &e, nt, params)?)
        } else {
            Ok(e)
        }
    }

    pub fn sra<T: Scalar>(
        &self,
        level: Level,
        direction: Direction,
        params: &EnergyModelParams<T>,
        user: &[UserConstraint],
        idle_seconds: &T,
    ) -> Result<SraResult<T>, ToolError> {
        let r = match level {
            Level::Isa => analyze_threads(&self.ir, level, params, direction, user, idle_seconds, |nt, extras| {
                isa_graphs(&self.ir, &self.isa, nt, params, extras)
            })?,
            Level::Ir => {
                let mut maps: BTreeMap<u32, IrEnergyMap<T>> = BTreeMap::new();
                analyze_threads(&self.ir, level, params, direction, user, idle_seconds, |nt, extras| {
                    if let std::collections::btree_map::Entry::Vacant(e) = maps.entry(nt) {
                        let m = self.ir_energy(nt, params, true).map_err(|e| SraError::Other(e.to_string()))?;
                        e.insert(m);
                    }
                    Ok(ir_graphs(&self.ir, &maps[&nt], extras))
                })?
            }
        };
        Ok(r)
    }

    /// Block counts from an instrumented copy of the IR.
    pub fn counts(&self, inputs: &[i32], cfg: &InterpConfig) -> Result<BbCounts, ToolError> {
        let counts = dynamic::profile_counts(&self.ir, inputs, cfg)?;
        counts.check_flow(&self.ir).map_err(ToolError::Invariant)?;
        Ok(counts)
    }

    pub fn estimate<T: Scalar>(
        &self,
        counts: &BbCounts,
        params: &EnergyModelParams<T>,
        idle_seconds: &T,
    ) -> Result<ProfileEstimate<T>, ToolError> {
        Ok(dynamic::estimate_from_counts(
            &self.ir,
            counts,
            |nt| self.ir_energy(nt, params, true).map_err(|e| DynError::Config(e.to_string())),
            params,
            idle_seconds,
        )?)
    }

    pub fn profile<T: Scalar>(
        &self,
        inputs: &[i32],
        params: &EnergyModelParams<T>,
        cfg: &InterpConfig,
    ) -> Result<(BbCounts, ProfileEstimate<T>), ToolError> {
        let counts = self.counts(inputs, cfg)?;
        let est = self.estimate(&counts, params, &T::zero())?;
        Ok((counts, est))
    }

    pub fn simulate<T: Scalar>(
        &self,
        inputs: &[i32],
        params: &EnergyModelParams<T>,
        cfg: &IssConfig,
    ) -> Result<(Trace, T), ToolError> {
        Ok(dynamic::iss_run(&self.isa, inputs, params, cfg)?)
    }

    /// Upper bound on execution time in seconds: the slowest thread's
    /// worst-case cycle count at its core's thread count.
    pub fn time_bound<T: Scalar>(&self, params: &EnergyModelParams<T>) -> Result<T, ToolError> {
        let threads = self.ir.effective_threads();
        let nts = threads_per_core(&threads);
        let mut worst = T::zero();
        for (t, nt) in threads.iter().zip(nts) {
            let graphs = cycle_graphs(&self.ir, &self.isa, nt, params)?;
            let r = analyze_graphs(&graphs, &t.function, Direction::Max, &[])?;
            let cycles = r[&t.function].bound.clone();
            if cycles > worst {
                worst = cycles;
            }
        }
        Ok(worst * params.tclk.clone())
    }
}

fn cycle_graphs<T: Scalar>(
    ir: &EirProgram,
    isa: &IsaProgram,
    nt: u32,
    params: &EnergyModelParams<T>,
) -> Result<Vec<FlowGraph<T>>, ToolError> {
    let mut graphs = isa_graphs(ir, isa, nt, params, &BTreeMap::new())?;
    for (g, f) in graphs.iter_mut().zip(&isa.functions) {
        for (c, b) in g.costs.iter_mut().zip(&f.blocks) {
            let mut cycles = 0u64;
            for i in &b.instrs {
                cycles += u64::from(params.timing.instruction_cycles(i.op, nt)?);
            }
            *c = T::from_count(cycles);
        }
    }
    Ok(graphs)
}

/// Replaces the core placement of every declared thread.
pub fn place_threads(p: &EirProgram, cores: &[u32]) -> Result<EirProgram, ToolError> {
    let mut out = p.clone();
    let n = out.effective_threads().len();
    if cores.len() != n {
        return Err(ToolError::Io {
            path: "placement".into(),
            msg: format!("{} cores given for {n} threads", cores.len()),
        });
    }
    out.threads = out.effective_threads();
    for (t, c) in out.threads.iter_mut().zip(cores) {
        t.core = *c;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsFile {
    pub inputs: Vec<Vec<i32>>,
}

/// One corpus entry: `benchmarks/<name>/{prog.eir, inputs.json, constraints.txt?}`.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub name: String,
    pub dir: PathBuf,
    pub source: String,
    pub program: EirProgram,
    pub inputs: Vec<Vec<i32>>,
    pub constraints: Vec<UserConstraint>,
}

pub fn read_file(path: &Path) -> Result<String, ToolError> {
    std::fs::read_to_string(path).map_err(|e| ToolError::io(path, e))
}

pub fn load_inputs(path: &Path) -> Result<Vec<Vec<i32>>, ToolError> {
    let f: InputsFile = serde_json::from_str(&read_file(path)?).map_err(|e| ToolError::io(path, e))?;
    Ok(f.inputs)
}

pub fn load_benchmark(dir: &Path) -> Result<Benchmark, ToolError> {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let source = read_file(&dir.join("prog.eir"))?;
    let program = parse_eir(&source)?;
    ir::validate(&program)?;
    let ip = dir.join("inputs.json");
    let inputs = if ip.exists() { load_inputs(&ip)? } else { vec![vec![]] };
    let cp = dir.join("constraints.txt");
    let constraints =
        if cp.exists() { crate::sra::parse_constraints(&read_file(&cp)?)? } else { Vec::new() };
    Ok(Benchmark { name, dir: dir.to_path_buf(), source, program, inputs, constraints })
}

/// Every benchmark directory under `root`, sorted by name.
pub fn load_corpus(root: &Path) -> Result<Vec<Benchmark>, ToolError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| ToolError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("prog.eir").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_benchmark(d)).collect()
}
