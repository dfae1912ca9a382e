//! Multi-threaded per-instruction energy model.
//!
//! An instruction issued while `Nt` threads are active costs
//! `(Ps + Pi·M[Np]·O) / Np · 4 · Tclk` joules with `Np = min(Nt, 4)`; time in
//! which the pipeline issues nothing is charged at `Ps + Pdi`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{IsaBlock, OpClass, Opcode, TimingRules, MAX_THREADS};
use crate::scalar::{convert, Scalar};

pub const PARAMS_SCHEMA: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("no per-instruction power for opcode {0}")]
    UnknownOpcode(String),
    #[error("active thread count {0} outside 1..=8")]
    ThreadCount(u32),
    #[error("negative idle time")]
    NegativeTime,
    #[error("voltage and frequency must be positive")]
    NonPositiveScale,
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("unsupported params schema {0}")]
    Schema(u32),
    #[error("params file: {0}")]
    Io(String),
}

/// Exponents of the first-order voltage/frequency scaling laws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalingExponents {
    pub dynamic_v: i32,
    pub dynamic_f: i32,
    pub static_v: i32,
}

impl Default for ScalingExponents {
    fn default() -> Self {
        ScalingExponents { dynamic_v: 2, dynamic_f: 1, static_v: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModelParams<T> {
    /// Static power (W).
    pub ps: T,
    /// Dynamic idle power (W).
    pub pdi: T,
    /// Per-opcode dynamic power (W).
    pub pi: BTreeMap<Opcode, T>,
    /// Inter-instruction overhead.
    pub o: T,
    /// Pipeline occupancy scaling `M_1..M_4`.
    pub m: [T; 4],
    pub tclk: T,
    pub vnom: T,
    pub fnom: T,
    /// Joules per channel token crossing cores.
    pub link_cost: T,
    pub exponents: ScalingExponents,
    pub timing: TimingRules,
}

/// Per-class dynamic powers used to fill the opcode table.
pub fn default_class_power(c: OpClass) -> f64 {
    match c {
        OpClass::Alu => 0.100,
        OpClass::Mem => 0.140,
        OpClass::Branch => 0.110,
        OpClass::Comm => 0.150,
        OpClass::Div => 0.160,
        OpClass::Fnop => 0.060,
    }
}

impl<T: Scalar> Default for EnergyModelParams<T> {
    fn default() -> Self {
        let v = T::from_f64_value;
        EnergyModelParams {
            ps: v(0.050),
            pdi: v(0.020),
            pi: Opcode::ALL.iter().map(|&op| (op, v(default_class_power(op.class())))).collect(),
            o: v(1.3),
            m: [v(1.0), v(1.1), v(1.15), v(1.2)],
            tclk: v(2.5e-9),
            vnom: v(1.0),
            fnom: v(400e6),
            link_cost: v(2e-9),
            exponents: ScalingExponents::default(),
            timing: TimingRules::default(),
        }
    }
}

fn powi<T: Scalar>(x: &T, e: i32) -> T {
    let p = num_traits::pow(x.clone(), e.unsigned_abs() as usize);
    if e < 0 {
        T::one() / p
    } else {
        p
    }
}

impl<T: Scalar> EnergyModelParams<T> {
    pub fn pi(&self, op: Opcode) -> Result<&T, EnergyError> {
        self.pi.get(&op).ok_or_else(|| EnergyError::UnknownOpcode(op.name().to_string()))
    }

    pub fn check(&self) -> Result<(), EnergyError> {
        let z = T::zero();
        if self.ps < z || self.pdi < z || self.link_cost < z || self.o < z {
            return Err(EnergyError::Invalid("powers must be non-negative".into()));
        }
        if self.pi.values().any(|p| *p < z) {
            return Err(EnergyError::Invalid("powers must be non-negative".into()));
        }
        if self.tclk <= z || self.vnom <= z || self.fnom <= z {
            return Err(EnergyError::Invalid("Tclk, Vnom and Fnom must be positive".into()));
        }
        if self.m.iter().any(|m| *m <= z) {
            return Err(EnergyError::Invalid("M entries must be positive".into()));
        }
        if !self.pi.contains_key(&Opcode::Fnop) {
            return Err(EnergyError::UnknownOpcode("fnop".into()));
        }
        Ok(())
    }

    /// Same parameters in another scalar type.
    pub fn convert<U: Scalar>(&self) -> EnergyModelParams<U> {
        EnergyModelParams {
            ps: convert(&self.ps),
            pdi: convert(&self.pdi),
            pi: self.pi.iter().map(|(k, v)| (*k, convert(v))).collect(),
            o: convert(&self.o),
            m: [convert(&self.m[0]), convert(&self.m[1]), convert(&self.m[2]), convert(&self.m[3])],
            tclk: convert(&self.tclk),
            vnom: convert(&self.vnom),
            fnom: convert(&self.fnom),
            link_cost: convert(&self.link_cost),
            exponents: self.exponents,
            timing: self.timing,
        }
    }
}

fn check_nt(nt: u32) -> Result<u32, EnergyError> {
    if (1..=MAX_THREADS).contains(&nt) {
        Ok(nt.min(4))
    } else {
        Err(EnergyError::ThreadCount(nt))
    }
}

/// Energy of one issue slot of `op` with `nt` active threads.
pub fn instruction_energy<T: Scalar>(
    op: Opcode,
    nt: u32,
    params: &EnergyModelParams<T>,
) -> Result<T, EnergyError> {
    let np = check_nt(nt)?;
    let pi = params.pi(op)?.clone();
    let power = params.ps.clone() + pi * params.m[np as usize - 1].clone() * params.o.clone();
    let base = T::from_count(u64::from(params.timing.base_latency_cycles));
    Ok(power / T::from_count(u64::from(np)) * base * params.tclk.clone())
}

/// Extra energy of one divide stall, charged at idle rate on the thread's share.
pub fn div_stall_energy<T: Scalar>(nt: u32, params: &EnergyModelParams<T>) -> Result<T, EnergyError> {
    let np = check_nt(nt)?;
    let cycles = T::from_count(u64::from(params.timing.div_cycles));
    Ok((params.ps.clone() + params.pdi.clone()) / T::from_count(u64::from(np)) * cycles * params.tclk.clone())
}

/// Issue-slot energy plus the divide stall charge where applicable.
pub fn instruction_total_energy<T: Scalar>(
    op: Opcode,
    nt: u32,
    params: &EnergyModelParams<T>,
) -> Result<T, EnergyError> {
    let e = instruction_energy(op, nt, params)?;
    if op.is_div() {
        Ok(e + div_stall_energy(nt, params)?)
    } else {
        Ok(e)
    }
}

pub fn idle_energy<T: Scalar>(t_idl: &T, params: &EnergyModelParams<T>) -> Result<T, EnergyError> {
    if *t_idl < T::zero() {
        return Err(EnergyError::NegativeTime);
    }
    Ok((params.ps.clone() + params.pdi.clone()) * t_idl.clone())
}

/// Idle energy for a number of cycles at the current clock.
pub fn idle_cycles_energy<T: Scalar>(cycles: u64, params: &EnergyModelParams<T>) -> T {
    (params.ps.clone() + params.pdi.clone()) * T::from_count(cycles) * params.tclk.clone()
}

/// Rescales the parameters to supply voltage `v` and clock `f`.
pub fn scale_params<T: Scalar>(
    params: &EnergyModelParams<T>,
    v: &T,
    f: &T,
) -> Result<EnergyModelParams<T>, EnergyError> {
    if *v <= T::zero() || *f <= T::zero() {
        return Err(EnergyError::NonPositiveScale);
    }
    let e = params.exponents;
    let rv = v.clone() / params.vnom.clone();
    let rf = f.clone() / params.fnom.clone();
    let dynamic = powi(&rv, e.dynamic_v) * powi(&rf, e.dynamic_f);
    let stat = powi(&rv, e.static_v);
    let mut out = params.clone();
    out.ps = params.ps.clone() * stat;
    out.pdi = params.pdi.clone() * dynamic.clone();
    for p in out.pi.values_mut() {
        *p = p.clone() * dynamic.clone();
    }
    out.tclk = T::one() / f.clone();
    out.vnom = v.clone();
    out.fnom = f.clone();
    Ok(out)
}

/// Sum of instruction energies in a block, fnops and divide stalls included.
pub fn block_energy<T: Scalar>(
    b: &IsaBlock,
    nt: u32,
    params: &EnergyModelParams<T>,
) -> Result<T, EnergyError> {
    let mut total = T::zero();
    for i in &b.instrs {
        total = total + instruction_total_energy(i.op, nt, params)?;
    }
    Ok(total)
}

/// On-disk form of the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub schema: u32,
    #[serde(rename = "Ps")]
    pub ps: f64,
    #[serde(rename = "Pdi")]
    pub pdi: f64,
    #[serde(rename = "Pi")]
    pub pi: BTreeMap<Opcode, f64>,
    #[serde(rename = "O")]
    pub o: f64,
    #[serde(rename = "M")]
    pub m: [f64; 4],
    #[serde(rename = "Tclk")]
    pub tclk: f64,
    #[serde(rename = "Vnom")]
    pub vnom: f64,
    #[serde(rename = "Fnom")]
    pub fnom: f64,
    pub link_cost: f64,
    #[serde(default)]
    pub exponents: ScalingExponents,
    #[serde(default)]
    pub timing: TimingRules,
}

impl ParamsFile {
    pub fn into_params<T: Scalar>(self) -> Result<EnergyModelParams<T>, EnergyError> {
        if self.schema != PARAMS_SCHEMA {
            return Err(EnergyError::Schema(self.schema));
        }
        let v = T::from_f64_value;
        let all = [self.ps, self.pdi, self.o, self.tclk, self.vnom, self.fnom, self.link_cost];
        if all.iter().chain(self.m.iter()).chain(self.pi.values()).any(|x| !x.is_finite()) {
            return Err(EnergyError::Invalid("non-finite value".into()));
        }
        let p = EnergyModelParams {
            ps: v(self.ps),
            pdi: v(self.pdi),
            pi: self.pi.into_iter().map(|(k, x)| (k, v(x))).collect(),
            o: v(self.o),
            m: self.m.map(v),
            tclk: v(self.tclk),
            vnom: v(self.vnom),
            fnom: v(self.fnom),
            link_cost: v(self.link_cost),
            exponents: self.exponents,
            timing: self.timing,
        };
        p.check()?;
        Ok(p)
    }

    pub fn from_params<T: Scalar>(p: &EnergyModelParams<T>) -> Self {
        let f = |x: &T| x.to_f64_value();
        ParamsFile {
            schema: PARAMS_SCHEMA,
            ps: f(&p.ps),
            pdi: f(&p.pdi),
            pi: p.pi.iter().map(|(k, x)| (*k, f(x))).collect(),
            o: f(&p.o),
            m: [f(&p.m[0]), f(&p.m[1]), f(&p.m[2]), f(&p.m[3])],
            tclk: f(&p.tclk),
            vnom: f(&p.vnom),
            fnom: f(&p.fnom),
            link_cost: f(&p.link_cost),
            exponents: p.exponents,
            timing: p.timing,
        }
    }
}

pub fn params_from_json<T: Scalar>(text: &str) -> Result<EnergyModelParams<T>, EnergyError> {
    let file: ParamsFile = serde_json::from_str(text).map_err(|e| EnergyError::Io(e.to_string()))?;
    file.into_params()
}

pub fn params_to_json<T: Scalar>(p: &EnergyModelParams<T>) -> String {
    serde_json::to_string_pretty(&ParamsFile::from_params(p)).expect("params serialize")
}

pub fn load_params<T: Scalar>(path: &Path) -> Result<EnergyModelParams<T>, EnergyError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EnergyError::Io(format!("{}: {e}", path.display())))?;
    params_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::IsaInstr;
    use num_rational::BigRational;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1e-30)
    }

    #[test]
    fn add_energy_examples() {
        let p = EnergyModelParams::<f64>::default();
        assert!(close(instruction_energy(Opcode::Add, 1, &p).unwrap(), 1.8e-9));
        assert!(close(instruction_energy(Opcode::Add, 2, &p).unwrap(), 9.65e-10));
        let mut zero = p.clone();
        zero.ps = 0.0;
        zero.pi.insert(Opcode::Add, 0.0);
        assert_eq!(instruction_energy(Opcode::Add, 1, &zero).unwrap(), 0.0);
        assert!(instruction_energy(Opcode::Add, 9, &p).is_err());
    }

    #[test]
    fn unknown_opcode() {
        let mut p = EnergyModelParams::<f64>::default();
        p.pi.remove(&Opcode::Mul);
        assert_eq!(
            instruction_energy(Opcode::Mul, 1, &p),
            Err(EnergyError::UnknownOpcode("mul".into()))
        );
    }

    #[test]
    fn idle_examples() {
        let p = EnergyModelParams::<f64>::default();
        assert_eq!(idle_energy(&0.0, &p).unwrap(), 0.0);
        assert!(close(idle_energy(&1e-3, &p).unwrap(), 7e-5));
        assert_eq!(idle_energy(&-1.0, &p), Err(EnergyError::NegativeTime));
    }

    #[test]
    fn scaling_examples() {
        let p = EnergyModelParams::<BigRational>::default();
        let same = scale_params(&p, &p.vnom, &p.fnom).unwrap();
        assert_eq!(same.pi, p.pi);
        assert_eq!(same.tclk, BigRational::from_count(1) / p.fnom.clone());

        let v = p.vnom.clone() * BigRational::from_f64_value(0.75);
        let f = p.fnom.clone() / BigRational::from_count(3);
        let s = scale_params(&p, &v, &f).unwrap();
        let factor = s.pi[&Opcode::Add].clone() / p.pi[&Opcode::Add].clone();
        assert_eq!(factor, crate::scalar::rational(3, 16));

        let mut nostatic = p.clone();
        nostatic.ps = BigRational::from_count(0);
        nostatic.tclk = BigRational::from_count(1) / nostatic.fnom.clone();
        let half = scale_params(&nostatic, &p.vnom, &(p.fnom.clone() / BigRational::from_count(2))).unwrap();
        for op in Opcode::ALL {
            assert_eq!(
                instruction_energy(op, 1, &half).unwrap(),
                instruction_energy(op, 1, &nostatic).unwrap()
            );
        }
        assert!(scale_params(&p, &BigRational::from_count(0), &p.fnom).is_err());
    }

    #[test]
    fn block_sums() {
        let p = EnergyModelParams::<f64>::default();
        let b = IsaBlock { label: "b".into(), instrs: vec![] };
        assert_eq!(block_energy(&b, 1, &p).unwrap(), 0.0);
        let b = IsaBlock {
            label: "b".into(),
            instrs: vec![IsaInstr::new(Opcode::Add, vec![]), IsaInstr::new(Opcode::Add, vec![])],
        };
        assert!(close(block_energy(&b, 1, &p).unwrap(), 3.6e-9));
    }

    #[test]
    fn json_round_trip() {
        let p = EnergyModelParams::<f64>::default();
        let q: EnergyModelParams<f64> = params_from_json(&params_to_json(&p)).unwrap();
        assert_eq!(p, q);
        let bad = params_to_json(&p).replace("\"schema\": 1", "\"schema\": 2");
        assert_eq!(params_from_json::<f64>(&bad), Err(EnergyError::Schema(2)));
    }
}
