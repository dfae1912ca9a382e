//! Energy estimation from block execution counts.

use std::collections::BTreeMap;

use super::{split_key, BbCounts, DynError};
use crate::energy::{idle_energy, EnergyModelParams};
use crate::ir::EirProgram;
use crate::mapping::IrEnergyMap;
use crate::scalar::Scalar;
use crate::sra::{crossing_sends, threads_per_core};

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEstimate<T> {
    pub total: T,
    pub per_thread: Vec<T>,
    pub per_function: BTreeMap<String, T>,
    /// Keyed `func:block`.
    pub per_block: BTreeMap<String, T>,
    pub link: T,
    pub idle: T,
}

/// Σ count(b) · per_block(b) per thread, with each thread's block energies
/// taken from `energy_at(nt)` for its core's thread count, plus link and idle
/// terms.
pub fn estimate_from_counts<T: Scalar, F>(
    ir: &EirProgram,
    counts: &BbCounts,
    mut energy_at: F,
    params: &EnergyModelParams<T>,
    idle_seconds: &T,
) -> Result<ProfileEstimate<T>, DynError>
where
    F: FnMut(u32) -> Result<IrEnergyMap<T>, DynError>,
{
    let threads = ir.effective_threads();
    if counts.threads.len() != threads.len() {
        return Err(DynError::Config(format!(
            "counts cover {} threads, program launches {}",
            counts.threads.len(),
            threads.len()
        )));
    }
    let nts = threads_per_core(&threads);
    let crossings = crossing_sends(ir)?;
    let mut maps: BTreeMap<u32, IrEnergyMap<T>> = BTreeMap::new();
    let mut per_thread = Vec::new();
    let mut per_function: BTreeMap<String, T> = BTreeMap::new();
    let mut per_block: BTreeMap<String, T> = BTreeMap::new();
    let mut link = T::zero();
    for (ti, m) in counts.threads.iter().enumerate() {
        let nt = nts[ti];
        if let std::collections::btree_map::Entry::Vacant(e) = maps.entry(nt) {
            e.insert(energy_at(nt)?);
        }
        let energy = &maps[&nt];
        let mut total = T::zero();
        for (key, n) in m {
            let (f, b) = split_key(key).ok_or_else(|| DynError::UnknownBlock(key.clone()))?;
            if ir.function(f).and_then(|func| func.block(b)).is_none() {
                return Err(DynError::UnknownBlock(key.clone()));
            }
            let count = T::from_count(*n);
            let e = energy.block(f, b) * count.clone();
            let l = params.link_cost.clone()
                * T::from_count(crossings[ti].get(&(f.to_string(), b.to_string())).copied().unwrap_or(0))
                * count;
            link = link + l.clone();
            let e = e + l;
            total = total + e.clone();
            let pf = per_function.entry(f.to_string()).or_insert_with(T::zero);
            *pf = pf.clone() + e.clone();
            let pb = per_block.entry(key.clone()).or_insert_with(T::zero);
            *pb = pb.clone() + e;
        }
        per_thread.push(total);
    }
    let idle = idle_energy(idle_seconds, params)?;
    let total = crate::scalar::sum(per_thread.iter().cloned()) + idle.clone();
    Ok(ProfileEstimate { total, per_thread, per_function, per_block, link, idle })
}
