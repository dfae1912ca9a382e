use std::collections::{BTreeMap, BTreeSet};

use super::*;
use crate::cfg::DomTree;

fn malformed(func: &EirFunction, block: &EirBlock, msg: impl Into<String>) -> IrError {
    IrError::Malformed { func: func.name.clone(), block: block.label.clone(), msg: msg.into() }
}

/// Structural checks performed by the parser.
pub fn validate_structure(p: &EirProgram) -> Result<(), IrError> {
    let mut names = BTreeSet::new();
    for f in &p.functions {
        if !names.insert(f.name.as_str()) {
            return Err(IrError::DuplicateFunction(f.name.clone()));
        }
    }
    if p.threads.is_empty() && p.function(&p.entry).is_none() {
        return Err(IrError::MissingEntry(p.entry.clone()));
    }
    for t in &p.threads {
        match p.function(&t.function) {
            None => return Err(IrError::UnknownThreadFunction(t.function.clone())),
            Some(f) if f.params.len() != t.args.len() => {
                return Err(IrError::ArityMismatch {
                    func: "<thread>".into(),
                    block: "-".into(),
                    callee: f.name.clone(),
                    expected: f.params.len(),
                    got: t.args.len(),
                })
            }
            Some(_) => {}
        }
    }
    for f in &p.functions {
        check_function(p, f)?;
    }
    Ok(())
}

fn check_function(p: &EirProgram, f: &EirFunction) -> Result<(), IrError> {
    if f.blocks.is_empty() {
        return Err(IrError::EmptyFunction { func: f.name.clone() });
    }
    let mut labels = BTreeSet::new();
    for b in &f.blocks {
        if !labels.insert(b.label.as_str()) {
            return Err(IrError::DuplicateLabel { func: f.name.clone(), label: b.label.clone() });
        }
    }
    let mut defs: BTreeSet<&str> = BTreeSet::new();
    for prm in &f.params {
        if !defs.insert(prm) {
            return Err(IrError::DuplicateDef { func: f.name.clone(), name: prm.clone() });
        }
    }
    for b in &f.blocks {
        let Some(last) = b.instrs.last() else {
            return Err(malformed(f, b, "block has no terminator"));
        };
        if !last.kind.is_terminator() {
            return Err(malformed(f, b, "block does not end in a terminator"));
        }
        let mut seen_non_phi = false;
        for (i, ins) in b.instrs.iter().enumerate() {
            if ins.kind.is_terminator() && i + 1 != b.instrs.len() {
                return Err(malformed(f, b, "terminator before end of block"));
            }
            if ins.is_phi() {
                if seen_non_phi {
                    return Err(malformed(f, b, "phi after non-phi instruction"));
                }
            } else {
                seen_non_phi = true;
            }
            if let Some(r) = &ins.result {
                if !defs.insert(r) {
                    return Err(IrError::DuplicateDef { func: f.name.clone(), name: r.clone() });
                }
            }
            if let InstKind::Call(callee, args) = &ins.kind {
                match p.function(callee) {
                    None => {
                        return Err(IrError::UnknownCallee {
                            func: f.name.clone(),
                            block: b.label.clone(),
                            callee: callee.clone(),
                        })
                    }
                    Some(g) if g.params.len() != args.len() => {
                        return Err(IrError::ArityMismatch {
                            func: f.name.clone(),
                            block: b.label.clone(),
                            callee: callee.clone(),
                            expected: g.params.len(),
                            got: args.len(),
                        })
                    }
                    Some(_) => {}
                }
            }
        }
        for t in last.kind.targets() {
            if !labels.contains(t) {
                return Err(IrError::UnknownTarget {
                    func: f.name.clone(),
                    block: b.label.clone(),
                    target: t.to_string(),
                });
            }
            if t == f.blocks[0].label {
                return Err(malformed(f, b, "branch into the entry block"));
            }
        }
    }
    let preds = f.predecessors();
    for b in &f.blocks {
        let bp = &preds[b.label.as_str()];
        for phi in b.phis() {
            let InstKind::Phi(incs) = &phi.kind else { unreachable!() };
            let mut listed = BTreeSet::new();
            for (pred, _) in incs {
                if !bp.contains(&pred.as_str()) || !listed.insert(pred.as_str()) {
                    return Err(IrError::PhiBadPredecessor {
                        func: f.name.clone(),
                        block: b.label.clone(),
                        pred: pred.clone(),
                    });
                }
            }
            if let Some(missing) = bp.iter().find(|p| !listed.contains(**p)) {
                return Err(IrError::PhiMissesPredecessor {
                    func: f.name.clone(),
                    block: b.label.clone(),
                    pred: missing.to_string(),
                });
            }
        }
    }
    Ok(())
}

/// Full validation: structure plus "every use is dominated by its definition".
pub fn validate(p: &EirProgram) -> Result<(), IrError> {
    validate_structure(p)?;
    for f in &p.functions {
        check_dominance(f)?;
    }
    Ok(())
}

fn check_dominance(f: &EirFunction) -> Result<(), IrError> {
    let cfg = build_ir_cfg(f);
    let dom = DomTree::compute(&cfg);
    // name -> (block index, instruction index); params live before block 0.
    let mut def_at: BTreeMap<&str, (usize, isize)> = BTreeMap::new();
    for prm in &f.params {
        def_at.insert(prm, (0, -1));
    }
    for (bi, b) in f.blocks.iter().enumerate() {
        for (ii, ins) in b.instrs.iter().enumerate() {
            if let Some(r) = &ins.result {
                def_at.insert(r, (bi, ii as isize));
            }
        }
    }
    for (bi, b) in f.blocks.iter().enumerate() {
        if !dom.is_reachable(bi) {
            continue;
        }
        for (ii, ins) in b.instrs.iter().enumerate() {
            let check = |name: &str, at_block: usize, at_index: isize| -> Result<(), IrError> {
                let Some(&(db, di)) = def_at.get(name) else {
                    return Err(IrError::UndefinedValue {
                        func: f.name.clone(),
                        block: b.label.clone(),
                        name: name.to_string(),
                    });
                };
                let ok = if db == at_block { di < at_index } else { dom.dominates(db, at_block) };
                if ok {
                    Ok(())
                } else {
                    Err(IrError::NotDominated {
                        func: f.name.clone(),
                        block: b.label.clone(),
                        name: name.to_string(),
                    })
                }
            };
            if let InstKind::Phi(incs) = &ins.kind {
                for (pred, v) in incs {
                    if let Value::Ssa(name) = v {
                        let pi = f.block_index(pred).expect("validated");
                        if dom.is_reachable(pi) {
                            check(name, pi, isize::MAX)?;
                        }
                    }
                }
            } else {
                for name in ins.uses() {
                    check(name, bi, ii as isize)?;
                }
            }
        }
    }
    Ok(())
}
