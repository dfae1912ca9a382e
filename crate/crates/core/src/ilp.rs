//! Small exact integer linear programming solver.
//!
//! A dense two-phase simplex with Bland's rule solves relaxations; depth-first
//! branch-and-bound closes the integrality gap. With [`BigRational`] as the
//! scalar every pivot is exact.
//!
//! [`BigRational`]: num_rational::BigRational

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint<T> {
    pub coeffs: Vec<(usize, T)>,
    pub sense: Sense,
    pub rhs: T,
}

/// `max` or `min` of `objective · x` subject to the constraints and `x ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram<T> {
    pub num_vars: usize,
    pub objective: Vec<T>,
    pub maximize: bool,
    pub constraints: Vec<Constraint<T>>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IlpError {
    #[error("problem is infeasible")]
    Infeasible,
    #[error("objective is unbounded")]
    Unbounded,
    #[error("branch-and-bound node limit reached")]
    NodeLimit,
    #[error("constraint references variable {0} of {1}")]
    BadVariable(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution<T> {
    pub objective: T,
    pub values: Vec<T>,
}

pub const NODE_LIMIT: usize = 200_000;

impl<T: Scalar> LinearProgram<T> {
    pub fn new(num_vars: usize, maximize: bool) -> Self {
        LinearProgram { num_vars, objective: vec![T::zero(); num_vars], maximize, constraints: vec![] }
    }

    pub fn add(&mut self, coeffs: Vec<(usize, T)>, sense: Sense, rhs: T) {
        self.constraints.push(Constraint { coeffs, sense, rhs });
    }

    pub fn evaluate(&self, x: &[T]) -> T {
        self.objective.iter().zip(x).fold(T::zero(), |acc, (c, v)| acc + c.clone() * v.clone())
    }

    /// Whether `x` satisfies every constraint within the scalar tolerance.
    pub fn is_feasible(&self, x: &[T]) -> bool {
        let tol = T::tolerance();
        x.iter().all(|v| *v >= T::zero() - tol.clone())
            && self.constraints.iter().all(|c| {
                let lhs = c.coeffs.iter().fold(T::zero(), |a, (j, k)| a + k.clone() * x[*j].clone());
                match c.sense {
                    Sense::Le => lhs <= c.rhs.clone() + tol.clone(),
                    Sense::Ge => lhs >= c.rhs.clone() - tol.clone(),
                    Sense::Eq => (lhs - c.rhs.clone()).abs() <= tol,
                }
            })
    }

    fn check_vars(&self) -> Result<(), IlpError> {
        for c in &self.constraints {
            for (j, _) in &c.coeffs {
                if *j >= self.num_vars {
                    return Err(IlpError::BadVariable(*j, self.num_vars));
                }
            }
        }
        Ok(())
    }
}

fn gt_tol<T: Scalar>(v: &T) -> bool {
    *v > T::tolerance()
}

struct Tableau<T> {
    rows: Vec<Vec<T>>,
    basis: Vec<usize>,
    cols: usize,
}

impl<T: Scalar> Tableau<T> {
    fn rhs(&self, i: usize) -> &T {
        &self.rows[i][self.cols]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c].clone();
        for v in self.rows[r].iter_mut() {
            *v = v.clone() / p.clone();
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r || row[c].is_zero() {
                continue;
            }
            let f = row[c].clone();
            for (v, pv) in row.iter_mut().zip(&pivot_row) {
                if !pv.is_zero() {
                    *v = v.clone() - f.clone() * pv.clone();
                }
            }
        }
        self.basis[r] = c;
    }

    /// Maximizes `cost · x` over columns marked `allowed`.
    fn optimize(&mut self, cost: &[T], allowed: &[bool]) -> Result<(), IlpError> {
        loop {
            let mut entering = None;
            for j in 0..self.cols {
                if !allowed[j] || self.basis.contains(&j) {
                    continue;
                }
                let mut r = cost[j].clone();
                for (i, &b) in self.basis.iter().enumerate() {
                    if !cost[b].is_zero() && !self.rows[i][j].is_zero() {
                        r = r - cost[b].clone() * self.rows[i][j].clone();
                    }
                }
                if gt_tol(&r) {
                    entering = Some(j);
                    break;
                }
            }
            let Some(j) = entering else { return Ok(()) };
            let mut leave: Option<(usize, T)> = None;
            for i in 0..self.rows.len() {
                let a = &self.rows[i][j];
                if !gt_tol(a) {
                    continue;
                }
                let ratio = self.rhs(i).clone() / a.clone();
                let better = match &leave {
                    None => true,
                    Some((li, best)) => {
                        ratio < *best || (ratio == *best && self.basis[i] < self.basis[*li])
                    }
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
            let Some((r, _)) = leave else { return Err(IlpError::Unbounded) };
            self.pivot(r, j);
        }
    }
}

/// Solves the continuous relaxation.
pub fn solve_lp<T: Scalar>(lp: &LinearProgram<T>) -> Result<Solution<T>, IlpError> {
    lp.check_vars()?;
    let n = lp.num_vars;
    let m = lp.constraints.len();
    // Columns: structural, one slack/surplus per inequality, one artificial per row needing it.
    let mut slack_of = vec![None; m];
    let mut art_of = vec![None; m];
    let mut cols = n;
    let mut normalized = Vec::with_capacity(m);
    for (i, c) in lp.constraints.iter().enumerate() {
        let mut dense = vec![T::zero(); n];
        for (j, k) in &c.coeffs {
            dense[*j] = dense[*j].clone() + k.clone();
        }
        let (mut sense, mut rhs) = (c.sense, c.rhs.clone());
        if rhs < T::zero() {
            dense.iter_mut().for_each(|v| *v = T::zero() - v.clone());
            rhs = T::zero() - rhs;
            sense = match sense {
                Sense::Le => Sense::Ge,
                Sense::Ge => Sense::Le,
                Sense::Eq => Sense::Eq,
            };
        }
        if sense != Sense::Eq {
            slack_of[i] = Some(cols);
            cols += 1;
        }
        normalized.push((dense, sense, rhs));
    }
    for (i, (_, sense, _)) in normalized.iter().enumerate() {
        if *sense != Sense::Le {
            art_of[i] = Some(cols);
            cols += 1;
        }
    }
    let mut rows = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    for (i, (dense, sense, rhs)) in normalized.into_iter().enumerate() {
        let mut row = dense;
        row.resize(cols + 1, T::zero());
        if let Some(s) = slack_of[i] {
            row[s] = if sense == Sense::Le { T::one() } else { T::zero() - T::one() };
        }
        if let Some(a) = art_of[i] {
            row[a] = T::one();
            basis.push(a);
        } else {
            basis.push(slack_of[i].unwrap());
        }
        row[cols] = rhs;
        rows.push(row);
    }
    let mut tab = Tableau { rows, basis, cols };
    let is_art: Vec<bool> = (0..cols).map(|j| art_of.contains(&Some(j))).collect();

    if is_art.iter().any(|a| *a) {
        let cost: Vec<T> = is_art.iter().map(|a| if *a { T::zero() - T::one() } else { T::zero() }).collect();
        tab.optimize(&cost, &vec![true; cols])?;
        let infeas = tab
            .basis
            .iter()
            .enumerate()
            .filter(|(_, b)| is_art[**b])
            .any(|(i, _)| gt_tol(tab.rhs(i)));
        if infeas {
            return Err(IlpError::Infeasible);
        }
        // Drive remaining zero-valued artificials out of the basis.
        let mut i = 0;
        while i < tab.rows.len() {
            if is_art[tab.basis[i]] {
                match (0..cols).find(|&j| !is_art[j] && !tab.rows[i][j].is_approx_zero()) {
                    Some(j) => tab.pivot(i, j),
                    None => {
                        tab.rows.remove(i);
                        tab.basis.remove(i);
                        continue;
                    }
                }
            }
            i += 1;
        }
    }
    let mut cost = vec![T::zero(); cols];
    for (j, c) in lp.objective.iter().enumerate() {
        cost[j] = if lp.maximize { c.clone() } else { T::zero() - c.clone() };
    }
    let allowed: Vec<bool> = is_art.iter().map(|a| !a).collect();
    tab.optimize(&cost, &allowed)?;
    let mut values = vec![T::zero(); n];
    for (i, &b) in tab.basis.iter().enumerate() {
        if b < n {
            values[b] = tab.rhs(i).clone();
        }
    }
    Ok(Solution { objective: lp.evaluate(&values), values })
}

/// Solves with every variable restricted to non-negative integers.
pub fn solve_ilp<T: Scalar>(lp: &LinearProgram<T>) -> Result<Solution<T>, IlpError> {
    let mut best: Option<Solution<T>> = None;
    let mut stack = vec![lp.clone()];
    let mut nodes = 0;
    let mut unbounded = false;
    while let Some(node) = stack.pop() {
        nodes += 1;
        if nodes > NODE_LIMIT {
            return Err(IlpError::NodeLimit);
        }
        let relaxed = match solve_lp(&node) {
            Ok(s) => s,
            Err(IlpError::Infeasible) => continue,
            Err(IlpError::Unbounded) => {
                unbounded = true;
                continue;
            }
            Err(e) => return Err(e),
        };
        if let Some(b) = &best {
            let no_better = if lp.maximize {
                relaxed.objective <= b.objective.clone() + T::tolerance()
            } else {
                relaxed.objective >= b.objective.clone() - T::tolerance()
            };
            if no_better {
                continue;
            }
        }
        match relaxed.values.iter().position(|v| !v.is_integral()) {
            None => {
                let values: Vec<T> = relaxed.values.iter().map(|v| v.nearest_integer()).collect();
                best = Some(Solution { objective: lp.evaluate(&values), values });
            }
            Some(j) => {
                let v = relaxed.values[j].floor_value();
                let mut down = node.clone();
                down.add(vec![(j, T::one())], Sense::Le, v.clone());
                let mut up = node;
                up.add(vec![(j, T::one())], Sense::Ge, v + T::one());
                // Explore the up branch first; it is pushed last.
                stack.push(down);
                stack.push(up);
            }
        }
    }
    match best {
        Some(b) => Ok(b),
        None if unbounded => Err(IlpError::Unbounded),
        None => Err(IlpError::Infeasible),
    }
}
