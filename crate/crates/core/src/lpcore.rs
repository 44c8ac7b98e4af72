//! Dense two-phase primal simplex with Bland's anti-cycling rule.
//!
//! Problems here are tiny (at most a few hundred variables), so the solver
//! keeps a full tableau and favors auditability over speed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Constraint satisfaction tolerance for optimal solutions.
pub const FEASIBILITY_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-10;
const DEFAULT_MAX_ITERATIONS: usize = 200_000;

/// `maximize c^T x` subject to `A x <= b`, `A_eq x = b_eq`, `lower <= x <= upper`.
/// Bounds may be infinite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub a_ub: Vec<Vec<f64>>,
    pub b_ub: Vec<f64>,
    pub a_eq: Vec<Vec<f64>>,
    pub b_eq: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LinearProgram {
    /// `n` variables, zero objective, bounds `[0, inf)`.
    pub fn new(n: usize) -> Self {
        LinearProgram {
            objective: vec![0.0; n],
            a_ub: Vec::new(),
            b_ub: Vec::new(),
            a_eq: Vec::new(),
            b_eq: Vec::new(),
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn maximize(mut self, c: Vec<f64>) -> Self {
        self.objective = c;
        self
    }

    pub fn le(&mut self, row: Vec<f64>, rhs: f64) -> &mut Self {
        self.a_ub.push(row);
        self.b_ub.push(rhs);
        self
    }

    pub fn ge(&mut self, row: Vec<f64>, rhs: f64) -> &mut Self {
        self.a_ub.push(row.into_iter().map(|v| -v).collect());
        self.b_ub.push(-rhs);
        self
    }

    pub fn equal(&mut self, row: Vec<f64>, rhs: f64) -> &mut Self {
        self.a_eq.push(row);
        self.b_eq.push(rhs);
        self
    }

    pub fn bounds(&mut self, var: usize, lower: f64, upper: f64) -> &mut Self {
        self.lower[var] = lower;
        self.upper[var] = upper;
        self
    }

    fn check(&self) -> Result<()> {
        let n = self.n_vars();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::InvalidInput("bound vectors do not match variable count".into()));
        }
        if self.a_ub.len() != self.b_ub.len() || self.a_eq.len() != self.b_eq.len() {
            return Err(Error::InvalidInput("constraint rows and right-hand sides differ".into()));
        }
        if self.a_ub.iter().chain(&self.a_eq).any(|r| r.len() != n) {
            return Err(Error::InvalidInput("constraint row length mismatch".into()));
        }
        let finite = self
            .objective
            .iter()
            .chain(self.b_ub.iter())
            .chain(self.b_eq.iter())
            .chain(self.a_ub.iter().flatten())
            .chain(self.a_eq.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("linear program contains NaN or infinite data".into()));
        }
        for j in 0..n {
            let (l, u) = (self.lower[j], self.upper[j]);
            if l.is_nan() || u.is_nan() || l == f64::INFINITY || u == f64::NEG_INFINITY || l > u {
                return Err(Error::InvalidInput(format!("bad bounds [{l}, {u}] on variable {j}")));
            }
        }
        Ok(())
    }

    /// Largest violation of any constraint or bound at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let dot = |row: &[f64]| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let ub = self.a_ub.iter().zip(&self.b_ub).map(|(r, b)| (dot(r) - b).max(0.0));
        let eq = self.a_eq.iter().zip(&self.b_eq).map(|(r, b)| (dot(r) - b).abs());
        let bnd = x
            .iter()
            .enumerate()
            .map(|(j, &v)| (self.lower[j] - v).max(v - self.upper[j]).max(0.0));
        ub.chain(eq).chain(bnd).fold(0.0, f64::max)
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct LpOptions {
    pub max_iterations: usize,
    /// Record the tableau after every pivot.
    pub trace: bool,
}

impl Default for LpOptions {
    fn default() -> Self {
        LpOptions { max_iterations: DEFAULT_MAX_ITERATIONS, trace: false }
    }
}

pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution> {
    solve_lp_with(lp, &LpOptions::default()).map(|(sol, _)| sol)
}

/// Solves and returns the tableau dumps when `opts.trace` is set.
pub fn solve_lp_with(lp: &LinearProgram, opts: &LpOptions) -> Result<(LpSolution, String)> {
    lp.check()?;
    let std = StandardForm::build(lp);
    let mut tab = Tableau::new(&std);
    let mut dump = String::new();
    let mut iterations = 0;

    // Phase 1: maximize -sum(artificials).
    if tab.n_art > 0 {
        let c1: Vec<f64> = (0..tab.n_cols).map(|j| if tab.is_art(j) { -1.0 } else { 0.0 }).collect();
        tab.set_objective(&c1);
        match tab.run(opts, &mut iterations, &mut dump, false)? {
            Outcome::Optimal => {}
            Outcome::Unbounded => unreachable!("phase 1 objective is bounded by zero"),
        }
        let scale = 1.0 + std.rhs.iter().map(|v| v.abs()).sum::<f64>();
        if tab.obj[tab.n_cols] < -FEASIBILITY_TOL * scale {
            return Ok((
                LpSolution {
                    status: LpStatus::Infeasible,
                    x: vec![f64::NAN; lp.n_vars()],
                    objective: f64::NAN,
                    iterations,
                },
                dump,
            ));
        }
        tab.drive_out_artificials();
    }

    // Phase 2 on the original objective.
    let mut c2 = vec![0.0; tab.n_cols];
    c2[..std.n_struct].copy_from_slice(&std.cost);
    tab.set_objective(&c2);
    let outcome = tab.run(opts, &mut iterations, &mut dump, true)?;
    if outcome == Outcome::Unbounded {
        return Ok((
            LpSolution {
                status: LpStatus::Unbounded,
                x: vec![f64::NAN; lp.n_vars()],
                objective: f64::INFINITY,
                iterations,
            },
            dump,
        ));
    }
    let y = tab.primal(std.n_struct);
    let x = std.recover(&y);
    let objective = lp.objective_value(&x);
    Ok((LpSolution { status: LpStatus::Optimal, x, objective, iterations }, dump))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    Optimal,
    Unbounded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RowKind {
    Le,
    Ge,
    Eq,
}

/// Nonnegative structural variables `y`, with `x_j = offset_j + sum(coef * y)`.
struct StandardForm {
    n_struct: usize,
    cost: Vec<f64>,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    kinds: Vec<RowKind>,
    /// Per original variable: (offset, [(y index, coefficient)]).
    maps: Vec<(f64, Vec<(usize, f64)>)>,
}

impl StandardForm {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.n_vars();
        let mut maps = Vec::with_capacity(n);
        let mut n_struct = 0;
        let mut extra_upper = Vec::new();
        for j in 0..n {
            let (l, u) = (lp.lower[j], lp.upper[j]);
            if l.is_finite() {
                maps.push((l, vec![(n_struct, 1.0)]));
                if u.is_finite() {
                    extra_upper.push((n_struct, u - l));
                }
                n_struct += 1;
            } else if u.is_finite() {
                maps.push((u, vec![(n_struct, -1.0)]));
                n_struct += 1;
            } else {
                maps.push((0.0, vec![(n_struct, 1.0), (n_struct + 1, -1.0)]));
                n_struct += 2;
            }
        }
        let mut cost = vec![0.0; n_struct];
        for (j, (_, terms)) in maps.iter().enumerate() {
            for &(y, c) in terms {
                cost[y] += lp.objective[j] * c;
            }
        }
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        let mut kinds = Vec::new();
        let mut push = |row: &[f64], b: f64, kind: RowKind| {
            let mut out = vec![0.0; n_struct];
            let mut shift = 0.0;
            for (j, (off, terms)) in maps.iter().enumerate() {
                if row[j] == 0.0 {
                    continue;
                }
                shift += row[j] * off;
                for &(y, c) in terms {
                    out[y] += row[j] * c;
                }
            }
            let mut b = b - shift;
            let mut kind = kind;
            if b < 0.0 {
                out.iter_mut().for_each(|v| *v = -*v);
                b = -b;
                kind = match kind {
                    RowKind::Le => RowKind::Ge,
                    RowKind::Ge => RowKind::Le,
                    RowKind::Eq => RowKind::Eq,
                };
            }
            rows.push(out);
            rhs.push(b);
            kinds.push(kind);
        };
        for (row, &b) in lp.a_ub.iter().zip(&lp.b_ub) {
            push(row, b, RowKind::Le);
        }
        for (row, &b) in lp.a_eq.iter().zip(&lp.b_eq) {
            push(row, b, RowKind::Eq);
        }
        for (y, cap) in extra_upper {
            let mut out = vec![0.0; n_struct];
            out[y] = 1.0;
            rows.push(out);
            rhs.push(cap);
            kinds.push(RowKind::Le);
        }
        StandardForm { n_struct, cost, rows, rhs, kinds, maps }
    }

    fn recover(&self, y: &[f64]) -> Vec<f64> {
        self.maps
            .iter()
            .map(|(off, terms)| off + terms.iter().map(|&(k, c)| c * y[k]).sum::<f64>())
            .collect()
    }
}

struct Tableau {
    /// Constraint rows, each `n_cols + 1` long (last entry is the rhs).
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
    /// Reduced costs `z_j - c_j`; last entry is the objective value.
    obj: Vec<f64>,
    n_cols: usize,
    art_start: usize,
    n_art: usize,
    banned: Vec<bool>,
}

impl Tableau {
    fn new(std: &StandardForm) -> Self {
        let m = std.rows.len();
        let n_slack = std.kinds.iter().filter(|k| **k != RowKind::Eq).count();
        let n_art = std.kinds.iter().filter(|k| **k != RowKind::Le).count();
        let art_start = std.n_struct + n_slack;
        let n_cols = art_start + n_art;
        let mut rows = Vec::with_capacity(m);
        let mut basis = Vec::with_capacity(m);
        let (mut s, mut a) = (std.n_struct, art_start);
        for (r, row) in std.rows.iter().enumerate() {
            let mut t = vec![0.0; n_cols + 1];
            t[..std.n_struct].copy_from_slice(row);
            t[n_cols] = std.rhs[r];
            match std.kinds[r] {
                RowKind::Le => {
                    t[s] = 1.0;
                    basis.push(s);
                    s += 1;
                }
                RowKind::Ge => {
                    t[s] = -1.0;
                    s += 1;
                    t[a] = 1.0;
                    basis.push(a);
                    a += 1;
                }
                RowKind::Eq => {
                    t[a] = 1.0;
                    basis.push(a);
                    a += 1;
                }
            }
            rows.push(t);
        }
        Tableau {
            rows,
            basis,
            obj: vec![0.0; n_cols + 1],
            n_cols,
            art_start,
            n_art,
            banned: vec![false; n_cols],
        }
    }

    fn is_art(&self, j: usize) -> bool {
        j >= self.art_start
    }

    fn set_objective(&mut self, c: &[f64]) {
        let mut obj = vec![0.0; self.n_cols + 1];
        for (j, v) in obj.iter_mut().enumerate().take(self.n_cols) {
            *v = -c[j];
        }
        for (row, &b) in self.rows.iter().zip(&self.basis) {
            let cb = c[b];
            if cb != 0.0 {
                for (o, t) in obj.iter_mut().zip(row) {
                    *o += cb * t;
                }
            }
        }
        self.obj = obj;
    }

    fn run(
        &mut self,
        opts: &LpOptions,
        iterations: &mut usize,
        dump: &mut String,
        phase2: bool,
    ) -> Result<Outcome> {
        loop {
            // Bland: lowest-index improving column.
            let entering = (0..self.n_cols).find(|&j| {
                !self.banned[j] && !(phase2 && self.is_art(j)) && self.obj[j] < -COST_TOL
            });
            let Some(col) = entering else {
                return Ok(Outcome::Optimal);
            };
            let rhs = self.n_cols;
            let mut leave: Option<(usize, f64)> = None;
            for (r, row) in self.rows.iter().enumerate() {
                let a = row[col];
                if a > PIVOT_TOL {
                    let ratio = row[rhs] / a;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            if ratio < lratio - 1e-12
                                || (ratio <= lratio + 1e-12 && self.basis[r] < self.basis[lr])
                            {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            let Some((row, _)) = leave else {
                return Ok(Outcome::Unbounded);
            };
            self.pivot(row, col);
            *iterations += 1;
            if opts.trace {
                self.dump_into(dump, *iterations, row, col);
            }
            if *iterations > opts.max_iterations {
                return Err(Error::NoConvergence { iterations: *iterations, residual: f64::NAN });
            }
        }
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (v, p) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
                row[c] = 0.0;
            }
        }
        let f = self.obj[c];
        if f != 0.0 {
            for (v, p) in self.obj.iter_mut().zip(&pivot_row) {
                *v -= f * p;
            }
            self.obj[c] = 0.0;
        }
        self.basis[r] = c;
    }

    /// Pivots basic artificials out after phase 1; rows where that is
    /// impossible are redundant and removed.
    fn drive_out_artificials(&mut self) {
        let mut r = 0;
        while r < self.rows.len() {
            if self.is_art(self.basis[r]) {
                let col = (0..self.art_start).find(|&j| self.rows[r][j].abs() > 1e-9);
                match col {
                    Some(j) => {
                        self.pivot(r, j);
                        r += 1;
                    }
                    None => {
                        self.rows.remove(r);
                        self.basis.remove(r);
                    }
                }
            } else {
                r += 1;
            }
        }
        for j in self.art_start..self.n_cols {
            self.banned[j] = true;
        }
    }

    fn primal(&self, n_struct: usize) -> Vec<f64> {
        let mut y = vec![0.0; n_struct];
        for (row, &b) in self.rows.iter().zip(&self.basis) {
            if b < n_struct {
                y[b] = row[self.n_cols].max(0.0);
            }
        }
        y
    }

    fn dump_into(&self, out: &mut String, iteration: usize, row: usize, col: usize) {
        let _ = writeln!(out, "-- iteration {iteration}: pivot row {row}, column {col}");
        let fmt_row = |r: &[f64]| r.iter().map(|v| format!("{v:>10.4}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "obj  | {}", fmt_row(&self.obj));
        for (r, b) in self.rows.iter().zip(&self.basis) {
            let _ = writeln!(out, "x{b:<3} | {}", fmt_row(r));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportSolution {
    /// `flow[(i, j)]`: rate from supply node `i` to demand node `j`.
    pub flow: Matrix,
    pub cost: f64,
}

/// Minimum-cost flow with row sums `supply` and column sums `demand`, using
/// only `support` edges `(i, j)`.
pub fn solve_transportation(
    supply: &[f64],
    demand: &[f64],
    cost: &Matrix,
    support: &[(usize, usize)],
) -> Result<TransportSolution> {
    let (n, m) = (supply.len(), demand.len());
    if cost.rows() != n || cost.cols() != m {
        return Err(Error::InvalidInput(format!(
            "cost matrix is {}x{}, expected {n}x{m}",
            cost.rows(),
            cost.cols()
        )));
    }
    let (ts, td): (f64, f64) = (supply.iter().sum(), demand.iter().sum());
    if (ts - td).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("marginals differ: {ts} vs {td}")));
    }
    if supply.iter().chain(demand).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput("marginals must be finite and nonnegative".into()));
    }
    if support.iter().any(|&(i, j)| i >= n || j >= m) {
        return Err(Error::InvalidInput("support edge out of range".into()));
    }
    let e = support.len();
    let mut lp = LinearProgram::new(e);
    lp.objective = support.iter().map(|&(i, j)| -cost[(i, j)]).collect();
    for (i, &s) in supply.iter().enumerate() {
        let row = support.iter().map(|&(a, _)| if a == i { 1.0 } else { 0.0 }).collect();
        lp.equal(row, s);
    }
    for (j, &d) in demand.iter().enumerate() {
        let row = support.iter().map(|&(_, b)| if b == j { 1.0 } else { 0.0 }).collect();
        lp.equal(row, d);
    }
    let sol = solve_lp(&lp)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => {
            return Err(Error::Infeasible("support cannot carry the marginals".into()))
        }
        LpStatus::Unbounded => unreachable!("transportation with bounded flows"),
    }
    let mut flow = Matrix::zeros(n, m);
    for (&(i, j), &x) in support.iter().zip(&sol.x) {
        flow[(i, j)] = x;
    }
    Ok(TransportSolution { flow, cost: -sol.objective })
}
