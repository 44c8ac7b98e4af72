//! Closed-form large-deviations analysis of SMW policies.
//!
//! For a demand subset `J` with supply neighborhood `∂(J)`:
//!
//! ```text
//! lambda_J = sum_{j ∉ J} sum_{k ∈ ∂(J)} phi[j][k]   (max supply inflow into ∂(J))
//! mu_J     = sum_{j ∈ J} sum_{k ∉ ∂(J)} phi[j][k]   (min supply outflow from J)
//! B_J      = sum_{i ∈ ∂(J)} alpha_i
//! gamma(alpha) = min over drainable J (mu_J > 0) of B_J * ln(lambda_J / mu_J)
//! ```
//!
//! The drop probability of SMW(alpha) decays like `exp(-gamma(alpha) K)`.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lpcore::{solve_lp, LinearProgram, LpStatus};
use crate::matrix::Matrix;
use crate::netmodel::{
    bits, mask_to_vec, supply_bits, supply_mask_to_vec, validate_network_with_cap, Network,
    SupplyMask, DEFAULT_SUBSET_CAP,
};

/// Default lower bound on each scaling parameter.
pub const DEFAULT_EPS_FLOOR: f64 = 1e-3;

/// Relative tolerance for declaring two subset contributions tied.
const TIE_REL_TOL: f64 = 1e-9;

/// SMW scaling parameters: a strictly positive point of the simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AlphaVector(Vec<f64>);

impl AlphaVector {
    /// Accepts an already-normalized positive vector.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::InvalidInput("scaling parameters must be positive".into()));
        }
        let s: f64 = alpha.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("scaling parameters sum to {s}, not 1")));
        }
        Ok(AlphaVector(alpha))
    }

    /// Divides positive weights by their sum.
    pub fn normalized(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::InvalidInput("scaling weights must be positive".into()));
        }
        let s: f64 = weights.iter().sum();
        Ok(AlphaVector(weights.iter().map(|w| w / s).collect()))
    }

    pub fn uniform(n: usize) -> Self {
        AlphaVector(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `B_S = sum_{i in S} alpha_i`.
    pub fn mass(&self, supply: SupplyMask) -> f64 {
        supply_bits(supply).map(|i| self.0[i]).sum()
    }

    pub fn check_floor(&self, floor: f64) -> Result<()> {
        if self.min() < floor - 1e-15 {
            return Err(Error::InvalidInput(format!(
                "scaling parameter {} below floor {floor}",
                self.min()
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for AlphaVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        AlphaVector::normalized(&v)
    }
}

impl From<AlphaVector> for Vec<f64> {
    fn from(a: AlphaVector) -> Self {
        a.0
    }
}

/// One drainable demand subset and its rate quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub subset: Vec<usize>,
    pub boundary: Vec<usize>,
    pub lambda: f64,
    pub mu: f64,
    pub log_ratio: f64,
    #[serde(skip)]
    pub(crate) subset_mask: u64,
    #[serde(skip)]
    pub(crate) boundary_mask: SupplyMask,
}

impl SubsetStats {
    pub fn boundary_mask(&self) -> SupplyMask {
        self.boundary_mask
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetContribution {
    #[serde(flatten)]
    pub stats: SubsetStats,
    #[serde(rename = "B")]
    pub b: f64,
    pub contribution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentResult {
    /// `inf` when no subset is drainable.
    #[serde(with = "crate::serde_inf")]
    pub gamma: f64,
    /// All minimizing subsets, lexicographically sorted.
    pub critical_subsets: Vec<Vec<usize>>,
    pub per_subset: Vec<SubsetContribution>,
}

impl ExponentResult {
    pub fn is_infinite(&self) -> bool {
        self.gamma.is_infinite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePath {
    pub critical_subset: Vec<usize>,
    pub f_star: Matrix,
    pub drain_time: f64,
    pub kl_rate: f64,
}

/// Every nonempty strict demand subset from which customers leave the
/// subset's neighborhood (`mu_J > 0`).
pub fn drainable_subsets(net: &Network) -> Result<Vec<SubsetStats>> {
    drainable_subsets_with_cap(net, DEFAULT_SUBSET_CAP)
}

pub fn drainable_subsets_with_cap(net: &Network, cap: usize) -> Result<Vec<SubsetStats>> {
    let phi = net.phi();
    let (m, n) = (net.n_demand(), net.n_supply());
    let mut out = Vec::new();
    net.for_each_strict_subset(cap, |subset, boundary| {
        let mut lambda = 0.0;
        let mut mu = 0.0;
        for j in 0..m {
            let inside = subset >> j & 1 == 1;
            let row = phi.row(j);
            for (k, &v) in row.iter().enumerate().take(n) {
                let in_boundary = boundary >> k & 1 == 1;
                if inside && !in_boundary {
                    mu += v;
                } else if !inside && in_boundary {
                    lambda += v;
                }
            }
        }
        if mu > 0.0 {
            out.push(SubsetStats {
                subset: mask_to_vec(subset),
                boundary: supply_mask_to_vec(boundary),
                lambda,
                mu,
                log_ratio: (lambda / mu).ln(),
                subset_mask: subset,
                boundary_mask: boundary,
            });
        }
    })?;
    Ok(out)
}

fn require_crp(net: &Network) -> Result<()> {
    let report = validate_network_with_cap(net, DEFAULT_SUBSET_CAP)?;
    if !report.crp_holds {
        let worst = report.violating_subsets.first().cloned().expect("violation listed");
        return Err(Error::CrpViolated { subset: worst.subset, slack: worst.slack });
    }
    Ok(())
}

fn check_alpha(net: &Network, alpha: &AlphaVector) -> Result<()> {
    if alpha.len() != net.n_supply() {
        return Err(Error::InvalidInput(format!(
            "alpha has {} entries for {} supply nodes",
            alpha.len(),
            net.n_supply()
        )));
    }
    Ok(())
}

/// Evaluates the exponent over precomputed drainable subsets.
pub fn gamma_from_stats(stats: &[SubsetStats], alpha: &AlphaVector) -> ExponentResult {
    let per_subset: Vec<SubsetContribution> = stats
        .iter()
        .map(|s| {
            let b = alpha.mass(s.boundary_mask);
            SubsetContribution { stats: s.clone(), b, contribution: b * s.log_ratio }
        })
        .collect();
    let gamma = per_subset.iter().map(|c| c.contribution).fold(f64::INFINITY, f64::min);
    let mut critical: Vec<Vec<usize>> = if gamma.is_finite() {
        let tol = TIE_REL_TOL * gamma.abs().max(f64::MIN_POSITIVE);
        per_subset
            .iter()
            .filter(|c| c.contribution <= gamma + tol)
            .map(|c| c.stats.subset.clone())
            .collect()
    } else {
        Vec::new()
    };
    critical.sort();
    ExponentResult { gamma, critical_subsets: critical, per_subset }
}

/// Only the minimum, without building the per-subset table.
pub fn gamma_value(stats: &[SubsetStats], alpha: &AlphaVector) -> f64 {
    stats.iter().map(|s| alpha.mass(s.boundary_mask) * s.log_ratio).fold(f64::INFINITY, f64::min)
}

/// Demand-drop exponent of SMW(alpha). Requires complete resource pooling.
pub fn gamma(net: &Network, alpha: &AlphaVector) -> Result<ExponentResult> {
    check_alpha(net, alpha)?;
    require_crp(net)?;
    let stats = drainable_subsets(net)?;
    Ok(gamma_from_stats(&stats, alpha))
}

/// Keeps, for each distinct neighborhood, the smallest log-ratio: only that
/// one can bind in `max_alpha min_J B_J log_ratio_J`.
fn binding_constraints(stats: &[SubsetStats]) -> Vec<(SupplyMask, f64)> {
    let mut best: HashMap<SupplyMask, f64> = HashMap::new();
    for s in stats {
        best.entry(s.boundary_mask)
            .and_modify(|r| *r = r.min(s.log_ratio))
            .or_insert(s.log_ratio);
    }
    let mut v: Vec<(SupplyMask, f64)> = best.into_iter().collect();
    v.sort_by_key(|a| a.0);
    v
}

/// Solves `max t` s.t. `t <= log_ratio_J * B_J` for all drainable `J`,
/// `sum(alpha) = 1`, `alpha >= floor`. `floor = 0` gives the supremum.
fn maximize_exponent(n: usize, stats: &[SubsetStats], floor: f64) -> Result<(Vec<f64>, f64)> {
    let mut lp = LinearProgram::new(n + 1);
    let mut c = vec![0.0; n + 1];
    c[n] = 1.0;
    lp.objective = c;
    for i in 0..n {
        lp.bounds(i, floor, f64::INFINITY);
    }
    lp.bounds(n, f64::NEG_INFINITY, f64::INFINITY);
    for (mask, r) in binding_constraints(stats) {
        let mut row = vec![0.0; n + 1];
        for i in supply_bits(mask) {
            row[i] = -r;
        }
        row[n] = 1.0;
        lp.le(row, 0.0);
    }
    let mut sum = vec![1.0; n + 1];
    sum[n] = 0.0;
    lp.equal(sum, 1.0);
    let sol = solve_lp(&lp)?;
    match sol.status {
        LpStatus::Optimal => Ok((sol.x[..n].to_vec(), sol.x[n])),
        LpStatus::Infeasible => Err(Error::Infeasible("optimal-alpha program".into())),
        LpStatus::Unbounded => Err(Error::Unbounded("optimal-alpha program".into())),
    }
}

/// Exponent-optimal scaling vector with every entry at least `eps_floor`.
pub fn optimal_alpha(net: &Network, eps_floor: f64) -> Result<(AlphaVector, ExponentResult)> {
    let n = net.n_supply();
    if !(eps_floor > 0.0 && eps_floor < 1.0 / n as f64) {
        return Err(Error::InvalidInput(format!("eps_floor {eps_floor} outside (0, 1/{n})")));
    }
    require_crp(net)?;
    let stats = drainable_subsets(net)?;
    if stats.is_empty() {
        let alpha = AlphaVector::uniform(n);
        let res = gamma_from_stats(&stats, &alpha);
        return Ok((alpha, res));
    }
    let (x, _) = maximize_exponent(n, &stats, eps_floor)?;
    let clamped: Vec<f64> = x.iter().map(|v| v.max(eps_floor)).collect();
    let alpha = AlphaVector::normalized(&clamped)?;
    let res = gamma_from_stats(&stats, &alpha);
    Ok((alpha, res))
}

/// `sup_alpha gamma(alpha)` over the closed simplex.
pub fn gamma_star(net: &Network) -> Result<f64> {
    require_crp(net)?;
    let stats = drainable_subsets(net)?;
    if stats.is_empty() {
        return Ok(f64::INFINITY);
    }
    Ok(maximize_exponent(net.n_supply(), &stats, 0.0)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaBound {
    pub gamma_vanilla: f64,
    pub gamma_star: f64,
    pub ratio: f64,
    /// `gamma_vanilla >= gamma_star / n - 1e-9`.
    pub holds: bool,
}

/// Compares uniform scaling against the optimum.
pub fn vanilla_bound_check(net: &Network) -> Result<VanillaBound> {
    let n = net.n_supply();
    let gv = gamma(net, &AlphaVector::uniform(n))?.gamma;
    let gs = gamma_star(net)?;
    let ratio = if gs.is_infinite() { 1.0 } else { gv / gs };
    let holds = gs.is_infinite() || gv >= gs / n as f64 - 1e-9;
    Ok(VanillaBound { gamma_vanilla: gv, gamma_star: gs, ratio, holds })
}

/// Twisted arrival matrix draining the lexicographically smallest critical
/// subset `J*`: flows out of `J*`'s neighborhood are scaled by
/// `lambda/mu`, flows into it by `mu/lambda`.
pub fn most_likely_path(net: &Network, alpha: &AlphaVector) -> Result<RatePath> {
    let res = gamma(net, alpha)?;
    let Some(critical) = res.critical_subsets.first() else {
        return Err(Error::InvalidInput("no drainable subset: exponent is infinite".into()));
    };
    let c = res
        .per_subset
        .iter()
        .find(|c| &c.stats.subset == critical)
        .expect("critical subset present");
    let s = &c.stats;
    let (lambda, mu) = (s.lambda, s.mu);
    let phi = net.phi();
    let mut f = phi.clone();
    for j in 0..net.n_demand() {
        let inside = s.subset_mask >> j & 1 == 1;
        for k in 0..net.n_supply() {
            let in_boundary = s.boundary_mask >> k & 1 == 1;
            if inside && !in_boundary {
                f[(j, k)] = phi[(j, k)] * lambda / mu;
            } else if !inside && in_boundary {
                f[(j, k)] = phi[(j, k)] * mu / lambda;
            }
        }
    }
    let kl = kl_rate(&f, phi);
    Ok(RatePath {
        critical_subset: critical.clone(),
        f_star: f,
        drain_time: c.b / (lambda - mu),
        kl_rate: kl,
    })
}

/// Kullback-Leibler divergence of arrival matrix `f` from `phi`; infinite
/// when `f` is not a distribution or puts mass where `phi` has none.
pub fn kl_rate(f: &Matrix, phi: &Matrix) -> f64 {
    if f.rows() != phi.rows() || f.cols() != phi.cols() {
        return f64::INFINITY;
    }
    let fs = f.as_slice();
    if fs.iter().any(|v| !v.is_finite() || *v < 0.0) || (f.sum() - 1.0).abs() > 1e-9 {
        return f64::INFINITY;
    }
    let mut total = 0.0;
    for (&a, &p) in fs.iter().zip(phi.as_slice()) {
        if a == 0.0 {
            continue;
        }
        if p <= 0.0 {
            return f64::INFINITY;
        }
        total += a * (a / p).ln();
    }
    total.max(0.0)
}

/// `1 - min_i x_i / alpha_i` without simplex checks.
pub fn lyapunov_value(alpha: &AlphaVector, x: &[f64]) -> f64 {
    1.0 - x.iter().zip(alpha.as_slice()).map(|(xi, ai)| xi / ai).fold(f64::INFINITY, f64::min)
}

/// Lyapunov function centered at `alpha`: zero at `alpha`, one on the
/// simplex boundary.
pub fn lyapunov(alpha: &AlphaVector, x: &[f64]) -> Result<f64> {
    if x.len() != alpha.len() {
        return Err(Error::InvalidInput("state and alpha lengths differ".into()));
    }
    let s: f64 = x.iter().sum();
    if x.iter().any(|v| !v.is_finite() || *v < -1e-9) || (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput("state is not on the simplex".into()));
    }
    Ok(lyapunov_value(alpha, x))
}

/// Smallest growth rate of the Lyapunov function from `alpha` under arrival
/// rates `f`, minimized over all fractional assignments `d` (a linear program).
pub fn min_drift_speed(net: &Network, alpha: &AlphaVector, f: &Matrix) -> Result<f64> {
    check_alpha(net, alpha)?;
    let (m, n) = (net.n_demand(), net.n_supply());
    if f.rows() != m || f.cols() != n {
        return Err(Error::InvalidInput("arrival matrix shape mismatch".into()));
    }
    if f.as_slice().iter().any(|v| !v.is_finite() || *v < 0.0) || (f.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput("arrival matrix must be a distribution".into()));
    }
    let origin_rate = f.row_sums();
    let inflow = f.col_sums();
    let edges = net.edges();
    let e = edges.len();
    let t = e;
    let mut lp = LinearProgram::new(e + 1);
    lp.objective[t] = -1.0;
    lp.bounds(t, f64::NEG_INFINITY, f64::INFINITY);
    let a = alpha.as_slice();
    for i in 0..n {
        // outflow_i / alpha_i - t <= inflow_i / alpha_i
        let mut row = vec![0.0; e + 1];
        for (idx, &(s, j)) in edges.iter().enumerate() {
            if s == i {
                row[idx] = origin_rate[j] / a[i];
            }
        }
        row[t] = -1.0;
        lp.le(row, inflow[i] / a[i]);
    }
    for j in 0..m {
        let row = (0..=e).map(|idx| if idx < e && edges[idx].1 == j { 1.0 } else { 0.0 }).collect();
        lp.equal(row, 1.0);
    }
    let sol = solve_lp(&lp)?;
    match sol.status {
        LpStatus::Optimal => Ok(sol.x[t]),
        LpStatus::Infeasible => Err(Error::Infeasible("drift-speed program".into())),
        LpStatus::Unbounded => Err(Error::Unbounded("drift-speed program".into())),
    }
}

/// CSV table with columns `subset, boundary, lambda, mu, B, contribution`.
pub fn write_subset_table<W: Write>(res: &ExponentResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subset", "boundary", "lambda", "mu", "B", "contribution"])?;
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
    for c in &res.per_subset {
        w.write_record([
            join(&c.stats.subset),
            join(&c.stats.boundary),
            c.stats.lambda.to_string(),
            c.stats.mu.to_string(),
            c.b.to_string(),
            c.contribution.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Demand subset bitmask of a stats entry, for callers outside the crate.
pub fn subset_members(stats: &SubsetStats) -> impl Iterator<Item = usize> {
    bits(stats.subset_mask)
}
