//! Exact stationary analysis of the jump chain for small fleets: enumerate
//! every composition of `K` over the supply nodes, build the sparse
//! transition matrix and solve for the stationary law of the recurrent class
//! the chain settles in.

use std::io::Write;
use std::time::Instant;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policies::{DispatchDecision, Dispatcher, PolicySpec};
use crate::simcore::proportional_state;

pub const DEFAULT_STATE_CAP: usize = 2_000_000;
/// Largest recurrent class solved by dense elimination.
pub const DEFAULT_DENSE_LIMIT: usize = 2_000;
pub const STATIONARY_TOL: f64 = 1e-12;

/// All vectors in `N^n` summing to `K`, in lexicographic order, with
/// combinatorial ranking.
#[derive(Clone, Debug)]
pub struct StateSpace {
    n: usize,
    k: u32,
    // count[r][p] = number of compositions of r into p parts.
    count: Vec<Vec<u128>>,
    states: Vec<u32>,
}

/// Number of compositions of `k` into `n` nonnegative parts, `C(k+n-1, n-1)`.
pub fn composition_count(n: usize, k: u32) -> u128 {
    if n == 0 {
        return u128::from(k == 0);
    }
    let (top, r) = (k as u128 + n as u128 - 1, (n - 1) as u128);
    let mut c: u128 = 1;
    for i in 0..r {
        c = c.saturating_mul(top - i) / (i + 1);
    }
    c
}

impl StateSpace {
    pub fn new(n: usize, k: u32, cap: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("state space needs at least one node".into()));
        }
        let size = composition_count(n, k);
        if size > cap as u128 {
            return Err(Error::StateCapExceeded { states: size, cap });
        }
        let mut count = vec![vec![0u128; n + 1]; k as usize + 1];
        for (r, row) in count.iter_mut().enumerate() {
            for (p, c) in row.iter_mut().enumerate() {
                *c = composition_count(p, r as u32);
            }
        }
        let mut states = Vec::with_capacity(size as usize * n);
        let mut cur = vec![0u32; n];
        enumerate(&mut cur, 0, k, &mut states);
        Ok(StateSpace { n, k, count, states })
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn state(&self, idx: usize) -> &[u32] {
        &self.states[idx * self.n..(idx + 1) * self.n]
    }

    pub fn rank(&self, x: &[u32]) -> usize {
        let mut rem = self.k;
        let mut r: u128 = 0;
        for (i, &xi) in x.iter().enumerate().take(self.n - 1) {
            let parts = self.n - i - 1;
            for v in 0..xi {
                r += self.count[(rem - v) as usize][parts];
            }
            rem -= xi;
        }
        r as usize
    }
}

fn enumerate(cur: &mut Vec<u32>, pos: usize, rem: u32, out: &mut Vec<u32>) {
    if pos + 1 == cur.len() {
        cur[pos] = rem;
        out.extend_from_slice(cur);
        return;
    }
    for v in 0..=rem {
        cur[pos] = v;
        enumerate(cur, pos + 1, rem - v, out);
    }
}

/// Sparse row-stochastic transition matrix. Drops are self-loops whose
/// probability is also recorded in `drop_mass`.
#[derive(Clone, Debug)]
pub struct Chain {
    pub space: StateSpace,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub drop_mass: Vec<f64>,
}

impl Chain {
    pub fn row_sum_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.iter().map(|e| e.1).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub fn build_chain(net: &crate::netmodel::Network, policy: &PolicySpec, k: u32) -> Result<Chain> {
    build_chain_with_cap(net, policy, k, DEFAULT_STATE_CAP)
}

pub fn build_chain_with_cap(
    net: &crate::netmodel::Network,
    policy: &PolicySpec,
    k: u32,
    cap: usize,
) -> Result<Chain> {
    let dispatcher = Dispatcher::new(policy, net)?;
    let space = StateSpace::new(net.n_supply(), k, cap)?;
    let phi = net.phi();
    let types: Vec<(usize, usize, f64)> = (0..phi.rows())
        .flat_map(|j| (0..phi.cols()).map(move |d| (j, d)))
        .filter(|&(j, d)| phi[(j, d)] > 0.0)
        .map(|(j, d)| (j, d, phi[(j, d)]))
        .collect();
    let built: Vec<(Vec<(usize, f64)>, f64)> = (0..space.len())
        .into_par_iter()
        .map(|s| {
            let x = space.state(s);
            let mut y = x.to_vec();
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(types.len() + 1);
            let mut drop = 0.0;
            for &(origin, dest, rate) in &types {
                for (decision, p) in dispatcher.decision_distribution(x, origin) {
                    let w = rate * p;
                    match decision {
                        DispatchDecision::Serve(i) => {
                            y[i] -= 1;
                            y[dest] += 1;
                            row.push((space.rank(&y), w));
                            y[dest] -= 1;
                            y[i] += 1;
                        }
                        DispatchDecision::Drop(_) => {
                            row.push((s, w));
                            drop += w;
                        }
                    }
                }
            }
            row.sort_unstable_by_key(|e| e.0);
            row.dedup_by(|b, a| {
                if a.0 == b.0 {
                    a.1 += b.1;
                    true
                } else {
                    false
                }
            });
            (row, drop)
        })
        .collect();
    let (rows, drop_mass) = built.into_iter().unzip();
    Ok(Chain { space, rows, drop_mass })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Dense,
    Power,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainSolution {
    pub k: u32,
    pub states: usize,
    /// Indices of the selected recurrent class.
    pub class_states: Vec<usize>,
    /// Stationary law on `class_states`.
    pub stationary: Vec<f64>,
    pub drop_probability: f64,
    pub recurrent_class_count: usize,
    /// `|| pi P - pi ||_1` on the selected class.
    pub residual: f64,
    pub solver: Solver,
    pub solve_ms: f64,
}

impl ChainSolution {
    /// Stationary probability of a state index, zero off the selected class.
    pub fn probability(&self, state: usize) -> f64 {
        self.class_states.binary_search(&state).map_or(0.0, |p| self.stationary[p])
    }
}

#[derive(Clone, Debug)]
pub struct OracleOptions {
    pub state_cap: usize,
    pub dense_limit: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            state_cap: DEFAULT_STATE_CAP,
            dense_limit: DEFAULT_DENSE_LIMIT,
            max_iterations: 2_000_000,
            tolerance: STATIONARY_TOL,
        }
    }
}

pub fn stationary_drop_probability(
    net: &crate::netmodel::Network,
    policy: &PolicySpec,
    k: u32,
) -> Result<ChainSolution> {
    stationary_drop_probability_with(net, policy, k, &OracleOptions::default())
}

pub fn stationary_drop_probability_with(
    net: &crate::netmodel::Network,
    policy: &PolicySpec,
    k: u32,
    opts: &OracleOptions,
) -> Result<ChainSolution> {
    let started = Instant::now();
    let chain = build_chain_with_cap(net, policy, k, opts.state_cap)?;
    let init = proportional_state(policy.resting_point(net.n_supply()).as_slice(), k);
    let (class, count) = select_recurrent_class(&chain, chain.space.rank(&init));
    let (stationary, solver) = if class.len() <= opts.dense_limit {
        (gth(&chain, &class), Solver::Dense)
    } else {
        (power_iteration(&chain, &class, opts)?, Solver::Power)
    };
    let residual = residual(&chain, &class, &stationary);
    let drop_probability = class
        .iter()
        .zip(&stationary)
        .map(|(&s, &p)| p * chain.drop_mass[s])
        .sum::<f64>()
        .clamp(0.0, 1.0);
    Ok(ChainSolution {
        k,
        states: chain.space.len(),
        class_states: class,
        stationary,
        drop_probability,
        recurrent_class_count: count,
        residual,
        solver,
        solve_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Closed communicating classes; returns the one reached from `start` (the
/// lowest-indexed one if several are reachable) and the total class count.
fn select_recurrent_class(chain: &Chain, start: usize) -> (Vec<usize>, usize) {
    let n = chain.rows.len();
    let mut g = DiGraph::<(), ()>::with_capacity(n, chain.rows.iter().map(Vec::len).sum());
    for _ in 0..n {
        g.add_node(());
    }
    for (s, row) in chain.rows.iter().enumerate() {
        for &(t, p) in row {
            if p > 0.0 && t != s {
                g.add_edge((s as u32).into(), (t as u32).into(), ());
            }
        }
    }
    let sccs = tarjan_scc(&g);
    let mut comp = vec![0usize; n];
    for (c, members) in sccs.iter().enumerate() {
        for v in members {
            comp[v.index()] = c;
        }
    }
    let closed: Vec<bool> = sccs
        .iter()
        .enumerate()
        .map(|(c, members)| {
            members.iter().all(|v| {
                chain.rows[v.index()].iter().all(|&(t, p)| p <= 0.0 || comp[t] == c)
            })
        })
        .collect();
    let count = closed.iter().filter(|&&c| c).count();

    let mut seen = vec![false; n];
    let mut stack = vec![start];
    seen[start] = true;
    let mut reached: Option<usize> = None;
    while let Some(s) = stack.pop() {
        let c = comp[s];
        if closed[c] {
            let lowest = sccs[c].iter().map(|v| v.index()).min().unwrap_or(s);
            let current = reached.map(|r| sccs[r].iter().map(|v| v.index()).min().unwrap_or(0));
            if current.is_none_or(|m| lowest < m) {
                if reached.is_some() {
                    log::warn!("several recurrent classes reachable from the initial state");
                }
                reached = Some(c);
            }
            continue;
        }
        for &(t, p) in &chain.rows[s] {
            if p > 0.0 && !seen[t] {
                seen[t] = true;
                stack.push(t);
            }
        }
    }
    let c = reached.expect("a finite chain always reaches a closed class");
    let mut members: Vec<usize> = sccs[c].iter().map(|v| v.index()).collect();
    members.sort_unstable();
    (members, count)
}

/// Grassmann-Taksar-Heyman elimination on the class's dense transition
/// matrix. Subtraction-free, so tiny probabilities keep relative accuracy.
fn gth(chain: &Chain, class: &[usize]) -> Vec<f64> {
    let s = class.len();
    if s == 1 {
        return vec![1.0];
    }
    let pos = |state: usize| class.binary_search(&state).ok();
    let mut p = vec![0.0; s * s];
    for (a, &st) in class.iter().enumerate() {
        for &(t, w) in &chain.rows[st] {
            if let Some(b) = pos(t) {
                if a != b {
                    p[a * s + b] += w;
                }
            }
        }
    }
    for n in (1..s).rev() {
        let total: f64 = p[n * s..n * s + n].iter().sum();
        for i in 0..n {
            p[i * s + n] /= total;
        }
        for i in 0..n {
            let f = p[i * s + n];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                p[i * s + j] += f * p[n * s + j];
            }
        }
    }
    let mut pi = vec![0.0; s];
    pi[0] = 1.0;
    for j in 1..s {
        pi[j] = (0..j).map(|i| pi[i] * p[i * s + j]).sum();
    }
    let z: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= z);
    pi
}

fn step(chain: &Chain, class: &[usize], pi: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (a, &st) in class.iter().enumerate() {
        for &(t, w) in &chain.rows[st] {
            if let Ok(b) = class.binary_search(&t) {
                out[b] += pi[a] * w;
            }
        }
    }
}

fn residual(chain: &Chain, class: &[usize], pi: &[f64]) -> f64 {
    let mut next = vec![0.0; pi.len()];
    step(chain, class, pi, &mut next);
    next.iter().zip(pi).map(|(a, b)| (a - b).abs()).sum()
}

/// Power iteration on the lazy chain `(I + P) / 2`, which shares the
/// stationary law and is aperiodic.
fn power_iteration(chain: &Chain, class: &[usize], opts: &OracleOptions) -> Result<Vec<f64>> {
    let s = class.len();
    let mut pi = vec![1.0 / s as f64; s];
    let mut next = vec![0.0; s];
    let mut res = f64::INFINITY;
    for it in 0..opts.max_iterations {
        step(chain, class, &pi, &mut next);
        if it % 16 == 0 {
            res = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            if res <= opts.tolerance {
                return Ok(next);
            }
        }
        for (p, q) in pi.iter_mut().zip(&next) {
            *p = 0.5 * (*p + q);
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iterations, residual: res })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: u32,
    pub drop_probability: f64,
    pub states: usize,
    pub solve_ms: f64,
}

pub fn exact_exponent_curve(
    net: &crate::netmodel::Network,
    policy: &PolicySpec,
    ks: &[u32],
) -> Result<Vec<CurvePoint>> {
    ks.iter()
        .map(|&k| {
            let sol = stationary_drop_probability(net, policy, k)?;
            Ok(CurvePoint {
                k,
                drop_probability: sol.drop_probability,
                states: sol.states,
                solve_ms: sol.solve_ms,
            })
        })
        .collect()
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["K", "drop_probability", "states", "solve_ms"])?;
    for p in curve {
        w.write_record([
            p.k.to_string(),
            format!("{:e}", p.drop_probability),
            p.states.to_string(),
            format!("{:.3}", p.solve_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exponent::AlphaVector;
    use crate::generate;

    fn smw_half() -> PolicySpec {
        PolicySpec::Smw { alpha: AlphaVector::uniform(2) }
    }

    #[test]
    fn ranking_is_bijective() {
        for (n, k) in [(1, 5), (2, 7), (3, 6), (4, 5)] {
            let sp = StateSpace::new(n, k, 1_000_000).unwrap();
            assert_eq!(sp.len() as u128, composition_count(n, k));
            for idx in 0..sp.len() {
                assert_eq!(sp.rank(sp.state(idx)), idx);
                assert_eq!(sp.state(idx).iter().sum::<u32>(), k);
            }
        }
    }

    #[test]
    fn cap_is_enforced() {
        assert!(matches!(
            StateSpace::new(6, 40, 1000),
            Err(Error::StateCapExceeded { .. })
        ));
    }

    #[test]
    fn example1_single_unit_rows() {
        let net = generate::example1();
        let chain = build_chain(&net, &smw_half(), 1).unwrap();
        let sp = &chain.space;
        let s10 = sp.rank(&[1, 0]);
        let s01 = sp.rank(&[0, 1]);
        let get = |from: usize, to: usize| {
            chain.rows[from].iter().find(|e| e.0 == to).map_or(0.0, |e| e.1)
        };
        assert!((get(s10, s10) - 5.0 / 8.0).abs() < 1e-15);
        assert!((get(s10, s01) - 3.0 / 8.0).abs() < 1e-15);
        assert!((get(s01, s01) - 3.0 / 4.0).abs() < 1e-15);
        assert!((get(s01, s10) - 1.0 / 4.0).abs() < 1e-15);
        assert!((chain.drop_mass[s01] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn example1_single_unit_drop_probability() {
        let net = generate::example1();
        let sol = stationary_drop_probability(&net, &smw_half(), 1).unwrap();
        assert!((sol.drop_probability - 0.3).abs() < 1e-12);
        let space = StateSpace::new(2, 1, 10).unwrap();
        assert!((sol.probability(space.rank(&[1, 0])) - 0.4).abs() < 1e-12);
        assert!((sol.probability(space.rank(&[0, 1])) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn zero_fleet_absorbs() {
        let net = generate::example1();
        let sol = stationary_drop_probability(&net, &smw_half(), 0).unwrap();
        assert_eq!(sol.states, 1);
        assert_eq!(sol.drop_probability, 1.0);
    }

    #[test]
    fn priority_beats_smw_at_one_unit() {
        let net = generate::example1();
        let prio = PolicySpec::StaticPriority { priority_lists: vec![vec![0], vec![1, 0]] };
        let p = stationary_drop_probability(&net, &prio, 1).unwrap().drop_probability;
        assert!(p <= 0.3 + 1e-12, "{p}");
    }

    #[test]
    fn full_flexibility_never_drops() {
        let net = generate::full_flexibility(2, &[0.1, 0.2, 0.3, 0.4]);
        for k in 1..6 {
            let sol = stationary_drop_probability(&net, &PolicySpec::VanillaMw, k).unwrap();
            assert_eq!(sol.drop_probability, 0.0);
        }
    }

    #[test]
    fn dense_and_power_agree() {
        let net = generate::symmetric_ring(4).unwrap();
        let policy = PolicySpec::VanillaMw;
        let dense = stationary_drop_probability(&net, &policy, 6).unwrap();
        let opts = OracleOptions { dense_limit: 0, ..OracleOptions::default() };
        let power = stationary_drop_probability_with(&net, &policy, 6, &opts).unwrap();
        assert_eq!(power.solver, Solver::Power);
        assert!((dense.drop_probability - power.drop_probability).abs() < 1e-10);
        assert!(dense.residual < 1e-12 && power.residual < 1e-11);
    }

    #[test]
    fn rows_are_stochastic() {
        let net = generate::random_crp(&generate::RandomCrpParams::default(), 3).unwrap();
        let fluid = PolicySpec::fluid(&net, false).unwrap();
        for policy in [PolicySpec::VanillaMw, fluid] {
            let chain = build_chain(&net, &policy, 5).unwrap();
            assert!(chain.row_sum_error() < 1e-12);
        }
    }

    #[test]
    fn heavier_alpha_drops_less() {
        let net = generate::example1();
        let heavy = PolicySpec::Smw { alpha: AlphaVector::new(vec![0.9, 0.1]).unwrap() };
        let a = stationary_drop_probability(&net, &heavy, 40).unwrap().drop_probability;
        let b = stationary_drop_probability(&net, &smw_half(), 40).unwrap().drop_probability;
        assert!(a < b);
    }

    #[test]
    fn curve_is_monotone() {
        let net = generate::example1();
        let ks: Vec<u32> = (1..=6).map(|i| i * 10).collect();
        let curve = exact_exponent_curve(&net, &smw_half(), &ks).unwrap();
        for w in curve.windows(2) {
            assert!(w[1].drop_probability < w[0].drop_probability);
        }
        let mut buf = Vec::new();
        write_curve_csv(&curve, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("K,drop_probability,states,solve_ms\n"));
    }
}
