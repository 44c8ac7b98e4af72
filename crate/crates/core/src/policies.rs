//! Dispatch rules: given the free-supply vector and an arriving customer's
//! origin, pick a compatible supply node or drop the customer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exponent::AlphaVector;
use crate::lpcore::{solve_lp, solve_transportation, LinearProgram, LpStatus};
use crate::matrix::Matrix;
use crate::netmodel::Network;

/// Relative slack under which two scaled queue lengths count as tied.
const TIE_REL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Every queue the policy may draw from is empty.
    NoCompatibleSupply,
    /// The policy chose not to serve although it could have.
    PolicyDeclined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchDecision {
    Serve(usize),
    Drop(DropReason),
}

impl DispatchDecision {
    pub fn source(self) -> Option<usize> {
        match self {
            DispatchDecision::Serve(i) => Some(i),
            DispatchDecision::Drop(_) => None,
        }
    }

    pub fn is_drop(self) -> bool {
        matches!(self, DispatchDecision::Drop(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Smw { alpha: AlphaVector },
    VanillaMw,
    /// Per demand node, an ordering of its compatible supply nodes.
    StaticPriority { priority_lists: Vec<Vec<usize>> },
    /// `flow_table[(i, j)]`: dispatch rate from supply `i` to demand `j`;
    /// dispatch probability is that rate over the arrival rate at `j`.
    FluidRandom { flow_table: Matrix },
    /// Penalizes pickup time: `argmax x_i / alpha_i - beta * pickup[i][j]`.
    SmwPickup { alpha: AlphaVector, beta: f64 },
}

impl PolicySpec {
    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::Smw { .. } => "smw",
            PolicySpec::VanillaMw => "vanilla_mw",
            PolicySpec::StaticPriority { .. } => "static_priority",
            PolicySpec::FluidRandom { .. } => "fluid_random",
            PolicySpec::SmwPickup { .. } => "smw_pickup",
        }
    }

    /// Drops only when every compatible queue is empty.
    pub fn is_non_idling(&self) -> bool {
        !matches!(self, PolicySpec::FluidRandom { .. })
    }

    /// Resting point used for the default initial state.
    pub fn resting_point(&self, n: usize) -> AlphaVector {
        match self {
            PolicySpec::Smw { alpha } | PolicySpec::SmwPickup { alpha, .. } => alpha.clone(),
            _ => AlphaVector::uniform(n),
        }
    }

    /// Fluid benchmark from the transportation problem, optionally
    /// minimizing total pickup time.
    pub fn fluid(net: &Network, pickup_costs: bool) -> Result<PolicySpec> {
        Ok(PolicySpec::FluidRandom { flow_table: fluid_flow_table(net, pickup_costs)? })
    }
}

/// Transportation solution moving supply return rates to demand rates over
/// the compatibility edges.
pub fn fluid_flow_table(net: &Network, pickup_costs: bool) -> Result<Matrix> {
    let (n, m) = (net.n_supply(), net.n_demand());
    let mut cost = Matrix::zeros(n, m);
    if pickup_costs {
        let p = net
            .pickup_time()
            .ok_or_else(|| Error::InvalidPolicy("pickup costs need a pickup_time matrix".into()))?;
        for i in 0..n {
            for j in 0..m {
                cost[(i, j)] = p[(i, net.demand_zone(j))];
            }
        }
    }
    Ok(solve_transportation(net.supply_rates(), net.demand_rates(), &cost, net.edges())?.flow)
}

/// Largest servable flow when the transportation problem is infeasible:
/// maximize total dispatch rate with each supply node sending at most its
/// return rate and each demand node receiving at most its arrival rate.
/// The unserved remainder becomes declined probability mass.
pub fn max_served_flow_table(net: &Network) -> Result<Matrix> {
    let edges = net.edges();
    let mut lp = LinearProgram::new(edges.len()).maximize(vec![1.0; edges.len()]);
    for (i, &cap) in net.supply_rates().iter().enumerate() {
        lp.le(edges.iter().map(|&(a, _)| f64::from(u8::from(a == i))).collect(), cap);
    }
    for (j, &cap) in net.demand_rates().iter().enumerate() {
        lp.le(edges.iter().map(|&(_, b)| f64::from(u8::from(b == j))).collect(), cap);
    }
    let sol = solve_lp(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::Infeasible("max-flow relaxation".into()));
    }
    let mut x = Matrix::zeros(net.n_supply(), net.n_demand());
    for (e, &(i, j)) in edges.iter().enumerate() {
        x[(i, j)] = sol.x[e].max(0.0);
    }
    Ok(x)
}

/// Scaled MaxWeight: the compatible node with the largest `x_i / alpha_i`,
/// ties to the highest index; drop when all compatible queues are empty.
/// Ignores the destination.
pub fn smw_dispatch(state: &[u32], alpha: &[f64], origin: usize, net: &Network) -> DispatchDecision {
    let mut best: Option<(usize, f64)> = None;
    for &i in net.demand_neighbors(origin) {
        if state[i] == 0 {
            continue;
        }
        let score = state[i] as f64 / alpha[i];
        best = match best {
            Some((_, b)) if score < b - TIE_REL_TOL * b.abs() => best,
            _ => Some((i, score)),
        };
    }
    match best {
        Some((i, _)) => DispatchDecision::Serve(i),
        None => DispatchDecision::Drop(DropReason::NoCompatibleSupply),
    }
}

pub fn vanilla_dispatch(state: &[u32], origin: usize, net: &Network) -> DispatchDecision {
    let uniform = vec![1.0; net.n_supply()];
    smw_dispatch(state, &uniform, origin, net)
}

/// First nonempty node in the origin's priority list.
pub fn priority_dispatch(state: &[u32], list: &[usize]) -> DispatchDecision {
    list.iter()
        .find(|&&i| state[i] > 0)
        .map_or(DispatchDecision::Drop(DropReason::NoCompatibleSupply), |&i| {
            DispatchDecision::Serve(i)
        })
}

/// State-independent randomized dispatch. `choices` lists `(node, prob)`;
/// leftover probability mass declines the customer. Only the sampled node's
/// queue is probed; when it is empty the customer is dropped even if other
/// compatible nodes hold supply.
pub fn fluid_dispatch<R: Rng + ?Sized>(
    mut probe: impl FnMut(usize) -> u32,
    choices: &[(usize, f64)],
    rng: &mut R,
) -> DispatchDecision {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, p) in choices {
        acc += p;
        if u < acc {
            return if probe(i) > 0 {
                DispatchDecision::Serve(i)
            } else {
                DispatchDecision::Drop(DropReason::NoCompatibleSupply)
            };
        }
    }
    DispatchDecision::Drop(DropReason::PolicyDeclined)
}

/// Pickup-aware SMW over compatible nodes with free supply.
pub fn smw_pickup_dispatch(
    state: &[u32],
    alpha: &[f64],
    beta: f64,
    pickup: &Matrix,
    origin: usize,
    net: &Network,
) -> DispatchDecision {
    let zone = net.demand_zone(origin);
    let mut best: Option<(usize, f64)> = None;
    for &i in net.demand_neighbors(origin) {
        if state[i] == 0 {
            continue;
        }
        let score = state[i] as f64 / alpha[i] - beta * pickup[(i, zone)];
        best = match best {
            Some((_, b)) if score < b - TIE_REL_TOL * b.abs().max(1.0) => best,
            _ => Some((i, score)),
        };
    }
    match best {
        Some((i, _)) => DispatchDecision::Serve(i),
        None => DispatchDecision::Drop(DropReason::NoCompatibleSupply),
    }
}

#[derive(Clone, Debug)]
enum Compiled {
    Smw { alpha: Vec<f64> },
    Priority { lists: Vec<Vec<usize>> },
    Fluid { choices: Vec<Vec<(usize, f64)>> },
    SmwPickup { alpha: Vec<f64>, beta: f64, pickup: Matrix },
}

/// A policy bound to a network, with its payload validated once.
#[derive(Clone, Debug)]
pub struct Dispatcher<'a> {
    net: &'a Network,
    spec: PolicySpec,
    compiled: Compiled,
}

impl<'a> Dispatcher<'a> {
    pub fn new(spec: &PolicySpec, net: &'a Network) -> Result<Self> {
        let n = net.n_supply();
        let m = net.n_demand();
        let check_alpha = |a: &AlphaVector| {
            if a.len() != n {
                Err(Error::InvalidPolicy(format!("alpha has {} entries, expected {n}", a.len())))
            } else {
                Ok(a.as_slice().to_vec())
            }
        };
        let compiled = match spec {
            PolicySpec::Smw { alpha } => Compiled::Smw { alpha: check_alpha(alpha)? },
            PolicySpec::VanillaMw => Compiled::Smw { alpha: vec![1.0 / n as f64; n] },
            PolicySpec::StaticPriority { priority_lists } => {
                if priority_lists.len() != m {
                    return Err(Error::InvalidPolicy(format!(
                        "{} priority lists for {m} demand nodes",
                        priority_lists.len()
                    )));
                }
                for (j, list) in priority_lists.iter().enumerate() {
                    let mut sorted = list.clone();
                    sorted.sort_unstable();
                    if sorted != net.demand_neighbors(j) {
                        return Err(Error::InvalidPolicy(format!(
                            "priority list {list:?} is not an ordering of the neighbors of demand node {j}"
                        )));
                    }
                }
                Compiled::Priority { lists: priority_lists.clone() }
            }
            PolicySpec::FluidRandom { flow_table } => {
                if flow_table.rows() != n || flow_table.cols() != m {
                    return Err(Error::InvalidPolicy("flow table must be n_supply x n_demand".into()));
                }
                let rates = net.demand_rates();
                let mut choices = Vec::with_capacity(m);
                for j in 0..m {
                    let mut row = Vec::new();
                    let mut total = 0.0;
                    for i in 0..n {
                        let x = flow_table[(i, j)];
                        if !x.is_finite() || x < -1e-12 {
                            return Err(Error::InvalidPolicy("flow table entries must be nonnegative".into()));
                        }
                        if x > 0.0 {
                            if !net.is_compatible(i, j) {
                                return Err(Error::InvalidPolicy(format!(
                                    "flow on incompatible pair ({i}, {j})"
                                )));
                            }
                            row.push((i, x / rates[j]));
                            total += x;
                        }
                    }
                    if total > rates[j] * (1.0 + 1e-9) + 1e-12 {
                        return Err(Error::InvalidPolicy(format!(
                            "dispatch probabilities at demand node {j} sum above one"
                        )));
                    }
                    choices.push(row);
                }
                Compiled::Fluid { choices }
            }
            PolicySpec::SmwPickup { alpha, beta } => {
                if !(beta.is_finite() && *beta >= 0.0) {
                    return Err(Error::InvalidPolicy("beta must be finite and nonnegative".into()));
                }
                let pickup = net
                    .pickup_time()
                    .ok_or_else(|| Error::InvalidPolicy("smw_pickup needs a pickup_time matrix".into()))?
                    .clone();
                Compiled::SmwPickup { alpha: check_alpha(alpha)?, beta: *beta, pickup }
            }
        };
        Ok(Dispatcher { net, spec: spec.clone(), compiled })
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    pub fn is_randomized(&self) -> bool {
        matches!(self.compiled, Compiled::Fluid { .. })
    }

    pub fn dispatch<R: Rng + ?Sized>(&self, state: &[u32], origin: usize, rng: &mut R) -> DispatchDecision {
        match &self.compiled {
            Compiled::Smw { alpha } => smw_dispatch(state, alpha, origin, self.net),
            Compiled::Priority { lists } => priority_dispatch(state, &lists[origin]),
            Compiled::Fluid { choices } => fluid_dispatch(|i| state[i], &choices[origin], rng),
            Compiled::SmwPickup { alpha, beta, pickup } => {
                smw_pickup_dispatch(state, alpha, *beta, pickup, origin, self.net)
            }
        }
    }

    /// Exact distribution of the decision, for chain construction.
    pub fn decision_distribution(&self, state: &[u32], origin: usize) -> Vec<(DispatchDecision, f64)> {
        match &self.compiled {
            Compiled::Fluid { choices } => {
                let mut out = Vec::with_capacity(choices[origin].len() + 1);
                let mut drop = 0.0;
                let mut served = 0.0;
                for &(i, p) in &choices[origin] {
                    served += p;
                    if state[i] > 0 {
                        out.push((DispatchDecision::Serve(i), p));
                    } else {
                        drop += p;
                    }
                }
                drop += (1.0 - served).max(0.0);
                if drop > 0.0 {
                    out.push((DispatchDecision::Drop(DropReason::PolicyDeclined), drop));
                }
                out
            }
            _ => {
                let mut never = NoRng;
                vec![(self.dispatch(state, origin, &mut never), 1.0)]
            }
        }
    }
}

/// Deterministic policies never draw; this guards that assumption.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("deterministic policy drew a random number")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("deterministic policy drew a random number")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("deterministic policy drew a random number")
    }
}

/// Every compatible queue of `origin` is empty.
pub fn compatible_all_empty(net: &Network, state: &[u32], origin: usize) -> bool {
    net.demand_neighbors(origin).iter().all(|&i| state[i] == 0)
}
