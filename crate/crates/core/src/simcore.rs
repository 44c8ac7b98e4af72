//! Simulators: the discrete-time jump chain (one arrival per step) and a
//! timed event-driven variant with deterministic trip and pickup delays.
//! Also fleet sizing and semilog exponent fits.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lpcore::solve_transportation;
use crate::matrix::Matrix;
use crate::netmodel::Network;
use crate::policies::{compatible_all_empty, DispatchDecision, Dispatcher, PolicySpec};
use crate::rng::{stream, SimRng};

pub const DEFAULT_JUMP_WARMUP: f64 = 0.1;
pub const DEFAULT_TIMED_WARMUP: f64 = 0.2;
const DEFAULT_BATCHES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitState {
    /// Largest-remainder rounding of `K * alpha`, alpha being the policy's
    /// resting point (uniform for policies without one).
    ProportionalToAlpha,
    Explicit(Vec<u32>),
}

impl InitState {
    pub fn resolve(&self, policy: &PolicySpec, n: usize, k: u32) -> Result<Vec<u32>> {
        match self {
            InitState::ProportionalToAlpha => {
                Ok(proportional_state(policy.resting_point(n).as_slice(), k))
            }
            InitState::Explicit(v) => {
                if v.len() != n {
                    return Err(Error::InvalidInput(format!(
                        "initial state has {} entries, expected {n}",
                        v.len()
                    )));
                }
                let total: u64 = v.iter().map(|&x| x as u64).sum();
                if total != k as u64 {
                    return Err(Error::InvalidInput(format!(
                        "initial state holds {total} units, expected {k}"
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

/// Rounds `k * weights` to integers summing to `k` by largest remainders;
/// remainder ties go to the lower index.
pub fn proportional_state(weights: &[f64], k: u32) -> Vec<u32> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * k as f64).collect();
    let mut out: Vec<u32> = exact.iter().map(|x| x.floor() as u32).collect();
    let assigned: u32 = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(k.saturating_sub(assigned) as usize) {
        out[i] += 1;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpConfig {
    pub k: u32,
    pub steps: u64,
    /// Steps discarded before collecting statistics; `None` means 10%.
    pub warmup: Option<u64>,
    pub init: InitState,
}

impl JumpConfig {
    pub fn new(k: u32, steps: u64) -> Self {
        JumpConfig { k, steps, warmup: None, init: InitState::ProportionalToAlpha }
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup.unwrap_or((self.steps as f64 * DEFAULT_JUMP_WARMUP) as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedConfig {
    /// Arrivals per minute; scales the normalized rates.
    pub total_rate: f64,
    pub horizon_minutes: f64,
    pub k_tot: u32,
    /// Fraction of the horizon discarded; `None` means 20%.
    pub warmup_fraction: Option<f64>,
    pub init: InitState,
    pub with_pickup: bool,
}

impl TimedConfig {
    pub fn new(total_rate: f64, horizon_minutes: f64, k_tot: u32) -> Self {
        TimedConfig {
            total_rate,
            horizon_minutes,
            k_tot,
            warmup_fraction: None,
            init: InitState::ProportionalToAlpha,
            with_pickup: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedStats {
    pub horizon_minutes: f64,
    pub warmup_minutes: f64,
    pub events: u64,
    /// Time-average number of units in transit after warmup.
    pub mean_in_transit: f64,
    /// Average trip duration (pickup plus travel) of dispatches after warmup.
    pub mean_trip_time: f64,
    /// Served customers per minute after warmup.
    pub throughput: f64,
    pub conservation_violations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: String,
    /// `K` in jump mode, `K_tot` in timed mode.
    pub k: u32,
    pub seed: u64,
    pub replication: u64,
    pub arrivals: u64,
    pub drops: u64,
    /// `drops / arrivals`; NaN when nothing arrived.
    pub drop_fraction: f64,
    /// Batch-means standard error of the drop fraction.
    pub stderr: f64,
    pub arrivals_by_origin: Vec<u64>,
    pub drops_by_origin: Vec<u64>,
    pub drop_fraction_by_origin: Vec<f64>,
    /// Time-average of `queues / K`.
    pub occupancy_mean: Vec<f64>,
    pub warmup_steps: u64,
    /// Drops of a non-idling policy while a compatible queue was nonempty.
    pub idling_violations: u64,
    pub wall_ms: f64,
    pub timed: Option<TimedStats>,
}

struct Tally {
    arrivals: u64,
    drops: u64,
    arrivals_by_origin: Vec<u64>,
    drops_by_origin: Vec<u64>,
    batch_arrivals: Vec<u64>,
    batch_drops: Vec<u64>,
    idling_violations: u64,
}

impl Tally {
    fn new(m: usize, batches: usize) -> Self {
        Tally {
            arrivals: 0,
            drops: 0,
            arrivals_by_origin: vec![0; m],
            drops_by_origin: vec![0; m],
            batch_arrivals: vec![0; batches],
            batch_drops: vec![0; batches],
            idling_violations: 0,
        }
    }

    fn record(&mut self, origin: usize, batch: usize, dropped: bool) {
        self.arrivals += 1;
        self.arrivals_by_origin[origin] += 1;
        self.batch_arrivals[batch] += 1;
        if dropped {
            self.drops += 1;
            self.drops_by_origin[origin] += 1;
            self.batch_drops[batch] += 1;
        }
    }

    fn stderr(&self) -> f64 {
        let fr: Vec<f64> = self
            .batch_arrivals
            .iter()
            .zip(&self.batch_drops)
            .filter(|(&a, _)| a > 0)
            .map(|(&a, &d)| d as f64 / a as f64)
            .collect();
        let b = fr.len();
        if b < 2 {
            return f64::NAN;
        }
        let mean = fr.iter().sum::<f64>() / b as f64;
        let var = fr.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
        (var / b as f64).sqrt()
    }

    #[allow(clippy::too_many_arguments)]
    fn report(
        self,
        policy: &PolicySpec,
        k: u32,
        seed: u64,
        replication: u64,
        occupancy_mean: Vec<f64>,
        warmup_steps: u64,
        started: Instant,
        timed: Option<TimedStats>,
    ) -> SimReport {
        let stderr = self.stderr();
        let ratio = |d: u64, a: u64| if a == 0 { f64::NAN } else { d as f64 / a as f64 };
        SimReport {
            policy: policy.name().to_string(),
            k,
            seed,
            replication,
            arrivals: self.arrivals,
            drops: self.drops,
            drop_fraction: ratio(self.drops, self.arrivals),
            stderr,
            drop_fraction_by_origin: self
                .arrivals_by_origin
                .iter()
                .zip(&self.drops_by_origin)
                .map(|(&a, &d)| ratio(d, a))
                .collect(),
            arrivals_by_origin: self.arrivals_by_origin,
            drops_by_origin: self.drops_by_origin,
            occupancy_mean,
            warmup_steps,
            idling_violations: self.idling_violations,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            timed,
        }
    }
}

/// Alias table over positive entries of a rate matrix, returning `(origin, destination)`.
struct TypeSampler {
    alias: WeightedAliasIndex<f64>,
    types: Vec<(usize, usize)>,
}

impl TypeSampler {
    fn new(phi: &Matrix) -> Result<Self> {
        let mut weights = Vec::new();
        let mut types = Vec::new();
        for j in 0..phi.rows() {
            for k in 0..phi.cols() {
                if phi[(j, k)] > 0.0 {
                    weights.push(phi[(j, k)]);
                    types.push((j, k));
                }
            }
        }
        let alias = WeightedAliasIndex::new(weights)
            .map_err(|e| Error::InvalidInput(format!("arrival rates: {e}")))?;
        Ok(TypeSampler { alias, types })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        self.types[self.alias.sample(rng)]
    }
}

/// Simulates the jump chain with stream 0 of `seed`.
pub fn run_jump_chain(net: &Network, policy: &PolicySpec, cfg: &JumpConfig, seed: u64) -> Result<SimReport> {
    run_jump_chain_stream(net, policy, cfg, seed, 0)
}

pub fn run_jump_chain_stream(
    net: &Network,
    policy: &PolicySpec,
    cfg: &JumpConfig,
    seed: u64,
    replication: u64,
) -> Result<SimReport> {
    let started = Instant::now();
    let dispatcher = Dispatcher::new(policy, net)?;
    let n = net.n_supply();
    let warmup = cfg.warmup_steps();
    if warmup > cfg.steps {
        return Err(Error::InvalidInput(format!(
            "warmup ({warmup}) exceeds the number of steps ({})",
            cfg.steps
        )));
    }
    let mut state = cfg.init.resolve(policy, n, cfg.k)?;
    let sampler = TypeSampler::new(net.phi())?;
    let mut rng = stream(seed, replication);
    let audit = policy.is_non_idling();
    let measured = cfg.steps - warmup;
    let batches = DEFAULT_BATCHES.min(measured.max(1) as usize);
    let batch_len = measured.div_ceil(batches as u64).max(1);
    let mut tally = Tally::new(net.n_demand(), batches);
    let mut occupancy = vec![0u64; n];

    for step in 0..cfg.steps {
        let (origin, dest) = sampler.sample(&mut rng);
        let decision = dispatcher.dispatch(&state, origin, &mut rng);
        let collect = step >= warmup;
        if collect && audit && decision.is_drop() != compatible_all_empty(net, &state, origin) {
            tally.idling_violations += 1;
        }
        if let DispatchDecision::Serve(i) = decision {
            state[i] -= 1;
            state[dest] += 1;
        }
        debug_assert_eq!(state.iter().map(|&x| x as u64).sum::<u64>(), cfg.k as u64);
        if collect {
            let batch = ((step - warmup) / batch_len) as usize;
            tally.record(origin, batch, decision.is_drop());
            for (acc, &x) in occupancy.iter_mut().zip(&state) {
                *acc += x as u64;
            }
        }
    }
    let denom = measured as f64 * cfg.k.max(1) as f64;
    let occupancy_mean = occupancy
        .iter()
        .map(|&s| if measured == 0 { f64::NAN } else { s as f64 / denom })
        .collect();
    Ok(tally.report(policy, cfg.k, seed, replication, occupancy_mean, warmup, started, None))
}

/// Independent replications on streams `0..reps` of `seed`, in parallel.
pub fn run_jump_replications(
    net: &Network,
    policy: &PolicySpec,
    cfg: &JumpConfig,
    seed: u64,
    reps: u64,
) -> Result<Vec<SimReport>> {
    (0..reps)
        .into_par_iter()
        .map(|r| run_jump_chain_stream(net, policy, cfg, seed, r))
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct Return {
    time: f64,
    seq: u64,
    node: usize,
}

impl PartialEq for Return {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Return {}

impl PartialOrd for Return {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Return {
    // Reversed so the max-heap pops the earliest return first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

pub fn run_timed(net: &Network, policy: &PolicySpec, cfg: &TimedConfig, seed: u64) -> Result<SimReport> {
    run_timed_stream(net, policy, cfg, seed, 0)
}

pub fn run_timed_stream(
    net: &Network,
    policy: &PolicySpec,
    cfg: &TimedConfig,
    seed: u64,
    replication: u64,
) -> Result<SimReport> {
    let started = Instant::now();
    if !(cfg.total_rate.is_finite() && cfg.total_rate > 0.0) {
        return Err(Error::InvalidInput("total_rate must be positive".into()));
    }
    if !(cfg.horizon_minutes.is_finite() && cfg.horizon_minutes >= 0.0) {
        return Err(Error::InvalidInput("horizon must be finite and nonnegative".into()));
    }
    let warmup_fraction = cfg.warmup_fraction.unwrap_or(DEFAULT_TIMED_WARMUP);
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err(Error::InvalidInput("warmup fraction must lie in [0, 1)".into()));
    }
    let travel = net
        .travel_time()
        .ok_or_else(|| Error::InvalidInput("timed mode needs a travel_time matrix".into()))?;
    let pickup = if cfg.with_pickup {
        Some(net.pickup_time().ok_or_else(|| {
            Error::InvalidInput("pickup mode needs a pickup_time matrix".into())
        })?)
    } else {
        if matches!(policy, PolicySpec::SmwPickup { .. }) {
            return Err(Error::InvalidPolicy("smw_pickup requires pickup mode".into()));
        }
        None
    };
    let dispatcher = Dispatcher::new(policy, net)?;
    let n = net.n_supply();
    let k_tot = cfg.k_tot as usize;
    let mut queues = cfg.init.resolve(policy, n, cfg.k_tot)?;
    let sampler = TypeSampler::new(net.phi())?;
    let mut rng: SimRng = stream(seed, replication);
    let audit = policy.is_non_idling();

    let horizon = cfg.horizon_minutes;
    let warmup_t = horizon * warmup_fraction;
    let window = horizon - warmup_t;
    let batches = DEFAULT_BATCHES;
    let mut tally = Tally::new(net.n_demand(), batches);
    let mut transit: BinaryHeap<Return> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut events = 0u64;
    let mut violations = 0u64;
    let mut occ_integral = vec![0.0; n];
    let mut transit_integral = 0.0;
    let mut trip_sum = 0.0;
    let mut served = 0u64;
    let mut clock = 0.0;

    // Accumulates time-weighted state over [clock, t] clipped to the window.
    let mut advance = |clock: &mut f64, t: f64, queues: &[u32], in_transit: usize| {
        let lo = clock.max(warmup_t);
        if t > lo {
            let dt = t - lo;
            for (acc, &q) in occ_integral.iter_mut().zip(queues) {
                *acc += q as f64 * dt;
            }
            transit_integral += in_transit as f64 * dt;
        }
        *clock = t;
    };

    loop {
        let gap: f64 = Exp1.sample(&mut rng);
        let t_arrival = clock + gap / cfg.total_rate;
        let stop = t_arrival > horizon;
        let limit = if stop { horizon } else { t_arrival };
        while transit.peek().is_some_and(|r| r.time <= limit) {
            let r = transit.pop().expect("peeked");
            advance(&mut clock, r.time, &queues, transit.len() + 1);
            queues[r.node] += 1;
            events += 1;
            if conservation_broken(&queues, transit.len(), k_tot) {
                violations += 1;
            }
        }
        if stop {
            advance(&mut clock, horizon, &queues, transit.len());
            break;
        }
        advance(&mut clock, t_arrival, &queues, transit.len());
        events += 1;
        let (origin, dest) = sampler.sample(&mut rng);
        let decision = dispatcher.dispatch(&queues, origin, &mut rng);
        let collect = clock >= warmup_t;
        if collect && audit && decision.is_drop() != compatible_all_empty(net, &queues, origin) {
            tally.idling_violations += 1;
        }
        if let DispatchDecision::Serve(i) = decision {
            let zone = net.demand_zone(origin);
            let trip = pickup.map_or(0.0, |p| p[(i, zone)]) + travel[(zone, dest)];
            queues[i] -= 1;
            seq += 1;
            transit.push(Return { time: clock + trip, seq, node: dest });
            if collect {
                trip_sum += trip;
                served += 1;
            }
        }
        if conservation_broken(&queues, transit.len(), k_tot) {
            violations += 1;
        }
        if collect {
            let batch = (((clock - warmup_t) / window * batches as f64) as usize).min(batches - 1);
            tally.record(origin, batch, decision.is_drop());
        }
    }

    let norm = window * cfg.k_tot.max(1) as f64;
    let occupancy_mean =
        occ_integral.iter().map(|&s| if window > 0.0 { s / norm } else { f64::NAN }).collect();
    let stats = TimedStats {
        horizon_minutes: horizon,
        warmup_minutes: warmup_t,
        events,
        mean_in_transit: if window > 0.0 { transit_integral / window } else { f64::NAN },
        mean_trip_time: if served > 0 { trip_sum / served as f64 } else { f64::NAN },
        throughput: if window > 0.0 { served as f64 / window } else { f64::NAN },
        conservation_violations: violations,
    };
    Ok(tally.report(policy, cfg.k_tot, seed, replication, occupancy_mean, 0, started, Some(stats)))
}

fn conservation_broken(queues: &[u32], in_transit: usize, k_tot: usize) -> bool {
    let total = queues.iter().map(|&q| q as usize).sum::<usize>() + in_transit;
    debug_assert_eq!(total, k_tot, "supply conservation violated");
    total != k_tot
}

pub fn run_timed_replications(
    net: &Network,
    policy: &PolicySpec,
    cfg: &TimedConfig,
    seed: u64,
    reps: u64,
) -> Result<Vec<SimReport>> {
    (0..reps)
        .into_par_iter()
        .map(|r| run_timed_stream(net, policy, cfg, seed, r))
        .collect()
}

/// Pooled drop fraction over replications with the across-replication
/// standard error (batch-means error for a single replication).
pub fn pooled_drop_fraction(reports: &[SimReport]) -> (f64, f64) {
    let arrivals: u64 = reports.iter().map(|r| r.arrivals).sum();
    let drops: u64 = reports.iter().map(|r| r.drops).sum();
    let mean = if arrivals == 0 { f64::NAN } else { drops as f64 / arrivals as f64 };
    let stderr = match reports {
        [] => f64::NAN,
        [one] => one.stderr,
        many => {
            let fr: Vec<f64> = many.iter().map(|r| r.drop_fraction).filter(|x| x.is_finite()).collect();
            let b = fr.len() as f64;
            let m = fr.iter().sum::<f64>() / b;
            (fr.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b - 1.0) / b).sqrt()
        }
    };
    (mean, stderr)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetRequirement {
    pub k_in_transit: f64,
    pub k_pickup: f64,
    pub k_fl: u64,
}

/// Vehicles busy carrying the fluid workload (Little's law), plus those busy
/// on pickups under the pickup-minimizing transportation plan.
pub fn fleet_requirement(net: &Network, total_rate: f64) -> Result<FleetRequirement> {
    if !(total_rate.is_finite() && total_rate > 0.0) {
        return Err(Error::InvalidInput("total_rate must be positive".into()));
    }
    let travel = net
        .travel_time()
        .ok_or_else(|| Error::InvalidInput("fleet sizing needs a travel_time matrix".into()))?;
    let phi = net.phi();
    let mut transit = 0.0;
    for j in 0..net.n_demand() {
        let z = net.demand_zone(j);
        for k in 0..net.n_supply() {
            transit += phi[(j, k)] * travel[(z, k)];
        }
    }
    let k_in_transit = total_rate * transit;
    let k_pickup = match net.pickup_time() {
        None => 0.0,
        Some(p) => {
            let mut cost = Matrix::zeros(net.n_supply(), net.n_demand());
            for i in 0..net.n_supply() {
                for j in 0..net.n_demand() {
                    cost[(i, j)] = p[(i, net.demand_zone(j))];
                }
            }
            let plan = solve_transportation(net.supply_rates(), net.demand_rates(), &cost, net.edges())?;
            total_rate * plan.cost
        }
    };
    let k_fl = (k_in_transit + k_pickup - 1e-9).ceil().max(0.0) as u64;
    Ok(FleetRequirement { k_in_transit, k_pickup, k_fl })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points_used: usize,
}

/// Least-squares fit of `-ln p` against `K`. Points with `p = 0` are
/// censored and skipped with a warning.
pub fn estimate_exponent(curve: &[(f64, f64)]) -> Result<ExponentFit> {
    let mut pts = Vec::with_capacity(curve.len());
    for &(k, p) in curve {
        if p == 0.0 {
            log::warn!("drop probability 0 at K = {k}; point excluded from the fit");
            continue;
        }
        if !(p > 0.0 && p <= 1.0) || !k.is_finite() {
            return Err(Error::InvalidInput(format!("invalid curve point ({k}, {p})")));
        }
        pts.push((k, -p.ln()));
    }
    if pts.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 uncensored points, got {}",
            pts.len()
        )));
    }
    let len = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / len;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / len;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("curve needs at least two distinct K values".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(ExponentFit { slope, intercept: my - slope * mx, r_squared, points_used: pts.len() })
}
