//! Simulation-based search over SMW scaling vectors (and the pickup penalty
//! `beta`) by the cross-entropy method with a Dirichlet sampler.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exponent::{AlphaVector, DEFAULT_EPS_FLOOR};
use crate::netmodel::Network;
use crate::policies::PolicySpec;
use crate::rng::{derive_seed, stream};
use crate::simcore::{
    pooled_drop_fraction, run_jump_chain_stream, run_timed_stream, InitState, JumpConfig,
    SimReport, TimedConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    SteadyDrop,
    TransientDrop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatorKind {
    Jump,
    Timed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub objective: Objective,
    pub simulator: SimulatorKind,
    /// Total candidate evaluations.
    pub budget: usize,
    pub replications: u64,
    /// Fleet size (`K` for the jump chain, `K_tot` for timed runs).
    pub k: u32,
    /// Jump-chain steps per replication.
    pub steps: u64,
    pub horizon_minutes: f64,
    pub total_rate: f64,
    pub with_pickup: bool,
    /// Starting states for the transient objective.
    pub initial_states: Vec<Vec<u32>>,
    pub seed: u64,
    pub population: usize,
    pub elite_fraction: f64,
    pub max_iterations: usize,
    pub eps_floor: f64,
    /// Weight of the new fit when updating the sampler.
    pub smoothing: f64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            objective: Objective::SteadyDrop,
            simulator: SimulatorKind::Jump,
            budget: 400,
            replications: 2,
            k: 10,
            steps: 20_000,
            horizon_minutes: 600.0,
            total_rate: 1.0,
            with_pickup: false,
            initial_states: Vec::new(),
            seed: 0,
            population: 40,
            elite_fraction: 0.2,
            max_iterations: 100,
            eps_floor: DEFAULT_EPS_FLOOR,
            smoothing: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub candidate: usize,
    pub alpha: Vec<f64>,
    pub beta: Option<f64>,
    pub mean_drop: f64,
    pub stderr: f64,
    pub best_so_far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub alpha: AlphaVector,
    pub beta: Option<f64>,
    pub objective: f64,
    pub stderr: f64,
    pub trace: Vec<TraceRow>,
}

struct Sampler {
    conc: Vec<f64>,
    log_beta_mean: f64,
    log_beta_sd: f64,
}

impl Sampler {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, floor: f64, tune_beta: bool) -> (Vec<f64>, Option<f64>) {
        let n = self.conc.len();
        let g: Vec<f64> = self
            .conc
            .iter()
            .map(|&c| Gamma::new(c, 1.0).expect("positive shape").sample(rng))
            .collect();
        let total: f64 = g.iter().sum();
        let p: Vec<f64> = if total > 0.0 {
            g.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / n as f64; n]
        };
        let beta = tune_beta.then(|| {
            let z: f64 = StandardNormal.sample(rng);
            (self.log_beta_mean + self.log_beta_sd * z).exp()
        });
        (to_alpha(&p, floor), beta)
    }

    fn refit(&mut self, elites: &[(Vec<f64>, Option<f64>)], floor: f64, w: f64) {
        let n = self.conc.len();
        let e = elites.len() as f64;
        // Back out the simplex point before the floor was applied.
        let pts: Vec<Vec<f64>> = elites
            .iter()
            .map(|(a, _)| a.iter().map(|v| (v - floor) / (1.0 - n as f64 * floor)).collect())
            .collect();
        let mean: Vec<f64> = (0..n).map(|i| pts.iter().map(|p| p[i]).sum::<f64>() / e).collect();
        let mut precision = Vec::new();
        for i in 0..n {
            let var = pts.iter().map(|p| (p[i] - mean[i]).powi(2)).sum::<f64>() / e;
            if var > 1e-12 {
                precision.push(mean[i] * (1.0 - mean[i]) / var - 1.0);
            }
        }
        let s = if precision.is_empty() {
            1e4
        } else {
            (precision.iter().sum::<f64>() / precision.len() as f64).clamp(1.0, 1e4)
        };
        for (c, m) in self.conc.iter_mut().zip(&mean) {
            *c = (w * s * m.max(1e-6) + (1.0 - w) * *c).max(1e-3);
        }
        let logs: Vec<f64> = elites.iter().filter_map(|(_, b)| b.map(|b| b.max(1e-12).ln())).collect();
        if !logs.is_empty() {
            let m = logs.iter().sum::<f64>() / logs.len() as f64;
            let sd = (logs.iter().map(|l| (l - m).powi(2)).sum::<f64>() / logs.len() as f64).sqrt();
            self.log_beta_mean = w * m + (1.0 - w) * self.log_beta_mean;
            self.log_beta_sd = (w * sd + (1.0 - w) * self.log_beta_sd).max(1e-3);
        }
    }
}

fn to_alpha(p: &[f64], floor: f64) -> Vec<f64> {
    let n = p.len() as f64;
    p.iter().map(|v| floor + (1.0 - n * floor) * v).collect()
}

fn check(net: &Network, cfg: &TuneConfig) -> Result<()> {
    let n = net.n_supply();
    if cfg.population == 0 || cfg.budget < cfg.population {
        return Err(Error::InvalidInput("budget must be at least the population size".into()));
    }
    if cfg.replications == 0 {
        return Err(Error::InvalidInput("replications must be at least 1".into()));
    }
    if !(cfg.elite_fraction > 0.0 && cfg.elite_fraction <= 1.0) {
        return Err(Error::InvalidInput("elite fraction must lie in (0, 1]".into()));
    }
    if !(cfg.eps_floor > 0.0 && cfg.eps_floor * (n as f64) < 1.0) {
        return Err(Error::InvalidInput(format!("eps_floor must lie in (0, 1/{n})")));
    }
    if !(cfg.smoothing > 0.0 && cfg.smoothing <= 1.0) {
        return Err(Error::InvalidInput("smoothing must lie in (0, 1]".into()));
    }
    if cfg.objective == Objective::TransientDrop && cfg.initial_states.is_empty() {
        return Err(Error::InvalidInput("transient objective needs initial states".into()));
    }
    Ok(())
}

/// Mean drop fraction over replications (and initial states for the
/// transient objective). Replication `r` always uses stream `r` of `seed`,
/// so candidates sharing a seed see common random numbers.
pub fn evaluate(net: &Network, policy: &PolicySpec, cfg: &TuneConfig, seed: u64) -> Result<(f64, f64)> {
    let inits: Vec<InitState> = match cfg.objective {
        Objective::SteadyDrop => vec![InitState::ProportionalToAlpha],
        Objective::TransientDrop => {
            cfg.initial_states.iter().cloned().map(InitState::Explicit).collect()
        }
    };
    let warmup_off = cfg.objective == Objective::TransientDrop;
    let mut reports: Vec<SimReport> = Vec::new();
    for init in inits {
        for r in 0..cfg.replications {
            let rep = match cfg.simulator {
                SimulatorKind::Jump => {
                    let mut jc = JumpConfig::new(cfg.k, cfg.steps);
                    jc.init = init.clone();
                    if warmup_off {
                        jc.warmup = Some(0);
                    }
                    run_jump_chain_stream(net, policy, &jc, seed, r)?
                }
                SimulatorKind::Timed => {
                    let mut tc = TimedConfig::new(cfg.total_rate, cfg.horizon_minutes, cfg.k);
                    tc.init = init.clone();
                    tc.with_pickup = cfg.with_pickup;
                    if warmup_off {
                        tc.warmup_fraction = Some(0.0);
                    }
                    run_timed_stream(net, policy, &tc, seed, r)?
                }
            };
            reports.push(rep);
        }
    }
    Ok(pooled_drop_fraction(&reports))
}

fn policy_for(alpha: &[f64], beta: Option<f64>) -> Result<PolicySpec> {
    let alpha = AlphaVector::new(alpha.to_vec()).or_else(|_| AlphaVector::normalized(alpha))?;
    Ok(match beta {
        Some(beta) => PolicySpec::SmwPickup { alpha, beta },
        None => PolicySpec::Smw { alpha },
    })
}

pub fn tune(net: &Network, cfg: &TuneConfig, tune_beta: bool) -> Result<TuneResult> {
    check(net, cfg)?;
    let n = net.n_supply();
    let mut sampler = Sampler { conc: vec![1.0; n], log_beta_mean: 0.1f64.ln(), log_beta_sd: 1.0 };
    let n_elite = ((cfg.population as f64 * cfg.elite_fraction).ceil() as usize).max(1);
    let mut trace = Vec::new();
    let mut best: Option<(Vec<f64>, Option<f64>, f64, f64)> = None;
    let mut used = 0;
    let mut iteration = 0;

    while used + cfg.population <= cfg.budget && iteration < cfg.max_iterations {
        let iter_seed = derive_seed(&[cfg.seed, iteration as u64]);
        let mut rng = stream(derive_seed(&[cfg.seed, iteration as u64, 1]), 0);
        let mut cands: Vec<(Vec<f64>, Option<f64>)> =
            (0..cfg.population).map(|_| sampler.draw(&mut rng, cfg.eps_floor, tune_beta)).collect();
        if iteration == 0 {
            // Vanilla MaxWeight is in the family; always try it.
            cands[0] = (vec![1.0 / n as f64; n], tune_beta.then_some(0.0));
        }
        let scores: Vec<(f64, f64)> = cands
            .par_iter()
            .map(|(a, b)| evaluate(net, &policy_for(a, *b)?, cfg, iter_seed))
            .collect::<Result<_>>()?;
        used += cfg.population;

        for (c, ((alpha, beta), &(mean, se))) in cands.iter().zip(&scores).enumerate() {
            if mean.is_finite() && best.as_ref().is_none_or(|b| mean < b.2) {
                best = Some((alpha.clone(), *beta, mean, se));
            }
            trace.push(TraceRow {
                iteration,
                candidate: c,
                alpha: alpha.clone(),
                beta: *beta,
                mean_drop: mean,
                stderr: se,
                best_so_far: best.as_ref().map_or(f64::INFINITY, |b| b.2),
            });
        }

        let mut order: Vec<usize> = (0..cands.len()).filter(|&i| scores[i].0.is_finite()).collect();
        order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0).then(a.cmp(&b)));
        let elites: Vec<(Vec<f64>, Option<f64>)> =
            order.iter().take(n_elite).map(|&i| cands[i].clone()).collect();
        if !elites.is_empty() {
            sampler.refit(&elites, cfg.eps_floor, cfg.smoothing);
        }
        iteration += 1;
    }

    let (alpha, beta, objective, stderr) = best.ok_or(Error::NoFiniteObjective)?;
    Ok(TuneResult { alpha: AlphaVector::normalized(&alpha)?, beta, objective, stderr, trace })
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = trace.first().map_or(0, |r| r.alpha.len());
    let mut header = vec!["iteration".to_string(), "candidate".to_string()];
    header.extend((0..n).map(|i| format!("alpha_{i}")));
    header.extend(["beta", "mean_drop", "stderr", "best_so_far"].map(String::from));
    w.write_record(&header)?;
    for r in trace {
        let mut rec = vec![r.iteration.to_string(), r.candidate.to_string()];
        rec.extend(r.alpha.iter().map(|a| a.to_string()));
        rec.push(r.beta.map_or(String::new(), |b| b.to_string()));
        rec.push(r.mean_drop.to_string());
        rec.push(r.stderr.to_string());
        rec.push(r.best_so_far.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
