use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use smw_core::chainoracle::{
    composition_count, exact_exponent_curve, stationary_drop_probability, write_curve_csv,
    DEFAULT_STATE_CAP,
};
use smw_core::exponent::{gamma, most_likely_path, optimal_alpha};
use smw_core::generate::{self, CityParams, RandomCrpParams};
use smw_core::netmodel::validate_network;
use smw_core::rng::{derive_seed, stream};
use smw_core::simcore::{
    estimate_exponent, fleet_requirement, pooled_drop_fraction, run_jump_chain_stream,
    run_timed_stream, InitState, JumpConfig, SimReport, TimedConfig,
};
use smw_core::tuner::{tune, write_trace_csv, TuneConfig};
use smw_core::{AlphaVector, Error, NetworkFile, PolicySpec};

use crate::config::{
    config_hash, load_network, read_json, resolve_relative, InitialStates, Mode, PolicyEntry,
    SweepConfig, TransientConfig,
};
use crate::output::{join, num, sink};
use crate::{Cli, Command, GenerateKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 1: input error, 2: modeling assumption violated, 3: runtime failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e {
                Error::CrpViolated { .. } => 2,
                Error::Infeasible(_)
                | Error::Unbounded(_)
                | Error::NoConvergence { .. }
                | Error::NoFiniteObjective => 3,
                _ => 1,
            },
            CliError::Input(_) | CliError::Usage(_) => 1,
            CliError::Io(_) | CliError::Csv(_) => 3,
        }
    }
}

pub fn run(cli: &Cli) -> Result<u8, CliError> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Validate { network } => validate(network, out),
        Command::Gamma { network, alpha, optimal } => {
            gamma_table(network, alpha.as_deref(), *optimal, cli.eps_floor, out)
        }
        Command::Sweep { config } => sweep(config, cli, out),
        Command::Generate { kind, n, eta, edge_prob, sparsity, rows, cols } => {
            let net = match kind {
                GenerateKind::Example1 => generate::example1(),
                GenerateKind::SymmetricRing => generate::symmetric_ring(*n)?,
                GenerateKind::RandomCrp => {
                    let params = RandomCrpParams {
                        n: *n,
                        edge_prob: *edge_prob,
                        sparsity: *sparsity,
                        eta: *eta,
                        ..RandomCrpParams::default()
                    };
                    generate::random_crp(&params, cli.seed)?
                }
                GenerateKind::SyntheticCity => {
                    let params = CityParams {
                        rows: *rows,
                        cols: *cols,
                        eta: eta.unwrap_or(CityParams::default().eta),
                        ..CityParams::default()
                    };
                    generate::synthetic_city(&params, cli.seed)?
                }
            };
            write_json(&net.to_file(), out)?;
            Ok(0)
        }
        Command::Transient { config } => transient(config, cli, out),
        Command::Tune { network, config, tune_beta, trace } => {
            let net = load_network(network, None)?;
            let mut cfg: TuneConfig = match config {
                Some(p) => read_json(p)?,
                None => TuneConfig::default(),
            };
            cfg.seed = cli.seed;
            cfg.eps_floor = cli.eps_floor;
            let res = tune(&net, &cfg, *tune_beta)?;
            if let Some(path) = trace {
                write_trace_csv(&res.trace, sink(Some(path))?)?;
            }
            #[derive(Serialize)]
            struct Summary<'a> {
                alpha: &'a [f64],
                beta: Option<f64>,
                objective: f64,
                stderr: f64,
                evaluations: usize,
                config_hash: String,
            }
            write_json(
                &Summary {
                    alpha: res.alpha.as_slice(),
                    beta: res.beta,
                    objective: res.objective,
                    stderr: res.stderr,
                    evaluations: res.trace.len(),
                    config_hash: config_hash(&(&net.to_file(), &cfg, tune_beta)),
                },
                out,
            )?;
            Ok(0)
        }
        Command::Fleet { network, rate } => {
            let net = load_network(network, None)?;
            write_json(&fleet_requirement(&net, *rate)?, out)?;
            Ok(0)
        }
        Command::Exact { network, policy, ks } => {
            let net = load_network(network, None)?;
            let (_, spec) = PolicyEntry::parse(policy)?.resolve(&net, cli.eps_floor)?;
            let curve = exact_exponent_curve(&net, &spec, ks)?;
            write_curve_csv(&curve, sink(out)?)?;
            Ok(0)
        }
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn validate(path: &Path, out: Option<&Path>) -> Result<u8, CliError> {
    let net = load_network(path, None)?;
    let report = validate_network(&net)?;
    write_json(&report, out)?;
    if report.crp_holds {
        Ok(0)
    } else {
        if let Some(worst) = report.violating_subsets.first() {
            eprintln!(
                "complete resource pooling fails: demand subset {:?} has slack {}",
                worst.subset, worst.slack
            );
        }
        Ok(2)
    }
}

fn gamma_table(
    path: &Path,
    alpha: Option<&[f64]>,
    optimal: bool,
    eps_floor: f64,
    out: Option<&Path>,
) -> Result<u8, CliError> {
    let net = load_network(path, None)?;
    let n = net.n_supply();
    let (alpha, res) = if optimal {
        optimal_alpha(&net, eps_floor)?
    } else {
        let alpha = match alpha {
            Some(a) => AlphaVector::new(a.to_vec())?,
            None => AlphaVector::uniform(n),
        };
        let res = gamma(&net, &alpha)?;
        (alpha, res)
    };
    let mut w = csv::Writer::from_writer(sink(out)?);
    w.write_record(["kind", "subset", "boundary", "lambda", "mu", "log_ratio", "B", "value"])?;
    for c in &res.per_subset {
        w.write_record([
            "subset".to_string(),
            join(&c.stats.subset, ";"),
            join(&c.stats.boundary, ";"),
            num(c.stats.lambda),
            num(c.stats.mu),
            num(c.stats.log_ratio),
            num(c.b),
            num(c.contribution),
        ])?;
    }
    let critical: Vec<String> = res.critical_subsets.iter().map(|s| join(s, ";")).collect();
    w.write_record(["gamma", &critical.join("|"), "", "", "", "", "", &num(res.gamma)])?;
    for (i, a) in alpha.as_slice().iter().enumerate() {
        w.write_record(["alpha", &i.to_string(), "", "", "", "", "", &num(*a)])?;
    }
    if optimal && !res.is_infinite() {
        let path = most_likely_path(&net, &alpha)?;
        let crit = join(&path.critical_subset, ";");
        w.write_record(["drain_time", &crit, "", "", "", "", "", &num(path.drain_time)])?;
        w.write_record(["kl_rate", &crit, "", "", "", "", "", &num(path.kl_rate)])?;
        for j in 0..path.f_star.rows() {
            for k in 0..path.f_star.cols() {
                let v = path.f_star[(j, k)];
                if v > 0.0 {
                    w.write_record(["f_star", &j.to_string(), &k.to_string(), "", "", "", "", &num(v)])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(0)
}

const SWEEP_HEADER: [&str; 14] = [
    "kind", "policy", "K", "K_slack", "seed", "arrivals", "drops", "drop_fraction", "stderr", "slope",
    "r_squared", "wall_ms", "config_hash", "error",
];

#[derive(Default)]
struct Row {
    kind: &'static str,
    policy: String,
    k: Option<u32>,
    slack: Option<u32>,
    seed: Option<u64>,
    arrivals: Option<u64>,
    drops: Option<u64>,
    drop_fraction: f64,
    stderr: f64,
    slope: f64,
    r_squared: f64,
    wall_ms: f64,
    hash: String,
    error: String,
}

impl Row {
    fn new(kind: &'static str, policy: &str) -> Self {
        Row {
            kind,
            policy: policy.to_string(),
            drop_fraction: f64::NAN,
            stderr: f64::NAN,
            slope: f64::NAN,
            r_squared: f64::NAN,
            wall_ms: f64::NAN,
            ..Row::default()
        }
    }

    fn record(&self) -> Vec<String> {
        let opt = |v: Option<u64>| v.map_or(String::new(), |x| x.to_string());
        vec![
            self.kind.to_string(),
            self.policy.clone(),
            opt(self.k.map(u64::from)),
            opt(self.slack.map(u64::from)),
            opt(self.seed),
            opt(self.arrivals),
            opt(self.drops),
            num(self.drop_fraction),
            num(self.stderr),
            num(self.slope),
            num(self.r_squared),
            if self.wall_ms.is_nan() { String::new() } else { format!("{:.3}", self.wall_ms) },
            self.hash.clone(),
            self.error.clone(),
        ]
    }
}

#[derive(Serialize)]
struct CellKey<'a> {
    network: &'a NetworkFile,
    policy: &'a PolicySpec,
    mode: Mode,
    k: u32,
    steps: u64,
    warmup: Option<u64>,
    total_rate: f64,
    horizon_minutes: f64,
    warmup_fraction: Option<f64>,
    with_pickup: bool,
}

fn sweep(config: &Path, cli: &Cli, out: Option<&Path>) -> Result<u8, CliError> {
    let cfg: SweepConfig = read_json(config)?;
    if cfg.k.is_empty() || cfg.policies.is_empty() {
        return Err(CliError::Input("sweep needs at least one policy and one K".into()));
    }
    let net = load_network(&resolve_relative(config, &cfg.network), cfg.eta)?;
    let file = net.to_file();
    let seeds = if cfg.seeds.is_empty() { vec![cli.seed] } else { cfg.seeds.clone() };
    let policies: Vec<(String, PolicySpec)> = cfg
        .policies
        .iter()
        .map(|p| p.resolve(&net, cli.eps_floor))
        .collect::<Result<_, _>>()?;
    let base = if cfg.k_slack {
        if cfg.mode != Mode::Timed {
            return Err(CliError::Usage("k_slack needs timed mode".into()));
        }
        fleet_requirement(&net, cfg.total_rate)?.k_fl as u32
    } else {
        0
    };

    let mut cells = Vec::new();
    for (pi, _) in policies.iter().enumerate() {
        for &k in &cfg.k {
            for &seed in &seeds {
                cells.push((pi, k, seed));
            }
        }
    }
    let results: Vec<Result<SimReport, Error>> = cells
        .par_iter()
        .map(|&(pi, k, seed)| {
            let spec = &policies[pi].1;
            match cfg.mode {
                Mode::Jump => {
                    let mut jc = JumpConfig::new(base + k, cfg.steps);
                    jc.warmup = cfg.warmup;
                    run_jump_chain_stream(&net, spec, &jc, seed, 0)
                }
                Mode::Timed => {
                    let mut tc = TimedConfig::new(cfg.total_rate, cfg.horizon_minutes, base + k);
                    tc.warmup_fraction = cfg.warmup_fraction;
                    tc.with_pickup = cfg.with_pickup;
                    run_timed_stream(&net, spec, &tc, seed, 0)
                }
            }
        })
        .collect();

    let hash_for = |spec: &PolicySpec, k: u32| {
        config_hash(&CellKey {
            network: &file,
            policy: spec,
            mode: cfg.mode,
            k,
            steps: cfg.steps,
            warmup: cfg.warmup,
            total_rate: cfg.total_rate,
            horizon_minutes: cfg.horizon_minutes,
            warmup_fraction: cfg.warmup_fraction,
            with_pickup: cfg.with_pickup,
        })
    };
    let slack_of = |k: u32| cfg.k_slack.then_some(k);

    let mut rows = Vec::new();
    let mut failures = 0;
    for (pi, (label, spec)) in policies.iter().enumerate() {
        let mut sim_curve = Vec::new();
        let mut exact_curve = Vec::new();
        for &k in &cfg.k {
            let hash = hash_for(spec, base + k);
            let mut ok_reports = Vec::new();
            for (&(cpi, ck, seed), res) in cells.iter().zip(&results) {
                if cpi != pi || ck != k {
                    continue;
                }
                let mut row = Row::new("run", label);
                row.k = Some(base + k);
                row.slack = slack_of(k);
                row.seed = Some(seed);
                row.hash = hash.clone();
                match res {
                    Ok(r) => {
                        row.arrivals = Some(r.arrivals);
                        row.drops = Some(r.drops);
                        row.drop_fraction = r.drop_fraction;
                        row.stderr = r.stderr;
                        row.wall_ms = r.wall_ms;
                        ok_reports.push(r.clone());
                    }
                    Err(e) => {
                        failures += 1;
                        row.kind = "error";
                        row.error = e.to_string();
                    }
                }
                rows.push(row);
            }
            if !ok_reports.is_empty() {
                let (mean, se) = pooled_drop_fraction(&ok_reports);
                let mut row = Row::new("aggregate", label);
                row.k = Some(base + k);
                row.slack = slack_of(k);
                row.arrivals = Some(ok_reports.iter().map(|r| r.arrivals).sum());
                row.drops = Some(ok_reports.iter().map(|r| r.drops).sum());
                row.drop_fraction = mean;
                row.stderr = se;
                row.hash = hash.clone();
                rows.push(row);
                sim_curve.push(((base + k) as f64, mean));
            }
            if cfg.exact {
                if cfg.mode == Mode::Timed {
                    log::warn!("exact solves cover the jump chain only; skipped in timed mode");
                } else if composition_count(net.n_supply(), base + k) <= DEFAULT_STATE_CAP as u128 {
                    let mut row = Row::new("exact", label);
                    row.k = Some(base + k);
                    row.hash = hash.clone();
                    match stationary_drop_probability(&net, spec, base + k) {
                        Ok(sol) => {
                            row.drop_fraction = sol.drop_probability;
                            row.wall_ms = sol.solve_ms;
                            exact_curve.push(((base + k) as f64, sol.drop_probability));
                        }
                        Err(e) => {
                            failures += 1;
                            row.kind = "error";
                            row.error = e.to_string();
                        }
                    }
                    rows.push(row);
                } else {
                    log::warn!("K = {} exceeds the exact-solve cap; skipped", base + k);
                }
            }
        }
        for (kind, curve) in [("fit_sim", &sim_curve), ("fit_exact", &exact_curve)] {
            if curve.len() < 3 {
                continue;
            }
            let mut row = Row::new(kind, label);
            match estimate_exponent(curve) {
                Ok(fit) => {
                    row.slope = fit.slope;
                    row.r_squared = fit.r_squared;
                }
                Err(e) => row.error = e.to_string(),
            }
            rows.push(row);
        }
    }

    let mut w = csv::Writer::from_writer(sink(out)?);
    w.write_record(SWEEP_HEADER)?;
    for r in &rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    if failures > 0 {
        eprintln!("{failures} sweep cells failed");
        Ok(3)
    } else {
        Ok(0)
    }
}

fn transient(config: &Path, cli: &Cli, out: Option<&Path>) -> Result<u8, CliError> {
    let cfg: TransientConfig = read_json(config)?;
    if cfg.horizons.is_empty() || cfg.policies.is_empty() {
        return Err(CliError::Input("transient runs need policies and horizons".into()));
    }
    let net = load_network(&resolve_relative(config, &cfg.network), cfg.eta)?;
    let n = net.n_supply();
    let inits: Vec<Vec<u32>> = match &cfg.initial_states {
        InitialStates::Explicit(v) => v.clone(),
        InitialStates::Sample { sample } => {
            let mut rng = stream(derive_seed(&[cli.seed, 0x1a17]), 0);
            (0..*sample).map(|_| generate::uniform_composition(n, cfg.k, &mut rng)).collect()
        }
    };
    for s in &inits {
        if s.len() != n || s.iter().map(|&x| x as u64).sum::<u64>() != cfg.k as u64 {
            return Err(CliError::Input(format!("initial state {s:?} must have {n} entries summing to {}", cfg.k)));
        }
    }
    for &h in &cfg.horizons {
        if !(h.is_finite() && h >= 0.0) || (cfg.mode == Mode::Jump && h.fract() != 0.0) {
            return Err(CliError::Input(format!("invalid horizon {h}")));
        }
    }
    let seeds = if cfg.seeds.is_empty() { vec![cli.seed] } else { cfg.seeds.clone() };
    let policies: Vec<(String, PolicySpec)> = cfg
        .policies
        .iter()
        .map(|p| p.resolve(&net, cli.eps_floor))
        .collect::<Result<_, _>>()?;
    let file = net.to_file();

    let mut cells = Vec::new();
    for pi in 0..policies.len() {
        for ii in 0..inits.len() {
            for &h in &cfg.horizons {
                for &seed in &seeds {
                    cells.push((pi, ii, h, seed));
                }
            }
        }
    }
    let results: Vec<Result<Vec<SimReport>, Error>> = cells
        .par_iter()
        .map(|&(pi, ii, h, seed)| {
            let spec = &policies[pi].1;
            let init = InitState::Explicit(inits[ii].clone());
            (0..cfg.replications)
                .map(|r| match cfg.mode {
                    Mode::Jump => {
                        let mut jc = JumpConfig::new(cfg.k, h as u64);
                        jc.warmup = Some(0);
                        jc.init = init.clone();
                        run_jump_chain_stream(&net, spec, &jc, seed, r)
                    }
                    Mode::Timed => {
                        let mut tc = TimedConfig::new(cfg.total_rate, h, cfg.k);
                        tc.warmup_fraction = Some(0.0);
                        tc.with_pickup = cfg.with_pickup;
                        tc.init = init.clone();
                        run_timed_stream(&net, spec, &tc, seed, r)
                    }
                })
                .collect()
        })
        .collect();

    let mut w = csv::Writer::from_writer(sink(out)?);
    w.write_record([
        "policy", "init_id", "initial_state", "horizon", "seed", "replications", "arrivals", "drops",
        "drop_fraction", "stderr", "config_hash", "error",
    ])?;
    let mut failures = 0;
    for (&(pi, ii, h, seed), res) in cells.iter().zip(&results) {
        let (label, spec) = &policies[pi];
        #[derive(Serialize)]
        struct Key<'a> {
            network: &'a NetworkFile,
            policy: &'a PolicySpec,
            mode: Mode,
            k: u32,
            init: &'a [u32],
            horizon: f64,
            replications: u64,
            total_rate: f64,
            with_pickup: bool,
        }
        let hash = config_hash(&Key {
            network: &file,
            policy: spec,
            mode: cfg.mode,
            k: cfg.k,
            init: &inits[ii],
            horizon: h,
            replications: cfg.replications,
            total_rate: cfg.total_rate,
            with_pickup: cfg.with_pickup,
        });
        let mut rec = vec![
            label.clone(),
            ii.to_string(),
            join(&inits[ii], ";"),
            h.to_string(),
            seed.to_string(),
            cfg.replications.to_string(),
        ];
        match res {
            Ok(reports) => {
                let (mean, se) = pooled_drop_fraction(reports);
                rec.push(reports.iter().map(|r| r.arrivals).sum::<u64>().to_string());
                rec.push(reports.iter().map(|r| r.drops).sum::<u64>().to_string());
                rec.push(num(mean));
                rec.push(num(se));
                rec.push(hash);
                rec.push(String::new());
            }
            Err(e) => {
                failures += 1;
                rec.extend([String::new(), String::new(), String::new(), String::new(), hash, e.to_string()]);
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(if failures > 0 { 3 } else { 0 })
}
