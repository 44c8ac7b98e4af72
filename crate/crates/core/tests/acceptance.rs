//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use smw_core::chainoracle::{exact_exponent_curve, stationary_drop_probability};
use smw_core::exponent::{
    drainable_subsets, gamma, gamma_star, gamma_value, lyapunov_value, min_drift_speed,
    most_likely_path, optimal_alpha,
};
use smw_core::generate::{self, CityParams, RandomCrpParams};
use smw_core::netmodel::validate_network;
use smw_core::policies::{fluid_flow_table, max_served_flow_table};
use smw_core::rng::stream;
use smw_core::simcore::{
    estimate_exponent, fleet_requirement, run_jump_chain, run_timed, JumpConfig, TimedConfig,
};
use smw_core::tuner::{evaluate, tune, TuneConfig};
use smw_core::{AlphaVector, Matrix, Network, PolicySpec};

const LN2: f64 = std::f64::consts::LN_2;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(started: Instant, limit: Duration) -> Result<(), String> {
    let t = started.elapsed();
    ensure(t < limit, format!("runtime {:.2?} exceeds {:.0?}", t, limit))
}

fn smw(alpha: &[f64]) -> PolicySpec {
    PolicySpec::Smw { alpha: AlphaVector::new(alpha.to_vec()).unwrap() }
}

fn crp_instances(count: usize, seed0: u64, n_of: impl Fn(u64) -> usize) -> Vec<Network> {
    (0..count as u64)
        .map(|s| {
            let params = RandomCrpParams { n: n_of(s), ..RandomCrpParams::default() };
            generate::random_crp(&params, seed0 + s).expect("random CRP instance")
        })
        .collect()
}

fn violating_variant() -> Network {
    let mut file = generate::example1().to_file();
    file.phi = Matrix::from_rows(vec![vec![0.125, 0.375], vec![0.25, 0.25]]).unwrap();
    file.pickup_time = Some(Matrix::from_rows(vec![vec![1.0, 5.0], vec![5.0, 1.0]]).unwrap());
    Network::new(file).unwrap()
}

fn c1_exponent_formula() -> Outcome {
    let t = Instant::now();
    let net = generate::example1();
    let g_uniform = gamma(&net, &AlphaVector::uniform(2)).map_err(|e| e.to_string())?.gamma;
    ensure((g_uniform - 0.5 * LN2).abs() < 1e-9, format!("gamma(uniform) = {g_uniform}"))?;
    let (alpha, res) = optimal_alpha(&net, 1e-3).map_err(|e| e.to_string())?;
    ensure((res.gamma - 0.999 * LN2).abs() < 1e-9, format!("gamma(alpha*) = {}", res.gamma))?;
    ensure((alpha.as_slice()[0] - 0.999).abs() < 1e-9, format!("alpha* = {:?}", alpha.as_slice()))?;
    let ratio = res.gamma / g_uniform;
    ensure((ratio - 1.998).abs() < 1e-9, format!("optimal/vanilla ratio {ratio}"))?;
    within(t, Duration::from_secs(1))?;
    Ok(format!("gamma(uniform)={g_uniform:.6}, gamma(alpha*)={:.6}, ratio {ratio:.3}", res.gamma))
}

fn c2_exact_chain() -> Outcome {
    let t = Instant::now();
    let net = generate::example1();
    let policy = smw(&[0.5, 0.5]);
    let exact = stationary_drop_probability(&net, &policy, 1).map_err(|e| e.to_string())?;
    ensure(
        (exact.drop_probability - 0.3).abs() < 1e-12,
        format!("exact drop probability {}", exact.drop_probability),
    )?;
    let mut cfg = JumpConfig::new(1, 1_000_000);
    cfg.warmup = Some(100_000);
    let sim = run_jump_chain(&net, &policy, &cfg, 2024).map_err(|e| e.to_string())?;
    let z = (sim.drop_fraction - 0.3) / sim.stderr;
    ensure(z.abs() <= 3.0, format!("simulated {} (se {}), z = {z:.2}", sim.drop_fraction, sim.stderr))?;
    within(t, Duration::from_secs(10))?;
    Ok(format!("exact {:.12}, simulated {:.5} +- {:.5}", exact.drop_probability, sim.drop_fraction, sim.stderr))
}

fn c3_exponent_realization() -> Outcome {
    let t = Instant::now();
    let net = generate::example1();
    let ks: Vec<u32> = (1..=6).map(|i| i * 10).collect();
    let mut notes = Vec::new();
    for (alpha, target) in [([0.5, 0.5], 0.5 * LN2), ([0.9, 0.1], 0.9 * LN2)] {
        let curve = exact_exponent_curve(&net, &smw(&alpha), &ks).map_err(|e| e.to_string())?;
        let pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.k as f64, p.drop_probability)).collect();
        let fit = estimate_exponent(&pts).map_err(|e| e.to_string())?;
        let rel = (fit.slope - target).abs() / target;
        ensure(rel <= 0.15, format!("alpha {alpha:?}: slope {:.6} vs {target:.6} ({:.1}% off)", fit.slope, rel * 100.0))?;
        notes.push(format!("alpha {alpha:?}: slope {:.4} vs {target:.4}", fit.slope));
    }
    within(t, Duration::from_secs(30))?;
    Ok(notes.join("; "))
}

fn c4_lp_optimality() -> Outcome {
    let t = Instant::now();
    let floor = 1e-3;
    let step = 1e-3;
    let mut worst = f64::NEG_INFINITY;
    for (idx, net) in crp_instances(50, 1000, |_| 4).iter().enumerate() {
        let stats = drainable_subsets(net).map_err(|e| e.to_string())?;
        let (alpha, res) = optimal_alpha(net, floor).map_err(|e| e.to_string())?;
        if res.is_infinite() {
            continue;
        }
        let a = alpha.as_slice();
        let free: Vec<bool> = a.iter().map(|&v| v > floor + 1e-12).collect();
        let mut rng = stream(77, idx as u64);
        let mut trials = 0;
        let mut attempts = 0;
        while trials < 1000 {
            attempts += 1;
            ensure(attempts < 100_000, format!("instance {idx}: too few feasible perturbations"))?;
            let mut d: Vec<f64> = (0..a.len())
                .map(|i| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if free[i] { z } else { z.abs() }
                })
                .collect();
            let nfree = free.iter().filter(|&&f| f).count() as f64;
            let excess: f64 = d.iter().sum::<f64>() / nfree;
            for (v, &f) in d.iter_mut().zip(&free) {
                if f {
                    *v -= excess;
                }
            }
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let cand: Vec<f64> = a.iter().zip(&d).map(|(x, v)| x + step * v / norm).collect();
            if cand.iter().any(|&v| v < floor) {
                continue;
            }
            trials += 1;
            let Ok(cand) = AlphaVector::normalized(&cand) else { continue };
            let g = gamma_value(&stats, &cand);
            worst = worst.max(g - res.gamma);
            ensure(
                g <= res.gamma + 1e-6,
                format!("instance {idx}: perturbation improves gamma by {:e}", g - res.gamma),
            )?;
        }
    }
    within(t, Duration::from_secs(60))?;
    Ok(format!("50 instances x 1000 perturbations, max improvement {worst:e}"))
}

fn c5_lemma7_identities() -> Outcome {
    let t = Instant::now();
    let mut worst_drain = 0.0f64;
    let mut worst_speed = 0.0f64;
    let mut checked = 0;
    for (idx, net) in crp_instances(50, 1000, |_| 4).iter().enumerate() {
        let (opt, _) = optimal_alpha(net, 1e-3).map_err(|e| e.to_string())?;
        for alpha in [AlphaVector::uniform(net.n_supply()), opt] {
            let g = gamma(net, &alpha).map_err(|e| e.to_string())?.gamma;
            if g.is_infinite() {
                continue;
            }
            let path = most_likely_path(net, &alpha).map_err(|e| e.to_string())?;
            let v = min_drift_speed(net, &alpha, &path.f_star).map_err(|e| e.to_string())?;
            let e1 = (path.drain_time * path.kl_rate - g).abs();
            let e2 = (path.kl_rate / v - g).abs();
            worst_drain = worst_drain.max(e1);
            worst_speed = worst_speed.max(e2);
            ensure(e1 <= 1e-9, format!("instance {idx}: drain_time * KL = {} vs gamma {g}", path.drain_time * path.kl_rate))?;
            ensure(e2 <= 1e-6, format!("instance {idx}: KL / v = {} vs gamma {g} (v = {v})", path.kl_rate / v))?;
            checked += 1;
        }
    }
    within(t, Duration::from_secs(60))?;
    Ok(format!("{checked} (instance, alpha) pairs; max errors {worst_drain:e} / {worst_speed:e}"))
}

fn c6_vanilla_bound() -> Outcome {
    let nets = crp_instances(500, 5000, |s| 2 + (s % 4) as usize);
    let mut violations = 0;
    let mut min_ratio = f64::INFINITY;
    for net in &nets {
        let n = net.n_supply() as f64;
        let gv = gamma(net, &AlphaVector::uniform(net.n_supply())).map_err(|e| e.to_string())?.gamma;
        let gs = gamma_star(net).map_err(|e| e.to_string())?;
        if gs.is_infinite() {
            continue;
        }
        min_ratio = min_ratio.min(gv / gs * n);
        if gv < gs / n - 1e-9 {
            violations += 1;
        }
    }
    ensure(violations == 0, format!("{violations} violations"))?;
    Ok(format!("500 instances (n = 2..5), 0 violations, min n*gamma(uniform)/gamma* = {min_ratio:.4}"))
}

fn c7_crp_floor() -> Outcome {
    let t = Instant::now();
    let net = violating_variant();
    let report = validate_network(&net).map_err(|e| e.to_string())?;
    ensure(!report.crp_holds, "variant unexpectedly satisfies CRP")?;
    ensure((report.epsilon_floor_drop - 0.125).abs() < 1e-12, format!("epsilon {}", report.epsilon_floor_drop))?;
    ensure(fluid_flow_table(&net, false).is_err(), "transportation problem should be infeasible")?;
    let mut policies = vec![
        ("smw(1/2,1/2)".to_string(), smw(&[0.5, 0.5])),
        ("smw(0.9,0.1)".to_string(), smw(&[0.9, 0.1])),
        ("smw(0.1,0.9)".to_string(), smw(&[0.1, 0.9])),
        ("smw(0.999,0.001)".to_string(), smw(&[0.999, 0.001])),
        ("vanilla".to_string(), PolicySpec::VanillaMw),
        ("priority[1,0]".to_string(), PolicySpec::StaticPriority { priority_lists: vec![vec![0], vec![1, 0]] }),
        ("priority[0,1]".to_string(), PolicySpec::StaticPriority { priority_lists: vec![vec![0], vec![0, 1]] }),
        (
            "smw_pickup(beta=0.5)".to_string(),
            PolicySpec::SmwPickup { alpha: AlphaVector::uniform(2), beta: 0.5 },
        ),
        (
            "fluid(max-served)".to_string(),
            PolicySpec::FluidRandom { flow_table: max_served_flow_table(&net).map_err(|e| e.to_string())? },
        ),
        (
            "fluid(split)".to_string(),
            PolicySpec::FluidRandom {
                flow_table: Matrix::from_rows(vec![vec![0.125, 0.25], vec![0.0, 0.25]]).unwrap(),
            },
        ),
    ];
    policies.push((
        "fluid(all from 0)".to_string(),
        PolicySpec::FluidRandom { flow_table: Matrix::from_rows(vec![vec![0.5, 0.5], vec![0.0, 0.0]]).unwrap() },
    ));
    let mut lowest = f64::INFINITY;
    for (name, policy) in &policies {
        for k in 1..=40 {
            let p = stationary_drop_probability(&net, policy, k).map_err(|e| e.to_string())?.drop_probability;
            lowest = lowest.min(p);
            ensure(p >= 0.125 - 1e-12, format!("{name}, K = {k}: drop probability {p}"))?;
        }
    }
    within(t, Duration::from_secs(60))?;
    Ok(format!("{} policies x K = 1..40, min drop probability {lowest:.6}", policies.len()))
}

fn c8_fluid_separation() -> Outcome {
    let t = Instant::now();
    let net = generate::example1();
    let ks: Vec<u32> = (1..=6).map(|i| i * 10).collect();
    let fluid = PolicySpec::fluid(&net, false).map_err(|e| e.to_string())?;
    let fit = |policy: &PolicySpec| -> Result<_, String> {
        let curve = exact_exponent_curve(&net, policy, &ks).map_err(|e| e.to_string())?;
        let pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.k as f64, p.drop_probability)).collect();
        estimate_exponent(&pts).map_err(|e| e.to_string())
    };
    let f = fit(&fluid)?;
    let v = fit(&PolicySpec::VanillaMw)?;
    ensure(f.slope < 0.25 * v.slope, format!("fluid slope {} vs vanilla {}", f.slope, v.slope))?;
    ensure(
        1.0 - f.r_squared > 5.0 * (1.0 - v.r_squared) && f.r_squared < 0.99,
        format!("fluid r2 {} vs vanilla r2 {}", f.r_squared, v.r_squared),
    )?;
    within(t, Duration::from_secs(60))?;
    Ok(format!(
        "fluid slope {:.4} (r2 {:.4}) vs vanilla slope {:.4} (r2 {:.6})",
        f.slope, f.r_squared, v.slope, v.r_squared
    ))
}

fn c9_lyapunov() -> Outcome {
    let mut rng = stream(99, 0);
    let draws = 10_000;
    for d in 0..draws {
        let n = rng.random_range(2..=6);
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
        let alpha = AlphaVector::normalized(&raw).unwrap();
        let a = alpha.as_slice();
        let direction = |rng: &mut smw_core::rng::SimRng| -> Vec<f64> {
            // Zero-sum direction scaled so that alpha + dx stays nonnegative.
            let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            let m = z.iter().sum::<f64>() / n as f64;
            let dz: Vec<f64> = z.iter().map(|v| v - m).collect();
            let mut t = 1.0f64;
            for (v, ai) in dz.iter().zip(a) {
                if *v < 0.0 {
                    t = t.min(ai / -v);
                }
            }
            let u: f64 = rng.random();
            dz.iter().map(|v| v * t * u * 0.5).collect()
        };
        let dx = direction(&mut rng);
        let dy = direction(&mut rng);
        let at = |delta: &[f64], c: f64| -> Vec<f64> { a.iter().zip(delta).map(|(x, v)| x + c * v).collect() };
        let c: f64 = rng.random_range(1e-3..=1.0);
        let lhs = lyapunov_value(&alpha, &at(&dx, c));
        let rhs = c * lyapunov_value(&alpha, &at(&dx, 1.0));
        ensure((lhs - rhs).abs() <= 1e-12, format!("draw {d}: scale invariance {lhs} vs {rhs}"))?;
        let sum: Vec<f64> = dx.iter().zip(&dy).map(|(u, v)| u + v).collect();
        let l_sum = lyapunov_value(&alpha, &at(&sum, 1.0));
        let bound = lyapunov_value(&alpha, &at(&dx, 1.0)) + lyapunov_value(&alpha, &at(&dy, 1.0));
        ensure(l_sum <= bound + 1e-12, format!("draw {d}: sub-additivity {l_sum} > {bound}"))?;
        let x1 = at(&dx, 1.0);
        let x2 = at(&dy, 1.0);
        let dist = x1.iter().zip(&x2).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        let gap = (lyapunov_value(&alpha, &x1) - lyapunov_value(&alpha, &x2)).abs();
        ensure(gap <= dist / alpha.min() + 1e-12, format!("draw {d}: Lipschitz {gap} > {}", dist / alpha.min()))?;
    }
    Ok(format!("{draws} draws: scale invariance, sub-additivity and Lipschitz bound hold"))
}

fn c10_timed_conservation() -> Outcome {
    let t = Instant::now();
    let net = generate::synthetic_city(&CityParams::default(), 4).map_err(|e| e.to_string())?;
    let rate = 2.0;
    let fleet = fleet_requirement(&net, rate).map_err(|e| e.to_string())?;
    // Each arrival is one event and each served trip one more, so ~1e6 events
    // need roughly 2.6e5 minutes at this rate.
    let mut cfg = TimedConfig::new(rate, 260_000.0, fleet.k_fl as u32 + 40);
    cfg.with_pickup = true;
    let policy = PolicySpec::Smw { alpha: AlphaVector::uniform(net.n_supply()) };
    let r = run_timed(&net, &policy, &cfg, 10).map_err(|e| e.to_string())?;
    let s = r.timed.ok_or("missing timed stats")?;
    ensure(s.events >= 1_000_000, format!("only {} events", s.events))?;
    ensure(s.conservation_violations == 0, format!("{} conservation violations", s.conservation_violations))?;
    let little = s.mean_in_transit / s.throughput;
    let rel = (little / s.mean_trip_time - 1.0).abs();
    ensure(rel <= 0.02, format!("L/lambda = {little:.4} vs trip time {:.4}", s.mean_trip_time))?;
    within(t, Duration::from_secs(60))?;
    Ok(format!(
        "{} events, 0 violations; in-transit/throughput {little:.4} vs mean trip {:.4} ({:.3}% off)",
        s.events,
        s.mean_trip_time,
        rel * 100.0
    ))
}

fn c11_tuner() -> Outcome {
    let t = Instant::now();
    let net = generate::example1();
    let cfg = TuneConfig { budget: 400, seed: 11, ..TuneConfig::default() };
    let a = tune(&net, &cfg, false).map_err(|e| e.to_string())?;
    let b = tune(&net, &cfg, false).map_err(|e| e.to_string())?;
    ensure(a.trace == b.trace, "trace differs between identical runs")?;
    ensure(a.alpha.as_slice()[0] >= 0.8, format!("tuned alpha {:?}", a.alpha.as_slice()))?;
    // Fresh common random numbers for the final comparison.
    let check_cfg = TuneConfig { replications: 8, steps: 100_000, ..cfg.clone() };
    let tuned_policy = PolicySpec::Smw { alpha: a.alpha.clone() };
    let (tuned, tuned_se) = evaluate(&net, &tuned_policy, &check_cfg, 4242).map_err(|e| e.to_string())?;
    let (van, van_se) = evaluate(&net, &PolicySpec::VanillaMw, &check_cfg, 4242).map_err(|e| e.to_string())?;
    ensure(
        tuned <= van + 2.0 * van_se.max(tuned_se),
        format!("tuned {tuned} (se {tuned_se}) vs vanilla {van} (se {van_se})"),
    )?;
    within(t, Duration::from_secs(120))?;
    Ok(format!(
        "alpha {:.4?}, tuned drop {tuned:.5} vs vanilla {van:.5} (se {van_se:.5})",
        a.alpha.as_slice()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("exponent formula", c1_exponent_formula),
        ("exact-chain agreement", c2_exact_chain),
        ("exponent realization", c3_exponent_realization),
        ("optimality of LP alpha*", c4_lp_optimality),
        ("drain-time and speed identities", c5_lemma7_identities),
        ("vanilla bound gamma(uniform) >= gamma*/n", c6_vanilla_bound),
        ("CRP drop floor", c7_crp_floor),
        ("state-independent separation", c8_fluid_separation),
        ("Lyapunov properties", c9_lyapunov),
        ("timed conservation and Little's law", c10_timed_conservation),
        ("tuner sanity", c11_tuner),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS [{secs:7.2}s] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL [{secs:7.2}s] {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
