//! Reproducible instance generators.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::netmodel::{is_nontrivial, symmetrize_demand, validate_network, Network, NetworkFile};
use crate::rng::stream;

/// Two stations; demand at `0'` is served only from `0`, demand at `1'` from
/// either station. Arrival rates `[[3/8, 1/8], [1/4, 1/4]]`.
pub fn example1() -> Network {
    Network::new(NetworkFile {
        n_supply: 2,
        n_demand: 2,
        edges: vec![[0, 0], [0, 1], [1, 1]],
        phi: Matrix::from_rows(vec![vec![3.0 / 8.0, 1.0 / 8.0], vec![0.25, 0.25]]).unwrap(),
        travel_time: None,
        pickup_time: None,
        demand_zone: None,
    })
    .expect("example network is valid")
}

/// Every supply node compatible with every demand node; `phi` given row-major.
pub fn full_flexibility(n: usize, phi: &[f64]) -> Network {
    let rows = phi.chunks(n).map(<[f64]>::to_vec).collect();
    let edges = (0..n).flat_map(|i| (0..n).map(move |j| [i, j])).collect();
    Network::new(NetworkFile {
        n_supply: n,
        n_demand: n,
        edges,
        phi: Matrix::from_rows(rows).unwrap(),
        travel_time: None,
        pickup_time: None,
        demand_zone: None,
    })
    .expect("full-flexibility network is valid")
}

/// `n` zones on a ring; demand at `j'` is compatible with `j - 1`, `j`, `j + 1`.
/// Uniform arrival rates over all origin-destination pairs.
pub fn symmetric_ring(n: usize) -> Result<Network> {
    if n < 4 {
        return Err(Error::InvalidInput("a nontrivial ring needs at least 4 zones".into()));
    }
    let mut edges = Vec::new();
    for j in 0..n {
        for d in [n - 1, 0, 1] {
            edges.push([(j + d) % n, j]);
        }
    }
    let v = 1.0 / (n * n) as f64;
    Network::new(NetworkFile {
        n_supply: n,
        n_demand: n,
        edges,
        phi: Matrix::from_rows(vec![vec![v; n]; n])?,
        travel_time: None,
        pickup_time: None,
        demand_zone: None,
    })
}

#[derive(Clone, Debug)]
pub struct RandomCrpParams {
    pub n: usize,
    /// Probability that a non-home supply node is compatible with a demand node.
    pub edge_prob: f64,
    /// Probability that an arrival-rate entry is zero.
    pub sparsity: f64,
    /// Optional symmetrization weight applied before the CRP check.
    pub eta: Option<f64>,
    pub max_tries: usize,
}

impl Default for RandomCrpParams {
    fn default() -> Self {
        RandomCrpParams { n: 4, edge_prob: 0.35, sparsity: 0.2, eta: None, max_tries: 10_000 }
    }
}

/// Rejection-samples a nontrivial network satisfying complete resource pooling.
pub fn random_crp(params: &RandomCrpParams, seed: u64) -> Result<Network> {
    let n = params.n;
    if n < 2 {
        return Err(Error::InvalidInput("random instances need n >= 2".into()));
    }
    let mut rng = stream(seed, 0);
    for _ in 0..params.max_tries {
        let mut edges = Vec::new();
        for j in 0..n {
            for i in 0..n {
                if i == j || rng.random::<f64>() < params.edge_prob {
                    edges.push([i, j]);
                }
            }
        }
        let mut phi = Matrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                if rng.random::<f64>() >= params.sparsity {
                    let e: f64 = Exp1.sample(&mut rng);
                    phi[(r, c)] = e;
                }
            }
        }
        if let Some(eta) = params.eta {
            phi = symmetrize_demand(&phi, eta)?;
        }
        if phi.row_sums().iter().any(|&v| v <= 0.0) {
            continue;
        }
        let file = NetworkFile {
            n_supply: n,
            n_demand: n,
            edges,
            phi,
            travel_time: None,
            pickup_time: None,
            demand_zone: None,
        };
        let Ok(net) = Network::new(file) else { continue };
        if !is_nontrivial(&net) {
            continue;
        }
        if validate_network(&net)?.crp_holds {
            return Ok(net);
        }
    }
    Err(Error::InvalidInput(format!(
        "no CRP instance found in {} tries",
        params.max_tries
    )))
}

#[derive(Clone, Debug)]
pub struct CityParams {
    pub rows: usize,
    pub cols: usize,
    /// Symmetrization weight; smaller is more balanced.
    pub eta: f64,
    /// Minutes per grid step for travel times.
    pub minutes_per_block: f64,
    pub max_tries: usize,
}

impl Default for CityParams {
    fn default() -> Self {
        CityParams { rows: 4, cols: 4, eta: 0.3, minutes_per_block: 3.0, max_tries: 1_000 }
    }
}

/// A grid city: zones compatible with themselves and their edge-sharing
/// neighbors, gravity-model demand tilted toward the first column and then
/// symmetrized, travel times proportional to Manhattan distance, pickup
/// times inflated to `max(1.5 D, 3)`.
pub fn synthetic_city(params: &CityParams, seed: u64) -> Result<Network> {
    let (rows, cols) = (params.rows, params.cols);
    let n = rows * cols;
    if n < 4 {
        return Err(Error::InvalidInput("city needs at least 4 zones".into()));
    }
    let pos = |z: usize| ((z / cols) as i64, (z % cols) as i64);
    let dist = |a: usize, b: usize| {
        let (ra, ca) = pos(a);
        let (rb, cb) = pos(b);
        ((ra - rb).abs() + (ca - cb).abs()) as f64
    };
    let mut edges = Vec::new();
    for j in 0..n {
        for i in 0..n {
            if dist(i, j) <= 1.0 {
                edges.push([i, j]);
            }
        }
    }
    let mut travel = Matrix::zeros(n, n);
    let mut pickup = Matrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let d = params.minutes_per_block * dist(a, b).max(0.5);
            travel[(a, b)] = d;
            pickup[(a, b)] = (1.5 * d).max(3.0);
        }
    }
    let mut rng = stream(seed, 0);
    for _ in 0..params.max_tries {
        let weight: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (0.5 * z).exp()
            })
            .collect();
        let mut phi = Matrix::zeros(n, n);
        for o in 0..n {
            for d in 0..n {
                let tilt = if pos(d).1 == 0 { 2.0 } else { 1.0 };
                phi[(o, d)] = weight[o] * weight[d] * tilt * (-dist(o, d) / 3.0).exp();
            }
        }
        let phi = symmetrize_demand(&phi, params.eta)?;
        let net = Network::new(NetworkFile {
            n_supply: n,
            n_demand: n,
            edges: edges.clone(),
            phi,
            travel_time: Some(travel.clone()),
            pickup_time: Some(pickup.clone()),
            demand_zone: None,
        })?;
        if is_nontrivial(&net) && validate_network(&net)?.crp_holds {
            return Ok(net);
        }
    }
    Err(Error::InvalidInput("no CRP city found; lower eta".into()))
}

/// Samples a composition of `k` into `n` parts uniformly (stars and bars).
pub fn uniform_composition<R: Rng + ?Sized>(n: usize, k: u32, rng: &mut R) -> Vec<u32> {
    assert!(n > 0);
    let total = k as usize + n - 1;
    // Choose n - 1 bar positions out of `total` slots without replacement.
    let bars = rand::seq::index::sample(rng, total, n - 1).into_vec();
    let mut bars = bars;
    bars.sort_unstable();
    let mut out = Vec::with_capacity(n);
    let mut prev: i64 = -1;
    for b in bars {
        out.push((b as i64 - prev - 1) as u32);
        prev = b as i64;
    }
    out.push((total as i64 - prev - 1) as u32);
    out
}
