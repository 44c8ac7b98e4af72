//! Network instances: the bipartite compatibility graph between supply and
//! demand nodes, the normalized arrival-rate matrix, and structural checks.
//!
//! Supply nodes are indexed `0..n_supply`, demand nodes `0..n_demand`. Row `j`
//! of `phi` holds arrival rates of customers originating at demand node `j`,
//! column `k` the destination supply node.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Default cap on the number of demand nodes for exhaustive subset enumeration.
pub const DEFAULT_SUBSET_CAP: usize = 20;

/// Supply-node sets are carried as bitmasks during subset enumeration.
pub type SupplyMask = u128;

/// Largest supply count representable by [`SupplyMask`].
pub const MAX_MASK_SUPPLY: usize = 128;

/// Only the `VIOLATION_LIST_LIMIT` most violated subsets are listed in reports.
const VIOLATION_LIST_LIMIT: usize = 256;

/// On-disk representation of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub n_supply: usize,
    pub n_demand: usize,
    pub edges: Vec<[usize; 2]>,
    pub phi: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub travel_time: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pickup_time: Option<Matrix>,
    /// Physical zone of each demand node, used for travel-time lookups.
    /// Defaults to the identity map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand_zone: Option<Vec<usize>>,
}

/// A validated, normalized network. Immutable after construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "NetworkFile", into = "NetworkFile")]
pub struct Network {
    n_supply: usize,
    n_demand: usize,
    edges: Vec<(usize, usize)>,
    phi: Matrix,
    travel_time: Option<Matrix>,
    pickup_time: Option<Matrix>,
    demand_zone: Vec<usize>,
    original_mass: f64,
    dropped_demand: Vec<usize>,
    demand_nbrs: Vec<Vec<usize>>,
    supply_nbrs: Vec<Vec<usize>>,
    compatible: Vec<bool>,
    demand_rate: Vec<f64>,
    supply_rate: Vec<f64>,
}

impl Network {
    /// Builds a network from its file form: drops zero-rate demand nodes,
    /// normalizes `phi` to unit mass and checks structural invariants.
    pub fn new(file: NetworkFile) -> Result<Self> {
        let NetworkFile { n_supply, n_demand, edges, phi, travel_time, pickup_time, demand_zone } =
            file;
        if n_supply == 0 {
            return Err(Error::InvalidNetwork("no supply nodes".into()));
        }
        if n_demand == 0 {
            return Err(Error::InvalidNetwork("no demand nodes".into()));
        }
        if phi.rows() != n_demand || phi.cols() != n_supply {
            return Err(Error::InvalidNetwork(format!(
                "phi is {}x{}, expected {n_demand}x{n_supply}",
                phi.rows(),
                phi.cols()
            )));
        }
        if phi.as_slice().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidNetwork("phi entries must be finite and nonnegative".into()));
        }
        for m in [&travel_time, &pickup_time].into_iter().flatten() {
            if m.rows() != n_supply || m.cols() != n_supply {
                return Err(Error::InvalidNetwork(format!(
                    "time matrix is {}x{}, expected {n_supply}x{n_supply}",
                    m.rows(),
                    m.cols()
                )));
            }
            if m.as_slice().iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidNetwork(
                    "time matrices must be finite and nonnegative".into(),
                ));
            }
        }
        for &[i, j] in &edges {
            if i >= n_supply || j >= n_demand {
                return Err(Error::InvalidNetwork(format!("edge ({i}, {j}) out of range")));
            }
        }
        let zones = match demand_zone {
            Some(z) => {
                if z.len() != n_demand || z.iter().any(|&k| k >= n_supply) {
                    return Err(Error::InvalidNetwork("demand_zone malformed".into()));
                }
                z
            }
            None => (0..n_demand).collect(),
        };

        let original_mass = phi.sum();
        if original_mass <= 0.0 {
            return Err(Error::InvalidNetwork("phi has zero total mass".into()));
        }

        let raw_rates = phi.row_sums();
        let kept: Vec<usize> = (0..n_demand).filter(|&j| raw_rates[j] > 0.0).collect();
        let dropped: Vec<usize> = (0..n_demand).filter(|&j| raw_rates[j] <= 0.0).collect();
        if !dropped.is_empty() {
            log::warn!("dropping demand nodes with zero arrival rate: {dropped:?}");
        }
        let mut remap = vec![usize::MAX; n_demand];
        for (new, &old) in kept.iter().enumerate() {
            remap[old] = new;
        }
        let m = kept.len();
        let mut phi_c = Matrix::zeros(m, n_supply);
        for (new, &old) in kept.iter().enumerate() {
            for k in 0..n_supply {
                phi_c[(new, k)] = phi[(old, k)] / original_mass;
            }
        }
        let mut edge_set: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &[i, j] in &edges {
            if remap[j] != usize::MAX {
                edge_set.insert((i, remap[j]));
            }
        }
        let edges: Vec<(usize, usize)> = edge_set.into_iter().collect();
        let demand_zone: Vec<usize> = kept.iter().map(|&old| zones[old]).collect();

        let mut demand_nbrs = vec![Vec::new(); m];
        let mut supply_nbrs = vec![Vec::new(); n_supply];
        let mut compatible = vec![false; m * n_supply];
        for &(i, j) in &edges {
            demand_nbrs[j].push(i);
            supply_nbrs[i].push(j);
            compatible[j * n_supply + i] = true;
        }
        if let Some(j) = demand_nbrs.iter().position(Vec::is_empty) {
            return Err(Error::IsolatedDemand(j));
        }
        let demand_rate = phi_c.row_sums();
        let supply_rate = phi_c.col_sums();

        Ok(Network {
            n_supply,
            n_demand: m,
            edges,
            phi: phi_c,
            travel_time,
            pickup_time,
            demand_zone,
            original_mass,
            dropped_demand: dropped,
            demand_nbrs,
            supply_nbrs,
            compatible,
            demand_rate,
            supply_rate,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(text)?;
        Network::new(file)
    }

    pub fn to_file(&self) -> NetworkFile {
        let identity = self.demand_zone.iter().enumerate().all(|(j, &z)| j == z);
        NetworkFile {
            n_supply: self.n_supply,
            n_demand: self.n_demand,
            edges: self.edges.iter().map(|&(i, j)| [i, j]).collect(),
            phi: self.phi.clone(),
            travel_time: self.travel_time.clone(),
            pickup_time: self.pickup_time.clone(),
            demand_zone: if identity { None } else { Some(self.demand_zone.clone()) },
        }
    }

    /// Same graph and time matrices with a different arrival matrix.
    pub fn with_phi(&self, phi: Matrix) -> Result<Self> {
        let mut file = self.to_file();
        file.phi = phi;
        Network::new(file)
    }

    pub fn n_supply(&self) -> usize {
        self.n_supply
    }

    pub fn n_demand(&self) -> usize {
        self.n_demand
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn phi(&self) -> &Matrix {
        &self.phi
    }

    pub fn travel_time(&self) -> Option<&Matrix> {
        self.travel_time.as_ref()
    }

    pub fn pickup_time(&self) -> Option<&Matrix> {
        self.pickup_time.as_ref()
    }

    pub fn demand_zone(&self, j: usize) -> usize {
        self.demand_zone[j]
    }

    /// Total arrival mass before normalization.
    pub fn original_mass(&self) -> f64 {
        self.original_mass
    }

    /// Original indices of demand nodes removed for having zero arrival rate.
    pub fn dropped_demand(&self) -> &[usize] {
        &self.dropped_demand
    }

    /// Compatible supply nodes of demand node `j`, ascending.
    pub fn demand_neighbors(&self, j: usize) -> &[usize] {
        &self.demand_nbrs[j]
    }

    /// Compatible demand nodes of supply node `i`, ascending.
    pub fn supply_neighbors(&self, i: usize) -> &[usize] {
        &self.supply_nbrs[i]
    }

    pub fn is_compatible(&self, supply: usize, demand: usize) -> bool {
        self.compatible[demand * self.n_supply + supply]
    }

    /// Arrival rate at each demand node (row sums of `phi`).
    pub fn demand_rates(&self) -> &[f64] {
        &self.demand_rate
    }

    /// Rate at which supply is returned to each node when all demand is served
    /// (column sums of `phi`).
    pub fn supply_rates(&self) -> &[f64] {
        &self.supply_rate
    }

    pub fn demand_mask(&self, j: usize) -> SupplyMask {
        self.demand_nbrs[j].iter().fold(0, |m, &i| m | (1 << i))
    }

    /// Union of compatible supply nodes over a demand-subset bitmask.
    pub fn boundary_mask(&self, demand_subset: u64) -> SupplyMask {
        bits(demand_subset).fold(0, |m, j| m | self.demand_mask(j))
    }

    fn ensure_enumerable(&self, cap: usize) -> Result<()> {
        if self.n_demand > cap || self.n_demand > 63 {
            return Err(Error::SubsetCapExceeded { m: self.n_demand, cap: cap.min(63) });
        }
        if self.n_supply > MAX_MASK_SUPPLY {
            return Err(Error::InvalidInput(format!(
                "subset enumeration supports at most {MAX_MASK_SUPPLY} supply nodes"
            )));
        }
        Ok(())
    }

    /// Runs `f(J, boundary)` for every nonempty strict demand subset `J`.
    pub(crate) fn for_each_strict_subset(
        &self,
        cap: usize,
        mut f: impl FnMut(u64, SupplyMask),
    ) -> Result<()> {
        self.ensure_enumerable(cap)?;
        let full = (1u64 << self.n_demand) - 1;
        let masks: Vec<SupplyMask> = (0..self.n_demand).map(|j| self.demand_mask(j)).collect();
        for subset in 1..full {
            let boundary = bits(subset).fold(0, |m, j| m | masks[j]);
            f(subset, boundary);
        }
        Ok(())
    }
}

impl TryFrom<NetworkFile> for Network {
    type Error = Error;
    fn try_from(file: NetworkFile) -> Result<Self> {
        Network::new(file)
    }
}

impl From<Network> for NetworkFile {
    fn from(net: Network) -> Self {
        net.to_file()
    }
}

/// Iterates the set bits of `mask` in ascending order.
pub fn bits(mask: u64) -> impl Iterator<Item = usize> {
    let mut rest = mask;
    std::iter::from_fn(move || {
        if rest == 0 {
            None
        } else {
            let b = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            Some(b)
        }
    })
}

pub fn supply_bits(mask: SupplyMask) -> impl Iterator<Item = usize> {
    let mut rest = mask;
    std::iter::from_fn(move || {
        if rest == 0 {
            None
        } else {
            let b = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            Some(b)
        }
    })
}

pub fn mask_to_vec(mask: u64) -> Vec<usize> {
    bits(mask).collect()
}

pub fn supply_mask_to_vec(mask: SupplyMask) -> Vec<usize> {
    supply_bits(mask).collect()
}

/// Hall slack of a demand subset: supply returned to its neighborhood minus
/// the demand it generates.
pub fn hall_slack(net: &Network, subset: u64, boundary: SupplyMask) -> f64 {
    let inflow: f64 = supply_bits(boundary).map(|i| net.supply_rate[i]).sum();
    let demand: f64 = bits(subset).map(|j| net.demand_rate[j]).sum();
    inflow - demand
}

/// A demand subset together with its Hall slack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetSlack {
    pub subset: Vec<usize>,
    pub slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub normalized: bool,
    pub original_mass: f64,
    pub dropped_demand_nodes: Vec<usize>,
    pub nontrivial: bool,
    pub crp_holds: bool,
    /// Minimum Hall slack; `inf` when there is no nonempty strict subset.
    #[serde(with = "crate::serde_inf")]
    pub hall_gap: f64,
    pub lambda_min: f64,
    /// Subsets with nonpositive slack, most violated first (truncated).
    pub violating_subsets: Vec<SubsetSlack>,
    pub violating_count: usize,
    /// Demand fraction that must be dropped for every fleet size when some
    /// subset strictly reverses the Hall inequality.
    pub epsilon_floor_drop: f64,
}

/// Exhaustively checks the complete-resource-pooling inequality on every
/// nonempty strict demand subset.
pub fn validate_network(net: &Network) -> Result<ValidationReport> {
    validate_network_with_cap(net, DEFAULT_SUBSET_CAP)
}

pub fn validate_network_with_cap(net: &Network, cap: usize) -> Result<ValidationReport> {
    let mut hall_gap = f64::INFINITY;
    let mut violating = Vec::new();
    let mut violating_count = 0;
    let mut epsilon = 0.0f64;
    net.for_each_strict_subset(cap, |subset, boundary| {
        let slack = hall_slack(net, subset, boundary);
        hall_gap = hall_gap.min(slack);
        if slack <= 0.0 {
            violating_count += 1;
            violating.push(SubsetSlack { subset: mask_to_vec(subset), slack });
            epsilon = epsilon.max(-slack);
        }
    })?;
    violating.sort_by(|a, b| a.slack.total_cmp(&b.slack).then_with(|| a.subset.cmp(&b.subset)));
    violating.truncate(VIOLATION_LIST_LIMIT);

    let lambda_min = net.supply_rate.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ValidationReport {
        normalized: (net.original_mass - 1.0).abs() > 1e-12,
        original_mass: net.original_mass,
        dropped_demand_nodes: net.dropped_demand.clone(),
        nontrivial: is_nontrivial(net),
        crp_holds: hall_gap > 0.0,
        hall_gap,
        lambda_min,
        violating_subsets: violating,
        violating_count,
        epsilon_floor_drop: epsilon,
    })
}

/// Some customers travel to a destination outside their origin's neighborhood.
pub fn is_nontrivial(net: &Network) -> bool {
    (0..net.n_demand).any(|j| {
        (0..net.n_supply).any(|k| !net.is_compatible(k, j) && net.phi[(j, k)] > 0.0)
    })
}

/// Compatible supply nodes of a set of demand nodes.
pub fn neighborhood(net: &Network, demand_subset: &BTreeSet<usize>) -> BTreeSet<usize> {
    demand_subset.iter().flat_map(|&j| net.demand_neighbors(j).iter().copied()).collect()
}

/// Compatible demand nodes of a set of supply nodes.
pub fn supply_neighborhood(net: &Network, supply_subset: &BTreeSet<usize>) -> BTreeSet<usize> {
    supply_subset.iter().flat_map(|&i| net.supply_neighbors(i).iter().copied()).collect()
}

/// Drift margin of a supply subset `S`: supply arriving at `S` minus the
/// demand whose whole neighborhood lies inside `S`.
pub fn supply_subset_margin(net: &Network, supply_subset: SupplyMask) -> f64 {
    let inflow: f64 = supply_bits(supply_subset).map(|i| net.supply_rate[i]).sum();
    let trapped: f64 = (0..net.n_demand)
        .filter(|&j| net.demand_mask(j) & !supply_subset == 0)
        .map(|j| net.demand_rate[j])
        .sum();
    inflow - trapped
}

/// `min(hall_gap, lambda_min)`: the uniform negative-drift constant of SMW policies.
pub fn drift_constant(report: &ValidationReport) -> f64 {
    report.hall_gap.min(report.lambda_min)
}

/// `eta * phi + (1 - eta) * (phi + phi^T) / 2`. The caller renormalizes.
pub fn symmetrize_demand(phi_raw: &Matrix, eta: f64) -> Result<Matrix> {
    if !phi_raw.is_square() {
        return Err(Error::InvalidInput(format!(
            "symmetrization needs a square matrix, got {}x{}",
            phi_raw.rows(),
            phi_raw.cols()
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidInput(format!("eta {eta} outside [0, 1]")));
    }
    let n = phi_raw.rows();
    let mut out = Matrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            let sym = 0.5 * (phi_raw[(r, c)] + phi_raw[(c, r)]);
            out[(r, c)] = eta * phi_raw[(r, c)] + (1.0 - eta) * sym;
        }
    }
    Ok(out)
}

/// Divides by the total mass.
pub fn normalize(phi: &Matrix) -> Result<Matrix> {
    let total = phi.sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidInput("matrix has no positive finite mass".into()));
    }
    Ok(phi.map(|v| v / total))
}
