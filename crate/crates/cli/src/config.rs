use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use smw_core::exponent::optimal_alpha;
use smw_core::netmodel::symmetrize_demand;
use smw_core::{AlphaVector, Network, PolicySpec};

use crate::commands::CliError;

/// A policy given by name or as a full JSON spec.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyEntry {
    Named(String),
    Spec(PolicySpec),
}

impl PolicyEntry {
    pub fn parse(arg: &str) -> Result<Self, CliError> {
        if arg.trim_start().starts_with('{') {
            Ok(PolicyEntry::Spec(serde_json::from_str(arg).map_err(smw_core::Error::from)?))
        } else {
            Ok(PolicyEntry::Named(arg.to_string()))
        }
    }

    /// Label for result rows and the concrete spec for `net`.
    pub fn resolve(&self, net: &Network, eps_floor: f64) -> Result<(String, PolicySpec), CliError> {
        let n = net.n_supply();
        match self {
            PolicyEntry::Spec(spec) => Ok((spec.name().to_string(), spec.clone())),
            PolicyEntry::Named(name) => {
                let spec = match name.as_str() {
                    "vanilla" | "vanilla_mw" => PolicySpec::VanillaMw,
                    "smw-uniform" => PolicySpec::Smw { alpha: AlphaVector::uniform(n) },
                    "smw-optimal" => PolicySpec::Smw { alpha: optimal_alpha(net, eps_floor)?.0 },
                    "fluid" => PolicySpec::fluid(net, false)?,
                    "fluid-pickup" => PolicySpec::fluid(net, true)?,
                    other => {
                        return Err(CliError::Usage(format!(
                            "unknown policy '{other}' (expected vanilla, smw-uniform, smw-optimal, fluid, fluid-pickup or a JSON spec)"
                        )))
                    }
                };
                Ok((name.clone(), spec))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Jump,
    Timed,
}

fn default_steps() -> u64 {
    1_000_000
}

fn default_rate() -> f64 {
    1.0
}

fn default_horizon() -> f64 {
    600.0
}

fn default_reps() -> u64 {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Relative paths resolve against the config file's directory.
    pub network: PathBuf,
    pub policies: Vec<PolicyEntry>,
    /// Fleet sizes; slack above the fluid requirement when `k_slack` is set.
    pub k: Vec<u32>,
    #[serde(default)]
    pub k_slack: bool,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default)]
    pub warmup: Option<u64>,
    #[serde(default = "default_rate")]
    pub total_rate: f64,
    #[serde(default = "default_horizon")]
    pub horizon_minutes: f64,
    #[serde(default)]
    pub warmup_fraction: Option<f64>,
    #[serde(default)]
    pub with_pickup: bool,
    /// Also solve the exact chain when the state space is within the cap.
    #[serde(default)]
    pub exact: bool,
    /// Symmetrize the network's demand with this weight before use.
    #[serde(default)]
    pub eta: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialStates {
    Explicit(Vec<Vec<u32>>),
    /// Draw this many states uniformly from the compositions of `k`.
    Sample { sample: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransientConfig {
    pub network: PathBuf,
    pub policies: Vec<PolicyEntry>,
    pub k: u32,
    #[serde(default)]
    pub mode: Mode,
    pub initial_states: InitialStates,
    /// Steps (jump mode) or minutes (timed mode).
    pub horizons: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_reps")]
    pub replications: u64,
    #[serde(default = "default_rate")]
    pub total_rate: f64,
    #[serde(default)]
    pub with_pickup: bool,
    #[serde(default)]
    pub eta: Option<f64>,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn resolve_relative(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn load_network(path: &Path, eta: Option<f64>) -> Result<Network, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let net = Network::from_json(&text).map_err(|e| match e {
        smw_core::Error::Json(j) => CliError::Input(format!("{}: {j}", path.display())),
        other => CliError::Core(other),
    })?;
    match eta {
        None => Ok(net),
        Some(eta) => Ok(net.with_phi(symmetrize_demand(net.phi(), eta)?)?),
    }
}

/// First 16 hex digits of the SHA-256 of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configs serialize");
    let digest = Sha256::digest(&bytes);
    hex::encode(digest)[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use smw_core::generate;

    #[test]
    fn policy_entries_parse_names_and_json() {
        let net = generate::example1();
        let (label, spec) = PolicyEntry::parse("vanilla").unwrap().resolve(&net, 1e-3).unwrap();
        assert_eq!(label, "vanilla");
        assert!(matches!(spec, PolicySpec::VanillaMw));
        let (label, spec) =
            PolicyEntry::parse(r#"{"kind":"smw","alpha":[0.9,0.1]}"#).unwrap().resolve(&net, 1e-3).unwrap();
        assert_eq!(label, "smw");
        assert!(matches!(spec, PolicySpec::Smw { .. }));
        assert!(PolicyEntry::parse("nope").unwrap().resolve(&net, 1e-3).is_err());
    }

    #[test]
    fn sweep_config_rejects_unknown_fields() {
        let ok: Result<SweepConfig, _> = serde_json::from_str(r#"{"network":"a.json","policies":["fluid"],"k":[3]}"#);
        let cfg = ok.unwrap();
        assert_eq!(cfg.steps, 1_000_000);
        assert_eq!(cfg.mode, Mode::Jump);
        let bad: Result<SweepConfig, _> =
            serde_json::from_str(r#"{"network":"a.json","policies":[],"k":[3],"stepz":1}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn initial_states_accept_both_forms() {
        let e: InitialStates = serde_json::from_str("[[1,2],[3,0]]").unwrap();
        assert!(matches!(e, InitialStates::Explicit(ref v) if v.len() == 2));
        let s: InitialStates = serde_json::from_str(r#"{"sample":4}"#).unwrap();
        assert!(matches!(s, InitialStates::Sample { sample: 4 }));
    }

    #[test]
    fn relative_paths_follow_config_dir() {
        let base = Path::new("/x/y/cfg.json");
        assert_eq!(resolve_relative(base, Path::new("net.json")), PathBuf::from("/x/y/net.json"));
        assert_eq!(resolve_relative(base, Path::new("/abs.json")), PathBuf::from("/abs.json"));
    }

    #[test]
    fn hash_is_stable_and_short() {
        let a = config_hash(&vec![1, 2, 3]);
        assert_eq!(a.len(), 16);
        assert_eq!(a, config_hash(&vec![1, 2, 3]));
        assert_ne!(a, config_hash(&vec![1, 2, 4]));
    }
}
