//! Layered experiment configuration: built-in defaults, then a TOML file,
//! then command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rlcharge::baselines::CcCvConfig;
use rlcharge::ddpg::TrainConfig;
use rlcharge::env::{AgingScenario, EnvConfig, ObservationMode};
use rlcharge::params::{CellParameters, Discretization};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Colon-separated directories searched for relative parameter files.
pub const PARAMS_PATH_VAR: &str = "RLCHARGE_PARAMS_PATH";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Cell parameter file; the built-in graphite/NMC cell when absent.
    pub params: Option<PathBuf>,
    pub seeds: Vec<u64>,
    /// Observation modes to train side by side. Empty means the single
    /// mode in `env.observation_mode`.
    pub modes: Vec<ObservationMode>,
    pub discretization: Discretization,
    pub env: EnvConfig,
    pub train: TrainConfig,
    /// Perturbation used by `age`.
    pub scenario: AgingScenario,
    pub cccv: CcCvConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            params: None,
            seeds: vec![0],
            modes: Vec::new(),
            discretization: Discretization::default(),
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            scenario: AgingScenario::AGED,
            cccv: CcCvConfig::default(),
        }
    }
}

/// `--obs` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsChoice {
    One(ObservationMode),
    Both,
}

impl std::str::FromStr for ObsChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "both" => Ok(Self::Both),
            other => other.parse().map(Self::One).map_err(|e: rlcharge::Error| e.to_string()),
        }
    }
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub obs: Option<ObsChoice>,
    pub seeds: Option<Vec<u64>>,
    pub episodes: Option<usize>,
    pub scenario: Option<AgingScenario>,
}

/// `N` means seeds `0..N`; a comma-separated list is taken literally.
pub fn parse_seeds(s: &str) -> std::result::Result<Vec<u64>, String> {
    let seeds: Vec<u64> = if s.contains(',') {
        s.split(',')
            .map(|p| p.trim().parse::<u64>().map_err(|e| format!("bad seed `{p}`: {e}")))
            .collect::<std::result::Result<_, _>>()?
    } else {
        let n: u64 = s.trim().parse().map_err(|e| format!("bad seed count `{s}`: {e}"))?;
        (0..n).collect()
    };
    if seeds.is_empty() {
        return Err("at least one seed is required".into());
    }
    Ok(seeds)
}

/// `aged`, `identity`, `film=F,heat=H`, or a TOML file with the two multipliers.
pub fn parse_scenario(s: &str) -> Result<AgingScenario> {
    let scenario = match s {
        "aged" => AgingScenario::AGED,
        "identity" => AgingScenario::IDENTITY,
        _ if s.contains('=') => {
            let mut sc = AgingScenario::IDENTITY;
            for part in s.split(',') {
                let (k, v) = part.split_once('=').context("expected key=value")?;
                let v: f64 = v.trim().parse().with_context(|| format!("bad multiplier `{v}`"))?;
                match k.trim() {
                    "film" => sc.film_resistance_multiplier = v,
                    "heat" => sc.heat_generation_multiplier = v,
                    other => bail!("unknown scenario key `{other}` (expected film or heat)"),
                }
            }
            sc
        }
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading scenario file {path}"))?;
            toml::from_str(&text).with_context(|| format!("parsing scenario file {path}"))?
        }
    };
    scenario.validate()?;
    Ok(scenario)
}

/// A configuration with every layer applied and its parameter file loaded.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub params: CellParameters,
    /// Where the parameter file was found, if one was named.
    pub params_path: Option<PathBuf>,
}

impl Resolved {
    pub fn load(config_path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let (mut config, base_dir) = match config_path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let c: ExperimentConfig =
                    toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                (c, p.parent().map(Path::to_path_buf))
            }
            None => (ExperimentConfig::default(), None),
        };
        config.apply(overrides);
        let params_path = match &config.params {
            Some(p) => Some(find_params(p, base_dir.as_deref())?),
            None => None,
        };
        let params = match &params_path {
            Some(p) => CellParameters::from_file(p)?,
            None => CellParameters::default_graphite_nmc(),
        };
        Self::from_parts(config, params, params_path)
    }

    pub fn from_parts(config: ExperimentConfig, params: CellParameters, params_path: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        Ok(Self {
            config,
            params,
            params_path,
        })
    }

    pub fn config_toml(&self) -> String {
        toml::to_string(&self.config).expect("experiment config serializes")
    }

    /// Hash of the resolved configuration and the parameter values it uses.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_toml().as_bytes());
        h.update(b"\0");
        h.update(self.params.to_toml_string().as_bytes());
        hex::encode(h.finalize())
    }
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) {
        match o.obs {
            Some(ObsChoice::One(m)) => {
                self.env.observation_mode = m;
                self.modes.clear();
            }
            Some(ObsChoice::Both) => self.modes = vec![ObservationMode::Simplified, ObservationMode::Full],
            None => {}
        }
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(e) = o.episodes {
            self.train.episodes = e;
        }
        if let Some(s) = o.scenario {
            self.scenario = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        self.discretization.validate()?;
        self.env.validate()?;
        self.train.validate()?;
        self.scenario.validate()?;
        self.cccv.validate(&self.env)?;
        Ok(())
    }

    pub fn modes(&self) -> Vec<ObservationMode> {
        if self.modes.is_empty() {
            vec![self.env.observation_mode]
        } else {
            self.modes.clone()
        }
    }

    pub fn env_for(&self, mode: ObservationMode) -> EnvConfig {
        EnvConfig {
            observation_mode: mode,
            ..self.env
        }
    }

    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

/// Absolute paths are used as given. Relative ones are tried against the
/// config file's directory, the working directory, then each directory in
/// the search-path variable.
pub fn find_params(name: &Path, config_dir: Option<&Path>) -> Result<PathBuf> {
    if name.is_absolute() {
        return Ok(name.to_path_buf());
    }
    let mut candidates: Vec<PathBuf> = Vec::new();
    if let Some(d) = config_dir {
        candidates.push(d.join(name));
    }
    candidates.push(name.to_path_buf());
    if let Some(var) = std::env::var_os(PARAMS_PATH_VAR) {
        candidates.extend(std::env::split_paths(&var).map(|d| d.join(name)));
    }
    candidates.iter().find(|c| c.is_file()).cloned().ok_or_else(|| {
        std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!(
                "parameter file {} not found (searched {})",
                name.display(),
                candidates.iter().map(|c| c.display().to_string()).collect::<Vec<_>>().join(", ")
            ),
        )
        .into()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_count_or_list() {
        assert_eq!(parse_seeds("3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("4,9").unwrap(), vec![4, 9]);
        assert!(parse_seeds("0").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn scenario_forms() {
        assert_eq!(parse_scenario("aged").unwrap(), AgingScenario::AGED);
        assert_eq!(parse_scenario("identity").unwrap(), AgingScenario::IDENTITY);
        let s = parse_scenario("film=3,heat=1.2").unwrap();
        assert_eq!((s.film_resistance_multiplier, s.heat_generation_multiplier), (3.0, 1.2));
        assert!(parse_scenario("film=-1").is_err());
        assert!(parse_scenario("cool=2").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut c = ExperimentConfig::default();
        c.apply(&Overrides {
            obs: Some(ObsChoice::Both),
            seeds: Some(vec![7]),
            episodes: Some(3),
            scenario: None,
        });
        assert_eq!(c.modes(), vec![ObservationMode::Simplified, ObservationMode::Full]);
        assert_eq!(c.seeds, vec![7]);
        assert_eq!(c.train.episodes, 3);
        c.apply(&Overrides {
            obs: Some(ObsChoice::One(ObservationMode::Full)),
            ..Overrides::default()
        });
        assert_eq!(c.modes(), vec![ObservationMode::Full]);
    }

    #[test]
    fn config_round_trips_and_hash_is_stable() {
        let r = Resolved::from_parts(ExperimentConfig::default(), CellParameters::default_graphite_nmc(), None).unwrap();
        let back: ExperimentConfig = toml::from_str(&r.config_toml()).unwrap();
        assert_eq!(back, r.config);
        assert_eq!(r.hash(), r.clone().hash());
        let mut other = r.clone();
        other.config.train.episodes += 1;
        assert_ne!(other.hash(), r.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("[env]\nsoc_start = 0.2\n").is_err());
        let c: ExperimentConfig = toml::from_str("seeds = [1, 2]\n[env]\nsoc_init = 0.25\n").unwrap();
        assert_eq!(c.env.soc_init, 0.25);
        assert_eq!(c.env.v_max, 4.2);
    }
}
