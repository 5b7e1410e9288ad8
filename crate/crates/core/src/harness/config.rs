use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::enomp::EnompOptions;
use crate::error::{Error, Result};
use crate::sysmodel::SystemConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Fig4,
    Fig6,
    Theorem1,
    Extract,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Fig4 => "fig4",
            Experiment::Fig6 => "fig6",
            Experiment::Theorem1 => "theorem1",
            Experiment::Extract => "extract",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Experiment::Fig4 => 4,
            Experiment::Fig6 => 6,
            Experiment::Theorem1 => 1,
            Experiment::Extract => 0,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig4" => Ok(Experiment::Fig4),
            "fig6" => Ok(Experiment::Fig6),
            "theorem1" => Ok(Experiment::Theorem1),
            "extract" => Ok(Experiment::Extract),
            other => Err(Error::InvalidConfig(format!("unknown experiment '{other}'"))),
        }
    }
}

/// Experiment configuration as read from TOML. Unset optional fields take
/// per-experiment defaults in [`ExperimentConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// If set, must match the experiment being run.
    pub experiment: Option<Experiment>,
    pub seed: u64,
    pub trials: Option<usize>,
    pub snr_db: Option<Vec<f64>>,
    pub deltas: Option<Vec<f64>>,
    pub users: Option<usize>,
    pub paths: usize,
    pub attenuation_db: Option<[f64; 2]>,
    /// Angle draws behind the LMMSE spatial covariance.
    pub covariance_draws: usize,
    /// Error draws per point in the SINR validation.
    pub monte_carlo_draws: usize,
    pub out: Option<PathBuf>,
    pub system: SystemConfig,
    pub enomp: EnompOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: 1,
            trials: None,
            snr_db: None,
            deltas: None,
            users: None,
            paths: 6,
            attenuation_db: None,
            covariance_draws: 10_000,
            monte_carlo_draws: 10_000,
            out: None,
            system: SystemConfig::default(),
            enomp: EnompOptions::default(),
        }
    }
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub experiment: Experiment,
    pub seed: u64,
    pub trials: usize,
    pub snr_db: Vec<f64>,
    pub deltas: Vec<f64>,
    pub users: usize,
    pub paths: usize,
    pub attenuation_db: [f64; 2],
    pub covariance_draws: usize,
    pub monte_carlo_draws: usize,
    pub system: SystemConfig,
    pub enomp: EnompOptions,
}

impl RunSettings {
    /// Stream id separating the seeds of different experiments.
    pub(crate) fn stream(&self) -> u64 {
        self.experiment.stream()
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn resolve(&self, experiment: Experiment) -> Result<RunSettings> {
        if let Some(e) = self.experiment {
            if e != experiment {
                return Err(Error::InvalidConfig(format!(
                    "config is for '{e}' but '{experiment}' was requested"
                )));
            }
        }
        use Experiment::*;
        let trials = self.trials.unwrap_or(match experiment {
            Fig4 => 100,
            Fig6 => 50,
            Theorem1 => 5,
            Extract => 1,
        });
        let snr_db = self.snr_db.clone().unwrap_or_else(|| match experiment {
            Fig4 => vec![0.0, 5.0, 10.0, 15.0, 20.0],
            Fig6 | Theorem1 | Extract => vec![10.0],
        });
        let deltas = self.deltas.clone().unwrap_or_else(|| match experiment {
            Theorem1 => vec![0.0, 1e-3, 1e-2, 1e-1],
            _ => vec![1e-3, 1e-2, 1e-1],
        });
        let users = self.users.unwrap_or(match experiment {
            Fig4 | Extract => 1,
            Fig6 | Theorem1 => 10,
        });
        let attenuation_db = self.attenuation_db.unwrap_or(match experiment {
            Fig4 | Extract => [0.0, 0.0],
            Fig6 | Theorem1 => [-10.0, 0.0],
        });

        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if snr_db.is_empty() || snr_db.iter().any(|s| !s.is_finite()) {
            return bad("snr_db must be a nonempty list of finite values".into());
        }
        if deltas.is_empty() {
            return bad("deltas must be nonempty".into());
        }
        let delta_ok = |d: f64| match experiment {
            Theorem1 => (0.0..1.0).contains(&d),
            _ => d > 0.0 && d < 1.0,
        };
        if !deltas.iter().all(|&d| delta_ok(d)) {
            return bad(format!("deltas out of range: {deltas:?}"));
        }
        if users == 0 || self.paths == 0 {
            return bad("users and paths must be at least 1".into());
        }
        if users > self.system.num_antennas() {
            return bad("more users than antennas".into());
        }
        if !(attenuation_db[0] <= attenuation_db[1]) {
            return bad("attenuation_db must be [low, high]".into());
        }
        if self.covariance_draws == 0 || self.monte_carlo_draws == 0 {
            return bad("draw counts must be at least 1".into());
        }
        if self.enomp.max_paths == 0 || !(self.enomp.noise_variance > 0.0) {
            return bad("enomp.max_paths and enomp.noise_variance must be positive".into());
        }
        self.system.validate()?;

        Ok(RunSettings {
            experiment,
            seed: self.seed,
            trials,
            snr_db,
            deltas,
            users,
            paths: self.paths,
            attenuation_db,
            covariance_draws: self.covariance_draws,
            monte_carlo_draws: self.monte_carlo_draws,
            system: self.system.clone(),
            enomp: self.enomp,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let fig4 = cfg.resolve(Experiment::Fig4).unwrap();
        assert_eq!(fig4.trials, 100);
        assert_eq!(cfg.resolve(Experiment::Fig6).unwrap().trials, 50);
        assert_eq!(fig4.system, SystemConfig::default());
    }

    #[test]
    fn nested_sections_parse() {
        let text = r#"
            experiment = "fig6"
            seed = 9
            trials = 3
            deltas = [0.01]
            [system]
            m_v = 4
            m_h = 4
            [enomp]
            cyclic_rounds = 2
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        let run = cfg.resolve(Experiment::Fig6).unwrap();
        assert_eq!(run.seed, 9);
        assert_eq!(run.system.m_v, 4);
        assert_eq!(run.system.n_subcarriers, 256);
        assert_eq!(run.enomp.cyclic_rounds, 2);
        assert_eq!(run.deltas, vec![0.01]);
        assert!(cfg.resolve(Experiment::Fig4).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("tirals = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("[system]\nmv = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("[enomp]\nrounds = 3").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = ExperimentConfig {
            trials: Some(0),
            ..Default::default()
        };
        assert!(cfg.resolve(Experiment::Fig4).is_err());
        cfg.trials = Some(1);
        cfg.snr_db = Some(vec![]);
        assert!(cfg.resolve(Experiment::Fig4).is_err());
        cfg.snr_db = None;
        cfg.deltas = Some(vec![0.0]);
        assert!(cfg.resolve(Experiment::Fig6).is_err());
        assert!(cfg.resolve(Experiment::Theorem1).is_ok());
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in [Experiment::Fig4, Experiment::Fig6, Experiment::Theorem1, Experiment::Extract] {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("fig5".parse::<Experiment>().is_err());
    }
}
