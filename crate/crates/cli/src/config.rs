//! Run configuration: defaults, then a flat TOML file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use georouter::grpo::GrpoConfig;
use georouter::vagueeo::DatasetConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "GEOROUTER_SEED";
pub const DEFAULT_ENDPOINT: &str = "127.0.0.1:7411";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Trainer {
    Grpo,
    Sft,
}

/// Fully resolved configuration, written next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub run_id: String,
    pub out: PathBuf,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub endpoint: String,
    /// Serve tools in-process instead of connecting to `endpoint`.
    pub embedded_server: bool,
    pub latency_ms: u64,
    pub react_steps: usize,
    pub trainer: Trainer,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub updates_per_batch: usize,
    pub probe_every: usize,
}

/// Any subset of [`RunConfig`], as read from a file or the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub run_id: Option<String>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub embedded_server: Option<bool>,
    pub latency_ms: Option<u64>,
    pub react_steps: Option<usize>,
    pub trainer: Option<Trainer>,
    pub train_per_task: Option<usize>,
    pub test_per_task: Option<usize>,
    pub group_size: Option<usize>,
    pub clip_eps: Option<f64>,
    pub kl_coef: Option<f64>,
    pub temperature: Option<f64>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub updates_per_batch: Option<usize>,
    pub probe_every: Option<usize>,
}

macro_rules! overlay {
    ($cfg:expr, $o:expr, [$($field:ident),*], [$($opt:ident),*]) => {
        $(if let Some(v) = $o.$field.clone() { $cfg.$field = v; })*
        $(if $o.$opt.is_some() { $cfg.$opt = $o.$opt.clone(); })*
    };
}

impl RunConfig {
    pub fn defaults(profile: Profile, seed: u64) -> Self {
        let (data, grpo) = match profile {
            Profile::Desk => (DatasetConfig::desk(), GrpoConfig::desk()),
            Profile::Paper => (DatasetConfig::paper(), GrpoConfig::paper()),
        };
        let name = match profile {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        };
        RunConfig {
            profile,
            seed,
            run_id: format!("{name}-seed{seed}"),
            out: PathBuf::from("runs"),
            dataset: None,
            checkpoint: None,
            endpoint: DEFAULT_ENDPOINT.to_string(),
            embedded_server: false,
            latency_ms: 0,
            react_steps: 3,
            trainer: Trainer::Grpo,
            train_per_task: data.train_per_task,
            test_per_task: data.test_per_task,
            group_size: grpo.group_size,
            clip_eps: grpo.clip_eps,
            kl_coef: grpo.kl_coef,
            temperature: grpo.temperature,
            learning_rate: grpo.learning_rate,
            epochs: grpo.epochs,
            batch_size: grpo.batch_size,
            updates_per_batch: grpo.updates_per_batch,
            probe_every: grpo.probe_every,
        }
    }

    /// Defaults for the chosen profile, then `file`, then `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides, env_seed: Option<&str>) -> Result<Self> {
        let from_file = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str::<Overrides>(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => Overrides::default(),
        };
        let profile = flags.profile.or(from_file.profile).unwrap_or(Profile::Desk);
        let env_seed = match env_seed {
            Some(s) => Some(s.trim().parse::<u64>().with_context(|| format!("{SEED_ENV}={s:?} is not a seed"))?),
            None => None,
        };
        let seed = env_seed.unwrap_or(0);
        let mut cfg = RunConfig::defaults(profile, seed);
        for o in [&from_file, flags] {
            overlay!(
                cfg,
                o,
                [
                    seed, out, endpoint, embedded_server, latency_ms, react_steps, trainer, train_per_task,
                    test_per_task, group_size, clip_eps, kl_coef, temperature, learning_rate, epochs,
                    batch_size, updates_per_batch, probe_every
                ],
                [dataset, checkpoint]
            );
        }
        cfg.run_id = flags
            .run_id
            .clone()
            .or(from_file.run_id)
            .unwrap_or_else(|| RunConfig::defaults(profile, cfg.seed).run_id);
        cfg.grpo().validate()?;
        if cfg.react_steps < 3 {
            bail!("react_steps must be at least 3");
        }
        Ok(cfg)
    }

    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.group_size,
            clip_eps: self.clip_eps,
            kl_coef: self.kl_coef,
            temperature: self.temperature,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            updates_per_batch: self.updates_per_batch,
            probe_every: self.probe_every,
            seed: self.seed,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig { train_per_task: self.train_per_task, test_per_task: self.test_per_task, ..DatasetConfig::desk() }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\nepochs = 2\nkl_coef = 0.5\n").unwrap();
        let flags = Overrides { seed: Some(9), ..Overrides::default() };
        let cfg = RunConfig::resolve(Some(&path), &flags, Some("4")).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.kl_coef, 0.5);
        assert_eq!(cfg.run_id, "desk-seed9");
        assert_eq!(cfg.batch_size, GrpoConfig::desk().batch_size);
    }

    #[test]
    fn env_seed_is_the_default_seed() {
        let cfg = RunConfig::resolve(None, &Overrides::default(), Some("12")).unwrap();
        assert_eq!(cfg.seed, 12);
        assert!(RunConfig::resolve(None, &Overrides::default(), Some("x")).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::resolve(None, &Overrides { profile: Some(Profile::Paper), ..Overrides::default() }, None)
            .unwrap();
        assert_eq!(cfg.train_per_task, 1000);
        let text = cfg.to_toml().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resolved.toml");
        std::fs::write(&path, &text).unwrap();
        let again = RunConfig::resolve(Some(&path), &Overrides::default(), Some("77")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "sede = 3\n").unwrap();
        assert!(RunConfig::resolve(Some(&path), &Overrides::default(), None).is_err());
    }
}
