//! Flat `key = value` training configuration with two built-in profiles.
//!
//! The `profile` key picks the defaults (`desk` or `paper`); every other key
//! overrides one field. Blank lines and `#` comments are ignored. Empty path
//! values mean "unset".

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::LengthLimits;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}, expected desk or paper"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub profile: Profile,
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub disc_emb_dim: usize,
    pub disc_windows: Vec<usize>,
    pub disc_kernels: usize,
    pub source_len: usize,
    pub target_len: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub lambda: f64,
    pub rollouts: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    pub sync_interval: usize,
    pub baseline_decay: f64,
    pub sources_per_step: usize,
    pub samples_per_source: usize,
    pub advantage_bound: f64,
    pub disc_batch_size: usize,
    pub pretrain_epochs: usize,
    pub disc_epochs: usize,
    pub adv_rounds: usize,
    pub seed: u64,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub generator_checkpoint: Option<PathBuf>,
    pub discriminator_checkpoint: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

impl TrainingConfig {
    pub fn profile(profile: Profile) -> Self {
        let (vocab_size, emb_dim, hidden_dim, batch_size) = match profile {
            Profile::Desk => (2_000, 64, 128, 32),
            Profile::Paper => (50_000, 256, 512, 200),
        };
        TrainingConfig {
            profile,
            vocab_size,
            emb_dim,
            hidden_dim,
            disc_emb_dim: emb_dim,
            disc_windows: vec![1, 2, 3, 4],
            disc_kernels: 25,
            source_len: LengthLimits::CNN_DM.source,
            target_len: LengthLimits::CNN_DM.target,
            batch_size,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 2.0,
            lambda: 0.7,
            rollouts: 16,
            g_steps: 1,
            d_steps: 5,
            sync_interval: 1,
            baseline_decay: 0.9,
            sources_per_step: 8,
            samples_per_source: 1,
            advantage_bound: 1.0,
            disc_batch_size: 64,
            pretrain_epochs: 30,
            disc_epochs: 5,
            adv_rounds: 4,
            seed: 1,
            train_path: None,
            valid_path: None,
            generator_checkpoint: None,
            discriminator_checkpoint: None,
            metrics_path: None,
        }
    }

    pub fn limits(&self) -> LengthLimits {
        LengthLimits {
            source: self.source_len,
            target: self.target_len,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Discriminator layout for an actual vocabulary size.
    pub fn discriminator(&self, vocab_size: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            vocab_size,
            emb_dim: self.disc_emb_dim,
            windows: self.disc_windows.clone(),
            kernels_per_window: self.disc_kernels,
            seq_len: self.target_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("emb_dim", self.emb_dim),
            ("hidden_dim", self.hidden_dim),
            ("disc_emb_dim", self.disc_emb_dim),
            ("disc_kernels", self.disc_kernels),
            ("source_len", self.source_len),
            ("target_len", self.target_len),
            ("batch_size", self.batch_size),
            ("rollouts", self.rollouts),
            ("sync_interval", self.sync_interval),
            ("sources_per_step", self.sources_per_step),
            ("samples_per_source", self.samples_per_source),
            ("disc_batch_size", self.disc_batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 5 {
            return Err(Error::Config("vocab_size must leave room for at least one word".into()));
        }
        if self.disc_windows.is_empty() || self.disc_windows.iter().any(|&h| h == 0 || h > self.target_len) {
            return Err(Error::Config(format!(
                "disc_windows must be non-empty and within 1..={}",
                self.target_len
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config("baseline_decay must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        for (name, v) in [("lr", self.lr), ("eps", self.eps), ("clip_norm", self.clip_norm), ("advantage_bound", self.advantage_bound)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Canonical text form; [`Self::parse`] inverts it exactly.
    pub fn render(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let windows: Vec<String> = self.disc_windows.iter().map(usize::to_string).collect();
        let entries: Vec<(&str, String)> = vec![
            ("profile", self.profile.as_str().to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("emb_dim", self.emb_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("disc_emb_dim", self.disc_emb_dim.to_string()),
            ("disc_windows", windows.join(",")),
            ("disc_kernels", self.disc_kernels.to_string()),
            ("source_len", self.source_len.to_string()),
            ("target_len", self.target_len.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("lambda", self.lambda.to_string()),
            ("rollouts", self.rollouts.to_string()),
            ("g_steps", self.g_steps.to_string()),
            ("d_steps", self.d_steps.to_string()),
            ("sync_interval", self.sync_interval.to_string()),
            ("baseline_decay", self.baseline_decay.to_string()),
            ("sources_per_step", self.sources_per_step.to_string()),
            ("samples_per_source", self.samples_per_source.to_string()),
            ("advantage_bound", self.advantage_bound.to_string()),
            ("disc_batch_size", self.disc_batch_size.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("disc_epochs", self.disc_epochs.to_string()),
            ("adv_rounds", self.adv_rounds.to_string()),
            ("seed", self.seed.to_string()),
            ("train_path", path(&self.train_path)),
            ("valid_path", path(&self.valid_path)),
            ("generator_checkpoint", path(&self.generator_checkpoint)),
            ("discriminator_checkpoint", path(&self.discriminator_checkpoint)),
            ("metrics_path", path(&self.metrics_path)),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses configuration text. Relative paths stay as written.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if entries.iter().any(|(_, seen, _)| *seen == k) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
            entries.push((i + 1, k, v.trim()));
        }
        let profile = match entries.iter().find(|(_, k, _)| *k == "profile") {
            Some((_, _, v)) => v.parse()?,
            None => Profile::Desk,
        };
        let mut config = Self::profile(profile);
        for (line, k, v) in entries {
            config
                .set(k, v)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "profile" => self.profile = value.parse()?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "emb_dim" => self.emb_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "disc_emb_dim" => self.disc_emb_dim = num(key, value)?,
            "disc_windows" => {
                self.disc_windows = value
                    .split(',')
                    .map(|w| num(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "disc_kernels" => self.disc_kernels = num(key, value)?,
            "source_len" => self.source_len = num(key, value)?,
            "target_len" => self.target_len = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "rollouts" => self.rollouts = num(key, value)?,
            "g_steps" => self.g_steps = num(key, value)?,
            "d_steps" => self.d_steps = num(key, value)?,
            "sync_interval" => self.sync_interval = num(key, value)?,
            "baseline_decay" => self.baseline_decay = num(key, value)?,
            "sources_per_step" => self.sources_per_step = num(key, value)?,
            "samples_per_source" => self.samples_per_source = num(key, value)?,
            "advantage_bound" => self.advantage_bound = num(key, value)?,
            "disc_batch_size" => self.disc_batch_size = num(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, value)?,
            "disc_epochs" => self.disc_epochs = num(key, value)?,
            "adv_rounds" => self.adv_rounds = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "train_path" => self.train_path = path(value),
            "valid_path" => self.valid_path = path(value),
            "generator_checkpoint" => self.generator_checkpoint = path(value),
            "discriminator_checkpoint" => self.discriminator_checkpoint = path(value),
            "metrics_path" => self.metrics_path = path(value),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }
}
