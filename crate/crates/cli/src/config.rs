//! Run configuration: built-in defaults, then a flat TOML file, then flags.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use pgim::crf::TrainConfig;
use pgim::embedder::{Backend, EmbedderSpec};
use pgim::knowledge::EngineConfig;
use pgim::promptgen::PromptMode;
use pgim::seeds::derive_seed;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Mock,
    Openai,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendArg {
    Hashed,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Knowledge,
    Direct,
}

/// Every tunable, fully resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,

    pub backend: BackendArg,
    pub d: usize,
    pub e: usize,
    pub buckets: usize,
    pub max_length: usize,
    pub fusion_store: Option<PathBuf>,
    pub token_vectors: Option<PathBuf>,

    pub exemplars: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub prompt_mode: ModeArg,
    pub n: usize,

    pub engine: EngineKind,
    pub endpoint: String,
    pub llm_model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub api_key_env: String,
    pub concurrency: usize,
    pub mock_fixtures: Option<PathBuf>,
    /// Fixed mock answer; without it the mock restates the test text.
    pub mock_response: Option<String>,
    pub cache_dir: Option<PathBuf>,

    pub model_file: Option<PathBuf>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub baseline: bool,
    pub case_insensitive: bool,
}

impl Default for Settings {
    fn default() -> Self {
        let emb = EmbedderSpec::default();
        let eng = EngineConfig::default();
        let tr = TrainConfig::default();
        Settings {
            seed: 0,
            backend: BackendArg::Hashed,
            d: emb.d,
            e: emb.e,
            buckets: emb.buckets,
            max_length: emb.max_length,
            fusion_store: None,
            token_vectors: None,
            exemplars: None,
            template: None,
            prompt_mode: ModeArg::Knowledge,
            n: pgim::msea::DEFAULT_TOP_N,
            engine: EngineKind::Mock,
            endpoint: eng.endpoint,
            llm_model: eng.model,
            temperature: eng.temperature,
            max_tokens: eng.max_tokens.unwrap_or(0),
            timeout_secs: eng.timeout_secs,
            max_attempts: eng.max_attempts,
            backoff_ms: eng.backoff_ms,
            api_key_env: eng.api_key_env,
            concurrency: eng.concurrency,
            mock_fixtures: None,
            mock_response: None,
            cache_dir: None,
            model_file: None,
            lr: tr.lr,
            batch_size: tr.batch_size,
            epochs: tr.epochs,
            warmup_frac: tr.warmup_frac,
            weight_decay: tr.weight_decay,
            beta1: tr.beta1,
            beta2: tr.beta2,
            eps: tr.eps,
            baseline: false,
            case_insensitive: false,
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Command-line overrides; a flag that is given wins over the config file.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Overrides {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendArg>,
    /// Fusion vector dimension.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    /// Token vector dimension.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buckets: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_length: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_store: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_vectors: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exemplars: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_mode: Option<ModeArg>,
    /// Number of in-context examples.
    #[arg(long, short = 'n', global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long, global = true, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub engine: Option<EngineKind>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm_model: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_attempts: Option<u32>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backoff_ms: Option<u64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concurrency: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_fixtures: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_response: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[arg(long = "model", global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_file: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_frac: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// Train and predict without knowledge (text plus separator only).
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "is_false")]
    pub baseline: bool,
    /// Case-insensitive surface matching for direct-prediction scoring.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "is_false")]
    pub case_insensitive: bool,
}

impl Settings {
    /// Defaults, overlaid by `file` (flat TOML), overlaid by `flags`.
    pub fn resolve(file: Option<&str>, flags: &Overrides) -> Result<Self> {
        let mut table = toml::Table::try_from(Settings::default())?;
        if let Some(src) = file {
            let from_file: toml::Table = toml::from_str(src).context("parsing config file")?;
            table.extend(from_file);
        }
        table.extend(toml::Table::try_from(flags)?);
        let settings: Settings = table.try_into().context("invalid configuration")?;
        settings.check()?;
        Ok(settings)
    }

    fn check(&self) -> Result<()> {
        self.embedder_spec().validate()?;
        self.engine_config().validate()?;
        self.train_config().validate()?;
        if !(0.0..=2.0).contains(&self.temperature) {
            anyhow::bail!("temperature must lie in [0, 2]");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn embedder_spec(&self) -> EmbedderSpec {
        EmbedderSpec {
            backend: match self.backend {
                BackendArg::Hashed => Backend::Hashed,
                BackendArg::File => Backend::File,
            },
            d: self.d,
            e: self.e,
            seed: Some(derive_seed(self.seed, "embedder")),
            path: self.fusion_store.clone(),
            token_path: self.token_vectors.clone(),
            buckets: self.buckets,
            max_length: self.max_length,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            endpoint: self.endpoint.clone(),
            model: self.llm_model.clone(),
            temperature: self.temperature,
            max_tokens: (self.max_tokens > 0).then_some(self.max_tokens),
            timeout_secs: self.timeout_secs,
            max_attempts: self.max_attempts,
            backoff_ms: self.backoff_ms,
            api_key_env: self.api_key_env.clone(),
            concurrency: self.concurrency,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            warmup_frac: self.warmup_frac,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            seed: derive_seed(self.seed, "train"),
            max_length: self.max_length,
        }
    }

    pub fn prompt_mode(&self) -> PromptMode {
        match self.prompt_mode {
            ModeArg::Knowledge => PromptMode::Knowledge,
            ModeArg::Direct => PromptMode::Direct,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let s = Settings::resolve(None, &Overrides::default()).unwrap();
        assert_eq!(s, Settings::default());
        let file = "lr = 0.01\nepochs = 3\n";
        let s = Settings::resolve(Some(file), &Overrides::default()).unwrap();
        assert_eq!((s.lr, s.epochs, s.batch_size), (0.01, 3, 4));
        let flags = Overrides {
            epochs: Some(7),
            ..Default::default()
        };
        let s = Settings::resolve(Some(file), &flags).unwrap();
        assert_eq!((s.lr, s.epochs), (0.01, 7));
    }

    #[test]
    fn snapshot_round_trips_and_unknown_keys_fail() {
        let flags = Overrides {
            seed: Some(9),
            exemplars: Some("ex.jsonl".into()),
            baseline: true,
            ..Default::default()
        };
        let s = Settings::resolve(None, &flags).unwrap();
        let again = Settings::resolve(Some(&s.to_toml().unwrap()), &Overrides::default()).unwrap();
        assert_eq!(s, again);
        assert!(Settings::resolve(Some("learning_rate = 1\n"), &Overrides::default()).is_err());
        assert!(Settings::resolve(Some("epochs = 0\nlr = -1.0\n"), &Overrides::default()).is_err());
    }
}
