//! Run configuration: one fully resolved struct feeding every
//! subcommand, merged as flags > config file > defaults, and written
//! next to every output so any artifact can be regenerated.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ladia_core::db::ResultFormat;
use ladia_core::inference::RunOptions;
use ladia_core::model::{LatentConfig, Model, ModelConfig};
use ladia_core::training::TrainConfig;

/// Every knob a run can turn, fully resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // Architecture.
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub ctx_dim: usize,
    pub mlp_dim: usize,
    pub attn_dim: usize,
    pub feature_dim: usize,
    pub n_latent: usize,
    pub k_latent: usize,
    pub attention: bool,
    /// Condition the prior on the user encoding as well as the context.
    pub prior_sees_user_enc: bool,
    pub max_len: usize,

    // Optimization.
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub tau_start: f64,
    pub tau_floor: f64,
    pub tau_rate: f64,
    /// `None`: first fifth of `max_steps`.
    pub kl_warmup: Option<usize>,
    pub beta_end: f64,
    pub dropout: f64,
    pub clip_norm: f64,
    pub seed: u64,

    // Data and query handling.
    pub min_freq: usize,
    /// Parse and render queries as `query slot value ...` instead of the
    /// positional form.
    pub named_queries: bool,
    /// Append the match count to db_result turns.
    pub append_count: bool,
    pub max_query_attempts: usize,
    /// Slot alignment for positional query values; empty means database
    /// schema order. The `synth` command fills this from its generator
    /// spec so downstream commands parse queries consistently.
    #[serde(default)]
    pub slot_order: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            embed_dim: 100,
            hidden_dim: 250,
            ctx_dim: 100,
            mlp_dim: 100,
            attn_dim: 100,
            feature_dim: 100,
            n_latent: 10,
            k_latent: 20,
            attention: true,
            prior_sees_user_enc: true,
            max_len: 40,
            lr: 1e-3,
            batch_size: 32,
            max_steps: 2000,
            tau_start: 1.0,
            tau_floor: 0.3,
            tau_rate: 1e-3,
            kl_warmup: None,
            beta_end: 1.0,
            dropout: 0.3,
            clip_norm: 5.0,
            seed: 0,
            min_freq: 1,
            named_queries: false,
            append_count: false,
            max_query_attempts: 3,
            slot_order: Vec::new(),
        }
    }
}

/// Partial configuration from a file or flags; `None` fields keep the
/// previous layer's value.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub ctx_dim: Option<usize>,
    pub mlp_dim: Option<usize>,
    pub attn_dim: Option<usize>,
    pub feature_dim: Option<usize>,
    pub n_latent: Option<usize>,
    pub k_latent: Option<usize>,
    pub attention: Option<bool>,
    pub prior_sees_user_enc: Option<bool>,
    pub max_len: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_steps: Option<usize>,
    pub tau_start: Option<f64>,
    pub tau_floor: Option<f64>,
    pub tau_rate: Option<f64>,
    pub kl_warmup: Option<usize>,
    pub beta_end: Option<f64>,
    pub dropout: Option<f64>,
    pub clip_norm: Option<f64>,
    pub seed: Option<u64>,
    pub min_freq: Option<usize>,
    pub named_queries: Option<bool>,
    pub append_count: Option<bool>,
    pub max_query_attempts: Option<usize>,
    pub slot_order: Option<Vec<String>>,
}

macro_rules! apply_fields {
    ($cfg:expr, $patch:expr, copy: [$($d:ident),* $(,)?], clone: [$($c:ident),* $(,)?], option: [$($o:ident),* $(,)?]) => {
        $(if let Some(v) = $patch.$d { $cfg.$d = v; })*
        $(if let Some(v) = &$patch.$c { $cfg.$c = v.clone(); })*
        $(if $patch.$o.is_some() { $cfg.$o = $patch.$o; })*
    };
}

impl ConfigPatch {
    pub fn apply(&self, cfg: &mut RunConfig) {
        apply_fields!(
            cfg,
            self,
            copy: [
                embed_dim, hidden_dim, ctx_dim, mlp_dim, attn_dim, feature_dim,
                n_latent, k_latent, attention, prior_sees_user_enc, max_len,
                lr, batch_size, max_steps, tau_start, tau_floor, tau_rate,
                beta_end, dropout, clip_norm, seed, min_freq,
                named_queries, append_count, max_query_attempts,
            ],
            clone: [slot_order],
            option: [kl_warmup]
        );
    }
}

impl RunConfig {
    /// Resolve defaults, an optional config file, then flag overrides,
    /// in that precedence order.
    pub fn resolve(file: Option<&Path>, flags: &ConfigPatch) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let raw = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let patch: ConfigPatch = serde_json::from_str(&raw)
                .with_context(|| format!("{}: malformed config", path.display()))?;
            patch.apply(&mut cfg);
        }
        flags.apply(&mut cfg);
        Ok(cfg)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            ctx_dim: self.ctx_dim,
            mlp_dim: self.mlp_dim,
            attn_dim: self.attn_dim,
            latent: LatentConfig {
                n: self.n_latent,
                k: self.k_latent,
                feature_dim: self.feature_dim,
            },
            attention: self.attention,
            prior_sees_user_enc: self.prior_sees_user_enc,
            max_len: self.max_len,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            tau_start: self.tau_start,
            tau_floor: self.tau_floor,
            tau_rate: self.tau_rate,
            kl_warmup: self.kl_warmup.unwrap_or((self.max_steps / 5).max(1)),
            beta_end: self.beta_end,
            dropout: self.dropout,
            clip_norm: self.clip_norm,
            seed: self.seed,
        }
    }

    /// Inference options. Architecture always comes from the checkpoint;
    /// only runtime behavior is taken from the run config.
    pub fn run_options(&self, model: &Model) -> RunOptions {
        let mut opts = RunOptions::new(model);
        opts.max_len = self.max_len.min(model.config.max_len);
        opts.named_queries = self.named_queries;
        opts.slot_order = self.slot_order.clone();
        opts.result_format = ResultFormat {
            append_count: self.append_count,
        };
        opts.max_query_attempts = self.max_query_attempts;
        opts
    }

    /// Path of the resolved-config copy accompanying `output`.
    pub fn sidecar_path(output: &Path) -> PathBuf {
        let mut name = output
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "output".to_string());
        name.push_str(".config.json");
        output.with_file_name(name)
    }

    /// Write the resolved config next to an output file.
    pub fn save_beside(&self, output: &Path) -> Result<()> {
        let path = Self::sidecar_path(output);
        crate::formats::write_file(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing resolved config {}", path.display()))?;
        Ok(())
    }
}
