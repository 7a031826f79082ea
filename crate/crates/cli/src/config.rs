//! JSON configuration for the training commands.
//!
//! Every field has a default, so a config file only needs the keys it
//! changes. Command-line flags are applied on top of the loaded file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use phgcn_core::model::{GlobalMode, LayerKind, ModelConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: LayerKind,
    pub layers: usize,
    /// Output width of each hidden head.
    pub hidden: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub lambda_struct: f64,
    pub lambda_global: f64,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub global: GlobalMode,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: LayerKind::PhGcn,
            layers: 2,
            hidden: 8,
            heads: 8,
            embed_dim: 4,
            lambda_struct: 1.0,
            lambda_global: 10.0,
            dropout: 0.6,
            attn_dropout: 0.6,
            global: GlobalMode::Lattice,
        }
    }
}

impl ModelSpec {
    pub fn build(&self, in_dim: usize, num_classes: usize, seed: u64) -> Result<ModelConfig> {
        if self.layers == 0 {
            bail!("a model needs at least one layer");
        }
        let mut cfg = ModelConfig::stack(self.kind, self.layers, in_dim, self.hidden, self.heads, num_classes, seed)
            .with_dropout(self.dropout, self.attn_dropout);
        for l in &mut cfg.layers {
            l.embed_dim = self.embed_dim;
            l.lambda_struct = self.lambda_struct;
            l.lambda_global = self.lambda_global;
            l.global = self.global;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Node and edge files for transductive training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub nodes: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    /// Keep edges one-directional instead of adding the reverse edge.
    pub directed: bool,
}

/// Settings of the inductive motif-chain task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotifSettings {
    /// Elements per sampled chain.
    pub length: usize,
    /// Graphs sampled for each evaluation.
    pub eval_graphs: usize,
    /// Iterations between evaluations.
    pub eval_every: usize,
}

impl Default for MotifSettings {
    fn default() -> Self {
        Self { length: 10, eval_graphs: 100, eval_every: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_iterations: usize,
    /// Stop after this many iterations without a new best validation loss.
    pub patience: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub motif: MotifSettings,
    pub out: Option<PathBuf>,
    /// Write 0 in the wall-clock column so that runs are byte-identical.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            lr: 0.005,
            weight_decay: 5e-4,
            max_iterations: 1000,
            patience: 100,
            seed: 0,
            data: DataConfig::default(),
            motif: MotifSettings::default(),
            out: None,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    /// Defaults for the motif task: three layers of two 8-wide heads, a wider
    /// global attention kernel and no dropout.
    pub fn motif_defaults() -> Self {
        Self {
            model: ModelSpec { layers: 3, heads: 2, lambda_global: 1.0, dropout: 0.0, attn_dropout: 0.0, ..ModelSpec::default() },
            weight_decay: 0.0,
            max_iterations: 3000,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str, base: Self) -> Result<Self> {
        let mut value = serde_json::to_value(base)?;
        let overlay: serde_json::Value = serde_json::from_str(text).context("config is not valid JSON")?;
        merge(&mut value, overlay);
        serde_json::from_value(value).context("config does not match the schema")
    }

    pub fn load(path: &Path, base: Self) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text, base).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        // Zero is accepted: it freezes the parameters, which is useful for
        // measuring an untrained model.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bail!("learning rate {} must be finite and non-negative", self.lr);
        }
        if self.weight_decay < 0.0 {
            bail!("weight decay {} is negative", self.weight_decay);
        }
        if self.patience == 0 {
            bail!("patience must be at least 1");
        }
        if self.motif.eval_every == 0 || self.motif.eval_graphs == 0 {
            bail!("motif evaluation needs a positive interval and graph count");
        }
        Ok(())
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
