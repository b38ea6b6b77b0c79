//! Run configuration: a TOML file, optional `section.key=value` overrides
//! and a seed, resolved into one typed value whose hash goes into every
//! manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use duotts::model::{freeze_plan, DecodeMode, ModelConfig};
use duotts::toy_world::WorldConfig;
use duotts::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, the held-out split, shuffles and sampling.
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub decoder: DecoderSection,
    pub synth: SynthSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Total transformer layers; the frozen bottom is `layers / 2`.
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Speech tokens per backbone step.
    pub group: usize,
    /// Response text tokens buffered before the first speech group.
    pub lookahead: usize,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub utterances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain_epochs: usize,
    /// Epochs of alignment steps 1 and 2.
    pub align_epochs: [usize; 2],
    /// Epochs of generation steps 1 and 2.
    pub generate_epochs: [usize; 2],
    pub baseline_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    pub steps: usize,
    /// Utterances per step.
    pub batch: usize,
    pub lr: f64,
    /// Euler steps when sampling frames.
    pub euler_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub decode: DecodeMode,
    /// Response text tokens handed to a streaming session per push.
    pub text_chunk: usize,
    /// Token groups per vocoded chunk and tokens of context on each side.
    pub vocode_groups: usize,
    pub vocode_overlap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Held-out quadruples to synthesize; 0 means all of them.
    pub max_items: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            decoder: DecoderSection::default(),
            synth: SynthSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 8,
            d_model: 64,
            heads: 4,
            group: 4,
            lookahead: 4,
            init_seed: 0,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self { utterances: 4000 }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            pretrain_epochs: 2,
            align_epochs: [2, 2],
            generate_epochs: [8, 8],
            baseline_epochs: 1,
            batch_size: 8,
            lr: 2e-3,
            clip: 1.0,
        }
    }
}

impl Default for DecoderSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            lr: 2e-3,
            euler_steps: duotts::flow_matching::DEFAULT_STEPS,
        }
    }
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            decode: DecodeMode::Greedy,
            text_chunk: 2,
            vocode_groups: 2,
            vocode_overlap: 1,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { max_items: 0 }
    }
}

fn arg(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}

/// Parses a `section.key=value` override; the value is read as a TOML value
/// and falls back to a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| arg(format!("override `{spec}` is not key=value")))?;
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| arg(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Reads `path` (or the defaults when `None`), applies overrides and the
    /// seed, and validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| arg(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| arg(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| arg(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model_config()?.validate()?;
        if self.data.utterances < 20 {
            return Err(arg("data.utterances must be at least 20"));
        }
        if self.train.batch_size == 0 || self.decoder.batch == 0 {
            return Err(arg("batch sizes must be positive"));
        }
        if self.decoder.euler_steps == 0 || self.synth.text_chunk == 0 || self.synth.vocode_groups == 0 {
            return Err(arg("euler_steps, text_chunk and vocode_groups must be positive"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = ModelConfig::for_world(&self.world);
        cfg.layers = m.layers;
        cfg.bottom_layers = freeze_plan(m.layers)?.0;
        cfg.d_model = m.d_model;
        cfg.heads = m.heads;
        cfg.group = m.group;
        cfg.lookahead = m.lookahead;
        cfg.init_seed = m.init_seed;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
