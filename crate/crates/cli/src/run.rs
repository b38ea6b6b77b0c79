//! Layout of a run directory, manifests and file helpers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use duotts::{Error, Result};

use crate::config::{hex, RunConfig};

/// Training steps in pipeline order. `Decoder` is the flow-matching decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStep {
    Pretrain,
    Align1,
    Align2,
    Generate1,
    Generate2,
    Baseline,
    Decoder,
}

impl TrainStep {
    pub const ALL: [TrainStep; 7] = [
        TrainStep::Pretrain,
        TrainStep::Align1,
        TrainStep::Align2,
        TrainStep::Generate1,
        TrainStep::Generate2,
        TrainStep::Baseline,
        TrainStep::Decoder,
    ];

    /// File stem of the step's checkpoint and report.
    pub fn name(self) -> &'static str {
        match self {
            TrainStep::Pretrain => "pretrain",
            TrainStep::Align1 => "align-1",
            TrainStep::Align2 => "align-2",
            TrainStep::Generate1 => "generate-1",
            TrainStep::Generate2 => "generate-2",
            TrainStep::Baseline => "baseline",
            TrainStep::Decoder => "decoder",
        }
    }

    /// `--stage`/`--step` pair that runs this step.
    pub fn invocation(self) -> String {
        match self {
            TrainStep::Pretrain => "train --stage pretrain".into(),
            TrainStep::Align1 => "train --stage align --step 1".into(),
            TrainStep::Align2 => "train --stage align --step 2".into(),
            TrainStep::Generate1 => "train --stage generate --step 1".into(),
            TrainStep::Generate2 => "train --stage generate --step 2".into(),
            TrainStep::Baseline => "train --stage baseline".into(),
            TrainStep::Decoder => "train --stage decoder".into(),
        }
    }

    /// Checkpoint this step starts from.
    pub fn requires(self) -> Option<TrainStep> {
        match self {
            TrainStep::Pretrain | TrainStep::Decoder => None,
            TrainStep::Align1 => Some(TrainStep::Pretrain),
            TrainStep::Align2 => Some(TrainStep::Align1),
            TrainStep::Generate1 | TrainStep::Baseline => Some(TrainStep::Align2),
            TrainStep::Generate2 => Some(TrainStep::Generate1),
        }
    }

    pub fn parse(stage: &str, step: Option<u8>) -> Result<Self> {
        let s = match (stage, step) {
            ("pretrain", None | Some(1)) => TrainStep::Pretrain,
            ("align", Some(1)) => TrainStep::Align1,
            ("align", Some(2)) => TrainStep::Align2,
            ("generate", Some(1)) => TrainStep::Generate1,
            ("generate", Some(2)) => TrainStep::Generate2,
            ("baseline", None | Some(1)) => TrainStep::Baseline,
            ("decoder", None | Some(1)) => TrainStep::Decoder,
            ("align" | "generate", None) => {
                return Err(Error::Argument(format!("stage {stage} needs --step 1 or --step 2")))
            }
            _ => return Err(Error::Argument(format!("unknown stage/step {stage} {step:?}"))),
        };
        Ok(s)
    }
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

pub const CORPUS: &str = "data/corpus.jsonl";
pub const PAIRS_TRANSCRIPT: &str = "data/pairs-transcript.jsonl";
pub const PAIRS_TTS: &str = "data/pairs-tts.jsonl";
pub const QUADS_TRAIN: &str = "data/quads-train.jsonl";
pub const QUADS_HELD: &str = "data/quads-held.jsonl";
pub const TEXT_HELD: &str = "data/text-held.jsonl";
pub const BALANCE: &str = "data/balance.json";

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn checkpoint(&self, step: TrainStep) -> PathBuf {
        self.root.join(format!("checkpoints/{}.ckpt", step.name()))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join(format!("reports/{name}"))
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.root.join(format!("manifests/{name}.json"))
    }

    /// Dependency error unless datagen has run.
    pub fn require_data(&self) -> Result<()> {
        for f in [CORPUS, PAIRS_TRANSCRIPT, PAIRS_TTS, QUADS_TRAIN, QUADS_HELD, TEXT_HELD] {
            if !self.path(f).is_file() {
                return Err(Error::Dependency(format!(
                    "{} is missing; run `duotts datagen` first",
                    self.path(f).display()
                )));
            }
        }
        Ok(())
    }

    /// Dependency error naming the step whose checkpoint is missing.
    pub fn require_checkpoint(&self, step: TrainStep) -> Result<PathBuf> {
        let p = self.checkpoint(step);
        if !p.is_file() {
            return Err(Error::Dependency(format!(
                "requires the {} checkpoint ({}); run `duotts {}` first",
                step.name(),
                p.display(),
                step.invocation()
            )));
        }
        Ok(p)
    }
}

/// Re-wraps I/O failures so the message names the path.
pub fn at_path(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

pub fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| at_path(dir)(e.into()))?;
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| at_path(path)(e.into()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| at_path(path)(e.into()))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| at_path(path)(e.into()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Written next to every command's outputs. Paths are relative to the run
/// directory (or the output directory for synthesis), so two runs of the
/// same config produce identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: impl Into<String>, cfg: &RunConfig) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("duotts-cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("format".to_string(), "1".to_string());
        Self {
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            versions,
            config: cfg.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, base: &Path, path: &Path) -> Result<()> {
        self.inputs.insert(relative(base, path), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, base: &Path, path: &Path) -> Result<()> {
        self.outputs.insert(relative(base, path), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn relative(base: &Path, path: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}
