use std::time::Instant;

use serde::{Deserialize, Serialize};

use duotts::flow_matching::{cfm_train, CfmConfig, CfmExample, CfmModel, CfmTrainSpec};
use duotts::model::{DualBranchModel, ModelConfig, QueryKind};
use duotts::toy_world::records::read_jsonl;
use duotts::toy_world::{codec_encode, AlignmentPair, Quadruple, SpeechTokens};
use duotts::training::{
    full_finetune_baseline, pretrain_text, single_branch, train_align_step1, train_align_step2,
    train_generate_step1, train_generate_step2, Stage, StageSpec, TrainReport,
};
use duotts::{Error, Result};

use crate::config::RunConfig;
use crate::datagen::load_codebook;
use crate::run::*;

/// What `reports/<step>.json` holds for the transformer steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: TrainStep,
    pub config_hash: String,
    pub spec: StageSpec,
    pub report: TrainReport,
}

/// What `reports/decoder.json` holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderReport {
    pub step: TrainStep,
    pub config_hash: String,
    pub spec: CfmTrainSpec,
    pub examples: usize,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub step: TrainStep,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub seconds: f64,
}

pub fn read_records<T: serde::de::DeserializeOwned>(dir: &RunDir, rel: &str) -> Result<Vec<T>> {
    let p = dir.path(rel);
    read_jsonl(&p).map_err(|e| match e {
        Error::Format(m) => Error::Data(m),
        other => at_path(&p)(other),
    })
}

/// Model configuration a step's checkpoint is read with.
pub fn model_config_for(cfg: &RunConfig, step: TrainStep) -> Result<ModelConfig> {
    let mut m = cfg.model_config()?;
    m.single_branch = step == TrainStep::Baseline;
    Ok(m)
}

pub fn load_model(cfg: &RunConfig, dir: &RunDir, step: TrainStep) -> Result<DualBranchModel> {
    let p = dir.require_checkpoint(step)?;
    DualBranchModel::load(model_config_for(cfg, step)?, &p).map_err(at_path(&p))
}

pub fn load_decoder(cfg: &RunConfig, dir: &RunDir) -> Result<CfmModel> {
    let p = dir.require_checkpoint(TrainStep::Decoder)?;
    CfmModel::load(CfmConfig::for_world(&cfg.world), &p).map_err(at_path(&p))
}

/// Optimizer settings of a transformer step.
pub fn stage_spec(cfg: &RunConfig, step: TrainStep) -> StageSpec {
    let t = &cfg.train;
    let (stage, n, epochs) = match step {
        TrainStep::Pretrain => (Stage::Pretrain, 1, t.pretrain_epochs),
        TrainStep::Align1 => (Stage::Align, 1, t.align_epochs[0]),
        TrainStep::Align2 => (Stage::Align, 2, t.align_epochs[1]),
        TrainStep::Generate1 => (Stage::Generate, 1, t.generate_epochs[0]),
        TrainStep::Generate2 => (Stage::Generate, 2, t.generate_epochs[1]),
        TrainStep::Baseline | TrainStep::Decoder => (Stage::Baseline, 1, t.baseline_epochs),
    };
    let mut spec = StageSpec::new(stage, n, epochs, cfg.seed);
    spec.batch_size = t.batch_size;
    spec.lr = t.lr;
    spec.clip = t.clip;
    spec
}

/// Runs one training step from its prerequisite checkpoint and writes the
/// checkpoint, report and manifest.
pub fn train(cfg: &RunConfig, dir: &RunDir, step: TrainStep) -> Result<StepOutcome> {
    dir.require_data()?;
    if step == TrainStep::Decoder {
        return train_decoder(cfg, dir);
    }
    let vocab = cfg.world.vocab();
    let mut manifest = Manifest::new(format!("train {}", step.name()), cfg);
    let base = dir.root.clone();
    let mut model = match step.requires() {
        Some(prev) => {
            let m = load_model(cfg, dir, prev)?;
            manifest.input(&base, &dir.checkpoint(prev))?;
            m
        }
        None => DualBranchModel::new(model_config_for(cfg, step)?)?,
    };
    let spec = stage_spec(cfg, step);
    let pairs = |rels: &[&str], manifest: &mut Manifest| -> Result<Vec<AlignmentPair>> {
        let mut out = Vec::new();
        for rel in rels {
            out.extend(read_records::<AlignmentPair>(dir, rel)?);
            manifest.input(&base, &dir.path(rel))?;
        }
        Ok(out)
    };
    let quads = |manifest: &mut Manifest| -> Result<Vec<Quadruple>> {
        manifest.input(&base, &dir.path(QUADS_TRAIN))?;
        read_records(dir, QUADS_TRAIN)
    };
    let start = Instant::now();
    let report = match step {
        TrainStep::Pretrain => pretrain_text(&mut model, &vocab, &pairs(&[PAIRS_TRANSCRIPT], &mut manifest)?, &spec)?.0,
        TrainStep::Align1 => {
            let base_dialect: Vec<AlignmentPair> = pairs(&[PAIRS_TRANSCRIPT, PAIRS_TTS], &mut manifest)?
                .into_iter()
                .filter(|p| p.dialect == 0)
                .collect();
            train_align_step1(&mut model, &vocab, &base_dialect, &spec)?.0
        }
        TrainStep::Align2 => train_align_step2(&mut model, &vocab, &pairs(&[PAIRS_TRANSCRIPT, PAIRS_TTS], &mut manifest)?, &spec)?.0,
        TrainStep::Generate1 => train_generate_step1(&mut model, &vocab, &quads(&mut manifest)?, &spec)?.0,
        TrainStep::Generate2 => {
            let qs = quads(&mut manifest)?;
            let items: Vec<(&Quadruple, QueryKind)> = qs.iter().map(|q| (q, QueryKind::Speech)).collect();
            train_generate_step2(&mut model, &vocab, &items, &spec)?.0
        }
        TrainStep::Baseline => {
            model = single_branch(&model);
            full_finetune_baseline(&mut model, &vocab, &quads(&mut manifest)?, &spec)?.0
        }
        TrainStep::Decoder => unreachable!("handled above"),
    };
    let seconds = start.elapsed().as_secs_f64();
    if !report.freeze_honored() {
        return Err(Error::State(format!("frozen parameters changed: {:?}", report.violations)));
    }
    let ckpt = dir.checkpoint(step);
    create_parent(&ckpt)?;
    model.save_params(&ckpt).map_err(at_path(&ckpt))?;
    let out = StepOutcome {
        step,
        first_loss: report.first_loss(),
        final_loss: report.final_loss(),
        seconds,
    };
    let rep_path = dir.report(&format!("{}.json", step.name()));
    write_json(
        &rep_path,
        &StepReport {
            step,
            config_hash: cfg.hash(),
            spec,
            report,
        },
    )?;
    manifest.output(&base, &ckpt)?;
    manifest.output(&base, &rep_path)?;
    manifest.write(&dir.manifest(&format!("train-{}", step.name())))?;
    Ok(out)
}

fn train_decoder(cfg: &RunConfig, dir: &RunDir) -> Result<StepOutcome> {
    let book = load_codebook(dir)?;
    let mut manifest = Manifest::new("train decoder", cfg);
    let base = dir.root.clone();
    let pairs: Vec<AlignmentPair> = read_records(dir, PAIRS_TRANSCRIPT)?;
    manifest.input(&base, &dir.path(PAIRS_TRANSCRIPT))?;
    manifest.input(&base, &dir.path(crate::datagen::CODEBOOK))?;
    let tokens: Vec<SpeechTokens> = pairs
        .iter()
        .map(|p| codec_encode(&book, &p.prompt_frames))
        .collect::<Result<_>>()?;
    let data: Vec<CfmExample> = pairs
        .iter()
        .zip(&tokens)
        .map(|(p, t)| CfmExample { tokens: t, frames: &p.prompt_frames })
        .collect();
    let d = &cfg.decoder;
    let spec = CfmTrainSpec {
        steps: d.steps,
        batch: d.batch,
        lr: d.lr,
        seed: cfg.seed,
    };
    let start = Instant::now();
    let mut model = CfmModel::from_codebook(CfmConfig::for_world(&cfg.world), &book)?;
    let rep = cfm_train(&mut model, &data, &spec)?;
    let seconds = start.elapsed().as_secs_f64();
    let ckpt = dir.checkpoint(TrainStep::Decoder);
    create_parent(&ckpt)?;
    model.save(&ckpt).map_err(at_path(&ckpt))?;
    let rep_path = dir.report("decoder.json");
    let out = StepOutcome {
        step: TrainStep::Decoder,
        first_loss: rep.losses.first().copied(),
        final_loss: rep.losses.last().copied(),
        seconds,
    };
    write_json(
        &rep_path,
        &DecoderReport {
            step: TrainStep::Decoder,
            config_hash: cfg.hash(),
            spec,
            examples: data.len(),
            losses: rep.losses,
        },
    )?;
    manifest.output(&base, &ckpt)?;
    manifest.output(&base, &rep_path)?;
    manifest.write(&dir.manifest("train-decoder"))?;
    Ok(out)
}
