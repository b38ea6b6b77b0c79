//! Text pretraining of the backbone, modality alignment (two steps), speech
//! generation (two steps) and the full-finetune comparison arm.
//!
//! Every stage freezes parameters by name, runs seeded epochs of mini-batch
//! Adam, and compares per-parameter checksums before and after the run.

mod metrics;

pub use metrics::{mean_loss, probe_logits, text_perplexity, token_accuracy};

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::model::{
    assemble_training_sequence, DualBranchModel, Layout, Mode, QueryKind, TrainItem,
};
use crate::numerics::{AdamConfig, Graph, Gradients};
use crate::toy_world::{mix64, AlignmentPair, Quadruple, TextVocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Next-token training of the text backbone before any speech work.
    Pretrain,
    Align,
    Generate,
    Baseline,
}

/// Hyper-parameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: Stage,
    pub step: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
    pub seed: u64,
}

impl StageSpec {
    pub fn new(stage: Stage, step: u8, epochs: usize, seed: u64) -> Self {
        Self {
            stage,
            step,
            epochs,
            batch_size: 8,
            lr: 2e-3,
            clip: 1.0,
            seed,
        }
    }

    /// Names of the parameters this run may update.
    pub fn trainable(&self, name: &str) -> bool {
        trainable(self.stage, self.step, name)
    }
}

/// Freeze schedule: `true` when `name` is updated in `(stage, step)`.
pub fn trainable(stage: Stage, step: u8, name: &str) -> bool {
    let text_lm = name.starts_with("text.") || name.starts_with("bottom.") || name.starts_with("text_top.");
    let speech = name.starts_with("speech_top.") || name.starts_with("speech.") || name.starts_with("mtp.");
    match (stage, step) {
        (Stage::Pretrain, _) => text_lm,
        (Stage::Align, 1) => name.starts_with("proj."),
        (Stage::Align, _) => name.starts_with("proj.") || name.starts_with("enc."),
        (Stage::Generate, _) => speech,
        (Stage::Baseline, _) => !(name.starts_with("enc.") || name.starts_with("proj.")),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Option<Stage>,
    pub step: u8,
    pub items: usize,
    pub epoch_losses: Vec<f64>,
    /// Checksums of the parameters frozen for this run, before and after.
    pub frozen_before: BTreeMap<String, String>,
    pub frozen_after: BTreeMap<String, String>,
    /// Parameters whose checksum changed.
    pub changed: Vec<String>,
    /// Changed parameters outside the trainable set; empty when freezing held.
    pub violations: Vec<String>,
    pub skipped: usize,
    pub skip_reasons: Vec<String>,
    /// Item counts by label (dialect, emotion, query kind).
    pub data_mix: BTreeMap<String, usize>,
}

impl TrainReport {
    pub fn freeze_honored(&self) -> bool {
        self.violations.is_empty() && self.frozen_before == self.frozen_after
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.epoch_losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Wall-clock timing, kept apart from [`TrainReport`] so reports stay
/// byte-reproducible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
}

fn layouts(
    model: &DualBranchModel,
    vocab: &TextVocab,
    items: &[TrainItem],
    mode: Mode,
    report: &mut TrainReport,
) -> Result<Vec<Layout>> {
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        match assemble_training_sequence(&model.cfg, vocab, item, mode) {
            Ok(l) => out.push(l),
            Err(Error::Data(msg)) => {
                report.skipped += 1;
                report.skip_reasons.push(msg);
            }
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return arg_err("no usable training items");
    }
    Ok(out)
}

fn clip(grads: &mut Gradients<f32>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm: f64 = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        grads.scale((max_norm / norm) as f32);
    }
}

/// Runs the epochs of one stage over prepared layouts.
pub fn run_epochs(model: &mut DualBranchModel, layouts: &[Layout], spec: &StageSpec, report: &mut TrainReport) -> Result<Timing> {
    if layouts.is_empty() {
        return arg_err("empty training data");
    }
    if spec.batch_size == 0 {
        return arg_err("batch size must be positive");
    }
    let start = Instant::now();
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for n in &names {
        model.params.set_frozen(n, !spec.trainable(n))?;
    }
    model.params.reset_optimizer();
    let before = model.params.checksums();
    let adam = AdamConfig {
        lr: spec.lr,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..layouts.len()).collect();
    for epoch in 0..spec.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(spec.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0f64;
        for batch in order.chunks(spec.batch_size) {
            let mut grads = Gradients::new();
            for &i in batch {
                let mut g = Graph::new();
                let loss = model.net().loss(&mut g, &layouts[i])?;
                total += g.value(loss).data()[0] as f64;
                grads.accumulate(&g.backward(loss)?.params);
            }
            grads.scale(1.0 / batch.len() as f32);
            clip(&mut grads, spec.clip);
            model.params.adam_step(&grads, &adam)?;
        }
        report.epoch_losses.push(total / layouts.len() as f64);
    }
    let after = model.params.checksums();
    for n in &names {
        let frozen = model.params.is_frozen(n)?;
        if before[n] != after[n] {
            report.changed.push(n.clone());
            if frozen {
                report.violations.push(n.clone());
            }
        }
        if frozen {
            report.frozen_before.insert(n.clone(), before[n].clone());
            report.frozen_after.insert(n.clone(), after[n].clone());
        }
    }
    report.stage = Some(spec.stage);
    report.step = spec.step;
    report.items = layouts.len();
    Ok(Timing {
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn count(mix: &mut BTreeMap<String, usize>, key: String) {
    *mix.entry(key).or_default() += 1;
}

fn pair_mix(pairs: &[AlignmentPair]) -> BTreeMap<String, usize> {
    let mut mix = BTreeMap::new();
    for p in pairs {
        count(&mut mix, format!("dialect.{}", p.dialect));
        count(&mut mix, format!("emotion.{}", p.emotion));
    }
    mix
}

fn quad_mix(items: &[(&Quadruple, QueryKind)]) -> BTreeMap<String, usize> {
    let mut mix = BTreeMap::new();
    for (q, kind) in items {
        count(&mut mix, format!("dialect.{}", q.dialect));
        count(&mut mix, format!("emotion.{}", q.emotion));
        count(&mut mix, format!("query.{kind:?}").to_lowercase());
    }
    mix
}

fn check_stage(spec: &StageSpec, stage: Stage, step: u8) -> Result<()> {
    if spec.stage != stage || spec.step != step {
        return arg_err(format!(
            "spec is for {:?} step {} but {:?} step {} was requested",
            spec.stage, spec.step, stage, step
        ));
    }
    Ok(())
}

/// Next-token training of the text backbone on text renditions of pairs.
pub fn pretrain_text(model: &mut DualBranchModel, vocab: &TextVocab, pairs: &[AlignmentPair], spec: &StageSpec) -> Result<(TrainReport, Timing)> {
    check_stage(spec, Stage::Pretrain, spec.step)?;
    if pairs.is_empty() {
        return arg_err("pretraining needs text");
    }
    let mut report = TrainReport {
        data_mix: pair_mix(pairs),
        ..TrainReport::default()
    };
    let items: Vec<TrainItem> = pairs.iter().map(TrainItem::Pair).collect();
    let ls = layouts(model, vocab, &items, Mode::Text, &mut report)?;
    let t = run_epochs(model, &ls, spec, &mut report)?;
    Ok((report, t))
}

fn align(model: &mut DualBranchModel, vocab: &TextVocab, pairs: &[AlignmentPair], spec: &StageSpec) -> Result<(TrainReport, Timing)> {
    if pairs.is_empty() {
        return arg_err("alignment needs pairs");
    }
    let mut report = TrainReport {
        data_mix: pair_mix(pairs),
        ..TrainReport::default()
    };
    let items: Vec<TrainItem> = pairs.iter().map(TrainItem::Pair).collect();
    let ls = layouts(model, vocab, &items, Mode::Align, &mut report)?;
    let t = run_epochs(model, &ls, spec, &mut report)?;
    Ok((report, t))
}

/// Alignment on base-dialect pairs; only the projector moves.
pub fn train_align_step1(model: &mut DualBranchModel, vocab: &TextVocab, pairs: &[AlignmentPair], spec: &StageSpec) -> Result<(TrainReport, Timing)> {
    check_stage(spec, Stage::Align, 1)?;
    if let Some(p) = pairs.iter().find(|p| p.dialect != 0) {
        return Err(Error::Data(format!("pair {} is not base-dialect data", p.id)));
    }
    align(model, vocab, pairs, spec)
}

/// Alignment on the balanced mix; encoder and projector move.
pub fn train_align_step2(model: &mut DualBranchModel, vocab: &TextVocab, pairs: &[AlignmentPair], spec: &StageSpec) -> Result<(TrainReport, Timing)> {
    check_stage(spec, Stage::Align, 2)?;
    align(model, vocab, pairs, spec)
}

/// Query kind of a quadruple in the cold-start step: base dialect uses its
/// text query, other dialects their speech query.
pub fn cold_start_query(q: &Quadruple) -> QueryKind {
    if q.dialect == 0 {
        QueryKind::Text
    } else {
        QueryKind::Speech
    }
}

fn generate(model: &mut DualBranchModel, vocab: &TextVocab, items: &[(&Quadruple, QueryKind)], spec: &StageSpec, report: &mut TrainReport) -> Result<Timing> {
    if items.is_empty() {
        return arg_err("speech generation needs quadruples");
    }
    report.data_mix = quad_mix(items);
    let train: Vec<TrainItem> = items.iter().map(|(q, k)| TrainItem::Quad(q, *k)).collect();
    let ls = layouts(model, vocab, &train, Mode::Generate, report)?;
    run_epochs(model, &ls, spec, report)
}

/// Cold start: forks the speech branch from the text branch, then trains the
/// speech top layers, speech embeddings/heads and MTP sub-heads.
pub fn train_generate_step1(model: &mut DualBranchModel, vocab: &TextVocab, quads: &[Quadruple], spec: &StageSpec) -> Result<(TrainReport, Timing)> {
    check_stage(spec, Stage::Generate, 1)?;
    if model.cfg.single_branch {
        return arg_err("the generation steps need a dual-branch model");
    }
    model.fork_speech_branch()?;
    let items: Vec<(&Quadruple, QueryKind)> = quads.iter().map(|q| (q, cold_start_query(q))).collect();
    let mut report = TrainReport::default();
    let t = generate(model, vocab, &items, spec, &mut report)?;
    Ok((report, t))
}

/// Prompt-driven training; every item must use its speech query.
pub fn train_generate_step2(model: &mut DualBranchModel, vocab: &TextVocab, items: &[(&Quadruple, QueryKind)], spec: &StageSpec) -> Result<(TrainReport, Timing)> {
    check_stage(spec, Stage::Generate, 2)?;
    if model.cfg.single_branch {
        return arg_err("the generation steps need a dual-branch model");
    }
    let rejected: Vec<u64> = items.iter().filter(|(_, k)| *k != QueryKind::Speech).map(|(q, _)| q.id).collect();
    if !rejected.is_empty() {
        return Err(Error::Data(format!(
            "{} items lack a speech query (first id {})",
            rejected.len(),
            rejected[0]
        )));
    }
    let mut report = TrainReport::default();
    let t = generate(model, vocab, items, spec, &mut report)?;
    Ok((report, t))
}

/// Converts a model into the single-branch comparison arm: speech flows
/// through the text top layers, which are no longer preserved.
pub fn single_branch(model: &DualBranchModel) -> DualBranchModel {
    let mut m = model.clone();
    m.cfg.single_branch = true;
    m
}

/// Full fine-tuning of a single-branch model on speech-query quadruples.
/// Only the encoder and projector stay frozen.
pub fn full_finetune_baseline(model: &mut DualBranchModel, vocab: &TextVocab, quads: &[Quadruple], spec: &StageSpec) -> Result<(TrainReport, Timing)> {
    check_stage(spec, Stage::Baseline, spec.step)?;
    if !model.cfg.single_branch {
        return arg_err("the baseline runs on a single-branch model");
    }
    let items: Vec<(&Quadruple, QueryKind)> = quads.iter().map(|q| (q, QueryKind::Speech)).collect();
    let mut report = TrainReport::default();
    let t = generate(model, vocab, &items, spec, &mut report)?;
    Ok((report, t))
}
