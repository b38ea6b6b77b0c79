use serde::{Deserialize, Serialize};

use duotts::model::{assemble_training_sequence, DualBranchModel, Layout, Mode, TrainItem};
use duotts::toy_world::AlignmentPair;
use duotts::training::{probe_logits, text_perplexity};
use duotts::{Error, Result};

use crate::config::RunConfig;
use crate::datagen::{load_codebook, CODEBOOK};
use crate::eval::{eval_quads, score_model};
use crate::run::*;
use crate::train::{load_decoder, load_model, read_records};

/// Text items in the logit probe batch.
pub const PROBE_ITEMS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: String,
    /// Largest absolute text-branch logit change on the probe batch against
    /// the pre-Stage-II snapshot.
    pub probe_max_abs_deviation: f64,
    pub text_perplexity: f64,
    /// Perplexity minus the pre-Stage-II perplexity.
    pub perplexity_change: f64,
    /// Mean over scored items; meaningless when `speech_scored` is 0.
    pub speech_ter: f64,
    /// Mean over every item, unreadable ones included.
    pub speech_strict_ter: f64,
    pub speech_scored: usize,
    pub dialect_match_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub probe_items: usize,
    pub text_items: usize,
    pub speech_items: usize,
    pub arms: Vec<ArmRow>,
}

impl ForgettingReport {
    pub fn arm(&self, name: &str) -> Option<&ArmRow> {
        self.arms.iter().find(|a| a.arm == name)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "probe items {}  text items {}  speech items {}\n{:<16} {:>14} {:>12} {:>12} {:>8} {:>8} {:>7} {:>8}\n",
            self.probe_items,
            self.text_items,
            self.speech_items,
            "arm",
            "probe max|dev|",
            "perplexity",
            "change",
            "TER",
            "strict",
            "scored",
            "dialect"
        );
        for a in &self.arms {
            let ter = if a.speech_scored > 0 { format!("{:.4}", a.speech_ter) } else { "n/a".into() };
            s.push_str(&format!(
                "{:<16} {:>14.3e} {:>12.6} {:>+12.6} {:>8} {:>8.4} {:>7} {:>8.3}\n",
                a.arm,
                a.probe_max_abs_deviation,
                a.text_perplexity,
                a.perplexity_change,
                ter,
                a.speech_strict_ter,
                a.speech_scored,
                a.dialect_match_rate
            ));
        }
        s
    }
}

pub fn text_layouts(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<Layout>> {
    let model_cfg = cfg.model_config()?;
    let vocab = cfg.world.vocab();
    let pairs: Vec<AlignmentPair> = read_records(dir, TEXT_HELD)?;
    pairs
        .iter()
        .map(|p| assemble_training_sequence(&model_cfg, &vocab, &TrainItem::Pair(p), Mode::Text))
        .collect()
}

pub fn max_abs_deviation(a: &DualBranchModel, b: &DualBranchModel, probe: &[Layout]) -> Result<f64> {
    let la = probe_logits(a, probe)?;
    let lb = probe_logits(b, probe)?;
    let mut worst = 0f64;
    for (x, y) in la.iter().zip(&lb) {
        for (p, q) in x.data().iter().zip(y.data()) {
            worst = worst.max((*p as f64 - *q as f64).abs());
        }
    }
    Ok(worst)
}

/// Compares the pre-Stage-II snapshot, the dual-branch model after Stage II
/// and the full-finetune baseline.
pub fn forget(cfg: &RunConfig, dir: &RunDir) -> Result<ForgettingReport> {
    dir.require_data()?;
    let arms = [
        ("pre-stage-ii", TrainStep::Align2),
        ("dual-branch", TrainStep::Generate2),
        ("full-finetune", TrainStep::Baseline),
    ];
    let models: Vec<DualBranchModel> = arms
        .iter()
        .map(|(_, s)| load_model(cfg, dir, *s))
        .collect::<Result<_>>()?;
    let decoder = load_decoder(cfg, dir)?;
    let book = load_codebook(dir)?;
    let text = text_layouts(cfg, dir)?;
    if text.len() < PROBE_ITEMS {
        return Err(Error::Data(format!(
            "{} held-out text items, the probe needs {PROBE_ITEMS}",
            text.len()
        )));
    }
    let probe = &text[..PROBE_ITEMS];
    let quads = eval_quads(cfg, dir)?;
    let base_ppl = text_perplexity(&models[0], &text)?;
    let mut rows = Vec::new();
    for ((name, _), m) in arms.iter().zip(&models) {
        let ppl = text_perplexity(m, &text)?;
        let scored = score_model(cfg, m, &decoder, &book, &quads)?;
        rows.push(ArmRow {
            arm: name.to_string(),
            probe_max_abs_deviation: max_abs_deviation(&models[0], m, probe)?,
            text_perplexity: ppl,
            perplexity_change: ppl - base_ppl,
            speech_ter: scored.frames.corpus_ter,
            speech_strict_ter: scored.frames.strict_ter,
            speech_scored: scored.frames.scored,
            dialect_match_rate: scored.frames.dialect_match_rate,
        });
    }
    let report = ForgettingReport {
        probe_items: probe.len(),
        text_items: text.len(),
        speech_items: quads.len(),
        arms: rows,
    };
    let base = dir.root.clone();
    let mut manifest = Manifest::new("forget", cfg);
    for (_, s) in &arms {
        manifest.input(&base, &dir.checkpoint(*s))?;
    }
    for p in [dir.checkpoint(TrainStep::Decoder), dir.path(TEXT_HELD), dir.path(QUADS_HELD), dir.path(CODEBOOK)] {
        manifest.input(&base, &p)?;
    }
    let json = dir.report("forgetting.json");
    write_json(&json, &report)?;
    let txt = dir.report("forgetting.txt");
    write_bytes(&txt, report.table().as_bytes())?;
    manifest.output(&base, &json)?;
    manifest.output(&base, &txt)?;
    manifest.write(&dir.manifest("forget"))?;
    Ok(report)
}
