use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use duotts::eval::{score_frames, score_tokens, DialectRow, EvalReport, EvalTarget};
use duotts::flow_matching::{euler_sample, CfmModel};
use duotts::model::DualBranchModel;
use duotts::toy_world::records::write_jsonl;
use duotts::toy_world::{mix64, Codebook, Quadruple, Renderer};
use duotts::Result;

use crate::config::RunConfig;
use crate::datagen::{load_codebook, CODEBOOK};
use crate::run::*;
use crate::synth::stream;
use crate::train::{load_decoder, load_model, read_records};

/// Aggregate figures of an [`EvalReport`] without the per-item records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub items: usize,
    pub scored: usize,
    pub flagged: usize,
    /// Mean TER over scored (unflagged) items.
    pub corpus_ter: f64,
    /// Mean TER over every item, flagged ones included.
    pub strict_ter: f64,
    pub dialect_match_rate: f64,
    pub emotion_match_rate: f64,
    pub speaker_match_rate: f64,
    pub per_dialect: BTreeMap<usize, DialectRow>,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            items: r.items.len(),
            scored: r.scored,
            flagged: r.flagged,
            corpus_ter: r.corpus_ter,
            strict_ter: r.strict_ter,
            dialect_match_rate: r.dialect_match_rate,
            emotion_match_rate: r.emotion_match_rate,
            speaker_match_rate: r.speaker_match_rate,
            per_dialect: r.per_dialect.clone(),
        }
    }
}

/// `frames` scores flow-matching output (the headline figure); `codec`
/// scores the codebook centroids of the same tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub frames: EvalSummary,
    pub codec: EvalSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub id: u64,
    pub tokens: Vec<usize>,
}

pub struct Scored {
    pub frames: EvalReport,
    pub codec: EvalReport,
    pub tokens: Vec<TokenRecord>,
}

/// Held-out quadruples in id order, capped by `eval.max_items`.
pub fn eval_quads(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<Quadruple>> {
    let mut quads: Vec<Quadruple> = read_records(dir, QUADS_HELD)?;
    quads.sort_by_key(|q| q.id);
    if cfg.eval.max_items > 0 {
        quads.truncate(cfg.eval.max_items);
    }
    Ok(quads)
}

/// Synthesizes every quadruple's response from its speech prompt and scores
/// it with the oracle.
pub fn score_model(
    cfg: &RunConfig,
    model: &DualBranchModel,
    decoder: &CfmModel,
    book: &Codebook,
    quads: &[Quadruple],
) -> Result<Scored> {
    let renderer = Renderer::new(&cfg.world)?;
    let (mut frames, mut codec, mut tokens) = (Vec::new(), Vec::new(), Vec::new());
    for q in quads {
        let seed = mix64(cfg.seed, q.id);
        let (toks, _, _) = stream(cfg, model, &q.speech_query, &q.text_response, seed)?;
        let target = EvalTarget {
            id: q.id,
            text: q.text_response.clone(),
            speaker: q.speaker,
            dialect: q.dialect,
            emotion: q.emotion,
        };
        let synthesized = euler_sample(decoder, &toks, cfg.decoder.euler_steps, seed)?;
        frames.push(score_frames(&renderer, &target, &synthesized, toks.len())?);
        codec.push(score_tokens(&renderer, book, &target, &toks)?);
        tokens.push(TokenRecord {
            id: q.id,
            tokens: toks.ids().to_vec(),
        });
    }
    Ok(Scored {
        frames: EvalReport::new(frames),
        codec: EvalReport::new(codec),
        tokens,
    })
}

pub fn summary_text(o: &EvalOutcome, frames: &EvalReport) -> String {
    format!(
        "TER is the token error rate of the exact oracle transcriber on synthesized frames.\n{}codec-centroid TER {:.4} (scored {}, flagged {})\n",
        frames.summary(),
        o.codec.corpus_ter,
        o.codec.scored,
        o.codec.flagged
    )
}

pub fn eval(cfg: &RunConfig, dir: &RunDir) -> Result<EvalOutcome> {
    dir.require_data()?;
    let model = load_model(cfg, dir, TrainStep::Generate2)?;
    let decoder = load_decoder(cfg, dir)?;
    let book = load_codebook(dir)?;
    let quads = eval_quads(cfg, dir)?;
    let scored = score_model(cfg, &model, &decoder, &book, &quads)?;
    let outcome = EvalOutcome {
        frames: EvalSummary::from(&scored.frames),
        codec: EvalSummary::from(&scored.codec),
    };
    let base = dir.root.clone();
    let mut manifest = Manifest::new("eval", cfg);
    for p in [
        dir.checkpoint(TrainStep::Generate2),
        dir.checkpoint(TrainStep::Decoder),
        dir.path(QUADS_HELD),
        dir.path(CODEBOOK),
    ] {
        manifest.input(&base, &p)?;
    }
    let items = dir.report("eval.jsonl");
    create_parent(&items)?;
    write_jsonl(&items, &scored.frames.items).map_err(at_path(&items))?;
    let codec_items = dir.report("eval-codec.jsonl");
    write_jsonl(&codec_items, &scored.codec.items).map_err(at_path(&codec_items))?;
    let tokens = dir.report("eval-tokens.jsonl");
    write_jsonl(&tokens, &scored.tokens).map_err(at_path(&tokens))?;
    let agg = dir.report("eval.json");
    write_json(&agg, &outcome)?;
    let txt = dir.report("eval.txt");
    write_bytes(&txt, summary_text(&outcome, &scored.frames).as_bytes())?;
    for p in [items, codec_items, tokens, agg, txt] {
        manifest.output(&base, &p)?;
    }
    manifest.write(&dir.manifest("eval"))?;
    Ok(outcome)
}
