use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use duotts::toy_world::records::write_jsonl;
use duotts::toy_world::{
    build_alignment_pairs, build_quadruples, gen_corpus, is_held_out, Codebook, PairStrategy, QuadrupleReport,
    Renderer, ToyUtterance,
};
use duotts::{Error, Result};

use crate::config::RunConfig;
use crate::run::*;

pub const CODEBOOK: &str = "data/codebook.bin";
/// Index of the sample prompts written under `data/prompts/`.
pub const PROMPTS: &str = "data/prompts.jsonl";
/// Held-out quadruples exported as ready-made `synth` prompts.
pub const SAMPLE_PROMPTS: usize = 4;

/// One exported prompt: the speech query of a held-out quadruple and the
/// response it should be answered with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePrompt {
    pub file: String,
    pub quadruple: u64,
    pub text_response: Vec<usize>,
    pub speaker: usize,
    pub dialect: usize,
    pub emotion: usize,
}

/// Counts of one attribute value in the corpus and both splits.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub corpus: usize,
    pub train: usize,
    pub held: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub utterances: usize,
    pub train_utterances: usize,
    pub held_utterances: usize,
    /// Keyed by value index; every configured value is listed, even at 0.
    pub dialects: BTreeMap<usize, SplitCounts>,
    pub emotions: BTreeMap<usize, SplitCounts>,
    pub speakers: BTreeMap<usize, SplitCounts>,
    pub pairs_transcript: usize,
    pub pairs_tts: usize,
    pub quads_train: QuadrupleReport,
    pub quads_held: QuadrupleReport,
    pub held_text: usize,
}

impl BalanceReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "utterances {} (train {}, held-out {})\npairs {} transcript + {} rendered, quadruples {} train + {} held-out\n",
            self.utterances,
            self.train_utterances,
            self.held_utterances,
            self.pairs_transcript,
            self.pairs_tts,
            self.quads_train.built,
            self.quads_held.built
        );
        s.push_str("dialect  corpus  train  held\n");
        for (d, c) in &self.dialects {
            s.push_str(&format!("{d:>7}  {:>6}  {:>5}  {:>4}\n", c.corpus, c.train, c.held));
        }
        s
    }
}

fn counts(n: usize, corpus: &[ToyUtterance], held: &[bool], key: impl Fn(&ToyUtterance) -> usize) -> BTreeMap<usize, SplitCounts> {
    let mut m: BTreeMap<usize, SplitCounts> = (0..n).map(|i| (i, SplitCounts::default())).collect();
    for (u, &h) in corpus.iter().zip(held) {
        let c = m.entry(key(u)).or_default();
        c.corpus += 1;
        if h {
            c.held += 1;
        } else {
            c.train += 1;
        }
    }
    m
}

/// Codebook for the run: the shipped one for the default world, otherwise
/// fitted on the world's own renderings.
pub fn codebook_for(cfg: &RunConfig) -> Result<Codebook> {
    if cfg.world == duotts::toy_world::WorldConfig::default() {
        Ok(Codebook::shipped()?.clone())
    } else {
        Codebook::fit(&cfg.world)
    }
}

pub fn load_codebook(dir: &RunDir) -> Result<Codebook> {
    let p = dir.path(CODEBOOK);
    let bytes = std::fs::read(&p).map_err(|e| {
        Error::Dependency(format!("{} is missing ({e}); run `duotts datagen` first", p.display()))
    })?;
    Codebook::from_bytes(&bytes)
}

/// Generates the corpus, the split, alignment pairs and quadruples.
pub fn datagen(cfg: &RunConfig, dir: &RunDir) -> Result<BalanceReport> {
    let world = &cfg.world;
    let corpus = gen_corpus(cfg.seed, world, cfg.data.utterances)?;
    let held_flags: Vec<bool> = corpus.iter().map(|u| is_held_out(u.conversation, cfg.seed)).collect();
    let (train, held): (Vec<ToyUtterance>, Vec<ToyUtterance>) =
        corpus.iter().cloned().partition(|u| !is_held_out(u.conversation, cfg.seed));
    let renderer = Renderer::new(world)?;
    let book = codebook_for(cfg)?;
    let pairs = build_alignment_pairs(&train, PairStrategy::TranscriptContinuation, &renderer)?;
    let tts = build_alignment_pairs(&train, PairStrategy::TtsRendered, &renderer)?;
    let (quads, quads_train) = build_quadruples(&train, &renderer, &book)?;
    let (held_quads, quads_held) = build_quadruples(&held, &renderer, &book)?;
    let held_text = build_alignment_pairs(&held, PairStrategy::TranscriptContinuation, &renderer)?;

    let mut manifest = Manifest::new("datagen", cfg);
    let base = dir.root.clone();
    write_bytes(&dir.path(CODEBOOK), &book.to_bytes())?;
    manifest.output(&base, &dir.path(CODEBOOK))?;
    macro_rules! put {
        ($rel:expr, $items:expr) => {{
            let p = dir.path($rel);
            create_parent(&p)?;
            write_jsonl(&p, $items).map_err(at_path(&p))?;
            manifest.output(&base, &p)?;
        }};
    }
    put!(CORPUS, &corpus);
    put!(PAIRS_TRANSCRIPT, &pairs);
    put!(PAIRS_TTS, &tts);
    put!(QUADS_TRAIN, &quads);
    put!(QUADS_HELD, &held_quads);
    put!(TEXT_HELD, &held_text);

    let mut sample: Vec<_> = held_quads.iter().collect();
    sample.sort_by_key(|q| q.id);
    let mut prompts = Vec::new();
    for q in sample.into_iter().take(SAMPLE_PROMPTS) {
        let file = format!("data/prompts/held-{}.bin", q.id);
        let p = dir.path(&file);
        write_bytes(&p, &q.speech_query.to_bytes())?;
        manifest.output(&base, &p)?;
        prompts.push(SamplePrompt {
            file,
            quadruple: q.id,
            text_response: q.text_response.clone(),
            speaker: q.speaker,
            dialect: q.dialect,
            emotion: q.emotion,
        });
    }
    put!(PROMPTS, &prompts);

    let report = BalanceReport {
        utterances: corpus.len(),
        train_utterances: train.len(),
        held_utterances: held.len(),
        dialects: counts(world.dialects, &corpus, &held_flags, |u| u.dialect),
        emotions: counts(world.emotions, &corpus, &held_flags, |u| u.emotion),
        speakers: counts(world.speakers, &corpus, &held_flags, |u| u.speaker),
        pairs_transcript: pairs.len(),
        pairs_tts: tts.len(),
        quads_train,
        quads_held,
        held_text: held_text.len(),
    };
    write_json(&dir.path(BALANCE), &report)?;
    manifest.output(&base, &dir.path(BALANCE))?;
    manifest.write(&dir.manifest("datagen"))?;
    Ok(report)
}
