//! Token error rate against the exact transcriber, with report helpers.
//!
//! TER is edit distance over phoneme tokens divided by the reference length.
//! It plays the role a character or word error rate plays for real speech,
//! but it is measured on the synthetic world only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::toy_world::{codec_decode, oracle_transcribe, Codebook, Renderer, SpeechFrames, SpeechTokens, Transcript};

/// Edit distance with unit costs, two-row dynamic programme.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `levenshtein(reference, hypothesis) / |reference|`. Can exceed 1.
pub fn token_error_rate(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return arg_err("empty reference");
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

/// What the item should sound like.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTarget {
    pub id: u64,
    pub text: Vec<usize>,
    pub speaker: usize,
    pub dialect: usize,
    pub emotion: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: u64,
    pub dialect: usize,
    pub reference_len: usize,
    /// Edit distance over the tokens the transcriber could read.
    pub distance: usize,
    pub ter: f64,
    /// Frame groups the transcriber could not read. Items with any are
    /// flagged and left out of the main mean.
    pub failures: usize,
    pub flagged: bool,
    pub dialect_match: bool,
    pub emotion_match: bool,
    pub speaker_match: bool,
    pub speech_tokens: usize,
}

/// Scores one transcript.
pub fn score_transcript(target: &EvalTarget, heard: &Transcript, speech_tokens: usize) -> Result<EvalItem> {
    let hyp = heard.text();
    let distance = levenshtein(&target.text, &hyp);
    Ok(EvalItem {
        id: target.id,
        dialect: target.dialect,
        reference_len: target.text.len(),
        distance,
        ter: token_error_rate(&target.text, &hyp)?,
        failures: heard.failures(),
        flagged: heard.failures() > 0,
        dialect_match: heard.dialect == Some(target.dialect),
        emotion_match: heard.emotion == Some(target.emotion),
        speaker_match: heard.speaker == Some(target.speaker),
        speech_tokens,
    })
}

/// Decodes tokens with the codec, transcribes and scores.
pub fn score_tokens(renderer: &Renderer, codebook: &Codebook, target: &EvalTarget, tokens: &SpeechTokens) -> Result<EvalItem> {
    let frames = codec_decode(codebook, tokens)?;
    score_frames(renderer, target, &frames, tokens.len())
}

pub fn score_frames(renderer: &Renderer, target: &EvalTarget, frames: &SpeechFrames, speech_tokens: usize) -> Result<EvalItem> {
    let heard = oracle_transcribe(renderer, frames);
    score_transcript(target, &heard, speech_tokens)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DialectRow {
    pub items: usize,
    pub scored: usize,
    pub mean_ter: f64,
    pub dialect_match_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: Vec<EvalItem>,
    /// Mean TER over unflagged items.
    pub corpus_ter: f64,
    pub scored: usize,
    pub flagged: usize,
    /// Mean TER over every item, flagged ones included.
    pub strict_ter: f64,
    pub dialect_match_rate: f64,
    pub emotion_match_rate: f64,
    pub speaker_match_rate: f64,
    pub per_dialect: BTreeMap<usize, DialectRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn rate<'a>(items: impl Iterator<Item = &'a EvalItem>, f: impl Fn(&EvalItem) -> bool) -> f64 {
    mean(items.map(|i| if f(i) { 1.0 } else { 0.0 }))
}

impl EvalReport {
    /// Aggregates items in id order.
    pub fn new(mut items: Vec<EvalItem>) -> Self {
        items.sort_by_key(|i| i.id);
        let scored: Vec<&EvalItem> = items.iter().filter(|i| !i.flagged).collect();
        let mut per_dialect: BTreeMap<usize, DialectRow> = BTreeMap::new();
        for d in items.iter().map(|i| i.dialect) {
            per_dialect.entry(d).or_default();
        }
        for (d, row) in per_dialect.iter_mut() {
            let all: Vec<&EvalItem> = items.iter().filter(|i| i.dialect == *d).collect();
            row.items = all.len();
            row.scored = all.iter().filter(|i| !i.flagged).count();
            row.mean_ter = mean(all.iter().filter(|i| !i.flagged).map(|i| i.ter));
            row.dialect_match_rate = rate(all.iter().copied(), |i| i.dialect_match);
        }
        Self {
            corpus_ter: mean(scored.iter().map(|i| i.ter)),
            scored: scored.len(),
            flagged: items.len() - scored.len(),
            strict_ter: mean(items.iter().map(|i| i.ter)),
            dialect_match_rate: rate(items.iter(), |i| i.dialect_match),
            emotion_match_rate: rate(items.iter(), |i| i.emotion_match),
            speaker_match_rate: rate(items.iter(), |i| i.speaker_match),
            per_dialect,
            items,
        }
    }

    /// Fixed-width summary table.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "items {}  scored {}  flagged {}\ncorpus TER {:.4}  strict TER {:.4}\ndialect match {:.3}  emotion match {:.3}  speaker match {:.3}\n",
            self.items.len(),
            self.scored,
            self.flagged,
            self.corpus_ter,
            self.strict_ter,
            self.dialect_match_rate,
            self.emotion_match_rate,
            self.speaker_match_rate
        );
        s.push_str("dialect  items  scored  mean TER  dialect match\n");
        for (d, r) in &self.per_dialect {
            s.push_str(&format!(
                "{d:>7}  {:>5}  {:>6}  {:>8.4}  {:>13.3}\n",
                r.items, r.scored, r.mean_ter, r.dialect_match_rate
            ));
        }
        s
    }
}
