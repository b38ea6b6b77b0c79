use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::toy_world::codec::{codec_encode, Codebook, SpeechTokens};
use crate::toy_world::render::{Renderer, SpeechFrames};
use crate::toy_world::{toy_lm_continue, Grammar, ToyUtterance};

/// Speaker whose voice renders sentences for the synthesized-prompt strategy.
pub const TTS_VOICE_SPEAKER: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairStrategy {
    /// The utterance's own recording is the prompt; its transcript is continued.
    TranscriptContinuation,
    /// The sentence is rendered in a fixed synthetic voice, then continued.
    TtsRendered,
}

/// A speech prompt with the text the frozen toy LM continues it with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPair {
    pub id: u64,
    pub strategy: PairStrategy,
    pub prompt_frames: SpeechFrames,
    pub descriptor_prefix: Vec<usize>,
    /// Kept as metadata for evaluation; models never read it.
    pub transcript: Vec<usize>,
    pub continuation_text: Vec<usize>,
    pub speaker: usize,
    pub dialect: usize,
    pub emotion: usize,
}

/// `<text query, speech query, text response, speech response>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quadruple {
    pub id: u64,
    pub query_id: u64,
    pub response_id: u64,
    pub text_query: Vec<usize>,
    pub speech_query: SpeechFrames,
    pub text_response: Vec<usize>,
    pub speech_response: SpeechTokens,
    pub speaker: usize,
    pub dialect: usize,
    pub emotion: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuadrupleReport {
    pub built: usize,
    /// Utterances left without a partner because their speaker ran out.
    pub skipped_unpaired: usize,
    /// Consecutive same-speaker utterances whose dialect or emotion differ.
    pub skipped_mismatched: usize,
    pub speakers_skipped: Vec<usize>,
}

pub fn build_alignment_pairs(
    corpus: &[ToyUtterance],
    strategy: PairStrategy,
    renderer: &Renderer,
) -> Result<Vec<AlignmentPair>> {
    if corpus.is_empty() {
        return arg_err("alignment pairs need a nonempty corpus");
    }
    let cfg = renderer.config();
    let vocab = cfg.vocab();
    let grammar = Grammar::new(cfg.alphabet, cfg.dialects);
    corpus
        .iter()
        .map(|u| {
            let voiced = match strategy {
                PairStrategy::TranscriptContinuation => u.clone(),
                PairStrategy::TtsRendered => ToyUtterance {
                    speaker: TTS_VOICE_SPEAKER,
                    ..u.clone()
                },
            };
            let descriptor_prefix = vocab.descriptor_prefix(u.dialect, u.emotion);
            let mut prefix = descriptor_prefix.clone();
            prefix.extend_from_slice(&u.text);
            Ok(AlignmentPair {
                id: u.id,
                strategy,
                prompt_frames: renderer.render(&voiced)?,
                continuation_text: toy_lm_continue(&grammar, &vocab, &prefix, cfg.continuation_len),
                descriptor_prefix,
                transcript: u.text.clone(),
                speaker: voiced.speaker,
                dialect: u.dialect,
                emotion: u.emotion,
            })
        })
        .collect()
}

/// Pairs consecutive utterances of each speaker (in corpus order) as query and
/// response.
pub fn build_quadruples(
    corpus: &[ToyUtterance],
    renderer: &Renderer,
    codebook: &Codebook,
) -> Result<(Vec<Quadruple>, QuadrupleReport)> {
    let mut by_speaker: BTreeMap<usize, Vec<&ToyUtterance>> = BTreeMap::new();
    for u in corpus {
        by_speaker.entry(u.speaker).or_default().push(u);
    }
    let mut report = QuadrupleReport::default();
    let mut out = Vec::new();
    for (&speaker, utts) in &by_speaker {
        if utts.len() < 2 {
            report.speakers_skipped.push(speaker);
        }
        let mut i = 0;
        while i + 1 < utts.len() {
            let (q, r) = (utts[i], utts[i + 1]);
            if q.dialect != r.dialect || q.emotion != r.emotion {
                report.skipped_mismatched += 1;
                i += 1;
                continue;
            }
            out.push(Quadruple {
                id: q.id,
                query_id: q.id,
                response_id: r.id,
                text_query: q.text.clone(),
                speech_query: renderer.render(q)?,
                text_response: r.text.clone(),
                speech_response: codec_encode(codebook, &renderer.render(r)?)?,
                speaker,
                dialect: q.dialect,
                emotion: q.emotion,
            });
            i += 2;
        }
        report.skipped_unpaired += utts.len() - i;
    }
    out.sort_by_key(|q| q.id);
    report.built = out.len();
    Ok((out, report))
}
