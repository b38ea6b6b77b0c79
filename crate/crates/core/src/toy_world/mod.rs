//! A fully synthetic speech universe.
//!
//! Utterances are phoneme-like token strings drawn from a dialect-conditioned
//! bigram grammar. [`render_speech`] turns them into frames, the [`Codebook`]
//! quantizes frames into speech tokens, and [`oracle_transcribe`] inverts
//! rendering exactly, which makes token error rates measurable without any
//! learned recognizer.

mod codec;
mod corpus;
mod data;
mod grammar;
mod hash;
mod oracle;
pub mod records;
mod render;
mod vocab;

pub use codec::{
    CODEBOOK_CORPUS, KMEANS_ITERS,
    codec_decode, codec_encode, kmeans, Codebook, MarginReport, SpeechTokens, CODEBOOK_SEED, CODEBOOK_VERSION,
};
pub use corpus::{gen_corpus, is_held_out, ToyUtterance};
pub use data::{
    build_alignment_pairs, build_quadruples, AlignmentPair, PairStrategy, Quadruple, QuadrupleReport,
    TTS_VOICE_SPEAKER,
};
pub use grammar::{toy_lm_continue, Grammar};
pub use hash::mix64;
pub use oracle::{oracle_transcribe, Heard, Transcript};
pub use render::{render_speech, FrameClass, Renderer, SpeechFrames, FRAME_LIMIT};
pub use vocab::TextVocab;

use serde::{Deserialize, Serialize};

/// Shape of the synthetic world and its corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Phoneme alphabet size.
    pub alphabet: usize,
    pub speakers: usize,
    pub dialects: usize,
    pub emotions: usize,
    pub max_len: usize,
    pub frame_dim: usize,
    pub frames_per_token: usize,
    /// Codec vocabulary including the end-of-speech id.
    pub speech_vocab: usize,
    pub continuation_len: usize,
    pub dialect_weights: Vec<f64>,
    pub emotion_weights: Vec<f64>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            alphabet: 32,
            speakers: 16,
            dialects: 4,
            emotions: 3,
            max_len: 24,
            frame_dim: 16,
            frames_per_token: 2,
            speech_vocab: 257,
            continuation_len: 8,
            dialect_weights: vec![1.0; 4],
            emotion_weights: vec![1.0; 3],
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let positive = [
            self.alphabet,
            self.speakers,
            self.dialects,
            self.emotions,
            self.max_len,
            self.frame_dim,
            self.frames_per_token,
            self.continuation_len,
        ];
        if positive.contains(&0) {
            return crate::error::arg_err("world sizes must be positive");
        }
        if self.alphabet < 2 {
            return crate::error::arg_err("alphabet needs at least two phonemes");
        }
        if self.speech_vocab < 2 {
            return crate::error::arg_err("speech vocabulary needs a centroid and EOS");
        }
        if self.dialect_weights.len() != self.dialects || self.emotion_weights.len() != self.emotions {
            return crate::error::arg_err("one weight per dialect and per emotion is required");
        }
        let ok = |w: &[f64]| w.iter().all(|&v| v >= 0.0 && v.is_finite()) && w.iter().sum::<f64>() > 0.0;
        if !ok(&self.dialect_weights) || !ok(&self.emotion_weights) {
            return crate::error::arg_err("weights must be nonnegative with a positive sum");
        }
        Ok(())
    }

    pub fn eos(&self) -> usize {
        self.speech_vocab - 1
    }

    pub fn vocab(&self) -> TextVocab {
        TextVocab::new(self.alphabet, self.dialects, self.emotions)
    }
}
