use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::toy_world::hash::mix64;
use crate::toy_world::{Grammar, WorldConfig};

/// One utterance of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyUtterance {
    pub id: u64,
    /// Utterances are generated in two-turn conversations that share speaker,
    /// dialect and emotion.
    pub conversation: u64,
    pub text: Vec<usize>,
    pub speaker: usize,
    pub dialect: usize,
    pub emotion: usize,
}

/// Generates `count` grammatical utterances. Same seed and config give the
/// same corpus.
pub fn gen_corpus(seed: u64, cfg: &WorldConfig, count: usize) -> Result<Vec<ToyUtterance>> {
    cfg.validate()?;
    let grammar = Grammar::new(cfg.alphabet, cfg.dialects);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dialects = WeightedIndex::new(&cfg.dialect_weights)
        .map_err(|e| crate::Error::Argument(e.to_string()))?;
    let emotions = WeightedIndex::new(&cfg.emotion_weights)
        .map_err(|e| crate::Error::Argument(e.to_string()))?;
    let mut out = Vec::with_capacity(count);
    let mut conversation = 0u64;
    while out.len() < count {
        let speaker = rng.random_range(0..cfg.speakers);
        let dialect = dialects.sample(&mut rng);
        let emotion = emotions.sample(&mut rng);
        for _ in 0..2 {
            if out.len() == count {
                break;
            }
            let len = rng.random_range(1..=cfg.max_len);
            let mut text = Vec::with_capacity(len);
            text.push(rng.random_range(0..cfg.alphabet - 1));
            while text.len() < len {
                let u: f64 = rng.random();
                text.push(grammar.sample_next(*text.last().expect("nonempty"), dialect, u));
            }
            out.push(ToyUtterance {
                id: out.len() as u64,
                conversation,
                text,
                speaker,
                dialect,
                emotion,
            });
        }
        conversation += 1;
    }
    Ok(out)
}

const SPLIT_SALT: u64 = 0x686f_6c64_6f75_7421;

/// Deterministic 90/10 split on a record id.
pub fn is_held_out(id: u64, seed: u64) -> bool {
    mix64(seed ^ SPLIT_SALT, id) % 10 == 0
}
