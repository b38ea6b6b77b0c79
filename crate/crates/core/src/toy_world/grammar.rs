use crate::toy_world::hash::mix64;
use crate::toy_world::TextVocab;

const GRAMMAR_SEED: u64 = 0x6772_616d_6d61_7231;
const BRANCHING: usize = 4;
const BASE_WEIGHTS: [f64; BRANCHING] = [0.4, 0.3, 0.2, 0.1];

/// Dialect-conditioned bigram grammar over phonemes.
///
/// Every non-terminal phoneme has four fixed successors; a dialect rotates the
/// successor weights, so each dialect prefers a different successor. The last
/// phoneme of the alphabet is terminal and is always followed by phoneme 0.
#[derive(Clone, Debug)]
pub struct Grammar {
    alphabet: usize,
    dialects: usize,
    successors: Vec<Vec<usize>>,
}

impl Grammar {
    pub fn new(alphabet: usize, dialects: usize) -> Self {
        let successors = (0..alphabet)
            .map(|p| {
                if p == alphabet - 1 {
                    return vec![0];
                }
                let mut s: Vec<usize> = Vec::with_capacity(BRANCHING);
                let mut k = 0u64;
                while s.len() < BRANCHING.min(alphabet) {
                    let c = (mix64(GRAMMAR_SEED ^ p as u64, k) % alphabet as u64) as usize;
                    if !s.contains(&c) {
                        s.push(c);
                    }
                    k += 1;
                }
                s
            })
            .collect();
        Self {
            alphabet,
            dialects,
            successors,
        }
    }

    pub fn terminal(&self) -> usize {
        self.alphabet - 1
    }

    /// Phoneme a continuation starts from when the prefix holds no phoneme.
    pub fn start_token(&self, dialect: usize) -> usize {
        dialect % (self.alphabet - 1)
    }

    /// `(successor, probability)` pairs after `prev` under `dialect`.
    pub fn transitions(&self, prev: usize, dialect: usize) -> Vec<(usize, f64)> {
        let succ = &self.successors[prev];
        if succ.len() == 1 {
            return vec![(succ[0], 1.0)];
        }
        let w: Vec<f64> = (0..succ.len())
            .map(|k| BASE_WEIGHTS[(k + dialect) % BRANCHING])
            .collect();
        let z: f64 = w.iter().sum();
        succ.iter().zip(w).map(|(&s, w)| (s, w / z)).collect()
    }

    pub fn probability(&self, prev: usize, next: usize, dialect: usize) -> f64 {
        self.transitions(prev, dialect)
            .into_iter()
            .filter(|&(s, _)| s == next)
            .map(|(_, p)| p)
            .sum()
    }

    /// Most probable successor; ties go to the lowest id.
    pub fn greedy_next(&self, prev: usize, dialect: usize) -> usize {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (s, p) in self.transitions(prev, dialect) {
            if p > best.1 || (p == best.1 && s < best.0) {
                best = (s, p);
            }
        }
        best.0
    }

    /// Samples a successor from a uniform draw `u ∈ [0, 1)`.
    pub fn sample_next(&self, prev: usize, dialect: usize, u: f64) -> usize {
        let t = self.transitions(prev, dialect);
        let mut acc = 0.0;
        for &(s, p) in &t {
            acc += p;
            if u < acc {
                return s;
            }
        }
        t.last().expect("nonempty").0
    }

    pub fn dialects(&self) -> usize {
        self.dialects
    }
}

/// Greedy continuation of `prefix` by the frozen toy language model.
///
/// The dialect comes from the first dialect descriptor in the prefix
/// (dialect 0 when absent); the walk starts at the last phoneme.
pub fn toy_lm_continue(grammar: &Grammar, vocab: &TextVocab, prefix: &[usize], len: usize) -> Vec<usize> {
    let dialect = prefix.iter().find_map(|&t| vocab.as_dialect(t)).unwrap_or(0);
    let mut prev = prefix.iter().rev().copied().find(|&t| vocab.is_phoneme(t));
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let next = match prev {
            Some(p) => grammar.greedy_next(p, dialect),
            None => grammar.start_token(dialect),
        };
        out.push(next);
        prev = Some(next);
    }
    out
}
