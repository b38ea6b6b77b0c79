//! Row-at-a-time inference with cached keys and values.
//!
//! Every kernel here is the one the graph uses, applied to a single row, so a
//! position processed incrementally gets bitwise the same values as in a full
//! forward pass over the sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::model::layers::{bottom_name, speech_top_name};
use crate::model::sequence::Slot;
use crate::model::DualBranchModel;
use crate::numerics::kernels;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Greedy,
    Sampled,
}

/// Token selection. Sampling draws from one generator in emission order.
#[derive(Clone, Debug)]
pub struct Sampler {
    pub mode: DecodeMode,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(mode: DecodeMode, seed: u64) -> Self {
        Self {
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Picks a token; greedy ties go to the lowest id.
    pub fn pick(&mut self, logits: &[f32]) -> usize {
        match self.mode {
            DecodeMode::Greedy => argmax(logits),
            DecodeMode::Sampled => {
                let mut p: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
                kernels::softmax_in_place(&mut p);
                let u: f64 = self.rng.random();
                let mut acc = 0.0;
                for (i, &pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return i;
                    }
                }
                p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
            }
        }
    }
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Constraints on the EOS decision, used by tests that need matched lengths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthControl {
    /// When set, EOS is masked before this many tokens and forced at it
    /// (the EOS is token number `exact_len`, counting from 1).
    pub exact_len: Option<usize>,
}

struct Lin<'a> {
    w: &'a [f32],
    b: &'a [f32],
    n_in: usize,
    n_out: usize,
}

impl Lin<'_> {
    fn apply(&self, x: &[f32]) -> Vec<f32> {
        let mut y = kernels::matmul(x, self.w, 1, self.n_in, self.n_out);
        kernels::add_bias(&mut y, self.b);
        y
    }
}

/// Backbone state for one sequence on the speech path (bottom plus speech
/// top layers).
pub struct Engine<'m> {
    model: &'m DualBranchModel,
    blocks: Vec<String>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m DualBranchModel) -> Self {
        let cfg = &model.cfg;
        let mut blocks: Vec<String> = (0..cfg.bottom_layers).map(bottom_name).collect();
        blocks.extend((0..cfg.top_layers()).map(|i| speech_top_name(cfg, i)));
        let n = blocks.len();
        Self {
            model,
            blocks,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Positions processed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn param(&self, name: &str) -> &'m [f32] {
        self.model.params.get(name).expect("parameter exists").data()
    }

    fn lin(&self, name: &str, n_in: usize, n_out: usize) -> Lin<'m> {
        Lin {
            w: self.param(&format!("{name}.w")),
            b: self.param(&format!("{name}.b")),
            n_in,
            n_out,
        }
    }

    fn norm(&self, name: &str, x: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        kernels::layer_norm_row(
            x,
            self.param(&format!("{name}.g")),
            self.param(&format!("{name}.b")),
            &mut out,
            &mut xhat,
        );
        out
    }

    /// Input row for `slot` at the next position. `prompt` holds the projected
    /// prompt rows; `generation` adds response/group positions.
    pub fn slot_embedding(&self, slot: &Slot, prompt: Option<&Tensor<f32>>, generation: bool) -> Result<Vec<f32>> {
        let cfg = &self.model.cfg;
        let d = cfg.d_model;
        if self.len >= cfg.context {
            return arg_err(format!("context of {} positions exhausted", cfg.context));
        }
        let row = |name: &str, i: usize| -> &'m [f32] { &self.param(name)[i * d..(i + 1) * d] };
        let mut x: Vec<f32> = match slot {
            Slot::Text { id, .. } => row("text.tok_emb", *id).to_vec(),
            Slot::Prompt(r) => match prompt {
                Some(p) if *r < p.rows() => p.row(*r).to_vec(),
                _ => return arg_err("prompt row out of range"),
            },
            Slot::Group { tokens, .. } => {
                if tokens.len() != cfg.group {
                    return arg_err("input groups must hold exactly G tokens");
                }
                let mut cat = Vec::with_capacity(cfg.group * d);
                for &t in tokens {
                    cat.extend_from_slice(row("speech.emb", t));
                }
                self.lin("speech.group_proj", cfg.group * d, d).apply(&cat)
            }
        };
        for (a, &p) in x.iter_mut().zip(row("text.pos_emb", self.len)) {
            *a += p;
        }
        if generation {
            let zeros = vec![0.0; d];
            let extra: &[f32] = match slot {
                Slot::Text { resp: Some(j), .. } => row("speech.resp_pos", *j),
                Slot::Group { k, .. } => row("speech.group_pos", *k),
                _ => &zeros,
            };
            for (a, &e) in x.iter_mut().zip(extra) {
                *a += e;
            }
        }
        Ok(x)
    }

    /// Runs one position through all layers and returns the top hidden state
    /// (before the final norm).
    pub fn push_row(&mut self, x: &[f32]) -> Result<Vec<f32>> {
        let cfg = &self.model.cfg;
        let d = cfg.d_model;
        if x.len() != d {
            return arg_err("row width differs from d_model");
        }
        if self.len >= cfg.context {
            return arg_err(format!("context of {} positions exhausted", cfg.context));
        }
        let mut x = x.to_vec();
        for li in 0..self.blocks.len() {
            let name = self.blocks[li].clone();
            let h = self.norm(&format!("{name}.ln1"), &x);
            let q = self.lin(&format!("{name}.attn.q"), d, d).apply(&h);
            let k = self.lin(&format!("{name}.attn.k"), d, d).apply(&h);
            let v = self.lin(&format!("{name}.attn.v"), d, d).apply(&h);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&v);
            let mut a = vec![0.0; d];
            kernels::attention_row(&q, &self.keys[li], &self.values[li], self.len + 1, cfg.heads, &mut a, None);
            let o = self.lin(&format!("{name}.attn.o"), d, d).apply(&a);
            let x1: Vec<f32> = x.iter().zip(&o).map(|(&p, &q)| p + q).collect();
            let h = self.norm(&format!("{name}.ln2"), &x1);
            let u: Vec<f32> = self
                .lin(&format!("{name}.ffn.up"), d, cfg.d_ff())
                .apply(&h)
                .into_iter()
                .map(kernels::gelu)
                .collect();
            let f = self.lin(&format!("{name}.ffn.down"), cfg.d_ff(), d).apply(&u);
            x = x1.iter().zip(&f).map(|(&p, &q)| p + q).collect();
        }
        self.len += 1;
        Ok(x)
    }

    /// Embeds and runs a slot; returns the top hidden state.
    pub fn push_slot(&mut self, slot: &Slot, prompt: Option<&Tensor<f32>>, generation: bool) -> Result<Vec<f32>> {
        let x = self.slot_embedding(slot, prompt, generation)?;
        self.push_row(&x)
    }

    /// Grouped multi-token prediction from one top hidden state: sub-head `i`
    /// reads the hidden state and the embedding of token `i − 1` and emits
    /// token `i`. Stops after EOS. `emitted` counts tokens before this group.
    pub fn mtp_step(&self, top: &[f32], sampler: &mut Sampler, emitted: usize, ctl: LengthControl) -> Vec<usize> {
        mtp_step(self.model, top, sampler, emitted, ctl)
    }
}

/// See [`Engine::mtp_step`].
pub fn mtp_step(
    model: &DualBranchModel,
    top: &[f32],
    sampler: &mut Sampler,
    emitted: usize,
    ctl: LengthControl,
) -> Vec<usize> {
    let cfg = &model.cfg;
    let d = cfg.d_model;
    let eng = Engine::new(model);
    let h = eng.norm("speech.ln_f", top);
    let emb = eng.param("speech.emb");
    let head = eng.lin("speech.head", d, cfg.speech_vocab);
    let mut out = Vec::with_capacity(cfg.group);
    let mut prev = cfg.speech_bos();
    for i in 0..cfg.group {
        let mut hz = h.clone();
        hz.extend_from_slice(&emb[prev * d..(prev + 1) * d]);
        let z: Vec<f32> = eng
            .lin(&format!("mtp.{i}"), 2 * d, d)
            .apply(&hz)
            .into_iter()
            .map(kernels::gelu)
            .zip(&h)
            .map(|(a, &b)| a + b)
            .collect();
        let mut logits = head.apply(&z);
        let index = emitted + out.len() + 1;
        if let Some(n) = ctl.exact_len {
            if index < n {
                logits[cfg.eos()] = f32::NEG_INFINITY;
            } else {
                logits.iter_mut().for_each(|v| *v = f32::NEG_INFINITY);
                logits[cfg.eos()] = 0.0;
            }
        }
        let t = sampler.pick(&logits);
        out.push(t);
        if t == cfg.eos() {
            break;
        }
        prev = t;
    }
    out
}
