use std::path::Path;

use crate::error::{arg_err, Error, Result};
use crate::model::init::{fork_speech_branch, init_params};
use crate::model::layers::Net;
use crate::model::sequence::{Layout, Slot};
use crate::model::ModelConfig;
use crate::numerics::{read_checkpoint, write_checkpoint, Graph, NodeId, ParamStore, Scalar, Tensor};

/// Target value the cross-entropy skips.
pub const IGNORE: usize = usize::MAX;

/// Configuration plus single-precision parameters.
#[derive(Clone, Debug)]
pub struct DualBranchModel {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
}

impl<'a, S: Scalar> Net<'a, S> {
    /// Input embeddings `[T × d]` of a layout: slot content plus absolute
    /// position, plus response/group positions for generation layouts.
    pub fn embed(&self, g: &mut Graph<S>, layout: &Layout) -> Result<NodeId> {
        let cfg = self.cfg;
        let t = layout.slots.len();
        if t == 0 {
            return arg_err("empty layout");
        }
        if t > cfg.context {
            return arg_err(format!("{t} positions exceed the context of {}", cfg.context));
        }
        let mut text_ids = Vec::new();
        let mut group_ids = Vec::new();
        for s in &layout.slots {
            match s {
                Slot::Text { id, .. } => text_ids.push(*id),
                Slot::Group { tokens, .. } => {
                    if tokens.len() != cfg.group {
                        return arg_err("input groups must hold exactly G tokens");
                    }
                    group_ids.extend(tokens)
                }
                Slot::Prompt(_) => {}
            }
        }
        let mut parts = Vec::new();
        let mut offsets = [0usize; 3];
        if !text_ids.is_empty() {
            let table = self.p(g, "text.tok_emb")?;
            parts.push(g.embedding(table, &text_ids)?);
        }
        offsets[1] = text_ids.len();
        if let Some(frames) = &layout.prompt {
            let rows = self.embed_prompt(g, frames)?;
            if g.value(rows).rows() != layout.prompt_rows {
                return arg_err("projected prompt length disagrees with the layout");
            }
            parts.push(rows);
        }
        offsets[2] = offsets[1] + layout.prompt_rows;
        if !group_ids.is_empty() {
            let table = self.p(g, "speech.emb")?;
            let e = g.embedding(table, &group_ids)?;
            let e = g.reshape(e, vec![group_ids.len() / cfg.group, cfg.group * cfg.d_model])?;
            parts.push(self.linear(g, "speech.group_proj", e)?);
        }
        let stacked = g.concat_rows(&parts)?;
        let mut counters = [0usize; 3];
        let order: Vec<usize> = layout
            .slots
            .iter()
            .map(|s| match s {
                Slot::Text { .. } => {
                    counters[0] += 1;
                    counters[0] - 1
                }
                Slot::Prompt(r) => offsets[1] + r,
                Slot::Group { .. } => {
                    counters[2] += 1;
                    offsets[2] + counters[2] - 1
                }
            })
            .collect();
        let x = g.gather_rows(stacked, &order)?;
        let pos = self.p(g, "text.pos_emb")?;
        let pos = g.gather_rows(pos, &(0..t).collect::<Vec<_>>())?;
        let mut x = g.add(x, pos)?;
        if layout.generation {
            let resp: Vec<usize> = layout
                .slots
                .iter()
                .filter_map(|s| match s {
                    Slot::Text { resp: Some(j), .. } => Some(*j),
                    _ => None,
                })
                .collect();
            let ks: Vec<usize> = layout
                .slots
                .iter()
                .filter_map(|s| match s {
                    Slot::Group { k, .. } => Some(*k),
                    _ => None,
                })
                .collect();
            let mut extra = vec![g.constant(Tensor::zeros(&[1, cfg.d_model]))];
            if !resp.is_empty() {
                let table = self.p(g, "speech.resp_pos")?;
                extra.push(g.gather_rows(table, &resp)?);
            }
            if !ks.is_empty() {
                let table = self.p(g, "speech.group_pos")?;
                extra.push(g.gather_rows(table, &ks)?);
            }
            let extra_rows = g.concat_rows(&extra)?;
            let (mut r, mut q) = (0, 0);
            let order: Vec<usize> = layout
                .slots
                .iter()
                .map(|s| match s {
                    Slot::Text { resp: Some(_), .. } => {
                        r += 1;
                        r
                    }
                    Slot::Group { .. } => {
                        q += 1;
                        resp.len() + q
                    }
                    _ => 0,
                })
                .collect();
            let extra = g.gather_rows(extra_rows, &order)?;
            x = g.add(x, extra)?;
        }
        Ok(x)
    }

    /// Mean loss over every target of the layout: text targets through the
    /// text branch, speech groups through the speech branch and MTP head.
    pub fn loss(&self, g: &mut Graph<S>, layout: &Layout) -> Result<NodeId> {
        let x = self.embed(g, layout)?;
        let h = self.bottom(g, x)?;
        let mut terms: Vec<(NodeId, usize)> = Vec::new();
        if !layout.text_targets.is_empty() {
            let logits = self.text_logits(g, h)?;
            let mut targets = vec![IGNORE; layout.len()];
            for &(pos, id) in &layout.text_targets {
                targets[pos] = id;
            }
            let ce = g.cross_entropy(logits, &targets, IGNORE)?;
            terms.push((ce, layout.text_targets.len()));
        }
        if !layout.groups.is_empty() {
            let top = self.speech_hidden(g, h)?;
            let top = self.layer_norm(g, "speech.ln_f", top)?;
            let pos: Vec<usize> = layout.groups.iter().map(|gt| gt.pos).collect();
            let hg = g.gather_rows(top, &pos)?;
            for i in 0..self.cfg.group {
                let mut prev = Vec::with_capacity(pos.len());
                let mut targets = Vec::with_capacity(pos.len());
                for gt in &layout.groups {
                    prev.push(match i {
                        0 => self.cfg.speech_bos(),
                        _ => gt.tokens.get(i - 1).copied().unwrap_or(self.cfg.speech_pad()),
                    });
                    targets.push(gt.tokens.get(i).copied().unwrap_or(IGNORE));
                }
                let n = targets.iter().filter(|&&t| t != IGNORE).count();
                if n == 0 {
                    continue;
                }
                let logits = self.mtp_logits(g, i, hg, &prev)?;
                let ce = g.cross_entropy(logits, &targets, IGNORE)?;
                terms.push((ce, n));
            }
        }
        if terms.is_empty() {
            return arg_err("layout has no targets");
        }
        let total: usize = terms.iter().map(|t| t.1).sum();
        let mut acc: Option<NodeId> = None;
        for (node, n) in terms {
            let w = g.scale(node, S::from_usize(n) / S::from_usize(total))?;
            acc = Some(match acc {
                Some(a) => g.add(a, w)?,
                None => w,
            });
        }
        Ok(acc.expect("nonempty"))
    }
}

impl DualBranchModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let params = init_params(&cfg)?;
        Ok(Self { cfg, params })
    }

    pub fn net(&self) -> Net<'_, f32> {
        Net::new(&self.cfg, &self.params)
    }

    /// Copies the text top layers into the speech branch.
    pub fn fork_speech_branch(&mut self) -> Result<()> {
        fork_speech_branch(&self.cfg, &mut self.params)
    }

    /// Latents `[⌈T_f/stride⌉ × C_e]` for a frame matrix.
    pub fn encode_speech(&self, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let x = g.constant(frames.clone());
        let y = self.net().encode(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    pub fn project(&self, latent: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let x = g.constant(latent.clone());
        let y = self.net().project(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Projected prompt embeddings `[rows × d]`.
    pub fn embed_prompt(&self, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let y = self.net().embed_prompt(&mut g, frames)?;
        Ok(g.value(y).clone())
    }

    /// Text-branch logits `[T × V_t]` for arbitrary input embeddings.
    pub fn forward_text_branch(&self, embeddings: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_len(embeddings)?;
        let mut g = Graph::new();
        let x = g.constant(embeddings.clone());
        let net = self.net();
        let h = net.bottom(&mut g, x)?;
        let y = net.text_logits(&mut g, h)?;
        Ok(g.value(y).clone())
    }

    /// Speech-branch top hidden states `[T × d]`, before the final norm.
    pub fn forward_speech_branch(&self, embeddings: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_len(embeddings)?;
        let mut g = Graph::new();
        let x = g.constant(embeddings.clone());
        let net = self.net();
        let h = net.bottom(&mut g, x)?;
        let y = net.speech_hidden(&mut g, h)?;
        Ok(g.value(y).clone())
    }

    /// Text-branch top hidden states `[T × d]`, before the final norm.
    pub fn text_branch_hidden(&self, embeddings: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_len(embeddings)?;
        let mut g = Graph::new();
        let x = g.constant(embeddings.clone());
        let net = self.net();
        let h = net.bottom(&mut g, x)?;
        let y = net.text_hidden(&mut g, h)?;
        Ok(g.value(y).clone())
    }

    fn check_len(&self, x: &Tensor<f32>) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.cfg.d_model {
            return arg_err("embeddings must be [T × d_model]");
        }
        if x.rows() > self.cfg.context {
            return arg_err(format!("{} positions exceed the context of {}", x.rows(), self.cfg.context));
        }
        Ok(())
    }

    /// Input embeddings of a layout.
    pub fn embed_layout(&self, layout: &Layout) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let x = self.net().embed(&mut g, layout)?;
        Ok(g.value(x).clone())
    }

    /// Text-branch logits of a text layout.
    pub fn text_logits(&self, layout: &Layout) -> Result<Tensor<f32>> {
        self.forward_text_branch(&self.embed_layout(layout)?)
    }

    /// Loss value without recording gradients.
    pub fn loss_value(&self, layout: &Layout) -> Result<f32> {
        let mut g = Graph::new();
        let l = self.net().loss(&mut g, layout)?;
        Ok(g.value(l).data()[0])
    }

    /// Writes the parameter container (frozen flags included).
    pub fn save_params(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&self.params, f)
    }

    /// Reads a parameter container and checks it against `cfg`.
    pub fn load(cfg: ModelConfig, path: &Path) -> Result<Self> {
        let params = read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let fresh = init_params(&cfg)?;
        for name in fresh.names() {
            if !params.contains(name) {
                return Err(Error::Format(format!("checkpoint lacks parameter {name}")));
            }
            if params.get(name)?.shape() != fresh.get(name)?.shape() {
                return Err(Error::Format(format!("checkpoint parameter {name} has the wrong shape")));
            }
        }
        Ok(Self { cfg, params })
    }
}
