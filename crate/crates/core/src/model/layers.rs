//! Graph builders shared by training, gradient checks and the probe paths.
//!
//! Everything here is generic over the scalar so the same code can be
//! evaluated in `f64` for finite differences.

use crate::error::{arg_err, Result};
use crate::model::ModelConfig;
use crate::numerics::{Graph, NodeId, ParamStore, Scalar, Tensor};

/// Read-only view of a configuration plus parameters at one precision.
pub struct Net<'a, S: Scalar> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore<S>,
}

impl<'a, S: Scalar> Net<'a, S> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamStore<S>) -> Self {
        Self { cfg, params }
    }

    pub fn p(&self, g: &mut Graph<S>, name: &str) -> Result<NodeId> {
        g.param(self.params, name)
    }

    /// `x·W + b` with parameters `{name}.w`, `{name}.b`.
    pub fn linear(&self, g: &mut Graph<S>, name: &str, x: NodeId) -> Result<NodeId> {
        let w = self.p(g, &format!("{name}.w"))?;
        let b = self.p(g, &format!("{name}.b"))?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub fn layer_norm(&self, g: &mut Graph<S>, name: &str, x: NodeId) -> Result<NodeId> {
        let gamma = self.p(g, &format!("{name}.g"))?;
        let beta = self.p(g, &format!("{name}.b"))?;
        g.layer_norm(x, gamma, beta)
    }

    pub fn conv(&self, g: &mut Graph<S>, name: &str, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let w = self.p(g, &format!("{name}.w"))?;
        let b = self.p(g, &format!("{name}.b"))?;
        g.conv1d(x, w, b, kernel, stride)
    }

    /// Pre-norm transformer block.
    pub fn block(&self, g: &mut Graph<S>, name: &str, x: NodeId, heads: usize, causal: bool) -> Result<NodeId> {
        let h = self.layer_norm(g, &format!("{name}.ln1"), x)?;
        let q = self.linear(g, &format!("{name}.attn.q"), h)?;
        let k = self.linear(g, &format!("{name}.attn.k"), h)?;
        let v = self.linear(g, &format!("{name}.attn.v"), h)?;
        let a = g.attention(q, k, v, heads, causal)?;
        let o = self.linear(g, &format!("{name}.attn.o"), a)?;
        let x = g.add(x, o)?;
        let h = self.layer_norm(g, &format!("{name}.ln2"), x)?;
        let u = self.linear(g, &format!("{name}.ffn.up"), h)?;
        let u = g.gelu(u)?;
        let f = self.linear(g, &format!("{name}.ffn.down"), u)?;
        g.add(x, f)
    }

    /// Frames `[T_f × F]` to latents `[⌈T_f/stride⌉ × C_e]`.
    pub fn encode(&self, g: &mut Graph<S>, frames: NodeId) -> Result<NodeId> {
        let e = &self.cfg.encoder;
        if g.value(frames).rank() != 2 || g.value(frames).rows() == 0 {
            return arg_err("encoder needs at least one frame");
        }
        let x = self.conv(g, "enc.conv1", frames, e.kernel, 1)?;
        let x = g.gelu(x)?;
        let x = self.conv(g, "enc.conv2", x, e.kernel, e.stride)?;
        let mut x = g.gelu(x)?;
        let t = g.value(x).rows();
        if t > self.cfg.context {
            return arg_err(format!("{t} latent rows exceed the context of {}", self.cfg.context));
        }
        let pos = self.p(g, "enc.pos")?;
        let pos = g.gather_rows(pos, &(0..t).collect::<Vec<_>>())?;
        x = g.add(x, pos)?;
        for i in 0..e.layers {
            x = self.block(g, &format!("enc.layer.{i}"), x, e.heads, false)?;
        }
        self.layer_norm(g, "enc.ln_f", x)
    }

    /// Latents to `d_model` embeddings: three convolutions (the middle one
    /// strided) followed by a linear map.
    pub fn project(&self, g: &mut Graph<S>, latent: NodeId) -> Result<NodeId> {
        let pc = &self.cfg.projector;
        if g.value(latent).rows() == 0 {
            return arg_err("projector needs at least one latent row");
        }
        let x = self.conv(g, "proj.conv1", latent, pc.kernel, 1)?;
        let x = g.gelu(x)?;
        let x = self.conv(g, "proj.conv2", x, pc.kernel, pc.stride)?;
        let x = g.gelu(x)?;
        let x = self.conv(g, "proj.conv3", x, pc.kernel, 1)?;
        let x = g.gelu(x)?;
        self.linear(g, "proj.linear", x)
    }

    /// Encoder then projector on raw frames.
    pub fn embed_prompt(&self, g: &mut Graph<S>, frames: &Tensor<f32>) -> Result<NodeId> {
        let x = g.constant(frames.cast());
        let latent = self.encode(g, x)?;
        self.project(g, latent)
    }

    pub fn bottom(&self, g: &mut Graph<S>, mut x: NodeId) -> Result<NodeId> {
        for i in 0..self.cfg.bottom_layers {
            x = self.block(g, &bottom_name(i), x, self.cfg.heads, true)?;
        }
        Ok(x)
    }

    /// Text top layers, final norm and text head.
    pub fn text_logits(&self, g: &mut Graph<S>, mut x: NodeId) -> Result<NodeId> {
        for i in 0..self.cfg.top_layers() {
            x = self.block(g, &text_top_name(i), x, self.cfg.heads, true)?;
        }
        let x = self.layer_norm(g, "text.ln_f", x)?;
        self.linear(g, "text.head", x)
    }

    /// Raw outputs of the text top layers, before the final norm.
    pub fn text_hidden(&self, g: &mut Graph<S>, mut x: NodeId) -> Result<NodeId> {
        for i in 0..self.cfg.top_layers() {
            x = self.block(g, &text_top_name(i), x, self.cfg.heads, true)?;
        }
        Ok(x)
    }

    /// Raw outputs of the speech top layers, before the final norm.
    pub fn speech_hidden(&self, g: &mut Graph<S>, mut x: NodeId) -> Result<NodeId> {
        for i in 0..self.cfg.top_layers() {
            x = self.block(g, &speech_top_name(self.cfg, i), x, self.cfg.heads, true)?;
        }
        Ok(x)
    }

    /// Logits of MTP sub-head `i` for hidden rows `h` (already normalized)
    /// and previous-token ids.
    pub fn mtp_logits(&self, g: &mut Graph<S>, i: usize, h: NodeId, prev: &[usize]) -> Result<NodeId> {
        let table = self.p(g, "speech.emb")?;
        let e = g.embedding(table, prev)?;
        let hz = g.concat_cols(&[h, e])?;
        let z = self.linear(g, &format!("mtp.{i}"), hz)?;
        let z = g.gelu(z)?;
        let z = g.add(z, h)?;
        self.linear(g, "speech.head", z)
    }
}

pub fn bottom_name(i: usize) -> String {
    format!("bottom.{i}")
}

pub fn text_top_name(i: usize) -> String {
    format!("text_top.{i}")
}

/// Speech path layer `i`; the single-branch baseline reuses the text layers.
pub fn speech_top_name(cfg: &ModelConfig, i: usize) -> String {
    if cfg.single_branch {
        text_top_name(i)
    } else {
        format!("speech_top.{i}")
    }
}
