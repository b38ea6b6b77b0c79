use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::toy_world::WorldConfig;

/// Splits `m` transformer layers into `(frozen bottom, tuned top)` as
/// `N = ⌊M/2⌋`, `K = M − N`.
pub fn freeze_plan(m: usize) -> Result<(usize, usize)> {
    if m < 2 {
        return arg_err(format!("need at least 2 layers to split, got {m}"));
    }
    let n = m / 2;
    Ok((n, m - n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub kernel: usize,
    /// Stride of the second convolution.
    pub stride: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            kernel: 3,
            stride: 2,
            layers: 2,
            heads: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub channels: usize,
    pub kernel: usize,
    /// Stride of the middle convolution.
    pub stride: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            kernel: 3,
            stride: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Total transformer layers `M`.
    pub layers: usize,
    /// Frozen shared bottom layers `N`.
    pub bottom_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub context: usize,
    pub text_vocab: usize,
    /// Codec vocabulary including EOS.
    pub speech_vocab: usize,
    /// Speech tokens per backbone step.
    pub group: usize,
    pub frame_dim: usize,
    pub frames_per_token: usize,
    /// Response text tokens buffered before the first speech group.
    pub lookahead: usize,
    /// Route speech through the text top layers instead of a separate copy.
    pub single_branch: bool,
    pub init_seed: u64,
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
}

impl ModelConfig {
    pub fn for_world(world: &WorldConfig) -> Self {
        let layers = 8;
        let (n, _) = freeze_plan(layers).expect("8 ≥ 2");
        Self {
            layers,
            bottom_layers: n,
            d_model: 64,
            heads: 4,
            ffn_mult: 4,
            context: 512,
            text_vocab: world.vocab().size(),
            speech_vocab: world.speech_vocab,
            group: 4,
            frame_dim: world.frame_dim,
            frames_per_token: world.frames_per_token,
            lookahead: 4,
            single_branch: false,
            init_seed: 0,
            encoder: EncoderConfig::default(),
            projector: ProjectorConfig::default(),
        }
    }

    /// Tuned top layers `K`.
    pub fn top_layers(&self) -> usize {
        self.layers - self.bottom_layers
    }

    pub fn d_ff(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn eos(&self) -> usize {
        self.speech_vocab - 1
    }

    /// Extra speech embedding rows: group start and padding.
    pub fn speech_bos(&self) -> usize {
        self.speech_vocab
    }

    pub fn speech_pad(&self) -> usize {
        self.speech_vocab + 1
    }

    /// Response text tokens consumed per speech group, `⌈G / R_f⌉`.
    pub fn text_per_group(&self) -> usize {
        self.group.div_ceil(self.frames_per_token)
    }

    /// Maximum speech tokens generated for `n` text tokens.
    pub fn max_speech_tokens(&self, n: usize) -> usize {
        4 * self.frames_per_token * n + 16
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.bottom_layers == 0 || self.bottom_layers >= self.layers {
            return arg_err("need 1 ≤ bottom_layers < layers");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return arg_err("d_model must be divisible by heads");
        }
        if self.encoder.heads == 0 || self.encoder.channels % self.encoder.heads != 0 {
            return arg_err("encoder channels must be divisible by encoder heads");
        }
        if self.group == 0 || self.frames_per_token == 0 {
            return arg_err("group and frames_per_token must be positive");
        }
        for k in [self.encoder.kernel, self.projector.kernel] {
            if k % 2 == 0 {
                return arg_err("convolution kernels must be odd");
            }
        }
        if self.encoder.stride == 0 || self.projector.stride == 0 {
            return arg_err("strides must be positive");
        }
        if self.speech_vocab < 2 || self.text_vocab == 0 || self.context == 0 || self.ffn_mult == 0 {
            return arg_err("vocabularies, context and ffn width must be positive");
        }
        Ok(())
    }

    /// Latent rows the encoder produces for `t_f` frames.
    pub fn encoded_len(&self, t_f: usize) -> usize {
        t_f.div_ceil(self.encoder.stride)
    }

    /// Embedding rows the projector produces for `latent` rows.
    pub fn projected_len(&self, latent: usize) -> usize {
        latent.div_ceil(self.projector.stride)
    }

    /// Projector parameters: three `k`-wide convolutions with biases, then a
    /// linear map with bias, `k·C_e·C_p + 2·k·C_p² + 3·C_p + C_p·d + d`.
    pub fn projector_param_count(&self) -> usize {
        let (k, ce, cp, d) = (self.projector.kernel, self.encoder.channels, self.projector.channels, self.d_model);
        k * ce * cp + 2 * k * cp * cp + 3 * cp + cp * d + d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_plan_examples() {
        assert_eq!(freeze_plan(8).unwrap(), (4, 4));
        assert_eq!(freeze_plan(7).unwrap(), (3, 4));
        assert_eq!(freeze_plan(2).unwrap(), (1, 1));
        assert!(freeze_plan(1).is_err());
    }

    #[test]
    fn default_satisfies_the_split_rule() {
        let c = ModelConfig::for_world(&WorldConfig::default());
        c.validate().unwrap();
        assert_eq!((c.bottom_layers, c.top_layers()), freeze_plan(c.layers).unwrap());
        assert_eq!(c.text_per_group(), 2);
        assert_eq!(c.encoded_len(8), 4);
        assert_eq!(c.projected_len(4), 2);
    }
}
