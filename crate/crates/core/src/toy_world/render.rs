use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{arg_err, Result};
use crate::numerics::Tensor;
use crate::toy_world::hash::{mix64, unit};
use crate::toy_world::{ToyUtterance, WorldConfig};

const RENDER_SEED: u64 = 0x7265_6e64_6572_0001;
const LEVELS: [f32; 4] = [-2.0, -1.0, 1.0, 2.0];
const EMOTION_GAINS: [f32; 8] = [1.0, 0.6, 1.4, 0.8, 1.2, 0.7, 1.3, 0.9];
const SPEAKER_NORM: f32 = 0.2;
const JITTER: f32 = 0.015;
/// Templates are redrawn until every pair of class centers is at least this far apart.
const MIN_CENTER_DISTANCE: f32 = 2.0;
pub const FRAME_LIMIT: f32 = 4.0;

/// Rendered frames, `[T_f × F]`. Serializes as base64 of [`SpeechFrames::to_bytes`].
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechFrames {
    pub frames: Tensor<f32>,
}

impl Serialize for SpeechFrames {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&BASE64.encode(self.to_bytes()))
    }
}

impl<'de> Deserialize<'de> for SpeechFrames {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = BASE64.decode(text).map_err(serde::de::Error::custom)?;
        SpeechFrames::from_bytes(&bytes).map_err(serde::de::Error::custom)
    }
}

impl SpeechFrames {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.rank() != 2 {
            return arg_err("frames must be [T_f × F]");
        }
        Ok(Self { frames })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            frames: Tensor::zeros(&[0, dim]),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        self.frames.row(i)
    }

    /// Raw little-endian layout: `u32 T_f`, `u32 F`, then `T_f·F` f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.frames.len() * 4);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(crate::Error::Format("frame blob shorter than its header".into()));
        }
        let rows = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let cols = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if bytes.len() != 8 + rows * cols * 4 {
            return Err(crate::Error::Format(format!(
                "frame blob of {} bytes does not match header {rows}×{cols}",
                bytes.len()
            )));
        }
        let data = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            frames: Tensor::new(vec![rows, cols], data).map_err(|e| crate::Error::Format(e.to_string()))?,
        })
    }
}

/// Deterministic text-to-frame synthesizer.
///
/// Token `p` becomes `frames_per_token` frames. Even frame slots carry the
/// phoneme template mixed by a per-dialect signed permutation; odd slots carry
/// the template scaled by a per-emotion gain. Every frame then gets the
/// speaker offset plus a small jitter hashed from the utterance content and
/// frame index.
#[derive(Clone, Debug)]
pub struct Renderer {
    cfg: WorldConfig,
    templates: Vec<Vec<f32>>, // [alphabet · frames_per_token][F]
    mixes: Vec<(Vec<usize>, Vec<f32>)>,
    speaker_offsets: Vec<Vec<f32>>,
}

/// Identifies one decision class of the transcriber.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameClass {
    pub phoneme: usize,
    pub slot: usize,
    /// Dialect for even slots, emotion for odd slots.
    pub style: usize,
}

impl Renderer {
    pub fn new(cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.emotions > EMOTION_GAINS.len() {
            return arg_err(format!("at most {} emotions are supported", EMOTION_GAINS.len()));
        }
        let f = cfg.frame_dim;
        let mixes: Vec<(Vec<usize>, Vec<f32>)> = (0..cfg.dialects)
            .map(|d| {
                if d == 0 {
                    return ((0..f).collect(), vec![1.0; f]);
                }
                let mut perm: Vec<usize> = (0..f).collect();
                for i in (1..f).rev() {
                    let j = (mix64(RENDER_SEED ^ 0xd1a1, (d * 1000 + i) as u64) % (i as u64 + 1)) as usize;
                    perm.swap(i, j);
                }
                let signs = (0..f)
                    .map(|i| if mix64(RENDER_SEED ^ 0x5167, (d * 1000 + i) as u64) & 1 == 0 { 1.0 } else { -1.0 })
                    .collect();
                (perm, signs)
            })
            .collect();
        let speaker_offsets: Vec<Vec<f32>> = (0..cfg.speakers)
            .map(|s| {
                let v: Vec<f32> = (0..f)
                    .map(|i| unit(mix64(RENDER_SEED ^ 0x5b, (s * 1000 + i) as u64)) as f32)
                    .collect();
                let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
                v.into_iter().map(|x| x / n * SPEAKER_NORM).collect()
            })
            .collect();
        let mut attempt = 0u64;
        loop {
            let templates = (0..cfg.alphabet * cfg.frames_per_token)
                .map(|k| {
                    (0..f)
                        .map(|i| {
                            let h = mix64(RENDER_SEED ^ attempt, (k * 1000 + i) as u64);
                            LEVELS[(h % 4) as usize]
                        })
                        .collect()
                })
                .collect();
            let r = Self {
                cfg: cfg.clone(),
                templates,
                mixes: mixes.clone(),
                speaker_offsets: speaker_offsets.clone(),
            };
            if r.min_center_distance() >= MIN_CENTER_DISTANCE || attempt > 64 {
                return Ok(r);
            }
            attempt += 1;
        }
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    /// Number of style values (dialects or emotions) for a frame slot.
    fn styles(&self, slot: usize) -> usize {
        if slot % 2 == 0 {
            self.cfg.dialects
        } else {
            self.cfg.emotions
        }
    }

    pub fn classes(&self) -> Vec<FrameClass> {
        let mut out = Vec::new();
        for slot in 0..self.cfg.frames_per_token {
            for phoneme in 0..self.cfg.alphabet {
                for style in 0..self.styles(slot) {
                    out.push(FrameClass { phoneme, slot, style });
                }
            }
        }
        out
    }

    pub fn center(&self, c: FrameClass) -> Vec<f32> {
        let t = &self.templates[c.phoneme * self.cfg.frames_per_token + c.slot];
        if c.slot % 2 == 0 {
            let (perm, signs) = &self.mixes[c.style];
            (0..t.len()).map(|i| signs[i] * t[perm[i]]).collect()
        } else {
            let g = EMOTION_GAINS[c.style];
            t.iter().map(|v| v * g).collect()
        }
    }

    pub fn min_center_distance(&self) -> f32 {
        let centers: Vec<Vec<f32>> = self.classes().into_iter().map(|c| self.center(c)).collect();
        let mut best = f32::INFINITY;
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                best = best.min(dist(&centers[i], &centers[j]));
            }
        }
        best
    }

    pub fn speaker_offset(&self, s: usize) -> &[f32] {
        &self.speaker_offsets[s]
    }

    /// Largest possible distance of a rendered frame from its class center.
    pub fn max_spread(&self) -> f32 {
        let jitter = JITTER * (self.cfg.frame_dim as f32).sqrt();
        SPEAKER_NORM + jitter
    }

    pub fn render(&self, u: &ToyUtterance) -> Result<SpeechFrames> {
        let c = &self.cfg;
        if u.text.is_empty() || u.text.len() > c.max_len {
            return arg_err(format!("utterance length {} outside [1, {}]", u.text.len(), c.max_len));
        }
        if u.speaker >= c.speakers || u.dialect >= c.dialects || u.emotion >= c.emotions {
            return arg_err("utterance descriptor out of range");
        }
        if u.text.iter().any(|&p| p >= c.alphabet) {
            return arg_err("text token outside the phoneme alphabet");
        }
        let mut h = mix64(RENDER_SEED, u.speaker as u64);
        h = mix64(h, u.dialect as u64);
        h = mix64(h, u.emotion as u64);
        for &p in &u.text {
            h = mix64(h, p as u64);
        }
        let f = c.frame_dim;
        let rows = u.text.len() * c.frames_per_token;
        let mut data = Vec::with_capacity(rows * f);
        for (pos, &p) in u.text.iter().enumerate() {
            for slot in 0..c.frames_per_token {
                let style = if slot % 2 == 0 { u.dialect } else { u.emotion };
                let center = self.center(FrameClass { phoneme: p, slot, style });
                let frame_idx = (pos * c.frames_per_token + slot) as u64;
                for i in 0..f {
                    let j = unit(mix64(h, frame_idx * 1024 + i as u64)) as f32 * JITTER;
                    let v = center[i] + self.speaker_offsets[u.speaker][i] + j;
                    data.push(v.clamp(-FRAME_LIMIT, FRAME_LIMIT));
                }
            }
        }
        SpeechFrames::new(Tensor::new(vec![rows, f], data)?)
    }
}

pub(crate) fn dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// Convenience wrapper building a [`Renderer`] for the utterance's world.
pub fn render_speech(renderer: &Renderer, u: &ToyUtterance) -> Result<SpeechFrames> {
    renderer.render(u)
}
