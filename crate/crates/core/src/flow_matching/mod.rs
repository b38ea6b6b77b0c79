//! Token-to-frame decoder trained by conditional flow matching.
//!
//! The path is the straight line from standard-normal noise `x0` to a data
//! frame `x1`; the network regresses its constant velocity `x1 − x0`.
//! Conditioning is frame-local: frame `p` sees its own token and the tokens
//! within `neighborhood` positions of it, so any stretch of frames can be
//! decoded from a window of tokens.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::numerics::{read_checkpoint, write_checkpoint, AdamConfig, Graph, NodeId, ParamStore, Scalar, Tensor};
use crate::toy_world::{mix64, Codebook, SpeechFrames, SpeechTokens, WorldConfig};

pub const TIME_FEATURES: usize = 5;
pub const DEFAULT_STEPS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfmConfig {
    pub frame_dim: usize,
    /// Speech vocabulary including EOS; id `speech_vocab` pads the edges.
    pub speech_vocab: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub neighborhood: usize,
    pub init_seed: u64,
}

impl CfmConfig {
    pub fn for_world(w: &WorldConfig) -> Self {
        Self {
            frame_dim: w.frame_dim,
            speech_vocab: w.speech_vocab,
            emb_dim: 16,
            hidden: 128,
            neighborhood: 1,
            init_seed: 0xcf,
        }
    }

    pub fn pad(&self) -> usize {
        self.speech_vocab
    }

    pub fn window(&self) -> usize {
        2 * self.neighborhood + 1
    }

    pub fn input_dim(&self) -> usize {
        self.frame_dim + TIME_FEATURES + self.window() * self.emb_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_dim == 0 || self.speech_vocab < 2 || self.emb_dim == 0 || self.hidden == 0 {
            return arg_err("flow-matching sizes must be positive");
        }
        Ok(())
    }
}

/// Point and velocity on the straight path: `x_t = (1 − t)·x0 + t·x1`,
/// `v = x1 − x0`.
pub fn cfm_target<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>, t: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(0.0..=1.0).contains(&t) {
        return arg_err(format!("time {t} outside [0, 1]"));
    }
    if x0.shape() != x1.shape() {
        return arg_err("source and target shapes differ");
    }
    let (a, b) = (T::lit(1.0 - t), T::lit(t));
    let xt: Vec<T> = x0.data().iter().zip(x1.data()).map(|(&p, &q)| a * p + b * q).collect();
    let v: Vec<T> = x0.data().iter().zip(x1.data()).map(|(&p, &q)| q - p).collect();
    Ok((Tensor::new(x0.shape().to_vec(), xt)?, Tensor::new(x0.shape().to_vec(), v)?))
}

pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let w = std::f64::consts::PI * t;
    [t, w.sin(), w.cos(), (2.0 * w).sin(), (2.0 * w).cos()]
}

/// Condition ids of position `p`: tokens `p − n ..= p + n`, padded outside
/// the sequence.
pub fn condition_ids(cfg: &CfmConfig, tokens: &[usize], p: usize) -> Vec<usize> {
    let n = cfg.neighborhood as isize;
    (-n..=n)
        .map(|o| {
            let q = p as isize + o;
            if q < 0 || q as usize >= tokens.len() {
                cfg.pad()
            } else {
                tokens[q as usize]
            }
        })
        .collect()
}

/// Source noise of absolute frame position `p`; independent of any other
/// position so chunked and whole-sequence sampling draw the same values.
pub fn source_noise(seed: u64, p: usize, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed, p as u64));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Velocity field over frame rows.
pub trait VectorField {
    fn frame_dim(&self) -> usize;

    /// Velocities for states `x` `[R × F]` at time `t`, where row `r` is
    /// frame `positions[r]` of the sequence `tokens` (EOS excluded).
    fn velocity(&self, x: &Tensor<f32>, t: f32, tokens: &[usize], positions: &[usize]) -> Result<Tensor<f32>>;
}

/// Graph of the field network for rows with per-row times and condition ids.
pub fn field_graph<S: Scalar>(
    cfg: &CfmConfig,
    params: &ParamStore<S>,
    g: &mut Graph<S>,
    x: NodeId,
    times: &[f64],
    cond: &[Vec<usize>],
) -> Result<NodeId> {
    let rows = g.value(x).rows();
    if times.len() != rows || cond.len() != rows {
        return arg_err("one time and one condition per row");
    }
    let tf: Vec<S> = times.iter().flat_map(|&t| time_features(t)).map(S::lit).collect();
    let tf = g.constant(Tensor::new(vec![rows, TIME_FEATURES], tf)?);
    let table = g.param(params, "cfm.emb")?;
    let mut parts = vec![x, tf];
    for j in 0..cfg.window() {
        let ids: Vec<usize> = cond.iter().map(|c| c[j]).collect();
        parts.push(g.embedding(table, &ids)?);
    }
    let mut h = g.concat_cols(&parts)?;
    for (name, act) in [("cfm.l1", true), ("cfm.l2", true), ("cfm.out", false)] {
        let w = g.param(params, &format!("{name}.w"))?;
        let b = g.param(params, &format!("{name}.b"))?;
        let y = g.matmul(h, w)?;
        h = g.add_bias(y, b)?;
        if act {
            h = g.gelu(h)?;
        }
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub struct CfmModel {
    pub cfg: CfmConfig,
    pub params: ParamStore<f32>,
}

impl CfmModel {
    pub fn new(cfg: CfmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut params = ParamStore::new();
        let mut normal = |name: &str, shape: [usize; 2], std: f64| -> Result<()> {
            let d = Normal::new(0.0, std).expect("positive std");
            let data = (0..shape[0] * shape[1]).map(|_| d.sample(&mut rng) as f32).collect();
            params.insert(name, Tensor::new(shape.to_vec(), data)?)
        };
        normal("cfm.emb", [cfg.speech_vocab + 1, cfg.emb_dim], 1.0)?;
        let dims = [
            ("cfm.l1", cfg.input_dim(), cfg.hidden),
            ("cfm.l2", cfg.hidden, cfg.hidden),
            ("cfm.out", cfg.hidden, cfg.frame_dim),
        ];
        for (name, i, o) in dims {
            normal(&format!("{name}.w"), [i, o], (1.0 / i as f64).sqrt())?;
        }
        for (name, _, o) in dims {
            params.insert(format!("{name}.b"), Tensor::zeros(&[o]))?;
        }
        Ok(Self { cfg, params })
    }

    /// Fresh model whose token embeddings start as the codebook centroids
    /// (leading columns); the remaining columns and the padding row stay random.
    pub fn from_codebook(cfg: CfmConfig, book: &Codebook) -> Result<Self> {
        if book.size() + 1 != cfg.speech_vocab || cfg.emb_dim < book.dim() {
            return arg_err("codebook does not fit the flow-matching embedding");
        }
        let mut m = Self::new(cfg)?;
        let mut emb = m.params.get("cfm.emb")?.clone();
        let w = m.cfg.emb_dim;
        for id in 0..book.size() {
            emb.data_mut()[id * w..id * w + book.dim()].copy_from_slice(book.centroid(id));
        }
        m.params.set("cfm.emb", emb)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(&self.params, std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(cfg: CfmConfig, path: &Path) -> Result<Self> {
        let params = read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let fresh = Self::new(cfg.clone())?;
        for name in fresh.params.names() {
            if !params.contains(name) || params.get(name)?.shape() != fresh.params.get(name)?.shape() {
                return Err(Error::Format(format!("flow-matching checkpoint parameter {name} missing or misshapen")));
            }
        }
        Ok(Self { cfg, params })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t + 1 >= self.cfg.speech_vocab) {
            Some(t) => Err(Error::Data(format!("token {t} cannot be decoded to a frame"))),
            None => Ok(()),
        }
    }
}

impl VectorField for CfmModel {
    fn frame_dim(&self) -> usize {
        self.cfg.frame_dim
    }

    fn velocity(&self, x: &Tensor<f32>, t: f32, tokens: &[usize], positions: &[usize]) -> Result<Tensor<f32>> {
        self.check_tokens(tokens)?;
        let cond: Vec<Vec<usize>> = positions.iter().map(|&p| condition_ids(&self.cfg, tokens, p)).collect();
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let y = field_graph(&self.cfg, &self.params, &mut g, xn, &vec![t as f64; positions.len()], &cond)?;
        Ok(g.value(y).clone())
    }
}

/// Euler integration for selected positions of `tokens`. Noise for position
/// `p` is drawn for absolute frame `offset + p`, so a window cut from a
/// longer sequence sees the same noise as the whole.
pub fn euler_frames(
    field: &impl VectorField,
    tokens: &[usize],
    positions: &[usize],
    offset: usize,
    steps: usize,
    seed: u64,
) -> Result<Tensor<f32>> {
    if steps == 0 {
        return arg_err("at least one Euler step is needed");
    }
    let f = field.frame_dim();
    let rows: Vec<Vec<f32>> = positions.iter().map(|&p| source_noise(seed, offset + p, f)).collect();
    let mut x = Tensor::new(vec![positions.len(), f], rows.concat())?;
    let dt = 1.0 / steps as f32;
    for i in 0..steps {
        let v = field.velocity(&x, i as f32 / steps as f32, tokens, positions)?;
        for (a, &b) in x.data_mut().iter_mut().zip(v.data()) {
            *a += dt * b;
        }
    }
    Ok(x)
}

/// Frames for every token before EOS.
pub fn euler_sample(field: &impl VectorField, tokens: &SpeechTokens, steps: usize, seed: u64) -> Result<SpeechFrames> {
    let body = tokens.body();
    let positions: Vec<usize> = (0..body.len()).collect();
    SpeechFrames::new(euler_frames(field, body, &positions, 0, steps, seed)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfmTrainSpec {
    pub steps: usize,
    /// Utterances per step; every frame of each is used.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CfmTrainSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfmReport {
    pub losses: Vec<f64>,
}

/// Token/frame pair the decoder learns from.
pub struct CfmExample<'a> {
    pub tokens: &'a SpeechTokens,
    pub frames: &'a SpeechFrames,
}

fn check_example(e: &CfmExample) -> Result<()> {
    if e.tokens.body().len() != e.frames.len() {
        return Err(Error::Data(format!(
            "{} tokens for {} frames",
            e.tokens.body().len(),
            e.frames.len()
        )));
    }
    Ok(())
}

struct Batch {
    xt: Tensor<f32>,
    v: Tensor<f32>,
    times: Vec<f64>,
    cond: Vec<Vec<usize>>,
}

fn draw_batch(cfg: &CfmConfig, examples: &[&CfmExample], rng: &mut ChaCha8Rng) -> Result<Batch> {
    let f = cfg.frame_dim;
    let (mut xt, mut v, mut times, mut cond) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for e in examples {
        let body = e.tokens.body();
        for p in 0..body.len() {
            let x1 = Tensor::vector(e.frames.frame(p).to_vec());
            let x0 = Tensor::vector((0..f).map(|_| StandardNormal.sample(rng)).collect());
            let t: f64 = rng.random();
            let (a, b) = cfm_target(&x0, &x1, t)?;
            xt.extend_from_slice(a.data());
            v.extend_from_slice(b.data());
            times.push(t);
            cond.push(condition_ids(cfg, body, p));
        }
    }
    let rows = times.len();
    Ok(Batch {
        xt: Tensor::new(vec![rows, f], xt)?,
        v: Tensor::new(vec![rows, f], v)?,
        times,
        cond,
    })
}

fn batch_loss(model: &CfmModel, b: &Batch) -> Result<(Graph<f32>, NodeId)> {
    let mut g = Graph::new();
    let x = g.constant(b.xt.clone());
    let target = g.constant(b.v.clone());
    let y = field_graph(&model.cfg, &model.params, &mut g, x, &b.times, &b.cond)?;
    let l = g.mse(y, target)?;
    Ok((g, l))
}

/// Minimizes the squared error between predicted and path velocities over
/// random noise and times.
pub fn cfm_train(model: &mut CfmModel, data: &[CfmExample], spec: &CfmTrainSpec) -> Result<CfmReport> {
    if data.is_empty() || spec.batch == 0 {
        return arg_err("flow-matching training needs data and a positive batch");
    }
    for e in data {
        check_example(e)?;
        model.check_tokens(e.tokens.body())?;
    }
    let adam = AdamConfig {
        lr: spec.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut losses = Vec::with_capacity(spec.steps);
    for _ in 0..spec.steps {
        let picked: Vec<&CfmExample> = (0..spec.batch).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let batch = draw_batch(&model.cfg, &picked, &mut rng)?;
        let (g, l) = batch_loss(model, &batch)?;
        losses.push(g.value(l).data()[0] as f64);
        let back = g.backward(l)?;
        model.params.adam_step(&back.params, &adam)?;
    }
    Ok(CfmReport { losses })
}

/// Mean flow-matching loss with noise and times fixed by `seed`.
pub fn cfm_eval_loss(model: &CfmModel, data: &[CfmExample], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for e in data {
        check_example(e)?;
        let batch = draw_batch(&model.cfg, &[e], &mut rng)?;
        let (g, l) = batch_loss(model, &batch)?;
        total += g.value(l).data()[0] as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Mean Euclidean distance between corresponding frames.
pub fn mean_frame_error(a: &SpeechFrames, b: &SpeechFrames) -> Result<f64> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return arg_err("frame sequences differ in shape");
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = (0..a.len())
        .map(|i| {
            a.frame(i)
                .iter()
                .zip(b.frame(i))
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// The same tokens in a seeded random order, for conditioning controls.
pub fn permute_tokens(tokens: &SpeechTokens, seed: u64) -> Result<SpeechTokens> {
    let mut body = tokens.body().to_vec();
    body.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    SpeechTokens::from_body(body, tokens.eos())
}
