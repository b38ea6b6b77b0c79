//! Finite-difference checks over every graph primitive and every model
//! sub-network, collected into one table instead of separate tests.

use duotts::flow_matching::{condition_ids, field_graph, CfmConfig, CfmModel};
use duotts::model::{
    generation_layout, init_params, text_layout, EncoderConfig, Layout, ModelConfig, Net, ProjectorConfig, Query,
};
use duotts::numerics::{
    check_gradients, check_param_gradients, GradCheck, GradInput, GradProbe, Graph, NodeId, ParamProbe, ParamStore,
    Scalar, Tensor,
};
use duotts::toy_world::{AlignmentPair, PairStrategy, SpeechFrames, TextVocab};
use duotts::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 5;

pub struct Row {
    pub label: &'static str,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_error: f64,
}

fn contract<S: Scalar>(g: &mut Graph<S>, out: NodeId, phase: f64) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| S::lit((i as f64 * 1.7 + phase).sin())).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(out, w)?;
    g.sum(p)
}

#[derive(Clone, Copy)]
enum Prim {
    MatMul,
    AddMul,
    Bias,
    Scale,
    LayerNorm,
    Gelu,
    Embedding,
    Conv1d,
    Attention,
    ConcatCols,
    Softmax,
    CrossEntropy,
    Mse,
    TransposeReshape,
}

const PRIMS: [(Prim, &str); 14] = [
    (Prim::MatMul, "matmul"),
    (Prim::AddMul, "add/mul"),
    (Prim::Bias, "add_bias"),
    (Prim::Scale, "scale"),
    (Prim::LayerNorm, "layer_norm"),
    (Prim::Gelu, "gelu"),
    (Prim::Embedding, "embedding"),
    (Prim::Conv1d, "conv1d stride 2"),
    (Prim::Attention, "causal attention"),
    (Prim::ConcatCols, "concat_cols"),
    (Prim::Softmax, "softmax"),
    (Prim::CrossEntropy, "cross_entropy"),
    (Prim::Mse, "mse"),
    (Prim::TransposeReshape, "transpose/reshape"),
];

struct PrimProbe {
    prim: Prim,
    phase: f64,
}

impl GradProbe for PrimProbe {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[NodeId]) -> Result<NodeId> {
        let out = match self.prim {
            Prim::MatMul => g.matmul(x[0], x[1])?,
            Prim::AddMul => {
                let s = g.add(x[0], x[1])?;
                g.mul(s, x[0])?
            }
            Prim::Bias => g.add_bias(x[0], x[1])?,
            Prim::Scale => g.scale(x[0], S::lit(-2.5))?,
            Prim::LayerNorm => g.layer_norm(x[0], x[1], x[2])?,
            Prim::Gelu => g.gelu(x[0])?,
            Prim::Embedding => g.embedding(x[0], &[2, 0, 2, 1])?,
            Prim::Conv1d => g.conv1d(x[0], x[1], x[2], 3, 2)?,
            Prim::Attention => g.attention(x[0], x[1], x[2], 2, true)?,
            Prim::ConcatCols => {
                let c = g.concat_cols(&[x[0], x[1]])?;
                g.gelu(c)?
            }
            Prim::Softmax => g.softmax(x[0], 1)?,
            Prim::CrossEntropy => return g.cross_entropy(x[0], &[1, 9, 3], 9),
            Prim::Mse => return g.mse(x[0], x[1]),
            Prim::TransposeReshape => {
                let t = g.transpose(x[0])?;
                g.reshape(t, vec![2, 6])?
            }
        };
        contract(g, out, self.phase)
    }
}

fn rand_wide(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn prim_inputs(prim: Prim, rng: &mut ChaCha8Rng) -> Vec<GradInput> {
    let shapes: &[&[usize]] = match prim {
        Prim::MatMul => &[&[3, 4], &[4, 5]],
        Prim::AddMul => &[&[3, 4], &[3, 4]],
        Prim::Bias => &[&[3, 4], &[4]],
        Prim::Scale | Prim::Gelu => &[&[4, 5]],
        Prim::LayerNorm => &[&[3, 6], &[6], &[6]],
        Prim::Embedding => &[&[3, 4]],
        Prim::Conv1d => &[&[7, 3], &[9, 4], &[4]],
        Prim::Attention => &[&[5, 4], &[5, 4], &[5, 4]],
        Prim::ConcatCols => &[&[3, 2], &[3, 3]],
        Prim::Softmax | Prim::CrossEntropy => &[&[3, 5]],
        Prim::Mse => &[&[4, 3], &[4, 3]],
        Prim::TransposeReshape => &[&[4, 3]],
    };
    let scale = if matches!(prim, Prim::Attention) { 2.0 } else { 1.0 };
    shapes.iter().map(|s| GradInput::new(rand_wide(rng, s, scale))).collect()
}

fn tiny_model(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        bottom_layers: 1,
        d_model: 8,
        heads: 2,
        ffn_mult: 2,
        context: 24,
        text_vocab: tiny_vocab().size(),
        speech_vocab: 6,
        group: 2,
        frame_dim: 3,
        frames_per_token: 2,
        lookahead: 2,
        single_branch: false,
        init_seed: seed,
        encoder: EncoderConfig {
            channels: 4,
            kernel: 3,
            stride: 2,
            layers: 1,
            heads: 2,
        },
        projector: ProjectorConfig {
            channels: 4,
            kernel: 3,
            stride: 2,
        },
    }
}

fn tiny_vocab() -> TextVocab {
    TextVocab::new(4, 2, 2)
}

fn rand_t(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

enum Part {
    Encoder(Tensor<f32>),
    Projector(Tensor<f32>),
    Block(Tensor<f32>),
    Mtp(Tensor<f32>, Vec<usize>),
    Loss(Layout),
}

struct PartProbe<'a> {
    cfg: &'a ModelConfig,
    part: &'a Part,
}

impl ParamProbe for PartProbe<'_> {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, params: &ParamStore<S>) -> Result<NodeId> {
        let net = Net::new(self.cfg, params);
        match self.part {
            Part::Encoder(f) => {
                let x = g.constant(f.cast());
                let y = net.encode(g, x)?;
                contract(g, y, 0.3)
            }
            Part::Projector(l) => {
                let x = g.constant(l.cast());
                let y = net.project(g, x)?;
                contract(g, y, 0.7)
            }
            Part::Block(x) => {
                let x = g.constant(x.cast());
                let y = net.block(g, "bottom.0", x, self.cfg.heads, true)?;
                contract(g, y, 1.1)
            }
            Part::Mtp(h, prev) => {
                let h = g.constant(h.cast());
                let mut acc = None;
                for i in 0..self.cfg.group {
                    let l = net.mtp_logits(g, i, h, prev)?;
                    let c = contract(g, l, i as f64)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, c)?,
                        None => c,
                    });
                }
                Ok(acc.expect("group is positive"))
            }
            Part::Loss(layout) => net.loss(g, layout),
        }
    }
}

/// Moves every parameter off its symmetric initial value.
fn jitter(store: &mut ParamStore<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        let mut t = store.get(&n).unwrap().clone();
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        store.set(&n, t).unwrap();
    }
}

fn generation_part(c: &ModelConfig, rng: &mut ChaCha8Rng) -> Part {
    let frames = rand_t(rng, 5, c.frame_dim);
    let response: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    let mut speech: Vec<usize> = (0..5).map(|_| rng.random_range(0..c.eos())).collect();
    speech.push(c.eos());
    Part::Loss(generation_layout(c, &tiny_vocab(), &Query::Speech(&frames), &response, &speech).unwrap())
}

fn text_part(c: &ModelConfig, rng: &mut ChaCha8Rng) -> Part {
    let v = tiny_vocab();
    let pair = AlignmentPair {
        id: 0,
        strategy: PairStrategy::TranscriptContinuation,
        prompt_frames: SpeechFrames::empty(c.frame_dim),
        descriptor_prefix: v.descriptor_prefix(1, 0),
        transcript: (0..3).map(|_| rng.random_range(0..4)).collect(),
        continuation_text: vec![1, 2],
        speaker: 0,
        dialect: 1,
        emotion: 0,
    };
    Part::Loss(text_layout(c, &v, &pair).unwrap())
}

type MakePart = fn(&ModelConfig, &mut ChaCha8Rng) -> Part;
type Trainable = fn(&str) -> bool;

const PARTS: [(&str, MakePart, Trainable); 8] = [
    ("encoder", |c, r| Part::Encoder(rand_t(r, 7, c.frame_dim)), |n| n.starts_with("enc.") && n != "enc.pos"),
    ("encoder positions", |c, r| Part::Encoder(rand_t(r, 6, c.frame_dim)), |n| n == "enc.pos"),
    ("projector", |c, r| Part::Projector(rand_t(r, 5, c.encoder.channels)), |n| n.starts_with("proj.")),
    ("transformer block", |c, r| Part::Block(rand_t(r, 5, c.d_model)), |n| n.starts_with("bottom.0.")),
    (
        "mtp heads",
        |c, r| Part::Mtp(rand_t(r, 3, c.d_model), vec![c.speech_bos(), 2, c.speech_pad()]),
        |n| n.starts_with("mtp.") || n.starts_with("speech.head") || n == "speech.emb",
    ),
    (
        "generation loss, speech side",
        generation_part,
        |n| n.starts_with("speech") || n.starts_with("mtp.") || n.starts_with("proj."),
    ),
    (
        "generation loss, shared side",
        generation_part,
        |n| n.starts_with("bottom.") || n.starts_with("enc.conv") || n == "text.tok_emb",
    ),
    ("text loss", text_part, |n| n.starts_with("text") || n.starts_with("bottom.")),
];

struct FieldProbe {
    cfg: CfmConfig,
    x: Tensor<f64>,
    target: Tensor<f64>,
    times: Vec<f64>,
    cond: Vec<Vec<usize>>,
}

impl ParamProbe for FieldProbe {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, params: &ParamStore<S>) -> Result<NodeId> {
        let x = g.constant(self.x.cast());
        let t = g.constant(self.target.cast());
        let y = field_graph(&self.cfg, params, g, x, &self.times, &self.cond)?;
        g.mse(y, t)
    }
}

fn field_check(seed: u64) -> GradCheck {
    let cfg = CfmConfig {
        frame_dim: 3,
        speech_vocab: 5,
        emb_dim: 2,
        hidden: 6,
        neighborhood: 1,
        init_seed: seed,
    };
    let model = CfmModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let tokens: Vec<usize> = (0..4).map(|_| rng.random_range(0..4)).collect();
    let probe = FieldProbe {
        x: rand_wide(&mut rng, &[4, 3], 2.0),
        target: rand_wide(&mut rng, &[4, 3], 2.0),
        times: (0..4).map(|_| rng.random_range(0.0..1.0)).collect(),
        cond: (0..4).map(|p| condition_ids(&cfg, &tokens, p)).collect(),
        cfg,
    };
    check_param_gradients(&probe, &model.params).unwrap()
}

pub fn suite() -> Vec<Row> {
    let mut rows = Vec::new();
    for (prim, label) in PRIMS {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + prim as u64);
            let inputs = prim_inputs(prim, &mut rng);
            let r = check_gradients(&PrimProbe { prim, phase: seed as f64 }, &inputs).unwrap();
            rows.push(Row { label, seed, checked: r.checked, max_rel_error: r.max_rel_error });
        }
    }
    for (label, make, trainable) in PARTS {
        for seed in 0..SEEDS {
            let cfg = tiny_model(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let part = make(&cfg, &mut rng);
            let mut params = init_params(&cfg).unwrap();
            jitter(&mut params, seed);
            params.freeze_where(|n| !trainable(n));
            let r = check_param_gradients(&PartProbe { cfg: &cfg, part: &part }, &params).unwrap();
            rows.push(Row { label, seed, checked: r.checked, max_rel_error: r.max_rel_error });
        }
    }
    for seed in 0..SEEDS {
        let r = field_check(seed);
        rows.push(Row {
            label: "flow-matching field",
            seed,
            checked: r.checked,
            max_rel_error: r.max_rel_error,
        });
    }
    rows
}
