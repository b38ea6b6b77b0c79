//! Finite-difference checks of every model sub-network, five seeds each.

use duotts::model::{generation_layout, init_params, text_layout, EncoderConfig, ModelConfig, Net, ProjectorConfig, Query};
use duotts::numerics::{check_param_gradients, Graph, NodeId, ParamProbe, ParamStore, Scalar, Tensor};
use duotts::toy_world::{AlignmentPair, PairStrategy, SpeechFrames, TextVocab};
use duotts::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        bottom_layers: 1,
        d_model: 8,
        heads: 2,
        ffn_mult: 2,
        context: 24,
        text_vocab: TextVocab::new(4, 2, 2).size(),
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

fn vocab() -> TextVocab {
    TextVocab::new(4, 2, 2)
}

fn rand_t(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Random nonzero perturbation so biases and norms are not at their
/// symmetric initial values.
fn jitter(store: &mut ParamStore<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        let mut t = store.get(&n).unwrap().clone();
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        store.set(&n, t).unwrap();
    }
}

fn contract<S: Scalar>(g: &mut Graph<S>, out: NodeId, phase: f64) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| S::lit((i as f64 * 1.3 + phase).sin())).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(out, w)?;
    g.sum(p)
}

enum Part {
    Encoder(Tensor<f32>),
    Projector(Tensor<f32>),
    Block(Tensor<f32>),
    Mtp(Tensor<f32>, Vec<usize>),
    Generation(duotts::model::Layout),
    Text(duotts::model::Layout),
}

struct Probe<'a> {
    cfg: &'a ModelConfig,
    part: &'a Part,
}

impl ParamProbe for Probe<'_> {
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
                Ok(acc.unwrap())
            }
            Part::Generation(layout) | Part::Text(layout) => net.loss(g, layout),
        }
    }
}

fn run(label: &str, make: impl Fn(&ModelConfig, &mut ChaCha8Rng) -> Part, trainable: impl Fn(&str) -> bool) {
    for seed in 0..5u64 {
        let cfg = tiny(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let part = make(&cfg, &mut rng);
        let mut params = init_params(&cfg).unwrap();
        jitter(&mut params, seed);
        params.freeze_where(|n| !trainable(n));
        let r = check_param_gradients(&Probe { cfg: &cfg, part: &part }, &params).unwrap();
        assert!(r.checked > 0, "{label}: nothing checked");
        assert!(r.max_rel_error < TOL, "{label} seed {seed}: {r:?}");
    }
}

#[test]
fn encoder_gradients() {
    run("encoder", |c, rng| Part::Encoder(rand_t(rng, 7, c.frame_dim)), |n| n.starts_with("enc.") && n != "enc.pos");
}

#[test]
fn encoder_positions_gradients() {
    run("encoder positions", |c, rng| Part::Encoder(rand_t(rng, 6, c.frame_dim)), |n| n == "enc.pos");
}

#[test]
fn projector_gradients() {
    run("projector", |c, rng| Part::Projector(rand_t(rng, 5, c.encoder.channels)), |n| n.starts_with("proj."));
}

#[test]
fn transformer_block_gradients() {
    run("block", |c, rng| Part::Block(rand_t(rng, 5, c.d_model)), |n| n.starts_with("bottom.0."));
}

#[test]
fn mtp_head_gradients() {
    run(
        "mtp",
        |c, rng| Part::Mtp(rand_t(rng, 3, c.d_model), vec![c.speech_bos(), 2, c.speech_pad()]),
        |n| n.starts_with("mtp.") || n.starts_with("speech.head") || n == "speech.emb",
    );
}

fn gen_layout(c: &ModelConfig, rng: &mut ChaCha8Rng) -> Part {
    let v = vocab();
    let frames = rand_t(rng, 5, c.frame_dim);
    let response: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    let mut speech: Vec<usize> = (0..5).map(|_| rng.random_range(0..c.eos())).collect();
    speech.push(c.eos());
    Part::Generation(generation_layout(c, &v, &Query::Speech(&frames), &response, &speech).unwrap())
}

#[test]
fn generation_loss_gradients_speech_side() {
    run("generation", gen_layout, |n| {
        n.starts_with("speech") || n.starts_with("mtp.") || n.starts_with("proj.")
    });
}

#[test]
fn generation_loss_gradients_shared_side() {
    run("generation shared", gen_layout, |n| {
        n.starts_with("bottom.") || n.starts_with("enc.conv") || n == "text.tok_emb"
    });
}

#[test]
fn text_loss_gradients() {
    run(
        "text",
        |c, rng| {
            let v = vocab();
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
            Part::Text(text_layout(c, &v, &pair).unwrap())
        },
        |n| n.starts_with("text") || n.starts_with("bottom."),
    );
}

