use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::model::layers::{bottom_name, text_top_name};
use crate::model::ModelConfig;
use crate::numerics::{ParamStore, Tensor};

/// Standard deviation of freshly initialized output heads and MTP sub-heads.
pub const HEAD_INIT_STD: f64 = 0.02;
const TOKEN_EMB_STD: f64 = 0.5;
const POS_SCALE: f32 = 0.3;

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore<f32>,
}

impl Init {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f32) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, v))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Result<()> {
        self.normal(&format!("{name}.w"), &[fan_in, fan_out], std)?;
        self.fill(&format!("{name}.b"), &[fan_out], 0.0)
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<()> {
        self.fill(&format!("{name}.g"), &[d], 1.0)?;
        self.fill(&format!("{name}.b"), &[d], 0.0)
    }

    fn conv(&mut self, name: &str, kernel: usize, c_in: usize, c_out: usize) -> Result<()> {
        self.linear(name, kernel * c_in, c_out, (1.0 / (kernel * c_in) as f64).sqrt())
    }

    fn block(&mut self, name: &str, d: usize, d_ff: usize, depth: usize) -> Result<()> {
        let std = (1.0 / d as f64).sqrt();
        let out_std = std / (2.0 * depth as f64).sqrt();
        self.norm(&format!("{name}.ln1"), d)?;
        for p in ["q", "k", "v"] {
            self.linear(&format!("{name}.attn.{p}"), d, d, std)?;
        }
        self.linear(&format!("{name}.attn.o"), d, d, out_std)?;
        self.norm(&format!("{name}.ln2"), d)?;
        self.linear(&format!("{name}.ffn.up"), d, d_ff, std)?;
        self.linear(&format!("{name}.ffn.down"), d_ff, d, (1.0 / d_ff as f64).sqrt() / (2.0 * depth as f64).sqrt())
    }

    fn sinusoid(&mut self, name: &str, rows: usize, d: usize, scale: f32) -> Result<()> {
        self.store.insert(name, sinusoid_table(rows, d, scale))
    }
}

/// Fixed sinusoidal table, used as the starting value of learned positions.
pub fn sinusoid_table(rows: usize, d: usize, scale: f32) -> Tensor<f32> {
    let mut data = Vec::with_capacity(rows * d);
    for pos in 0..rows {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            let v = if i % 2 == 0 { a.sin() } else { a.cos() };
            data.push(v as f32 * scale);
        }
    }
    Tensor::new(vec![rows, d], data).expect("sized")
}

/// Fresh parameters for `cfg`, drawn from a generator seeded with
/// `cfg.init_seed`. The speech branch starts as a copy of the text branch.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut it = Init {
        rng: ChaCha8Rng::seed_from_u64(cfg.init_seed),
        store: ParamStore::new(),
    };
    let (d, e) = (cfg.d_model, &cfg.encoder);
    it.conv("enc.conv1", e.kernel, cfg.frame_dim, e.channels)?;
    it.conv("enc.conv2", e.kernel, e.channels, e.channels)?;
    it.sinusoid("enc.pos", cfg.context, e.channels, POS_SCALE)?;
    for i in 0..e.layers {
        it.block(&format!("enc.layer.{i}"), e.channels, e.channels * cfg.ffn_mult, e.layers)?;
    }
    it.norm("enc.ln_f", e.channels)?;

    let p = &cfg.projector;
    it.conv("proj.conv1", p.kernel, e.channels, p.channels)?;
    it.conv("proj.conv2", p.kernel, p.channels, p.channels)?;
    it.conv("proj.conv3", p.kernel, p.channels, p.channels)?;
    it.linear("proj.linear", p.channels, d, (1.0 / p.channels as f64).sqrt())?;

    it.normal("text.tok_emb", &[cfg.text_vocab, d], TOKEN_EMB_STD)?;
    it.sinusoid("text.pos_emb", cfg.context, d, POS_SCALE)?;
    for i in 0..cfg.bottom_layers {
        it.block(&bottom_name(i), d, cfg.d_ff(), cfg.layers)?;
    }
    for i in 0..cfg.top_layers() {
        it.block(&text_top_name(i), d, cfg.d_ff(), cfg.layers)?;
    }
    it.norm("text.ln_f", d)?;
    it.linear("text.head", d, cfg.text_vocab, HEAD_INIT_STD)?;

    it.norm("speech.ln_f", d)?;
    it.linear("speech.head", d, cfg.speech_vocab, HEAD_INIT_STD)?;
    it.normal("speech.emb", &[cfg.speech_vocab + 2, d], TOKEN_EMB_STD)?;
    it.linear("speech.group_proj", cfg.group * d, d, (1.0 / (cfg.group * d) as f64).sqrt())?;
    it.sinusoid("speech.resp_pos", cfg.context, d, POS_SCALE)?;
    it.store.insert("speech.group_pos", group_pos_table(cfg))?;
    for i in 0..cfg.group {
        it.linear(&format!("mtp.{i}"), 2 * d, d, HEAD_INIT_STD)?;
    }
    let mut store = it.store;
    if !cfg.single_branch {
        fork_speech_branch(cfg, &mut store)?;
    }
    Ok(store)
}

/// Group `k` starts speaking response token `k·⌈G/R_f⌉`; its position row
/// starts out equal to that token's response position.
fn group_pos_table(cfg: &ModelConfig) -> Tensor<f32> {
    let full = sinusoid_table(cfg.context * cfg.text_per_group(), cfg.d_model, POS_SCALE);
    let idx: Vec<usize> = (0..cfg.context).map(|k| k * cfg.text_per_group()).collect();
    full.select_rows(&idx)
}

/// Overwrites the speech top layers and final norm with copies of the text
/// branch, so both branches compute identical hidden states.
pub fn fork_speech_branch(cfg: &ModelConfig, store: &mut ParamStore<f32>) -> Result<()> {
    if cfg.single_branch {
        return crate::error::arg_err("single-branch models have no speech copy to fork");
    }
    let names: Vec<String> = store.names().filter(|n| n.starts_with("text_top.")).map(String::from).collect();
    for name in names {
        let copy = store.get(&name)?.clone();
        let target = name.replacen("text_top.", "speech_top.", 1);
        if store.contains(&target) {
            store.set(&target, copy)?;
        } else {
            store.insert(target, copy)?;
        }
    }
    for part in ["g", "b"] {
        let copy = store.get(&format!("text.ln_f.{part}"))?.clone();
        store.set(&format!("speech.ln_f.{part}"), copy)?;
    }
    store.reset_optimizer();
    Ok(())
}
