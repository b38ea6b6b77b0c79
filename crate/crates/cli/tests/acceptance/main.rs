//! Acceptance criteria 1 to 11. Each test prints one PASS/FAIL line with
//! the measured values; the lines are also collected in
//! `target/tmp/acceptance.txt`.
//!
//! Criteria 2, 3, 7, 8, 9, 10 and 11 read one run of the default pipeline
//! (seed 0), built once through the library. Criterion 11 repeats the run
//! through the `duotts` binary and compares the two run directories.

mod grad;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use duotts::flow_matching::{cfm_target, euler_sample, mean_frame_error, permute_tokens, source_noise, VectorField};
use duotts::model::{freeze_plan, DecodeMode, DualBranchModel, LengthControl};
use duotts::numerics::Tensor;
use duotts::streaming::{open_session, synthesize_offline, EventKind};
use duotts::toy_world::records::read_jsonl;
use duotts::toy_world::{
    codec_decode, codec_encode, oracle_transcribe, render_speech, Codebook, Quadruple, Renderer, SpeechTokens,
    ToyUtterance,
};
use duotts::training::{full_finetune_baseline, probe_logits, single_branch, text_perplexity, Stage};
use duotts_cli::config::RunConfig;
use duotts_cli::datagen::{load_codebook, SamplePrompt, PROMPTS};
use duotts_cli::forget::{text_layouts, PROBE_ITEMS};
use duotts_cli::pipeline::{pipeline, PipelineOutcome};
use duotts_cli::run::*;
use duotts_cli::train::{load_decoder, load_model, read_records, stage_spec, StepReport};

/// Criterion 7 bounds.
const TER_BOUND: f64 = 0.15;
const DIALECT_BOUND: f64 = 0.90;
/// Calibrated on seeds 0, 1 and 2 of the default pipeline; see
/// docs/CALIBRATION.md. TER: worst observed value + 20%. Dialect match:
/// worst observed mismatch + 20%.
const TER_CALIBRATED: f64 = 0.0684;
const DIALECT_CALIBRATED: f64 = 0.9710;

/// The criteria share one core; running them one at a time keeps the
/// timing figures honest.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes past the test harness's output capture so the line shows up in
/// every run, and appends it to the summary file.
fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n:>2} {name}: {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    let path = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance.txt");
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
        let _ = f.write_all(line.as_bytes());
    }
    assert!(pass, "criterion {n} {name} failed: {detail}");
}

fn note(s: &str) {
    let _ = std::io::stderr().write_all(format!("    {s}\n").as_bytes());
}

struct RunA {
    _tmp: TempDir,
    dir: RunDir,
    cfg: RunConfig,
    out: PipelineOutcome,
    seconds: f64,
}

fn run_a() -> &'static RunA {
    static R: OnceLock<RunA> = OnceLock::new();
    R.get_or_init(|| {
        let tmp = TempDir::new().unwrap();
        let dir = RunDir::new(tmp.path());
        let cfg = RunConfig::default();
        let start = Instant::now();
        let out = pipeline(&cfg, &dir, |name, s| note(&format!("run A {name:<12} {s:>7.1}s"))).unwrap();
        RunA {
            _tmp: tmp,
            dir,
            cfg,
            out,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn duotts(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_duotts")).args(args).output().unwrap();
    assert!(out.status.success(), "duotts {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn c01_gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let rows = grad::suite();
    let secs = start.elapsed().as_secs_f64();
    let worst = rows
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| !(r.max_rel_error < 1e-3) || r.checked == 0)
        .map(|r| format!("{} seed {} ({:.2e})", r.label, r.seed, r.max_rel_error))
        .collect();
    let labels: BTreeSet<&str> = rows.iter().map(|r| r.label).collect();
    let pass = bad.is_empty() && secs < 120.0 && rows.len() == labels.len() * grad::SEEDS as usize;
    verdict(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} checks over {} primitives/sub-networks x {} seeds, worst rel err {:.2e} ({} seed {}), {:.1}s < 120s{}",
            rows.len(),
            labels.len(),
            grad::SEEDS,
            worst.max_rel_error,
            worst.label,
            worst.seed,
            secs,
            if bad.is_empty() { String::new() } else { format!(", over tolerance: {bad:?}") }
        ),
    );
}

/// Parameter groups each step may change.
fn trainable(stage: Stage, step: u8, name: &str) -> bool {
    let prefix = name.split('.').next().unwrap();
    match (stage, step) {
        (Stage::Align, 1) => prefix == "proj",
        (Stage::Align, _) => matches!(prefix, "proj" | "enc"),
        (Stage::Generate, _) => matches!(prefix, "speech_top" | "speech" | "mtp"),
        _ => unreachable!(),
    }
}

#[test]
fn c02_freeze_conformance() {
    let _g = serial();
    let a = run_a();
    let mut ok = true;
    let mut detail = Vec::new();
    for step in [TrainStep::Align1, TrainStep::Align2, TrainStep::Generate1, TrainStep::Generate2] {
        let rep: StepReport = read_json(&a.dir.report(&format!("{}.json", step.name()))).unwrap();
        let (stage, n) = (rep.spec.stage, rep.spec.step);
        let before = load_model(&a.cfg, &a.dir, step.requires().unwrap()).unwrap().params.checksums();
        let after = load_model(&a.cfg, &a.dir, step).unwrap().params.checksums();
        let moved: Vec<&String> = after.keys().filter(|k| before[*k] != after[*k]).collect();
        // generation step 1 starts by copying the text top into the speech branch
        let fork = |name: &str| step == TrainStep::Generate1 && (name.starts_with("speech_top.") || name.starts_with("speech.ln_f"));
        let stray: Vec<&&String> = moved.iter().filter(|k| !trainable(stage, n, k) && !fork(k)).collect();
        let reported_stray: Vec<&String> = rep.report.changed.iter().filter(|k| !trainable(stage, n, k)).collect();
        let step_ok = rep.report.freeze_honored() && stray.is_empty() && reported_stray.is_empty() && !moved.is_empty();
        ok &= step_ok;
        detail.push(format!(
            "{}: {} of {} tensors moved, {} outside the unfrozen set",
            step.name(),
            moved.len(),
            after.len(),
            stray.len() + reported_stray.len()
        ));
    }
    verdict(2, "freeze conformance", ok, &detail.join("; "));
}

#[test]
fn c03_text_logits_unchanged_by_stage_two() {
    let _g = serial();
    let a = run_a();
    let layouts = text_layouts(&a.cfg, &a.dir).unwrap();
    let probe = &layouts[..PROBE_ITEMS];
    let before = probe_logits(&load_model(&a.cfg, &a.dir, TrainStep::Align2).unwrap(), probe).unwrap();
    let after = probe_logits(&load_model(&a.cfg, &a.dir, TrainStep::Generate2).unwrap(), probe).unwrap();
    let values: usize = before.iter().map(|t| t.len()).sum();
    let differing: usize = before
        .iter()
        .zip(&after)
        .map(|(x, y)| x.data().iter().zip(y.data()).filter(|(p, q)| p.to_bits() != q.to_bits()).count())
        .sum();
    verdict(
        3,
        "text-branch logits bitwise identical across Stage II",
        probe.len() == 32 && differing == 0 && before.len() == after.len(),
        &format!("{} probe items, {values} logits, {differing} differ", probe.len()),
    );
}

#[test]
fn c04_freeze_plan() {
    let _g = serial();
    let mut bad = Vec::new();
    for m in 2..=16 {
        let (n, k) = freeze_plan(m).unwrap();
        if (n, k) != (m / 2, m - m / 2) {
            bad.push(format!("M={m} gave ({n}, {k})"));
        }
    }
    verdict(4, "freeze plan N = floor(M/2), K = M - N", bad.is_empty(), &format!("M in 2..=16, mismatches {bad:?}"));
}

fn random_text(rng: &mut ChaCha8Rng, alphabet: usize) -> Vec<usize> {
    let n = rng.random_range(1..=12);
    (0..n).map(|_| rng.random_range(0..alphabet)).collect()
}

fn random_chunks(rng: &mut ChaCha8Rng, text: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let n = rng.random_range(0..=4).min(text.len() - i);
        out.push(text[i..i + n].to_vec());
        i += n;
    }
    out
}

fn held_quads(a: &RunA) -> Vec<Quadruple> {
    let mut q: Vec<Quadruple> = read_records(&a.dir, QUADS_HELD).unwrap();
    q.sort_by_key(|q| q.id);
    q
}

#[test]
fn c05_streaming_equals_offline() {
    let _g = serial();
    let a = run_a();
    let model = load_model(&a.cfg, &a.dir, TrainStep::Generate2).unwrap();
    let vocab = a.cfg.world.vocab();
    let quads = held_quads(a);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut equal, mut tokens, mut pushes) = (0, 0, 0);
    for _ in 0..100 {
        let prompt = &quads[rng.random_range(0..quads.len())].speech_query;
        let text = random_text(&mut rng, a.cfg.world.alphabet);
        let chunks = random_chunks(&mut rng, &text);
        let mut s = open_session(&model, &vocab, prompt, DecodeMode::Greedy, 0).unwrap();
        let mut streamed = Vec::new();
        for c in &chunks {
            streamed.extend(s.push_text(c).unwrap().into_iter().flat_map(|e| e.tokens));
        }
        streamed.extend(s.finalize().unwrap().into_iter().flat_map(|e| e.tokens));
        let offline = synthesize_offline(&model, &vocab, prompt, &text, DecodeMode::Greedy, 0, LengthControl::default()).unwrap();
        if streamed == offline.ids() {
            equal += 1;
        }
        tokens += offline.len();
        pushes += chunks.len();
    }
    verdict(
        5,
        "streaming/offline equivalence",
        equal == 100,
        &format!("{equal}/100 random (prompt, text, chunking) triples identical, {tokens} tokens, {pushes} pushes"),
    );
}

#[test]
fn c06_mtp_arithmetic() {
    let _g = serial();
    let a = run_a();
    let model = load_model(&a.cfg, &a.dir, TrainStep::Generate2).unwrap();
    let g = model.cfg.group;
    let vocab = a.cfg.world.vocab();
    let quads = held_quads(a);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut matched = 0;
    for _ in 0..100 {
        let prompt = &quads[rng.random_range(0..quads.len())].speech_query;
        let text = random_text(&mut rng, a.cfg.world.alphabet);
        let mut s = open_session(&model, &vocab, prompt, DecodeMode::Greedy, 0).unwrap();
        s.push_text(&text).unwrap();
        s.finalize().unwrap();
        let groups = s.events().iter().filter(|e| e.kind == EventKind::TokenGroup).count();
        let l = s.emitted().len();
        if s.steps() == l.div_ceil(g) && groups == l.div_ceil(g) {
            matched += 1;
        }
    }
    let mut one = model.cfg.clone();
    one.group = 1;
    let single = DualBranchModel::new(one).unwrap();
    let prompt = &quads[0].speech_query;
    let text = &quads[0].text_response;
    let mut ratios = Vec::new();
    for len in (4..=64).step_by(4) {
        let steps = |m: &DualBranchModel| {
            let ctl = LengthControl { exact_len: Some(len) };
            let mut s = open_session(m, &vocab, prompt, DecodeMode::Greedy, 0).unwrap().with_length_control(ctl);
            s.push_text(text).unwrap();
            s.finalize().unwrap();
            assert_eq!(s.emitted().len(), len);
            s.steps()
        };
        ratios.push((steps(&model), steps(&single)));
    }
    let quarter = ratios.iter().all(|&(s4, s1)| s4 * 4 == s1);
    verdict(
        6,
        "MTP arithmetic",
        g == 4 && matched == 100 && quarter,
        &format!(
            "{matched}/100 generations with extensions = ceil(L/{g}); G=4 vs G=1 steps at L=4..64: {:?} (ratio 1/4: {quarter})",
            ratios
        ),
    );
}

#[test]
fn c07_end_to_end_fidelity() {
    let _g = serial();
    let a = run_a();
    let e = &a.out.eval.frames;
    let ter_limit = TER_BOUND.min(TER_CALIBRATED);
    let dialect_limit = DIALECT_BOUND.max(DIALECT_CALIBRATED);
    let pass = e.corpus_ter < ter_limit && e.dialect_match_rate > dialect_limit;
    for (name, s) in &a.out.timings {
        note(&format!("{name:<12} {s:>7.1}s"));
    }
    verdict(
        7,
        "end-to-end fidelity",
        pass,
        &format!(
            "held-out TER {:.4} < {ter_limit:.4}, dialect match {:.4} > {dialect_limit:.4} ({} scored, {} flagged, codec TER {:.4}); pipeline wall time {:.1} min (target < 30)",
            e.corpus_ter,
            e.dialect_match_rate,
            e.scored,
            e.flagged,
            a.out.eval.codec.corpus_ter,
            a.seconds / 60.0
        ),
    );
}

/// Velocity that ignores state and time.
struct Constant {
    v: Vec<f32>,
}

impl VectorField for Constant {
    fn frame_dim(&self) -> usize {
        self.v.len()
    }

    fn velocity(&self, _x: &Tensor<f32>, _t: f32, _tokens: &[usize], positions: &[usize]) -> duotts::Result<Tensor<f32>> {
        let data = positions.iter().flat_map(|_| self.v.iter().copied()).collect();
        Tensor::new(vec![positions.len(), self.v.len()], data)
    }
}

#[test]
fn c08_flow_matching() {
    let _g = serial();
    let a = run_a();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f = a.cfg.world.frame_dim;

    let mut endpoints = 0;
    for _ in 0..100 {
        let rows = rng.random_range(1..12);
        let mut t = || Tensor::new(vec![rows, f], (0..rows * f).map(|_| rng.random_range(-3.0f32..3.0)).collect()).unwrap();
        let (x0, x1) = (t(), t());
        let (at0, _) = cfm_target(&x0, &x1, 0.0).unwrap();
        let (at1, v) = cfm_target(&x0, &x1, 1.0).unwrap();
        let diff: Vec<f32> = x0.data().iter().zip(x1.data()).map(|(p, q)| q - p).collect();
        if at0.bit_eq(&x0) && at1.bit_eq(&x1) && v.data() == &diff[..] {
            endpoints += 1;
        }
    }

    let mut euler_err = 0f64;
    for steps in [1, 2, 5, 16, 100] {
        let field = Constant { v: (0..f).map(|_| rng.random_range(-2.0f32..2.0)).collect() };
        let n = rng.random_range(1..20);
        let tokens = SpeechTokens::from_body(vec![0; n], a.cfg.world.eos()).unwrap();
        let seed = rng.random();
        let out = euler_sample(&field, &tokens, steps, seed).unwrap();
        for p in 0..n {
            let x0 = source_noise(seed, p, f);
            for ((o, s), v) in out.frame(p).iter().zip(&x0).zip(&field.v) {
                euler_err = euler_err.max((o - (s + v)).abs() as f64);
            }
        }
    }

    let decoder = load_decoder(&a.cfg, &a.dir).unwrap();
    let book = load_codebook(&a.dir).unwrap();
    let (mut true_err, mut perm_err, mut n) = (0.0, 0.0, 0);
    for (i, q) in held_quads(a).iter().take(100).enumerate() {
        let tokens = codec_encode(&book, &q.speech_query).unwrap();
        let shuffled = permute_tokens(&tokens, i as u64).unwrap();
        let steps = a.cfg.decoder.euler_steps;
        true_err += mean_frame_error(&euler_sample(&decoder, &tokens, steps, i as u64).unwrap(), &q.speech_query).unwrap();
        perm_err += mean_frame_error(&euler_sample(&decoder, &shuffled, steps, i as u64).unwrap(), &q.speech_query).unwrap();
        n += 1;
    }
    let (true_err, perm_err) = (true_err / n as f64, perm_err / n as f64);
    verdict(
        8,
        "flow matching",
        endpoints == 100 && euler_err <= 1e-5 && true_err < perm_err,
        &format!(
            "endpoint identities exact {endpoints}/100; constant-field Euler max error {euler_err:.2e} <= 1e-5; held-out sampling error {true_err:.4} (true tokens) < {perm_err:.4} (permuted) over {n} utterances"
        ),
    );
}

#[test]
fn c09_codec_and_oracle_integrity() {
    let _g = serial();
    let a = run_a();
    let book = Codebook::shipped().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut round_trips = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=48);
        let body: Vec<usize> = (0..n).map(|_| rng.random_range(0..book.size())).collect();
        let t = SpeechTokens::from_body(body, book.eos()).unwrap();
        let again = codec_encode(book, &codec_decode(book, &t).unwrap()).unwrap();
        if again == t {
            round_trips += 1;
        }
    }
    let renderer = Renderer::new(&a.cfg.world).unwrap();
    let corpus: Vec<ToyUtterance> = read_records(&a.dir, CORPUS).unwrap();
    let exact = corpus
        .iter()
        .filter(|u| {
            let t = oracle_transcribe(&renderer, &render_speech(&renderer, u).unwrap());
            t.text() == u.text && t.failures() == 0 && t.dialect == Some(u.dialect) && t.emotion == Some(u.emotion)
        })
        .count();
    let margin = book.margin(&renderer, &corpus).unwrap();
    verdict(
        9,
        "codec/oracle integrity",
        round_trips == 10_000 && exact == corpus.len() && margin.holds(),
        &format!(
            "codec round trip {round_trips}/10000 random sequences; oracle(render(u)) = u on {exact}/{} utterances; margin holds: {}",
            corpus.len(),
            margin.holds()
        ),
    );
}

#[test]
fn c10_forgetting() {
    let _g = serial();
    let a = run_a();
    let f = &a.out.forgetting;
    let pre = f.arm("pre-stage-ii").unwrap();
    let dual = f.arm("dual-branch").unwrap();
    let dual_dev = (dual.text_perplexity - pre.text_perplexity).abs();
    let dual_exact = dual.text_perplexity.to_bits() == pre.text_perplexity.to_bits();

    let text = text_layouts(&a.cfg, &a.dir).unwrap();
    let aligned = load_model(&a.cfg, &a.dir, TrainStep::Align2).unwrap();
    let quads: Vec<Quadruple> = read_records(&a.dir, QUADS_TRAIN).unwrap();
    let vocab = a.cfg.world.vocab();
    let mut increases = Vec::new();
    for seed in 0..3u64 {
        let mut cfg = a.cfg.clone();
        cfg.seed = seed;
        let mut m = single_branch(&aligned);
        full_finetune_baseline(&mut m, &vocab, &quads, &stage_spec(&cfg, TrainStep::Baseline)).unwrap();
        increases.push(text_perplexity(&m, &text).unwrap() - pre.text_perplexity);
    }
    // seed 0 is the run's own full-finetune arm
    let consistent = increases[0] == f.arm("full-finetune").unwrap().perplexity_change;
    let pass = dual_exact && dual_dev == 0.0 && consistent && increases.iter().all(|d| dual_dev < d.abs());
    let mean = increases.iter().sum::<f64>() / 3.0;
    verdict(
        10,
        "forgetting demonstration",
        pass,
        &format!(
            "pre-Stage-II perplexity {:.4}; dual-branch deviation {dual_dev} (bitwise equal: {dual_exact}); full-finetune increase per seed {:?} (mean {mean:+.4})",
            pre.text_perplexity,
            increases.iter().map(|d| format!("{d:+.4}")).collect::<Vec<_>>()
        ),
    );
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn synth_sample(dir: &Path, out: &Path) {
    let prompts: Vec<SamplePrompt> = read_jsonl(&dir.join(PROMPTS)).unwrap();
    let text: Vec<String> = prompts[0].text_response.iter().map(|t| t.to_string()).collect();
    let prompt = dir.join(&prompts[0].file);
    duotts(&[
        "--dir",
        dir.to_str().unwrap(),
        "--seed",
        "0",
        "synth",
        "--prompt",
        prompt.to_str().unwrap(),
        "--text",
        &text.join(" "),
        "--out",
        out.to_str().unwrap(),
    ]);
}

#[test]
fn c11_reproducibility() {
    let _g = serial();
    let a = run_a();
    let tmp = TempDir::new().unwrap();
    let b = tmp.path().join("run");
    let start = Instant::now();
    duotts(&["--dir", b.to_str().unwrap(), "--seed", "0", "pipeline"]);
    note(&format!("run B through the binary took {:.1} min", start.elapsed().as_secs_f64() / 60.0));
    synth_sample(&a.dir.root, &tmp.path().join("synth-a"));
    synth_sample(&b, &tmp.path().join("synth-b"));

    let mut compared = 0;
    let mut differing = Vec::new();
    let pairs = [(a.dir.root.clone(), b.clone()), (tmp.path().join("synth-a"), tmp.path().join("synth-b"))];
    for (x, y) in &pairs {
        let (fx, fy) = (files(x), files(y));
        if fx != fy {
            differing.push(format!("file lists differ under {}", x.display()));
        }
        for rel in fx.iter().filter(|r| fy.contains(r)) {
            compared += 1;
            if std::fs::read(x.join(rel)).unwrap() != std::fs::read(y.join(rel)).unwrap() {
                differing.push(rel.display().to_string());
            }
        }
    }
    let kinds = |dir: &str| files(&a.dir.root).iter().filter(|p| p.starts_with(dir)).count();
    verdict(
        11,
        "reproducibility",
        differing.is_empty() && compared > 0,
        &format!(
            "{compared} files byte-compared ({} checkpoints, {} reports, {} manifests, {} data files, synth tokens/frames/events); differing: {differing:?}",
            kinds("checkpoints"),
            kinds("reports"),
            kinds("manifests"),
            kinds("data")
        ),
    );
}
