use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use duotts::flow_matching::{euler_sample, CfmModel};
use duotts::model::DualBranchModel;
use duotts::streaming::{
    chunked_vocode, concat_frames, open_session, synthesize_offline, LatencyReport, StreamEvent, VocodeSpec,
};
use duotts::toy_world::records::{read_frames, write_frames, write_jsonl};
use duotts::toy_world::{mix64, SpeechFrames, SpeechTokens};
use duotts::{Error, Result};

use crate::config::RunConfig;
use crate::run::*;
use crate::train::{load_decoder, load_model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    Streaming,
    Offline,
}

#[derive(Clone, Debug)]
pub struct SynthRequest {
    pub prompt: PathBuf,
    pub text: Vec<usize>,
    pub mode: SynthMode,
    pub out: PathBuf,
    /// Sampling and noise seed; the run seed when absent.
    pub seed: Option<u64>,
}

/// Generation counts written to `latency.json`. Wall-clock figures are
/// printed but not stored, so the file is reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub mode: SynthMode,
    pub tokens: usize,
    pub backbone_steps: usize,
    pub tokens_per_step: f64,
    /// Streaming only.
    pub latency: Option<LatencyReport>,
}

pub struct SynthOutput {
    pub tokens: SpeechTokens,
    pub frames: SpeechFrames,
    pub events: Vec<StreamEvent>,
    pub stats: SynthStats,
    /// Streaming only: wall time to the first event and token throughput.
    pub wall: Option<(f64, f64)>,
}

/// Parses response text given as phoneme ids separated by spaces or commas.
pub fn parse_text(s: &str, alphabet: usize) -> Result<Vec<usize>> {
    let ids: Vec<usize> = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|_| Error::Argument(format!("`{t}` is not a phoneme id"))))
        .collect::<Result<_>>()?;
    if ids.is_empty() {
        return Err(Error::Argument("response text is empty".into()));
    }
    if let Some(bad) = ids.iter().find(|&&t| t >= alphabet) {
        return Err(Error::Argument(format!("phoneme id {bad} is outside the alphabet of {alphabet}")));
    }
    Ok(ids)
}

/// Token file contents: ids separated by spaces, EOS included, one line.
pub fn tokens_line(tokens: &SpeechTokens) -> String {
    let ids: Vec<String> = tokens.ids().iter().map(|t| t.to_string()).collect();
    ids.join(" ") + "\n"
}

/// Streams `text` through a session in `text_chunk` pieces; returns the
/// tokens, events and latency report.
pub fn stream(
    cfg: &RunConfig,
    model: &DualBranchModel,
    prompt: &SpeechFrames,
    text: &[usize],
    seed: u64,
) -> Result<(SpeechTokens, Vec<StreamEvent>, LatencyReport)> {
    let vocab = cfg.world.vocab();
    let mut s = open_session(model, &vocab, prompt, cfg.synth.decode, seed)?;
    for chunk in text.chunks(cfg.synth.text_chunk) {
        s.push_text(chunk)?;
    }
    s.finalize()?;
    Ok((s.tokens()?, s.events().to_vec(), s.latency_report()?))
}

/// Frames for a finished stream, vocoded chunk by chunk.
pub fn vocode_stream(cfg: &RunConfig, decoder: &CfmModel, events: &[StreamEvent], seed: u64) -> Result<SpeechFrames> {
    let spec = VocodeSpec {
        chunk: cfg.synth.vocode_groups,
        overlap: cfg.synth.vocode_overlap,
        steps: cfg.decoder.euler_steps,
        seed,
    };
    let chunks = chunked_vocode(decoder, events, cfg.world.eos(), &spec)?;
    concat_frames(&chunks, cfg.world.frame_dim)
}

pub fn synth(cfg: &RunConfig, dir: &RunDir, req: &SynthRequest) -> Result<SynthOutput> {
    let model = load_model(cfg, dir, TrainStep::Generate2)?;
    let decoder = load_decoder(cfg, dir)?;
    let prompt = read_frames(&req.prompt).map_err(|e| match e {
        Error::Format(m) => Error::Data(format!("{}: {m}", req.prompt.display())),
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::Argument(format!("prompt file {} does not exist", req.prompt.display()))
        }
        other => at_path(&req.prompt)(other),
    })?;
    if prompt.dim() != cfg.world.frame_dim {
        return Err(Error::Data(format!(
            "{}: frames are {} wide, the model expects {}",
            req.prompt.display(),
            prompt.dim(),
            cfg.world.frame_dim
        )));
    }
    let seed = req.seed.unwrap_or(cfg.seed);
    let group = cfg.model.group;
    let out = match req.mode {
        SynthMode::Streaming => {
            let start = Instant::now();
            let (tokens, events, latency) = stream(cfg, &model, &prompt, &req.text, seed)?;
            let elapsed = start.elapsed().as_secs_f64();
            let frames = vocode_stream(cfg, &decoder, &events, mix64(seed, 1))?;
            let stats = SynthStats {
                mode: req.mode,
                tokens: tokens.len(),
                backbone_steps: latency.backbone_steps,
                tokens_per_step: latency.tokens_per_step,
                latency: Some(latency.clone()),
            };
            let tps = if elapsed > 0.0 { tokens.len() as f64 / elapsed } else { 0.0 };
            SynthOutput {
                tokens,
                frames,
                events,
                stats,
                wall: Some((latency.first_event_wall.as_secs_f64(), tps)),
            }
        }
        SynthMode::Offline => {
            let vocab = cfg.world.vocab();
            let tokens = synthesize_offline(&model, &vocab, &prompt, &req.text, cfg.synth.decode, seed, Default::default())?;
            let frames = euler_sample(&decoder, &tokens, cfg.decoder.euler_steps, mix64(seed, 1))?;
            let steps = tokens.len().div_ceil(group);
            // every group before the one holding EOS is full
            let full = tokens.ids().chunks(group).filter(|g| !g.contains(&cfg.world.eos())).count();
            SynthOutput {
                stats: SynthStats {
                    mode: req.mode,
                    tokens: tokens.len(),
                    backbone_steps: steps,
                    tokens_per_step: if full > 0 { group as f64 } else { 0.0 },
                    latency: None,
                },
                tokens,
                frames,
                events: Vec::new(),
                wall: None,
            }
        }
    };
    write_outputs(cfg, dir, req, &out)?;
    Ok(out)
}

fn write_outputs(cfg: &RunConfig, dir: &RunDir, req: &SynthRequest, out: &SynthOutput) -> Result<()> {
    let base: &Path = &req.out;
    let mut manifest = Manifest::new(format!("synth {:?}", req.mode).to_lowercase(), cfg);
    manifest.inputs.insert(
        format!("prompt:{}", req.prompt.file_name().unwrap_or_default().to_string_lossy()),
        sha256_file(&req.prompt)?,
    );
    manifest.inputs.insert(
        "text".into(),
        req.text.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "),
    );
    manifest.input(&dir.root, &dir.checkpoint(TrainStep::Generate2))?;
    manifest.input(&dir.root, &dir.checkpoint(TrainStep::Decoder))?;
    let tokens = base.join("tokens.txt");
    write_bytes(&tokens, tokens_line(&out.tokens).as_bytes())?;
    manifest.output(base, &tokens)?;
    let frames = base.join("frames.bin");
    write_frames(&frames, &out.frames).map_err(at_path(&frames))?;
    manifest.output(base, &frames)?;
    if req.mode == SynthMode::Streaming {
        let events = base.join("events.jsonl");
        write_jsonl(&events, &out.events).map_err(at_path(&events))?;
        manifest.output(base, &events)?;
    }
    let latency = base.join("latency.json");
    write_json(&latency, &out.stats)?;
    manifest.output(base, &latency)?;
    manifest.write(&base.join("manifest.json"))
}
