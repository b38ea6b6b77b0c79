use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::model::{
    mtp_step, query_slots, DecodeMode, DualBranchModel, Engine, Interleaver, LengthControl, Query, Sampler, Slot,
};
use crate::numerics::Tensor;
use crate::toy_world::{SpeechFrames, SpeechTokens, TextVocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionStatus {
    Open,
    Finalizing,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    TokenGroup,
    EndOfSpeech,
}

/// One unit of streamed output. `steps` counts group predictions (backbone
/// extensions) so far. The wall-clock offset is neither serialized nor
/// compared, so event logs stay reproducible.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StreamEvent {
    pub kind: EventKind,
    pub tokens: Vec<usize>,
    pub steps: usize,
    /// Set on the end event when the length guard stopped generation.
    #[serde(default)]
    pub truncated: bool,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl PartialEq for StreamEvent {
    fn eq(&self, o: &Self) -> bool {
        self.kind == o.kind && self.tokens == o.tokens && self.steps == o.steps && self.truncated == o.truncated
    }
}

/// Streaming synthesis state for one prompt. There is no way to hand the
/// session a transcript of the prompt: it only ever sees projected frames.
pub struct Session<'m> {
    model: &'m DualBranchModel,
    engine: Engine<'m>,
    prompt: Tensor<f32>,
    interleaver: Interleaver,
    sampler: Sampler,
    length: LengthControl,
    text: Vec<usize>,
    top: Vec<f32>,
    group: usize,
    emitted: Vec<usize>,
    steps: usize,
    status: SessionStatus,
    finalized: bool,
    started: Instant,
    log: Vec<StreamEvent>,
    pushed_at_first: Option<usize>,
}

/// Encodes and projects the prompt once, then runs `[BOS] prompt [SEP]`.
pub fn open_session<'m>(
    model: &'m DualBranchModel,
    vocab: &TextVocab,
    prompt: &SpeechFrames,
    decode: DecodeMode,
    seed: u64,
) -> Result<Session<'m>> {
    if prompt.is_empty() {
        return arg_err("prompt has no frames");
    }
    if prompt.frames.cols() != model.cfg.frame_dim {
        return arg_err("prompt frame width differs from the model");
    }
    let started = Instant::now();
    let projected = model.embed_prompt(&prompt.frames)?;
    let (slots, _, rows) = query_slots(&model.cfg, vocab, &Query::Speech(&prompt.frames))?;
    if rows != projected.rows() {
        return arg_err("projector output disagrees with the stride arithmetic");
    }
    let mut engine = Engine::new(model);
    let mut top = Vec::new();
    for s in &slots {
        top = engine.push_slot(s, Some(&projected), true)?;
    }
    Ok(Session {
        model,
        engine,
        prompt: projected,
        interleaver: Interleaver::new(&model.cfg, vocab),
        sampler: Sampler::new(decode, seed),
        length: LengthControl::default(),
        text: Vec::new(),
        top,
        group: 0,
        emitted: Vec::new(),
        steps: 0,
        status: SessionStatus::Open,
        finalized: false,
        started,
        log: Vec::new(),
        pushed_at_first: None,
    })
}

impl<'m> Session<'m> {
    /// Replaces the EOS policy (used to match output lengths across configs).
    pub fn with_length_control(mut self, length: LengthControl) -> Self {
        self.length = length;
        self
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    /// Projected prompt rows held by the session.
    pub fn prompt_rows(&self) -> usize {
        self.prompt.rows()
    }

    /// Tokens emitted so far, EOS included once reached.
    pub fn emitted(&self) -> &[usize] {
        &self.emitted
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Every event returned so far.
    pub fn events(&self) -> &[StreamEvent] {
        &self.log
    }

    /// Appends response text and emits every group it unlocks. Text that
    /// arrives after speech already ended is accepted and ignored.
    pub fn push_text(&mut self, chunk: &[usize]) -> Result<Vec<StreamEvent>> {
        if self.finalized {
            return Err(Error::State("text pushed after finalize".into()));
        }
        let vocab_size = self.model.cfg.text_vocab;
        if let Some(&bad) = chunk.iter().find(|&&t| t >= vocab_size) {
            return arg_err(format!("text token {bad} outside the vocabulary"));
        }
        if chunk.is_empty() {
            return Ok(Vec::new());
        }
        self.text.extend_from_slice(chunk);
        self.pump(false)
    }

    /// Marks the text complete and generates until EOS or the length guard.
    pub fn finalize(&mut self) -> Result<Vec<StreamEvent>> {
        if self.finalized {
            return Err(Error::State("session already finalized".into()));
        }
        self.finalized = true;
        if self.status == SessionStatus::Done {
            return Ok(Vec::new());
        }
        self.status = SessionStatus::Finalizing;
        self.pump(true)
    }

    fn event(&mut self, kind: EventKind, tokens: Vec<usize>, truncated: bool) -> StreamEvent {
        if self.pushed_at_first.is_none() {
            self.pushed_at_first = Some(self.text.len());
        }
        let e = StreamEvent {
            kind,
            tokens,
            steps: self.steps,
            truncated,
            elapsed: self.started.elapsed(),
        };
        self.log.push(e.clone());
        e
    }

    fn pump(&mut self, finished: bool) -> Result<Vec<StreamEvent>> {
        let cfg = &self.model.cfg;
        let eos = cfg.eos();
        let guard = cfg.max_speech_tokens(self.text.len());
        let mut out = Vec::new();
        while self.status != SessionStatus::Done && self.interleaver.ready(self.group, self.text.len(), finished) {
            if finished && self.emitted.len() >= guard {
                out.push(self.event(EventKind::EndOfSpeech, Vec::new(), true));
                self.status = SessionStatus::Done;
                break;
            }
            for s in self.interleaver.slots_before(self.group, &self.text, finished) {
                self.top = self.engine.push_slot(&s, Some(&self.prompt), true)?;
            }
            let g = mtp_step(self.model, &self.top, &mut self.sampler, self.emitted.len(), self.length);
            self.steps += 1;
            self.emitted.extend_from_slice(&g);
            let done = g.contains(&eos);
            out.push(self.event(EventKind::TokenGroup, g.clone(), false));
            if done {
                out.push(self.event(EventKind::EndOfSpeech, Vec::new(), false));
                self.status = SessionStatus::Done;
                break;
            }
            let slot = Slot::Group { k: self.group, tokens: g };
            self.top = self.engine.push_slot(&slot, Some(&self.prompt), true)?;
            self.group += 1;
        }
        Ok(out)
    }

    /// Latency figures; the session must be done.
    pub fn latency_report(&self) -> Result<LatencyReport> {
        latency_report(self)
    }

    /// Emitted tokens as a sequence; a truncated run gets EOS appended.
    pub fn tokens(&self) -> Result<SpeechTokens> {
        if self.status != SessionStatus::Done {
            return Err(Error::State("session is not done".into()));
        }
        let eos = self.model.cfg.eos();
        if self.emitted.last() == Some(&eos) {
            SpeechTokens::new(self.emitted.clone(), eos)
        } else {
            SpeechTokens::from_body(self.emitted.clone(), eos)
        }
    }
}

/// Measured latency and throughput of a finished session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Group predictions before the first event (always 1 when any group is emitted).
    pub first_event_steps: usize,
    /// Response text tokens that had been pushed when the first event came out.
    pub first_event_text_tokens: usize,
    pub backbone_steps: usize,
    pub tokens: usize,
    /// Mean group length over groups before the EOS group.
    pub tokens_per_step: f64,
    pub truncated: bool,
    #[serde(skip)]
    pub first_event_wall: Duration,
    #[serde(skip)]
    pub tokens_per_second: f64,
}

pub fn latency_report(s: &Session) -> Result<LatencyReport> {
    if s.status != SessionStatus::Done {
        return Err(Error::State("latency is reported once the session is done".into()));
    }
    let eos = s.model.cfg.eos();
    let groups: Vec<&StreamEvent> = s.log.iter().filter(|e| e.kind == EventKind::TokenGroup).collect();
    let before_eos: Vec<usize> = groups
        .iter()
        .filter(|e| !e.tokens.contains(&eos))
        .map(|e| e.tokens.len())
        .collect();
    let tokens_per_step = if before_eos.is_empty() {
        0.0
    } else {
        before_eos.iter().sum::<usize>() as f64 / before_eos.len() as f64
    };
    let first = s.log.first().expect("a done session has an end event");
    let last = s.log.last().expect("nonempty");
    let span = last.elapsed.saturating_sub(first.elapsed).as_secs_f64();
    Ok(LatencyReport {
        first_event_steps: first.steps,
        first_event_text_tokens: s.pushed_at_first.unwrap_or(0),
        backbone_steps: s.steps,
        tokens: s.emitted.len(),
        tokens_per_step,
        truncated: last.truncated,
        first_event_wall: first.elapsed,
        tokens_per_second: if span > 0.0 { s.emitted.len() as f64 / span } else { 0.0 },
    })
}

/// Single-shot generation that recomputes the whole sequence through the
/// graph at every group. It shares no state with [`Session`] and is the
/// reference the streaming path is checked against.
pub fn synthesize_offline(
    model: &DualBranchModel,
    vocab: &TextVocab,
    prompt: &SpeechFrames,
    text: &[usize],
    decode: DecodeMode,
    seed: u64,
    length: LengthControl,
) -> Result<SpeechTokens> {
    if prompt.is_empty() {
        return arg_err("prompt has no frames");
    }
    let cfg = &model.cfg;
    let eos = cfg.eos();
    let (mut slots, frames, rows) = query_slots(cfg, vocab, &Query::Speech(&prompt.frames))?;
    let mut il = Interleaver::new(cfg, vocab);
    let mut sampler = Sampler::new(decode, seed);
    let guard = cfg.max_speech_tokens(text.len());
    let mut emitted: Vec<usize> = Vec::new();
    for k in 0.. {
        if emitted.len() >= guard {
            emitted.push(eos);
            break;
        }
        slots.extend(il.slots_before(k, text, true));
        let layout = crate::model::Layout {
            slots: slots.clone(),
            prompt: frames.clone(),
            prompt_rows: rows,
            text_targets: Vec::new(),
            groups: Vec::new(),
            generation: true,
        };
        let h = model.forward_speech_branch(&model.embed_layout(&layout)?)?;
        let g = mtp_step(model, h.row(h.rows() - 1), &mut sampler, emitted.len(), length);
        emitted.extend_from_slice(&g);
        if g.contains(&eos) {
            break;
        }
        slots.push(Slot::Group { k, tokens: g });
    }
    SpeechTokens::new(emitted, eos)
}
