//! Sequence layouts shared by training, offline synthesis and streaming.
//!
//! A layout is the ordered list of input slots fed to the backbone plus the
//! targets attached to positions. Generation interleaves response text and
//! speech groups: before group `k` the response text up to token
//! `W + k·⌈G/R_f⌉` (or the end-of-text marker once the text is exhausted) is
//! appended, the group is predicted from the last position, and its token
//! embeddings are appended as one slot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Tensor;
use crate::toy_world::{AlignmentPair, Quadruple, TextVocab};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Text token; `resp` is its index within the response when the slot
    /// belongs to a generation response (end-of-text uses index `n`).
    Text { id: usize, resp: Option<usize> },
    /// Row of the projected prompt.
    Prompt(usize),
    /// Embeddings of the `G` tokens of speech group `k`.
    Group { k: usize, tokens: Vec<usize> },
}

/// A speech group predicted from the hidden state at `pos`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupTarget {
    pub pos: usize,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Next-token language modelling over a text rendition of a pair.
    Text,
    /// Speech prompt to continuation text.
    Align,
    /// Query plus response text to speech tokens.
    Generate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryKind {
    Text,
    Speech,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub slots: Vec<Slot>,
    pub prompt: Option<Tensor<f32>>,
    /// Number of rows the projector yields for `prompt`.
    pub prompt_rows: usize,
    /// `(position, target id)` for text prediction.
    pub text_targets: Vec<(usize, usize)>,
    pub groups: Vec<GroupTarget>,
    pub generation: bool,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Speech tokens carried by the targets, EOS included.
    pub fn speech_targets(&self) -> usize {
        self.groups.iter().map(|g| g.tokens.len()).sum()
    }
}

/// What an item contributes before the response.
pub enum Query<'a> {
    Text(&'a [usize]),
    Speech(&'a Tensor<f32>),
}

/// Incremental builder for the interleaved generation layout.
#[derive(Clone, Debug)]
pub struct Interleaver {
    pub lookahead: usize,
    pub per_group: usize,
    pub eot: usize,
    appended: usize,
    eot_done: bool,
}

impl Interleaver {
    pub fn new(cfg: &ModelConfig, vocab: &TextVocab) -> Self {
        Self {
            lookahead: cfg.lookahead,
            per_group: cfg.text_per_group(),
            eot: vocab.eot(),
            appended: 0,
            eot_done: false,
        }
    }

    /// Response tokens that must be available before group `k` can start.
    pub fn needed(&self, k: usize) -> usize {
        self.lookahead + k * self.per_group
    }

    /// Whether group `k` can be emitted with `pushed` tokens known so far.
    pub fn ready(&self, k: usize, pushed: usize, finished: bool) -> bool {
        finished || pushed >= self.needed(k)
    }

    /// Text slots to append before group `k`. `text` is everything pushed so
    /// far; `finished` says no more text will come.
    pub fn slots_before(&mut self, k: usize, text: &[usize], finished: bool) -> Vec<Slot> {
        let need = self.needed(k);
        let mut out = Vec::new();
        while self.appended < need.min(text.len()) {
            out.push(Slot::Text {
                id: text[self.appended],
                resp: Some(self.appended),
            });
            self.appended += 1;
        }
        if finished && need > text.len() && !self.eot_done {
            out.push(Slot::Text {
                id: self.eot,
                resp: Some(text.len()),
            });
            self.eot_done = true;
        }
        out
    }
}

fn check_context(cfg: &ModelConfig, len: usize) -> Result<()> {
    if len > cfg.context {
        return Err(Error::Data(format!(
            "sequence of {len} positions exceeds the context of {}",
            cfg.context
        )));
    }
    Ok(())
}

fn prompt_rows(cfg: &ModelConfig, frames: &Tensor<f32>) -> Result<usize> {
    if frames.rank() != 2 || frames.rows() == 0 {
        return Err(Error::Data("speech prompt has no frames".into()));
    }
    Ok(cfg.projected_len(cfg.encoded_len(frames.rows())))
}

/// Query part shared by generation layouts: `[BOS] query [SEP]`.
pub fn query_slots(cfg: &ModelConfig, vocab: &TextVocab, query: &Query) -> Result<(Vec<Slot>, Option<Tensor<f32>>, usize)> {
    let mut slots = vec![Slot::Text { id: vocab.bos(), resp: None }];
    let (prompt, rows) = match query {
        Query::Text(ids) => {
            slots.extend(ids.iter().map(|&id| Slot::Text { id, resp: None }));
            (None, 0)
        }
        Query::Speech(frames) => {
            let rows = prompt_rows(cfg, frames)?;
            slots.extend((0..rows).map(Slot::Prompt));
            (Some((*frames).clone()), rows)
        }
    };
    slots.push(Slot::Text { id: vocab.sep(), resp: None });
    Ok((slots, prompt, rows))
}

/// Text-mode layout: `[BOS] descriptors transcript [SEP] continuation [EOT]`
/// with a next-token target at every position.
pub fn text_layout(cfg: &ModelConfig, vocab: &TextVocab, pair: &AlignmentPair) -> Result<Layout> {
    let mut ids = vec![vocab.bos()];
    ids.extend(&pair.descriptor_prefix);
    ids.extend(&pair.transcript);
    ids.push(vocab.sep());
    ids.extend(&pair.continuation_text);
    ids.push(vocab.eot());
    check_context(cfg, ids.len() - 1)?;
    let text_targets = (0..ids.len() - 1).map(|i| (i, ids[i + 1])).collect();
    ids.pop();
    Ok(Layout {
        slots: ids.into_iter().map(|id| Slot::Text { id, resp: None }).collect(),
        prompt: None,
        prompt_rows: 0,
        text_targets,
        groups: Vec::new(),
        generation: false,
    })
}

/// Alignment layout: `[BOS] prompt [SEP] continuation`, targets on the
/// continuation and the closing end-of-text only.
pub fn align_layout(cfg: &ModelConfig, vocab: &TextVocab, pair: &AlignmentPair) -> Result<Layout> {
    let (mut slots, prompt, rows) = query_slots(cfg, vocab, &Query::Speech(&pair.prompt_frames.frames))?;
    let mut text_targets = Vec::new();
    for &c in &pair.continuation_text {
        text_targets.push((slots.len() - 1, c));
        slots.push(Slot::Text { id: c, resp: None });
    }
    text_targets.push((slots.len() - 1, vocab.eot()));
    check_context(cfg, slots.len())?;
    Ok(Layout {
        slots,
        prompt,
        prompt_rows: rows,
        text_targets,
        groups: Vec::new(),
        generation: false,
    })
}

/// Generation layout with teacher-forced speech groups.
pub fn generation_layout(
    cfg: &ModelConfig,
    vocab: &TextVocab,
    query: &Query,
    response: &[usize],
    speech: &[usize],
) -> Result<Layout> {
    if speech.last() != Some(&cfg.eos()) || speech[..speech.len() - 1].contains(&cfg.eos()) {
        return Err(Error::Data("speech response must end with its only EOS".into()));
    }
    let (mut slots, prompt, rows) = query_slots(cfg, vocab, query)?;
    let mut il = Interleaver::new(cfg, vocab);
    let mut groups = Vec::new();
    for (k, chunk) in speech.chunks(cfg.group).enumerate() {
        slots.extend(il.slots_before(k, response, true));
        groups.push(GroupTarget {
            pos: slots.len() - 1,
            tokens: chunk.to_vec(),
        });
        if chunk.contains(&cfg.eos()) {
            break;
        }
        slots.push(Slot::Group {
            k,
            tokens: chunk.to_vec(),
        });
    }
    check_context(cfg, slots.len())?;
    Ok(Layout {
        slots,
        prompt,
        prompt_rows: rows,
        text_targets: Vec::new(),
        groups,
        generation: true,
    })
}

/// Training item accepted by [`assemble_training_sequence`].
pub enum TrainItem<'a> {
    Pair(&'a AlignmentPair),
    Quad(&'a Quadruple, QueryKind),
}

/// Builds the layout of one training item. Text-query quadruples feed the
/// descriptor tokens and the query text instead of projected frames.
pub fn assemble_training_sequence(cfg: &ModelConfig, vocab: &TextVocab, item: &TrainItem, mode: Mode) -> Result<Layout> {
    match (item, mode) {
        (TrainItem::Pair(p), Mode::Text) => text_layout(cfg, vocab, p),
        (TrainItem::Pair(p), Mode::Align) => align_layout(cfg, vocab, p),
        (TrainItem::Quad(q, kind), Mode::Generate) => {
            let text_query;
            let query = match kind {
                QueryKind::Speech => Query::Speech(&q.speech_query.frames),
                QueryKind::Text => {
                    let mut ids = vocab.descriptor_prefix(q.dialect, q.emotion);
                    ids.extend(&q.text_query);
                    text_query = ids;
                    Query::Text(&text_query)
                }
            };
            generation_layout(cfg, vocab, &query, &q.text_response, q.speech_response.ids())
        }
        _ => Err(Error::Argument("item kind does not match the sequence mode".into())),
    }
}
