use crate::error::{arg_err, Error, Result};
use crate::flow_matching::{euler_frames, VectorField};
use crate::numerics::Tensor;
use crate::streaming::{EventKind, StreamEvent};
use crate::toy_world::SpeechFrames;

/// Chunking of the flow-matching decode over a token stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocodeSpec {
    /// Token groups per chunk.
    pub chunk: usize,
    /// Tokens of context taken from each side of a chunk.
    pub overlap: usize,
    pub steps: usize,
    pub seed: u64,
}

/// Token ids of a well-formed event sequence: token groups, then one final
/// end-of-speech event.
pub fn stream_tokens(events: &[StreamEvent], eos: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups = Vec::new();
    for (i, e) in events.iter().enumerate() {
        match e.kind {
            EventKind::TokenGroup => {
                if e.tokens.is_empty() {
                    return Err(Error::State(format!("event {i} is an empty token group")));
                }
                if groups.iter().any(|g: &Vec<usize>| g.contains(&eos)) {
                    return Err(Error::State(format!("event {i} follows the EOS group")));
                }
                groups.push(e.tokens.clone());
            }
            EventKind::EndOfSpeech => {
                if i + 1 != events.len() {
                    return Err(Error::State("end of speech is not the last event".into()));
                }
            }
        }
    }
    Ok(groups)
}

/// Decodes a finished event stream chunk by chunk. Chunk `c` covers groups
/// `c·chunk .. (c+1)·chunk` and is conditioned only on its own tokens plus
/// `overlap` tokens on each side; frames are emitted per chunk in order. An
/// empty stream yields no chunks.
pub fn chunked_vocode(field: &impl VectorField, events: &[StreamEvent], eos: usize, spec: &VocodeSpec) -> Result<Vec<SpeechFrames>> {
    if spec.chunk == 0 {
        return arg_err("chunks must hold at least one group");
    }
    let groups = stream_tokens(events, eos)?;
    let tokens: Vec<usize> = groups.concat().into_iter().filter(|&t| t != eos).collect();
    let mut out = Vec::new();
    let mut start = 0;
    for chunk in groups.chunks(spec.chunk) {
        let len = chunk.iter().flatten().filter(|&&t| t != eos).count();
        if len == 0 {
            continue;
        }
        let end = start + len;
        let lo = start.saturating_sub(spec.overlap);
        let hi = (end + spec.overlap).min(tokens.len());
        let positions: Vec<usize> = (start - lo..end - lo).collect();
        let frames = euler_frames(field, &tokens[lo..hi], &positions, lo, spec.steps, spec.seed)?;
        out.push(SpeechFrames::new(frames)?);
        start = end;
    }
    Ok(out)
}

/// Concatenates chunk outputs.
pub fn concat_frames(chunks: &[SpeechFrames], dim: usize) -> Result<SpeechFrames> {
    let mut data = Vec::new();
    let mut rows = 0;
    for c in chunks {
        if c.dim() != dim {
            return arg_err("chunk frame widths differ");
        }
        data.extend_from_slice(c.frames.data());
        rows += c.len();
    }
    SpeechFrames::new(Tensor::new(vec![rows, dim], data)?)
}
