//! Incremental synthesis: a session caches the projected prompt and the
//! attention state, accepts response text in arbitrary chunks and emits
//! speech tokens `G` at a time. Emitted groups can be turned into frames
//! chunk by chunk.

mod session;
mod vocode;

pub use session::{
    latency_report, open_session, synthesize_offline, EventKind, LatencyReport, Session, SessionStatus, StreamEvent,
};
pub use vocode::{chunked_vocode, concat_frames, stream_tokens, VocodeSpec};
