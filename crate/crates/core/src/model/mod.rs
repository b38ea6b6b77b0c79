//! Speech encoder, projector, shared-bottom dual-branch transformer and the
//! grouped multi-token prediction head.

mod config;
mod infer;
mod init;
mod layers;
mod network;
mod sequence;

pub use config::{freeze_plan, EncoderConfig, ModelConfig, ProjectorConfig};
pub use infer::{argmax, mtp_step, DecodeMode, Engine, LengthControl, Sampler};
pub use init::{fork_speech_branch, init_params, sinusoid_table, HEAD_INIT_STD};
pub use layers::{bottom_name, speech_top_name, text_top_name, Net};
pub use network::{DualBranchModel, IGNORE};
pub use sequence::{
    align_layout, assemble_training_sequence, generation_layout, query_slots, text_layout, GroupTarget,
    Interleaver, Layout, Mode, Query, QueryKind, Slot, TrainItem,
};
