//! Joint flow-matching policy over interleaved latent and action tokens.

mod data;
mod eval;
mod flow;
mod model;
mod net;
mod sequence;
mod toy;
mod train;

pub use data::{extract_latent_stream, Demo, DemoSet, LatentStats, PolicyBatch};
pub use eval::{
    episode_start, evaluate, replan_seed, wilson_interval, ChunkSource, EpisodeLog, EvalConfig, EvalReport, ExpertChunks,
    PolicyRunner,
};
pub use flow::{
    euler, flow_sample_at, l1_per_modality, make_flow_sample, normal_tensor, sample_tau, tau_from_uniform, weighted_total,
    FlowSample, InterventionKind, InterventionSpec, TAU_MIN,
};
pub use model::{
    CosineSchedule, Generated, ModalityWeights, NoiseDraw, PolicyArm, PolicyConfig, PolicyLoss, PolicyModel,
};
pub use net::{context_features, context_from_state, context_width, pool_frame, NetConfig, SeqNet, BASE_CONTEXT, TOKEN_DIM};
pub use sequence::{build_attn_mask, build_interleaved, layout, mask_for, InterleavedSequence, Modality, TokenTag};
pub use toy::{sample_two_point, train_two_point, two_point_stats, ToyConfig, ToyFlow};
pub use train::{PolicyStepRecord, PolicyTrainer};
