//! Style-first and identity-first flows, the order and attention ablations,
//! and toy denoiser training.

mod ablate;
mod config;
mod run;
mod train;

pub use ablate::{
    ablate_attention, ablate_order, ablate_order_with, default_intensities, face_tokens, Arm, AttentionReport,
    AttentionRow, AttentionSweep, ExperimentReport, OrderSummary, OrderSweep, CSV_HEADER,
};
pub use config::{PipelineConfig, DEFAULT_GUIDANCE, LATENT_SIDE};
pub use run::{
    diffuse_latent, run_identity_first, run_identity_first_with, run_style_first, run_style_first_with, DiffusionStage,
    Order, ReportRow, RunContext, RunOutput, TEXTURE_GAIN,
};
pub use train::{
    face_codec, face_latent, identity_embedding, pipeline_shape, prompt_conditioning, train_adapters, train_from,
    train_toy_denoiser, AttributeProbe, FaceData, TrainConfig, TrainedDenoiser, TRAIN_PROMPT,
};
