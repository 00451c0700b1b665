//! DDPM forward and reverse processes, the toy denoiser, a linear latent
//! codec and the composition-window sampler.

mod codec;
mod denoiser;
mod process;
mod schedule;

pub use codec::{decode, encode, LatentCodec};
pub use denoiser::{Conditioning, DenoiserGrad, DenoiserModel, DenoiserShape, EpsPredictor, Guided};
pub use process::{
    forward_marginal, forward_marginal_with, forward_step, reverse_mean, reverse_step, sample, Composition,
    DEFAULT_SUBJECT_GUIDANCE, DEFAULT_WINDOW,
};
pub use schedule::{build_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
