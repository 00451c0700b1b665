use serde::{Deserialize, Serialize};

use crate::diffusion::{
    NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS, DEFAULT_SUBJECT_GUIDANCE, DEFAULT_WINDOW,
};
use crate::error::{Error, Result};
use crate::facegen::{StyleOp, DEFAULT_INTENSITY, MIN_SIZE};
use crate::identity::ProjectionMode;
use crate::lora::{LoraConfig, DEFAULT_ALPHA, DEFAULT_RANK};

pub const DEFAULT_GUIDANCE: f64 = 7.5;
/// Side of the square latent that images are pooled down to.
pub const LATENT_SIDE: usize = 8;

/// Every tunable of a run. Unknown JSON keys are rejected.
///
/// `lora_rank` and `lora_alpha` default to desk-scale 4 and 8; the full-scale
/// setting is rank 64 with α = 128 (see [`crate::lora::FULL_SCALE_RANK`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub guidance_scale: f64,
    /// Blend weight `λ` toward the guide during the composition window.
    pub subject_guidance: f64,
    pub style_intensity: f64,
    pub steps: usize,
    pub composition_window: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
    pub image_size: usize,
    /// Run the denoiser texture pass inside the style-first and identity-first flows.
    pub use_diffusion: bool,
    pub beta_start: f64,
    pub beta_end: f64,
    pub projection: ProjectionMode,
    pub train_steps: usize,
    pub learning_rate: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            guidance_scale: DEFAULT_GUIDANCE,
            subject_guidance: DEFAULT_SUBJECT_GUIDANCE,
            style_intensity: DEFAULT_INTENSITY,
            steps: DEFAULT_STEPS,
            composition_window: DEFAULT_WINDOW,
            lora_rank: DEFAULT_RANK,
            lora_alpha: DEFAULT_ALPHA,
            seed: 0,
            image_size: MIN_SIZE,
            use_diffusion: false,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            projection: ProjectionMode::ReRender,
            train_steps: 500,
            learning_rate: 0.01,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.composition_window > self.steps {
            return fail(format!(
                "composition window {} exceeds {} steps",
                self.composition_window, self.steps
            ));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return fail(format!(
                "guidance scale {} must be finite and >= 0",
                self.guidance_scale
            ));
        }
        if !(0.0..=1.0).contains(&self.subject_guidance) {
            return fail(format!("subject guidance {} outside [0, 1]", self.subject_guidance));
        }
        if !(0.0..=1.0).contains(&self.style_intensity) {
            return fail(format!("style intensity {} outside [0, 1]", self.style_intensity));
        }
        if self.image_size < MIN_SIZE || !self.image_size.is_multiple_of(LATENT_SIDE) {
            return fail(format!(
                "image size {} must be >= {MIN_SIZE} and a multiple of {LATENT_SIDE}",
                self.image_size
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.learning_rate));
        }
        self.lora().validate()?;
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule<f64>> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }

    pub fn style_op(&self) -> StyleOp {
        StyleOp::with_intensity(self.style_intensity)
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            lr: self.learning_rate,
            ..LoraConfig::default()
        }
    }
}
