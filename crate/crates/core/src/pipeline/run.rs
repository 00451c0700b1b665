use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, LATENT_SIDE};
use super::train::{face_codec, face_latent, identity_embedding, pipeline_shape, prompt_conditioning};
use crate::attention::IdentityEmbedding;
use crate::diffusion::{sample, Composition, Conditioning, DenoiserModel, Guided};
use crate::error::{Error, Result};
use crate::facegen::{graffiti_stylize, image_size};
use crate::identity::{extract_attributes, ffc, AttributeVector, Projector};
use crate::lora::{adapted_model, AdapterSet};
use crate::numerics::{RngStream, Tensor};

/// How strongly the denoiser's latent change is written into the colour layer.
pub const TEXTURE_GAIN: f64 = 0.25;

// child stream indices of the run seed
const STYLE_STREAM: u64 = 1;
const DIFFUSION_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Order {
    /// Style, then projection.
    PS,
    /// Projection, then style.
    SP,
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Order::PS => "PS",
            Order::SP => "SP",
        })
    }
}

impl FromStr for Order {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PS" => Ok(Order::PS),
            "SP" => Ok(Order::SP),
            other => Err(Error::Parse(format!("unknown order {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub face_id: usize,
    pub order: Order,
    pub intensity: f64,
    pub attr_loss: f64,
    pub ffc: f64,
    pub seed: u64,
    /// Wall time in milliseconds, only recorded on request.
    pub ms: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub image: Tensor<f64>,
    pub row: ReportRow,
}

/// Denoiser (plus adapters) used by the optional texture pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionStage {
    pub model: DenoiserModel<f64>,
    pub adapters: AdapterSet<f64>,
}

impl DiffusionStage {
    /// Seeded, untrained model.
    pub fn untrained(seed: u64) -> Result<Self> {
        Ok(Self {
            model: DenoiserModel::init(pipeline_shape(), &mut RngStream::new(seed).split(0))?,
            adapters: AdapterSet::default(),
        })
    }

    pub fn merged(&self) -> Result<DenoiserModel<f64>> {
        adapted_model(&self.model, &self.adapters)
    }
}

/// Per-run identifiers and the optional diffusion stage.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunContext<'a> {
    pub face_id: usize,
    pub stage: Option<&'a DiffusionStage>,
}

/// Samples a latent guided by `guide` over the composition window.
///
/// `identity` of `None` runs the plain attention block.
pub fn diffuse_latent(
    model: &DenoiserModel<f64>,
    prompt: &Tensor<f64>,
    identity: Option<IdentityEmbedding<f64>>,
    guide: Option<&Tensor<f64>>,
    cfg: &PipelineConfig,
    rng: &RngStream,
) -> Result<Tensor<f64>> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let cond = Conditioning {
        text: prompt.clone(),
        identity,
    };
    let guided = Guided {
        model,
        scale: cfg.guidance_scale,
    };
    let comp = Composition {
        window: cfg.composition_window,
        guide,
        subject_guidance: cfg.subject_guidance,
    };
    sample(&guided, &cond, &sched, &[LATENT_SIDE, LATENT_SIDE], None, &comp, rng)
}

/// Denoiser texture pass: the sampled latent's departure from the image's own
/// structure latent is added to every colour channel. Structure is untouched.
fn texture_pass(
    img: &Tensor<f64>,
    reference: &AttributeVector,
    prompt: &str,
    cfg: &PipelineConfig,
    stage: &DiffusionStage,
) -> Result<Tensor<f64>> {
    let size = image_size(img)?;
    let codec = face_codec(size)?;
    let guide = face_latent(img, &codec)?;
    let model = stage.merged()?;
    let rng = RngStream::new(cfg.seed).split(DIFFUSION_STREAM);
    let z = diffuse_latent(
        &model,
        &prompt_conditioning(prompt)?,
        Some(identity_embedding(reference)),
        Some(&guide),
        cfg,
        &rng,
    )?;
    let delta = codec.decode(&z)?.sub(&codec.decode(&guide)?)?;
    let n = size * size;
    let mut out = img.clone();
    let data = out.data_mut();
    for ch in 1..4 {
        for (k, d) in delta.data().iter().enumerate() {
            let v = &mut data[ch * n + k];
            *v = (*v + TEXTURE_GAIN * d).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

fn finish(
    image: Tensor<f64>,
    reference: &AttributeVector,
    order: Order,
    cfg: &PipelineConfig,
    ctx: &RunContext,
) -> Result<RunOutput> {
    let got = extract_attributes(&image)?;
    let row = ReportRow {
        face_id: ctx.face_id,
        order,
        intensity: cfg.style_intensity,
        attr_loss: got.distance_sq(reference)?,
        ffc: ffc(&got.centered(), &reference.centered())?,
        seed: cfg.seed,
        ms: None,
    };
    Ok(RunOutput { image, row })
}

fn resolve_stage(cfg: &PipelineConfig, given: Option<&DiffusionStage>) -> Result<Option<DiffusionStage>> {
    match (cfg.use_diffusion, given) {
        (false, _) => Ok(None),
        (true, Some(s)) => Ok(Some(s.clone())),
        (true, None) => DiffusionStage::untrained(cfg.seed).map(Some),
    }
}

/// Stylise, optional denoiser pass, then project back to `I`'s attributes.
pub fn run_style_first(i_img: &Tensor<f64>, prompt: &str, cfg: &PipelineConfig) -> Result<RunOutput> {
    run_style_first_with(i_img, prompt, cfg, &RunContext::default())
}

pub fn run_style_first_with(
    i_img: &Tensor<f64>,
    prompt: &str,
    cfg: &PipelineConfig,
    ctx: &RunContext,
) -> Result<RunOutput> {
    cfg.validate()?;
    let reference = extract_attributes(i_img)?;
    let projector = Projector::new(reference.clone(), cfg.projection);
    let style_rng = RngStream::new(cfg.seed).split(STYLE_STREAM);
    let mut x = graffiti_stylize(i_img, &cfg.style_op(), &style_rng)?;
    if let Some(stage) = resolve_stage(cfg, ctx.stage)? {
        x = texture_pass(&x, &reference, prompt, cfg, &stage)?;
    }
    let x = projector.apply(&x)?;
    finish(x, &reference, Order::PS, cfg, ctx)
}

/// Reversed flow: project first (a no-op on a canonical render), then stylise.
pub fn run_identity_first(i_img: &Tensor<f64>, prompt: &str, cfg: &PipelineConfig) -> Result<RunOutput> {
    run_identity_first_with(i_img, prompt, cfg, &RunContext::default())
}

pub fn run_identity_first_with(
    i_img: &Tensor<f64>,
    prompt: &str,
    cfg: &PipelineConfig,
    ctx: &RunContext,
) -> Result<RunOutput> {
    cfg.validate()?;
    let reference = extract_attributes(i_img)?;
    let projector = Projector::new(reference.clone(), cfg.projection);
    let style_rng = RngStream::new(cfg.seed).split(STYLE_STREAM);
    let x = projector.apply(i_img)?;
    let mut x = graffiti_stylize(&x, &cfg.style_op(), &style_rng)?;
    if let Some(stage) = resolve_stage(cfg, ctx.stage)? {
        x = texture_pass(&x, &reference, prompt, cfg, &stage)?;
    }
    finish(x, &reference, Order::SP, cfg, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facegen::{face_grid, render_face, structure_channel};

    fn face(seed: u64) -> Tensor<f64> {
        render_face(&face_grid(1, seed)[0], 32).unwrap()
    }

    #[test]
    fn degenerate_settings_preserve_everything() {
        let img = face(1);
        let cfg = PipelineConfig {
            style_intensity: 0.0,
            composition_window: 0,
            ..PipelineConfig::default()
        };
        let ps = run_style_first(&img, "graffiti", &cfg).unwrap();
        let sp = run_identity_first(&img, "graffiti", &cfg).unwrap();
        assert_eq!(ps.image, img);
        assert_eq!(sp.image, img);
        assert_eq!((ps.row.attr_loss, sp.row.attr_loss), (0.0, 0.0));
        assert_eq!(sp.row.order.to_string(), "SP");
    }

    #[test]
    fn defaults_order_gap() {
        let img = face(2);
        let cfg = PipelineConfig::default();
        let ps = run_style_first(&img, "graffiti", &cfg).unwrap();
        let sp = run_identity_first(&img, "graffiti", &cfg).unwrap();
        assert!(ps.row.attr_loss <= 1e-18);
        assert!((ps.row.ffc - 1.0).abs() < 1e-6);
        assert!(sp.row.attr_loss > 0.0);
        let styled = graffiti_stylize(&img, &cfg.style_op(), &RngStream::new(cfg.seed).split(STYLE_STREAM)).unwrap();
        assert_eq!(sp.row.attr_loss, crate::identity::attr_loss(&styled, &img).unwrap());
    }

    #[test]
    fn diffusion_pass_keeps_the_theorem() {
        let img = face(3);
        let cfg = PipelineConfig {
            use_diffusion: true,
            steps: 20,
            composition_window: 5,
            ..PipelineConfig::default()
        };
        let ps = run_style_first(&img, "graffiti", &cfg).unwrap();
        let sp = run_identity_first(&img, "graffiti", &cfg).unwrap();
        assert!(ps.row.attr_loss <= 1e-18);
        assert!(sp.row.attr_loss >= ps.row.attr_loss);
        let plain = run_style_first(
            &img,
            "graffiti",
            &PipelineConfig {
                use_diffusion: false,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(
            structure_channel(&ps.image).unwrap(),
            structure_channel(&plain.image).unwrap()
        );
        assert_ne!(ps.image, plain.image);
    }

    #[test]
    fn window_zero_ignores_guide() {
        let stage = DiffusionStage::untrained(4).unwrap();
        let cfg = PipelineConfig {
            steps: 20,
            composition_window: 0,
            ..PipelineConfig::default()
        };
        let prompt = prompt_conditioning("x").unwrap();
        let rng = RngStream::new(5);
        let poison = Tensor::filled(&[8, 8], 1e6);
        let a = diffuse_latent(&stage.model, &prompt, None, Some(&poison), &cfg, &rng).unwrap();
        let b = diffuse_latent(&stage.model, &prompt, None, None, &cfg, &rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_identity_matches_plain_block() {
        let stage = DiffusionStage::untrained(6).unwrap();
        let mut model = stage.model.clone();
        model.attn.uq = Tensor::from_fn(model.attn.uq.shape(), |i| (i as f64).sin());
        let cfg = PipelineConfig {
            steps: 20,
            composition_window: 5,
            ..PipelineConfig::default()
        };
        let prompt = prompt_conditioning("x").unwrap();
        let guide = Tensor::filled(&[8, 8], 0.3);
        let rng = RngStream::new(7);
        let zero = Some(IdentityEmbedding::zeros(6));
        let a = diffuse_latent(&model, &prompt, zero, Some(&guide), &cfg, &rng).unwrap();
        let b = diffuse_latent(&model, &prompt, None, Some(&guide), &cfg, &rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn order_tags_parse() {
        assert_eq!("PS".parse::<Order>().unwrap(), Order::PS);
        assert!("XX".parse::<Order>().is_err());
    }
}
