use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, LATENT_SIDE};
use crate::attention::IdentityEmbedding;
use crate::diffusion::{forward_marginal_with, Conditioning, DenoiserGrad, DenoiserModel, DenoiserShape, LatentCodec};
use crate::error::{Error, Result};
use crate::facegen::{embed_prompt, render_face, structure_channel, FaceParams};
use crate::identity::AttributeVector;
use crate::lora::{train_lora, AdapterSet, DenoiseSample};
use crate::numerics::{gaussian, RngStream, Tensor};

/// Prompt used to condition the toy denoiser.
pub const TRAIN_PROMPT: &str = "graffiti portrait";

/// Denoiser geometry used throughout the pipeline: 8×8 latents in 2×2 patches.
pub fn pipeline_shape() -> DenoiserShape {
    DenoiserShape::default()
}

/// Pools the structure channel of an image to an `8 × 8` latent.
pub fn face_codec(image_size: usize) -> Result<LatentCodec<f64>> {
    LatentCodec::block_pool(image_size, image_size, image_size / LATENT_SIDE)
}

pub fn face_latent(img: &Tensor<f64>, codec: &LatentCodec<f64>) -> Result<Tensor<f64>> {
    codec.encode(&structure_channel(img)?)
}

/// `2a − 1`, the identity embedding fed to the attention block.
pub fn identity_embedding(attrs: &AttributeVector) -> IdentityEmbedding<f64> {
    IdentityEmbedding(Tensor::vector(attrs.values().iter().map(|v| 2.0 * v - 1.0).collect()).expect("finite"))
}

pub fn prompt_conditioning(prompt: &str) -> Result<Tensor<f64>> {
    embed_prompt(prompt, pipeline_shape().d_cond)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the prompt by zeros, so guidance has an unconditional branch.
    pub text_dropout: f64,
    /// Probability of omitting the identity embedding; 1 trains a plain denoiser.
    pub identity_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 8,
            lr: 0.01,
            text_dropout: 0.1,
            identity_dropout: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn from_pipeline(cfg: &PipelineConfig) -> Self {
        Self {
            steps: cfg.train_steps,
            lr: cfg.learning_rate,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedDenoiser {
    pub model: DenoiserModel<f64>,
    pub adapters: AdapterSet<f64>,
    /// Mean batch loss per update.
    pub losses: Vec<f64>,
    /// Loss on a fixed evaluation set before and after training.
    pub eval_initial: f64,
    pub eval_final: f64,
}

/// Clean latents and attributes of a face grid.
pub struct FaceData {
    pub latents: Vec<Tensor<f64>>,
    pub attrs: Vec<AttributeVector>,
}

impl FaceData {
    pub fn new(faces: &[FaceParams], image_size: usize) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::Config("face grid is empty".into()));
        }
        let codec = face_codec(image_size)?;
        let mut latents = Vec::with_capacity(faces.len());
        for f in faces {
            latents.push(face_latent(&render_face(f, image_size)?, &codec)?);
        }
        Ok(Self {
            latents,
            attrs: faces.iter().map(|f| f.attrs.clone()).collect(),
        })
    }

    fn draw(
        &self,
        text: &Tensor<f64>,
        steps: usize,
        tc: &TrainConfig,
        rng: &mut RngStream,
    ) -> Result<DenoiseSample<f64>> {
        let sched_steps = steps;
        let i = (rng.next_u64() % self.latents.len() as u64) as usize;
        let t = 1 + (rng.next_u64() % sched_steps as u64) as usize;
        let eps: Tensor<f64> = gaussian(rng, self.latents[i].shape());
        let text = if rng.uniform() < tc.text_dropout {
            Tensor::zeros(text.shape())
        } else {
            text.clone()
        };
        let identity = (rng.uniform() >= tc.identity_dropout).then(|| identity_embedding(&self.attrs[i]));
        Ok(DenoiseSample {
            input: self.latents[i].clone(),
            t,
            steps,
            cond: Conditioning { text, identity },
            target: eps,
        })
    }
}

fn noised(s: &DenoiseSample<f64>, sched: &crate::diffusion::NoiseSchedule<f64>) -> Result<DenoiseSample<f64>> {
    Ok(DenoiseSample {
        input: forward_marginal_with(&s.input, s.t, sched, &s.target)?,
        ..s.clone()
    })
}

fn mean_loss(model: &DenoiserModel<f64>, data: &[DenoiseSample<f64>]) -> Result<(f64, DenoiserGrad<f64>)> {
    let mut total = 0.0;
    let mut acc: Option<DenoiserGrad<f64>> = None;
    for s in data {
        let (l, g) = model.loss_and_grad(&s.input, s.t, s.steps, &s.cond, &s.target)?;
        total += l;
        match acc.as_mut() {
            Some(a) => a.accumulate(&g)?,
            None => acc = Some(g),
        }
    }
    let n = data.len() as f64;
    let mut g = acc.ok_or_else(|| Error::Config("empty batch".into()))?;
    g.scale(1.0 / n);
    Ok((total / n, g))
}

/// Adam over the flat parameter list.
struct Adam {
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &DenoiserModel<f64>, lr: f64) -> Self {
        let zeros: Vec<_> = model.parameters().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
        }
    }

    fn step(&mut self, model: &mut DenoiserModel<f64>, grad: &DenoiserGrad<f64>) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in model
            .parameters_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (pd, gd) = (p.data_mut(), g.data());
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = Self::B1 * *mi + (1.0 - Self::B1) * gi;
                *vi = Self::B2 * *vi + (1.0 - Self::B2) * gi * gi;
                *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains a fresh denoiser on the ε-prediction objective over rendered faces.
///
/// Identity blocks start at zero and are trained along with everything else.
pub fn train_toy_denoiser(
    faces: &[FaceParams],
    cfg: &PipelineConfig,
    tc: &TrainConfig,
    rng: &RngStream,
) -> Result<TrainedDenoiser> {
    let model = DenoiserModel::init(pipeline_shape(), &mut rng.split(0))?;
    train_from(model, faces, cfg, tc, rng)
}

/// Continues training `model` (all parameters) with Adam.
pub fn train_from(
    mut model: DenoiserModel<f64>,
    faces: &[FaceParams],
    cfg: &PipelineConfig,
    tc: &TrainConfig,
    rng: &RngStream,
) -> Result<TrainedDenoiser> {
    cfg.validate()?;
    if tc.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let data = FaceData::new(faces, cfg.image_size)?;
    let sched = cfg.schedule()?;
    let text = prompt_conditioning(TRAIN_PROMPT)?;
    let mut eval_rng = rng.split(1);
    let eval: Vec<_> = (0..64)
        .map(|_| {
            data.draw(&text, cfg.steps, tc, &mut eval_rng)
                .and_then(|s| noised(&s, &sched))
        })
        .collect::<Result<_>>()?;
    let eval_initial = mean_loss(&model, &eval)?.0;
    let mut opt = Adam::new(&model, tc.lr);
    let mut batch_rng = rng.split(2);
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch: Vec<_> = (0..tc.batch)
            .map(|_| {
                data.draw(&text, cfg.steps, tc, &mut batch_rng)
                    .and_then(|s| noised(&s, &sched))
            })
            .collect::<Result<_>>()?;
        let (loss, grad) = mean_loss(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss {loss} at step {step}")));
        }
        losses.push(loss);
        opt.step(&mut model, &grad);
    }
    let eval_final = mean_loss(&model, &eval)?.0;
    if !eval_final.is_finite() {
        return Err(Error::Training(format!("final loss {eval_final}")));
    }
    Ok(TrainedDenoiser {
        model,
        adapters: AdapterSet::default(),
        losses,
        eval_initial,
        eval_final,
    })
}

/// Trains LoRA adapters over a frozen `base` on a fixed batch of noised face latents.
pub fn train_adapters(
    base: &DenoiserModel<f64>,
    faces: &[FaceParams],
    cfg: &PipelineConfig,
    tc: &TrainConfig,
    rng: &RngStream,
) -> Result<TrainedDenoiser> {
    cfg.validate()?;
    let data = FaceData::new(faces, cfg.image_size)?;
    let sched = cfg.schedule()?;
    let text = prompt_conditioning(TRAIN_PROMPT)?;
    let mut draw_rng = rng.split(1);
    let set: Vec<_> = (0..tc.batch.max(1) * 4)
        .map(|_| {
            data.draw(&text, cfg.steps, tc, &mut draw_rng)
                .and_then(|s| noised(&s, &sched))
        })
        .collect::<Result<_>>()?;
    let lcfg = crate::lora::LoraConfig {
        steps: tc.steps,
        lr: tc.lr,
        ..cfg.lora()
    };
    let out = train_lora(base, &set, &lcfg, &mut rng.split(2))?;
    let eval_initial = out.losses.first().copied().unwrap_or(f64::NAN);
    let eval_final = out.losses.last().copied().unwrap_or(f64::NAN);
    if !eval_final.is_finite() {
        return Err(Error::Training(format!("final loss {eval_final}")));
    }
    Ok(TrainedDenoiser {
        model: base.clone(),
        adapters: out.adapters,
        losses: out.losses,
        eval_initial,
        eval_final,
    })
}

/// Least-squares affine map from a flattened latent to centred attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeProbe {
    /// `(z + 1) × k`, last row is the intercept.
    pub weights: Tensor<f64>,
}

impl AttributeProbe {
    /// Ridge-regularised least squares (`ridge` on the non-intercept rows).
    pub fn fit(data: &FaceData, ridge: f64) -> Result<Self> {
        use nalgebra::DMatrix;
        let n = data.latents.len();
        let z = data.latents[0].len();
        let k = data.attrs[0].len();
        let x = DMatrix::from_fn(n, z + 1, |i, j| if j < z { data.latents[i].data()[j] } else { 1.0 });
        let y = DMatrix::from_fn(n, k, |i, j| data.attrs[i].values()[j] - 0.5);
        let mut gram = x.transpose() * &x;
        for j in 0..z {
            gram[(j, j)] += ridge;
        }
        let rhs = x.transpose() * y;
        let w = gram
            .cholesky()
            .ok_or_else(|| Error::Evaluation("probe normal equations are singular".into()))?
            .solve(&rhs);
        let weights = Tensor::from_fn(&[z + 1, k], |idx| w[(idx / k, idx % k)]);
        Ok(Self { weights })
    }

    pub fn predict(&self, latent: &Tensor<f64>) -> Result<Tensor<f64>> {
        let z = self.weights.rows() - 1;
        if latent.len() != z {
            return Err(Error::shape("probe", latent.shape(), &[z]));
        }
        let mut x = latent.data().to_vec();
        x.push(1.0);
        Tensor::vector(x)?.vecmat(&self.weights)
    }
}
