use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::run::{
    diffuse_latent, run_identity_first_with, run_style_first_with, DiffusionStage, Order, ReportRow, RunContext,
};
use super::train::{
    face_codec, face_latent, identity_embedding, prompt_conditioning, train_toy_denoiser, AttributeProbe, FaceData,
    TrainConfig, TRAIN_PROMPT,
};
use crate::attention::IdentityEmbedding;
use crate::attention::{attention_map, region_mass};
use crate::diffusion::{Conditioning, DenoiserModel};
use crate::error::{Error, Result};
use crate::facegen::{render_face, FaceParams};
use crate::identity::ffc;
use crate::numerics::RngStream;

/// Style intensities 0.1, 0.2, …, 1.0.
pub fn default_intensities() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderSweep {
    pub intensities: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
    /// Record per-row wall time (makes the CSV run-dependent).
    pub timing: bool,
    pub prompt: String,
}

impl Default for OrderSweep {
    fn default() -> Self {
        Self {
            intensities: default_intensities(),
            seeds: vec![0, 1, 2],
            jobs: 0,
            timing: false,
            prompt: TRAIN_PROMPT.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderSummary {
    pub cells: usize,
    /// Fraction of cells with `loss_ps ≤ loss_sp`.
    pub win_rate: f64,
    /// Fraction of cells with `loss_ps < loss_sp`.
    pub strict_rate: f64,
    /// Cells where stylisation moved the attributes.
    pub drifted: usize,
    pub mean_loss_ps: f64,
    pub mean_loss_sp: f64,
    pub max_loss_ps: f64,
    pub mean_ffc_ps: f64,
    pub mean_ffc_sp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub summary: OrderSummary,
}

pub const CSV_HEADER: &str = "face_id,order,intensity,attr_loss,ffc,seed,ms";

impl ExperimentReport {
    /// One line per row; the `ms` column is empty unless timing was recorded.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let ms = r.ms.map(|m| format!("{m:.3}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.face_id, r.order, r.intensity, r.attr_loss, r.ffc, r.seed, ms
            );
        }
        s
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn sort_key(r: &ReportRow) -> (usize, u64, u64, Order) {
    (r.face_id, r.intensity.to_bits(), r.seed, r.order)
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs both orders for every (face, intensity, seed) cell and checks
/// `loss_ps ≤ loss_sp` on each.
pub fn ablate_order(faces: &[FaceParams], cfg: &PipelineConfig, sweep: &OrderSweep) -> Result<ExperimentReport> {
    ablate_order_with(faces, cfg, sweep, None)
}

pub fn ablate_order_with(
    faces: &[FaceParams],
    cfg: &PipelineConfig,
    sweep: &OrderSweep,
    stage: Option<&DiffusionStage>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    if faces.is_empty() || sweep.intensities.is_empty() || sweep.seeds.is_empty() {
        return Err(Error::Config("order sweep needs faces, intensities and seeds".into()));
    }
    let mut cells = Vec::with_capacity(faces.len() * sweep.intensities.len() * sweep.seeds.len());
    for face_id in 0..faces.len() {
        for &intensity in &sweep.intensities {
            for &seed in &sweep.seeds {
                cells.push((face_id, intensity, seed));
            }
        }
    }
    let run_cell = |&(face_id, intensity, seed): &(usize, f64, u64)| -> Result<[ReportRow; 2]> {
        let start = Instant::now();
        let cell_cfg = PipelineConfig {
            style_intensity: intensity,
            seed,
            ..cfg.clone()
        };
        let img = render_face(&faces[face_id], cfg.image_size)?;
        let ctx = RunContext { face_id, stage };
        let mut ps = run_style_first_with(&img, &sweep.prompt, &cell_cfg, &ctx)?.row;
        let mut sp = run_identity_first_with(&img, &sweep.prompt, &cell_cfg, &ctx)?.row;
        if ps.attr_loss > sp.attr_loss {
            return Err(Error::TheoremViolation(format!(
                "face_id={face_id} intensity={intensity} seed={seed} loss_ps={} loss_sp={}",
                ps.attr_loss, sp.attr_loss
            )));
        }
        if sweep.timing {
            let ms = start.elapsed().as_secs_f64() * 1e3;
            ps.ms = Some(ms);
            sp.ms = Some(ms);
        }
        Ok([ps, sp])
    };
    let pairs: Vec<[ReportRow; 2]> =
        pool(sweep.jobs)?.install(|| cells.par_iter().map(run_cell).collect::<Result<_>>())?;

    let n = pairs.len();
    let ps = || pairs.iter().map(|p| &p[0]);
    let sp = || pairs.iter().map(|p| &p[1]);
    let summary = OrderSummary {
        cells: n,
        win_rate: pairs.iter().filter(|p| p[0].attr_loss <= p[1].attr_loss).count() as f64 / n as f64,
        strict_rate: pairs.iter().filter(|p| p[0].attr_loss < p[1].attr_loss).count() as f64 / n as f64,
        drifted: pairs.iter().filter(|p| p[1].attr_loss > 0.0).count(),
        mean_loss_ps: mean(ps().map(|r| r.attr_loss)),
        mean_loss_sp: mean(sp().map(|r| r.attr_loss)),
        max_loss_ps: ps().map(|r| r.attr_loss).fold(0.0, f64::max),
        mean_ffc_ps: mean(ps().map(|r| r.ffc)),
        mean_ffc_sp: mean(sp().map(|r| r.ffc)),
    };
    let mut rows: Vec<ReportRow> = pairs.into_iter().flatten().collect();
    rows.sort_by_key(sort_key);
    Ok(ExperimentReport { rows, summary })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Identity,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub face_id: usize,
    pub seed: u64,
    pub arm: Arm,
    /// Cosine between the probed attributes of the sample and the face's attributes.
    pub ffc: f64,
    /// Mean attention mass on face tokens.
    pub face_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSweep {
    pub seeds: Vec<u64>,
    /// Faces used to train the denoiser and fit the attribute probe.
    pub train_faces: usize,
    pub train: TrainConfig,
    pub jobs: usize,
}

impl Default for AttentionSweep {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            train_faces: 256,
            train: TrainConfig {
                steps: 3000,
                batch: 16,
                ..TrainConfig::default()
            },
            jobs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub rows: Vec<AttentionRow>,
    pub mean_ffc_identity: f64,
    pub mean_ffc_baseline: f64,
    pub mean_mass_identity: f64,
    pub mean_mass_baseline: f64,
    /// Held-out denoising loss of each arm after training.
    pub train_loss_identity: f64,
    pub train_loss_baseline: f64,
}

impl AttentionReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("face_id,seed,arm,ffc,face_mass\n");
        for r in &self.rows {
            let arm = match r.arm {
                Arm::Identity => "identity",
                Arm::Baseline => "baseline",
            };
            let _ = writeln!(s, "{},{},{},{},{}", r.face_id, r.seed, arm, r.ffc, r.face_mass);
        }
        s
    }
}

/// Token indices whose patch lies inside the head square of `face`.
pub fn face_tokens(face: &FaceParams) -> Vec<usize> {
    let shape = super::train::pipeline_shape();
    let (bh, bw) = (shape.latent_h / shape.patch, shape.latent_w / shape.patch);
    let r = 0.30 + 0.12 * face.attrs.values()[5];
    let inside = |lo: f64, hi: f64| lo >= 0.5 - r && hi <= 0.5 + r;
    (0..bh * bw)
        .filter(|&k| {
            let (y, x) = ((k / bw) as f64, (k % bw) as f64);
            inside(y / bh as f64, (y + 1.0) / bh as f64) && inside(x / bw as f64, (x + 1.0) / bw as f64)
        })
        .collect()
}

/// Trains two denoisers on the same batches, one always given the face's
/// identity embedding and one never, then samples every test face with both
/// under the same seed.
///
/// The baseline's identity blocks receive no gradient and stay zero, so it is
/// the zero-identity reduction of the augmented block.
pub fn ablate_attention(faces: &[FaceParams], cfg: &PipelineConfig, sweep: &AttentionSweep) -> Result<AttentionReport> {
    cfg.validate()?;
    if faces.is_empty() || sweep.seeds.is_empty() {
        return Err(Error::Config("attention ablation needs faces and seeds".into()));
    }
    let root = RngStream::new(cfg.seed);
    let train_faces = crate::facegen::face_grid(sweep.train_faces.max(1), root.split(10).next_u64());
    let train_arm = |identity_dropout: f64| {
        let tc = TrainConfig {
            identity_dropout,
            ..sweep.train.clone()
        };
        train_toy_denoiser(&train_faces, cfg, &tc, &root.split(11))
    };
    let with_id = train_arm(0.0)?;
    let without_id = train_arm(1.0)?;
    let probe = AttributeProbe::fit(&FaceData::new(&train_faces, cfg.image_size)?, 1e-3)?;
    let codec = face_codec(cfg.image_size)?;
    let prompt = prompt_conditioning(TRAIN_PROMPT)?;

    let mut cells = Vec::with_capacity(faces.len() * sweep.seeds.len());
    for face_id in 0..faces.len() {
        for &seed in &sweep.seeds {
            cells.push((face_id, seed));
        }
    }
    let run_cell = |&(face_id, seed): &(usize, u64)| -> Result<[AttentionRow; 2]> {
        let face = &faces[face_id];
        let guide = face_latent(&render_face(face, cfg.image_size)?, &codec)?;
        let id = identity_embedding(&face.attrs);
        let rng = root.derive(&[12, seed]);
        let region = face_tokens(face);
        let target = face.attrs.centered();
        let arm =
            |model: &DenoiserModel<f64>, identity: Option<IdentityEmbedding<f64>>, arm: Arm| -> Result<AttentionRow> {
                let z = diffuse_latent(model, &prompt, identity.clone(), Some(&guide), cfg, &rng)?;
                let probed = probe.predict(&z)?;
                let cond = Conditioning {
                    text: prompt.clone(),
                    identity: identity.clone(),
                };
                let tokens = model.block_tokens(&guide, 1, cfg.steps, &cond)?;
                let map = attention_map(&tokens, identity.as_ref(), &model.attn)?;
                Ok(AttentionRow {
                    face_id,
                    seed,
                    arm,
                    ffc: ffc(&probed, &target)?,
                    face_mass: region_mass(&map, &region)?,
                })
            };
        Ok([
            arm(&with_id.model, Some(id), Arm::Identity)?,
            arm(&without_id.model, None, Arm::Baseline)?,
        ])
    };
    let pairs: Vec<[AttentionRow; 2]> =
        pool(sweep.jobs)?.install(|| cells.par_iter().map(run_cell).collect::<Result<_>>())?;
    let arm_mean = |a: usize, f: fn(&AttentionRow) -> f64| mean(pairs.iter().map(|p| f(&p[a])));
    let mut rows: Vec<AttentionRow> = pairs.iter().flatten().cloned().collect();
    rows.sort_by_key(|r| (r.face_id, r.seed, r.arm));
    Ok(AttentionReport {
        mean_ffc_identity: arm_mean(0, |r| r.ffc),
        mean_ffc_baseline: arm_mean(1, |r| r.ffc),
        mean_mass_identity: arm_mean(0, |r| r.face_mass),
        mean_mass_baseline: arm_mean(1, |r| r.face_mass),
        train_loss_identity: with_id.eval_final,
        train_loss_baseline: without_id.eval_final,
        rows,
    })
}
