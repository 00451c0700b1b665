//! Low-rank adaptation of attention weights: `W̃ = W + α·A·B`.
//!
//! The scale is applied as `α` itself, not `α / r`. `B` starts at zero so a
//! freshly initialised adapter leaves the base model unchanged.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionWeights, ExtendedAttentionWeights};
use crate::diffusion::{Conditioning, DenoiserModel};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::scalar::Scalar;

/// Desk-scale default rank.
pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_ALPHA: f64 = 8.0;
/// Full-scale settings kept for reference; they exceed the toy matrix sizes.
pub const FULL_SCALE_RANK: usize = 64;
pub const FULL_SCALE_ALPHA: f64 = 128.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter<T> {
    /// `d × r`
    pub a: Tensor<T>,
    /// `r × k`
    pub b: Tensor<T>,
    pub alpha: T,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(a: Tensor<T>, b: Tensor<T>, alpha: T) -> Result<Self> {
        let (d, r) = a.dims2()?;
        let (r2, k) = b.dims2()?;
        if r != r2 {
            return Err(Error::shape("lora factors", a.shape(), b.shape()));
        }
        if r > d.min(k) {
            return Err(Error::Config(format!("rank {r} exceeds min({d}, {k})")));
        }
        if !(alpha > T::zero()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { a, b, alpha })
    }

    /// `A ~ N(0, std²)`, `B = 0`.
    pub fn init(d: usize, k: usize, rank: usize, alpha: T, std: f64, rng: &mut RngStream) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        let a = Tensor::from_fn(&[d, rank], |_| rng.normal(0.0, std));
        Self::new(a, Tensor::zeros(&[rank, k]), alpha)
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// Target matrix shape `(d, k)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }

    /// `α·A·B`
    pub fn delta(&self) -> Result<Tensor<T>> {
        Ok(self.a.matmul(&self.b)?.scale(self.alpha))
    }
}

/// `W + α·A·B`.
pub fn merge<T: Scalar>(w: &Tensor<T>, ad: &LoraAdapter<T>) -> Result<Tensor<T>> {
    let (d, k) = w.dims2()?;
    if ad.dims() != (d, k) {
        return Err(Error::shape("lora merge", w.shape(), &[ad.dims().0, ad.dims().1]));
    }
    w.add(&ad.delta()?)
}

/// Which attention matrix an adapter modifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Query,
    Key,
    Value,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Query, Target::Key, Target::Value];

    pub fn tag(self) -> &'static str {
        match self {
            Target::Query => "q",
            Target::Key => "k",
            Target::Value => "v",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(Target::Query),
            "k" => Ok(Target::Key),
            "v" => Ok(Target::Value),
            other => Err(Error::Parse(format!("unknown adapter target {other:?}"))),
        }
    }
}

/// At most one adapter per attention matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet<T> {
    pub q: Option<LoraAdapter<T>>,
    pub k: Option<LoraAdapter<T>>,
    pub v: Option<LoraAdapter<T>>,
}

impl<T> Default for AdapterSet<T> {
    fn default() -> Self {
        Self {
            q: None,
            k: None,
            v: None,
        }
    }
}

impl<T: Scalar> AdapterSet<T> {
    pub fn get(&self, t: Target) -> Option<&LoraAdapter<T>> {
        match t {
            Target::Query => self.q.as_ref(),
            Target::Key => self.k.as_ref(),
            Target::Value => self.v.as_ref(),
        }
    }

    pub fn slot(&mut self, t: Target) -> &mut Option<LoraAdapter<T>> {
        match t {
            Target::Query => &mut self.q,
            Target::Key => &mut self.k,
            Target::Value => &mut self.v,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_none() && self.k.is_none() && self.v.is_none()
    }

    /// Fresh adapters on every attention matrix of a `d_model × d` block.
    pub fn init_all(d_model: usize, d: usize, cfg: &LoraConfig, rng: &mut RngStream) -> Result<Self> {
        let mut set = Self::default();
        for t in Target::ALL {
            *set.slot(t) = Some(LoraAdapter::init(
                d_model,
                d,
                cfg.rank,
                T::of(cfg.alpha),
                cfg.init_std,
                rng,
            )?);
        }
        Ok(set)
    }
}

/// Attention weight containers that adapters can be merged into.
pub trait LoraTarget<T: Scalar>: Sized {
    fn with_adapters(&self, adapters: &AdapterSet<T>) -> Result<Self>;
}

fn merge_opt<T: Scalar>(w: &Tensor<T>, ad: Option<&LoraAdapter<T>>) -> Result<Tensor<T>> {
    match ad {
        Some(ad) => merge(w, ad),
        None => Ok(w.clone()),
    }
}

impl<T: Scalar> LoraTarget<T> for AttentionWeights<T> {
    fn with_adapters(&self, ads: &AdapterSet<T>) -> Result<Self> {
        Ok(Self {
            wq: merge_opt(&self.wq, ads.q.as_ref())?,
            wk: merge_opt(&self.wk, ads.k.as_ref())?,
            wv: merge_opt(&self.wv, ads.v.as_ref())?,
        })
    }
}

impl<T: Scalar> LoraTarget<T> for ExtendedAttentionWeights<T> {
    fn with_adapters(&self, ads: &AdapterSet<T>) -> Result<Self> {
        Ok(Self {
            base: self.base.with_adapters(ads)?,
            uq: self.uq.clone(),
            uk: self.uk.clone(),
        })
    }
}

/// Merges each adapter into its matrix; matrices without an adapter are copied unchanged.
pub fn apply_to_attention<T: Scalar, W: LoraTarget<T>>(w: &W, adapters: &AdapterSet<T>) -> Result<W> {
    w.with_adapters(adapters)
}

/// Denoiser with adapters merged into its attention block.
pub fn adapted_model<T: Scalar>(model: &DenoiserModel<T>, adapters: &AdapterSet<T>) -> Result<DenoiserModel<T>> {
    let mut m = model.clone();
    m.attn = apply_to_attention(&model.attn, adapters)?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub lr: f64,
    pub steps: usize,
    /// Standard deviation of the initial `A` entries.
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            lr: 1e-3,
            steps: 200,
            init_std: 0.05,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// One supervised denoising example.
#[derive(Clone, Debug)]
pub struct DenoiseSample<T> {
    pub input: Tensor<T>,
    pub t: usize,
    pub steps: usize,
    pub cond: Conditioning<T>,
    pub target: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LoraTraining<T> {
    pub adapters: AdapterSet<T>,
    /// Mean loss before each update, followed by the final loss (`steps + 1` values).
    pub losses: Vec<T>,
}

/// Mean squared prediction error of `model` over `data` and its gradient.
fn batch_loss<T: Scalar>(
    model: &DenoiserModel<T>,
    data: &[DenoiseSample<T>],
) -> Result<(T, crate::diffusion::DenoiserGrad<T>)> {
    let n = T::of(data.len() as f64);
    let mut total = T::zero();
    let mut grad: Option<crate::diffusion::DenoiserGrad<T>> = None;
    for s in data {
        let (l, g) = model.loss_and_grad(&s.input, s.t, s.steps, &s.cond, &s.target)?;
        total += l;
        match grad.as_mut() {
            Some(acc) => acc.accumulate(&g)?,
            None => grad = Some(g),
        }
    }
    let mut grad = grad.expect("non-empty batch");
    grad.scale(T::one() / n);
    Ok((total / n, grad))
}

/// Gradient descent on the adapters only; the base model is never modified.
///
/// Gradients reach `A` and `B` through the merged weight:
/// `∂L/∂A = α·(∂L/∂W̃)·Bᵀ`, `∂L/∂B = α·Aᵀ·(∂L/∂W̃)`.
pub fn train_lora<T: Scalar>(
    model: &DenoiserModel<T>,
    data: &[DenoiseSample<T>],
    cfg: &LoraConfig,
    rng: &mut RngStream,
) -> Result<LoraTraining<T>> {
    cfg.validate()?;
    if data.is_empty() && cfg.steps > 0 {
        return Err(Error::Config("train_lora needs data when steps > 0".into()));
    }
    let mut adapters = AdapterSet::init_all(model.attn.base.d_model(), model.attn.base.d(), cfg, rng)?;
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let lr = T::of(cfg.lr);
    for _ in 0..cfg.steps {
        let merged = adapted_model(model, &adapters)?;
        let (loss, grad) = batch_loss(&merged, data)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss became {loss}")));
        }
        losses.push(loss);
        for (t, g_w) in [
            (Target::Query, &grad.wq),
            (Target::Key, &grad.wk),
            (Target::Value, &grad.wv),
        ] {
            let ad = adapters.slot(t).as_mut().expect("all targets initialised");
            let g_a = g_w.matmul(&ad.b.transpose()?)?.scale(ad.alpha);
            let g_b = ad.a.transpose()?.matmul(g_w)?.scale(ad.alpha);
            ad.a.axpy(-lr, &g_a)?;
            ad.b.axpy(-lr, &g_b)?;
        }
    }
    if !data.is_empty() {
        losses.push(batch_loss(&adapted_model(model, &adapters)?, data)?.0);
    }
    Ok(LoraTraining { adapters, losses })
}

const HEADER: &str = "lora-adapters,1";

/// Writes adapters as line-oriented CSV:
///
/// ```text
/// lora-adapters,1
/// target,q
/// alpha,8
/// A,<d>,<r>
/// <r comma-separated values>   (d lines)
/// B,<r>,<k>
/// <k comma-separated values>   (r lines)
/// ```
///
/// Blocks repeat per target in `q`, `k`, `v` order; absent targets are omitted.
pub fn write_adapters<W: Write>(set: &AdapterSet<f64>, mut out: W) -> Result<()> {
    writeln!(out, "{HEADER}")?;
    for t in Target::ALL {
        let Some(ad) = set.get(t) else { continue };
        writeln!(out, "target,{}", t.tag())?;
        writeln!(out, "alpha,{}", ad.alpha)?;
        for (name, m) in [("A", &ad.a), ("B", &ad.b)] {
            writeln!(out, "{name},{},{}", m.rows(), m.cols())?;
            for i in 0..m.rows() {
                let line: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", line.join(","))?;
            }
        }
    }
    Ok(())
}

pub fn read_adapters<R: BufRead>(input: R) -> Result<AdapterSet<f64>> {
    let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
    let mut it = lines.iter().map(|l| l.trim()).filter(|l| !l.is_empty());
    if it.next() != Some(HEADER) {
        return Err(Error::Parse(format!("missing {HEADER:?} header")));
    }
    let mut set = AdapterSet::default();
    let field = |line: Option<&str>, key: &str| -> Result<Vec<String>> {
        let line = line.ok_or_else(|| Error::Parse(format!("expected {key:?} line")))?;
        let mut parts = line.split(',').map(str::to_string);
        if parts.next().as_deref() != Some(key) {
            return Err(Error::Parse(format!("expected {key:?}, got {line:?}")));
        }
        Ok(parts.collect())
    };
    let num = |s: &str| -> Result<f64> { s.trim().parse().map_err(|_| Error::Parse(format!("bad number {s:?}"))) };
    let dim = |s: &str| -> Result<usize> {
        s.trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad dimension {s:?}")))
    };
    while let Some(line) = it.next() {
        let target = Target::parse(&field(Some(line), "target")?.concat())?;
        let alpha = num(&field(it.next(), "alpha")?.concat())?;
        let mut mats = Vec::with_capacity(2);
        for key in ["A", "B"] {
            let d = field(it.next(), key)?;
            if d.len() != 2 {
                return Err(Error::Parse(format!("{key} header needs rows,cols")));
            }
            let (r, c) = (dim(&d[0])?, dim(&d[1])?);
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r {
                let row = it.next().ok_or_else(|| Error::Parse(format!("{key} is truncated")))?;
                let vals = row.split(',').map(num).collect::<Result<Vec<_>>>()?;
                if vals.len() != c {
                    return Err(Error::Parse(format!(
                        "{key} row has {} values, expected {c}",
                        vals.len()
                    )));
                }
                data.extend(vals);
            }
            mats.push(Tensor::new(vec![r, c], data)?);
        }
        let b = mats.pop().expect("two matrices");
        let a = mats.pop().expect("two matrices");
        let slot = set.slot(target);
        if slot.is_some() {
            return Err(Error::Parse(format!("duplicate target {}", target.tag())));
        }
        *slot = Some(LoraAdapter::new(a, b, alpha)?);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserShape;
    use crate::numerics::gaussian;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_a_leaves_weights_bitwise() {
        let w = gaussian(&mut RngStream::new(1), &[3, 4]);
        let ad = LoraAdapter::new(Tensor::zeros(&[3, 2]), gaussian(&mut RngStream::new(2), &[2, 4]), 3.0).unwrap();
        assert_eq!(merge(&w, &ad).unwrap(), w);
    }

    #[test]
    fn hand_outer_product() {
        let w = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let ad = LoraAdapter::new(t(&[&[1.0], &[0.0]]), t(&[&[0.0, 1.0]]), 2.0).unwrap();
        assert_eq!(merge(&w, &ad).unwrap(), t(&[&[1.0, 4.0], &[3.0, 4.0]]));
    }

    #[test]
    fn constructor_checks() {
        assert!(matches!(
            LoraAdapter::new(Tensor::<f64>::zeros(&[2, 3]), Tensor::zeros(&[3, 2]), 1.0),
            Err(Error::Config(_))
        ));
        assert!(LoraAdapter::new(Tensor::<f64>::zeros(&[2, 1]), Tensor::zeros(&[1, 2]), 0.0).is_err());
        assert!(matches!(
            LoraAdapter::new(Tensor::<f64>::zeros(&[2, 1]), Tensor::zeros(&[2, 2]), 1.0),
            Err(Error::Shape { .. })
        ));
        let ad = LoraAdapter::new(Tensor::<f64>::zeros(&[2, 1]), Tensor::zeros(&[1, 2]), 1.0).unwrap();
        assert!(matches!(merge(&Tensor::zeros(&[3, 2]), &ad), Err(Error::Shape { .. })));
    }

    #[test]
    fn full_scale_config_is_valid() {
        let cfg = LoraConfig {
            rank: FULL_SCALE_RANK,
            alpha: FULL_SCALE_ALPHA,
            ..LoraConfig::default()
        };
        cfg.validate().unwrap();
        assert!(LoraConfig {
            lr: 0.0,
            ..LoraConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn apply_touches_only_targeted_matrices() {
        let mut rng = RngStream::new(3);
        let w = AttentionWeights::<f64>::random(4, 3, 1.0, &mut rng);
        assert_eq!(apply_to_attention(&w, &AdapterSet::default()).unwrap(), w);
        let ad = LoraAdapter::new(gaussian(&mut rng, &[4, 2]), gaussian(&mut rng, &[2, 3]), 1.5).unwrap();
        let set = AdapterSet {
            q: Some(ad.clone()),
            ..AdapterSet::default()
        };
        let out = apply_to_attention(&w, &set).unwrap();
        assert_eq!(out.wk, w.wk);
        assert_eq!(out.wv, w.wv);
        assert_eq!(out.wq, merge(&w.wq, &ad).unwrap());
        let ext = ExtendedAttentionWeights::from_base(w.clone(), 2);
        let ext_out = apply_to_attention(&ext, &set).unwrap();
        assert_eq!(ext_out.base, out);
        assert_eq!(ext_out.uq, ext.uq);
    }

    fn toy_data(seed: u64, model: &DenoiserModel<f64>) -> Vec<DenoiseSample<f64>> {
        let mut rng = RngStream::new(seed);
        let shape = model.shape.latent_shape();
        // fixed linear target: a transpose-and-scale map of the input
        (0..8)
            .map(|_| {
                let input: Tensor<f64> = gaussian(&mut rng, &shape);
                let target = input.transpose().unwrap().scale(0.5);
                DenoiseSample {
                    input,
                    t: 50,
                    steps: 100,
                    cond: Conditioning::text(gaussian(&mut rng, &[model.shape.d_cond])),
                    target,
                }
            })
            .collect()
    }

    #[test]
    fn zero_steps_returns_initial_adapters() {
        let model = DenoiserModel::init(DenoiserShape::default(), &mut RngStream::new(1)).unwrap();
        let data = toy_data(2, &model);
        let cfg = LoraConfig {
            steps: 0,
            ..LoraConfig::default()
        };
        let out = train_lora(&model, &data, &cfg, &mut RngStream::new(3)).unwrap();
        for ad in [&out.adapters.q, &out.adapters.k, &out.adapters.v] {
            assert!(ad.as_ref().unwrap().b.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(adapted_model(&model, &out.adapters).unwrap(), model);
        assert!(matches!(
            train_lora(&model, &[], &LoraConfig::default(), &mut RngStream::new(3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn training_reduces_loss_and_freezes_base() {
        let model = DenoiserModel::init(DenoiserShape::default(), &mut RngStream::new(4)).unwrap();
        let frozen = model.clone();
        let data = toy_data(5, &model);
        let cfg = LoraConfig {
            rank: 2,
            ..LoraConfig::default()
        };
        let out = train_lora(&model, &data, &cfg, &mut RngStream::new(6)).unwrap();
        assert_eq!(model, frozen);
        assert_eq!(out.losses.len(), 201);
        assert!(out.losses[200] < out.losses[0]);
    }

    #[test]
    fn adapter_file_round_trip() {
        let mut rng = RngStream::new(8);
        let set = AdapterSet {
            q: Some(LoraAdapter::new(gaussian(&mut rng, &[4, 2]), gaussian(&mut rng, &[2, 3]), 8.0).unwrap()),
            k: None,
            v: Some(LoraAdapter::new(gaussian(&mut rng, &[4, 1]), gaussian(&mut rng, &[1, 3]), 0.5).unwrap()),
        };
        let mut buf = Vec::new();
        write_adapters(&set, &mut buf).unwrap();
        assert_eq!(read_adapters(&buf[..]).unwrap(), set);
        assert!(read_adapters("nonsense\n".as_bytes()).is_err());
        let truncated = String::from_utf8(buf)
            .unwrap()
            .lines()
            .take(5)
            .collect::<Vec<_>>()
            .join("\n");
        assert!(read_adapters(truncated.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn merge_is_exact_and_low_rank(seed in 0u64..10_000, rank in 1usize..4, alpha in 0.1f64..10.0) {
            let mut rng = RngStream::new(seed);
            let (d, k) = (6, 5);
            let w = gaussian(&mut rng, &[d, k]);
            let ad = LoraAdapter::new(gaussian(&mut rng, &[d, rank]), gaussian(&mut rng, &[rank, k]), alpha).unwrap();
            let delta = merge(&w, &ad).unwrap().sub(&w).unwrap();
            let expect = ad.a.matmul(&ad.b).unwrap().scale(alpha);
            prop_assert!(delta.sub(&expect).unwrap().norm() <= 1e-12 * expect.norm().max(1.0));
            let sv = nalgebra::DMatrix::from_row_slice(d, k, delta.data()).singular_values();
            let mut sv: Vec<f64> = sv.iter().copied().collect();
            sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assert!(sv[rank..].iter().all(|&s| s <= 1e-9 * sv[0]));
        }
    }
}
