//! Gram-matrix style loss, feature content loss, and their weighted sum,
//! with analytic gradients with respect to the input image.
//!
//! Images enter the extractor as `channels × positions`: a rank-3 tensor
//! `[c, h, w]` becomes `c × (h·w)`, anything else is one channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    /// `ln(1 + eᶻ)`
    Softplus,
    Linear,
}

impl Activation {
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Linear => z,
            // max(z, 0) + ln(1 + e^{−|z|}) avoids overflow
            Activation::Softplus => z.max(T::zero()) + (-z.abs()).exp().ln_1p(),
        }
    }

    fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Linear => T::one(),
            Activation::Softplus => {
                if z >= T::zero() {
                    T::one() / (T::one() + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (T::one() + e)
                }
            }
        }
    }
}

/// One fixed channel-mixing layer: `F_out = act(W·F_in + b·1ᵀ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayer<T> {
    /// `c_out × c_in`
    pub w: Tensor<T>,
    /// `c_out`
    pub b: Tensor<T>,
    pub activation: Activation,
}

/// Fixed feature network `φ`; layer `l` output is `φ_l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor<T> {
    layers: Vec<FeatureLayer<T>>,
}

/// `G = F·Fᵀ` for a `c × p` feature map. Not normalised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix<T>(pub Tensor<T>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleLossConfig {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub content_layer: usize,
}

impl Default for StyleLossConfig {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_s: 1.0,
            content_layer: 0,
        }
    }
}

impl StyleLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c >= 0.0 && self.lambda_s >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got λ_c={} λ_s={}",
                self.lambda_c, self.lambda_s
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> FeatureLayer<T> {
    pub fn new(w: Tensor<T>, b: Tensor<T>, activation: Activation) -> Result<Self> {
        let (c_out, _) = w.dims2()?;
        if b.shape() != [c_out] {
            return Err(Error::shape("feature layer bias", w.shape(), b.shape()));
        }
        Ok(Self { w, b, activation })
    }

    fn pre_activation(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut z = self.w.matmul(input)?;
        let p = z.cols();
        for (i, &bi) in self.b.data().iter().enumerate() {
            for v in &mut z.data_mut()[i * p..(i + 1) * p] {
                *v += bi;
            }
        }
        Ok(z)
    }
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(layers: Vec<FeatureLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("extractor needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].w.cols() != pair[0].w.rows() {
                return Err(Error::shape("extractor layers", pair[0].w.shape(), pair[1].w.shape()));
            }
        }
        Ok(Self { layers })
    }

    /// Single identity layer: `φ_0(x) = x`.
    pub fn identity(channels: usize) -> Self {
        Self::new(vec![FeatureLayer {
            w: Tensor::eye(channels),
            b: Tensor::zeros(&[channels]),
            activation: Activation::Linear,
        }])
        .expect("one layer")
    }

    /// Seeded softplus network with the given layer widths; weights `N(0, 1/c_in)`, biases `N(0, 0.1²)`.
    pub fn random(in_channels: usize, widths: &[usize], rng: &mut RngStream) -> Result<Self> {
        let mut c_in = in_channels;
        let mut layers = Vec::with_capacity(widths.len());
        for &c_out in widths {
            if c_in == 0 || c_out == 0 {
                return Err(Error::Config("layer widths must be positive".into()));
            }
            let std = 1.0 / (c_in as f64).sqrt();
            let w = Tensor::from_fn(&[c_out, c_in], |_| rng.normal(0.0, std));
            let b = Tensor::from_fn(&[c_out], |_| rng.normal(0.0, 0.1));
            layers.push(FeatureLayer::new(w, b, Activation::Softplus)?);
            c_in = c_out;
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[FeatureLayer<T>] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].w.cols()
    }

    /// `c × p` view of an image.
    pub fn as_features(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let c = if img.rank() == 3 { img.shape()[0] } else { 1 };
        if c != self.in_channels() {
            return Err(Error::shape("extractor input", img.shape(), &[self.in_channels()]));
        }
        img.reshape(&[c, img.len() / c])
    }

    /// Outputs of every layer.
    pub fn features(&self, img: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.forward(img)?.1)
    }

    /// Pre-activations and activations of every layer.
    #[allow(clippy::type_complexity)]
    fn forward(&self, img: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let mut h = self.as_features(img)?;
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut fs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = layer.pre_activation(&h)?;
            h = z.map(|v| layer.activation.apply(v));
            zs.push(z);
            fs.push(h.clone());
        }
        Ok((zs, fs))
    }

    /// Pulls per-layer output gradients back to the image.
    fn backward(&self, img: &Tensor<T>, zs: &[Tensor<T>], mut d_out: Vec<Tensor<T>>) -> Result<Tensor<T>> {
        let mut carry: Option<Tensor<T>> = None;
        for l in (0..self.layers.len()).rev() {
            let mut d_f = std::mem::replace(&mut d_out[l], Tensor::zeros(&[1]));
            if let Some(c) = carry.take() {
                d_f.add_assign(&c)?;
            }
            let act = self.layers[l].activation;
            let d_z = zs[l].zip_map(&d_f, "activation grad", |z, g| g * act.derivative(z))?;
            carry = Some(self.layers[l].w.transpose()?.matmul(&d_z)?);
        }
        carry.expect("at least one layer").reshape(img.shape())
    }
}

pub fn gram<T: Scalar>(features: &Tensor<T>) -> Result<GramMatrix<T>> {
    features.dims2()?;
    Ok(GramMatrix(features.matmul(&features.transpose()?)?))
}

fn check_pair<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, op: &'static str) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(op, x.shape(), y.shape()));
    }
    Ok(())
}

/// `Σ_l ‖G(φ_l(x)) − G(φ_l(s))‖²_F`, every layer weighted 1.
pub fn style_loss<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>, phi: &FeatureExtractor<T>) -> Result<T> {
    check_pair(x, s, "style_loss")?;
    let (fx, fs) = (phi.features(x)?, phi.features(s)?);
    let mut total = T::zero();
    for (a, b) in fx.iter().zip(&fs) {
        total += gram(a)?.0.sub(&gram(b)?.0)?.norm_sq();
    }
    Ok(total)
}

fn check_layer<T: Scalar>(phi: &FeatureExtractor<T>, l: usize) -> Result<()> {
    if l >= phi.num_layers() {
        return Err(Error::Config(format!(
            "content layer {l} out of range for {} layers",
            phi.num_layers()
        )));
    }
    Ok(())
}

/// `‖φ_l(x) − φ_l(c)‖²`
pub fn content_loss<T: Scalar>(x: &Tensor<T>, c_img: &Tensor<T>, phi: &FeatureExtractor<T>, l: usize) -> Result<T> {
    check_layer(phi, l)?;
    check_pair(x, c_img, "content_loss")?;
    Ok(phi.features(x)?[l].sub(&phi.features(c_img)?[l])?.norm_sq())
}

/// `λ_c·content + λ_s·style`
pub fn total_loss<T: Scalar>(
    x: &Tensor<T>,
    c_img: &Tensor<T>,
    s: &Tensor<T>,
    cfg: &StyleLossConfig,
    phi: &FeatureExtractor<T>,
) -> Result<T> {
    cfg.validate()?;
    let c = content_loss(x, c_img, phi, cfg.content_layer)?;
    let st = style_loss(x, s, phi)?;
    Ok(T::of(cfg.lambda_c) * c + T::of(cfg.lambda_s) * st)
}

/// `∂ total_loss / ∂x`.
///
/// Per layer, `∂‖FFᵀ − G_s‖²/∂F = 4(FFᵀ − G_s)F` and `∂‖F − F_c‖²/∂F = 2(F − F_c)`.
pub fn total_loss_grad<T: Scalar>(
    x: &Tensor<T>,
    c_img: &Tensor<T>,
    s: &Tensor<T>,
    cfg: &StyleLossConfig,
    phi: &FeatureExtractor<T>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    check_layer(phi, cfg.content_layer)?;
    check_pair(x, c_img, "total_loss_grad")?;
    check_pair(x, s, "total_loss_grad")?;
    let (zs, fx) = phi.forward(x)?;
    let fc = phi.features(c_img)?;
    let fs = phi.features(s)?;
    let (lc, ls) = (T::of(cfg.lambda_c), T::of(cfg.lambda_s));
    let mut d_out = Vec::with_capacity(fx.len());
    for (l, f) in fx.iter().enumerate() {
        let diff = gram(f)?.0.sub(&gram(&fs[l])?.0)?;
        let mut g = diff.matmul(f)?.scale(T::of(4.0) * ls);
        if l == cfg.content_layer {
            g.axpy(T::of(2.0) * lc, &f.sub(&fc[l])?)?;
        }
        d_out.push(g);
    }
    phi.backward(x, &zs, d_out)
}
