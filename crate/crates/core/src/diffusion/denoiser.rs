use serde::{Deserialize, Serialize};

use crate::attention::{AttentionWeights, ExtendedAttentionWeights, IdentityEmbedding};
use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, RngStream, Tensor};
use crate::scalar::Scalar;

/// Geometry of the toy denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserShape {
    pub latent_h: usize,
    pub latent_w: usize,
    /// Side of the square patch that becomes one token.
    pub patch: usize,
    /// Attention head dimension.
    pub d_head: usize,
    /// Length of the conditioning (prompt) vector.
    pub d_cond: usize,
    /// Length of the identity embedding.
    pub d_id: usize,
}

impl DenoiserShape {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.latent_h,
            self.latent_w,
            self.patch,
            self.d_head,
            self.d_cond,
            self.d_id,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("denoiser dimensions must be positive: {self:?}")));
        }
        if !self.latent_h.is_multiple_of(self.patch) || !self.latent_w.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "patch {} does not tile a {}x{} latent",
                self.patch, self.latent_h, self.latent_w
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.latent_h / self.patch) * (self.latent_w / self.patch)
    }

    /// Token width, one value per patch pixel.
    pub fn d_model(&self) -> usize {
        self.patch * self.patch
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        [self.latent_h, self.latent_w]
    }
}

impl Default for DenoiserShape {
    fn default() -> Self {
        Self {
            latent_h: 8,
            latent_w: 8,
            patch: 2,
            d_head: 4,
            d_cond: 8,
            d_id: 6,
        }
    }
}

/// Text conditioning plus the optional identity embedding of the subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning<T> {
    pub text: Tensor<T>,
    pub identity: Option<IdentityEmbedding<T>>,
}

impl<T: Scalar> Conditioning<T> {
    pub fn text(text: Tensor<T>) -> Self {
        Self { text, identity: None }
    }

    pub fn with_identity(text: Tensor<T>, id: IdentityEmbedding<T>) -> Self {
        Self {
            text,
            identity: Some(id),
        }
    }

    /// Same identity, all-zero prompt: the unconditional branch of guidance.
    pub fn unconditional(&self) -> Self {
        Self {
            text: Tensor::zeros(self.text.shape()),
            identity: self.identity.clone(),
        }
    }
}

/// Anything that predicts the injected noise of a latent at step `t` of `steps`.
pub trait EpsPredictor<T: Scalar> {
    fn predict_eps(&self, x_t: &Tensor<T>, t: usize, steps: usize, cond: &Conditioning<T>) -> Result<Tensor<T>>;
}

/// One identity-aware attention block with an affine head.
///
/// ```text
/// h   = tokens(x) + 1·(c·W_c + b_c) + (t/T)·1·w_t
/// o   = attn(h, id)                 (identity-augmented Q and K)
/// eps = untokens(o·W_o + h·W_s + B_o + (t/T)·B_t)
/// ```
///
/// `B_o` and `B_t` hold one row per token, so the head can carry a
/// position-dependent mean while attention itself stays position-agnostic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserModel<T> {
    pub shape: DenoiserShape,
    pub attn: ExtendedAttentionWeights<T>,
    pub wo: Tensor<T>,
    pub skip: Tensor<T>,
    pub bo: Tensor<T>,
    pub bt: Tensor<T>,
    pub wc: Tensor<T>,
    pub bc: Tensor<T>,
    pub wt: Tensor<T>,
}

/// Gradient of a scalar loss with respect to every model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserGrad<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub uq: Tensor<T>,
    pub uk: Tensor<T>,
    pub wo: Tensor<T>,
    pub skip: Tensor<T>,
    pub bo: Tensor<T>,
    pub bt: Tensor<T>,
    pub wc: Tensor<T>,
    pub bc: Tensor<T>,
    pub wt: Tensor<T>,
}

struct Cache<T> {
    h: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    probs: Tensor<T>,
    attn_out: Tensor<T>,
    tau: T,
}

impl<T: Scalar> DenoiserModel<T> {
    pub fn zeros(shape: DenoiserShape) -> Result<Self> {
        shape.validate()?;
        let (dm, d) = (shape.d_model(), shape.d_head);
        Ok(Self {
            shape,
            attn: ExtendedAttentionWeights::from_base(AttentionWeights::zeros(dm, d), shape.d_id),
            wo: Tensor::zeros(&[d, dm]),
            skip: Tensor::zeros(&[dm, dm]),
            bo: Tensor::zeros(&[shape.tokens(), dm]),
            bt: Tensor::zeros(&[shape.tokens(), dm]),
            wc: Tensor::zeros(&[shape.d_cond, dm]),
            bc: Tensor::zeros(&[dm]),
            wt: Tensor::zeros(&[dm]),
        })
    }

    /// Seeded initialisation; identity blocks start at zero.
    pub fn init(shape: DenoiserShape, rng: &mut RngStream) -> Result<Self> {
        let mut m = Self::zeros(shape)?;
        let (dm, d) = (shape.d_model(), shape.d_head);
        let s_in = 1.0 / (dm as f64).sqrt();
        m.attn.base = AttentionWeights::random(dm, d, s_in, rng);
        m.wo = Tensor::from_fn(&[d, dm], |_| rng.normal(0.0, 0.5 / (d as f64).sqrt()));
        m.skip = Tensor::from_fn(&[dm, dm], |_| rng.normal(0.0, 0.5 * s_in));
        m.wc = Tensor::from_fn(&[shape.d_cond, dm], |_| rng.normal(0.0, 0.1));
        Ok(m)
    }

    pub fn tokenize(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        let s = &self.shape;
        if latent.shape() != s.latent_shape() {
            return Err(Error::shape("tokenize", latent.shape(), &s.latent_shape()));
        }
        let (p, bw) = (s.patch, s.latent_w / s.patch);
        let mut out = Tensor::zeros(&[s.tokens(), s.d_model()]);
        for y in 0..s.latent_h {
            for x in 0..s.latent_w {
                let tok = (y / p) * bw + x / p;
                let feat = (y % p) * p + x % p;
                out.set(tok, feat, latent.at(y, x));
            }
        }
        Ok(out)
    }

    pub fn untokenize(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let s = &self.shape;
        if tokens.shape() != [s.tokens(), s.d_model()] {
            return Err(Error::shape("untokenize", tokens.shape(), &[s.tokens(), s.d_model()]));
        }
        let (p, bw) = (s.patch, s.latent_w / s.patch);
        let mut out = Tensor::zeros(&s.latent_shape());
        for y in 0..s.latent_h {
            for x in 0..s.latent_w {
                out.set(y, x, tokens.at((y / p) * bw + x / p, (y % p) * p + x % p));
            }
        }
        Ok(out)
    }

    fn embed(&self, x_t: &Tensor<T>, tau: T, cond: &Conditioning<T>) -> Result<Tensor<T>> {
        if cond.text.len() != self.shape.d_cond {
            return Err(Error::shape("conditioning", cond.text.shape(), &[self.shape.d_cond]));
        }
        let mut bias = cond.text.vecmat(&self.wc)?.add(&self.bc)?;
        bias.axpy(tau, &self.wt)?;
        self.tokenize(x_t)?.add_row_broadcast(&bias)
    }

    /// Inputs to the attention block, exposed for attention-map export.
    pub fn block_tokens(&self, x_t: &Tensor<T>, t: usize, steps: usize, cond: &Conditioning<T>) -> Result<Tensor<T>> {
        self.embed(x_t, tau(t, steps), cond)
    }

    fn forward(&self, x_t: &Tensor<T>, tau: T, cond: &Conditioning<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let h = self.embed(x_t, tau, cond)?;
        let w = &self.attn;
        let mut q = h.matmul(&w.base.wq)?;
        let mut k = h.matmul(&w.base.wk)?;
        if let Some(id) = &cond.identity {
            if id.dim() != w.d_id() {
                return Err(Error::shape("identity embedding", id.0.shape(), w.uq.shape()));
            }
            q = q.add_row_broadcast(&id.0.vecmat(&w.uq)?)?;
            k = k.add_row_broadcast(&id.0.vecmat(&w.uk)?)?;
        }
        let v = h.matmul(&w.base.wv)?;
        let inv = T::one() / T::of(self.shape.d_head as f64).sqrt();
        let probs = softmax_rows(&q.matmul(&k.transpose()?)?.scale(inv))?;
        let attn_out = probs.matmul(&v)?;
        let mut out = attn_out.matmul(&self.wo)?.add(&h.matmul(&self.skip)?)?.add(&self.bo)?;
        out.axpy(tau, &self.bt)?;
        let cache = Cache {
            h,
            q,
            k,
            v,
            probs,
            attn_out,
            tau,
        };
        Ok((out, cache))
    }

    /// Backpropagates `d_out` (gradient w.r.t. the predicted noise latent).
    fn backward(&self, d_eps: &Tensor<T>, cond: &Conditioning<T>, c: &Cache<T>) -> Result<DenoiserGrad<T>> {
        let d_out = self.tokenize(d_eps)?;
        let w = &self.attn;
        let inv = T::one() / T::of(self.shape.d_head as f64).sqrt();

        let g_wo = c.attn_out.transpose()?.matmul(&d_out)?;
        let g_bo = d_out.clone();
        let g_bt = d_out.scale(c.tau);
        let g_skip = c.h.transpose()?.matmul(&d_out)?;
        let mut d_h = d_out.matmul(&self.skip.transpose()?)?;
        let d_o = d_out.matmul(&self.wo.transpose()?)?;

        let d_p = d_o.matmul(&c.v.transpose()?)?;
        let d_v = c.probs.transpose()?.matmul(&d_o)?;
        // softmax backward, row by row
        let (n, m) = c.probs.dims2()?;
        let mut d_s = Tensor::zeros(&[n, m]);
        for i in 0..n {
            let dot: T = (0..m).map(|j| d_p.at(i, j) * c.probs.at(i, j)).sum();
            for j in 0..m {
                d_s.set(i, j, c.probs.at(i, j) * (d_p.at(i, j) - dot) * inv);
            }
        }
        let d_q = d_s.matmul(&c.k)?;
        let d_k = d_s.transpose()?.matmul(&c.q)?;

        let ht = c.h.transpose()?;
        let g_wq = ht.matmul(&d_q)?;
        let g_wk = ht.matmul(&d_k)?;
        let g_wv = ht.matmul(&d_v)?;
        let (g_uq, g_uk) = match &cond.identity {
            Some(id) => (
                Tensor::outer(&id.0, &d_q.col_sums()?),
                Tensor::outer(&id.0, &d_k.col_sums()?),
            ),
            None => (Tensor::zeros(w.uq.shape()), Tensor::zeros(w.uk.shape())),
        };
        d_h.add_assign(&d_q.matmul(&w.base.wq.transpose()?)?)?;
        d_h.add_assign(&d_k.matmul(&w.base.wk.transpose()?)?)?;
        d_h.add_assign(&d_v.matmul(&w.base.wv.transpose()?)?)?;

        let d_bias = d_h.col_sums()?;
        Ok(DenoiserGrad {
            wq: g_wq,
            wk: g_wk,
            wv: g_wv,
            uq: g_uq,
            uk: g_uk,
            wo: g_wo,
            skip: g_skip,
            bo: g_bo,
            bt: g_bt,
            wc: Tensor::outer(&cond.text, &d_bias),
            bc: d_bias.clone(),
            wt: d_bias.scale(c.tau),
        })
    }

    /// Squared ε-prediction error `‖ε̂ − target‖²` and its parameter gradient.
    pub fn loss_and_grad(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        steps: usize,
        cond: &Conditioning<T>,
        target: &Tensor<T>,
    ) -> Result<(T, DenoiserGrad<T>)> {
        let (out, cache) = self.forward(x_t, tau(t, steps), cond)?;
        let eps = self.untokenize(&out)?;
        let resid = eps.sub(target)?;
        let loss = resid.norm_sq();
        let grad = self.backward(&resid.scale(T::of(2.0)), cond, &cache)?;
        Ok((loss, grad))
    }

    /// Flattened parameters, in the order used by [`DenoiserGrad::tensors`].
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.attn.base.wq,
            &self.attn.base.wk,
            &self.attn.base.wv,
            &self.attn.uq,
            &self.attn.uk,
            &self.wo,
            &self.skip,
            &self.bo,
            &self.bt,
            &self.wc,
            &self.bc,
            &self.wt,
        ]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.attn.base.wq,
            &mut self.attn.base.wk,
            &mut self.attn.base.wv,
            &mut self.attn.uq,
            &mut self.attn.uk,
            &mut self.wo,
            &mut self.skip,
            &mut self.bo,
            &mut self.bt,
            &mut self.wc,
            &mut self.bc,
            &mut self.wt,
        ]
    }
}

impl<T: Scalar> DenoiserGrad<T> {
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.wq, &self.wk, &self.wv, &self.uq, &self.uk, &self.wo, &self.skip, &self.bo, &self.bt, &self.wc,
            &self.bc, &self.wt,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.uq,
            &mut self.uk,
            &mut self.wo,
            &mut self.skip,
            &mut self.bo,
            &mut self.bt,
            &mut self.wc,
            &mut self.bc,
            &mut self.wt,
        ]
    }

    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for a in self.tensors_mut() {
            *a = a.scale(s);
        }
    }
}

fn tau<T: Scalar>(t: usize, steps: usize) -> T {
    T::of(t as f64 / steps.max(1) as f64)
}

impl<T: Scalar> EpsPredictor<T> for DenoiserModel<T> {
    fn predict_eps(&self, x_t: &Tensor<T>, t: usize, steps: usize, cond: &Conditioning<T>) -> Result<Tensor<T>> {
        let (out, _) = self.forward(x_t, tau(t, steps), cond)?;
        self.untokenize(&out)
    }
}

/// Classifier-free guidance: `ε̂_u + g·(ε̂_c − ε̂_u)` with an all-zero prompt as `ε̂_u`.
#[derive(Clone, Copy, Debug)]
pub struct Guided<'a, M> {
    pub model: &'a M,
    pub scale: f64,
}

impl<T: Scalar, M: EpsPredictor<T>> EpsPredictor<T> for Guided<'_, M> {
    fn predict_eps(&self, x_t: &Tensor<T>, t: usize, steps: usize, cond: &Conditioning<T>) -> Result<Tensor<T>> {
        let cond_eps = self.model.predict_eps(x_t, t, steps, cond)?;
        if self.scale == 1.0 {
            return Ok(cond_eps);
        }
        let uncond = self.model.predict_eps(x_t, t, steps, &cond.unconditional())?;
        let mut out = uncond.clone();
        out.axpy(T::of(self.scale), &cond_eps.sub(&uncond)?)?;
        Ok(out)
    }
}
