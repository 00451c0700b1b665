use crate::diffusion::denoiser::{Conditioning, EpsPredictor};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{gaussian, RngStream, Tensor};
use crate::scalar::Scalar;

/// Default number of early reverse steps that blend toward the guide.
pub const DEFAULT_WINDOW: usize = 25;
/// Default blend weight toward the noised guide inside the window.
pub const DEFAULT_SUBJECT_GUIDANCE: f64 = 0.95;

/// One Markov noising step: `√(1−β_t)·x + √β_t·ε`.
pub fn forward_step<T: Scalar>(
    x_prev: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    let beta = sched.beta(t);
    let eps = gaussian::<T>(rng, x_prev.shape());
    let mut out = x_prev.scale((T::one() - beta).sqrt());
    out.axpy(beta.sqrt(), &eps)?;
    Ok(out)
}

/// Closed-form marginal with explicit noise: `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_marginal_with<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let mut out = x0.scale(ab.sqrt());
    out.axpy((T::one() - ab).sqrt(), eps)?;
    Ok(out)
}

/// Draws `x_t ~ q(x_t | x_0)` directly.
pub fn forward_marginal<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    let eps = gaussian::<T>(rng, x0.shape());
    forward_marginal_with(x0, t, sched, &eps)
}

/// Posterior mean from a noise prediction: `(x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`.
pub fn reverse_mean<T: Scalar>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    let one_minus_ab = T::one() - sched.alpha_bar(t);
    let coef = if one_minus_ab > T::zero() {
        sched.beta(t) / one_minus_ab.sqrt()
    } else {
        T::zero()
    };
    let mut mean = x_t.clone();
    mean.axpy(-coef, eps_hat)?;
    Ok(mean.scale(T::one() / sched.alpha(t).sqrt()))
}

/// One ancestral step `x_t → x_{t−1}` with fixed variance `σ_t² = β_t`.
/// No noise is added at `t = 1`.
pub fn reverse_step<T: Scalar, M: EpsPredictor<T> + ?Sized>(
    x_t: &Tensor<T>,
    t: usize,
    cond: &Conditioning<T>,
    model: &M,
    sched: &NoiseSchedule<T>,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    let eps_hat = model.predict_eps(x_t, t, sched.steps(), cond)?;
    if eps_hat.shape() != x_t.shape() {
        return Err(Error::shape("reverse_step", x_t.shape(), eps_hat.shape()));
    }
    let mut out = reverse_mean(x_t, &eps_hat, t, sched)?;
    if t > 1 {
        let z = gaussian::<T>(rng, x_t.shape());
        out.axpy(sched.beta(t).sqrt(), &z)?;
    }
    Ok(out)
}

/// Latent composition over the first reverse steps.
#[derive(Clone, Copy, Debug)]
pub struct Composition<'a, T> {
    /// Number of initial reverse steps (from `t = T` downward) that blend.
    pub window: usize,
    pub guide: Option<&'a Tensor<T>>,
    /// Blend weight `λ` toward the noised guide.
    pub subject_guidance: f64,
}

impl<T> Composition<'_, T> {
    pub fn none() -> Self {
        Self {
            window: 0,
            guide: None,
            subject_guidance: DEFAULT_SUBJECT_GUIDANCE,
        }
    }
}

/// Ancestral sampling from `t = T` down to `1`.
///
/// Inside the composition window the current latent is replaced by
/// `(1−λ)·x_t + λ·guide_t` before the reverse step, where `guide_t` is the
/// guide noised to step `t`. A window of zero never touches the guide.
///
/// Randomness is split into three child streams (initial noise, reverse-step
/// noise, guide noise) so that enabling composition does not shift the draws
/// of the reverse chain.
pub fn sample<T: Scalar, M: EpsPredictor<T> + ?Sized>(
    model: &M,
    cond: &Conditioning<T>,
    sched: &NoiseSchedule<T>,
    shape: &[usize],
    init: Option<&Tensor<T>>,
    comp: &Composition<T>,
    rng: &RngStream,
) -> Result<Tensor<T>> {
    let steps = sched.steps();
    if comp.window > steps {
        return Err(Error::Config(format!(
            "composition window {} exceeds {steps} steps",
            comp.window
        )));
    }
    if !(0.0..=1.0).contains(&comp.subject_guidance) {
        return Err(Error::Config(format!(
            "subject guidance {} outside [0, 1]",
            comp.subject_guidance
        )));
    }
    let guide = if comp.window > 0 {
        let g = comp
            .guide
            .ok_or_else(|| Error::Config("a composition window needs a guide latent".into()))?;
        if g.shape() != shape {
            return Err(Error::shape("composition guide", g.shape(), shape));
        }
        Some(g)
    } else {
        None
    };
    let mut x = match init {
        Some(x) if x.shape() != shape => return Err(Error::shape("sample init", x.shape(), shape)),
        Some(x) => x.clone(),
        None => gaussian(&mut rng.split(0), shape),
    };
    let mut step_rng = rng.split(1);
    let mut guide_rng = rng.split(2);
    let lambda = T::of(comp.subject_guidance);
    for (i, t) in (1..=steps).rev().enumerate() {
        if let Some(g) = guide.filter(|_| i < comp.window) {
            let g_t = forward_marginal(g, t, sched, &mut guide_rng)?;
            x = x.scale(T::one() - lambda);
            x.axpy(lambda, &g_t)?;
        }
        x = reverse_step(&x, t, cond, model, sched, &mut step_rng)?;
    }
    Ok(x)
}
