//! Attribute extraction, attribute loss, the projection `P` that restores a
//! reference face's attributes, the composition-order check, and the cosine
//! face-consistency metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facegen::{self, render_structure, with_structure};
use crate::numerics::Tensor;

/// Normalised face parameters, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector(Vec<f64>);

impl AttributeVector {
    pub const FACE_DIM: usize = 6;
    pub const FACE_NAMES: [&'static str; 6] = [
        "eye_spacing",
        "eye_size",
        "nose_length",
        "mouth_width",
        "mouth_curvature",
        "face_radius",
    ];

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("attribute vector is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("attribute {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::vector(self.0.clone()).expect("validated values are finite")
    }

    /// Values recentred to `[-0.5, 0.5]`, the embedding used for FFC.
    pub fn centered(&self) -> Tensor<f64> {
        Tensor::vector(self.0.iter().map(|v| v - 0.5).collect()).expect("finite")
    }

    pub(crate) fn check_face(&self) -> Result<()> {
        if self.len() != Self::FACE_DIM {
            return Err(Error::Config(format!(
                "faces take {} attributes, got {}",
                Self::FACE_DIM,
                self.len()
            )));
        }
        Ok(())
    }

    pub fn distance_sq(&self, other: &Self) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape("attribute distance", &[self.len()], &[other.len()]));
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum())
    }
}

/// `F_a`: geometric measurement of the landmark structure.
pub fn extract_attributes(img: &Tensor<f64>) -> Result<AttributeVector> {
    facegen::measure(img)
}

/// `‖F_a(X) − F_a(I)‖²`
pub fn attr_loss(x_img: &Tensor<f64>, i_img: &Tensor<f64>) -> Result<f64> {
    extract_attributes(x_img)?.distance_sq(&extract_attributes(i_img)?)
}

/// `(u·v) / (‖u‖‖v‖)`
pub fn ffc(u: &Tensor<f64>, v: &Tensor<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("ffc", u.shape(), v.shape()));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    let c = u.data().iter().zip(v.data()).map(|(a, b)| a * b).sum::<f64>() / (nu * nv);
    Ok(c.clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionMode {
    /// Redraw the landmark structure at the target parameters.
    ReRender,
    /// Gradient descent on the attribute distance through render and measure.
    Optimize,
}

/// Tolerance at which [`ProjectionMode::Optimize`] stops.
pub const OPTIMIZE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub reference_attrs: AttributeVector,
    pub mode: ProjectionMode,
}

impl Projector {
    pub fn new(reference_attrs: AttributeVector, mode: ProjectionMode) -> Self {
        Self { reference_attrs, mode }
    }

    /// Projector whose reference is the attribute vector of `img`.
    pub fn for_image(img: &Tensor<f64>, mode: ProjectionMode) -> Result<Self> {
        Ok(Self::new(extract_attributes(img)?, mode))
    }

    pub fn apply(&self, x_img: &Tensor<f64>) -> Result<Tensor<f64>> {
        project(x_img, &self.reference_attrs, self)
    }
}

/// Returns `X'` with `F_a(X') = target`, keeping the colour layer of `X`.
///
/// An image that already carries the target attributes comes back unchanged.
pub fn project(x_img: &Tensor<f64>, target: &AttributeVector, p: &Projector) -> Result<Tensor<f64>> {
    if target.len() != AttributeVector::FACE_DIM {
        return Err(Error::Projection(format!(
            "target has {} attributes, faces take {}",
            target.len(),
            AttributeVector::FACE_DIM
        )));
    }
    if target.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Projection("target outside [0, 1]".into()));
    }
    let size = facegen::image_size(x_img)?;
    let current = extract_attributes(x_img)?;
    if current.distance_sq(target)? <= 1e-24 {
        return Ok(x_img.clone());
    }
    match p.mode {
        ProjectionMode::ReRender => with_structure(x_img, &render_structure(target, size)?),
        ProjectionMode::Optimize => optimize(x_img, current, target, size),
    }
}

fn optimize(x_img: &Tensor<f64>, start: AttributeVector, target: &AttributeVector, size: usize) -> Result<Tensor<f64>> {
    const H: f64 = 1e-6;
    const LR: f64 = 0.5;
    const MAX_ITERS: usize = 500;
    let loss = |theta: &[f64]| -> Result<f64> {
        let a = AttributeVector::new(theta.iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
        extract_attributes(&with_structure(x_img, &render_structure(&a, size)?)?)?.distance_sq(target)
    };
    let mut theta = start.values().to_vec();
    for _ in 0..MAX_ITERS {
        if loss(&theta)?.sqrt() <= OPTIMIZE_TOLERANCE {
            break;
        }
        let mut grad = vec![0.0; theta.len()];
        for k in 0..theta.len() {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[k] += H;
            dn[k] -= H;
            grad[k] = (loss(&up)? - loss(&dn)?) / (2.0 * H);
        }
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t = (*t - LR * g).clamp(0.0, 1.0);
        }
    }
    let d = loss(&theta)?.sqrt();
    if d > OPTIMIZE_TOLERANCE {
        return Err(Error::Projection(format!("optimisation stalled at distance {d}")));
    }
    with_structure(x_img, &render_structure(&AttributeVector::new(theta)?, size)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    /// `L_attr(P(S(I)))`
    pub loss_ps: f64,
    /// `L_attr(S(P(I)))`
    pub loss_sp: f64,
    pub holds: bool,
}

/// Compares style-then-project against project-then-style on `i_img`.
pub fn verify_composition<S>(i_img: &Tensor<f64>, style_op: S, projector: &Projector) -> Result<CompositionReport>
where
    S: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let ps = projector.apply(&style_op(i_img)?)?;
    let sp = style_op(&projector.apply(i_img)?)?;
    let loss_ps = attr_loss(&ps, i_img)?;
    let loss_sp = attr_loss(&sp, i_img)?;
    Ok(CompositionReport {
        loss_ps,
        loss_sp,
        holds: loss_ps <= loss_sp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facegen::{face_grid, graffiti_stylize, render_face, FaceParams, StyleOp};
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::vector(x.to_vec()).unwrap()
    }

    #[test]
    fn ffc_hand_cases() {
        assert!((ffc(&v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(ffc(&v(&[1.0, 0.0]), &v(&[0.0, 2.0])).unwrap(), 0.0);
        assert!(matches!(
            ffc(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])),
            Err(Error::UndefinedSimilarity)
        ));
        assert!(matches!(ffc(&v(&[1.0]), &v(&[1.0, 1.0])), Err(Error::Shape { .. })));
    }

    #[test]
    fn mouth_width_delta_gives_squared_loss() {
        let base = [0.4, 0.5, 0.6, 0.3, 0.5, 0.5];
        let mut moved = base;
        moved[3] += 0.25;
        let a = render_face(
            &FaceParams::new(AttributeVector::new(base.to_vec()).unwrap(), 0, 0.2).unwrap(),
            40,
        )
        .unwrap();
        let b = render_face(
            &FaceParams::new(AttributeVector::new(moved.to_vec()).unwrap(), 0, 0.2).unwrap(),
            40,
        )
        .unwrap();
        assert!((attr_loss(&b, &a).unwrap() - 0.0625).abs() < 1e-9);
        assert_eq!(attr_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn projection_restores_attributes_and_keeps_colour() {
        let p = &face_grid(1, 9)[0];
        let img = render_face(p, 32).unwrap();
        let styled = graffiti_stylize(&img, &StyleOp::default(), &RngStream::new(1)).unwrap();
        let proj = Projector::for_image(&img, ProjectionMode::ReRender).unwrap();
        assert_eq!(proj.apply(&img).unwrap(), img);
        let out = proj.apply(&styled).unwrap();
        assert!(attr_loss(&out, &img).unwrap() <= 1e-18);
        assert_eq!(out.data()[32 * 32..], styled.data()[32 * 32..]);
    }

    #[test]
    fn projection_rejects_bad_targets() {
        let img = render_face(&face_grid(1, 2)[0], 32).unwrap();
        let proj = Projector::for_image(&img, ProjectionMode::ReRender).unwrap();
        let short = AttributeVector::new(vec![0.5; 3]).unwrap();
        assert!(matches!(project(&img, &short, &proj), Err(Error::Projection(_))));
    }

    #[test]
    fn optimize_mode_is_within_tolerance() {
        let faces = face_grid(2, 4);
        let img = render_face(&faces[0], 32).unwrap();
        let styled = graffiti_stylize(&img, &StyleOp::default(), &RngStream::new(3)).unwrap();
        let proj = Projector::for_image(&img, ProjectionMode::Optimize).unwrap();
        let out = proj.apply(&styled).unwrap();
        assert!(attr_loss(&out, &img).unwrap().sqrt() <= OPTIMIZE_TOLERANCE);
    }

    #[test]
    fn composition_with_identity_style_is_a_tie() {
        let img = render_face(&face_grid(1, 5)[0], 32).unwrap();
        let proj = Projector::for_image(&img, ProjectionMode::ReRender).unwrap();
        let r = verify_composition(&img, |x| Ok(x.clone()), &proj).unwrap();
        assert_eq!((r.loss_ps, r.loss_sp, r.holds), (0.0, 0.0, true));
        let op = StyleOp::default();
        let rng = RngStream::new(8);
        let r = verify_composition(&img, |x| graffiti_stylize(x, &op, &rng), &proj).unwrap();
        assert!(r.holds && r.loss_ps <= 1e-18 && r.loss_sp > 0.0);
    }

    proptest! {
        #[test]
        fn ffc_invariants(xs in proptest::collection::vec(-5.0f64..5.0, 1..10), c in 0.01f64..100.0) {
            let u = v(&xs);
            prop_assume!(u.norm() > 1e-6);
            prop_assert!((ffc(&u, &u).unwrap() - 1.0).abs() <= 1e-12);
            prop_assert!((ffc(&u, &u.scale(c)).unwrap() - 1.0).abs() <= 1e-12);
            prop_assert!((ffc(&u, &u.scale(-1.0)).unwrap() + 1.0).abs() <= 1e-12);
        }

        #[test]
        fn projector_hits_reference(seed in 0u64..1000, intensity in 0.0f64..=1.0) {
            let faces = face_grid(2, seed);
            let img = render_face(&faces[0], 32).unwrap();
            let other = render_face(&faces[1], 32).unwrap();
            let op = StyleOp { intensity, ..StyleOp::default() };
            let x = graffiti_stylize(&other, &op, &RngStream::new(seed)).unwrap();
            let proj = Projector::for_image(&img, ProjectionMode::ReRender).unwrap();
            let out = extract_attributes(&proj.apply(&x).unwrap()).unwrap();
            prop_assert!(out.distance_sq(&proj.reference_attrs).unwrap().sqrt() <= 1e-9);
        }
    }
}
