//! Toy graffiti style operator.
//!
//! Geometry: each attribute moves by `intensity · 0.12 · n` (clamped to
//! `[0, 1]`), with `n` drawn from a stream keyed by the caller's stream and a
//! hash of the input image. The draw does not depend on `intensity`, so the
//! attribute drift grows monotonically with it.
//!
//! Colour: contrast warp, then edge darkening, then palette quantisation,
//! each blended with its input by `intensity`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::{image_size, measure, render_structure};
use crate::error::{Error, Result};
use crate::identity::AttributeVector;
use crate::numerics::{RngStream, Tensor};

pub const DEFAULT_INTENSITY: f64 = 0.7;
pub const JITTER_SCALE: f64 = 0.12;

pub const GRAFFITI_PALETTE: [[f64; 3]; 6] = [
    [0.93, 0.11, 0.55],
    [0.05, 0.75, 0.85],
    [0.98, 0.86, 0.10],
    [0.98, 0.45, 0.08],
    [0.08, 0.06, 0.10],
    [0.97, 0.97, 0.95],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleOp {
    pub intensity: f64,
    pub palette: Vec<[f64; 3]>,
    pub edge_gain: f64,
}

impl Default for StyleOp {
    fn default() -> Self {
        Self {
            intensity: DEFAULT_INTENSITY,
            palette: GRAFFITI_PALETTE.to_vec(),
            edge_gain: 1.5,
        }
    }
}

impl StyleOp {
    pub fn with_intensity(intensity: f64) -> Self {
        Self {
            intensity,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::Config(format!("intensity {} outside [0, 1]", self.intensity)));
        }
        if !(self.edge_gain >= 0.0 && self.edge_gain.is_finite()) {
            return Err(Error::Config(format!("edge gain {} must be >= 0", self.edge_gain)));
        }
        if self.palette.is_empty() {
            return Err(Error::Config("style palette is empty".into()));
        }
        if self.palette.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("palette colours must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Index of the palette colour closest to `rgb`; ties go to the lower index.
    pub fn nearest(&self, rgb: [f64; 3]) -> usize {
        let d = |c: &[f64; 3]| (0..3).map(|k| (c[k] - rgb[k]).powi(2)).sum::<f64>();
        let mut best = 0;
        for (i, c) in self.palette.iter().enumerate().skip(1) {
            if d(c) < d(&self.palette[best]) {
                best = i;
            }
        }
        best
    }
}

/// SHA-256 of the raw sample bits, folded to 64 bits.
pub fn image_hash(img: &Tensor<f64>) -> u64 {
    let mut h = Sha256::new();
    for d in img.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in img.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}

fn smoothstep(c: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    c * c * (3.0 - 2.0 * c)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Attributes after the geometric jitter of `op` on `img`.
pub fn jittered_attributes(img: &Tensor<f64>, op: &StyleOp, rng: &RngStream) -> Result<AttributeVector> {
    let a = measure(img)?;
    let mut stream = rng.derive(&[image_hash(img)]);
    let vals = a
        .values()
        .iter()
        .map(|&v| (v + op.intensity * JITTER_SCALE * stream.standard_normal()).clamp(0.0, 1.0))
        .collect();
    AttributeVector::new(vals)
}

/// `S`: geometry jitter plus colour stylisation. Intensity 0 returns `img` unchanged.
pub fn graffiti_stylize(img: &Tensor<f64>, op: &StyleOp, rng: &RngStream) -> Result<Tensor<f64>> {
    op.validate()?;
    if op.intensity == 0.0 {
        return Ok(img.clone());
    }
    let size = image_size(img)?;
    let n = size * size;
    let t = op.intensity;
    let structure = render_structure(&jittered_attributes(img, op, rng)?, size)?;
    let st = structure.data();
    let edge = |y: usize, x: usize| {
        let v = st[y * size + x];
        let dx = if x + 1 < size { st[y * size + x + 1] - v } else { 0.0 };
        let dy = if y + 1 < size { st[(y + 1) * size + x] - v } else { 0.0 };
        (dx * dx + dy * dy).sqrt().min(1.0)
    };
    let mut out = Vec::with_capacity(img.len());
    out.extend_from_slice(st);
    let src = img.data();
    let mut colour = vec![[0.0; 3]; n];
    for (k, c) in colour.iter_mut().enumerate() {
        let darken = (1.0 - op.edge_gain * edge(k / size, k % size)).clamp(0.0, 1.0);
        for ch in 0..3 {
            let v = src[(ch + 1) * n + k];
            let v = lerp(v, smoothstep(v), t);
            c[ch] = lerp(v, v * darken, t);
        }
        let q = op.palette[op.nearest(*c)];
        for ch in 0..3 {
            c[ch] = lerp(c[ch], q[ch], t);
        }
    }
    for ch in 0..3 {
        out.extend(colour.iter().map(|c| c[ch]));
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// Fraction of pixels whose colour is a palette entry within `tol` per channel.
pub fn palette_mass(img: &Tensor<f64>, palette: &[[f64; 3]], tol: f64) -> Result<f64> {
    let size = image_size(img)?;
    let n = size * size;
    let d = img.data();
    let hits = (0..n)
        .filter(|&k| {
            palette
                .iter()
                .any(|c| (0..3).all(|ch| (d[(ch + 1) * n + k] - c[ch]).abs() <= tol))
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Normalised histogram of nearest-palette indices over the colour layer.
pub fn palette_histogram(img: &Tensor<f64>, op: &StyleOp) -> Result<Vec<f64>> {
    let size = image_size(img)?;
    let n = size * size;
    let d = img.data();
    let mut hist = vec![0.0; op.palette.len()];
    for k in 0..n {
        hist[op.nearest([d[n + k], d[2 * n + k], d[3 * n + k]])] += 1.0;
    }
    hist.iter_mut().for_each(|h| *h /= n as f64);
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facegen::{face_grid, render_face};
    use crate::identity::attr_loss;

    #[test]
    fn zero_intensity_is_identity() {
        let img = render_face(&face_grid(1, 1)[0], 32).unwrap();
        let out = graffiti_stylize(&img, &StyleOp::with_intensity(0.0), &RngStream::new(2)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn default_intensity_drifts_attributes() {
        for (i, p) in face_grid(10, 3).iter().enumerate() {
            let img = render_face(p, 32).unwrap();
            let out = graffiti_stylize(&img, &StyleOp::default(), &RngStream::new(i as u64)).unwrap();
            assert!(attr_loss(&out, &img).unwrap() > 0.0);
        }
    }

    #[test]
    fn full_intensity_lands_on_palette() {
        let img = render_face(&face_grid(1, 4)[0], 32).unwrap();
        let op = StyleOp::with_intensity(1.0);
        let out = graffiti_stylize(&img, &op, &RngStream::new(5)).unwrap();
        assert!(palette_mass(&out, &op.palette, 1e-12).unwrap() >= 0.95);
    }

    #[test]
    fn deterministic_per_input() {
        let img = render_face(&face_grid(1, 6)[0], 32).unwrap();
        let op = StyleOp::default();
        let rng = RngStream::new(7);
        assert_eq!(
            graffiti_stylize(&img, &op, &rng).unwrap(),
            graffiti_stylize(&img, &op, &rng).unwrap()
        );
        assert_ne!(image_hash(&img), image_hash(&img.scale(0.5)));
    }

    #[test]
    fn drift_is_monotone_in_intensity() {
        for (i, p) in face_grid(20, 8).iter().enumerate() {
            let img = render_face(p, 32).unwrap();
            let rng = RngStream::new(i as u64);
            let mut prev = 0.0;
            for k in 0..=10 {
                let out = graffiti_stylize(&img, &StyleOp::with_intensity(k as f64 / 10.0), &rng).unwrap();
                let l = attr_loss(&out, &img).unwrap();
                assert!(l >= prev - 1e-12, "face {i} step {k}: {l} < {prev}");
                prev = l;
            }
        }
    }

    #[test]
    fn rejects_bad_ops() {
        let img = render_face(&face_grid(1, 1)[0], 32).unwrap();
        for op in [
            StyleOp::with_intensity(1.5),
            StyleOp {
                edge_gain: -1.0,
                ..StyleOp::default()
            },
            StyleOp {
                palette: vec![],
                ..StyleOp::default()
            },
        ] {
            assert!(matches!(
                graffiti_stylize(&img, &op, &RngStream::new(0)),
                Err(Error::Config(_))
            ));
        }
    }
}
