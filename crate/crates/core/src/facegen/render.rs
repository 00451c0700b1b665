//! Parametric face raster and its exact geometric inverse.
//!
//! An image is `[4, s, s]`. Channel 0 holds the landmark structure; channels
//! 1–3 hold the colour layer (skin palette over a grey background). Every
//! landmark is an axis-aligned rectangle drawn with area coverage, so edge
//! positions can be read back from a single row or column to machine
//! precision at any resolution.
//!
//! Layout in normalised coordinates (x right, y down, centre 0.5):
//!
//! | landmark     | x span                         | y span                  |
//! |--------------|--------------------------------|-------------------------|
//! | head         | 0.5 ± R, R = 0.30 + 0.12·a₅    | 0.5 ± R                 |
//! | eyes         | 0.5 ± d/2, width e             | 0.34 – 0.41             |
//! | nose         | 0.465 – 0.535                  | 0.45 – 0.45 + n         |
//! | mouth bar    | 0.5 ± m/2                      | 0.66 – 0.73             |
//! | mouth corner | 0.5 ± (m/2 + 0.07 … m/2 + 0.14)| 0.66 – 0.73, shifted up by c |
//!
//! with d = 0.20 + 0.12·a₀, e = 0.04 + 0.06·a₁, n = 0.06 + 0.08·a₂,
//! m = 0.14 + 0.10·a₃, c = 0.10·(a₄ − 0.5).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity::AttributeVector;
use crate::numerics::{RngStream, Tensor};

pub const MIN_SIZE: usize = 32;
pub const CHANNELS: usize = 4;
/// Structure weight of the head silhouette.
pub const HEAD_WEIGHT: f64 = 0.4;
/// Structure weight of each facial feature (drawn on top of the head).
pub const FEATURE_WEIGHT: f64 = 0.6;

/// Skin tones indexed by [`FaceParams::palette`].
pub const SKIN_PALETTE: [[f64; 3]; 6] = [
    [0.96, 0.80, 0.69],
    [0.89, 0.67, 0.52],
    [0.78, 0.57, 0.42],
    [0.62, 0.44, 0.30],
    [0.45, 0.31, 0.20],
    [0.30, 0.20, 0.13],
];

const EYE_Y: (f64, f64) = (0.34, 0.41);
const NOSE_X: (f64, f64) = (0.465, 0.535);
const NOSE_TOP: f64 = 0.45;
const MOUTH_Y: (f64, f64) = (0.66, 0.73);
const CORNER_GAP: f64 = 0.07;
const CORNER_WIDTH: f64 = 0.07;
const HEAD_ROW: f64 = 0.25;
// residual coverage below this counts as empty
const EMPTY: f64 = 1e-9;

/// Attribute part plus nuisance fields that [`measure`] ignores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub attrs: AttributeVector,
    /// Index into [`SKIN_PALETTE`].
    pub palette: usize,
    /// Grey level of the background in `[0, 1]`.
    pub background: f64,
}

impl FaceParams {
    pub fn new(attrs: AttributeVector, palette: usize, background: f64) -> Result<Self> {
        let p = Self {
            attrs,
            palette,
            background,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.attrs.len() != AttributeVector::FACE_DIM {
            return Err(Error::Config(format!(
                "faces take {} attributes, got {}",
                AttributeVector::FACE_DIM,
                self.attrs.len()
            )));
        }
        if self.palette >= SKIN_PALETTE.len() {
            return Err(Error::Config(format!("palette id {} out of range", self.palette)));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::Config(format!("background {} outside [0, 1]", self.background)));
        }
        Ok(())
    }

    /// Uniform random face.
    pub fn random(rng: &mut RngStream) -> Self {
        let attrs = AttributeVector::new((0..AttributeVector::FACE_DIM).map(|_| rng.uniform()).collect())
            .expect("uniform draws lie in [0, 1)");
        let palette = (rng.next_u64() % SKIN_PALETTE.len() as u64) as usize;
        let background = 0.05 + 0.3 * rng.uniform();
        Self {
            attrs,
            palette,
            background,
        }
    }
}

/// `n` faces, face `i` drawn from child stream `i` of `seed`.
pub fn face_grid(n: usize, seed: u64) -> Vec<FaceParams> {
    let root = RngStream::new(seed);
    (0..n).map(|i| FaceParams::random(&mut root.split(i as u64))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Rect {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

/// Length of `[a, b] ∩ [i, i + 1]`.
fn overlap(a: f64, b: f64, i: usize) -> f64 {
    let i = i as f64;
    (b.min(i + 1.0) - a.max(i)).max(0.0)
}

impl Rect {
    fn coverage(&self, s: f64, y: usize, x: usize) -> f64 {
        overlap(self.x0 * s, self.x1 * s, x) * overlap(self.y0 * s, self.y1 * s, y)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    head_r: f64,
    eye_d: f64,
    eye_w: f64,
    nose_n: f64,
    mouth_m: f64,
    corner_off: f64,
}

impl Geometry {
    fn from_attrs(a: &[f64]) -> Self {
        Self {
            eye_d: 0.20 + 0.12 * a[0],
            eye_w: 0.04 + 0.06 * a[1],
            nose_n: 0.06 + 0.08 * a[2],
            mouth_m: 0.14 + 0.10 * a[3],
            corner_off: 0.10 * (a[4] - 0.5),
            head_r: 0.30 + 0.12 * a[5],
        }
    }

    fn head(&self) -> Rect {
        head_rect(self.head_r)
    }

    fn features(&self) -> [Rect; 6] {
        let (e, d, m) = (self.eye_w, self.eye_d, self.mouth_m);
        let corner = |sign: f64| {
            let (near, far) = (
                0.5 + sign * (m / 2.0 + CORNER_GAP),
                0.5 + sign * (m / 2.0 + CORNER_GAP + CORNER_WIDTH),
            );
            Rect {
                x0: near.min(far),
                x1: near.max(far),
                y0: MOUTH_Y.0 - self.corner_off,
                y1: MOUTH_Y.1 - self.corner_off,
            }
        };
        [
            Rect {
                x0: 0.5 - d / 2.0 - e / 2.0,
                x1: 0.5 - d / 2.0 + e / 2.0,
                y0: EYE_Y.0,
                y1: EYE_Y.1,
            },
            Rect {
                x0: 0.5 + d / 2.0 - e / 2.0,
                x1: 0.5 + d / 2.0 + e / 2.0,
                y0: EYE_Y.0,
                y1: EYE_Y.1,
            },
            Rect {
                x0: NOSE_X.0,
                x1: NOSE_X.1,
                y0: NOSE_TOP,
                y1: NOSE_TOP + self.nose_n,
            },
            Rect {
                x0: 0.5 - m / 2.0,
                x1: 0.5 + m / 2.0,
                y0: MOUTH_Y.0,
                y1: MOUTH_Y.1,
            },
            corner(-1.0),
            corner(1.0),
        ]
    }
}

fn head_rect(r: f64) -> Rect {
    Rect {
        x0: 0.5 - r,
        x1: 0.5 + r,
        y0: 0.5 - r,
        y1: 0.5 + r,
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < MIN_SIZE {
        return Err(Error::Config(format!("image size {size} below minimum {MIN_SIZE}")));
    }
    Ok(())
}

/// Structure channel (`size × size`) for the given attributes.
pub fn render_structure(attrs: &AttributeVector, size: usize) -> Result<Tensor<f64>> {
    check_size(size)?;
    attrs.check_face()?;
    let g = Geometry::from_attrs(attrs.values());
    let (head, feats) = (g.head(), g.features());
    let s = size as f64;
    Ok(Tensor::from_fn(&[size, size], |k| {
        let (y, x) = (k / size, k % size);
        let f: f64 = feats.iter().map(|r| r.coverage(s, y, x)).sum();
        HEAD_WEIGHT * head.coverage(s, y, x) + FEATURE_WEIGHT * f
    }))
}

/// Full `[4, size, size]` face image.
pub fn render_face(p: &FaceParams, size: usize) -> Result<Tensor<f64>> {
    p.validate()?;
    let structure = render_structure(&p.attrs, size)?;
    let skin = SKIN_PALETTE[p.palette];
    let bg = p.background;
    let n = size * size;
    let mut data = Vec::with_capacity(CHANNELS * n);
    data.extend_from_slice(structure.data());
    for c in skin {
        data.extend(structure.data().iter().map(|&v| bg + v * (c - bg)));
    }
    Tensor::new(vec![CHANNELS, size, size], data)
}

/// Side length of a face image, checking the layout.
pub fn image_size(img: &Tensor<f64>) -> Result<usize> {
    match img.shape() {
        &[CHANNELS, h, w] if h == w && h >= MIN_SIZE => Ok(h),
        other => Err(Error::Extraction(format!(
            "expected a [{CHANNELS}, s, s] image with s >= {MIN_SIZE}, got {other:?}"
        ))),
    }
}

pub fn structure_channel(img: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = image_size(img)?;
    Tensor::new(vec![s, s], img.data()[..s * s].to_vec())
}

/// Replaces channel 0, keeping the colour layer.
pub fn with_structure(img: &Tensor<f64>, structure: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = image_size(img)?;
    if structure.shape() != [s, s] {
        return Err(Error::shape("with_structure", img.shape(), structure.shape()));
    }
    let mut out = img.clone();
    out.data_mut()[..s * s].copy_from_slice(structure.data());
    Ok(out)
}

/// Maximal runs of `v > EMPTY` as `(first, last)` pixel indices.
fn runs(v: &[f64]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &c) in v.iter().enumerate() {
        match (c > EMPTY, start) {
            (true, None) => start = Some(i),
            (false, Some(s0)) => {
                out.push((s0, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s0) = start {
        out.push((s0, v.len() - 1));
    }
    out
}

/// Sub-pixel edges `[a, b]` of a run whose values are fractional coverage.
fn edges(v: &[f64], (i0, i1): (usize, usize)) -> (f64, f64) {
    (i0 as f64 + 1.0 - v[i0].min(1.0), i1 as f64 + v[i1].min(1.0))
}

fn missing(what: &str) -> Error {
    Error::Extraction(format!("no {what} found"))
}

/// Inverse of the renderer on the structure channel.
pub fn measure(img: &Tensor<f64>) -> Result<AttributeVector> {
    let size = image_size(img)?;
    let s = size as f64;
    let st = &img.data()[..size * size];
    if st.iter().any(|v| !v.is_finite()) {
        return Err(Error::Extraction("non-finite structure".into()));
    }
    let px = |v: f64| ((v * s).floor() as usize).min(size - 1);
    let centre = px(0.5);

    // head: only the silhouette crosses this row
    let y_head = px(HEAD_ROW);
    let head_row: Vec<f64> = (0..size).map(|x| st[y_head * size + x] / HEAD_WEIGHT).collect();
    let run = runs(&head_row)
        .into_iter()
        .find(|&(a, b)| a <= centre && centre <= b)
        .ok_or_else(|| missing("head"))?;
    let (a, b) = edges(&head_row, run);
    let head_r = (b - a) / (2.0 * s);
    let head = head_rect(head_r);

    let residual = |y: usize, x: usize| (st[y * size + x] - HEAD_WEIGHT * head.coverage(s, y, x)) / FEATURE_WEIGHT;
    let row = |y: f64| {
        let y = px(y);
        (0..size).map(|x| residual(y, x)).collect::<Vec<_>>()
    };
    let column = |x: f64| {
        let x = px(x);
        (0..size).map(|y| residual(y, x)).collect::<Vec<_>>()
    };

    let eyes = row((EYE_Y.0 + EYE_Y.1) / 2.0);
    let eye_runs = runs(&eyes);
    if eye_runs.len() != 2 {
        return Err(Error::Extraction(format!("expected 2 eyes, found {}", eye_runs.len())));
    }
    let (l0, l1) = edges(&eyes, eye_runs[0]);
    let (r0, r1) = edges(&eyes, eye_runs[1]);
    let eye_w = ((l1 - l0) + (r1 - r0)) / (2.0 * s);
    let eye_d = ((r0 + r1) - (l0 + l1)) / (2.0 * s);

    let nose_col = column(0.5);
    let nose = *runs(&nose_col).first().ok_or_else(|| missing("nose"))?;
    let nose_n = edges(&nose_col, nose).1 / s - NOSE_TOP;

    let mouth = row((MOUTH_Y.0 + MOUTH_Y.1) / 2.0);
    let bar = runs(&mouth)
        .into_iter()
        .find(|&(a, b)| a <= centre && centre <= b)
        .ok_or_else(|| missing("mouth"))?;
    let (m0, m1) = edges(&mouth, bar);
    let mouth_m = (m1 - m0) / s;

    let corner_col = column(0.5 + mouth_m / 2.0 + CORNER_GAP + CORNER_WIDTH / 2.0);
    let corner = *runs(&corner_col).last().ok_or_else(|| missing("mouth corner"))?;
    let corner_off = MOUTH_Y.0 - edges(&corner_col, corner).0 / s;

    let raw = [
        (eye_d - 0.20) / 0.12,
        (eye_w - 0.04) / 0.06,
        (nose_n - 0.06) / 0.08,
        (mouth_m - 0.14) / 0.10,
        corner_off / 0.10 + 0.5,
        (head_r - 0.30) / 0.12,
    ];
    let mut vals = Vec::with_capacity(raw.len());
    for (name, v) in AttributeVector::FACE_NAMES.iter().zip(raw) {
        // measurement roundoff may step just outside the range
        if !(-1e-9..=1.0 + 1e-9).contains(&v) {
            return Err(Error::Extraction(format!("{name} measured as {v}, outside [0, 1]")));
        }
        vals.push(v.clamp(0.0, 1.0));
    }
    AttributeVector::new(vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attrs(v: [f64; 6]) -> AttributeVector {
        AttributeVector::new(v.to_vec()).unwrap()
    }

    fn face(v: [f64; 6]) -> FaceParams {
        FaceParams::new(attrs(v), 1, 0.2).unwrap()
    }

    #[test]
    fn features_do_not_overlap_and_stay_in_head() {
        for corner in [
            [0.0; 6],
            [1.0; 6],
            [1.0, 1.0, 1.0, 1.0, 0.0, 0.0],
            [0.0, 1.0, 1.0, 1.0, 1.0, 0.0],
        ] {
            let g = Geometry::from_attrs(&corner);
            let head = g.head();
            let f = g.features();
            for (i, a) in f.iter().enumerate() {
                assert!(a.x0 > head.x0 && a.x1 < head.x1 && a.y0 > head.y0 && a.y1 < head.y1);
                for b in &f[i + 1..] {
                    let apart = a.x1 <= b.x0 || b.x1 <= a.x0 || a.y1 <= b.y0 || b.y1 <= a.y0;
                    assert!(apart, "{a:?} {b:?}");
                }
            }
        }
    }

    #[test]
    fn round_trip_on_corners_and_centre() {
        for v in [[0.0; 6], [1.0; 6], [0.5; 6], [0.1, 0.9, 0.3, 0.7, 0.2, 0.8]] {
            for size in [32, 33, 48, 64, 97] {
                let img = render_face(&face(v), size).unwrap();
                let got = measure(&img).unwrap();
                for (g, e) in got.values().iter().zip(v) {
                    assert!((g - e).abs() < 1e-9, "size {size}: {g} vs {e}");
                }
            }
        }
    }

    #[test]
    fn render_is_deterministic_and_sensitive() {
        let a = render_face(&face([0.5; 6]), 32).unwrap();
        assert_eq!(a, render_face(&face([0.5; 6]), 32).unwrap());
        let b = render_face(&face([0.5, 0.5, 0.5, 0.7, 0.5, 0.5]), 32).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
    }

    #[test]
    fn nuisance_fields_do_not_move_structure() {
        let a = render_face(&FaceParams::new(attrs([0.3; 6]), 0, 0.1).unwrap(), 32).unwrap();
        let b = render_face(&FaceParams::new(attrs([0.3; 6]), 5, 0.9).unwrap(), 32).unwrap();
        assert_eq!(structure_channel(&a).unwrap(), structure_channel(&b).unwrap());
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(render_face(&face([0.5; 6]), 16), Err(Error::Config(_))));
        assert!(FaceParams::new(attrs([0.5; 6]), 6, 0.2).is_err());
        assert!(FaceParams::new(attrs([0.5; 6]), 0, 1.5).is_err());
        assert!(matches!(
            measure(&Tensor::zeros(&[4, 32, 32])),
            Err(Error::Extraction(_))
        ));
        assert!(matches!(
            measure(&Tensor::zeros(&[3, 32, 32])),
            Err(Error::Extraction(_))
        ));
        assert!(matches!(
            measure(&Tensor::zeros(&[4, 16, 16])),
            Err(Error::Extraction(_))
        ));
    }

    #[test]
    fn grid_is_seeded() {
        assert_eq!(face_grid(5, 3), face_grid(5, 3));
        assert_ne!(face_grid(5, 3), face_grid(5, 4));
        assert_eq!(face_grid(5, 3)[..2], face_grid(2, 3)[..]);
    }
}
