use std::io::Write;

use super::render::image_size;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6) of the colour layer.
pub fn write_ppm<W: Write>(img: &Tensor<f64>, mut out: W) -> Result<()> {
    let s = image_size(img)?;
    let n = s * s;
    let d = img.data();
    write!(out, "P6\n{s} {s}\n255\n")?;
    let mut buf = Vec::with_capacity(3 * n);
    for k in 0..n {
        buf.extend((1..4).map(|ch| byte(d[ch * n + k])));
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Binary PPM (P6) of a single-channel `h × w` map scaled to its own range, in grey.
pub fn write_gray_ppm<W: Write>(map: &Tensor<f64>, mut out: W) -> Result<()> {
    let (h, w) = map.dims2()?;
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    write!(out, "P6\n{w} {h}\n255\n")?;
    let buf: Vec<u8> = map.data().iter().flat_map(|&v| [byte((v - lo) / span); 3]).collect();
    out.write_all(&buf)?;
    Ok(())
}

/// Reads back a P6 file written by [`write_ppm`] as `[3, h, w]` in `[0, 1]`.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::Parse("only 8-bit P6 is supported".into()));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Parse(format!("bad PPM dimension {s:?}")))
    };
    let (w, h) = (dim(&fields[1])?, dim(&fields[2])?);
    let body = bytes
        .get(pos..pos + 3 * w * h)
        .ok_or_else(|| Error::Parse("truncated PPM body".into()))?;
    let n = w * h;
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (ch, k) = (i / n, i % n);
        body[3 * k + ch] as f64 / 255.0
    }))
}
