use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::scalar::Scalar;

/// Linear latent encoder with orthonormal rows; the decoder is its transpose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCodec<T> {
    enc: Tensor<T>,
    dec: Tensor<T>,
    image_shape: Vec<usize>,
    latent_shape: Vec<usize>,
}

impl<T: Scalar> LatentCodec<T> {
    /// Wraps an encoder matrix `z × n`, checking `enc·encᵀ = I` within 1e-9.
    pub fn new(enc: Tensor<T>, image_shape: Vec<usize>, latent_shape: Vec<usize>) -> Result<Self> {
        let (z, n) = enc.dims2()?;
        if image_shape.iter().product::<usize>() != n || latent_shape.iter().product::<usize>() != z {
            return Err(Error::shape("latent codec", &image_shape, &latent_shape));
        }
        if z > n {
            return Err(Error::Config(format!("latent size {z} exceeds input size {n}")));
        }
        let dec = enc.transpose()?;
        let gram = enc.matmul(&dec)?;
        let err = gram.max_abs_diff(&Tensor::eye(z))?;
        if err.as_f64() > 1e-9 {
            return Err(Error::Config(format!("encoder rows not orthonormal (error {err})")));
        }
        Ok(Self {
            enc,
            dec,
            image_shape,
            latent_shape,
        })
    }

    pub fn identity(shape: &[usize]) -> Self {
        Self::new(Tensor::eye(shape.iter().product()), shape.to_vec(), shape.to_vec()).expect("identity is orthonormal")
    }

    /// Orthonormal average pooling over `factor × factor` blocks of an `h × w` image.
    ///
    /// Each latent entry is the block sum divided by `factor`, i.e. the block
    /// mean scaled by `factor`.
    pub fn block_pool(h: usize, w: usize, factor: usize) -> Result<Self> {
        if factor == 0 || !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
            return Err(Error::Config(format!("pool factor {factor} does not tile {h}x{w}")));
        }
        let (lh, lw) = (h / factor, w / factor);
        let v = T::one() / T::of(factor as f64);
        let mut enc = Tensor::zeros(&[lh * lw, h * w]);
        for y in 0..h {
            for x in 0..w {
                enc.set((y / factor) * lw + x / factor, y * w + x, v);
            }
        }
        Self::new(enc, vec![h, w], vec![lh, lw])
    }

    /// Random orthonormal rows by Gram-Schmidt on Gaussian draws.
    pub fn random(z: usize, n: usize, rng: &mut RngStream) -> Result<Self> {
        if z > n {
            return Err(Error::Config(format!("latent size {z} exceeds input size {n}")));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(z);
        while rows.len() < z {
            let mut v: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
            for r in &rows {
                let d: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(x, y)| *x -= d * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let enc = Tensor::new(vec![z, n], rows.into_iter().flatten().map(T::of).collect())?;
        Self::new(enc, vec![n], vec![z])
    }

    pub fn encoder(&self) -> &Tensor<T> {
        &self.enc
    }

    pub fn latent_shape(&self) -> &[usize] {
        &self.latent_shape
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    /// Projects an image (any shape with the right element count) to the latent space.
    pub fn encode(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        if img.len() != self.enc.cols() {
            return Err(Error::shape("encode", img.shape(), &self.image_shape));
        }
        let flat = img.reshape(&[img.len(), 1])?;
        self.enc.matmul(&flat)?.reshape(&self.latent_shape)
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.len() != self.dec.cols() {
            return Err(Error::shape("decode", z.shape(), &self.latent_shape));
        }
        let flat = z.reshape(&[z.len(), 1])?;
        self.dec.matmul(&flat)?.reshape(&self.image_shape)
    }
}

/// Free-function form of [`LatentCodec::encode`].
pub fn encode<T: Scalar>(img: &Tensor<T>, codec: &LatentCodec<T>) -> Result<Tensor<T>> {
    codec.encode(img)
}

/// Free-function form of [`LatentCodec::decode`].
pub fn decode<T: Scalar>(z: &Tensor<T>, codec: &LatentCodec<T>) -> Result<Tensor<T>> {
    codec.decode(z)
}
