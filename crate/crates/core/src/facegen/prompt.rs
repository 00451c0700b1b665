use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

/// Lowercased alphanumeric tokens.
pub fn normalize_prompt(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Unit vector seeded by a hash of the normalised tokens.
pub fn embed_prompt(text: &str, dim: usize) -> Result<Tensor<f64>> {
    let tokens = normalize_prompt(text);
    if tokens.is_empty() {
        return Err(Error::Input("prompt has no tokens".into()));
    }
    if dim == 0 {
        return Err(Error::Input("embedding dimension must be positive".into()));
    }
    let digest = Sha256::digest(tokens.join(" ").as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"));
    let stream = u64::from_le_bytes(digest[8..16].try_into().expect("32-byte digest"));
    let mut rng = RngStream::at(seed, stream, 0);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return Tensor::vector(v.into_iter().map(|x| x / norm).collect());
        }
    }
}
