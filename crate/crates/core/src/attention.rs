//! Single-head scaled dot-product attention, cross-attention, and the
//! identity-augmented self-attention used to keep a subject's face consistent.
//!
//! Identity augmentation multiplies the concatenated feature `[x; id]` by the
//! block weight `[W; U]`. Because `id` is shared by every token this equals
//! `x·W + id·U` added to each row, which is how it is computed here. Only the
//! query and key maps are extended; values are untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, RngStream, Tensor};
use crate::scalar::Scalar;

/// `W_q`, `W_k`, `W_v`, each `d_model × d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

/// Base weights plus the identity blocks `U_q`, `U_k` (`d_id × d`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtendedAttentionWeights<T> {
    pub base: AttentionWeights<T>,
    pub uq: Tensor<T>,
    pub uk: Tensor<T>,
}

/// Per-subject identity vector shared by every spatial token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityEmbedding<T>(pub Tensor<T>);

/// Query map from the token space, key/value maps from the conditioning space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn new(wq: Tensor<T>, wk: Tensor<T>, wv: Tensor<T>) -> Result<Self> {
        let (dm, d) = wq.dims2()?;
        for w in [&wk, &wv] {
            if w.dims2()? != (dm, d) {
                return Err(Error::shape("attention weights", wq.shape(), w.shape()));
            }
        }
        Ok(Self { wq, wk, wv })
    }

    pub fn zeros(d_model: usize, d: usize) -> Self {
        let z = Tensor::zeros(&[d_model, d]);
        Self {
            wq: z.clone(),
            wk: z.clone(),
            wv: z,
        }
    }

    pub fn random(d_model: usize, d: usize, std: f64, rng: &mut RngStream) -> Self {
        let mut draw = || Tensor::from_fn(&[d_model, d], |_| rng.normal(0.0, std));
        let wq = draw();
        let wk = draw();
        let wv = draw();
        Self { wq, wk, wv }
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    /// Head dimension.
    pub fn d(&self) -> usize {
        self.wq.cols()
    }
}

impl<T: Scalar> ExtendedAttentionWeights<T> {
    pub fn new(base: AttentionWeights<T>, uq: Tensor<T>, uk: Tensor<T>) -> Result<Self> {
        let d = base.d();
        let (d_id, dq) = uq.dims2()?;
        if dq != d || uk.dims2()? != (d_id, d) {
            return Err(Error::shape("identity blocks", uq.shape(), uk.shape()));
        }
        Ok(Self { base, uq, uk })
    }

    /// Extension with zero identity blocks: behaves exactly like `base`.
    pub fn from_base(base: AttentionWeights<T>, d_id: usize) -> Self {
        let d = base.d();
        Self {
            base,
            uq: Tensor::zeros(&[d_id, d]),
            uk: Tensor::zeros(&[d_id, d]),
        }
    }

    pub fn d_id(&self) -> usize {
        self.uq.rows()
    }

    /// The concatenated block weight `[W_q; U_q]` of shape `(d_model + d_id) × d`.
    pub fn stacked_query(&self) -> Tensor<T> {
        stack_rows(&self.base.wq, &self.uq)
    }

    pub fn stacked_key(&self) -> Tensor<T> {
        stack_rows(&self.base.wk, &self.uk)
    }
}

fn stack_rows<T: Scalar>(top: &Tensor<T>, bottom: &Tensor<T>) -> Tensor<T> {
    let mut data = top.data().to_vec();
    data.extend_from_slice(bottom.data());
    Tensor::new(vec![top.rows() + bottom.rows(), top.cols()], data).expect("matching columns")
}

impl<T: Scalar> IdentityEmbedding<T> {
    pub fn new(id: Tensor<T>) -> Result<Self> {
        if id.rank() != 1 {
            return Err(Error::InvalidTensor("identity embedding must be a vector".into()));
        }
        Ok(Self(id))
    }

    pub fn zeros(d_id: usize) -> Self {
        Self(Tensor::zeros(&[d_id]))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.data().iter().all(|&v| v == T::zero())
    }
}

fn check_tokens<T: Scalar>(tokens: &Tensor<T>, w: &Tensor<T>) -> Result<()> {
    let (_, dm) = tokens.dims2()?;
    if dm != w.rows() {
        return Err(Error::shape("attention tokens", tokens.shape(), w.shape()));
    }
    Ok(())
}

fn scaled_scores<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let d = T::of(q.cols() as f64);
    Ok(q.matmul(&k.transpose()?)?.scale(T::one() / d.sqrt()))
}

/// Post-softmax attention matrix `softmax(QKᵀ/√d)`.
fn probabilities<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    softmax_rows(&scaled_scores(q, k)?)
}

/// Queries and keys, identity-augmented when `id` is given.
fn project_qk<T: Scalar>(
    tokens: &Tensor<T>,
    id: Option<&IdentityEmbedding<T>>,
    w: &ExtendedAttentionWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_tokens(tokens, &w.base.wq)?;
    let mut q = tokens.matmul(&w.base.wq)?;
    let mut k = tokens.matmul(&w.base.wk)?;
    if let Some(id) = id {
        if id.dim() != w.d_id() {
            return Err(Error::shape("identity embedding", id.0.shape(), w.uq.shape()));
        }
        q = q.add_row_broadcast(&id.0.vecmat(&w.uq)?)?;
        k = k.add_row_broadcast(&id.0.vecmat(&w.uk)?)?;
    }
    Ok((q, k))
}

/// `softmax(QKᵀ/√d)·V` with `Q = XW_q`, `K = XW_k`, `V = XW_v`.
pub fn self_attention<T: Scalar>(tokens: &Tensor<T>, w: &AttentionWeights<T>) -> Result<Tensor<T>> {
    check_tokens(tokens, &w.wq)?;
    let q = tokens.matmul(&w.wq)?;
    let k = tokens.matmul(&w.wk)?;
    let v = tokens.matmul(&w.wv)?;
    probabilities(&q, &k)?.matmul(&v)
}

/// Self-attention whose queries and keys carry the identity embedding.
pub fn identity_self_attention<T: Scalar>(
    tokens: &Tensor<T>,
    id: &IdentityEmbedding<T>,
    w: &ExtendedAttentionWeights<T>,
) -> Result<Tensor<T>> {
    let (q, k) = project_qk(tokens, Some(id), w)?;
    let v = tokens.matmul(&w.base.wv)?;
    probabilities(&q, &k)?.matmul(&v)
}

/// Queries from `tokens`, keys and values from `cond_tokens`.
pub fn cross_attention<T: Scalar>(
    tokens: &Tensor<T>,
    cond_tokens: &Tensor<T>,
    w: &CrossAttentionWeights<T>,
) -> Result<Tensor<T>> {
    check_tokens(tokens, &w.wq)?;
    check_tokens(cond_tokens, &w.wk)?;
    check_tokens(cond_tokens, &w.wv)?;
    let q = tokens.matmul(&w.wq)?;
    let k = cond_tokens.matmul(&w.wk)?;
    let v = cond_tokens.matmul(&w.wv)?;
    probabilities(&q, &k)?.matmul(&v)
}

/// The `n × n` attention matrix before values are applied.
pub fn attention_map<T: Scalar>(
    tokens: &Tensor<T>,
    id: Option<&IdentityEmbedding<T>>,
    w: &ExtendedAttentionWeights<T>,
) -> Result<Tensor<T>> {
    let (q, k) = project_qk(tokens, id, w)?;
    probabilities(&q, &k)
}

/// Mean attention mass that queries place on the key positions in `region`.
pub fn region_mass<T: Scalar>(map: &Tensor<T>, region: &[usize]) -> Result<T> {
    let (n, m) = map.dims2()?;
    if let Some(&bad) = region.iter().find(|&&j| j >= m) {
        return Err(Error::Input(format!("region index {bad} outside {m} keys")));
    }
    let total: T = (0..n).map(|i| region.iter().map(|&j| map.at(i, j)).sum::<T>()).sum();
    Ok(total / T::of(n as f64))
}
