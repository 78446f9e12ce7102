//! Multi-reference attention: project the target feature and each aligned
//! reference feature, score per-pixel similarity by channel inner product,
//! softmax over references, and take the weighted sum of value features.

use crate::error::{ensure_contract, Result};
use crate::tensor::kernels;
use crate::tensor::ops;
use crate::tensor::Tensor;

/// One 3x3 convolution's weight `[C_out, C_in, 3, 3]` and bias `[C_out]`.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvParams {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        ConvParams {
            w: Tensor::zeros(&[c_out, c_in, 3, 3]),
            b: Tensor::zeros(&[c_out]),
        }
    }
}

/// Projection convolutions for one scale. `k` and `v` are shared across
/// all references, which is what lets the module take any reference count.
#[derive(Clone, Debug)]
pub struct MamParams {
    pub q: ConvParams,
    pub k: ConvParams,
    pub v: ConvParams,
}

impl MamParams {
    pub fn zeros(channels: usize) -> Self {
        MamParams {
            q: ConvParams::zeros(channels, channels),
            k: ConvParams::zeros(channels, channels),
            v: ConvParams::zeros(channels, channels),
        }
    }
}

/// `Q = conv_q(f_lr)`, `K_i = conv_k(refs[i])`, `V_i = conv_v(refs[i])`.
pub fn project_qkv(
    f_lr: &Tensor,
    refs: &[Tensor],
    params: &MamParams,
) -> Result<(Tensor, Vec<Tensor>, Vec<Tensor>)> {
    ensure_contract!(!refs.is_empty(), "attention needs at least one reference");
    for (i, r) in refs.iter().enumerate() {
        ensure_contract!(
            r.shape() == refs[0].shape(),
            "reference {i} has shape {:?}, expected {:?}",
            r.shape(),
            refs[0].shape()
        );
    }
    let q = ops::conv2d(f_lr, &params.q.w, &params.q.b)?;
    let mut ks = Vec::with_capacity(refs.len());
    let mut vs = Vec::with_capacity(refs.len());
    for r in refs {
        ks.push(ops::conv2d(r, &params.k.w, &params.k.b)?);
        vs.push(ops::conv2d(r, &params.v.w, &params.v.b)?);
    }
    ensure_contract!(
        q.shape() == ks[0].shape(),
        "query shape {:?} does not match key shape {:?}",
        q.shape(),
        ks[0].shape()
    );
    Ok((q, ks, vs))
}

/// Per-pixel softmax over reference similarity scores, `[N, H, W]`.
/// Computed max-subtracted for stability.
pub fn attention_weights(q: &Tensor, ks: &[Tensor]) -> Result<Tensor> {
    let kshapes: Vec<&[usize]> = ks.iter().map(|k| k.shape()).collect();
    kernels::check::attention(q.shape(), &kshapes)?;
    let krefs: Vec<&Tensor> = ks.iter().collect();
    Ok(kernels::attention_forward(q, &krefs))
}

/// Attention-weighted sum of value features, in reference order.
pub fn fuse_refs(att: &Tensor, vs: &[Tensor]) -> Result<Tensor> {
    let vshapes: Vec<&[usize]> = vs.iter().map(|v| v.shape()).collect();
    kernels::check::fuse(att.shape(), &vshapes)?;
    let vrefs: Vec<&Tensor> = vs.iter().collect();
    Ok(kernels::fuse_forward(att, &vrefs))
}

/// Fused reference feature for one scale: projection, attention, fusion.
pub fn mam_forward(f_lr: &Tensor, refs: &[Tensor], params: &MamParams) -> Result<Tensor> {
    let (q, ks, vs) = project_qkv(f_lr, refs, params)?;
    let att = attention_weights(&q, &ks)?;
    fuse_refs(&att, &vs)
}
