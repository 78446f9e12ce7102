//! Spatial-aware filtering: two small conv heads read the target feature
//! next to the fused reference feature and emit a bounded multiplicative
//! mask and an unbounded additive mask that gate the fused feature.

use crate::error::{ensure_contract, Result};
use crate::model::mam::ConvParams;
use crate::tensor::ops;
use crate::tensor::Tensor;

/// One mask head: conv, leaky ReLU, conv.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub c1: ConvParams,
    pub c2: ConvParams,
}

impl MaskHead {
    /// Head whose output is identically zero regardless of input.
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        MaskHead {
            c1: ConvParams::zeros(c_out, c_in),
            c2: ConvParams::zeros(c_out, c_out),
        }
    }

    fn run(&self, x: &Tensor, slope: f64) -> Result<Tensor> {
        let h = ops::conv2d(x, &self.c1.w, &self.c1.b)?;
        let h = ops::leaky_relu(&h, slope);
        ops::conv2d(&h, &self.c2.w, &self.c2.b)
    }
}

/// Mask heads for one scale: `f1` feeds the multiplicative mask through a
/// sigmoid scaled by 2, `f2` emits the additive mask directly.
#[derive(Clone, Debug)]
pub struct SafmParams {
    pub f1: MaskHead,
    pub f2: MaskHead,
}

impl SafmParams {
    /// Zero parameters make the module the identity on the fused feature:
    /// the multiplicative mask is exactly 1 and the additive mask exactly 0.
    pub fn zeros(c_lr: usize, c_fref: usize) -> Self {
        SafmParams {
            f1: MaskHead::zeros(c_lr + c_fref, c_fref),
            f2: MaskHead::zeros(c_lr + c_fref, c_fref),
        }
    }
}

/// Multiplicative mask in `(0, 2)` and unbounded additive mask, both shaped
/// like the fused reference feature.
#[derive(Clone, Debug)]
pub struct MaskPair {
    pub mul: Tensor,
    pub add: Tensor,
}

/// Compute both masks from the target feature and the fused reference
/// feature at the same scale.
pub fn compute_masks(
    f_lr: &Tensor,
    f_fref: &Tensor,
    params: &SafmParams,
    slope: f64,
) -> Result<MaskPair> {
    ensure_contract!(
        f_lr.shape().len() == 3 && f_fref.shape().len() == 3,
        "mask inputs must be [C, H, W]"
    );
    ensure_contract!(
        f_lr.shape()[1..] == f_fref.shape()[1..],
        "spatial dims differ: {:?} vs {:?}",
        f_lr.shape(),
        f_fref.shape()
    );
    let joint = ops::concat_channels(f_lr, f_fref)?;
    let raw = params.f1.run(&joint, slope)?;
    let mul = ops::sigmoid(&raw).map(|v| v * 2.0);
    let add = params.f2.run(&joint, slope)?;
    ensure_contract!(
        mul.shape() == f_fref.shape() && add.shape() == f_fref.shape(),
        "mask heads must preserve the fused feature shape"
    );
    Ok(MaskPair { mul, add })
}

/// `f_sref = f_fref * mul + add`, elementwise.
pub fn apply_selection(f_fref: &Tensor, masks: &MaskPair) -> Result<Tensor> {
    ensure_contract!(
        masks.mul.shape() == f_fref.shape() && masks.add.shape() == f_fref.shape(),
        "mask shapes {:?}/{:?} do not match feature {:?}",
        masks.mul.shape(),
        masks.add.shape(),
        f_fref.shape()
    );
    let n = f_fref.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = f_fref.data()[i] * masks.mul.data()[i] + masks.add.data()[i];
    }
    Tensor::from_vec(f_fref.shape(), out)
}

/// Masks plus application in one call.
pub fn safm_forward(
    f_lr: &Tensor,
    f_fref: &Tensor,
    params: &SafmParams,
    slope: f64,
) -> Result<Tensor> {
    let masks = compute_masks(f_lr, f_fref, params, slope)?;
    apply_selection(f_fref, &masks)
}
