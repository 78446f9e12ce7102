//! Public eager operators. Each validates its shape contract and then
//! delegates to the shared kernels in [`super::kernels`].

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{ensure_contract, Result};

/// 3x3 convolution, stride 1, zero padding 1. `x` is `[C_in, H, W]`,
/// `w` is `[C_out, C_in, 3, 3]`, `b` is `[C_out]`. Output keeps `H x W`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::conv_out_shape(x.shape(), w.shape(), 1)?;
    ensure_contract!(
        b.shape() == [w.shape()[0]],
        "conv2d bias must be [{}], got {:?}",
        w.shape()[0],
        b.shape()
    );
    Ok(kernels::conv2d_forward(x, w, b, 1))
}

/// Elementwise `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    kernels::leaky_relu_forward(x, slope)
}

/// Elementwise logistic function.
pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    kernels::sigmoid_forward(x)
}

/// Stacks `b`'s channels after `a`'s. Both must share `H x W`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_contract!(
        a.rank() == 3 && b.rank() == 3,
        "concat_channels takes rank-3 tensors, got {:?} and {:?}",
        a.shape(),
        b.shape()
    );
    ensure_contract!(
        a.shape()[1..] == b.shape()[1..],
        "concat_channels needs matching spatial dims, got {:?} and {:?}",
        a.shape(),
        b.shape()
    );
    Ok(kernels::concat_channels_forward(a, b))
}

/// Depth-to-space upscale by 2: `[4C, H, W] -> [C, 2H, 2W]`. Channel
/// `c*4 + dy*2 + dx` fills the `(dy, dx)` position of each 2x2 output cell.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_contract!(
        x.rank() == 3 && x.shape()[0] % 4 == 0,
        "pixel_shuffle needs [4C, H, W], got {:?}",
        x.shape()
    );
    Ok(kernels::pixel_shuffle_forward(x))
}
