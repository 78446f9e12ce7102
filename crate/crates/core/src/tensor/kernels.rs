//! Forward and backward kernels for every operator in the network graph.
//!
//! Kernels trust their shapes; the public wrappers in [`super::ops`] and the
//! graph builder validate contracts before calling in. All convolutions are
//! direct 3x3 loops, stride 1 or 2, zero padding 1.

use super::{Scalar, Tensor};
use crate::error::{ensure_contract, Result};

pub const KERNEL: usize = 3;
pub const PAD: isize = 1;

/// Integer displacement field on the target grid. `dx`/`dy` are row-major
/// over `h * w`; a sample at (x, y) reads the source at
/// `(clamp(x + dx), clamp(y + dy))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffsetField {
    pub h: usize,
    pub w: usize,
    pub dx: Vec<i32>,
    pub dy: Vec<i32>,
}

impl OffsetField {
    pub fn identity(h: usize, w: usize) -> Self {
        OffsetField {
            h,
            w,
            dx: vec![0; h * w],
            dy: vec![0; h * w],
        }
    }

    pub fn uniform(h: usize, w: usize, dx: i32, dy: i32) -> Self {
        OffsetField {
            h,
            w,
            dx: vec![dx; h * w],
            dy: vec![dy; h * w],
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_contract!(
            self.dx.len() == self.h * self.w && self.dy.len() == self.h * self.w,
            "offset field data length {}x{} does not cover {}x{} grid",
            self.dx.len(),
            self.dy.len(),
            self.w,
            self.h
        );
        Ok(())
    }
}

/// Output shape of a 3x3 padded convolution on `[C, H, W]` input.
pub fn conv_out_shape(x: &[usize], w: &[usize], stride: usize) -> Result<Vec<usize>> {
    ensure_contract!(x.len() == 3, "conv2d input must be rank 3, got {:?}", x);
    ensure_contract!(
        w.len() == 4 && w[2] == KERNEL && w[3] == KERNEL,
        "conv2d weight must be [out, in, 3, 3], got {:?}",
        w
    );
    ensure_contract!(
        w[1] == x[0],
        "conv2d weight expects {} input channels, input has {}",
        w[1],
        x[0]
    );
    ensure_contract!(stride == 1 || stride == 2, "conv2d stride must be 1 or 2");
    let out = |n: usize| (n + 2 * PAD as usize - KERNEL) / stride + 1;
    Ok(vec![w[0], out(x[1]), out(x[2])])
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Tensor<T> {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_out = w.shape()[0];
    let (oh, ow) = (
        (h + 2 * PAD as usize - KERNEL) / stride + 1,
        (wd + 2 * PAD as usize - KERNEL) / stride + 1,
    );
    let xd = x.data();
    let wdat = w.data();
    let bd = b.data();
    let mut out = vec![T::ZERO; c_out * oh * ow];

    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bd[o];
                for ci in 0..c_in {
                    let wbase = ((o * c_in + ci) * KERNEL) * KERNEL;
                    let xbase = ci * h * wd;
                    for ky in 0..KERNEL {
                        let iy = (oy * stride) as isize + ky as isize - PAD;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * wd;
                        let wrow = wbase + ky * KERNEL;
                        for kx in 0..KERNEL {
                            let ix = (ox * stride) as isize + kx as isize - PAD;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc = acc + wdat[wrow + kx] * xd[xrow + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor {
        shape: vec![c_out, oh, ow],
        data: out,
    }
}

/// Gradients of a 3x3 padded convolution w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_out = w.shape()[0];
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let xd = x.data();
    let wdat = w.data();
    let god = grad_out.data();

    let mut gx = vec![T::ZERO; xd.len()];
    let mut gw = vec![T::ZERO; wdat.len()];
    let mut gb = vec![T::ZERO; c_out];

    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = god[(o * oh + oy) * ow + ox];
                gb[o] = gb[o] + g;
                for ci in 0..c_in {
                    let wbase = ((o * c_in + ci) * KERNEL) * KERNEL;
                    let xbase = ci * h * wd;
                    for ky in 0..KERNEL {
                        let iy = (oy * stride) as isize + ky as isize - PAD;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * wd;
                        let wrow = wbase + ky * KERNEL;
                        for kx in 0..KERNEL {
                            let ix = (ox * stride) as isize + kx as isize - PAD;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            gx[xrow + ix as usize] = gx[xrow + ix as usize] + wdat[wrow + kx] * g;
                            gw[wrow + kx] = gw[wrow + kx] + xd[xrow + ix as usize] * g;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor {
            shape: x.shape().to_vec(),
            data: gx,
        },
        Tensor {
            shape: w.shape().to_vec(),
            data: gw,
        },
        Tensor {
            shape: vec![c_out],
            data: gb,
        },
    )
}

pub fn leaky_relu_forward<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64(slope);
    x.map(|v| if v >= T::ZERO { v } else { s * v })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64(slope);
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v >= T::ZERO { g } else { s * g })
        .collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::ONE / (T::ONE + (-v).exp()))
}

/// Sigmoid gradient expressed through the forward output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (T::ONE - y))
        .collect();
    Tensor {
        shape: y.shape().to_vec(),
        data,
    }
}

pub fn scale_forward<T: Scalar>(x: &Tensor<T>, k: f64) -> Tensor<T> {
    let k = T::from_f64(k);
    x.map(|v| k * v)
}

pub fn add_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor {
        shape: a.shape().to_vec(),
        data,
    }
}

pub fn mul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor {
        shape: a.shape().to_vec(),
        data,
    }
}

pub fn concat_channels_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (c1, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let c2 = b.shape()[0];
    let mut data = Vec::with_capacity((c1 + c2) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor {
        shape: vec![c1 + c2, h, w],
        data,
    }
}

/// Splits the output gradient back into the two concatenated inputs.
pub fn concat_channels_backward<T: Scalar>(
    c1: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (h, w) = (grad_out.shape()[1], grad_out.shape()[2]);
    let split = c1 * h * w;
    let ga = grad_out.data()[..split].to_vec();
    let gb = grad_out.data()[split..].to_vec();
    let c2 = grad_out.shape()[0] - c1;
    (
        Tensor {
            shape: vec![c1, h, w],
            data: ga,
        },
        Tensor {
            shape: vec![c2, h, w],
            data: gb,
        },
    )
}

/// Depth-to-space by a factor of 2: `[4C, H, W] -> [C, 2H, 2W]`.
pub fn pixel_shuffle_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c4, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c = c4 / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![T::ZERO; c * oh * ow];
    for oc in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let ic = oc * 4 + dy * 2 + dx;
                for y in 0..h {
                    for xcol in 0..w {
                        out[(oc * oh + 2 * y + dy) * ow + 2 * xcol + dx] =
                            xd[(ic * h + y) * w + xcol];
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![c, oh, ow],
        data: out,
    }
}

pub fn pixel_shuffle_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (c, oh, ow) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
    );
    let (h, w) = (oh / 2, ow / 2);
    let god = grad_out.data();
    let mut gx = vec![T::ZERO; 4 * c * h * w];
    for oc in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let ic = oc * 4 + dy * 2 + dx;
                for y in 0..h {
                    for xcol in 0..w {
                        gx[(ic * h + y) * w + xcol] =
                            god[(oc * oh + 2 * y + dy) * ow + 2 * xcol + dx];
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![4 * c, h, w],
        data: gx,
    }
}

/// Gathers source values onto the target grid through an integer offset
/// field, clamping displaced coordinates into the source extent.
pub fn gather_forward<T: Scalar>(src: &Tensor<T>, off: &OffsetField) -> Tensor<T> {
    let (c, sh, sw) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let (h, w) = (off.h, off.w);
    let sd = src.data();
    let mut out = vec![T::ZERO; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sy = (y as i64 + off.dy[i] as i64).clamp(0, sh as i64 - 1) as usize;
            let sx = (x as i64 + off.dx[i] as i64).clamp(0, sw as i64 - 1) as usize;
            for ch in 0..c {
                out[(ch * h + y) * w + x] = sd[(ch * sh + sy) * sw + sx];
            }
        }
    }
    Tensor {
        shape: vec![c, h, w],
        data: out,
    }
}

/// Scatter-adds the target-grid gradient back into the source extent.
pub fn gather_backward<T: Scalar>(
    src_shape: &[usize],
    off: &OffsetField,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (c, sh, sw) = (src_shape[0], src_shape[1], src_shape[2]);
    let (h, w) = (off.h, off.w);
    let god = grad_out.data();
    let mut gx = vec![T::ZERO; c * sh * sw];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sy = (y as i64 + off.dy[i] as i64).clamp(0, sh as i64 - 1) as usize;
            let sx = (x as i64 + off.dx[i] as i64).clamp(0, sw as i64 - 1) as usize;
            for ch in 0..c {
                let g = god[(ch * h + y) * w + x];
                let idx = (ch * sh + sy) * sw + sx;
                gx[idx] = gx[idx] + g;
            }
        }
    }
    Tensor {
        shape: src_shape.to_vec(),
        data: gx,
    }
}

/// Pixel-wise softmax attention over reference keys.
///
/// For each pixel the logit of reference `i` is the channel inner product
/// `<q(:,x,y), k_i(:,x,y)>`; the maps are the max-subtracted softmax over
/// `i`. Output shape `[N, H, W]`.
pub fn attention_forward<T: Scalar>(q: &Tensor<T>, ks: &[&Tensor<T>]) -> Tensor<T> {
    let (c, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let n = ks.len();
    let plane = h * w;
    let qd = q.data();
    let mut out = vec![T::ZERO; n * plane];

    let mut logits = vec![T::ZERO; n];
    for p in 0..plane {
        for (i, k) in ks.iter().enumerate() {
            let kd = k.data();
            let mut dot = T::ZERO;
            for ch in 0..c {
                dot = dot + qd[ch * plane + p] * kd[ch * plane + p];
            }
            logits[i] = dot;
        }
        let mut m = logits[0];
        for &z in &logits[1..] {
            m = m.max(z);
        }
        let mut denom = T::ZERO;
        for i in 0..n {
            let e = (logits[i] - m).exp();
            out[i * plane + p] = e;
            denom = denom + e;
        }
        for i in 0..n {
            out[i * plane + p] = out[i * plane + p] / denom;
        }
    }
    Tensor {
        shape: vec![n, h, w],
        data: out,
    }
}

/// Gradients of [`attention_forward`] w.r.t. the query and each key.
///
/// Uses the softmax jacobian: `dz_i = a_i * (da_i - sum_j a_j * da_j)`,
/// then `dq = sum_i dz_i * k_i` and `dk_i = dz_i * q` per pixel.
pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    ks: &[&Tensor<T>],
    att: &Tensor<T>,
    grad_att: &Tensor<T>,
) -> (Tensor<T>, Vec<Tensor<T>>) {
    let (c, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let n = ks.len();
    let plane = h * w;
    let qd = q.data();
    let ad = att.data();
    let gd = grad_att.data();

    let mut gq = vec![T::ZERO; c * plane];
    let mut gks = vec![vec![T::ZERO; c * plane]; n];

    for p in 0..plane {
        let mut weighted = T::ZERO;
        for j in 0..n {
            weighted = weighted + ad[j * plane + p] * gd[j * plane + p];
        }
        for i in 0..n {
            let dz = ad[i * plane + p] * (gd[i * plane + p] - weighted);
            let kd = ks[i].data();
            let gk = &mut gks[i];
            for ch in 0..c {
                let idx = ch * plane + p;
                gq[idx] = gq[idx] + dz * kd[idx];
                gk[idx] = gk[idx] + dz * qd[idx];
            }
        }
    }
    (
        Tensor {
            shape: q.shape().to_vec(),
            data: gq,
        },
        gks.into_iter()
            .map(|d| Tensor {
                shape: q.shape().to_vec(),
                data: d,
            })
            .collect(),
    )
}

/// Attention-weighted sum of reference values, in reference order:
/// `out(:,x,y) = sum_i att_i(x,y) * v_i(:,x,y)`.
pub fn fuse_forward<T: Scalar>(att: &Tensor<T>, vs: &[&Tensor<T>]) -> Tensor<T> {
    let (c, h, w) = (vs[0].shape()[0], vs[0].shape()[1], vs[0].shape()[2]);
    let plane = h * w;
    let ad = att.data();
    let mut out = vec![T::ZERO; c * plane];
    for (i, v) in vs.iter().enumerate() {
        let vd = v.data();
        for ch in 0..c {
            for p in 0..plane {
                let idx = ch * plane + p;
                out[idx] = out[idx] + ad[i * plane + p] * vd[idx];
            }
        }
    }
    Tensor {
        shape: vec![c, h, w],
        data: out,
    }
}

pub fn fuse_backward<T: Scalar>(
    att: &Tensor<T>,
    vs: &[&Tensor<T>],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Vec<Tensor<T>>) {
    let n = vs.len();
    let (c, h, w) = (vs[0].shape()[0], vs[0].shape()[1], vs[0].shape()[2]);
    let plane = h * w;
    let ad = att.data();
    let gd = grad_out.data();

    let mut gatt = vec![T::ZERO; n * plane];
    let mut gvs = Vec::with_capacity(n);
    for (i, v) in vs.iter().enumerate() {
        let vd = v.data();
        let mut gv = vec![T::ZERO; c * plane];
        for ch in 0..c {
            for p in 0..plane {
                let idx = ch * plane + p;
                gv[idx] = ad[i * plane + p] * gd[idx];
                gatt[i * plane + p] = gatt[i * plane + p] + vd[idx] * gd[idx];
            }
        }
        gvs.push(Tensor {
            shape: v.shape().to_vec(),
            data: gv,
        });
    }
    (
        Tensor {
            shape: att.shape().to_vec(),
            data: gatt,
        },
        gvs,
    )
}

/// Mean absolute difference of two same-shape tensors, as a scalar tensor.
pub fn mean_abs_diff_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let n = T::from_f64(a.len() as f64);
    let sum: T = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .sum();
    Tensor {
        shape: vec![1],
        data: vec![sum / n],
    }
}

/// Subgradient of mean absolute difference: `sign(a - b) / n` into `a`,
/// negated into `b`.
pub fn mean_abs_diff_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: T,
) -> (Tensor<T>, Tensor<T>) {
    let inv_n = grad_out / T::from_f64(a.len() as f64);
    let ga: Vec<T> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            if x > y {
                inv_n
            } else if x < y {
                -inv_n
            } else {
                T::ZERO
            }
        })
        .collect();
    let gb: Vec<T> = ga.iter().map(|&g| -g).collect();
    (
        Tensor {
            shape: a.shape().to_vec(),
            data: ga,
        },
        Tensor {
            shape: b.shape().to_vec(),
            data: gb,
        },
    )
}

/// Shape validators shared by the graph builder and the eager executor.
pub(crate) mod check {
    use crate::error::{ensure_contract, Result};

    pub fn rank3(s: &[usize], op: &str) -> Result<()> {
        ensure_contract!(s.len() == 3, "{op} takes rank-3 tensors, got {s:?}");
        Ok(())
    }

    pub fn same_shape(a: &[usize], b: &[usize], op: &str) -> Result<()> {
        ensure_contract!(a == b, "{op} needs matching shapes, got {a:?} and {b:?}");
        Ok(())
    }

    pub fn concat(a: &[usize], b: &[usize]) -> Result<()> {
        rank3(a, "concat_channels")?;
        rank3(b, "concat_channels")?;
        ensure_contract!(
            a[1..] == b[1..],
            "concat_channels needs matching spatial dims, got {a:?} and {b:?}"
        );
        Ok(())
    }

    pub fn pixel_shuffle(s: &[usize]) -> Result<()> {
        rank3(s, "pixel_shuffle")?;
        ensure_contract!(s[0] % 4 == 0, "pixel_shuffle needs [4C, H, W], got {s:?}");
        Ok(())
    }

    pub fn slope(slope: f64) -> Result<()> {
        ensure_contract!(
            slope > 0.0 && slope < 1.0,
            "leaky_relu slope must lie in (0, 1), got {slope}"
        );
        Ok(())
    }

    pub fn attention(q: &[usize], ks: &[&[usize]]) -> Result<()> {
        rank3(q, "attention")?;
        ensure_contract!(!ks.is_empty(), "attention needs at least one key");
        for (i, k) in ks.iter().enumerate() {
            ensure_contract!(
                *k == q,
                "attention key {i} has shape {k:?}, query has {q:?}"
            );
        }
        Ok(())
    }

    pub fn fuse(att: &[usize], vs: &[&[usize]]) -> Result<()> {
        rank3(att, "fuse")?;
        ensure_contract!(!vs.is_empty(), "fuse needs at least one value");
        ensure_contract!(
            att[0] == vs.len(),
            "fuse attention has {} maps for {} values",
            att[0],
            vs.len()
        );
        for (i, v) in vs.iter().enumerate() {
            rank3(v, "fuse")?;
            ensure_contract!(
                v[1..] == att[1..],
                "fuse value {i} has shape {v:?}, attention grid is {att:?}"
            );
            ensure_contract!(
                *v == vs[0],
                "fuse values disagree on shape: {:?} vs {v:?}",
                vs[0]
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_out_shape_stride_2_halves_odd_and_even() {
        assert_eq!(
            conv_out_shape(&[1, 8, 8], &[4, 1, 3, 3], 2).unwrap(),
            vec![4, 4, 4]
        );
        assert_eq!(
            conv_out_shape(&[1, 7, 9], &[2, 1, 3, 3], 2).unwrap(),
            vec![2, 4, 5]
        );
    }

    #[test]
    fn gather_clamps_out_of_range() {
        let src = Tensor::from_fn(&[1, 2, 3], |i| i as f64);
        let off = OffsetField::uniform(2, 3, 10, 10);
        let out = gather_forward(&src, &off);
        // everything clamps to the bottom-right source element
        assert!(out.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn fuse_single_reference_is_identity() {
        let v = Tensor::from_fn(&[2, 2, 2], |i| i as f64 * 0.5);
        let att = Tensor::filled(&[1, 2, 2], 1.0);
        let out = fuse_forward(&att, &[&v]);
        assert_eq!(out, v);
    }
}
