//! Y-channel PSNR and SSIM, the two scores of the evaluation protocol.

use super::ImageY;
use crate::error::{ensure_contract, Result};

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 255.0;

/// Peak signal-to-noise ratio in dB over the luminance plane:
/// `10 log10(255^2 / MSE)`. Identical images return `f64::INFINITY`;
/// callers exclude the sentinel from averages and report a count instead.
pub fn psnr_y(a: &ImageY, b: &ImageY) -> Result<f64> {
    ensure_contract!(
        a.width() == b.width() && a.height() == b.height(),
        "psnr_y dimension mismatch: {}x{} vs {}x{}",
        a.width(),
        a.height(),
        b.width(),
        b.height()
    );
    let n = a.data().len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / mse).log10())
}

/// Normalized 11-tap Gaussian, sigma 1.5.
fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-window Gaussian filter: output is (h-10) x (w-10).
fn filter_valid(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_window();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kw) in k.iter().enumerate() {
                acc += kw * src[y * w + x + i];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, &kw) in k.iter().enumerate() {
                acc += kw * horiz[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean structural similarity over all valid 11x11 windows with the
/// standard Gaussian weighting and constants K1 = 0.01, K2 = 0.03 at
/// dynamic range 255.
pub fn ssim_y(a: &ImageY, b: &ImageY) -> Result<f64> {
    ensure_contract!(
        a.width() == b.width() && a.height() == b.height(),
        "ssim_y dimension mismatch: {}x{} vs {}x{}",
        a.width(),
        a.height(),
        b.width(),
        b.height()
    );
    ensure_contract!(
        a.width() >= SSIM_WINDOW && a.height() >= SSIM_WINDOW,
        "ssim_y needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
        a.width(),
        a.height()
    );
    let (w, h) = (a.width(), a.height());
    let ax = a.data();
    let bx = b.data();
    let sq = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * x).collect() };
    let prod: Vec<f64> = ax.iter().zip(bx).map(|(&x, &y)| x * y).collect();

    let mu_a = filter_valid(ax, w, h);
    let mu_b = filter_valid(bx, w, h);
    let raw_aa = filter_valid(&sq(ax), w, h);
    let raw_bb = filter_valid(&sq(bx), w, h);
    let raw_ab = filter_valid(&prod, w, h);

    let c1 = (K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (K2 * DYNAMIC_RANGE).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = raw_aa[i] - ma * ma;
        let vb = raw_bb[i] - mb * mb;
        let cov = raw_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}
