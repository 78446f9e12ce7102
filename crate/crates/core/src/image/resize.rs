//! Bicubic resampling with the cubic-convolution kernel, a = -0.5.
//!
//! Coordinates map center-aligned: source position of output pixel `o` is
//! `(o + 0.5) * ratio - 0.5`. On downscale the kernel is widened by the
//! scale ratio (antialias). Out-of-range taps read the clamped edge pixel;
//! per-axis tap weights are normalized to sum 1.

use super::ImageRgb;
use crate::error::{ensure_contract, Result};

/// Rational resize factor `num / den`. `4/1` is the restoration upscale,
/// `1/4` the matching degradation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scale {
    num: u32,
    den: u32,
}

impl Scale {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        ensure_contract!(
            num >= 1 && den >= 1,
            "scale must be a positive rational, got {num}/{den}"
        );
        Ok(Scale { num, den })
    }

    pub fn up(factor: u32) -> Self {
        Scale {
            num: factor.max(1),
            den: 1,
        }
    }

    pub fn down(factor: u32) -> Self {
        Scale {
            num: 1,
            den: factor.max(1),
        }
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    fn apply(&self, extent: usize) -> Result<usize> {
        let scaled = extent as u64 * self.num as u64;
        ensure_contract!(
            scaled % self.den as u64 == 0,
            "extent {extent} is not divisible under scale {}/{}",
            self.num,
            self.den
        );
        let out = scaled / self.den as u64;
        ensure_contract!(out >= 1, "scale {}/{} collapses extent {extent}", self.num, self.den);
        Ok(out as usize)
    }
}

/// Cubic convolution kernel with a = -0.5 (support 2).
fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Tap start index and normalized weights for one output coordinate.
struct Taps {
    start: i64,
    weights: Vec<f64>,
}

fn axis_taps(src_n: usize, out_n: usize) -> Vec<Taps> {
    let ratio = src_n as f64 / out_n as f64;
    let sratio = ratio.max(1.0);
    let support = 2.0 * sratio;
    (0..out_n)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let start = (center - support).ceil() as i64;
            let end = (center + support).floor() as i64;
            let mut weights: Vec<f64> =
                (start..=end).map(|i| cubic((i as f64 - center) / sratio)).collect();
            let sum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= sum;
            }
            Taps { start, weights }
        })
        .collect()
}

fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Resamples to arbitrary target dimensions. Shared by the public rational
/// resize and the duplicate-detection path that compares mismatched sizes.
pub(crate) fn resize_to(img: &ImageRgb, out_w: usize, out_h: usize) -> Result<ImageRgb> {
    ensure_contract!(
        out_w > 0 && out_h > 0,
        "target dimensions must be positive, got {out_w}x{out_h}"
    );
    let (sw, sh) = (img.width(), img.height());
    let tx = axis_taps(sw, out_w);
    let ty = axis_taps(sh, out_h);
    let mut data = Vec::with_capacity(3 * out_w * out_h);
    for oy in 0..out_h {
        let yt = &ty[oy];
        for ox in 0..out_w {
            let xt = &tx[ox];
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, &wy) in yt.weights.iter().enumerate() {
                    let sy = clamp_idx(yt.start + j as i64, sh);
                    for (i, &wx) in xt.weights.iter().enumerate() {
                        let sx = clamp_idx(xt.start + i as i64, sw);
                        acc += wy * wx * img.pixel(sx, sy)[c] as f64;
                    }
                }
                data.push(acc.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageRgb::new(out_w, out_h, data)
}

/// Resizes by a rational factor. Source dimensions must divide exactly
/// under the factor (the 4x degradation therefore requires multiples of 4).
pub fn bicubic_resize(img: &ImageRgb, scale: Scale) -> Result<ImageRgb> {
    let out_w = scale.apply(img.width())?;
    let out_h = scale.apply(img.height())?;
    resize_to(img, out_w, out_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Independent resampler: recomputes kernel taps per output pixel with
    /// no precomputed tables, same mapping and normalization rules.
    fn oracle_resize(img: &ImageRgb, out_w: usize, out_h: usize) -> ImageRgb {
        let (sw, sh) = (img.width(), img.height());
        let (rx, ry) = (sw as f64 / out_w as f64, sh as f64 / out_h as f64);
        let (fx, fy) = (rx.max(1.0), ry.max(1.0));
        let mut data = Vec::new();
        for oy in 0..out_h {
            let cy = (oy as f64 + 0.5) * ry - 0.5;
            let (y0, y1) = ((cy - 2.0 * fy).ceil() as i64, (cy + 2.0 * fy).floor() as i64);
            let wys: Vec<f64> = (y0..=y1).map(|j| cubic((j as f64 - cy) / fy)).collect();
            let ysum: f64 = wys.iter().sum();
            let wys: Vec<f64> = wys.iter().map(|w| w / ysum).collect();
            for ox in 0..out_w {
                let cx = (ox as f64 + 0.5) * rx - 0.5;
                let (x0, x1) =
                    ((cx - 2.0 * fx).ceil() as i64, (cx + 2.0 * fx).floor() as i64);
                let wxs: Vec<f64> = (x0..=x1).map(|i| cubic((i as f64 - cx) / fx)).collect();
                let xsum: f64 = wxs.iter().sum();
                let wxs: Vec<f64> = wxs.iter().map(|w| w / xsum).collect();
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (j, &wy) in wys.iter().enumerate() {
                        let sy = (y0 + j as i64).clamp(0, sh as i64 - 1) as usize;
                        for (i, &wx) in wxs.iter().enumerate() {
                            let sx = (x0 + i as i64).clamp(0, sw as i64 - 1) as usize;
                            acc += wy * wx * img.pixel(sx, sy)[c] as f64;
                        }
                    }
                    data.push(acc.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        ImageRgb::new(out_w, out_h, data).unwrap()
    }

    fn random_image(w: usize, h: usize, seed: u64) -> ImageRgb {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = (0..3 * w * h).map(|_| rng.gen()).collect();
        ImageRgb::new(w, h, data).unwrap()
    }

    #[test]
    fn constant_stays_constant_under_every_supported_scale() {
        let img = ImageRgb::constant(12, 12, [77, 140, 9]).unwrap();
        for scale in [
            Scale::up(2),
            Scale::up(4),
            Scale::down(2),
            Scale::down(4),
            Scale::new(3, 2).unwrap(),
            Scale::new(2, 3).unwrap(),
            Scale::new(1, 1).unwrap(),
        ] {
            let out = bicubic_resize(&img, scale).unwrap();
            assert!(
                out.data().chunks_exact(3).all(|p| p == [77, 140, 9]),
                "not constant under {scale:?}"
            );
        }
    }

    #[test]
    fn downscale_of_horizontal_ramp_samples_patch_centers() {
        // value 4x along x gives a clean linear ramp over 64 columns
        let mut img = ImageRgb::constant(64, 64, [0, 0, 0]).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let v = (4 * x).min(255) as u8;
                img.set_pixel(x, y, [v, v, v]);
            }
        }
        let out = bicubic_resize(&img, Scale::down(4)).unwrap();
        for x in 2..14 {
            // center of output patch x sits at source column 4x + 1.5
            let want = 4.0 * (4.0 * x as f64 + 1.5);
            let got = out.pixel(x, 8)[0] as f64;
            assert!(
                (got - want).abs() <= 1.0,
                "ramp at {x}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn downscale_matches_independent_oracle_exactly() {
        let img = random_image(64, 64, 99);
        let got = bicubic_resize(&img, Scale::down(4)).unwrap();
        let want = oracle_resize(&img, 16, 16);
        assert_eq!(got, want);
    }

    #[test]
    fn upscale_and_odd_ratios_match_oracle_exactly() {
        let img = random_image(18, 12, 100);
        for (scale, ow, oh) in [
            (Scale::up(4), 72, 48),
            (Scale::up(2), 36, 24),
            (Scale::new(3, 2).unwrap(), 27, 18),
            (Scale::new(2, 3).unwrap(), 12, 8),
        ] {
            let got = bicubic_resize(&img, scale).unwrap();
            let want = oracle_resize(&img, ow, oh);
            assert_eq!(got, want, "mismatch at {scale:?}");
        }
    }

    #[test]
    fn indivisible_downscale_is_rejected() {
        let img = random_image(10, 8, 3);
        assert!(bicubic_resize(&img, Scale::down(4)).is_err());
        assert!(bicubic_resize(&img, Scale::new(1, 3).unwrap()).is_err());
    }

    #[test]
    fn down_then_up_round_trip_stays_close_on_smooth_content() {
        // smooth gradient: the 4x round trip should reconstruct within a
        // few code values away from edges
        let mut img = ImageRgb::constant(32, 32, [0, 0, 0]).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let v = (128.0 + 60.0 * ((x as f64) / 31.0 - 0.5)
                    + 40.0 * ((y as f64) / 31.0 - 0.5)) as u8;
                img.set_pixel(x, y, [v, v, v]);
            }
        }
        let small = bicubic_resize(&img, Scale::down(4)).unwrap();
        let back = bicubic_resize(&small, Scale::up(4)).unwrap();
        for y in 4..28 {
            for x in 4..28 {
                let d = (back.pixel(x, y)[0] as i32 - img.pixel(x, y)[0] as i32).abs();
                assert!(d <= 3, "round trip drifted {d} at ({x},{y})");
            }
        }
    }
}
