//! Deterministic synthetic reference groups for overfit runs, reference
//! sweeps, and benchmarks. Each group is built from one procedural
//! high-resolution target; every reference carries the true content of one
//! vertical stripe of that target, translated by a known shift and embedded
//! in noise, with the matching warp fields recorded on the sample. Stripes
//! partition the target, so each extra reference covers new ground.

use crate::error::{ensure_contract, Result};
use crate::image::ImageRgb;
use crate::model::net::ScaleOffsets;
use crate::model::pipeline::RefGroupSample;
use crate::image::{bicubic_resize, Scale};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::f64::consts::TAU;

/// Frequency content of the generated targets. Smooth targets survive
/// bicubic downscaling almost intact; textured ones carry high-frequency
/// detail that only the references can restore.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Smooth,
    Textured,
}

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    /// Side of the square low-resolution input; the target is 4x this.
    pub lr_size: usize,
    /// References per group.
    pub n_refs: usize,
    pub texture: Texture,
    /// Amplitude of the noise filling reference pixels outside their stripe.
    pub noise: f64,
    /// Reference shifts are drawn as multiples of this many target pixels,
    /// keeping the per-scale warp fields exact after halving twice.
    pub shift_step: i32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            lr_size: 16,
            n_refs: 5,
            texture: Texture::Textured,
            noise: 0.2,
            shift_step: 4,
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn render_target(size: usize, texture: Texture, rng: &mut ChaCha20Rng) -> ImageRgb {
    let mut waves = Vec::new();
    for _ in 0..3 {
        let base = (
            rng.gen_range(1.0..3.0),
            rng.gen_range(1.0..3.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        );
        let fine = (
            rng.gen_range(8.0..16.0),
            rng.gen_range(8.0..16.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        );
        waves.push((base, fine));
    }
    let mut data = vec![0u8; size * size * 3];
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            for (c, (base, fine)) in waves.iter().enumerate() {
                let lowx = (TAU * (base.0 * x as f64 / s + base.2)).sin();
                let lowy = (TAU * (base.1 * y as f64 / s + base.3)).sin();
                let mut v = 0.5 + 0.3 * lowx * lowy;
                if texture == Texture::Textured {
                    let hix = (TAU * (fine.0 * x as f64 / s + fine.2)).sin();
                    let hiy = (TAU * (fine.1 * y as f64 / s + fine.3)).sin();
                    v += 0.18 * hix * hiy;
                }
                data[(y * size + x) * 3 + c] = quantize(v);
            }
        }
    }
    ImageRgb::new(size, size, data).unwrap()
}

/// One reference: the target stripe `[x0, x1)` translated by `(sx, sy)`,
/// every other pixel filled with gray noise.
fn render_reference(
    hr: &ImageRgb,
    x0: usize,
    x1: usize,
    sx: i32,
    sy: i32,
    noise: f64,
    rng: &mut ChaCha20Rng,
) -> ImageRgb {
    let size = hr.width();
    let mut img = ImageRgb::constant(size, size, [128, 128, 128]).unwrap();
    for v in 0..size {
        for u in 0..size {
            let tx = u as i64 - i64::from(sx);
            let ty = v as i64 - i64::from(sy);
            let covered = tx >= 0
                && ty >= 0
                && (tx as usize) < size
                && (ty as usize) < size
                && (tx as usize) >= x0
                && (tx as usize) < x1;
            let px = if covered {
                hr.pixel(tx as usize, ty as usize)
            } else {
                let mut p = [0u8; 3];
                for ch in &mut p {
                    *ch = quantize(0.5 + noise * rng.gen_range(-1.0..1.0));
                }
                p
            };
            img.set_pixel(u, v, px);
        }
    }
    img
}

/// Builds one reference group. Deterministic in `(cfg, seed)`.
pub fn synthetic_group(cfg: &SyntheticConfig, seed: u64) -> Result<RefGroupSample> {
    ensure_contract!(cfg.lr_size >= 2, "target too small: lr side {}", cfg.lr_size);
    ensure_contract!(
        cfg.shift_step > 0 && cfg.shift_step % 4 == 0,
        "shift step must be a positive multiple of 4, got {}",
        cfg.shift_step
    );
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let hr_size = 4 * cfg.lr_size;
    let hr = render_target(hr_size, cfg.texture, &mut rng);
    let lr = bicubic_resize(&hr, Scale::down(4))?;
    let mut refs = Vec::with_capacity(cfg.n_refs);
    let mut offsets = Vec::with_capacity(cfg.n_refs);
    for i in 0..cfg.n_refs {
        let x0 = i * hr_size / cfg.n_refs.max(1);
        let x1 = (i + 1) * hr_size / cfg.n_refs.max(1);
        // keep the stripe horizontally inside the reference frame, snapping
        // back to a multiple of the step after clamping
        let sx = cfg.shift_step * rng.gen_range(-2..=2);
        let sx = sx.clamp(-(x0 as i32), (hr_size - x1) as i32);
        let sx = (sx / cfg.shift_step) * cfg.shift_step;
        let sy = cfg.shift_step * rng.gen_range(-2..=2);
        refs.push(render_reference(&hr, x0, x1, sx, sy, cfg.noise, &mut rng));
        offsets.push(ScaleOffsets::uniform(cfg.lr_size, cfg.lr_size, sx, sy));
    }
    let sample = RefGroupSample {
        lr,
        hr,
        refs,
        offsets: Some(offsets),
    };
    sample.validate()?;
    Ok(sample)
}

/// A deterministic set of groups with distinct content per group.
pub fn synthetic_set(cfg: &SyntheticConfig, count: usize, seed: u64) -> Result<Vec<RefGroupSample>> {
    (0..count)
        .map(|i| synthetic_group(cfg, seed.wrapping_add(i as u64)))
        .collect()
}
