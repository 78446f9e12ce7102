//! Forward-pass cost measurement across reference counts. For every
//! requested count the harness times the per-reference attention path and a
//! stitched baseline that glues the same references side by side into one
//! wide image processed as a single reference. Peak heap usage comes from
//! the counting allocator when a binary has installed it; otherwise the
//! rows are marked untracked.

use super::net::{forward_sr_exec, init_params, ModelConfig, ScaleOffsets};
use crate::alloc_track::TrackingAlloc;
use crate::error::{ensure_contract, Result};
use crate::tensor::{EagerExec, Precision, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub model: ModelConfig,
    /// Side length of the square low-resolution target.
    pub lr_size: usize,
    /// Side length of each square reference; must be divisible by 4.
    pub ref_size: usize,
    /// Reference counts to measure, one table entry per count.
    pub n_refs: Vec<usize>,
    /// Timed repetitions per entry; the median is reported.
    pub repeats: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: ModelConfig {
                channels: 16,
                extract_blocks: 2,
                decoder_blocks: 1,
                slope: 0.1,
            },
            lr_size: 24,
            ref_size: 128,
            n_refs: vec![1, 2, 3, 4, 5],
            repeats: 3,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        ensure_contract!(self.lr_size > 0, "lr_size must be positive");
        ensure_contract!(
            self.ref_size > 0 && self.ref_size % 4 == 0,
            "ref_size must be a positive multiple of 4, got {}",
            self.ref_size
        );
        ensure_contract!(!self.n_refs.is_empty(), "n_refs list is empty");
        ensure_contract!(
            self.n_refs.iter().all(|&n| n >= 1),
            "every entry of n_refs must be at least 1"
        );
        ensure_contract!(self.repeats >= 1, "repeats must be at least 1");
        Ok(())
    }
}

/// One measured table entry.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    /// "attention" for the per-reference path, "stitched" for the baseline.
    pub mode: String,
    pub n_refs: usize,
    pub median_ms: f64,
    /// High-water heap bytes over the run, minus the bytes live at entry.
    pub peak_bytes: usize,
    /// False when the counting allocator is not installed; peak_bytes is
    /// then meaningless.
    pub tracked: bool,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Concatenate equally-sized references side by side into one wide image.
pub fn stitch_refs(refs: &[Tensor]) -> Result<Tensor> {
    ensure_contract!(!refs.is_empty(), "nothing to stitch");
    let shape = refs[0].shape().to_vec();
    ensure_contract!(shape.len() == 3, "references must be [C, H, W]");
    for r in refs {
        ensure_contract!(
            r.shape() == shape.as_slice(),
            "stitching needs equally sized references, got {:?} and {:?}",
            shape,
            r.shape()
        );
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Tensor::zeros(&[c, h, w * refs.len()]);
    for (i, r) in refs.iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *out.at3_mut(ch, y, i * w + x) = r.at3(ch, y, x);
                }
            }
        }
    }
    Ok(out)
}

fn run_once<T: Scalar>(
    cfg: &BenchConfig,
    store: &crate::tensor::ParamStore,
    lr: &Tensor,
    refs: &[Tensor],
    offsets: &[ScaleOffsets],
) -> Result<()> {
    let mut ex = EagerExec::<T>::new(store);
    let out = forward_sr_exec(&mut ex, &cfg.model, lr, refs, offsets)?;
    drop(out);
    Ok(())
}

fn measure(
    cfg: &BenchConfig,
    store: &crate::tensor::ParamStore,
    lr: &Tensor,
    refs: &[Tensor],
    offsets: &[ScaleOffsets],
) -> Result<(f64, usize)> {
    let mut times = Vec::with_capacity(cfg.repeats);
    let mut peak = 0usize;
    for _ in 0..cfg.repeats {
        let floor = TrackingAlloc::current_bytes();
        TrackingAlloc::reset_peak();
        let t0 = Instant::now();
        match cfg.precision {
            Precision::F32 => run_once::<f32>(cfg, store, lr, refs, offsets)?,
            Precision::F64 => run_once::<f64>(cfg, store, lr, refs, offsets)?,
        }
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        peak = peak.max(TrackingAlloc::peak_bytes().saturating_sub(floor));
    }
    Ok((median(times), peak))
}

/// Run the full table: for each requested reference count, one attention
/// row over that many distinct references and one stitched row over the
/// same references glued into a single wide image. Parameters are freshly
/// initialized from the seed.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let store = init_params(&cfg.model, cfg.seed)?;
    run_bench_with(cfg, &store)
}

/// Same table over caller-provided parameters; `cfg.model` must describe
/// them.
pub fn run_bench_with(cfg: &BenchConfig, store: &crate::tensor::ParamStore) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let max_n = *cfg.n_refs.iter().max().unwrap();
    let lr = Tensor::from_fn(&[3, cfg.lr_size, cfg.lr_size], |_| rng.gen_range(0.0..1.0));
    let refs: Vec<Tensor> = (0..max_n)
        .map(|_| {
            Tensor::from_fn(&[3, cfg.ref_size, cfg.ref_size], |_| rng.gen_range(0.0..1.0))
        })
        .collect();
    let tracked = {
        TrackingAlloc::reset_peak();
        let probe: Vec<u8> = vec![0u8; 1 << 16];
        drop(probe);
        TrackingAlloc::active()
    };

    let mut rows = Vec::new();
    for &n in &cfg.n_refs {
        let slice = &refs[..n];
        let offs: Vec<ScaleOffsets> = (0..n)
            .map(|_| ScaleOffsets::identity(cfg.lr_size, cfg.lr_size))
            .collect();
        let (ms, peak) = measure(cfg, &store, &lr, slice, &offs)?;
        rows.push(BenchRow {
            mode: "attention".into(),
            n_refs: n,
            median_ms: ms,
            peak_bytes: peak,
            tracked,
        });

        let wide = stitch_refs(slice)?;
        let woffs = vec![ScaleOffsets::identity(cfg.lr_size, cfg.lr_size)];
        let (ms, peak) = measure(cfg, &store, &lr, &[wide], &woffs)?;
        rows.push(BenchRow {
            mode: "stitched".into(),
            n_refs: n,
            median_ms: ms,
            peak_bytes: peak,
            tracked,
        });
    }
    Ok(rows)
}
