//! The super-resolution network, written once against the executor trait so
//! the same composition runs on the recording graph (for training and
//! gradient checks) and on the eager backends (for inference and benchmarks).
//!
//! Layout: a content extractor builds target features at 1x, 2x and 4x the
//! low-resolution grid; a reference extractor builds the same pyramid for
//! each high-resolution reference by downscaling. Aligned reference features
//! are fused per scale by reference attention, gated by the spatial filter,
//! merged into the decoder path, and upscaled twice to the 4x output.

use crate::error::{ensure_contract, Result};
use crate::tensor::kernels::OffsetField;
use crate::tensor::{Executor, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub const SCALES: [usize; 3] = [1, 2, 4];

/// Architecture hyperparameters. Everything downstream (parameter shapes,
/// forward composition) is a pure function of this struct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature width of every internal convolution.
    pub channels: usize,
    /// Residual blocks in each feature extractor.
    pub extract_blocks: usize,
    /// Residual blocks per decoder scale.
    pub decoder_blocks: usize,
    /// Negative slope of every leaky rectifier.
    pub slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            extract_blocks: 4,
            decoder_blocks: 2,
            slope: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_contract!(self.channels > 0, "channels must be positive");
        ensure_contract!(
            self.slope > 0.0 && self.slope < 1.0,
            "slope must lie in (0, 1), got {}",
            self.slope
        );
        Ok(())
    }
}

/// Per-reference warp fields mapping each target-grid pixel to its source
/// coordinate offset in the reference feature map, one field per scale.
#[derive(Clone, Debug)]
pub struct ScaleOffsets {
    pub s1: OffsetField,
    pub s2: OffsetField,
    pub s4: OffsetField,
}

impl ScaleOffsets {
    /// No warp: every scale samples its own coordinates.
    pub fn identity(h: usize, w: usize) -> Self {
        ScaleOffsets {
            s1: OffsetField::identity(h, w),
            s2: OffsetField::identity(2 * h, 2 * w),
            s4: OffsetField::identity(4 * h, 4 * w),
        }
    }

    /// A constant translation given in high-resolution pixels, halved at
    /// each coarser scale (rounded to the nearest integer).
    pub fn uniform(h: usize, w: usize, dx_hr: i32, dy_hr: i32) -> Self {
        let half = |v: i32| (f64::from(v) / 2.0).round() as i32;
        let quarter = |v: i32| (f64::from(v) / 4.0).round() as i32;
        ScaleOffsets {
            s1: OffsetField::uniform(h, w, quarter(dx_hr), quarter(dy_hr)),
            s2: OffsetField::uniform(2 * h, 2 * w, half(dx_hr), half(dy_hr)),
            s4: OffsetField::uniform(4 * h, 4 * w, dx_hr, dy_hr),
        }
    }

    pub fn at(&self, scale: usize) -> &OffsetField {
        match scale {
            1 => &self.s1,
            2 => &self.s2,
            _ => &self.s4,
        }
    }

    fn validate_for(&self, h: usize, w: usize) -> Result<()> {
        for (field, s) in [(&self.s1, 1usize), (&self.s2, 2), (&self.s4, 4)] {
            field.validate()?;
            ensure_contract!(
                field.h == s * h && field.w == s * w,
                "offset field at scale {s} covers {}x{}, expected {}x{}",
                field.h,
                field.w,
                s * h,
                s * w
            );
        }
        Ok(())
    }
}

struct ConvSpec {
    name: String,
    c_out: usize,
    c_in: usize,
    zero_init: bool,
}

fn spec(name: String, c_out: usize, c_in: usize) -> ConvSpec {
    ConvSpec { name, c_out, c_in, zero_init: false }
}

/// Every convolution in the network, in a fixed order that also fixes how
/// the seeded initializer consumes randomness.
fn conv_specs(cfg: &ModelConfig) -> Vec<ConvSpec> {
    let c = cfg.channels;
    let mut out = Vec::new();
    out.push(spec("ce.stem".into(), c, 3));
    for j in 0..cfg.extract_blocks {
        out.push(spec(format!("ce.res{j}.c1"), c, c));
        out.push(spec(format!("ce.res{j}.c2"), c, c));
    }
    out.push(spec("ce.up2".into(), 4 * c, c));
    out.push(spec("ce.up4".into(), 4 * c, c));
    out.push(spec("re.stem".into(), c, 3));
    for j in 0..cfg.extract_blocks {
        out.push(spec(format!("re.res{j}.c1"), c, c));
        out.push(spec(format!("re.res{j}.c2"), c, c));
    }
    out.push(spec("re.down2".into(), c, c));
    out.push(spec("re.down1".into(), c, c));
    for s in SCALES {
        out.push(spec(format!("mam{s}.q"), c, c));
        out.push(spec(format!("mam{s}.k"), c, c));
        out.push(spec(format!("mam{s}.v"), c, c));
        out.push(spec(format!("safm{s}.f1.c1"), c, 2 * c));
        out.push(ConvSpec {
            name: format!("safm{s}.f1.c2"),
            c_out: c,
            c_in: c,
            zero_init: true,
        });
        out.push(spec(format!("safm{s}.f2.c1"), c, 2 * c));
        out.push(ConvSpec {
            name: format!("safm{s}.f2.c2"),
            c_out: c,
            c_in: c,
            zero_init: true,
        });
        out.push(spec(format!("dec{s}.merge"), c, 2 * c));
        for j in 0..cfg.decoder_blocks {
            out.push(spec(format!("dec{s}.res{j}.c1"), c, c));
            out.push(spec(format!("dec{s}.res{j}.c2"), c, c));
        }
        if s < 4 {
            out.push(spec(format!("dec{s}.up"), 4 * c, c));
        }
    }
    out.push(spec("tail".into(), 3, c));
    out
}

/// Fresh parameters: weights uniform in +-sqrt(6 / fan_in), biases zero,
/// and the final convolution of each mask head zeroed so the spatial
/// filter starts as the identity. Deterministic in the seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for s in conv_specs(cfg) {
        let wshape = [s.c_out, s.c_in, 3, 3];
        let w = if s.zero_init {
            Tensor::zeros(&wshape)
        } else {
            let bound = (6.0 / (s.c_in * 9) as f64).sqrt();
            Tensor::from_fn(&wshape, |_| rng.gen_range(-bound..bound))
        };
        store.insert(&format!("{}.w", s.name), w)?;
        store.insert(&format!("{}.b", s.name), Tensor::zeros(&[s.c_out]))?;
    }
    Ok(store)
}

fn convl<E: Executor>(ex: &mut E, name: &str, x: &E::V, stride: usize) -> Result<E::V> {
    let w = ex.param(&format!("{name}.w"))?;
    let b = ex.param(&format!("{name}.b"))?;
    ex.conv2d(x, &w, &b, stride)
}

fn res_block<E: Executor>(ex: &mut E, prefix: &str, x: &E::V, slope: f64) -> Result<E::V> {
    let h = convl(ex, &format!("{prefix}.c1"), x, 1)?;
    let h = ex.leaky_relu(&h, slope)?;
    let h = convl(ex, &format!("{prefix}.c2"), &h, 1)?;
    ex.add(x, &h)
}

fn upscale<E: Executor>(ex: &mut E, name: &str, x: &E::V, slope: f64) -> Result<E::V> {
    let h = convl(ex, name, x, 1)?;
    let h = ex.pixel_shuffle(&h)?;
    ex.leaky_relu(&h, slope)
}

/// Target pyramid `[1x, 2x, 4x]` from the low-resolution image feature.
pub fn extract_target<E: Executor>(
    ex: &mut E,
    cfg: &ModelConfig,
    lr: &E::V,
) -> Result<[E::V; 3]> {
    let h = convl(ex, "ce.stem", lr, 1)?;
    let mut f = ex.leaky_relu(&h, cfg.slope)?;
    for j in 0..cfg.extract_blocks {
        f = res_block(ex, &format!("ce.res{j}"), &f, cfg.slope)?;
    }
    let f2 = upscale(ex, "ce.up2", &f, cfg.slope)?;
    let f4 = upscale(ex, "ce.up4", &f2, cfg.slope)?;
    Ok([f, f2, f4])
}

/// Reference pyramid `[1x, 2x, 4x]` relative to the target grid; the
/// native-resolution map comes first through the residual stack and the
/// coarser maps through strided convolutions.
pub fn extract_reference<E: Executor>(
    ex: &mut E,
    cfg: &ModelConfig,
    hr: &E::V,
) -> Result<[E::V; 3]> {
    let h = convl(ex, "re.stem", hr, 1)?;
    let mut f = ex.leaky_relu(&h, cfg.slope)?;
    for j in 0..cfg.extract_blocks {
        f = res_block(ex, &format!("re.res{j}"), &f, cfg.slope)?;
    }
    let d2 = convl(ex, "re.down2", &f, 2)?;
    let f2 = ex.leaky_relu(&d2, cfg.slope)?;
    let d1 = convl(ex, "re.down1", &f2, 2)?;
    let f1 = ex.leaky_relu(&d1, cfg.slope)?;
    Ok([f1, f2, f])
}

/// Reference attention at one scale: shared key/value projections over the
/// aligned references, per-pixel softmax against the target query.
pub fn mam_exec<E: Executor>(
    ex: &mut E,
    scale: usize,
    f_lr: &E::V,
    refs: &[E::V],
) -> Result<E::V> {
    ensure_contract!(!refs.is_empty(), "attention needs at least one reference");
    let q = convl(ex, &format!("mam{scale}.q"), f_lr, 1)?;
    let mut ks = Vec::with_capacity(refs.len());
    let mut vs = Vec::with_capacity(refs.len());
    for r in refs {
        ks.push(convl(ex, &format!("mam{scale}.k"), r, 1)?);
        vs.push(convl(ex, &format!("mam{scale}.v"), r, 1)?);
    }
    let att = ex.attention(&q, &ks)?;
    ex.fuse(&att, &vs)
}

/// Spatial filtering at one scale: gate the fused reference feature with a
/// bounded multiplicative mask and an additive mask, both computed from the
/// target feature and the fused feature side by side.
pub fn safm_exec<E: Executor>(
    ex: &mut E,
    cfg: &ModelConfig,
    scale: usize,
    f_lr: &E::V,
    f_fref: &E::V,
) -> Result<E::V> {
    let joint = ex.concat_channels(f_lr, f_fref)?;
    let h = convl(ex, &format!("safm{scale}.f1.c1"), &joint, 1)?;
    let h = ex.leaky_relu(&h, cfg.slope)?;
    let raw = convl(ex, &format!("safm{scale}.f1.c2"), &h, 1)?;
    let sig = ex.sigmoid(&raw)?;
    let mul = ex.scale(&sig, 2.0)?;
    let h = convl(ex, &format!("safm{scale}.f2.c1"), &joint, 1)?;
    let h = ex.leaky_relu(&h, cfg.slope)?;
    let add = convl(ex, &format!("safm{scale}.f2.c2"), &h, 1)?;
    let gated = ex.mul(f_fref, &mul)?;
    ex.add(&gated, &add)
}

/// Full forward pass. `lr` is `[3, H, W]` on `[0, 1]`; each reference is
/// `[3, Hr, Wr]` with dimensions divisible by 4; `offsets[i]` warps
/// reference `i` onto the target grid at every scale. With no references
/// the fused feature is zero and the network falls back to single-image
/// upscaling. Output is `[3, 4H, 4W]`, unclamped.
pub fn forward_sr_exec<E: Executor>(
    ex: &mut E,
    cfg: &ModelConfig,
    lr: &Tensor,
    refs: &[Tensor],
    offsets: &[ScaleOffsets],
) -> Result<E::V> {
    cfg.validate()?;
    ensure_contract!(
        lr.shape().len() == 3 && lr.shape()[0] == 3,
        "low-resolution input must be [3, H, W], got {:?}",
        lr.shape()
    );
    ensure_contract!(
        refs.len() == offsets.len(),
        "{} references but {} offset sets",
        refs.len(),
        offsets.len()
    );
    let (h, w) = (lr.shape()[1], lr.shape()[2]);
    for (i, r) in refs.iter().enumerate() {
        ensure_contract!(
            r.shape().len() == 3 && r.shape()[0] == 3,
            "reference {i} must be [3, H, W], got {:?}",
            r.shape()
        );
        ensure_contract!(
            r.shape()[1] % 4 == 0 && r.shape()[2] % 4 == 0,
            "reference {i} dimensions {:?} must be divisible by 4",
            &r.shape()[1..]
        );
        offsets[i].validate_for(h, w)?;
    }

    let lr_v = ex.input(lr)?;
    let target = extract_target(ex, cfg, &lr_v)?;
    // References stream through one at a time: each pyramid and its aligned
    // features are dropped as soon as the per-scale key/value projections
    // exist, so resident memory grows with the target grid rather than with
    // the combined reference area.
    let mut ks: [Vec<E::V>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut vs: [Vec<E::V>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (r, off) in refs.iter().zip(offsets) {
        let rv = ex.input(r)?;
        let feats = extract_reference(ex, cfg, &rv)?;
        for (si, s) in SCALES.into_iter().enumerate() {
            let al = ex.gather(&feats[si], off.at(s))?;
            ks[si].push(convl(ex, &format!("mam{s}.k"), &al, 1)?);
            vs[si].push(convl(ex, &format!("mam{s}.v"), &al, 1)?);
        }
    }

    let mut d = target[0].clone();
    for (si, s) in SCALES.into_iter().enumerate() {
        let f_lr = &target[si];
        let f_sref = if refs.is_empty() {
            let zshape = ex.shape(f_lr);
            ex.zeros(&zshape)
        } else {
            let q = convl(ex, &format!("mam{s}.q"), f_lr, 1)?;
            let att = ex.attention(&q, &ks[si])?;
            ks[si].clear();
            let f_fref = ex.fuse(&att, &vs[si])?;
            vs[si].clear();
            safm_exec(ex, cfg, s, f_lr, &f_fref)?
        };
        let joint = ex.concat_channels(&d, &f_sref)?;
        let m = convl(ex, &format!("dec{s}.merge"), &joint, 1)?;
        d = ex.leaky_relu(&m, cfg.slope)?;
        for j in 0..cfg.decoder_blocks {
            d = res_block(ex, &format!("dec{s}.res{j}"), &d, cfg.slope)?;
        }
        if s < 4 {
            d = upscale(ex, &format!("dec{s}.up"), &d, cfg.slope)?;
        }
    }
    convl(ex, "tail", &d, 1)
}

/// Inputs for the whole-model numeric gradient verification. The default
/// is the canonical small setup: an 8x8 low-resolution target, two 16x16
/// references with distinct warps, and reduced widths so central
/// differences over every parameter stay affordable.
#[derive(Clone, Debug)]
pub struct CheckSetup {
    pub model: ModelConfig,
    pub lr_size: usize,
    pub ref_size: usize,
    pub n_refs: usize,
    pub seed: u64,
}

impl Default for CheckSetup {
    fn default() -> Self {
        CheckSetup {
            model: ModelConfig {
                channels: 2,
                extract_blocks: 1,
                decoder_blocks: 1,
                slope: 0.1,
            },
            lr_size: 8,
            ref_size: 16,
            n_refs: 2,
            seed: 0,
        }
    }
}

/// Checks the analytic backward pass of the full network against central
/// differences, parameter by parameter. The zero-initialized mask tails
/// are replaced with live values so every gradient is probed away from the
/// identity point. `corrupt` deliberately falsifies one analytic gradient
/// entry; a sound detector must then report a large error.
pub fn check_model_gradients(
    setup: &CheckSetup,
    corrupt: bool,
) -> Result<crate::tensor::GradCheckReport> {
    use crate::tensor::{grad_check, GraphExec};
    setup.model.validate()?;
    ensure_contract!(setup.lr_size > 0, "lr_size must be positive");
    ensure_contract!(
        setup.ref_size > 0 && setup.ref_size % 4 == 0,
        "ref_size must be a positive multiple of 4"
    );
    let full = init_params(&setup.model, setup.seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(setup.seed.wrapping_add(101));
    let mut store = ParamStore::new();
    for name in full.names() {
        let t = full.value(name)?;
        let live = if name.starts_with("safm") && name.ends_with(".c2.w") {
            t.map(|_| rng.gen_range(-0.3..0.3))
        } else {
            t.clone()
        };
        store.insert(name, live)?;
    }
    let (h, w) = (setup.lr_size, setup.lr_size);
    let lr = Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0));
    let refs: Vec<Tensor> = (0..setup.n_refs)
        .map(|_| Tensor::from_fn(&[3, setup.ref_size, setup.ref_size], |_| rng.gen_range(0.0..1.0)))
        .collect();
    let offsets: Vec<ScaleOffsets> = (0..setup.n_refs)
        .map(|i| ScaleOffsets::uniform(h, w, 4 * i as i32 - 2, 2 - 4 * i as i32))
        .collect();
    let target = Tensor::from_fn(&[3, 4 * h, 4 * w], |_| rng.gen_range(0.0..1.0));
    let cfg = setup.model.clone();
    let mut eval = move |st: &ParamStore, want: bool| {
        let mut gx = GraphExec::new(st);
        let out = forward_sr_exec(&mut gx, &cfg, &lr, &refs, &offsets)?;
        let t = gx.input(&target)?;
        let loss = gx.mean_abs_diff(&out, &t)?;
        let lv = gx.value(loss).data()[0];
        if want {
            let grads = gx.backward(loss)?;
            let mut pg = gx.param_grads(&grads);
            if corrupt {
                pg[0].1.data_mut()[0] += 1.0;
            }
            Ok((lv, Some(pg)))
        } else {
            Ok((lv, None))
        }
    };
    grad_check(&mut store, 1e-5, &mut eval)
}
