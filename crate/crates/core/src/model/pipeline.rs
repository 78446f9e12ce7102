//! Training and evaluation around the network: reference-group samples,
//! feature alignment, the reconstruction loss, optimizer steps, and the
//! metric evaluation used to compare reference counts against the
//! single-image bicubic baseline.

use crate::error::{ensure_contract, Error, Result};
use crate::image::{bicubic_resize, psnr_y, rgb_to_y, ssim_y, ImageRgb, Scale};
use crate::model::net::{forward_sr_exec, ModelConfig, ScaleOffsets};
use crate::model::MrefsrModel;
use crate::tensor::kernels::{self, OffsetField};
use crate::tensor::{diverged, AdamConfig, EagerExec, Executor, GraphExec, Tensor};

/// One supervised sample: the low-resolution input, its ground-truth
/// high-resolution target, the reference images, and optional warp fields
/// (identity alignment when absent).
#[derive(Clone, Debug)]
pub struct RefGroupSample {
    pub lr: ImageRgb,
    pub hr: ImageRgb,
    pub refs: Vec<ImageRgb>,
    pub offsets: Option<Vec<ScaleOffsets>>,
}

impl RefGroupSample {
    pub fn validate(&self) -> Result<()> {
        ensure_contract!(
            self.hr.width() == 4 * self.lr.width()
                && self.hr.height() == 4 * self.lr.height(),
            "target is {}x{}, expected 4x the {}x{} input",
            self.hr.width(),
            self.hr.height(),
            self.lr.width(),
            self.lr.height()
        );
        for (i, r) in self.refs.iter().enumerate() {
            ensure_contract!(
                r.width() % 4 == 0 && r.height() % 4 == 0,
                "reference {i} is {}x{}, dimensions must be divisible by 4",
                r.width(),
                r.height()
            );
        }
        if let Some(offs) = &self.offsets {
            ensure_contract!(
                offs.len() == self.refs.len(),
                "{} offset sets for {} references",
                offs.len(),
                self.refs.len()
            );
        }
        Ok(())
    }

    /// Warp fields for the first `n` references, identity when unset.
    fn offsets_for(&self, n: usize) -> Vec<ScaleOffsets> {
        let (h, w) = (self.lr.height(), self.lr.width());
        match &self.offsets {
            Some(offs) => offs[..n].to_vec(),
            None => (0..n).map(|_| ScaleOffsets::identity(h, w)).collect(),
        }
    }
}

/// Warps one feature map with a per-pixel offset field via nearest-neighbor
/// gather with border clamping.
pub fn align_reference(feat: &Tensor, off: &OffsetField) -> Result<Tensor> {
    ensure_contract!(
        feat.shape().len() == 3,
        "feature to align must be [C, H, W], got {:?}",
        feat.shape()
    );
    off.validate()?;
    Ok(kernels::gather_forward(feat, off))
}

/// Mean absolute difference between two images of equal size, measured on
/// intensities normalized to `[0, 1]`.
pub fn l_rec(pred: &ImageRgb, target: &ImageRgb) -> Result<f64> {
    ensure_contract!(
        pred.width() == target.width() && pred.height() == target.height(),
        "image sizes differ: {}x{} vs {}x{}",
        pred.width(),
        pred.height(),
        target.width(),
        target.height()
    );
    let n = pred.data().len();
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| ((f64::from(a) - f64::from(b)) / 255.0).abs())
        .sum();
    Ok(sum / n as f64)
}

/// Super-resolve with the first `n_refs` references of the sample.
pub fn forward_sr_n(sample: &RefGroupSample, model: &MrefsrModel, n_refs: usize) -> Result<ImageRgb> {
    sample.validate()?;
    ensure_contract!(
        n_refs <= sample.refs.len(),
        "asked for {n_refs} references, sample holds {}",
        sample.refs.len()
    );
    let lr_t = sample.lr.to_tensor();
    let refs_t: Vec<Tensor> = sample.refs[..n_refs].iter().map(|r| r.to_tensor()).collect();
    let offs = sample.offsets_for(n_refs);
    let mut ex = EagerExec::<f64>::new(&model.store);
    let out = forward_sr_exec(&mut ex, &model.config, &lr_t, &refs_t, &offs)?;
    ImageRgb::from_tensor(&out)
}

/// Super-resolve with every reference in the sample.
pub fn forward_sr(sample: &RefGroupSample, model: &MrefsrModel) -> Result<ImageRgb> {
    forward_sr_n(sample, model, sample.refs.len())
}

/// Loss weights and optimization hyperparameters plus the architecture,
/// everything a training run is a function of. The perceptual and
/// adversarial weights are carried in the config but their terms are not
/// part of this implementation; only the reconstruction term contributes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_rec: f64,
    pub lambda_per: f64,
    pub lambda_adv: f64,
    pub channels: usize,
    pub extract_blocks: usize,
    pub decoder_blocks: usize,
    pub slope: f64,
    pub lr_patch: usize,
    pub n_refs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 1000,
            batch_size: 4,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda_rec: 1.0,
            lambda_per: 1e-4,
            lambda_adv: 1e-6,
            channels: 32,
            extract_blocks: 4,
            decoder_blocks: 2,
            slope: 0.1,
            lr_patch: 40,
            n_refs: 5,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            extract_blocks: self.extract_blocks,
            decoder_blocks: self.decoder_blocks,
            slope: self.slope,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys and malformed values are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Contract(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| Error::Contract(format!("line {}: {e}", lineno + 1));
            macro_rules! set {
                ($field:ident, $ty:ty) => {
                    cfg.$field = value
                        .parse::<$ty>()
                        .map_err(|e| bad(format!("bad value for {key}: {e}")))?
                };
            }
            match key {
                "seed" => set!(seed, u64),
                "steps" => set!(steps, usize),
                "batch_size" => set!(batch_size, usize),
                "lr" => set!(lr, f64),
                "beta1" => set!(beta1, f64),
                "beta2" => set!(beta2, f64),
                "eps" => set!(eps, f64),
                "lambda_rec" => set!(lambda_rec, f64),
                "lambda_per" => set!(lambda_per, f64),
                "lambda_adv" => set!(lambda_adv, f64),
                "channels" => set!(channels, usize),
                "extract_blocks" => set!(extract_blocks, usize),
                "decoder_blocks" => set!(decoder_blocks, usize),
                "slope" => set!(slope, f64),
                "lr_patch" => set!(lr_patch, usize),
                "n_refs" => set!(n_refs, usize),
                _ => return Err(bad(format!("unknown key {key}"))),
            }
        }
        Ok(cfg)
    }
}

/// One optimizer step over a batch. Builds the recording graph per sample,
/// averages parameter gradients across the batch, and applies one Adam
/// update. Returns the batch loss (the weighted reconstruction term).
/// Fails with a divergence error if the loss stops being finite.
pub fn train_step(
    model: &mut MrefsrModel,
    batch: &[RefGroupSample],
    cfg: &TrainConfig,
) -> Result<f64> {
    ensure_contract!(!batch.is_empty(), "training batch must not be empty");
    for s in batch {
        s.validate()?;
        ensure_contract!(
            !s.refs.is_empty(),
            "training samples need at least one reference"
        );
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    for sample in batch {
        let lr_t = sample.lr.to_tensor();
        let hr_t = sample.hr.to_tensor();
        let refs_t: Vec<Tensor> = sample.refs.iter().map(|r| r.to_tensor()).collect();
        let offs = sample.offsets_for(sample.refs.len());
        let mut gx = GraphExec::new(&model.store);
        let out = forward_sr_exec(&mut gx, &model.config, &lr_t, &refs_t, &offs)?;
        let target = gx.input(&hr_t)?;
        let rec = gx.mean_abs_diff(&out, &target)?;
        let loss = gx.scale(&rec, cfg.lambda_rec)?;
        let lv = gx.value(loss).data()[0];
        if !lv.is_finite() {
            model.store.clear_grads();
            return Err(diverged(model.store.step_count() + 1, lv));
        }
        let grads = gx.backward(loss)?;
        loss_sum += lv;
        for (name, g) in gx.param_grads(&grads) {
            model.store.accumulate_grad(&name, &g.map(|v| v * scale))?;
        }
    }
    let loss = loss_sum * scale;
    if !loss.is_finite() {
        model.store.clear_grads();
        return Err(diverged(model.store.step_count() + 1, loss));
    }
    model.store.adam_step(&cfg.adam())?;
    Ok(loss)
}

/// Per-step training record, one line of the run log.
#[derive(Clone, Debug, serde::Serialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Runs `cfg.steps` optimizer steps, cycling through `samples` in fixed
/// order with `cfg.batch_size` samples per step. Returns the final loss.
pub fn train_loop(
    model: &mut MrefsrModel,
    samples: &[RefGroupSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<f64> {
    ensure_contract!(!samples.is_empty(), "need at least one training sample");
    ensure_contract!(cfg.batch_size > 0, "batch size must be positive");
    let mut cursor = 0usize;
    let mut last = f64::NAN;
    for _ in 0..cfg.steps {
        let batch: Vec<RefGroupSample> = (0..cfg.batch_size)
            .map(|j| samples[(cursor + j) % samples.len()].clone())
            .collect();
        cursor = (cursor + cfg.batch_size) % samples.len();
        last = train_step(model, &batch, cfg)?;
        on_step(&StepLog {
            step: model.store.step_count(),
            loss: last,
            lr: cfg.lr,
        });
    }
    Ok(last)
}

/// Luma metrics of one reconstruction against the ground truth.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct EvalResult {
    pub psnr: f64,
    pub ssim: f64,
}

/// Evaluates the model on a sample using its first `n_refs` references.
pub fn eval_group(sample: &RefGroupSample, model: &MrefsrModel, n_refs: usize) -> Result<EvalResult> {
    let sr = forward_sr_n(sample, model, n_refs)?;
    let (ya, yb) = (rgb_to_y(&sr), rgb_to_y(&sample.hr));
    Ok(EvalResult {
        psnr: psnr_y(&ya, &yb)?,
        ssim: ssim_y(&ya, &yb)?,
    })
}

/// Metrics of plain bicubic upscaling on the same sample, the
/// reference-free baseline every run is compared against.
pub fn bicubic_baseline(sample: &RefGroupSample) -> Result<EvalResult> {
    sample.validate()?;
    let up = bicubic_resize(&sample.lr, Scale::up(4))?;
    let (ya, yb) = (rgb_to_y(&up), rgb_to_y(&sample.hr));
    Ok(EvalResult {
        psnr: psnr_y(&ya, &yb)?,
        ssim: ssim_y(&ya, &yb)?,
    })
}
