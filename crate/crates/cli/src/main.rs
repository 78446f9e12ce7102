//! mrefsr: one entry point for dataset construction, reference fusion,
//! evaluation, gradient verification, toy training and scaling benchmarks.
//!
//! Machine-readable output is line-delimited JSON on stdout (or `--out`);
//! diagnostics go to stderr, gated by `MREFSR_LOG={error,info,debug}`.
//! Exit codes: 0 success, 1 contract violation, 2 I/O failure.

use clap::{Args, Parser, Subcommand};
use mrefsr_core::alloc_track::TrackingAlloc;
use mrefsr_core::error::{Error, Result};
use mrefsr_core::image::ImageRgb;
use mrefsr_core::lmr::{build_dataset, list_groups, load_group, BuildConfig, SceneInput, SceneManifest};
use mrefsr_core::model::pipeline::{
    bicubic_baseline, eval_group, train_loop, RefGroupSample, TrainConfig,
};
use mrefsr_core::model::synthetic::{synthetic_set, SyntheticConfig};
use mrefsr_core::model::{
    check_model_gradients, forward_sr_exec, run_bench_with, BenchConfig, CheckSetup, ModelConfig,
    MrefsrModel, ScaleOffsets,
};
use mrefsr_core::tensor::{EagerExec, Precision, Tensor};
use rayon::prelude::*;
use serde_json::json;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[global_allocator]
static ALLOC: TrackingAlloc = TrackingAlloc::new();

const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "mrefsr", version, about = "Multi-reference super-resolution toolkit")]
struct Cli {
    /// Worker threads for parallel sections; 0 keeps the automatic count.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Seed for anything randomized (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Numeric width of eager evaluation: f32 or f64. Fusion and
    /// evaluation default to f64, benchmarks to f32.
    #[arg(long, global = true)]
    precision: Option<String>,

    /// Reference counts: a single value for fuse/eval/gradcheck, a
    /// comma-separated list for bench.
    #[arg(long, global = true, value_delimiter = ',')]
    n_refs: Option<Vec<usize>>,

    /// Stop dataset construction after this many groups (0 = unlimited);
    /// also truncates the group list loaded for training.
    #[arg(long, global = true)]
    cap: Option<usize>,

    /// Optimizer step count override for train-toy.
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Output destination; each command documents its default.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a patch-group dataset from scene manifests.
    BuildDataset(BuildDatasetArgs),
    /// Fuse any number of references into a 4x super-resolved PNG.
    Fuse(FuseArgs),
    /// Score a dataset with a checkpoint; optionally sweep reference counts.
    Eval(EvalArgs),
    /// Verify analytic gradients of the whole model against central differences.
    Gradcheck(GradcheckArgs),
    /// Train at toy scale on synthetic or prebuilt groups.
    TrainToy(TrainToyArgs),
    /// Measure forward wall time and peak heap across reference counts.
    Bench(BenchArgs),
}

#[derive(Args)]
struct BuildDatasetArgs {
    /// Scene manifest JSON files; image paths resolve next to each manifest.
    #[arg(required = true)]
    manifests: Vec<PathBuf>,

    /// Crop attempts per eligible target image.
    #[arg(long, default_value_t = 1)]
    groups_per_target: usize,
}

#[derive(Args)]
struct FuseArgs {
    /// Low-resolution input PNG; dimensions become 4x on output.
    #[arg(long)]
    lr: PathBuf,

    /// Model checkpoint to run.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Reference PNGs, any count including none; dimensions must be
    /// divisible by 4.
    refs: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory produced by build-dataset.
    #[arg(long)]
    dataset: PathBuf,

    /// Model checkpoint; not needed with --identity.
    #[arg(long, required_unless_present = "identity")]
    checkpoint: Option<PathBuf>,

    /// Emit one mean row per reference count from 1 to 5.
    #[arg(long)]
    sweep: bool,

    /// Also score plain bicubic upsampling of every group.
    #[arg(long)]
    baseline_bicubic: bool,

    /// Score each stored target against itself instead of running the
    /// model (pipeline diagnostic).
    #[arg(long)]
    identity: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Feature width of the verified model.
    #[arg(long, default_value_t = 2)]
    channels: usize,

    #[arg(long, default_value_t = 1)]
    extract_blocks: usize,

    #[arg(long, default_value_t = 1)]
    decoder_blocks: usize,

    /// Side of the square low-resolution input.
    #[arg(long, default_value_t = 8)]
    lr_size: usize,

    /// Side of each square reference.
    #[arg(long, default_value_t = 16)]
    ref_size: usize,

    /// Falsify one analytic gradient entry so the detector must fire.
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct TrainToyArgs {
    /// key = value training configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Generate procedurally textured groups whose references carry
    /// shifted crops of the target.
    #[arg(long)]
    synthetic: bool,

    /// Train on a prebuilt dataset directory instead.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,

    /// Synthetic group count.
    #[arg(long, default_value_t = 2)]
    groups: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint to measure; omitted means a seeded fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Timed repetitions per table entry; the median is reported.
    #[arg(long, default_value_t = 3)]
    repeats: usize,

    /// Side of the square low-resolution input.
    #[arg(long, default_value_t = 24)]
    lr_size: usize,

    /// Side of each square reference.
    #[arg(long, default_value_t = 128)]
    ref_size: usize,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MREFSR_LOG", "error"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    }
    match &cli.cmd {
        Cmd::BuildDataset(a) => cmd_build_dataset(&cli, a),
        Cmd::Fuse(a) => cmd_fuse(&cli, a),
        Cmd::Eval(a) => cmd_eval(&cli, a),
        Cmd::Gradcheck(a) => cmd_gradcheck(&cli, a),
        Cmd::TrainToy(a) => cmd_train_toy(&cli, a),
        Cmd::Bench(a) => cmd_bench(&cli, a),
    }
}

/// stdout or the --out file, line-buffered JSON.
fn report_sink(cli: &Cli) -> Result<Box<dyn Write>> {
    match &cli.out {
        Some(p) => {
            let f = File::create(p)
                .map_err(|e| Error::io_msg(format!("cannot create {}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(std::io::stdout().lock())),
    }
}

fn emit(sink: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    writeln!(sink, "{value}").map_err(Error::Io)
}

/// Infinite values (identical images) serialize as the string "inf" so
/// every line stays valid JSON.
fn db_json(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!("inf")
    }
}

fn parse_precision(cli: &Cli, default: Precision) -> Result<Precision> {
    match &cli.precision {
        Some(s) => s.parse(),
        None => Ok(default),
    }
}

fn single_n(cli: &Cli) -> Result<Option<usize>> {
    match &cli.n_refs {
        None => Ok(None),
        Some(v) if v.len() == 1 => Ok(Some(v[0])),
        Some(v) => Err(Error::Contract(format!(
            "this command takes one --n-refs value, got {v:?}"
        ))),
    }
}

fn scene_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().to_string());
    match stem {
        Some(s) if s != "manifest" => s,
        _ => path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "scene".to_string()),
    }
}

fn cmd_build_dataset(cli: &Cli, args: &BuildDatasetArgs) -> Result<()> {
    let mut scenes = Vec::new();
    for path in &args.manifests {
        let manifest = SceneManifest::load(path)?;
        let image_root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        scenes.push(SceneInput {
            name: scene_name(path),
            manifest,
            image_root,
        });
    }
    for i in 1..scenes.len() {
        if scenes[..i].iter().any(|s| s.name == scenes[i].name) {
            return Err(Error::Contract(format!(
                "duplicate scene name '{}'; rename the manifest or its directory",
                scenes[i].name
            )));
        }
    }
    let cap = cli.cap.unwrap_or(0);
    let cfg = BuildConfig {
        out_dir: cli.out.clone().unwrap_or_else(|| PathBuf::from("lmr-dataset")),
        seed: cli.seed.unwrap_or(0),
        cap,
        groups_per_target: args.groups_per_target,
    };
    let report = build_dataset(&scenes, &cfg)?;
    let mut sink = std::io::stdout().lock();
    for s in &report.scenes {
        emit(&mut sink, &serde_json::to_value(s).map_err(|e| Error::Serial(e.to_string()))?)?;
    }
    emit(&mut sink, &json!({ "groups_total": report.groups_total, "out_dir": cfg.out_dir }))?;
    if report.groups_total == 0 && cap > 0 {
        return Err(Error::Contract(
            "no groups could be emitted from the given scenes".into(),
        ));
    }
    Ok(())
}

fn cmd_fuse(cli: &Cli, args: &FuseArgs) -> Result<()> {
    let precision = parse_precision(cli, Precision::F64)?;
    let model = MrefsrModel::load(&args.checkpoint)?;
    let lr = ImageRgb::load_png(&args.lr)?;
    let mut refs = Vec::new();
    for p in &args.refs {
        refs.push(ImageRgb::load_png(p)?);
    }
    if let Some(n) = single_n(cli)? {
        if n > refs.len() {
            return Err(Error::Contract(format!(
                "--n-refs {n} but only {} references given",
                refs.len()
            )));
        }
        refs.truncate(n);
    }
    let lr_t = lr.to_tensor();
    let refs_t: Vec<Tensor> = refs.iter().map(|r| r.to_tensor()).collect();
    let offs: Vec<ScaleOffsets> = refs
        .iter()
        .map(|_| ScaleOffsets::identity(lr.height(), lr.width()))
        .collect();
    let sr = match precision {
        Precision::F64 => {
            let mut ex = EagerExec::<f64>::new(&model.store);
            let out = forward_sr_exec(&mut ex, &model.config, &lr_t, &refs_t, &offs)?;
            ImageRgb::from_tensor(&out)?
        }
        Precision::F32 => {
            let mut ex = EagerExec::<f32>::new(&model.store);
            let out = forward_sr_exec(&mut ex, &model.config, &lr_t, &refs_t, &offs)?;
            ImageRgb::from_tensor(&out.cast::<f64>())?
        }
    };
    let out_path = cli.out.clone().unwrap_or_else(|| PathBuf::from("sr.png"));
    sr.save_png(&out_path)?;
    log::info!(
        "fused {} references into {} ({}x{})",
        refs.len(),
        out_path.display(),
        sr.width(),
        sr.height()
    );
    Ok(())
}

struct LoadedGroup {
    id: String,
    sample: RefGroupSample,
}

fn load_dataset(dir: &Path) -> Result<(Vec<LoadedGroup>, usize)> {
    let dirs = list_groups(dir)?;
    let loaded: Vec<(String, Result<RefGroupSample>)> = dirs
        .par_iter()
        .map(|d| {
            let id = d
                .strip_prefix(dir)
                .unwrap_or(d)
                .to_string_lossy()
                .to_string();
            (id, load_group(d))
        })
        .collect();
    let mut groups = Vec::new();
    let mut skipped = 0usize;
    for (id, r) in loaded {
        match r {
            Ok(sample) => groups.push(LoadedGroup { id, sample }),
            Err(e) => {
                log::warn!("skipping group {id}: {e}");
                skipped += 1;
            }
        }
    }
    Ok((groups, skipped))
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let (groups, skipped) = load_dataset(&args.dataset)?;
    if groups.is_empty() {
        return Err(Error::Contract(format!(
            "no usable groups under {}",
            args.dataset.display()
        )));
    }
    let model = match &args.checkpoint {
        Some(p) => Some(MrefsrModel::load(p)?),
        None => None,
    };
    let mut sink = report_sink(cli)?;

    let counts: Vec<usize> = if args.sweep {
        (1..=5).collect()
    } else {
        let max = groups.iter().map(|g| g.sample.refs.len()).min().unwrap_or(0);
        vec![single_n(cli)?.unwrap_or(max)]
    };

    if args.identity {
        let scores: Vec<_> = groups
            .par_iter()
            .map(|g| {
                let y = mrefsr_core::image::rgb_to_y(&g.sample.hr);
                let psnr = mrefsr_core::image::psnr_y(&y, &y)?;
                let ssim = mrefsr_core::image::ssim_y(&y, &y)?;
                Ok((psnr, ssim))
            })
            .collect::<Result<_>>()?;
        for (g, (psnr, ssim)) in groups.iter().zip(&scores) {
            emit(
                &mut sink,
                &json!({"group": g.id, "mode": "identity", "psnr_db": db_json(*psnr), "ssim": ssim}),
            )?;
        }
        let mean_psnr = scores.iter().map(|s| s.0).sum::<f64>() / scores.len() as f64;
        let mean_ssim = scores.iter().map(|s| s.1).sum::<f64>() / scores.len() as f64;
        emit(
            &mut sink,
            &json!({"mode": "identity", "groups": groups.len(), "skipped": skipped,
                    "mean_psnr_db": db_json(mean_psnr), "mean_ssim": mean_ssim}),
        )?;
    }

    if args.baseline_bicubic {
        let scores: Vec<_> = groups
            .par_iter()
            .map(|g| bicubic_baseline(&g.sample))
            .collect::<Result<_>>()?;
        for (g, r) in groups.iter().zip(&scores) {
            emit(
                &mut sink,
                &json!({"group": g.id, "mode": "bicubic", "psnr_db": db_json(r.psnr), "ssim": r.ssim}),
            )?;
        }
        let mean_psnr = scores.iter().map(|s| s.psnr).sum::<f64>() / scores.len() as f64;
        let mean_ssim = scores.iter().map(|s| s.ssim).sum::<f64>() / scores.len() as f64;
        emit(
            &mut sink,
            &json!({"mode": "bicubic", "groups": groups.len(), "skipped": skipped,
                    "mean_psnr_db": db_json(mean_psnr), "mean_ssim": mean_ssim}),
        )?;
    }

    if let Some(model) = &model {
        for &n in &counts {
            let scores: Vec<_> = groups
                .par_iter()
                .map(|g| eval_group(&g.sample, model, n))
                .collect::<Result<_>>()?;
            if !args.sweep {
                for (g, r) in groups.iter().zip(&scores) {
                    emit(
                        &mut sink,
                        &json!({"group": g.id, "mode": "model", "n_refs": n,
                                "psnr_db": db_json(r.psnr), "ssim": r.ssim}),
                    )?;
                }
            }
            let mean_psnr = scores.iter().map(|s| s.psnr).sum::<f64>() / scores.len() as f64;
            let mean_ssim = scores.iter().map(|s| s.ssim).sum::<f64>() / scores.len() as f64;
            emit(
                &mut sink,
                &json!({"mode": "model", "n_refs": n, "groups": groups.len(), "skipped": skipped,
                        "mean_psnr_db": db_json(mean_psnr), "mean_ssim": mean_ssim}),
            )?;
        }
    }
    sink.flush().map_err(Error::Io)
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs) -> Result<()> {
    let setup = CheckSetup {
        model: ModelConfig {
            channels: args.channels,
            extract_blocks: args.extract_blocks,
            decoder_blocks: args.decoder_blocks,
            slope: 0.1,
        },
        lr_size: args.lr_size,
        ref_size: args.ref_size,
        n_refs: single_n(cli)?.unwrap_or(2),
        seed: cli.seed.unwrap_or(0),
    };
    let report = check_model_gradients(&setup, args.corrupt)?;
    let mut sink = report_sink(cli)?;
    for p in &report.per_param {
        emit(
            &mut sink,
            &json!({"param": p.name, "rel_err": p.rel_err, "index": p.index,
                    "analytic": p.analytic, "numeric": p.numeric}),
        )?;
    }
    let pass = report.max_rel_err <= GRAD_TOLERANCE;
    emit(
        &mut sink,
        &json!({"max_rel_err": report.max_rel_err, "tolerance": GRAD_TOLERANCE, "pass": pass}),
    )?;
    sink.flush().map_err(Error::Io)?;
    if pass {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "worst gradient error {:.3e} exceeds {GRAD_TOLERANCE:e}",
            report.max_rel_err
        )))
    }
}

fn cmd_train_toy(cli: &Cli, args: &TrainToyArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io_msg(format!("cannot read {}: {e}", p.display())))?;
            TrainConfig::from_kv(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.steps {
        cfg.steps = s;
    }

    let samples: Vec<RefGroupSample> = if args.synthetic {
        let syn = SyntheticConfig {
            lr_size: cfg.lr_patch,
            n_refs: cfg.n_refs,
            ..SyntheticConfig::default()
        };
        synthetic_set(&syn, args.groups.max(1), cfg.seed)?
    } else if let Some(dir) = &args.dataset {
        let (groups, _) = load_dataset(dir)?;
        let mut v: Vec<RefGroupSample> = groups.into_iter().map(|g| g.sample).collect();
        if let Some(cap) = cli.cap {
            if cap > 0 {
                v.truncate(cap);
            }
        }
        v
    } else {
        return Err(Error::Contract(
            "pass --synthetic or --dataset <dir>".into(),
        ));
    };

    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("train-out"));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Error::io_msg(format!("cannot create {}: {e}", out_dir.display())))?;
    let trace_path = out_dir.join("trace.jsonl");
    let ckpt_path = out_dir.join("model.bin");

    let mut model = MrefsrModel::init(cfg.model(), cfg.seed)?;
    let trace = File::create(&trace_path)
        .map_err(|e| Error::io_msg(format!("cannot create {}: {e}", trace_path.display())))?;
    let mut trace = BufWriter::new(trace);
    let trained = if cfg.steps > 0 {
        let mut write_err = None;
        let r = train_loop(&mut model, &samples, &cfg, |log| {
            if write_err.is_none() {
                if let Err(e) = serde_json::to_writer(&mut trace, log)
                    .map_err(|e| Error::Serial(e.to_string()))
                    .and_then(|()| writeln!(trace).map_err(Error::Io))
                {
                    write_err = Some(e);
                }
            }
        });
        trace.flush().map_err(Error::Io)?;
        if let Some(e) = write_err {
            return Err(e);
        }
        Some(r?)
    } else {
        trace.flush().map_err(Error::Io)?;
        None
    };
    model.save(&ckpt_path)?;
    let mut sink = std::io::stdout().lock();
    emit(
        &mut sink,
        &json!({"steps": cfg.steps, "samples": samples.len(),
                "final_loss": trained, "checkpoint": ckpt_path,
                "trace": trace_path}),
    )?;
    Ok(())
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> Result<()> {
    let mut cfg = BenchConfig {
        lr_size: args.lr_size,
        ref_size: args.ref_size,
        repeats: args.repeats,
        seed: cli.seed.unwrap_or(0),
        precision: parse_precision(cli, Precision::F32)?,
        ..BenchConfig::default()
    };
    if let Some(list) = &cli.n_refs {
        cfg.n_refs = list.clone();
    }
    let loaded = match &args.checkpoint {
        Some(p) => Some(MrefsrModel::load(p)?),
        None => None,
    };
    let rows = match &loaded {
        Some(m) => {
            cfg.model = m.config.clone();
            run_bench_with(&cfg, &m.store)?
        }
        None => mrefsr_core::model::run_bench(&cfg)?,
    };
    let mut sink = report_sink(cli)?;
    for row in &rows {
        emit(
            &mut sink,
            &serde_json::to_value(row).map_err(|e| Error::Serial(e.to_string()))?,
        )?;
    }
    sink.flush().map_err(Error::Io)
}
