//! Dataset assembly: score every image pair per scene, label candidates,
//! cut patch groups, and write the on-disk corpus with full provenance.
//! Scenes are independent and processed in parallel; everything written is
//! deterministic in the manifests and the seed.

use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::lmr::crop::{crop_patch_group, GroupRecord, PatchGroup, RefCandidate, PATCH};
use crate::lmr::manifest::SceneManifest;
use crate::lmr::stats::{compute_pair_stats, Label};
use crate::model::pipeline::RefGroupSample;
use crate::image::{bicubic_resize, Scale};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Reference file names inside a group directory, canonical label order.
pub const REF_FILES: [&str; 5] = [
    "ref_h1.png",
    "ref_m1.png",
    "ref_m2.png",
    "ref_l1.png",
    "ref_l2.png",
];

#[derive(Clone, Debug)]
pub struct SceneInput {
    pub name: String,
    pub manifest: SceneManifest,
    /// Directory the manifest's image paths are relative to.
    pub image_root: PathBuf,
}

#[derive(Clone, Debug)]
pub struct BuildConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Stop after this many groups in total; zero means no cap.
    pub cap: usize,
    /// Crop attempts per eligible target image.
    pub groups_per_target: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            out_dir: PathBuf::from("lmr-dataset"),
            seed: 0,
            cap: 0,
            groups_per_target: 1,
        }
    }
}

/// Per-scene tally, one line of the stats report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneStats {
    pub scene: String,
    pub pairs_total: usize,
    pub rejected_dup: usize,
    pub h: usize,
    pub m: usize,
    pub l: usize,
    pub groups_emitted: usize,
    pub groups_unsatisfiable: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetReport {
    pub scenes: Vec<SceneStats>,
    pub groups_total: usize,
}

struct SceneOutput {
    stats: SceneStats,
    groups: Vec<PatchGroup>,
}

fn process_scene(input: &SceneInput, seed: u64, groups_per_target: usize) -> Result<SceneOutput> {
    input.manifest.validate()?;
    let mut images: BTreeMap<u64, ImageRgb> = BTreeMap::new();
    for im in &input.manifest.images {
        let path = input.image_root.join(&im.path);
        match ImageRgb::load_png(&path) {
            Ok(img) => {
                images.insert(im.id, img);
            }
            Err(e) => {
                log::warn!("scene {}: skipping unreadable image {}: {e}", input.name, im.id);
            }
        }
    }

    let observed: BTreeSet<u64> = input
        .manifest
        .points3d
        .iter()
        .flat_map(|p| p.observations.iter().map(|o| o.image_id))
        .collect();

    let mut stats = SceneStats {
        scene: input.name.clone(),
        pairs_total: 0,
        rejected_dup: 0,
        h: 0,
        m: 0,
        l: 0,
        groups_emitted: 0,
        groups_unsatisfiable: 0,
    };
    let mut groups = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    for target_meta in &input.manifest.images {
        let target_id = target_meta.id;
        let Some(target_img) = images.get(&target_id) else { continue };
        if !observed.contains(&target_id) {
            log::info!("scene {}: target {target_id} observes nothing, skipped", input.name);
            continue;
        }
        let mut candidates = Vec::new();
        for ref_meta in &input.manifest.images {
            if ref_meta.id == target_id {
                continue;
            }
            let Some(ref_img) = images.get(&ref_meta.id) else { continue };
            let pair = compute_pair_stats(
                target_img,
                ref_img,
                &input.manifest,
                target_id,
                ref_meta.id,
            )?;
            stats.pairs_total += 1;
            match pair.label {
                Label::Rejected => stats.rejected_dup += 1,
                Label::H => stats.h += 1,
                Label::M => stats.m += 1,
                Label::L => stats.l += 1,
            }
            if pair.label != Label::Rejected {
                candidates.push(RefCandidate { image: ref_img.clone(), stats: pair });
            }
        }
        for _ in 0..groups_per_target {
            match crop_patch_group(target_img, target_id, &candidates, &input.manifest, &mut rng)? {
                Some(g) => {
                    stats.groups_emitted += 1;
                    groups.push(g);
                }
                None => stats.groups_unsatisfiable += 1,
            }
        }
    }
    if stats.groups_emitted == 0 {
        log::info!("scene {}: no valid groups", input.name);
    }
    Ok(SceneOutput { stats, groups })
}

fn write_group(dir: &Path, group: &PatchGroup) -> Result<GroupRecord> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io_msg(format!("cannot create {}: {e}", dir.display())))?;
    group.target.save_png(&dir.join("target.png"))?;
    for (file, r) in REF_FILES.iter().zip(&group.refs) {
        r.image.save_png(&dir.join(file))?;
    }
    let scene = dir
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let record = group.record(&scene, &name);
    let meta = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::Serial(format!("meta encode failed: {e}")))?;
    std::fs::write(dir.join("meta.json"), meta)
        .map_err(|e| Error::io_msg(format!("cannot write meta.json: {e}")))?;
    Ok(record)
}

/// Runs the full pipeline and writes the dataset directory:
/// `<out>/<scene>/group_NNNNNN/{target.png, ref_*.png, meta.json}` plus
/// `index.jsonl` (one provenance record per group) and `stats.jsonl` (one
/// tally per scene) at the root.
pub fn build_dataset(scenes: &[SceneInput], cfg: &BuildConfig) -> Result<DatasetReport> {
    let outputs: Vec<Result<SceneOutput>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let scene_seed = cfg
                .seed
                .wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            process_scene(s, scene_seed, cfg.groups_per_target.max(1))
        })
        .collect();

    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io_msg(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let mut index = std::io::BufWriter::new(
        std::fs::File::create(cfg.out_dir.join("index.jsonl"))
            .map_err(|e| Error::io_msg(format!("cannot create index.jsonl: {e}")))?,
    );
    let mut stats_file = std::io::BufWriter::new(
        std::fs::File::create(cfg.out_dir.join("stats.jsonl"))
            .map_err(|e| Error::io_msg(format!("cannot create stats.jsonl: {e}")))?,
    );

    let mut report = DatasetReport { scenes: Vec::new(), groups_total: 0 };
    'scenes: for (scene, output) in scenes.iter().zip(outputs) {
        let mut output = output?;
        for (j, group) in output.groups.iter().enumerate() {
            if cfg.cap > 0 && report.groups_total >= cfg.cap {
                output.stats.groups_emitted = j;
                break;
            }
            let dir = cfg
                .out_dir
                .join(&scene.name)
                .join(format!("group_{:06}", report.groups_total));
            let record = write_group(&dir, group)?;
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Serial(format!("index encode failed: {e}")))?;
            writeln!(index, "{line}").map_err(|e| Error::io_msg(format!("index write: {e}")))?;
            report.groups_total += 1;
        }
        let line = serde_json::to_string(&output.stats)
            .map_err(|e| Error::Serial(format!("stats encode failed: {e}")))?;
        writeln!(stats_file, "{line}").map_err(|e| Error::io_msg(format!("stats write: {e}")))?;
        report.scenes.push(output.stats);
        if cfg.cap > 0 && report.groups_total >= cfg.cap {
            for rest in scenes.iter().skip(report.scenes.len()) {
                log::info!("cap reached, scene {} not written", rest.name);
            }
            break 'scenes;
        }
    }
    index.flush().map_err(|e| Error::io_msg(format!("index flush: {e}")))?;
    stats_file.flush().map_err(|e| Error::io_msg(format!("stats flush: {e}")))?;
    Ok(report)
}

/// Image ids a provenance index touches, qualified as `scene:id`.
pub fn index_image_ids(records: &[GroupRecord]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for r in records {
        out.insert(format!("{}:{}", r.scene, r.target_id));
        for rf in &r.refs {
            out.insert(format!("{}:{}", r.scene, rf.source_id));
        }
    }
    out
}

/// Ids present in both splits; a valid split reports none.
pub fn check_split_disjointness(train: &BTreeSet<String>, test: &BTreeSet<String>) -> Vec<String> {
    train.intersection(test).cloned().collect()
}

/// Reads `index.jsonl` back into records.
pub fn load_index(dataset_dir: &Path) -> Result<Vec<GroupRecord>> {
    let path = dataset_dir.join("index.jsonl");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::io_msg(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Serial(format!("bad index line: {e}")))
        })
        .collect()
}

/// Loads one group directory as an evaluation sample: the stored target
/// patch is the ground truth, its 4x bicubic downscale is the input, and
/// the five stored references come in canonical label order.
pub fn load_group(dir: &Path) -> Result<RefGroupSample> {
    let hr = ImageRgb::load_png(&dir.join("target.png"))?;
    if hr.width() != PATCH || hr.height() != PATCH {
        return Err(Error::Contract(format!(
            "group target is {}x{}, expected {PATCH}x{PATCH}",
            hr.width(),
            hr.height()
        )));
    }
    let lr = bicubic_resize(&hr, Scale::down(4))?;
    let mut refs = Vec::with_capacity(REF_FILES.len());
    for f in REF_FILES {
        refs.push(ImageRgb::load_png(&dir.join(f))?);
    }
    let sample = RefGroupSample { lr, hr, refs, offsets: None };
    sample.validate()?;
    Ok(sample)
}

/// Group directories of a dataset in index order.
pub fn list_groups(dataset_dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(load_index(dataset_dir)?
        .into_iter()
        .map(|r| dataset_dir.join(&r.scene).join(&r.group))
        .collect())
}
