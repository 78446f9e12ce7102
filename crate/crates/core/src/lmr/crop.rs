//! Patch-group extraction: a random target crop anchored to the sparse
//! point cloud, and one 300x300 reference crop per required label centered
//! on each reference's best view of the anchored content.

use crate::error::{ensure_contract, Result};
use crate::image::ImageRgb;
use crate::lmr::manifest::SceneManifest;
use crate::lmr::stats::{Label, PairStats};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Side of every emitted patch.
pub const PATCH: usize = 300;

/// A labeled candidate reference with its pixels.
#[derive(Clone, Debug)]
pub struct RefCandidate {
    pub image: ImageRgb,
    pub stats: PairStats,
}

/// One reference patch with its provenance.
#[derive(Clone, Debug)]
pub struct RefPatch {
    pub image: ImageRgb,
    pub label: Label,
    pub source_id: u64,
    pub origin: (u32, u32),
    /// 3D point whose observation centered this crop; absent when the
    /// reference co-observes nothing and fell back to a center crop.
    pub point_id: Option<u64>,
    pub stats: PairStats,
}

/// A full training group: the target patch and five reference patches in
/// canonical label order H, M, M, L, L.
#[derive(Clone, Debug)]
pub struct PatchGroup {
    pub target: ImageRgb,
    pub target_id: u64,
    pub target_origin: (u32, u32),
    pub anchor_point: u64,
    pub refs: Vec<RefPatch>,
}

/// Provenance record for the on-disk index, one line per group.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupRecord {
    pub scene: String,
    pub group: String,
    pub target_id: u64,
    pub target_origin: (u32, u32),
    pub anchor_point: u64,
    pub refs: Vec<RefRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefRecord {
    pub source_id: u64,
    pub origin: (u32, u32),
    pub point_id: Option<u64>,
    pub stats: PairStats,
}

impl PatchGroup {
    pub fn record(&self, scene: &str, group: &str) -> GroupRecord {
        GroupRecord {
            scene: scene.to_string(),
            group: group.to_string(),
            target_id: self.target_id,
            target_origin: self.target_origin,
            anchor_point: self.anchor_point,
            refs: self
                .refs
                .iter()
                .map(|r| RefRecord {
                    source_id: r.source_id,
                    origin: r.origin,
                    point_id: r.point_id,
                    stats: r.stats.clone(),
                })
                .collect(),
        }
    }
}

fn crop(img: &ImageRgb, ox: usize, oy: usize) -> ImageRgb {
    let mut out = ImageRgb::constant(PATCH, PATCH, [0, 0, 0]).unwrap();
    for y in 0..PATCH {
        for x in 0..PATCH {
            out.set_pixel(x, y, img.pixel(ox + x, oy + y));
        }
    }
    out
}

fn clamp_origin(center: f64, dim: usize) -> usize {
    let half = (PATCH / 2) as f64;
    (center - half).round().clamp(0.0, (dim - PATCH) as f64) as usize
}

/// Observations of `image_id`, as `(point_id, x, y)`.
fn observations_of(manifest: &SceneManifest, image_id: u64) -> Vec<(u64, f64, f64)> {
    let mut out = Vec::new();
    for p in &manifest.points3d {
        for o in &p.observations {
            if o.image_id == image_id {
                out.push((p.point_id, o.x_px, o.y_px));
            }
        }
    }
    out
}

/// Deterministically selects the required 1H + 2M + 2L references from the
/// candidate pool, lowest image id first within each label.
fn pick_pool(candidates: &[RefCandidate]) -> Option<Vec<&RefCandidate>> {
    let by_label = |want: Label, take: usize| -> Option<Vec<&RefCandidate>> {
        let mut sorted: Vec<&RefCandidate> = candidates
            .iter()
            .filter(|c| c.stats.label == want)
            .collect();
        sorted.sort_by_key(|c| c.stats.ref_id);
        (sorted.len() >= take).then(|| sorted.into_iter().take(take).collect())
    };
    let h = by_label(Label::H, 1)?;
    let m = by_label(Label::M, 2)?;
    let l = by_label(Label::L, 2)?;
    Some(h.into_iter().chain(m).chain(l).collect())
}

/// Cuts one group, or `None` when the pool lacks the required labels, an
/// involved image is smaller than the patch, or the target has no
/// anchorable observation. Randomness is limited to the target crop origin.
pub fn crop_patch_group(
    target: &ImageRgb,
    target_id: u64,
    candidates: &[RefCandidate],
    manifest: &SceneManifest,
    rng: &mut ChaCha20Rng,
) -> Result<Option<PatchGroup>> {
    for c in candidates {
        ensure_contract!(
            c.stats.target_id == target_id,
            "candidate pool entry for target {}, expected {}",
            c.stats.target_id,
            target_id
        );
        ensure_contract!(
            c.stats.label != Label::Rejected,
            "rejected pair {} -> {} offered as a candidate",
            c.stats.target_id,
            c.stats.ref_id
        );
    }
    let Some(pool) = pick_pool(candidates) else {
        log::debug!("target {target_id}: pool lacks 1H+2M+2L");
        return Ok(None);
    };
    if target.width() < PATCH || target.height() < PATCH {
        log::debug!("target {target_id}: image smaller than the patch");
        return Ok(None);
    }
    for c in &pool {
        if c.image.width() < PATCH || c.image.height() < PATCH {
            log::debug!("reference {}: image smaller than the patch", c.stats.ref_id);
            return Ok(None);
        }
    }

    let ox = rng.gen_range(0..=target.width() - PATCH);
    let oy = rng.gen_range(0..=target.height() - PATCH);
    let cx = (ox + PATCH / 2) as f64;
    let cy = (oy + PATCH / 2) as f64;

    let target_obs = observations_of(manifest, target_id);
    if target_obs.is_empty() {
        log::debug!("target {target_id}: no observations to anchor on");
        return Ok(None);
    }
    let dist2 = |x: f64, y: f64| (x - cx) * (x - cx) + (y - cy) * (y - cy);
    let anchor = target_obs
        .iter()
        .min_by(|a, b| {
            dist2(a.1, a.2)
                .partial_cmp(&dist2(b.1, b.2))
                .unwrap()
                .then(a.0.cmp(&b.0))
        })
        .unwrap()
        .0;

    let mut refs = Vec::with_capacity(pool.len());
    for c in &pool {
        let ref_obs = observations_of(manifest, c.stats.ref_id);
        let target_ids: std::collections::BTreeMap<u64, (f64, f64)> =
            target_obs.iter().map(|&(id, x, y)| (id, (x, y))).collect();
        // co-observed points, each with the reference-image view position
        let co: Vec<(u64, f64, f64)> = ref_obs
            .iter()
            .filter(|(id, _, _)| target_ids.contains_key(id))
            .cloned()
            .collect();
        let chosen = if co.iter().any(|&(id, _, _)| id == anchor) {
            Some(anchor)
        } else if co.is_empty() {
            None
        } else {
            co.iter()
                .min_by(|a, b| {
                    let pa = target_ids[&a.0];
                    let pb = target_ids[&b.0];
                    dist2(pa.0, pa.1)
                        .partial_cmp(&dist2(pb.0, pb.1))
                        .unwrap()
                        .then(a.0.cmp(&b.0))
                })
                .map(|&(id, _, _)| id)
        };
        let (rcx, rcy) = match chosen {
            Some(id) => {
                let &(_, x, y) = co.iter().find(|&&(pid, _, _)| pid == id).unwrap();
                (x, y)
            }
            None => (c.image.width() as f64 / 2.0, c.image.height() as f64 / 2.0),
        };
        let rox = clamp_origin(rcx, c.image.width());
        let roy = clamp_origin(rcy, c.image.height());
        refs.push(RefPatch {
            image: crop(&c.image, rox, roy),
            label: c.stats.label,
            source_id: c.stats.ref_id,
            origin: (rox as u32, roy as u32),
            point_id: chosen,
            stats: c.stats.clone(),
        });
    }

    Ok(Some(PatchGroup {
        target: crop(target, ox, oy),
        target_id,
        target_origin: (ox as u32, oy as u32),
        anchor_point: anchor,
        refs,
    }))
}
