//! Pairwise similarity statistics between a target image and a candidate
//! reference: a duplicate-detection intensity check plus two geometry
//! ratios derived from co-observed sparse points, and the H/M/L label
//! those numbers imply.

use crate::error::{ensure_contract, Error, Result};
use crate::image::resize::resize_to;
use crate::image::ImageRgb;
use crate::lmr::manifest::SceneManifest;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    H,
    M,
    L,
    Rejected,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairStats {
    pub target_id: u64,
    pub ref_id: u64,
    pub psnr_db: f64,
    /// Fraction of the target's observed points the reference co-observes.
    pub r_olp: f64,
    /// Median depth ratio target/ref over co-observed points; shared
    /// content appears at comparable size when this is near 1.
    pub r_s: f64,
    pub label: Label,
}

/// Near-duplicate proxy: bring both images to their common size (uniform
/// downscale of the larger one, center crop against rounding mismatch),
/// then plain RGB peak signal-to-noise. Infinite for identical pixels.
pub fn dedup_psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    let cw = a.width().min(b.width());
    let ch = a.height().min(b.height());
    let fit = |img: &ImageRgb| -> Result<ImageRgb> {
        if img.width() == cw && img.height() == ch {
            return Ok(img.clone());
        }
        let fw = cw as f64 / img.width() as f64;
        let fh = ch as f64 / img.height() as f64;
        let f = fw.max(fh);
        let nw = ((img.width() as f64 * f).round() as usize).max(cw);
        let nh = ((img.height() as f64 * f).round() as usize).max(ch);
        let resized = resize_to(img, nw, nh)?;
        Ok(center_crop(&resized, cw, ch))
    };
    let (fa, fb) = (fit(a)?, fit(b)?);
    let mut se = 0.0f64;
    for (&pa, &pb) in fa.data().iter().zip(fb.data()) {
        let d = f64::from(pa) - f64::from(pb);
        se += d * d;
    }
    let mse = se / fa.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

fn center_crop(img: &ImageRgb, w: usize, h: usize) -> ImageRgb {
    let x0 = (img.width() - w) / 2;
    let y0 = (img.height() - h) / 2;
    let mut out = ImageRgb::constant(w, h, [0, 0, 0]).unwrap();
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(x, y, img.pixel(x0 + x, y0 + y));
        }
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Geometry ratios from the manifest alone: overlap fraction and median
/// depth ratio over co-observed points (1.0 when nothing is co-observed).
pub fn geometry_ratios(
    manifest: &SceneManifest,
    target_id: u64,
    ref_id: u64,
) -> Result<(f64, f64)> {
    manifest.image(target_id)?;
    manifest.image(ref_id)?;
    let mut target_obs = 0usize;
    let mut ratios = Vec::new();
    for p in &manifest.points3d {
        let mut depths: BTreeMap<u64, f64> = BTreeMap::new();
        for o in &p.observations {
            depths.insert(o.image_id, o.depth);
        }
        if let Some(&dt) = depths.get(&target_id) {
            target_obs += 1;
            if let Some(&dr) = depths.get(&ref_id) {
                ratios.push(dt / dr);
            }
        }
    }
    ensure_contract!(
        target_obs > 0,
        "target image {target_id} observes no 3D points"
    );
    let r_olp = ratios.len() as f64 / target_obs as f64;
    let r_s = if ratios.is_empty() { 1.0 } else { median(ratios) };
    Ok((r_olp, r_s))
}

/// Label from thresholds alone. Strictly-greater comparisons throughout:
/// a pair at 30 dB is a duplicate, a pair at exactly an overlap threshold
/// falls to the weaker class.
pub fn classify_similarity(psnr_db: f64, r_olp: f64, r_s: f64) -> Label {
    if psnr_db >= 30.0 {
        Label::Rejected
    } else if r_olp > 0.30 && r_s > 0.9 {
        Label::H
    } else if r_olp > 0.10 && r_s > 0.66 {
        Label::M
    } else {
        Label::L
    }
}

/// Full pair scoring: intensity proxy plus geometry plus label.
pub fn compute_pair_stats(
    target: &ImageRgb,
    reference: &ImageRgb,
    manifest: &SceneManifest,
    target_id: u64,
    ref_id: u64,
) -> Result<PairStats> {
    let (r_olp, r_s) = geometry_ratios(manifest, target_id, ref_id)?;
    ensure_contract!(r_s > 0.0, "depth ratio must be positive, got {r_s}");
    let psnr_db = dedup_psnr(target, reference)?;
    Ok(PairStats {
        target_id,
        ref_id,
        psnr_db,
        r_olp,
        r_s,
        label: classify_similarity(psnr_db, r_olp, r_s),
    })
}

/// Re-derives the label from the stored numbers; storage and derivation
/// must never disagree.
pub fn verify_label(stats: &PairStats) -> Result<()> {
    let want = classify_similarity(stats.psnr_db, stats.r_olp, stats.r_s);
    if stats.label != want {
        return Err(Error::Contract(format!(
            "stored label {:?} but stats imply {:?} (psnr {}, r_olp {}, r_s {})",
            stats.label, want, stats.psnr_db, stats.r_olp, stats.r_s
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmr::manifest::{ManifestImage, Observation, Point3d};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn obs(image_id: u64, depth: f64) -> Observation {
        Observation { image_id, x_px: 1.0, y_px: 1.0, depth }
    }

    fn two_image_manifest(points: Vec<Point3d>) -> SceneManifest {
        SceneManifest {
            images: vec![
                ManifestImage { id: 1, path: "t.png".into(), width: 16, height: 16 },
                ManifestImage { id: 2, path: "r.png".into(), width: 16, height: 16 },
            ],
            points3d: points,
        }
    }

    #[test]
    fn identical_observation_sets_give_full_overlap_and_unit_scale() {
        let points = (0..5)
            .map(|i| Point3d {
                point_id: i,
                observations: vec![obs(1, 2.0 + i as f64), obs(2, 2.0 + i as f64)],
            })
            .collect();
        let m = two_image_manifest(points);
        let (r_olp, r_s) = geometry_ratios(&m, 1, 2).unwrap();
        assert_eq!(r_olp, 1.0);
        assert_eq!(r_s, 1.0);
    }

    #[test]
    fn disjoint_observation_sets_give_zero_overlap() {
        let mut points: Vec<Point3d> = (0..4)
            .map(|i| Point3d { point_id: i, observations: vec![obs(1, 1.0)] })
            .collect();
        points.extend((4..8).map(|i| Point3d { point_id: i, observations: vec![obs(2, 1.0)] }));
        let m = two_image_manifest(points);
        let (r_olp, r_s) = geometry_ratios(&m, 1, 2).unwrap();
        assert_eq!(r_olp, 0.0);
        assert_eq!(r_s, 1.0);
    }

    #[test]
    fn the_hand_counted_manifest_scores_point_three_and_half() {
        // target sees points 1..10; the reference sees 1..3 plus 11..20,
        // every shared point twice as deep in the reference
        let mut points = Vec::new();
        for id in 1..=10u64 {
            let mut observations = vec![obs(1, 2.0)];
            if id <= 3 {
                observations.push(obs(2, 4.0));
            }
            points.push(Point3d { point_id: id, observations });
        }
        for id in 11..=20u64 {
            points.push(Point3d { point_id: id, observations: vec![obs(2, 4.0)] });
        }
        let m = two_image_manifest(points);
        let (r_olp, r_s) = geometry_ratios(&m, 1, 2).unwrap();
        assert_eq!(r_olp, 0.3);
        assert_eq!(r_s, 0.5);
    }

    #[test]
    fn a_target_without_observations_is_a_contract_violation() {
        let m = two_image_manifest(vec![Point3d {
            point_id: 1,
            observations: vec![obs(2, 1.0)],
        }]);
        assert!(geometry_ratios(&m, 1, 2).is_err());
    }

    #[test]
    fn even_sized_ratio_lists_average_the_middle_pair() {
        let points = vec![
            Point3d { point_id: 1, observations: vec![obs(1, 1.0), obs(2, 1.0)] },
            Point3d { point_id: 2, observations: vec![obs(1, 2.0), obs(2, 1.0)] },
            Point3d { point_id: 3, observations: vec![obs(1, 4.0), obs(2, 1.0)] },
            Point3d { point_id: 4, observations: vec![obs(1, 8.0), obs(2, 1.0)] },
        ];
        let m = two_image_manifest(points);
        let (_, r_s) = geometry_ratios(&m, 1, 2).unwrap();
        assert_eq!(r_s, 3.0);
    }

    #[test]
    fn classification_respects_strict_thresholds() {
        assert_eq!(classify_similarity(35.0, 1.0, 1.0), Label::Rejected);
        assert_eq!(classify_similarity(30.0, 1.0, 1.0), Label::Rejected);
        assert_eq!(classify_similarity(20.0, 0.31, 0.95), Label::H);
        assert_eq!(classify_similarity(20.0, 0.30, 0.95), Label::M);
        assert_eq!(classify_similarity(20.0, 0.31, 0.9), Label::M);
        assert_eq!(classify_similarity(20.0, 0.11, 0.67), Label::M);
        assert_eq!(classify_similarity(20.0, 0.10, 0.67), Label::L);
        assert_eq!(classify_similarity(20.0, 0.11, 0.66), Label::L);
        assert_eq!(classify_similarity(20.0, 0.0, 1.0), Label::L);
    }

    #[test]
    fn identical_images_hit_the_infinite_sentinel_and_reject() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let data: Vec<u8> = (0..16 * 16 * 3).map(|_| rng.gen()).collect();
        let img = ImageRgb::new(16, 16, data).unwrap();
        let psnr = dedup_psnr(&img, &img).unwrap();
        assert!(psnr.is_infinite());
        assert_eq!(classify_similarity(psnr, 0.0, 1.0), Label::Rejected);
    }

    #[test]
    fn unrelated_noise_images_score_low_psnr() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mk = |rng: &mut ChaCha20Rng| {
            let data: Vec<u8> = (0..32 * 32 * 3).map(|_| rng.gen()).collect();
            ImageRgb::new(32, 32, data).unwrap()
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let psnr = dedup_psnr(&a, &b).unwrap();
        assert!(psnr < 15.0, "noise pair scored {psnr} dB");
    }

    #[test]
    fn size_mismatched_duplicates_still_score_high() {
        // a smooth gradient and its 2x downscale: same content, other size
        let mut big = ImageRgb::constant(32, 32, [0, 0, 0]).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let v = (x * 8) as u8;
                big.set_pixel(x, y, [v, v, v]);
            }
        }
        let small = resize_to(&big, 16, 16).unwrap();
        let psnr = dedup_psnr(&big, &small).unwrap();
        assert!(psnr >= 30.0, "downscaled duplicate scored {psnr} dB");
    }

    #[test]
    fn stored_labels_must_match_the_rederivation() {
        let mut stats = PairStats {
            target_id: 1,
            ref_id: 2,
            psnr_db: 20.0,
            r_olp: 0.5,
            r_s: 1.0,
            label: Label::H,
        };
        verify_label(&stats).unwrap();
        stats.label = Label::L;
        assert!(verify_label(&stats).is_err());
    }
}
