//! Dataset construction from sparse-reconstruction scene manifests:
//! duplicate filtering, similarity labeling, and patch-group cropping.

pub mod build;
pub mod crop;
pub mod manifest;
pub mod stats;

pub use build::{
    build_dataset, check_split_disjointness, index_image_ids, list_groups, load_group,
    load_index, BuildConfig, DatasetReport, SceneInput, SceneStats,
};
pub use crop::{crop_patch_group, GroupRecord, PatchGroup, RefCandidate, PATCH};
pub use manifest::SceneManifest;
pub use stats::{classify_similarity, compute_pair_stats, dedup_psnr, Label, PairStats};
