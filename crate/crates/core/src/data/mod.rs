//! Image-pair ingestion, manifests, dataset statistics, and the synthetic
//! bitemporal generator.

mod image;
mod manifest;
mod stats;
mod synthetic;

pub use image::{
    load_label, load_pair, load_rgb, save_change_map, save_gray, save_label, save_rgb, ImagePair,
    RgbImage, MAX_SIDE, MIN_SIDE,
};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use stats::{
    dataset_stats, load_counts, stats_from_counts, CountRecord, SplitStats, StatsTable,
};
pub use synthetic::{generate_dataset, generate_pair, Sample, ShapeKind, SyntheticConfig};
