#![allow(dead_code)]

use std::path::PathBuf;

use hierclip::data::{load_manifest, ClipRecord, Dataset};
use hierclip::trainer::TrainConfig;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

/// 8 narrative + 4 silent videos, 3 clips each, 4 concepts, seed 0.
pub fn fixture() -> Dataset {
    load_manifest(data_path("fixture12.jsonl")).expect("fixture manifest")
}

pub fn desk_config() -> TrainConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.yaml");
    TrainConfig::from_yaml_file(path).expect("desk config")
}

/// Small schedule for quick runs.
pub fn quick_config(total: usize, warmup: usize) -> TrainConfig {
    TrainConfig {
        total_epochs: total,
        warmup_clip_epochs: warmup,
        alt_clip_epochs: 1,
        alt_video_epochs: 1,
        dim: 32,
        query_dim: 32,
        image_size: 24,
        n_frames: 4,
        checkpoint_every: 2,
        ..desk_config()
    }
}

/// First clip of every narrative video.
pub fn pair_set(ds: &Dataset) -> Vec<&ClipRecord> {
    ds.narrative_videos()
        .iter()
        .map(|v| ds.clip(&v.clip_ids[0]).unwrap())
        .collect()
}

pub fn random_unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    m
}

pub fn random_unit(rng: &mut impl Rng, d: usize) -> Array1<f64> {
    random_unit_rows(rng, 1, d).row(0).to_owned()
}

/// Plain-loop dot product, independent of ndarray's kernels.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}
