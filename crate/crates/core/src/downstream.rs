//! Runs zero-shot evaluation and linear probing over a labeled manifest,
//! where every clip carries `frame_labels`.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoders::{stack, EncoderBundle};
use crate::error::{Error, Result};
use crate::eval::{
    build_prompts, linear_probe, multi_label_metrics, single_label_metrics, zero_shot_classify,
    Mode, MultiLabelMetrics, Predictions, ProbeResult, ProbeSplit, PromptStyle, PromptTemplates,
    SingleLabelMetrics, SvmConfig, ZeroShotConfig,
};
use crate::frames::FrameStore;

/// Every labeled frame of the dataset, in video then clip order.
pub struct LabeledFrames {
    pub references: Vec<String>,
    pub video_ids: Vec<String>,
    pub labels: Vec<Vec<usize>>,
}

pub fn labeled_frames(dataset: &Dataset, labels: &[String]) -> Result<LabeledFrames> {
    let index: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut out = LabeledFrames {
        references: Vec::new(),
        video_ids: Vec::new(),
        labels: Vec::new(),
    };
    for video in dataset.videos() {
        for clip in dataset.clips_of(video) {
            let Some(frame_labels) = &clip.frame_labels else {
                continue;
            };
            for (frame, names) in clip.frames.iter().zip(frame_labels) {
                let ids = names
                    .iter()
                    .map(|n| {
                        index
                            .get(n.as_str())
                            .copied()
                            .ok_or_else(|| Error::MissingTemplate(n.clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.references.push(frame.clone());
                out.video_ids.push(video.video_id.clone());
                out.labels.push(ids);
            }
        }
    }
    if out.references.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(out)
}

/// Encodes each frame on its own; rows are unit-norm.
pub fn encode_frames(
    encoders: &EncoderBundle,
    store: &FrameStore,
    references: &[String],
) -> Result<Array2<f64>> {
    let embs = references
        .iter()
        .map(|r| encoders.encode_clip(&[store.load(r)?]))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack(&embs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ZeroShotMetrics {
    Single(SingleLabelMetrics),
    Multi(MultiLabelMetrics),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub labels: Vec<String>,
    pub style: PromptStyle,
    pub mode: Mode,
    pub n_frames: usize,
    pub metrics: ZeroShotMetrics,
}

pub fn zero_shot_on_dataset(
    dataset: &Dataset,
    encoders: &EncoderBundle,
    store: &FrameStore,
    templates: &PromptTemplates,
    style: PromptStyle,
    cfg: &ZeroShotConfig,
) -> Result<ZeroShotReport> {
    let labels: Vec<String> = templates.keys().cloned().collect();
    let prompts = build_prompts(&labels, style, templates)?;
    let class_prompts = prompts
        .prompts
        .iter()
        .map(|ps| {
            Ok(stack(
                &ps.iter()
                    .map(|p| encoders.encode_text(p))
                    .collect::<Result<Vec<_>>>()?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let frames = labeled_frames(dataset, &labels)?;
    let features = encode_frames(encoders, store, &frames.references)?;
    let out = zero_shot_classify(features.view(), &class_prompts, cfg)?;
    let metrics = match out.predictions {
        Predictions::Single(pred) => {
            let truth = frames
                .labels
                .iter()
                .map(|ls| {
                    ls.first()
                        .copied()
                        .ok_or_else(|| Error::Integrity("frame without label".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            ZeroShotMetrics::Single(single_label_metrics(&pred, &truth, labels.len())?)
        }
        Predictions::Multi(decisions) => {
            let mut truth = Array2::from_elem(decisions.raw_dim(), false);
            for (i, ls) in frames.labels.iter().enumerate() {
                for &l in ls {
                    truth[[i, l]] = true;
                }
            }
            ZeroShotMetrics::Multi(multi_label_metrics(&decisions, &out.scores, &truth)?)
        }
    };
    Ok(ZeroShotReport {
        labels,
        style,
        mode: cfg.mode,
        n_frames: frames.references.len(),
        metrics,
    })
}

/// Train/test assignment: explicit `split` fields win; otherwise a seeded
/// 80/20 shuffle of the labeled videos with at least one test video.
pub fn split_videos(dataset: &Dataset, seed: u64) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let labeled: Vec<&str> = dataset
        .videos()
        .filter(|v| dataset.clips_of(v).iter().any(|c| c.frame_labels.is_some()))
        .map(|v| v.video_id.as_str())
        .collect();
    let explicit = dataset.videos().any(|v| v.split.is_some());
    let (mut train, mut test) = (BTreeSet::new(), BTreeSet::new());
    if explicit {
        for id in &labeled {
            match dataset.video(id).and_then(|v| v.split.as_deref()) {
                Some("test") => test.insert(id.to_string()),
                _ => train.insert(id.to_string()),
            };
        }
    } else {
        let mut order = labeled.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (order.len() / 5).max(1);
        for (i, id) in order.iter().enumerate() {
            if i < n_test {
                test.insert(id.to_string());
            } else {
                train.insert(id.to_string());
            }
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidConfig(
            "probing needs at least one train and one test video".into(),
        ));
    }
    Ok((train, test))
}

pub fn probe_on_dataset(
    dataset: &Dataset,
    encoders: &EncoderBundle,
    store: &FrameStore,
    labels: &[String],
    fraction: f64,
    svm: &SvmConfig,
) -> Result<ProbeResult> {
    let frames = labeled_frames(dataset, labels)?;
    let features = encode_frames(encoders, store, &frames.references)?;
    let (train_ids, _) = split_videos(dataset, svm.seed)?;
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for (i, v) in frames.video_ids.iter().enumerate() {
        if train_ids.contains(v) {
            train_rows.push(i);
        } else {
            test_rows.push(i);
        }
    }
    let split = |rows: &[usize]| -> Result<ProbeSplit> {
        Ok(ProbeSplit {
            features: features.select(ndarray::Axis(0), rows),
            labels: rows
                .iter()
                .map(|&i| {
                    frames.labels[i]
                        .first()
                        .copied()
                        .ok_or_else(|| Error::Integrity("frame without label".into()))
                })
                .collect::<Result<_>>()?,
            video_ids: rows.iter().map(|&i| frames.video_ids[i].clone()).collect(),
        })
    };
    linear_probe(
        &split(&train_rows)?,
        &split(&test_rows)?,
        labels.len(),
        fraction,
        svm,
    )
}
