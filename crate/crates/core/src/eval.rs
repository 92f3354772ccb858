//! Zero-shot recognition from class prompts, classification metrics, and
//! linear probing on frozen features.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-label prompt material. `caption` is a descriptive sentence; the four
/// keyword fields render the structured keyword prompt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    #[serde(default)]
    pub caption: Option<String>,
    /// Extra caption-style prompts, ensembled with `caption`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_captions: Vec<String>,
    #[serde(default)]
    pub phase: Option<String>,
    #[serde(default)]
    pub instrument: Option<String>,
    #[serde(default)]
    pub medication: Option<String>,
    #[serde(default)]
    pub goal: Option<String>,
}

pub type PromptTemplates = BTreeMap<String, PromptTemplate>;

/// Caption and keyword prompts for the Cataract-1K phase labels.
pub fn cataract1k_phase_templates() -> PromptTemplates {
    serde_json::from_str(include_str!("../data/cataract1k_phase_prompts.json"))
        .expect("bundled phase prompts parse")
}

/// Caption prompts for the Cataract-1K instrument labels.
pub fn cataract1k_instrument_templates() -> PromptTemplates {
    serde_json::from_str(include_str!("../data/cataract1k_instrument_prompts.json"))
        .expect("bundled instrument prompts parse")
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<PromptTemplates> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStyle {
    Caption,
    Keyword,
    Mix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub style: PromptStyle,
    pub labels: Vec<String>,
    /// `prompts[i]` belongs to `labels[i]`; never empty.
    pub prompts: Vec<Vec<String>>,
}

impl PromptTemplate {
    fn keyword(&self) -> Option<String> {
        Some(format!(
            "Phase: {}; Instrument: {}; Medication: {}; Goal: {}",
            self.phase.as_deref()?,
            self.instrument.as_deref()?,
            self.medication.as_deref()?,
            self.goal.as_deref()?
        ))
    }

    fn captions(&self) -> Vec<String> {
        self.caption
            .iter()
            .chain(&self.extra_captions)
            .cloned()
            .collect()
    }

    fn render(&self, style: PromptStyle) -> Vec<String> {
        match style {
            PromptStyle::Caption => self.captions(),
            PromptStyle::Keyword => self.keyword().into_iter().collect(),
            PromptStyle::Mix => match self.keyword() {
                Some(kw) => self
                    .captions()
                    .into_iter()
                    .map(|c| format!("{c} {kw}"))
                    .collect(),
                None => Vec::new(),
            },
        }
    }
}

pub fn build_prompts(
    labels: &[String],
    style: PromptStyle,
    templates: &PromptTemplates,
) -> Result<PromptSet> {
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let prompts = labels
        .iter()
        .map(|label| {
            let rendered = templates
                .get(label)
                .map(|t| t.render(style))
                .unwrap_or_default();
            if rendered.is_empty() {
                Err(Error::MissingTemplate(label.clone()))
            } else {
                Ok(rendered)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptSet {
        style,
        labels: labels.to_vec(),
        prompts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotConfig {
    pub mode: Mode,
    /// Multi-label decision threshold on the sigmoid output. A probability
    /// exactly at the threshold counts as negative.
    pub threshold: f64,
    /// Temperature applied to similarities before the sigmoid.
    pub tau_eval: f64,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Single,
            threshold: 0.5,
            tau_eval: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Single(Vec<usize>),
    Multi(Array2<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotOutput {
    /// `frames x classes` mean prompt similarity.
    pub scores: Array2<f64>,
    pub predictions: Predictions,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scores frames against class prompt embeddings (`class_prompts[c]` is a
/// `prompts x D` matrix) and decides per the configured mode.
pub fn zero_shot_classify(
    frames: ArrayView2<f64>,
    class_prompts: &[Array2<f64>],
    cfg: &ZeroShotConfig,
) -> Result<ZeroShotOutput> {
    if class_prompts.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut scores = Array2::zeros((frames.nrows(), class_prompts.len()));
    for (c, prompts) in class_prompts.iter().enumerate() {
        if prompts.nrows() == 0 {
            return Err(Error::NoPrompts(c));
        }
        if prompts.ncols() != frames.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "class {c} prompts have dimension {}, frames {}",
                prompts.ncols(),
                frames.ncols()
            )));
        }
        let mean = frames
            .dot(&prompts.t())
            .mean_axis(Axis(1))
            .expect("non-empty prompts");
        scores.column_mut(c).assign(&mean);
    }
    let predictions = match cfg.mode {
        Mode::Single => Predictions::Single(scores.rows().into_iter().map(argmax).collect()),
        Mode::Multi => {
            if !(cfg.tau_eval > 0.0) {
                return Err(Error::InvalidConfig("tau_eval must be > 0".into()));
            }
            Predictions::Multi(scores.mapv(|s| sigmoid(s / cfg.tau_eval) > cfg.threshold))
        }
    };
    Ok(ZeroShotOutput {
        scores,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassF1 {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleLabelMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassF1>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Frame-level accuracy and macro F1. The macro average runs over classes
/// that occur in the ground truth or the predictions.
pub fn single_label_metrics(
    predictions: &[usize],
    truth: &[usize],
    n_classes: usize,
) -> Result<SingleLabelMetrics> {
    if predictions.len() != truth.len() {
        return Err(Error::LengthMismatch(predictions.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(&bad) = predictions.iter().chain(truth).find(|&&c| c >= n_classes) {
        return Err(Error::InvalidConfig(format!(
            "class index {bad} out of range for {n_classes} classes"
        )));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let per_class: Vec<ClassF1> = (0..n_classes)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| ClassF1 {
            class: c,
            precision: ratio(tp[c], tp[c] + fp[c]),
            recall: ratio(tp[c], tp[c] + fn_[c]),
            f1: ratio(2 * tp[c], 2 * tp[c] + fp[c] + fn_[c]),
            support: tp[c] + fn_[c],
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64;
    Ok(SingleLabelMetrics {
        accuracy: ratio(correct, truth.len()),
        macro_f1,
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDetection {
    pub class: usize,
    /// `None` when the class has no negative frames.
    pub fpr: Option<f64>,
    /// `None` when the class has no positive frames.
    pub average_precision: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiLabelMetrics {
    pub fpr: f64,
    pub map: f64,
    pub per_class: Vec<ClassDetection>,
}

/// Average precision of one class: frames ranked by descending score (ties
/// by frame index), precision taken at the rank of every positive.
pub fn average_precision(scores: ArrayView1<f64>, truth: ArrayView1<bool>) -> Option<f64> {
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Macro FPR at the decision threshold and mean average precision.
/// Classes without negatives are left out of the FPR average and classes
/// without positives out of mAP; an empty average reports 0.
pub fn multi_label_metrics(
    decisions: &Array2<bool>,
    scores: &Array2<f64>,
    truth: &Array2<bool>,
) -> Result<MultiLabelMetrics> {
    if decisions.nrows() != truth.nrows() || scores.nrows() != truth.nrows() {
        return Err(Error::LengthMismatch(decisions.nrows(), truth.nrows()));
    }
    if decisions.ncols() != truth.ncols() || scores.ncols() != truth.ncols() {
        return Err(Error::LengthMismatch(decisions.ncols(), truth.ncols()));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut per_class = Vec::with_capacity(truth.ncols());
    for c in 0..truth.ncols() {
        let (d, t) = (decisions.column(c), truth.column(c));
        let count = |pd: bool, tt: bool| {
            d.iter()
                .zip(t)
                .filter(|(&a, &b)| a == pd && b == tt)
                .count()
        };
        let (tp, fp, tn, fn_) = (
            count(true, true),
            count(true, false),
            count(false, false),
            count(false, true),
        );
        per_class.push(ClassDetection {
            class: c,
            fpr: (fp + tn > 0).then(|| ratio(fp, fp + tn)),
            average_precision: average_precision(scores.column(c), t),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            support: tp + fn_,
        });
    }
    let mean_of = |xs: Vec<f64>| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    Ok(MultiLabelMetrics {
        fpr: mean_of(per_class.iter().filter_map(|c| c.fpr).collect()),
        map: mean_of(
            per_class
                .iter()
                .filter_map(|c| c.average_precision)
                .collect(),
        ),
        per_class,
    })
}

/// One-vs-rest linear SVM with hinge loss, trained by dual coordinate
/// descent. A constant feature models the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    /// `classes x (D + 1)`; the last column is the bias.
    pub weights: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    /// Soft-margin penalty.
    pub c: f64,
    pub max_epochs: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_epochs: 1000,
            tol: 1e-4,
            seed: 0,
        }
    }
}

impl LinearSvm {
    pub fn fit(
        features: ArrayView2<f64>,
        labels: &[usize],
        n_classes: usize,
        cfg: &SvmConfig,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::LengthMismatch(features.nrows(), labels.len()));
        }
        if labels.is_empty() {
            return Err(Error::EmptyInput);
        }
        let (n, d) = features.dim();
        let mut x = Array2::ones((n, d + 1));
        x.slice_mut(ndarray::s![.., ..d]).assign(&features);
        let q: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
        let mut weights = Array2::zeros((n_classes, d + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for class in 0..n_classes {
            let y: Vec<f64> = labels
                .iter()
                .map(|&l| if l == class { 1.0 } else { -1.0 })
                .collect();
            let mut alpha = vec![0.0f64; n];
            let mut w = Array1::<f64>::zeros(d + 1);
            let mut order: Vec<usize> = (0..n).collect();
            for _ in 0..cfg.max_epochs {
                order.shuffle(&mut rng);
                let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
                for &i in &order {
                    let xi = x.row(i);
                    let g = y[i] * w.dot(&xi) - 1.0;
                    let pg = if alpha[i] <= 0.0 {
                        g.min(0.0)
                    } else if alpha[i] >= cfg.c {
                        g.max(0.0)
                    } else {
                        g
                    };
                    pg_max = pg_max.max(pg);
                    pg_min = pg_min.min(pg);
                    if pg != 0.0 && q[i] > 0.0 {
                        let old = alpha[i];
                        alpha[i] = (old - g / q[i]).clamp(0.0, cfg.c);
                        w.scaled_add((alpha[i] - old) * y[i], &xi);
                    }
                }
                if pg_max - pg_min < cfg.tol {
                    break;
                }
            }
            weights.row_mut(class).assign(&w);
        }
        Ok(Self { weights })
    }

    pub fn decision(&self, features: ArrayView2<f64>) -> Array2<f64> {
        let d = self.weights.ncols() - 1;
        let w = self.weights.slice(ndarray::s![.., ..d]);
        let b = self.weights.column(d);
        features.dot(&w.t()) + b
    }

    pub fn predict(&self, features: ArrayView2<f64>) -> Vec<usize> {
        self.decision(features)
            .rows()
            .into_iter()
            .map(argmax)
            .collect()
    }
}

/// Frame features with labels and the video each frame came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSplit {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub video_ids: Vec<String>,
}

impl ProbeSplit {
    fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.labels.len() {
            return Err(Error::LengthMismatch(
                self.features.nrows(),
                self.labels.len(),
            ));
        }
        if self.video_ids.len() != self.labels.len() {
            return Err(Error::LengthMismatch(
                self.video_ids.len(),
                self.labels.len(),
            ));
        }
        if self.labels.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(())
    }

    fn select(&self, videos: &BTreeSet<String>) -> ProbeSplit {
        let rows: Vec<usize> = (0..self.labels.len())
            .filter(|&i| videos.contains(&self.video_ids[i]))
            .collect();
        ProbeSplit {
            features: self.features.select(Axis(0), &rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            video_ids: rows.iter().map(|&i| self.video_ids[i].clone()).collect(),
        }
    }
}

/// Picks a fraction of training videos, stratified by each video's most
/// frequent label (ties to the lower class). Every stratum keeps at least
/// one video.
pub fn sample_videos(split: &ProbeSplit, fraction: f64, seed: u64) -> Result<BTreeSet<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig("fraction must lie in (0, 1]".into()));
    }
    let mut counts: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    for (v, &l) in split.video_ids.iter().zip(&split.labels) {
        *counts.entry(v).or_default().entry(l).or_default() += 1;
    }
    let mut strata: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (video, hist) in &counts {
        let dominant = hist
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&c, _)| c)
            .expect("non-empty histogram");
        strata.entry(dominant).or_default().push(video);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    for videos in strata.values_mut() {
        videos.shuffle(&mut rng);
        let take = ((fraction * videos.len() as f64).ceil() as usize).clamp(1, videos.len());
        chosen.extend(videos[..take].iter().map(|v| v.to_string()));
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub metrics: SingleLabelMetrics,
    pub fraction: f64,
    pub train_videos: Vec<String>,
    pub train_frames: usize,
}

/// Trains a linear SVM on a video-level sample of `train` and reports
/// metrics on `test`.
pub fn linear_probe(
    train: &ProbeSplit,
    test: &ProbeSplit,
    n_classes: usize,
    fraction: f64,
    svm: &SvmConfig,
) -> Result<ProbeResult> {
    train.validate()?;
    test.validate()?;
    let train_ids: BTreeSet<&str> = train.video_ids.iter().map(String::as_str).collect();
    if let Some(v) = test
        .video_ids
        .iter()
        .find(|v| train_ids.contains(v.as_str()))
    {
        return Err(Error::Integrity(format!(
            "video `{v}` appears in both train and test splits"
        )));
    }
    let videos = sample_videos(train, fraction, svm.seed)?;
    let sample = train.select(&videos);
    let present: BTreeSet<usize> = train.labels.iter().copied().collect();
    let sampled: BTreeSet<usize> = sample.labels.iter().copied().collect();
    if let Some(&missing) = present.difference(&sampled).next() {
        return Err(Error::ClassMissingInSample(missing));
    }
    let model = LinearSvm::fit(sample.features.view(), &sample.labels, n_classes, svm)?;
    let predictions = model.predict(test.features.view());
    Ok(ProbeResult {
        metrics: single_label_metrics(&predictions, &test.labels, n_classes)?,
        fraction,
        train_videos: videos.into_iter().collect(),
        train_frames: sample.labels.len(),
    })
}
