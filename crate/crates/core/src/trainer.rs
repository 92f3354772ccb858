//! Hierarchical pretraining: clip-level and video-level steps, the
//! alternating epoch schedule, Adam with a cosine learning rate, checkpoints,
//! and the metrics log.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{ClipRecord, Dataset, VideoKind, VideoRecord};
use crate::encoders::{
    aggregate_backward, aggregate_video_traced, stack, EncoderBundle, EncoderConfig, EncoderGrads,
    Linear,
};
use crate::error::{Error, Result};
use crate::frames::{clip_frames, AugmentConfig, Augmentation, Frame, FrameStore};
use crate::losses::{
    clip_total_loss, clip_vl_loss, clip_vv_loss, top1_accuracy, video_narrative_loss,
    video_silent_loss, video_total_loss, LossConfig,
};
use crate::memory_bank::{encode_video, MemoryBank};
use crate::persist::{write_atomic, Checkpoint, NamedArray, VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

/// Granularity of the clip/video alternation after warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alternation {
    /// Whole epochs of each stage: `alt_clip_epochs` then `alt_video_epochs`.
    Epoch,
    /// Inside every post-warm-up epoch, `alt_clip_epochs` clip batches then
    /// `alt_video_epochs` video batches, repeated until the clip batches of
    /// the epoch are used up.
    Batch,
}

/// Flat training configuration. Defaults are the reference hyperparameters;
/// desk-scale runs override sizes through a config file or flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub warmup_clip_epochs: usize,
    pub alt_clip_epochs: usize,
    pub alt_video_epochs: usize,
    pub alternation: Alternation,
    pub batch_clip: usize,
    pub batch_video: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub lr_min_ratio: f64,
    pub scheduler: Scheduler,
    pub optimizer: Optimizer,
    /// Adam beta1.
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    pub k_retrieved: usize,
    pub n_frames: usize,
    pub image_size: u32,
    pub text_len: usize,
    pub dim: usize,
    pub grid: usize,
    pub text_buckets: usize,
    pub query_dim: usize,
    pub query_buckets: usize,
    pub temperature: f64,
    pub w_vl: f64,
    pub w_vv: f64,
    pub symmetric: bool,
    pub cross_query_negatives: bool,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub horizontal_flip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let loss = LossConfig::default();
        let aug = AugmentConfig::default();
        Self {
            total_epochs: 60,
            warmup_clip_epochs: 40,
            alt_clip_epochs: 3,
            alt_video_epochs: 2,
            alternation: Alternation::Epoch,
            batch_clip: 120,
            batch_video: 140,
            lr: 8e-5,
            lr_min_ratio: 1e-3,
            scheduler: Scheduler::Cosine,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            k_retrieved: 1,
            n_frames: 8,
            image_size: 224,
            text_len: enc.text_len,
            dim: enc.dim,
            grid: enc.grid,
            text_buckets: enc.text_buckets,
            query_dim: enc.query_dim,
            query_buckets: enc.query_buckets,
            temperature: loss.temperature,
            w_vl: loss.w_vl,
            w_vv: loss.w_vv,
            symmetric: loss.symmetric,
            cross_query_negatives: loss.cross_query_negatives,
            crop_scale_min: aug.crop_scale_min,
            crop_scale_max: aug.crop_scale_max,
            horizontal_flip: aug.horizontal_flip,
            brightness: aug.brightness,
            contrast: aug.contrast,
            checkpoint_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_yaml_str(text: &str) -> Result<Self> {
        let cfg: Self = if text.trim().is_empty() {
            Self::default()
        } else {
            serde_yaml::from_str(text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_yaml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_yaml_str(&fs::read_to_string(path)?)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            w_vl: self.w_vl,
            w_vv: self.w_vv,
            symmetric: self.symmetric,
            cross_query_negatives: self.cross_query_negatives,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            crop_scale_min: self.crop_scale_min,
            crop_scale_max: self.crop_scale_max,
            horizontal_flip: self.horizontal_flip,
            brightness: self.brightness,
            contrast: self.contrast,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            grid: self.grid,
            text_buckets: self.text_buckets,
            text_len: self.text_len,
            query_dim: self.query_dim,
            query_buckets: self.query_buckets,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("total_epochs", self.total_epochs),
            ("warmup_clip_epochs", self.warmup_clip_epochs),
            ("batch_clip", self.batch_clip),
            ("batch_video", self.batch_video),
            ("k_retrieved", self.k_retrieved),
            ("n_frames", self.n_frames),
            ("image_size", self.image_size as usize),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.warmup_clip_epochs > self.total_epochs {
            return Err(Error::InvalidConfig(
                "warmup_clip_epochs exceeds total_epochs".into(),
            ));
        }
        if self.alt_clip_epochs + self.alt_video_epochs == 0 {
            return Err(Error::InvalidConfig(
                "alt_clip_epochs + alt_video_epochs must be >= 1".into(),
            ));
        }
        if self.alternation == Alternation::Batch && self.alt_clip_epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch alternation needs alt_clip_epochs >= 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.lr_min_ratio) {
            return Err(Error::InvalidConfig("invalid learning rate".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        self.loss().validate()?;
        self.encoder().validate()
    }

    /// Cosine decay from `lr` at the first epoch to `lr * lr_min_ratio` at
    /// the last; `epoch` is 0-based.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let span = self.total_epochs.saturating_sub(1).max(1) as f64;
        let t = (epoch as f64 / span).min(1.0);
        let floor = self.lr * self.lr_min_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Clip,
    Video,
    /// Batch-level alternation of both stages within one epoch.
    Mixed,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Clip => "CLIP",
            Stage::Video => "VIDEO",
            Stage::Mixed => "MIXED",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageLabel {
    /// 1-based epoch index.
    pub epoch: usize,
    pub stage: Stage,
}

/// Warm-up clip epochs, then repeating blocks of clip and video epochs,
/// truncated at `total_epochs`. With batch alternation every post-warm-up
/// epoch is `Mixed`.
pub fn alternating_schedule(cfg: &TrainConfig) -> Result<Vec<StageLabel>> {
    cfg.validate()?;
    if cfg.alternation == Alternation::Batch {
        return Ok((0..cfg.total_epochs)
            .map(|i| StageLabel {
                epoch: i + 1,
                stage: if i < cfg.warmup_clip_epochs {
                    Stage::Clip
                } else {
                    Stage::Mixed
                },
            })
            .collect());
    }
    let block = std::iter::repeat_n(Stage::Clip, cfg.alt_clip_epochs)
        .chain(std::iter::repeat_n(Stage::Video, cfg.alt_video_epochs))
        .collect::<Vec<_>>();
    let stages = std::iter::repeat_n(Stage::Clip, cfg.warmup_clip_epochs)
        .chain(block.into_iter().cycle())
        .take(cfg.total_epochs);
    Ok(stages
        .enumerate()
        .map(|(i, stage)| StageLabel {
            epoch: i + 1,
            stage,
        })
        .collect())
}

/// Adam over the trainable projections.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: EncoderGrads,
    v: EncoderGrads,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, encoders: &EncoderBundle) -> Self {
        Self {
            beta1: cfg.momentum,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: encoders.zero_grads(),
            v: encoders.zero_grads(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, encoders: &mut EncoderBundle, grads: &EncoderGrads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let pairs: [(&mut Linear, &Linear, &mut Linear, &mut Linear); 2] = [
            (
                &mut encoders.visual.proj,
                &grads.visual,
                &mut self.m.visual,
                &mut self.v.visual,
            ),
            (
                &mut encoders.text.proj,
                &grads.text,
                &mut self.m.text,
                &mut self.v.text,
            ),
        ];
        for (param, g, m, v) in pairs {
            let apply = |p: &mut ndarray::ArrayViewMut1<f64>,
                         g: ArrayView1<f64>,
                         m: &mut ndarray::ArrayViewMut1<f64>,
                         v: &mut ndarray::ArrayViewMut1<f64>| {
                ndarray::Zip::from(p)
                    .and(g)
                    .and(m)
                    .and(v)
                    .for_each(|p, &g, m, v| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
            };
            for ((mut pw, gw), (mut mw, mut vw)) in param
                .weight
                .rows_mut()
                .into_iter()
                .zip(g.weight.rows())
                .zip(m.weight.rows_mut().into_iter().zip(v.weight.rows_mut()))
            {
                apply(&mut pw, gw, &mut mw, &mut vw);
            }
            apply(
                &mut param.bias.view_mut(),
                g.bias.view(),
                &mut m.bias.view_mut(),
                &mut v.bias.view_mut(),
            );
        }
    }

    fn arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        for (tag, state) in [("m", &self.m), ("v", &self.v)] {
            for (prefix, lin) in [("visual", &state.visual), ("text", &state.text)] {
                out.push(NamedArray {
                    name: format!("adam.{tag}.{prefix}.weight"),
                    shape: lin.weight.shape().to_vec(),
                    data: lin.weight.iter().copied().collect(),
                });
                out.push(NamedArray {
                    name: format!("adam.{tag}.{prefix}.bias"),
                    shape: lin.bias.shape().to_vec(),
                    data: lin.bias.to_vec(),
                });
            }
        }
        out
    }

    fn load(&mut self, ck: &Checkpoint, step: u64) -> Result<()> {
        self.step = step;
        for (tag, state) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (prefix, lin) in [("visual", &mut state.visual), ("text", &mut state.text)] {
                for (part, target) in [("weight", true), ("bias", false)] {
                    let name = format!("adam.{tag}.{prefix}.{part}");
                    let a = ck
                        .array(&name)
                        .ok_or_else(|| Error::Format(format!("missing `{name}`")))?;
                    let dest = if target {
                        lin.weight.as_slice_mut()
                    } else {
                        lin.bias.as_slice_mut()
                    }
                    .expect("contiguous");
                    if dest.len() != a.data.len() {
                        return Err(Error::DimensionMismatch {
                            found: a.data.len(),
                            expected: dest.len(),
                        });
                    }
                    dest.copy_from_slice(&a.data);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipStepOutput {
    pub loss: f64,
    pub vl: f64,
    pub vv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VideoStepOutput {
    pub loss: f64,
    pub narrative: f64,
    pub silent: f64,
}

/// Owns the trainable encoders, the optimizer state and the frame store.
pub struct Trainer {
    cfg: TrainConfig,
    encoders: EncoderBundle,
    optimizer: Adam,
    store: FrameStore,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let encoders = EncoderBundle::new(cfg.encoder())?;
        let optimizer = Adam::new(&cfg, &encoders);
        let store = FrameStore::new(cfg.image_size);
        Ok(Self {
            cfg,
            encoders,
            optimizer,
            store,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn encoders(&self) -> &EncoderBundle {
        &self.encoders
    }

    pub fn store(&self) -> &FrameStore {
        &self.store
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer.step_count()
    }

    fn load_clip(&self, clip: &ClipRecord) -> Result<Vec<std::sync::Arc<Frame>>> {
        clip_frames(&self.store, clip, self.cfg.n_frames)
    }

    /// One update on narrated clips: two augmented views per clip, the
    /// vision-language loss on the first view and the view loss between both.
    pub fn train_step_clip(
        &mut self,
        clips: &[&ClipRecord],
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ClipStepOutput> {
        if clips.is_empty() {
            return Err(Error::EmptyList);
        }
        let aug_cfg = self.cfg.augment();
        let mut views_a = Vec::with_capacity(clips.len());
        let mut views_b = Vec::with_capacity(clips.len());
        let mut texts = Vec::with_capacity(clips.len());
        for clip in clips {
            let narration = clip
                .narration
                .as_deref()
                .ok_or_else(|| Error::SilentClipInBatch(clip.clip_id.clone()))?;
            let frames = self.load_clip(clip)?;
            for views in [&mut views_a, &mut views_b] {
                let aug = Augmentation::sample(&aug_cfg, rng);
                let augmented: Vec<Frame> = frames.iter().map(|f| aug.apply(f)).collect();
                let refs: Vec<&Frame> = augmented.iter().collect();
                views.push(self.encoders.visual.forward(&refs)?);
            }
            texts.push(self.encoders.text.forward(narration)?);
        }
        let emb = |xs: &[(crate::encoders::Embedding, _)]| {
            stack(&xs.iter().map(|x| x.0.clone()).collect::<Vec<_>>())
        };
        let (a, b, t) = (emb(&views_a), emb(&views_b), emb(&texts));
        let loss_cfg = self.cfg.loss();
        let vl = clip_vl_loss(a.view(), t.view(), &loss_cfg)?;
        let vv = clip_vv_loss(a.view(), b.view(), &loss_cfg)?;
        let loss = clip_total_loss(vl.value, vv.value, &loss_cfg);

        let grad_a = &vl.grad_a * loss_cfg.w_vl + &vv.grad_a * loss_cfg.w_vv;
        let grad_b = &vv.grad_b * loss_cfg.w_vv;
        let grad_t = &vl.grad_b * loss_cfg.w_vl;
        let mut grads = self.encoders.zero_grads();
        for (i, (e, tr)) in views_a.iter().enumerate() {
            grads.visual_backward(tr, e, grad_a.row(i));
        }
        for (i, (e, tr)) in views_b.iter().enumerate() {
            grads.visual_backward(tr, e, grad_b.row(i));
        }
        for (i, (e, tr)) in texts.iter().enumerate() {
            grads.text_backward(tr, e, grad_t.row(i));
        }
        self.optimizer.update(&mut self.encoders, &grads, lr);
        Ok(ClipStepOutput {
            loss,
            vl: vl.value,
            vv: vv.value,
        })
    }

    /// Forward pass of the video-level objective. Returns the loss and, when
    /// `grads` is given, accumulates parameter gradients into it.
    fn video_objective(
        &self,
        dataset: &Dataset,
        videos: &[&VideoRecord],
        bank: &MemoryBank,
        grads: Option<&mut EncoderGrads>,
    ) -> Result<VideoStepOutput> {
        if videos.is_empty() {
            return Err(Error::EmptyList);
        }
        if bank.is_empty() {
            return Err(Error::EmptyBank);
        }
        let k = self.cfg.k_retrieved.min(bank.len());
        let mut pooled = Vec::with_capacity(videos.len());
        let mut titles = Vec::with_capacity(videos.len());
        let mut retrieved = Vec::with_capacity(videos.len());
        for video in videos {
            if video.kind != VideoKind::Narrative {
                return Err(Error::NonNarrativeVideo(video.video_id.clone()));
            }
            let clips = dataset
                .clips_of(video)
                .into_iter()
                .map(|c| self.encoders.visual.forward(&self.load_clip(c)?))
                .collect::<Result<Vec<_>>>()?;
            let clip_embs: Vec<_> = clips.iter().map(|c| c.0.clone()).collect();
            let (v, pool) = aggregate_video_traced(&clip_embs)?;
            pooled.push((v, pool, clips));
            titles.push(self.encoders.text.forward(&video.title)?);
            let query = self.encoders.encode_query(&video.title)?;
            let hits = bank.retrieve(query.view(), k)?;
            retrieved.push(bank.values_of(&hits));
        }
        let v = stack(&pooled.iter().map(|p| p.0.clone()).collect::<Vec<_>>());
        let t = stack(&titles.iter().map(|p| p.0.clone()).collect::<Vec<_>>());
        let loss_cfg = self.cfg.loss();
        let narrative = video_narrative_loss(v.view(), t.view(), &loss_cfg)?;
        let silent = video_silent_loss(v.view(), &retrieved, &loss_cfg)?;
        let out = VideoStepOutput {
            loss: video_total_loss(narrative.value, silent.value),
            narrative: narrative.value,
            silent: silent.value,
        };
        if let Some(grads) = grads {
            // retrieved values are constants
            let grad_v: Array2<f64> = &narrative.grad_a + &silent.grad_video;
            for (i, (v_emb, pool, clips)) in pooled.iter().enumerate() {
                let g_clip = aggregate_backward(pool, v_emb, grad_v.row(i));
                for (e, tr) in clips {
                    grads.visual_backward(tr, e, g_clip.view());
                }
            }
            for (i, (e, tr)) in titles.iter().enumerate() {
                grads.text_backward(tr, e, narrative.grad_b.row(i));
            }
        }
        Ok(out)
    }

    /// Video-level loss without updating parameters.
    pub fn evaluate_video_loss(
        &self,
        dataset: &Dataset,
        videos: &[&VideoRecord],
        bank: &MemoryBank,
    ) -> Result<VideoStepOutput> {
        self.video_objective(dataset, videos, bank, None)
    }

    /// One update on narrative videos against the memory bank.
    pub fn train_step_video(
        &mut self,
        dataset: &Dataset,
        videos: &[&VideoRecord],
        bank: &MemoryBank,
        lr: f64,
    ) -> Result<VideoStepOutput> {
        let mut grads = self.encoders.zero_grads();
        let out = self.video_objective(dataset, videos, bank, Some(&mut grads))?;
        self.optimizer.update(&mut self.encoders, &grads, lr);
        Ok(out)
    }

    pub fn build_bank(&self, dataset: &Dataset) -> Result<MemoryBank> {
        MemoryBank::build(
            dataset,
            &dataset.silent_videos(),
            &self.encoders,
            &self.store,
            self.cfg.n_frames,
        )
    }

    pub fn refresh_bank(&self, dataset: &Dataset, bank: &mut MemoryBank) -> Result<()> {
        bank.refresh_values(dataset, &self.encoders, &self.store, self.cfg.n_frames)
    }

    /// Clip-to-narration top-1 accuracy within the given clips.
    pub fn clip_text_top1(&self, clips: &[&ClipRecord]) -> Result<f64> {
        let mut visual = Vec::new();
        let mut text = Vec::new();
        for clip in clips {
            let narration = clip
                .narration
                .as_deref()
                .ok_or_else(|| Error::SilentClipInBatch(clip.clip_id.clone()))?;
            visual.push(self.encoders.encode_clip(&self.load_clip(clip)?)?);
            text.push(self.encoders.encode_text(narration)?);
        }
        Ok(top1_accuracy(stack(&visual).view(), stack(&text).view()))
    }

    /// Video-to-title top-1 accuracy within the given videos.
    pub fn video_title_top1(&self, dataset: &Dataset, videos: &[&VideoRecord]) -> Result<f64> {
        let mut visual = Vec::new();
        let mut text = Vec::new();
        for video in videos {
            visual.push(encode_video(
                dataset,
                video,
                &self.encoders,
                &self.store,
                self.cfg.n_frames,
            )?);
            text.push(self.encoders.encode_text(&video.title)?);
        }
        Ok(top1_accuracy(stack(&visual).view(), stack(&text).view()))
    }

    pub fn checkpoint(&self, epoch: usize) -> Checkpoint {
        let mut arrays = self.encoders.trainable_arrays();
        arrays.extend(self.encoders.query_arrays());
        arrays.extend(self.optimizer.arrays());
        Checkpoint {
            config_hash: self.encoders.config_hash(),
            dim: self.encoders.dim(),
            meta: json!({
                "version": VERSION,
                "epoch": epoch,
                "optimizer_step": self.optimizer.step_count(),
                "config": self.cfg,
            }),
            arrays,
        }
    }

    /// Restores encoders and optimizer state. The training config stored in
    /// the checkpoint is used.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = config_from_checkpoint(ck)?;
        let mut trainer = Self::new(cfg)?;
        if trainer.encoders.config_hash() != ck.config_hash {
            return Err(Error::Format("checkpoint config hash mismatch".into()));
        }
        trainer.encoders.load_trainable(&ck.arrays)?;
        let step = ck.meta["optimizer_step"]
            .as_u64()
            .ok_or_else(|| Error::Format("missing optimizer_step".into()))?;
        trainer.optimizer.load(ck, step)?;
        Ok(trainer)
    }
}

pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<TrainConfig> {
    let cfg: TrainConfig = serde_json::from_value(ck.meta["config"].clone())?;
    cfg.validate()?;
    Ok(cfg)
}

/// Encoders from a checkpoint, for inference-only commands.
pub fn encoders_from_checkpoint(ck: &Checkpoint) -> Result<(EncoderBundle, TrainConfig)> {
    let cfg = config_from_checkpoint(ck)?;
    let mut enc = EncoderBundle::new(cfg.encoder())?;
    if enc.config_hash() != ck.config_hash {
        return Err(Error::Format("checkpoint config hash mismatch".into()));
    }
    enc.load_trainable(&ck.arrays)?;
    Ok((enc, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub records: Vec<EpochRecord>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir
        .join(CHECKPOINT_DIR)
        .join(format!("epoch-{epoch:04}.ckpt"))
}

fn bank_path_for(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("bank")
}

/// Latest checkpoint in a run directory, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    let dir = out_dir.join(CHECKPOINT_DIR);
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(epoch) = epoch {
            if best.as_ref().is_none_or(|(e, _)| epoch > *e) {
                best = Some((epoch, path));
            }
        }
    }
    Ok(best)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn write_metrics(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Runs the full schedule, writing checkpoints and `metrics.jsonl` into
/// `out_dir`. With `resume`, continues from the latest checkpoint there.
///
/// The bank is built once, its values are refreshed at the start of every
/// run of consecutive video epochs, and a copy is stored next to each
/// checkpoint.
pub fn run_pretraining(
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<RunSummary> {
    let schedule = alternating_schedule(cfg)?;
    let clips = dataset.narrated_clips();
    let narrative = dataset.narrative_videos();
    if narrative.is_empty() {
        return Err(Error::InvalidConfig(
            "dataset has no narrative videos".into(),
        ));
    }
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);

    let mut trainer = Trainer::new(cfg.clone())?;
    let mut bank: Option<MemoryBank> = None;
    let mut records = Vec::new();
    let mut start = 0;
    if resume {
        if let Some((epoch, path)) = latest_checkpoint(out_dir)? {
            let ck = Checkpoint::load(&path)?;
            let resumed = Trainer::from_checkpoint(&ck)?;
            if resumed.cfg != *cfg {
                return Err(Error::InvalidConfig(
                    "config differs from the checkpoint being resumed".into(),
                ));
            }
            trainer = resumed;
            let bank_path = bank_path_for(&path);
            if bank_path.is_file() {
                bank = Some(MemoryBank::load_expecting(&bank_path, cfg.dim)?);
            }
            if metrics_path.is_file() {
                records = read_metrics(&metrics_path)?;
                records.retain(|r| r.epoch <= epoch);
            }
            start = epoch;
        }
    }
    if bank.is_none() && schedule.iter().any(|l| l.stage != Stage::Clip) {
        let built = trainer.build_bank(dataset)?;
        if built.is_empty() {
            return Err(Error::EmptyBank);
        }
        bank = Some(built);
    }
    write_atomic(
        &out_dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(&json!({"version": VERSION, "config": cfg}))?.as_bytes(),
    )?;

    let mut last_checkpoint = None;
    for (i, label) in schedule.iter().enumerate().skip(start) {
        let lr = cfg.lr_at(i);
        let mut rng = epoch_rng(cfg.seed, label.epoch);
        let mut losses = Vec::new();
        match label.stage {
            Stage::Clip => {
                let mut order = clips.clone();
                order.shuffle(&mut rng);
                for batch in order.chunks(cfg.batch_clip) {
                    losses.push(trainer.train_step_clip(batch, lr, &mut rng)?.loss);
                }
            }
            Stage::Video => {
                let bank = bank.as_mut().ok_or(Error::EmptyBank)?;
                if i == 0 || schedule[i - 1].stage != Stage::Video {
                    trainer.refresh_bank(dataset, bank)?;
                }
                let mut order = narrative.clone();
                order.shuffle(&mut rng);
                for batch in order.chunks(cfg.batch_video) {
                    losses.push(trainer.train_step_video(dataset, batch, bank, lr)?.loss);
                }
            }
            Stage::Mixed => {
                let bank = bank.as_mut().ok_or(Error::EmptyBank)?;
                trainer.refresh_bank(dataset, bank)?;
                let mut clip_order = clips.clone();
                clip_order.shuffle(&mut rng);
                let mut video_order = narrative.clone();
                video_order.shuffle(&mut rng);
                let clip_batches: Vec<_> = clip_order.chunks(cfg.batch_clip).collect();
                let mut video_batches = video_order.chunks(cfg.batch_video).cycle();
                for group in clip_batches.chunks(cfg.alt_clip_epochs) {
                    for batch in group {
                        losses.push(trainer.train_step_clip(batch, lr, &mut rng)?.loss);
                    }
                    for _ in 0..cfg.alt_video_epochs {
                        let batch = video_batches.next().expect("cycled batches");
                        losses.push(trainer.train_step_video(dataset, batch, bank, lr)?.loss);
                    }
                }
            }
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        if !mean_loss.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "non-finite loss at epoch {}",
                label.epoch
            )));
        }
        records.push(EpochRecord {
            epoch: label.epoch,
            stage: label.stage,
            mean_loss,
            lr,
        });
        write_metrics(&metrics_path, &records)?;
        if label.epoch % cfg.checkpoint_every == 0 || label.epoch == cfg.total_epochs {
            let path = checkpoint_path(out_dir, label.epoch);
            trainer.checkpoint(label.epoch).save(&path)?;
            if let Some(bank) = &bank {
                bank.save(bank_path_for(&path))?;
            }
            last_checkpoint = Some(path);
        }
    }
    let checkpoint = match last_checkpoint {
        Some(p) => p,
        None => checkpoint_path(out_dir, cfg.total_epochs),
    };
    Ok(RunSummary {
        checkpoint,
        metrics: metrics_path,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(cfg: &TrainConfig) -> String {
        alternating_schedule(cfg)
            .unwrap()
            .iter()
            .map(|l| match l.stage {
                Stage::Clip => 'C',
                Stage::Video => 'V',
                Stage::Mixed => 'M',
            })
            .collect()
    }

    fn sched(total: usize, warm: usize, c: usize, v: usize) -> TrainConfig {
        TrainConfig {
            total_epochs: total,
            warmup_clip_epochs: warm,
            alt_clip_epochs: c,
            alt_video_epochs: v,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn default_schedule() {
        let s = labels(&TrainConfig::default());
        let expected = format!("{}{}", "C".repeat(40), "CCCVV".repeat(4));
        assert_eq!(s, expected);
        assert_eq!(s.matches('C').count(), 52);
        assert_eq!(s.matches('V').count(), 8);
    }

    #[test]
    fn small_schedules() {
        assert_eq!(labels(&sched(5, 5, 3, 2)), "CCCCC");
        assert_eq!(labels(&sched(7, 2, 2, 1)), "CCCCVCC");
        assert_eq!(labels(&sched(4, 1, 0, 1)), "CVVV");
    }

    #[test]
    fn batch_alternation_schedule() {
        let cfg = TrainConfig {
            alternation: Alternation::Batch,
            ..sched(6, 2, 3, 2)
        };
        assert_eq!(labels(&cfg), "CCMMMM");
        let bad = TrainConfig {
            alternation: Alternation::Batch,
            ..sched(6, 2, 0, 2)
        };
        assert!(alternating_schedule(&bad).is_err());
    }

    #[test]
    fn invalid_schedules() {
        assert!(alternating_schedule(&sched(5, 6, 3, 2)).is_err());
        assert!(alternating_schedule(&sched(5, 2, 0, 0)).is_err());
        assert!(alternating_schedule(&sched(0, 0, 3, 2)).is_err());
    }

    #[test]
    fn cosine_lr() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), cfg.lr);
        let last = cfg.lr_at(cfg.total_epochs - 1);
        assert!(last <= 1e-2 * cfg.lr && last > 0.0);
        for e in 1..cfg.total_epochs {
            assert!(cfg.lr_at(e) <= cfg.lr_at(e - 1));
        }
    }

    #[test]
    fn yaml_config() {
        let cfg = TrainConfig::from_yaml_str("total_epochs: 7\nwarmup_clip_epochs: 2\nlr: 0.01\n")
            .unwrap();
        assert_eq!(
            (cfg.total_epochs, cfg.warmup_clip_epochs, cfg.lr),
            (7, 2, 0.01)
        );
        assert_eq!(cfg.batch_clip, 120);
        assert!(TrainConfig::from_yaml_str("total_epochs: 7\n").is_err());
        assert!(TrainConfig::from_yaml_str("bogus_key: 1\n").is_err());
        let roundtrip = TrainConfig::from_yaml_str(&TrainConfig::default().to_yaml()).unwrap();
        assert_eq!(roundtrip, TrainConfig::default());
    }
}
