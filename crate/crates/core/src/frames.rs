//! Frame loading, procedural rendering of synthetic frames, and the random
//! augmentations used for the view-level objective.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use image::imageops::{self, FilterType};
use image::{Rgb, Rgb32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_frames, ClipRecord, SyntheticFrameRef};
use crate::error::{Error, Result};

pub type Frame = Rgb32FImage;

const NOISE_AMPLITUDE: f32 = 0.05;

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Band colour for attribute `index`; hues are spread by the golden ratio.
fn band_colour(index: usize, phase: f32, value: f32) -> [f32; 3] {
    let hue = phase + index as f32 * 0.618_034;
    hsv_to_rgb(hue, 0.8, value)
}

/// Renders a synthetic frame as three horizontal bands (concept, variant,
/// step) with uniform pixel noise seeded by the reference.
pub fn render_synthetic(reference: &SyntheticFrameRef, size: u32) -> Frame {
    let colours = [
        band_colour(reference.concept, 0.0, 0.9),
        band_colour(reference.variant, 0.31, 0.6),
        band_colour(reference.step, 0.57, 0.3),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(reference.noise));
    Rgb32FImage::from_fn(size, size, |_, y| {
        let band = ((y as usize * 3) / size as usize).min(2);
        let base = colours[band];
        let mut px = [0.0f32; 3];
        for (out, b) in px.iter_mut().zip(base) {
            *out = (b + rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE)).clamp(0.0, 1.0);
        }
        Rgb(px)
    })
}

/// Resolves frame references to square RGB frames of a fixed size.
///
/// `synth:` references are rendered; anything else is read as an image file.
/// Loaded frames are cached up to `cache_limit_bytes`.
pub struct FrameStore {
    image_size: u32,
    cache: Mutex<HashMap<String, Arc<Frame>>>,
    cache_limit_bytes: usize,
}

impl FrameStore {
    pub fn new(image_size: u32) -> Self {
        Self {
            image_size,
            cache: Mutex::new(HashMap::new()),
            cache_limit_bytes: 256 << 20,
        }
    }

    pub fn image_size(&self) -> u32 {
        self.image_size
    }

    pub fn load(&self, reference: &str) -> Result<Arc<Frame>> {
        if let Some(f) = self
            .cache
            .lock()
            .expect("frame cache poisoned")
            .get(reference)
        {
            return Ok(Arc::clone(f));
        }
        let frame = Arc::new(self.decode(reference)?);
        let frame_bytes = (self.image_size as usize).pow(2) * 3 * 4;
        let mut cache = self.cache.lock().expect("frame cache poisoned");
        if (cache.len() + 1) * frame_bytes <= self.cache_limit_bytes {
            cache.insert(reference.to_string(), Arc::clone(&frame));
        }
        Ok(frame)
    }

    pub fn load_all(&self, references: &[&str]) -> Result<Vec<Arc<Frame>>> {
        references.iter().map(|r| self.load(r)).collect()
    }

    fn decode(&self, reference: &str) -> Result<Frame> {
        if reference.starts_with(SyntheticFrameRef::PREFIX) {
            let parsed = SyntheticFrameRef::parse(reference).ok_or_else(|| Error::Frame {
                reference: reference.to_string(),
                reason: "malformed synthetic reference".into(),
            })?;
            return Ok(render_synthetic(&parsed, self.image_size));
        }
        let path = Path::new(reference);
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path)
            .map_err(|e| Error::Frame {
                reference: reference.to_string(),
                reason: e.to_string(),
            })?
            .to_rgb32f();
        if img.dimensions() == (self.image_size, self.image_size) {
            Ok(img)
        } else {
            Ok(imageops::resize(
                &img,
                self.image_size,
                self.image_size,
                FilterType::Triangle,
            ))
        }
    }
}

/// Loads the `n_frames` evenly sampled frames of a clip.
pub fn clip_frames(
    store: &FrameStore,
    clip: &ClipRecord,
    n_frames: usize,
) -> Result<Vec<Arc<Frame>>> {
    if clip.frames.is_empty() {
        return Err(Error::EmptyList);
    }
    store.load_all(&sample_frames(clip, n_frames))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Range of the crop area as a fraction of the frame area.
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub horizontal_flip: bool,
    /// Brightness factor drawn from `1 ± brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale_min: 0.6,
            crop_scale_max: 1.0,
            horizontal_flip: true,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

/// One draw of augmentation parameters, shared by every frame of a clip view.
#[derive(Debug, Clone, Copy)]
pub struct Augmentation {
    crop_x: f64,
    crop_y: f64,
    crop_side: f64,
    flip: bool,
    brightness: f32,
    contrast: f32,
}

impl Augmentation {
    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let lo = cfg.crop_scale_min.clamp(1e-3, 1.0);
        let hi = cfg.crop_scale_max.clamp(lo, 1.0);
        let area = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let side = area.sqrt();
        let crop_x = rng.gen_range(0.0..=1.0) * (1.0 - side);
        let crop_y = rng.gen_range(0.0..=1.0) * (1.0 - side);
        let flip = cfg.horizontal_flip && rng.gen_bool(0.5);
        let mut jitter = |amount: f64| -> f32 {
            if amount > 0.0 {
                rng.gen_range(1.0 - amount..=1.0 + amount) as f32
            } else {
                1.0
            }
        };
        let brightness = jitter(cfg.brightness);
        let contrast = jitter(cfg.contrast);
        Self {
            crop_x,
            crop_y,
            crop_side: side,
            flip,
            brightness,
            contrast,
        }
    }

    pub fn apply(&self, frame: &Frame) -> Frame {
        let (w, h) = frame.dimensions();
        let cw = ((self.crop_side * f64::from(w)).round() as u32).clamp(1, w);
        let ch = ((self.crop_side * f64::from(h)).round() as u32).clamp(1, h);
        let x = ((self.crop_x * f64::from(w)) as u32).min(w - cw);
        let y = ((self.crop_y * f64::from(h)) as u32).min(h - ch);
        let cropped = imageops::crop_imm(frame, x, y, cw, ch).to_image();
        let mut out = if (cw, ch) == (w, h) {
            cropped
        } else {
            imageops::resize(&cropped, w, h, FilterType::Triangle)
        };
        if self.flip {
            imageops::flip_horizontal_in_place(&mut out);
        }
        let n = out.pixels().len().max(1) as f32;
        let mean = out
            .pixels()
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .sum::<f32>()
            / n;
        for p in out.pixels_mut() {
            for c in p.0.iter_mut() {
                *c = (((*c - mean) * self.contrast + mean) * self.brightness).clamp(0.0, 1.0);
            }
        }
        out
    }
}
