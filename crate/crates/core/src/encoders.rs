//! Visual, text and frozen query encoders mapping into a shared unit-norm
//! embedding space, plus video-level average pooling.
//!
//! The bundled encoders are small seeded models: a fixed pixel-statistics
//! backbone or a signed hashed bag-of-tokens, followed by a trainable linear
//! projection and L2 normalization. Larger backbones plug in behind the same
//! [`EncoderBundle`] surface.

use std::ops::Deref;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::Frame;
use crate::persist::{stable_hash, NamedArray};

/// Unit-norm dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Array1<f64>);

impl Embedding {
    /// L2-normalizes `v`. Fails on zero or non-finite input.
    pub fn normalize(v: Array1<f64>) -> Result<Self> {
        Ok(normalize_with_norm(v)?.0)
    }

    /// Wraps a vector that is already unit-norm (checked within 1e-6).
    pub fn from_unit(v: Array1<f64>) -> Result<Self> {
        let n = v.dot(&v).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
            return Err(Error::ShapeMismatch(format!("vector norm {n} is not 1")));
        }
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn into_array(self) -> Array1<f64> {
        self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.dot(&other.0)
    }
}

fn normalize_with_norm(v: Array1<f64>) -> Result<(Embedding, f64)> {
    let n = v.dot(&v).sqrt();
    if !n.is_finite() || n == 0.0 {
        return Err(Error::ShapeMismatch(
            "cannot normalize a zero or non-finite vector".into(),
        ));
    }
    Ok((Embedding(v / n), n))
}

/// Gradient of `x / |x|` mapped back to `x`.
fn normalize_backward(out: &Embedding, norm: f64, grad_out: ArrayView1<f64>) -> Array1<f64> {
    let radial = out.0.dot(&grad_out);
    (&grad_out - &(&out.0 * radial)) / norm
}

/// Stacks embeddings into a `B x D` matrix.
pub fn stack(embeddings: &[Embedding]) -> Array2<f64> {
    let dim = embeddings.first().map_or(0, Embedding::dim);
    let mut out = Array2::zeros((embeddings.len(), dim));
    for (mut row, e) in out.rows_mut().into_iter().zip(embeddings) {
        row.assign(&e.0);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("valid std");
        Self {
            weight: Array2::from_shape_simple_fn((out_dim, in_dim), || normal.sample(rng)),
            bias: Array1::zeros(out_dim),
        }
    }

    fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

/// What a projection needs to route a gradient back to its parameters.
#[derive(Debug, Clone)]
pub struct ProjectionTrace {
    input: Array1<f64>,
    norm: f64,
}

/// Projects `input`, normalizes, and keeps the trace.
fn project(linear: &Linear, input: Array1<f64>) -> Result<(Embedding, ProjectionTrace)> {
    let (emb, norm) = normalize_with_norm(linear.forward(&input))?;
    Ok((emb, ProjectionTrace { input, norm }))
}

/// Accumulates `d loss / d params` for one projected output.
fn project_backward(
    trace: &ProjectionTrace,
    out: &Embedding,
    grad_out: ArrayView1<f64>,
    acc: &mut Linear,
) {
    let g = normalize_backward(out, trace.norm, grad_out);
    let g_col = g.view().insert_axis(Axis(1));
    let x_row = trace.input.view().insert_axis(Axis(0));
    acc.weight += &g_col.dot(&x_row);
    acc.bias += &g;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Shared embedding dimension.
    pub dim: usize,
    /// The visual backbone averages pixels over a `grid x grid` layout.
    pub grid: usize,
    pub text_buckets: usize,
    /// Maximum number of tokens kept per text.
    pub text_len: usize,
    pub query_dim: usize,
    pub query_buckets: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 768,
            grid: 4,
            text_buckets: 512,
            text_len: 77,
            query_dim: 768,
            query_buckets: 512,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn query_spec(&self) -> QuerySpec {
        QuerySpec {
            dim: self.query_dim,
            buckets: self.query_buckets,
            text_len: self.text_len,
            seed: self.seed ^ 0x5155_4552_595f_4b45,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dim", self.dim),
            ("grid", self.grid),
            ("text_buckets", self.text_buckets),
            ("text_len", self.text_len),
            ("query_dim", self.query_dim),
            ("query_buckets", self.query_buckets),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Frozen query-encoder description; enough to rebuild it bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub dim: usize,
    pub buckets: usize,
    pub text_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoder {
    grid: usize,
    pub proj: Linear,
}

impl VisualEncoder {
    fn feature_dim(grid: usize) -> usize {
        3 * grid * grid + 3
    }

    /// Backbone features: centred per-cell channel means, then per-channel
    /// standard deviations.
    pub fn frame_features(&self, frame: &Frame) -> Array1<f64> {
        let (w, h) = frame.dimensions();
        let g = self.grid;
        let mut sums = vec![0.0f64; 3 * g * g];
        let mut counts = vec![0usize; g * g];
        let mut total = [0.0f64; 3];
        let mut total_sq = [0.0f64; 3];
        for (x, y, px) in frame.enumerate_pixels() {
            let cell = (y as usize * g / h as usize) * g + (x as usize * g / w as usize);
            counts[cell] += 1;
            for c in 0..3 {
                let v = f64::from(px[c]);
                sums[cell * 3 + c] += v;
                total[c] += v;
                total_sq[c] += v * v;
            }
        }
        let n = f64::from(w * h);
        let mut feats = Vec::with_capacity(Self::feature_dim(g));
        for (i, s) in sums.iter().enumerate() {
            let count = counts[i / 3].max(1) as f64;
            feats.push(s / count - 0.5);
        }
        for c in 0..3 {
            let mean = total[c] / n;
            feats.push((total_sq[c] / n - mean * mean).max(0.0).sqrt());
        }
        Array1::from(feats)
    }

    /// Mean of per-frame backbone features.
    pub fn pooled_features<F: Deref<Target = Frame>>(&self, frames: &[F]) -> Result<Array1<f64>> {
        let first = frames.first().ok_or(Error::EmptyList)?;
        let dims = first.dimensions();
        let mut acc = Array1::zeros(Self::feature_dim(self.grid));
        for f in frames {
            if f.dimensions() != dims {
                return Err(Error::ShapeMismatch(format!(
                    "frame size {:?} differs from {:?}",
                    f.dimensions(),
                    dims
                )));
            }
            acc += &self.frame_features(f);
        }
        Ok(acc / frames.len() as f64)
    }

    pub fn forward<F: Deref<Target = Frame>>(
        &self,
        frames: &[F],
    ) -> Result<(Embedding, ProjectionTrace)> {
        project(&self.proj, self.pooled_features(frames)?)
    }

    pub fn encode<F: Deref<Target = Frame>>(&self, frames: &[F]) -> Result<Embedding> {
        Ok(self.forward(frames)?.0)
    }
}

/// Lower-cases and splits on anything that is not alphanumeric or `-`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .map(|t| t.trim_matches('-'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    buckets: usize,
    max_len: usize,
    pub proj: Linear,
}

impl TextEncoder {
    /// Signed hashed bag of the first `max_len` tokens, L2-normalized.
    pub fn features(&self, text: &str) -> Result<Array1<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut x = Array1::<f64>::zeros(self.buckets);
        for token in tokens.iter().take(self.max_len) {
            let h = stable_hash(token.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            x[(h % self.buckets as u64) as usize] += sign;
        }
        let n = x.dot(&x).sqrt();
        if n == 0.0 {
            // every token collided and cancelled
            x[0] = 1.0;
            return Ok(x);
        }
        Ok(x / n)
    }

    pub fn forward(&self, text: &str) -> Result<(Embedding, ProjectionTrace)> {
        project(&self.proj, self.features(text)?)
    }

    pub fn encode(&self, text: &str) -> Result<Embedding> {
        Ok(self.forward(text)?.0)
    }
}

/// Frozen text encoder producing retrieval keys and queries. It exposes no
/// mutable access to its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEncoder {
    spec: QuerySpec,
    inner: TextEncoder,
}

impl QueryEncoder {
    pub fn new(spec: QuerySpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Self {
            spec,
            inner: TextEncoder {
                buckets: spec.buckets,
                max_len: spec.text_len,
                proj: Linear::init(spec.dim, spec.buckets, &mut rng),
            },
        }
    }

    pub fn spec(&self) -> QuerySpec {
        self.spec
    }

    pub fn encode(&self, title: &str) -> Result<Embedding> {
        self.inner.encode(title)
    }

    pub fn weights(&self) -> &Linear {
        &self.inner.proj
    }
}

/// Gradient accumulator matching the trainable parameters of a bundle.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub visual: Linear,
    pub text: Linear,
}

impl EncoderGrads {
    pub fn visual_backward(
        &mut self,
        trace: &ProjectionTrace,
        out: &Embedding,
        grad: ArrayView1<f64>,
    ) {
        project_backward(trace, out, grad, &mut self.visual);
    }

    pub fn text_backward(
        &mut self,
        trace: &ProjectionTrace,
        out: &Embedding,
        grad: ArrayView1<f64>,
    ) {
        project_backward(trace, out, grad, &mut self.text);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBundle {
    config: EncoderConfig,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    query: QueryEncoder,
}

pub const TRAINABLE_PARAMS: [&str; 4] =
    ["visual.weight", "visual.bias", "text.weight", "text.bias"];

impl EncoderBundle {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut vrng = ChaCha8Rng::seed_from_u64(config.seed);
        vrng.set_stream(1);
        let mut trng = ChaCha8Rng::seed_from_u64(config.seed);
        trng.set_stream(2);
        let visual = VisualEncoder {
            grid: config.grid,
            proj: Linear::init(
                config.dim,
                VisualEncoder::feature_dim(config.grid),
                &mut vrng,
            ),
        };
        let text = TextEncoder {
            buckets: config.text_buckets,
            max_len: config.text_len,
            proj: Linear::init(config.dim, config.text_buckets, &mut trng),
        };
        let query = QueryEncoder::new(config.query_spec());
        Ok(Self {
            config,
            visual,
            text,
            query,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn query(&self) -> &QueryEncoder {
        &self.query
    }

    pub fn encode_clip<F: Deref<Target = Frame>>(&self, frames: &[F]) -> Result<Embedding> {
        self.visual.encode(frames)
    }

    pub fn encode_text(&self, text: &str) -> Result<Embedding> {
        self.text.encode(text)
    }

    pub fn encode_query(&self, title: &str) -> Result<Embedding> {
        self.query.encode(title)
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            visual: self.visual.proj.zeros_like(),
            text: self.text.proj.zeros_like(),
        }
    }

    /// Trainable parameters as `(name, array)` pairs in a fixed order.
    pub fn trainable_arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        for (prefix, lin) in [("visual", &self.visual.proj), ("text", &self.text.proj)] {
            out.push(NamedArray {
                name: format!("{prefix}.weight"),
                shape: lin.weight.shape().to_vec(),
                data: lin.weight.iter().copied().collect(),
            });
            out.push(NamedArray {
                name: format!("{prefix}.bias"),
                shape: lin.bias.shape().to_vec(),
                data: lin.bias.to_vec(),
            });
        }
        out
    }

    /// Frozen query weights, stored so checkpoints can prove they never moved.
    pub fn query_arrays(&self) -> Vec<NamedArray> {
        let lin = self.query.weights();
        vec![
            NamedArray {
                name: "query.weight".into(),
                shape: lin.weight.shape().to_vec(),
                data: lin.weight.iter().copied().collect(),
            },
            NamedArray {
                name: "query.bias".into(),
                shape: lin.bias.shape().to_vec(),
                data: lin.bias.to_vec(),
            },
        ]
    }

    /// Overwrites trainable parameters from named arrays.
    pub fn load_trainable(&mut self, arrays: &[NamedArray]) -> Result<()> {
        let find = |name: &str| {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
        };
        for (prefix, lin) in [
            ("visual", &mut self.visual.proj),
            ("text", &mut self.text.proj),
        ] {
            let w = find(&format!("{prefix}.weight"))?;
            if w.shape != lin.weight.shape() {
                return Err(Error::DimensionMismatch {
                    found: w.shape.first().copied().unwrap_or(0),
                    expected: lin.weight.nrows(),
                });
            }
            lin.weight = Array2::from_shape_vec(lin.weight.raw_dim(), w.data.clone())
                .map_err(|e| Error::Format(e.to_string()))?;
            let b = find(&format!("{prefix}.bias"))?;
            if b.shape != lin.bias.shape() {
                return Err(Error::DimensionMismatch {
                    found: b.shape.first().copied().unwrap_or(0),
                    expected: lin.bias.len(),
                });
            }
            lin.bias = Array1::from(b.data.clone());
        }
        Ok(())
    }

    pub fn config_hash(&self) -> u64 {
        stable_hash(
            serde_json::to_string(&self.config)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

/// Trace of a video-level average pool.
#[derive(Debug, Clone)]
pub struct PoolTrace {
    count: usize,
    norm: f64,
}

/// Element-wise mean of clip embeddings, re-normalized.
pub fn aggregate_video(clips: &[Embedding]) -> Result<Embedding> {
    Ok(aggregate_video_traced(clips)?.0)
}

pub fn aggregate_video_traced(clips: &[Embedding]) -> Result<(Embedding, PoolTrace)> {
    let first = clips.first().ok_or(Error::EmptyList)?;
    let mut sum = Array1::zeros(first.dim());
    for e in clips {
        if e.dim() != first.dim() {
            return Err(Error::ShapeMismatch(format!(
                "embedding dim {} differs from {}",
                e.dim(),
                first.dim()
            )));
        }
        sum += &e.0;
    }
    let (emb, norm) = normalize_with_norm(sum / clips.len() as f64)?;
    Ok((
        emb,
        PoolTrace {
            count: clips.len(),
            norm,
        },
    ))
}

/// Gradient reaching each pooled clip embedding (identical for all clips).
pub fn aggregate_backward(
    trace: &PoolTrace,
    out: &Embedding,
    grad: ArrayView1<f64>,
) -> Array1<f64> {
    normalize_backward(out, trace.norm, grad) / trace.count as f64
}
