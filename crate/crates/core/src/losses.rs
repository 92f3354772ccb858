//! Contrastive objectives with analytic gradients.
//!
//! Every loss takes row-aligned batches of unit-norm embeddings. Logits are
//! inner products divided by the temperature, and each loss is the negative
//! log-likelihood of the positives.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub w_vl: f64,
    pub w_vv: f64,
    /// Average the visual-to-text and text-to-visual directions.
    pub symmetric: bool,
    /// Use retrieved entries of other queries as negatives in the silent
    /// loss. Disabling it gives the within-query-only form.
    pub cross_query_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            w_vl: 0.5,
            w_vv: 0.5,
            symmetric: true,
            cross_query_negatives: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        if !(self.w_vl >= 0.0 && self.w_vv >= 0.0) || !(self.w_vl + self.w_vv > 0.0) {
            return Err(Error::InvalidConfig(
                "loss weights must be >= 0 with a positive sum".into(),
            ));
        }
        Ok(())
    }
}

/// Loss value with gradients for both batch arguments.
#[derive(Debug, Clone)]
pub struct PairLoss {
    pub value: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_into(row: ArrayView1<f64>, out: &mut [f64]) {
    let lse = log_sum_exp(row.iter().copied());
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        *o = (x - lse).exp();
    }
}

fn check_pair(a: &ArrayView2<f64>, b: &ArrayView2<f64>, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if a.nrows() == 0 || a.nrows() != b.nrows() {
        return Err(Error::BatchMismatch(format!(
            "{} rows vs {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::BatchMismatch(format!(
            "dimension {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

/// InfoNCE with diagonal positives over the `B x B` similarity matrix.
pub fn info_nce(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &LossConfig) -> Result<PairLoss> {
    check_pair(&a, &b, cfg)?;
    let n = a.nrows();
    let tau = cfg.temperature;
    let logits = a.dot(&b.t()) / tau;

    // d loss / d logits
    let mut g = Array2::<f64>::zeros((n, n));
    let mut row_loss = 0.0;
    let mut buf = vec![0.0; n];
    for i in 0..n {
        let row = logits.row(i);
        row_loss += log_sum_exp(row.iter().copied()) - row[i];
        softmax_into(row, &mut buf);
        for j in 0..n {
            g[[i, j]] += buf[j];
        }
        g[[i, i]] -= 1.0;
    }
    row_loss /= n as f64;

    let value = if cfg.symmetric {
        let mut col_loss = 0.0;
        let mut gc = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let col = logits.column(j);
            col_loss += log_sum_exp(col.iter().copied()) - col[j];
            softmax_into(col, &mut buf);
            for i in 0..n {
                gc[[i, j]] += buf[i];
            }
            gc[[j, j]] -= 1.0;
        }
        col_loss /= n as f64;
        g = (g + gc) / (2.0 * n as f64);
        0.5 * (row_loss + col_loss)
    } else {
        g /= n as f64;
        row_loss
    };

    let grad_a = g.dot(&b) / tau;
    let grad_b = g.t().dot(&a) / tau;
    Ok(PairLoss {
        value: value.max(0.0),
        grad_a,
        grad_b,
    })
}

/// Clip visual embeddings against their narrations.
pub fn clip_vl_loss(
    visual: ArrayView2<f64>,
    text: ArrayView2<f64>,
    cfg: &LossConfig,
) -> Result<PairLoss> {
    info_nce(visual, text, cfg)
}

/// Two augmented views of the same clip; the positive for `view_a[i]` is
/// `view_b[i]`.
pub fn clip_vv_loss(
    view_a: ArrayView2<f64>,
    view_b: ArrayView2<f64>,
    cfg: &LossConfig,
) -> Result<PairLoss> {
    info_nce(view_a, view_b, cfg)
}

pub fn clip_total_loss(vl: f64, vv: f64, cfg: &LossConfig) -> f64 {
    cfg.w_vl * vl + cfg.w_vv * vv
}

/// Pooled video embeddings against their title embeddings.
pub fn video_narrative_loss(
    video: ArrayView2<f64>,
    title: ArrayView2<f64>,
    cfg: &LossConfig,
) -> Result<PairLoss> {
    info_nce(video, title, cfg)
}

/// Retrieved memory values for one query video: `K` visual and `K` text
/// embeddings, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedSet {
    pub visual: Array2<f64>,
    pub text: Array2<f64>,
}

impl RetrievedSet {
    pub fn len(&self) -> usize {
        self.visual.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.nrows() == 0
    }
}

#[derive(Debug, Clone)]
pub struct SilentLoss {
    pub value: f64,
    pub grad_video: Array2<f64>,
    pub grad_retrieved: Vec<RetrievedSet>,
}

/// Retrieval-augmented loss for narrative videos.
///
/// For query `i`, the positives are its own `2K` retrieved values (visual and
/// text). With cross-query negatives the retrieved values of every other
/// query in the batch form the negatives; without them the denominator only
/// holds the positives and the loss is identically zero.
pub fn video_silent_loss(
    video: ArrayView2<f64>,
    retrieved: &[RetrievedSet],
    cfg: &LossConfig,
) -> Result<SilentLoss> {
    cfg.validate()?;
    let n = video.nrows();
    if n == 0 || retrieved.len() != n {
        return Err(Error::BatchMismatch(format!(
            "{n} videos vs {} retrieved sets",
            retrieved.len()
        )));
    }
    let k = retrieved[0].len();
    for (query, set) in retrieved.iter().enumerate() {
        if set.len() != k || set.text.nrows() != k || k == 0 {
            return Err(Error::RaggedRetrieval {
                query,
                got: set.len().min(set.text.nrows()),
                expected: k.max(1),
            });
        }
        if set.visual.ncols() != video.ncols() || set.text.ncols() != video.ncols() {
            return Err(Error::BatchMismatch(format!(
                "retrieved dimension differs from video dimension {}",
                video.ncols()
            )));
        }
    }
    let tau = cfg.temperature;
    let dim = video.ncols();
    let per = 2 * k;

    // candidates: for query j, rows [j*2K, j*2K + K) are visual, then K text
    let mut cands = Array2::<f64>::zeros((n * per, dim));
    for (j, set) in retrieved.iter().enumerate() {
        cands
            .slice_mut(s![j * per..j * per + k, ..])
            .assign(&set.visual);
        cands
            .slice_mut(s![j * per + k..(j + 1) * per, ..])
            .assign(&set.text);
    }
    let logits = video.dot(&cands.t()) / tau;

    let mut g = Array2::<f64>::zeros(logits.raw_dim());
    let mut total = 0.0;
    if cfg.cross_query_negatives {
        for i in 0..n {
            let row = logits.row(i);
            let pos = row.slice(s![i * per..(i + 1) * per]);
            let lse_all = log_sum_exp(row.iter().copied());
            let lse_pos = log_sum_exp(pos.iter().copied());
            total += lse_all - lse_pos;
            for (j, &x) in row.iter().enumerate() {
                g[[i, j]] = (x - lse_all).exp();
            }
            for j in i * per..(i + 1) * per {
                g[[i, j]] -= (logits[[i, j]] - lse_pos).exp();
            }
        }
    }
    g /= n as f64;
    let value = (total / n as f64).max(0.0);

    let grad_video = g.dot(&cands) / tau;
    let grad_cands = g.t().dot(&video) / tau;
    let grad_retrieved = (0..n)
        .map(|j| RetrievedSet {
            visual: grad_cands.slice(s![j * per..j * per + k, ..]).to_owned(),
            text: grad_cands
                .slice(s![j * per + k..(j + 1) * per, ..])
                .to_owned(),
        })
        .collect();
    Ok(SilentLoss {
        value,
        grad_video,
        grad_retrieved,
    })
}

pub fn video_total_loss(narrative: f64, silent: f64) -> f64 {
    narrative + silent
}

/// Top-1 retrieval accuracy of `queries` against row-aligned `targets`.
pub fn top1_accuracy(queries: ArrayView2<f64>, targets: ArrayView2<f64>) -> f64 {
    let sims = queries.dot(&targets.t());
    let hits = sims
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(i, row)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |acc, (j, &v)| {
                    if v > acc.1 {
                        (j, v)
                    } else {
                        acc
                    }
                });
            best.0 == *i
        })
        .count();
    hits as f64 / queries.nrows().max(1) as f64
}

/// Mean of a slice; `NaN` for empty input.
pub fn mean(xs: &[f64]) -> f64 {
    Array1::from(xs.to_vec()).mean().unwrap_or(f64::NAN)
}
