//! Segment-level text-video similarity and the symmetric InfoNCE loss.
//!
//! A video is represented by `S` unit-norm segment vectors; its score
//! against a text vector is the mean of the `S` dot products. The loss is
//! the average of the video-to-text and text-to-video cross-entropies over
//! the `N x N` similarity matrix scaled by `1 / tau`.

use crate::error::{Error, Result};

/// Tolerance on `| ||v|| - 1 |` for representation vectors.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

fn check_unit(v: &[f64], index: usize) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE {
        Ok(())
    } else {
        Err(Error::NotUnitNorm { index, norm })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn pair_similarity(h: &[f64], g: &[f64]) -> Result<f64> {
    if h.len() != g.len() {
        return Err(Error::DimensionMismatch {
            left: h.len(),
            right: g.len(),
        });
    }
    check_unit(h, 0)?;
    check_unit(g, 1)?;
    Ok(dot(h, g))
}

/// Mean over segments of `h(s_j)^T g`.
pub fn segment_similarity<V: AsRef<[f64]>>(segments: &[V], g: &[f64]) -> Result<f64> {
    if segments.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_unit(g, segments.len())?;
    for (j, s) in segments.iter().enumerate() {
        let s = s.as_ref();
        if s.len() != g.len() {
            return Err(Error::DimensionMismatch {
                left: s.len(),
                right: g.len(),
            });
        }
        check_unit(s, j)?;
    }
    Ok(mean_similarity(segments, g))
}

fn mean_similarity<V: AsRef<[f64]>>(segments: &[V], g: &[f64]) -> f64 {
    segments.iter().map(|s| dot(s.as_ref(), g)).sum::<f64>() / segments.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalBatch {
    /// `videos[i][j]` is segment `j` of video `i`.
    pub videos: Vec<Vec<Vec<f64>>>,
    pub texts: Vec<Vec<f64>>,
    pub tau: f64,
}

impl RetrievalBatch {
    pub fn new(videos: Vec<Vec<Vec<f64>>>, texts: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        let batch = Self { videos, texts, tau };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if self.texts.is_empty() {
            return Err(Error::EmptyInput);
        }
        if self.videos.len() != self.texts.len() {
            return Err(Error::invalid(format!(
                "{} videos but {} texts",
                self.videos.len(),
                self.texts.len()
            )));
        }
        let dim = self.texts[0].len();
        for (i, t) in self.texts.iter().enumerate() {
            if t.len() != dim {
                return Err(Error::DimensionMismatch {
                    left: dim,
                    right: t.len(),
                });
            }
            check_unit(t, i)?;
        }
        for video in &self.videos {
            if video.is_empty() {
                return Err(Error::invalid("video with no segments"));
            }
            for (j, s) in video.iter().enumerate() {
                if s.len() != dim {
                    return Err(Error::DimensionMismatch {
                        left: dim,
                        right: s.len(),
                    });
                }
                check_unit(s, j)?;
            }
        }
        Ok(())
    }

    /// `sim[i][j] = f(video_i, text_j)`.
    pub fn similarity_matrix(&self) -> Vec<Vec<f64>> {
        self.videos
            .iter()
            .map(|v| self.texts.iter().map(|t| mean_similarity(v, t)).collect())
            .collect()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub video_to_text: f64,
    pub text_to_video: f64,
    pub similarity: Vec<Vec<f64>>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn losses(sim: &[Vec<f64>], tau: f64) -> (f64, f64) {
    let n = sim.len();
    let logit = |i: usize, j: usize| sim[i][j] / tau;
    let v2t: f64 = (0..n)
        .map(|i| log_sum_exp((0..n).map(|j| logit(i, j))) - logit(i, i))
        .sum::<f64>()
        / n as f64;
    let t2v: f64 = (0..n)
        .map(|j| log_sum_exp((0..n).map(|i| logit(i, j))) - logit(j, j))
        .sum::<f64>()
        / n as f64;
    (v2t, t2v)
}

/// Symmetric temperature-scaled contrastive loss over the batch.
pub fn contrastive_loss(batch: &RetrievalBatch) -> Result<LossOutput> {
    batch.validate()?;
    let similarity = batch.similarity_matrix();
    let (v2t, t2v) = losses(&similarity, batch.tau);
    Ok(LossOutput {
        loss: 0.5 * (v2t + t2v),
        video_to_text: v2t,
        text_to_video: t2v,
        similarity,
    })
}

/// Loss directly from a similarity matrix; rows are videos, columns texts.
pub fn loss_from_similarity(similarity: &[Vec<f64>], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let n = similarity.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if similarity.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("similarity matrix must be square"));
    }
    let (v2t, t2v) = losses(similarity, tau);
    Ok(0.5 * (v2t + t2v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub videos: Vec<Vec<Vec<f64>>>,
    pub texts: Vec<Vec<f64>>,
    pub tau: f64,
}

/// Analytic gradient of the loss with respect to every representation
/// component and `tau`, treating the components as free variables.
pub fn loss_gradient(batch: &RetrievalBatch) -> Result<LossGradient> {
    batch.validate()?;
    let n = batch.len();
    let tau = batch.tau;
    let sim = batch.similarity_matrix();

    // dL/dz for logits z = sim / tau: ((P - I) + (Q - I)) / (2N), with P the
    // row softmax and Q the column softmax.
    let mut dz = vec![vec![0.0; n]; n];
    for i in 0..n {
        let lse = log_sum_exp((0..n).map(|j| sim[i][j] / tau));
        for j in 0..n {
            dz[i][j] += (sim[i][j] / tau - lse).exp();
        }
        dz[i][i] -= 1.0;
    }
    for j in 0..n {
        let lse = log_sum_exp((0..n).map(|i| sim[i][j] / tau));
        for i in 0..n {
            dz[i][j] += (sim[i][j] / tau - lse).exp();
        }
        dz[j][j] -= 1.0;
    }
    let scale = 1.0 / (2.0 * n as f64);
    dz.iter_mut().flatten().for_each(|v| *v *= scale);

    let d_tau = -(0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| dz[i][j] * sim[i][j])
        .sum::<f64>()
        / (tau * tau);

    let dim = batch.texts[0].len();
    let videos = batch
        .videos
        .iter()
        .enumerate()
        .map(|(i, segs)| {
            let inv_s = 1.0 / segs.len() as f64;
            let mut grad = vec![0.0; dim];
            for (j, t) in batch.texts.iter().enumerate() {
                let w = dz[i][j] / tau * inv_s;
                grad.iter_mut().zip(t).for_each(|(g, x)| *g += w * x);
            }
            vec![grad; segs.len()]
        })
        .collect();
    let texts = (0..n)
        .map(|j| {
            let mut grad = vec![0.0; dim];
            for (i, segs) in batch.videos.iter().enumerate() {
                let w = dz[i][j] / tau / segs.len() as f64;
                for s in segs {
                    grad.iter_mut().zip(s).for_each(|(g, x)| *g += w * x);
                }
            }
            grad
        })
        .collect();
    Ok(LossGradient {
        videos,
        texts,
        tau: d_tau,
    })
}

fn raw_loss(videos: &[Vec<Vec<f64>>], texts: &[Vec<f64>], tau: f64) -> f64 {
    let sim: Vec<Vec<f64>> = videos
        .iter()
        .map(|v| texts.iter().map(|t| mean_similarity(v, t)).collect())
        .collect();
    let (a, b) = losses(&sim, tau);
    0.5 * (a + b)
}

/// Largest relative disagreement between [`loss_gradient`] and central
/// finite differences with step `epsilon`, over all representation
/// components and `tau`. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn loss_gradient_check(batch: &RetrievalBatch, epsilon: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [1e-6, 1e-3]")));
    }
    let analytic = loss_gradient(batch)?;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);

    let mut worst: f64 = 0.0;
    let mut videos = batch.videos.clone();
    let mut texts = batch.texts.clone();
    for i in 0..videos.len() {
        for j in 0..videos[i].len() {
            for c in 0..videos[i][j].len() {
                let orig = videos[i][j][c];
                videos[i][j][c] = orig + epsilon;
                let up = raw_loss(&videos, &texts, batch.tau);
                videos[i][j][c] = orig - epsilon;
                let down = raw_loss(&videos, &texts, batch.tau);
                videos[i][j][c] = orig;
                worst = worst.max(rel(analytic.videos[i][j][c], (up - down) / (2.0 * epsilon)));
            }
        }
    }
    for j in 0..texts.len() {
        for c in 0..texts[j].len() {
            let orig = texts[j][c];
            texts[j][c] = orig + epsilon;
            let up = raw_loss(&videos, &texts, batch.tau);
            texts[j][c] = orig - epsilon;
            let down = raw_loss(&videos, &texts, batch.tau);
            texts[j][c] = orig;
            worst = worst.max(rel(analytic.texts[j][c], (up - down) / (2.0 * epsilon)));
        }
    }
    let up = raw_loss(&videos, &texts, batch.tau + epsilon);
    let down = raw_loss(&videos, &texts, batch.tau - epsilon);
    worst = worst.max(rel(analytic.tau, (up - down) / (2.0 * epsilon)));
    Ok(worst)
}

/// Column indices of each row sorted by descending score, ties to the
/// lower index.
pub fn rank_rows(matrix: &[Vec<f64>]) -> Vec<Vec<usize>> {
    matrix
        .iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order
        })
        .collect()
}

pub fn transpose(matrix: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = matrix.first().map_or(0, Vec::len);
    (0..cols).map(|j| matrix.iter().map(|r| r[j]).collect()).collect()
}
