//! Synthetic redundant-token generator: a few well-separated Gaussian blobs
//! whose members are repeated at fixed patch positions across frames with
//! small per-frame jitter.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distance::sq_dist;
use crate::embedding::TokenSet;
use crate::error::{Error, Result};

const MAX_CENTER_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    pub num_frames: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub blobs: usize,
    /// Minimum distance between any two blob centers.
    pub separation: f64,
    /// Per-component standard deviation of the token noise.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            num_frames: 4,
            grid_rows: 4,
            grid_cols: 4,
            blobs: 5,
            separation: 10.0,
            jitter: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub tokens: TokenSet,
    /// Planted blob of every token, in canonical token order.
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    let SynthConfig {
        dim,
        num_frames,
        grid_rows,
        grid_cols,
        blobs,
        separation,
        jitter,
        seed,
    } = *config;
    let per_frame = grid_rows * grid_cols;
    if dim == 0 || num_frames == 0 || per_frame == 0 {
        return Err(Error::invalid("synthetic shape must be positive"));
    }
    if blobs == 0 || blobs > per_frame {
        return Err(Error::invalid(format!(
            "blob count {blobs} must be between 1 and the {per_frame} tokens per frame"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite() && jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::invalid("separation and jitter must be finite and nonnegative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_width = separation * blobs as f64;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(blobs);
    while centers.len() < blobs {
        let mut placed = false;
        for _ in 0..MAX_CENTER_ATTEMPTS {
            let c: Vec<f64> = (0..dim)
                .map(|_| rng.random_range(-half_width..=half_width))
                .collect();
            if centers.iter().all(|o| sq_dist(o, &c) >= separation * separation) {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(format!(
                "could not place {blobs} centers {separation} apart in {dim} dimensions"
            )));
        }
    }

    let mut position_labels: Vec<usize> = (0..per_frame).map(|p| p % blobs).collect();
    position_labels.shuffle(&mut rng);

    let noise = Normal::new(0.0, jitter).map_err(|e| Error::invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(num_frames * per_frame * dim);
    let mut labels = Vec::with_capacity(num_frames * per_frame);
    for _ in 0..num_frames {
        for &label in &position_labels {
            labels.push(label);
            for &v in &centers[label] {
                data.push((v + noise.sample(&mut rng)) as f32);
            }
        }
    }
    let tokens = TokenSet::new(dim, num_frames, grid_rows, grid_cols, data)?;
    Ok(SynthOutput {
        tokens,
        labels,
        centers,
    })
}
