//! Multi-segment token clustering.
//!
//! Frames are split into `S` equal contiguous segments. Each segment's
//! tokens are clustered on their own, the `K` center tokens of every
//! segment are kept, and the survivors are concatenated in canonical
//! (frame, row, col) order. A [`ClusteringPlan`] chains several such stages;
//! later stages regroup the surviving tokens by their original frame index.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distance::Metric;
use crate::embedding::{
    read_manifest, write_manifest, AlgorithmKind, ClusterMetadata, ClusterResult, Manifest,
    SegmentClusters, SegmentSpec, TokenIndex, TokenSet, DTYPE_F32LE,
};
use crate::error::{Error, Result};
use crate::kmedoids::{kmedoids_pp, KMedoidsConfig, DEFAULT_MAX_ITERATIONS};
use crate::par;
use crate::points::PointSet;
use crate::spectral::{default_knn, spectral_cluster, SpectralConfig, DEFAULT_SIGMA};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Algorithm {
    KMedoids {
        max_iterations: usize,
        metric: Metric,
    },
    Spectral {
        /// Explicit neighbor count; `None` uses `5 * frames_per_segment +
        /// knn_extra`, capped at `m - 1`.
        knn: Option<usize>,
        knn_extra: usize,
        sigma: f64,
        max_iterations: usize,
        metric: Metric,
    },
}

impl Algorithm {
    pub fn kmedoids() -> Self {
        Algorithm::KMedoids {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            metric: Metric::default(),
        }
    }

    pub fn spectral() -> Self {
        Algorithm::Spectral {
            knn: None,
            knn_extra: 0,
            sigma: DEFAULT_SIGMA,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            metric: Metric::default(),
        }
    }

    pub fn kind(&self) -> AlgorithmKind {
        match self {
            Algorithm::KMedoids { .. } => AlgorithmKind::Kmedoids,
            Algorithm::Spectral { .. } => AlgorithmKind::Spectral,
        }
    }

    fn max_iterations(&self) -> usize {
        match *self {
            Algorithm::KMedoids { max_iterations, .. } | Algorithm::Spectral { max_iterations, .. } => {
                max_iterations
            }
        }
    }

    fn metric(&self) -> Metric {
        match *self {
            Algorithm::KMedoids { metric, .. } | Algorithm::Spectral { metric, .. } => metric,
        }
    }
}

/// One clustering pass: `segments` temporal segments, `clusters` centers
/// kept per segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    /// Block after which this pass sits in the encoder. Recorded only.
    pub block_tag: Option<i64>,
    pub segments: usize,
    pub clusters: usize,
    pub algorithm: Algorithm,
}

impl Stage {
    pub fn new(segments: usize, clusters: usize, algorithm: Algorithm) -> Self {
        Self {
            block_tag: None,
            segments,
            clusters,
            algorithm,
        }
    }

    pub fn after_block(mut self, block: i64) -> Self {
        self.block_tag = Some(block);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusteringPlan {
    pub stages: Vec<Stage>,
}

impl ClusteringPlan {
    pub fn new(stages: Vec<Stage>) -> Self {
        Self { stages }
    }
}

/// Tokens that survived clustering, in canonical order, together with their
/// original positions and the geometry of the video they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedSequence {
    dim: usize,
    num_frames: usize,
    grid_rows: usize,
    grid_cols: usize,
    indices: Vec<TokenIndex>,
    data: Vec<f32>,
    segment_offsets: Vec<usize>,
}

impl From<&TokenSet> for ReducedSequence {
    fn from(tokens: &TokenSet) -> Self {
        Self {
            dim: tokens.dim(),
            num_frames: tokens.num_frames(),
            grid_rows: tokens.grid_rows(),
            grid_cols: tokens.grid_cols(),
            indices: tokens.indices().collect(),
            data: tokens.data().to_vec(),
            segment_offsets: vec![0, tokens.len()],
        }
    }
}

impl ReducedSequence {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Frame count of the original video.
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[TokenIndex] {
        &self.indices
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn num_segments(&self) -> usize {
        self.segment_offsets.len() - 1
    }

    pub fn segment(&self, j: usize) -> Range<usize> {
        self.segment_offsets[j]..self.segment_offsets[j + 1]
    }

    pub fn segment_offsets(&self) -> &[usize] {
        &self.segment_offsets
    }

    /// Strictly increasing (frame, row, col) within each segment, and frame
    /// non-decreasing across segment boundaries.
    pub fn is_canonically_ordered(&self) -> bool {
        let within = (0..self.num_segments()).all(|j| {
            self.indices[self.segment(j)]
                .windows(2)
                .all(|w| w[0] < w[1])
        });
        let across = self.segment_offsets[1..self.num_segments()]
            .iter()
            .all(|&b| b == 0 || b == self.len() || self.indices[b - 1].frame <= self.indices[b].frame);
        within && across
    }

    fn validate(&self) -> Result<()> {
        let offsets_ok = self.segment_offsets.len() >= 2
            && self.segment_offsets[0] == 0
            && *self.segment_offsets.last().unwrap() == self.len()
            && self.segment_offsets.windows(2).all(|w| w[0] <= w[1]);
        if !offsets_ok {
            return Err(Error::invalid("segment offsets do not partition the sequence"));
        }
        if let Some(idx) = self
            .indices
            .iter()
            .find(|i| i.frame >= self.num_frames || i.row >= self.grid_rows || i.col >= self.grid_cols)
        {
            return Err(Error::invalid(format!("token index {idx:?} outside the frame grid")));
        }
        if !self.indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("token indices are not in canonical order"));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            let idx = self.indices[pos / self.dim];
            return Err(Error::NonFinite {
                frame: idx.frame,
                row: idx.row,
                col: idx.col,
                component: pos % self.dim,
            });
        }
        Ok(())
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            dim: self.dim,
            num_frames: self.num_frames,
            tokens_per_frame: self.grid_rows * self.grid_cols,
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            dtype: DTYPE_F32LE.to_string(),
            payload: String::new(),
            token_indices: Some(self.indices.iter().map(|i| [i.frame, i.row, i.col]).collect()),
            segment_offsets: Some(self.segment_offsets.clone()),
        }
    }
}

/// Loads either a dense token-set manifest or a reduced-sequence manifest.
pub fn load_sequence(manifest_path: impl AsRef<Path>) -> Result<ReducedSequence> {
    let path = manifest_path.as_ref();
    let (manifest, data) = read_manifest(path)?;
    let Some(triples) = manifest.token_indices else {
        let tokens = TokenSet::new(
            manifest.dim,
            manifest.num_frames,
            manifest.grid_rows,
            manifest.grid_cols,
            data,
        )?;
        return Ok(ReducedSequence::from(&tokens));
    };
    let indices: Vec<TokenIndex> = triples
        .iter()
        .map(|&[f, r, c]| TokenIndex::new(f, r, c))
        .collect();
    let segment_offsets = manifest
        .segment_offsets
        .unwrap_or_else(|| vec![0, indices.len()]);
    let seq = ReducedSequence {
        dim: manifest.dim,
        num_frames: manifest.num_frames,
        grid_rows: manifest.grid_rows,
        grid_cols: manifest.grid_cols,
        indices,
        data,
        segment_offsets,
    };
    seq.validate().map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(seq)
}

/// Writes the sequence in the token-set format (manifest + `f32le` payload)
/// with explicit token indices and segment offsets.
pub fn save_sequence(seq: &ReducedSequence, manifest_path: impl AsRef<Path>) -> Result<()> {
    write_manifest(manifest_path.as_ref(), seq.manifest(), &seq.data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub tokens_before: usize,
    pub tokens_after: usize,
    pub token_reduction_ratio: f64,
    /// `(after / before)^2`, a proxy for the quadratic self-attention cost.
    pub attention_cost_ratio: f64,
}

impl ReductionReport {
    pub fn from_counts(before: usize, after: usize) -> Self {
        let kept = if before == 0 {
            1.0
        } else {
            after as f64 / before as f64
        };
        Self {
            tokens_before: before,
            tokens_after: after,
            token_reduction_ratio: 1.0 - kept,
            attention_cost_ratio: kept * kept,
        }
    }
}

pub fn reduction_report(before: &TokenSet, after: &ReducedSequence) -> ReductionReport {
    ReductionReport::from_counts(before.len(), after.len())
}

pub(crate) struct SegmentOutcome {
    /// Center positions within the segment, ascending.
    pub(crate) centers: Vec<usize>,
    /// Labels relabeled so that cluster `c` is centered at `centers[c]`.
    pub(crate) labels: Vec<usize>,
    pub(crate) iterations_run: usize,
    pub(crate) cost: f64,
}

/// Resolved per-stage parameters shared by every segment.
pub(crate) struct StageParams {
    pub(crate) spec: SegmentSpec,
    pub(crate) tokens_per_segment: usize,
    pub(crate) knn: Option<usize>,
    pub(crate) sigma: Option<f64>,
}

pub(crate) fn stage_params(seq: &ReducedSequence, stage: &Stage) -> Result<(StageParams, Vec<Range<usize>>)> {
    let spec = SegmentSpec::new(seq.num_frames, stage.segments)?;
    let bins: Vec<Range<usize>> = (0..spec.num_segments)
        .map(|j| {
            let frames = spec.frame_range(j);
            let lo = seq.indices.partition_point(|i| i.frame < frames.start);
            let hi = seq.indices.partition_point(|i| i.frame < frames.end);
            lo..hi
        })
        .collect();
    let m = bins[0].len();
    if let Some((j, bin)) = bins.iter().enumerate().find(|(_, b)| b.len() != m) {
        return Err(Error::invalid(format!(
            "segment {j} holds {} tokens but segment 0 holds {m}; segments must hold equal token counts",
            bin.len()
        )));
    }
    if stage.clusters == 0 || stage.clusters > m {
        return Err(Error::invalid(format!(
            "cluster count K = {} must be between 1 and the {m} tokens per segment",
            stage.clusters
        )));
    }
    let (knn, sigma) = match stage.algorithm {
        Algorithm::KMedoids { .. } => (None, None),
        Algorithm::Spectral {
            knn,
            knn_extra,
            sigma,
            ..
        } => {
            let knn = knn.unwrap_or_else(|| default_knn(spec.frames_per_segment, knn_extra, m));
            if m > 1 && (knn == 0 || knn >= m) {
                return Err(Error::InvalidNeighborCount { knn, m });
            }
            (Some(knn), Some(sigma))
        }
    };
    Ok((
        StageParams {
            spec,
            tokens_per_segment: m,
            knn,
            sigma,
        },
        bins,
    ))
}

pub(crate) fn cluster_one(points: &PointSet, stage: &Stage, params: &StageParams) -> Result<SegmentOutcome> {
    let k = stage.clusters;
    let (centers, labels, iterations_run, cost) = match stage.algorithm {
        Algorithm::KMedoids {
            max_iterations,
            metric,
        } => {
            let cfg = KMedoidsConfig {
                k,
                max_iterations,
                metric,
            };
            let out = kmedoids_pp(points, &cfg)?;
            let medoids = out.medoids().expect("medoid centers").to_vec();
            (medoids, out.labels, out.iterations_run, out.final_cost)
        }
        Algorithm::Spectral {
            sigma,
            max_iterations,
            metric,
            ..
        } => {
            let cfg = SpectralConfig::new(k, params.knn.unwrap_or(0))
                .with_sigma(sigma)
                .with_metric(metric)
                .with_max_iterations(max_iterations);
            let out = spectral_cluster(points, &cfg)?;
            let centers = out.center_tokens();
            let p = out.partition;
            (centers, p.labels, p.iterations_run, p.final_cost)
        }
    };

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&c| centers[c]);
    let mut relabel = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    Ok(SegmentOutcome {
        centers: order.iter().map(|&c| centers[c]).collect(),
        labels: labels.iter().map(|&c| relabel[c]).collect(),
        iterations_run,
        cost,
    })
}

/// Runs one clustering stage over a (possibly already reduced) sequence.
pub fn cluster_stage(seq: &ReducedSequence, stage: &Stage) -> Result<(ClusterResult, ReducedSequence)> {
    let (params, bins) = stage_params(seq, stage)?;
    let dim = seq.dim;

    let outcomes = par::map_coarse(bins.len(), |j| {
        let bin = &bins[j];
        let points = PointSet::from_f32(dim, &seq.data[bin.start * dim..bin.end * dim])?;
        cluster_one(&points, stage, &params)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let k = stage.clusters;
    let mut indices = Vec::with_capacity(k * bins.len());
    let mut data = Vec::with_capacity(k * bins.len() * dim);
    let mut segments = Vec::with_capacity(bins.len());
    for (j, (bin, out)) in bins.iter().zip(&outcomes).enumerate() {
        let frames = params.spec.frame_range(j);
        let centers: Vec<TokenIndex> = out.centers.iter().map(|&p| seq.indices[bin.start + p]).collect();
        for &p in &out.centers {
            data.extend_from_slice(seq.vector(bin.start + p));
        }
        indices.extend_from_slice(&centers);
        segments.push(SegmentClusters {
            frame_start: frames.start,
            frame_end: frames.end,
            centers,
            center_positions: out.centers.clone(),
            assignment: out.labels.clone(),
            iterations_run: out.iterations_run,
            cost: out.cost,
        });
    }

    let result = ClusterResult {
        metadata: ClusterMetadata {
            algorithm: stage.algorithm.kind(),
            k,
            segments: stage.segments,
            block_tag: stage.block_tag,
            sigma: params.sigma,
            knn: params.knn,
            normalize: stage.algorithm.metric().pre_normalize,
            max_iterations: stage.algorithm.max_iterations(),
            tokens_before: params.tokens_per_segment * bins.len(),
            tokens_after: indices.len(),
        },
        segments,
    };
    let reduced = ReducedSequence {
        dim,
        num_frames: seq.num_frames,
        grid_rows: seq.grid_rows,
        grid_cols: seq.grid_cols,
        indices,
        data,
        segment_offsets: (0..=bins.len()).map(|j| j * k).collect(),
    };
    debug_assert!(reduced.is_canonically_ordered());
    Ok((result, reduced))
}

/// Clusters every segment of a dense token set with one stage.
pub fn cluster_segments(tokens: &TokenSet, stage: &Stage) -> Result<(ClusterResult, ReducedSequence)> {
    cluster_stage(&ReducedSequence::from(tokens), stage)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutput {
    pub sequence: ReducedSequence,
    pub stages: Vec<ClusterResult>,
}

/// Applies the plan's stages in order, each consuming the previous
/// stage's surviving tokens.
pub fn run_plan(tokens: &TokenSet, plan: &ClusteringPlan) -> Result<PlanOutput> {
    let mut sequence = ReducedSequence::from(tokens);
    let mut stages = Vec::with_capacity(plan.stages.len());
    for (n, stage) in plan.stages.iter().enumerate() {
        let (result, next) = cluster_stage(&sequence, stage)
            .map_err(|e| Error::invalid(format!("stage {n}: {e}")))?;
        stages.push(result);
        sequence = next;
    }
    Ok(PlanOutput { sequence, stages })
}
