//! Normalized spectral clustering.
//!
//! Pipeline: union-symmetrized KNN graph with Gaussian weights, the
//! normalized Laplacian `L = I - D^{-1/2} W D^{-1/2}`, its `k` smallest
//! eigenpairs, sign correction of the eigenvectors, row normalization, and
//! KKZ-seeded k-means on the rows.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::distance::{check_sigma, gaussian_kernel, sq_dist, Metric};
use crate::error::{Error, Result};
use crate::kmedoids::{kmeans, Centers, KMedoidsConfig, PartitionOutcome};
use crate::par;
use crate::points::PointSet;

pub const DEFAULT_SIGMA: f64 = 2.0;

/// Neighbors per vertex for a segment spanning `frames_per_segment` frames:
/// five per frame plus `extra` (5 is used for the finer 16-pixel patch
/// grid), capped at `m - 1`.
pub fn default_knn(frames_per_segment: usize, extra: usize, m: usize) -> usize {
    (5 * frames_per_segment + extra).min(m.saturating_sub(1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralConfig {
    pub k: usize,
    pub knn: usize,
    pub sigma: f64,
    /// Applied to the input points before the graph is built.
    pub metric: Metric,
    /// Settings for the k-means run on the embedding rows. Its `k` is
    /// overridden by `self.k`.
    pub kmeans: KMedoidsConfig,
}

impl SpectralConfig {
    pub fn new(k: usize, knn: usize) -> Self {
        Self {
            k,
            knn,
            sigma: DEFAULT_SIGMA,
            metric: Metric::default(),
            kmeans: KMedoidsConfig::new(k),
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.kmeans.max_iterations = max_iterations;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    weights: DMatrix<f64>,
    degrees: Vec<f64>,
}

impl SimilarityGraph {
    /// Builds a graph from an explicit weight matrix, checking that it is
    /// exactly symmetric, nonnegative, with a zero diagonal.
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        let m = weights.nrows();
        if weights.ncols() != m {
            return Err(Error::DimensionMismatch {
                left: m,
                right: weights.ncols(),
            });
        }
        for i in 0..m {
            if weights[(i, i)] != 0.0 {
                return Err(Error::invalid(format!("self-loop at vertex {i}")));
            }
            for j in 0..i {
                let (a, b) = (weights[(i, j)], weights[(j, i)]);
                if a != b {
                    return Err(Error::NotSymmetric {
                        row: i,
                        col: j,
                        gap: (a - b).abs(),
                    });
                }
                if !(a >= 0.0 && a.is_finite()) {
                    return Err(Error::invalid(format!("bad weight {a} at ({i}, {j})")));
                }
            }
        }
        let degrees = (0..m).map(|i| weights.row(i).iter().sum()).collect();
        Ok(Self { weights, degrees })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn len(&self) -> usize {
        self.degrees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degrees.is_empty()
    }
}

/// Union-symmetrized KNN graph: `(i, j)` is an edge when either endpoint
/// is among the other's `knn` nearest points. Neighbor ties go to the
/// lower index.
pub fn build_knn_graph(points: &PointSet, knn: usize, sigma: f64) -> Result<SimilarityGraph> {
    check_sigma(sigma)?;
    let m = points.len();
    if m == 0 {
        return Err(Error::EmptyInput);
    }
    if knn == 0 || knn >= m {
        return Err(Error::InvalidNeighborCount { knn, m });
    }
    points.check_finite()?;

    let dist: Vec<Vec<f64>> =
        par::map_range(m, |i| (0..m).map(|j| sq_dist(points.row(i), points.row(j))).collect());

    let neighbors: Vec<Vec<usize>> = par::map_range(m, |i| {
        let mut order: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| dist[i][a].total_cmp(&dist[i][b]).then(a.cmp(&b)));
        order.truncate(knn);
        order
    });

    let mut weights = DMatrix::zeros(m, m);
    for (i, nbrs) in neighbors.iter().enumerate() {
        for &j in nbrs {
            let (lo, hi) = if i < j { (i, j) } else { (j, i) };
            let w = gaussian_kernel(dist[lo][hi], sigma);
            weights[(lo, hi)] = w;
            weights[(hi, lo)] = w;
        }
    }
    let degrees = (0..m).map(|i| weights.row(i).iter().sum()).collect();
    Ok(SimilarityGraph { weights, degrees })
}

/// `L_sym = D^{-1/2} (D - W) D^{-1/2}`, built entry by entry as
/// `delta_ij - W_ij / sqrt(D_i D_j)` and mirrored so it is exactly
/// symmetric.
pub fn normalized_laplacian(graph: &SimilarityGraph) -> Result<DMatrix<f64>> {
    let m = graph.len();
    if let Some(v) = graph.degrees.iter().position(|&d| d <= 0.0 || d.is_nan()) {
        return Err(Error::ZeroDegree(v));
    }
    let inv_sqrt: Vec<f64> = graph.degrees.iter().map(|d| d.sqrt().recip()).collect();
    let mut lap = DMatrix::identity(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let w = graph.weights[(i, j)];
            if w != 0.0 {
                let v = -(w * inv_sqrt[i] * inv_sqrt[j]);
                lap[(i, j)] = v;
                lap[(j, i)] = v;
            }
        }
    }
    Ok(lap)
}

const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// The `k` eigenpairs of a symmetric matrix with the smallest eigenvalues,
/// in ascending order. Columns of the returned matrix are orthonormal.
pub fn smallest_eigenvectors(l: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let m = l.nrows();
    if l.ncols() != m {
        return Err(Error::DimensionMismatch {
            left: m,
            right: l.ncols(),
        });
    }
    if k == 0 || k > m {
        return Err(Error::InvalidClusterCount { k, m });
    }
    for i in 0..m {
        for j in 0..i {
            let gap = (l[(i, j)] - l[(j, i)]).abs();
            if gap.is_nan() || gap > SYMMETRY_TOLERANCE {
                return Err(Error::NotSymmetric { row: i, col: j, gap });
            }
        }
    }

    let eig = SymmetricEigen::new(l.clone());
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    order.truncate(k);

    let values = order.iter().map(|&c| eig.eigenvalues[c]).collect();
    let vectors = DMatrix::from_fn(m, k, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((vectors, values))
}

/// Per-column sign statistic: with `Y = L - sum_{i != k} lambda_i u_i u_i^T`
/// and `p = u_k^T Y`, returns `sum_j sign(p_j) p_j^2`.
pub fn sign_statistics(l: &DMatrix<f64>, u: &DMatrix<f64>, eigenvalues: &[f64]) -> Result<Vec<f64>> {
    let m = l.nrows();
    let k = u.ncols();
    if l.ncols() != m || u.nrows() != m {
        return Err(Error::DimensionMismatch {
            left: m,
            right: u.nrows(),
        });
    }
    if eigenvalues.len() != k {
        return Err(Error::DimensionMismatch {
            left: k,
            right: eigenvalues.len(),
        });
    }

    // u_k^T L, one row per column of U.
    let projected: Vec<Vec<f64>> = par::map_range(k, |c| {
        (0..m)
            .map(|j| {
                let mut acc = 0.0;
                for r in 0..m {
                    acc += u[(r, c)] * l[(r, j)];
                }
                acc
            })
            .collect()
    });
    let gram: Vec<Vec<f64>> = (0..k)
        .map(|a| {
            (0..k)
                .map(|b| {
                    let mut acc = 0.0;
                    for r in 0..m {
                        acc += u[(r, a)] * u[(r, b)];
                    }
                    acc
                })
                .collect()
        })
        .collect();

    Ok((0..k)
        .map(|c| {
            let mut s = 0.0;
            for j in 0..m {
                let mut p = projected[c][j];
                for i in (0..k).filter(|&i| i != c) {
                    p -= eigenvalues[i] * gram[c][i] * u[(j, i)];
                }
                s += p.signum_or_zero() * p * p;
            }
            s
        })
        .collect())
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Resolves eigenvector sign ambiguity: column `k` is negated when its sign
/// statistic is negative, so that it points along the majority of the
/// matrix's columns. A zero statistic leaves the column as is.
pub fn sign_flip(l: &DMatrix<f64>, u: &DMatrix<f64>, eigenvalues: &[f64]) -> Result<DMatrix<f64>> {
    let stats = sign_statistics(l, u, eigenvalues)?;
    let mut out = u.clone();
    for (c, s) in stats.iter().enumerate() {
        if *s < 0.0 {
            out.column_mut(c).neg_mut();
        }
    }
    Ok(out)
}

/// Scales every nonzero row to unit l2 norm.
pub fn normalize_rows(u: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = u.clone();
    for mut row in out.row_iter_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEmbedding {
    /// Sign-corrected eigenvectors before row normalization (orthonormal columns).
    pub eigenvectors: DMatrix<f64>,
    /// Row-normalized embedding; row `i` is the new coordinate of point `i`.
    pub rows: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl SpectralEmbedding {
    pub fn to_points(&self) -> PointSet {
        let (m, k) = self.rows.shape();
        let data = (0..m)
            .flat_map(|r| (0..k).map(move |c| (r, c)))
            .map(|(r, c)| self.rows[(r, c)])
            .collect();
        PointSet::new(k, data).expect("k > 0")
    }
}

fn validate_config(m: usize, config: &SpectralConfig) -> Result<()> {
    if m == 0 {
        return Err(Error::EmptyInput);
    }
    if config.k == 0 || config.k > m {
        return Err(Error::InvalidClusterCount { k: config.k, m });
    }
    if m > 1 && (config.knn == 0 || config.knn >= m) {
        return Err(Error::InvalidNeighborCount { knn: config.knn, m });
    }
    check_sigma(config.sigma)
}

pub fn spectral_embedding(points: &PointSet, config: &SpectralConfig) -> Result<SpectralEmbedding> {
    validate_config(points.len(), config)?;
    let normalized;
    let pts = if config.metric.pre_normalize {
        normalized = points.l2_normalized();
        &normalized
    } else {
        points
    };
    let graph = build_knn_graph(pts, config.knn, config.sigma)?;
    let lap = normalized_laplacian(&graph)?;
    let (u, eigenvalues) = smallest_eigenvectors(&lap, config.k)?;
    let eigenvectors = sign_flip(&lap, &u, &eigenvalues)?;
    let rows = normalize_rows(&eigenvectors);
    Ok(SpectralEmbedding {
        eigenvectors,
        rows,
        eigenvalues,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralClustering {
    /// k-means result on the embedding rows; labels index the input points.
    pub partition: PartitionOutcome,
    /// `None` for the single-point input, where no graph exists.
    pub embedding: Option<SpectralEmbedding>,
}

impl SpectralClustering {
    /// One real input point per cluster: the member whose embedding row is
    /// closest to the cluster's spectral mean (ties to the lower index).
    pub fn center_tokens(&self) -> Vec<usize> {
        let Some(embedding) = &self.embedding else {
            return vec![0];
        };
        let rows = embedding.to_points();
        let means = self.partition.means().expect("k-means centers");
        let mut best: Vec<Option<(usize, f64)>> = vec![None; means.len()];
        for (i, &c) in self.partition.labels.iter().enumerate() {
            let d = sq_dist(rows.row(i), means.row(c));
            match best[c] {
                Some((_, bd)) if d >= bd => {}
                _ => best[c] = Some((i, d)),
            }
        }
        best.into_iter()
            .map(|b| b.expect("every cluster is nonempty").0)
            .collect()
    }
}

/// Full spectral pipeline. Clusters left empty by k-means (possible only
/// with duplicated embedding rows) are refilled with the point farthest
/// from its own center among clusters of size > 1, so every returned
/// cluster has at least one member.
pub fn spectral_cluster(points: &PointSet, config: &SpectralConfig) -> Result<SpectralClustering> {
    validate_config(points.len(), config)?;
    if points.len() == 1 {
        return Ok(SpectralClustering {
            partition: PartitionOutcome {
                centers: Centers::Means(PointSet::new(1, vec![1.0])?),
                labels: vec![0],
                iterations_run: 0,
                final_cost: 0.0,
                cost_history: vec![0.0],
            },
            embedding: None,
        });
    }
    let embedding = spectral_embedding(points, config)?;
    let rows = embedding.to_points();
    let km_config = KMedoidsConfig {
        k: config.k,
        ..config.kmeans
    };
    let mut partition = kmeans(&rows, &km_config)?;
    refill_empty_clusters(&rows, &mut partition);
    Ok(SpectralClustering {
        partition,
        embedding: Some(embedding),
    })
}

fn refill_empty_clusters(rows: &PointSet, outcome: &mut PartitionOutcome) {
    let k = outcome.k();
    let mut counts = vec![0usize; k];
    outcome.labels.iter().for_each(|&c| counts[c] += 1);
    if counts.iter().all(|&n| n > 0) {
        return;
    }
    let Centers::Means(means) = &outcome.centers else {
        return;
    };
    let dim = means.dim();
    let mut centers = means.as_slice().to_vec();
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut pick: Option<(usize, f64)> = None;
        for (i, &label) in outcome.labels.iter().enumerate() {
            if counts[label] < 2 {
                continue;
            }
            let d = sq_dist(rows.row(i), &centers[label * dim..(label + 1) * dim]);
            match pick {
                Some((_, bd)) if d <= bd => {}
                _ => pick = Some((i, d)),
            }
        }
        // k <= m guarantees some cluster still has a spare member.
        let (i, _) = pick.expect("a cluster with two or more members");
        counts[outcome.labels[i]] -= 1;
        counts[c] = 1;
        outcome.labels[i] = c;
        centers[c * dim..(c + 1) * dim].copy_from_slice(rows.row(i));
    }
    outcome.final_cost = outcome
        .labels
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(rows.row(i), &centers[c * dim..(c + 1) * dim]))
        .sum();
    outcome.centers = Centers::Means(PointSet::new(dim, centers).expect("same shape"));
}
