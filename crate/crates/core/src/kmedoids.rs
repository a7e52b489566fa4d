//! KKZ seeding, k-medoids++ (alternate-and-snap) and plain k-means.
//!
//! Every argmin/argmax in this module breaks ties toward the lowest index,
//! and nothing is random: identical input always yields an identical
//! [`PartitionOutcome`].

use std::borrow::Cow;

use crate::distance::{sq_dist, Metric};
use crate::error::{Error, Result};
use crate::par;
use crate::points::PointSet;

pub const DEFAULT_MAX_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMedoidsConfig {
    pub k: usize,
    pub max_iterations: usize,
    pub metric: Metric,
}

impl KMedoidsConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            metric: Metric::default(),
        }
    }

    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Centers {
    /// Indices into the input points.
    Medoids(Vec<usize>),
    /// Cluster means, one row per cluster.
    Means(PointSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionOutcome {
    pub centers: Centers,
    /// Cluster id in `0..k` for every input point.
    pub labels: Vec<usize>,
    /// Number of center-update steps performed; never exceeds `max_iterations`.
    pub iterations_run: usize,
    /// Within-cluster sum of squared distances to the assigned centers,
    /// measured in the (possibly normalized) space the metric works in.
    pub final_cost: f64,
    /// Cost after each assignment step, starting with the assignment to the
    /// initial centers.
    pub cost_history: Vec<f64>,
}

impl PartitionOutcome {
    pub fn medoids(&self) -> Option<&[usize]> {
        match &self.centers {
            Centers::Medoids(m) => Some(m),
            Centers::Means(_) => None,
        }
    }

    pub fn means(&self) -> Option<&PointSet> {
        match &self.centers {
            Centers::Means(m) => Some(m),
            Centers::Medoids(_) => None,
        }
    }

    pub fn k(&self) -> usize {
        match &self.centers {
            Centers::Medoids(m) => m.len(),
            Centers::Means(m) => m.len(),
        }
    }

    /// Cost at the KKZ initialization, before any update step.
    pub fn initial_cost(&self) -> f64 {
        self.cost_history[0]
    }
}

fn validate(points: &PointSet, k: usize) -> Result<()> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    let m = points.len();
    if k == 0 || k > m {
        return Err(Error::InvalidClusterCount { k, m });
    }
    points.check_finite()
}

fn working_points(points: &PointSet, metric: Metric) -> Cow<'_, PointSet> {
    if metric.pre_normalize {
        Cow::Owned(points.l2_normalized())
    } else {
        Cow::Borrowed(points)
    }
}

/// KKZ initialization: the point of largest l2 norm first, then repeatedly
/// the point whose distance to its nearest chosen centroid is largest.
pub fn kkz_init(points: &PointSet, k: usize, metric: Metric) -> Result<Vec<usize>> {
    validate(points, k)?;
    let pts = working_points(points, metric);
    Ok(kkz_unchecked(&pts, k))
}

fn kkz_unchecked(pts: &PointSet, k: usize) -> Vec<usize> {
    let m = pts.len();
    let mut first = 0;
    let mut best_norm = f64::NEG_INFINITY;
    for (i, row) in pts.rows().enumerate() {
        let n2 = row.iter().map(|v| v * v).sum::<f64>();
        if n2 > best_norm {
            best_norm = n2;
            first = i;
        }
    }

    let mut chosen = Vec::with_capacity(k);
    let mut selected = vec![false; m];
    chosen.push(first);
    selected[first] = true;
    let mut min_dist = par::map_range(m, |j| sq_dist(pts.row(j), pts.row(first)));

    while chosen.len() < k {
        let mut next = None;
        let mut best = f64::NEG_INFINITY;
        for (j, &d) in min_dist.iter().enumerate() {
            if !selected[j] && d > best {
                best = d;
                next = Some(j);
            }
        }
        let next = next.expect("k <= m leaves an unselected point");
        chosen.push(next);
        selected[next] = true;
        let centroid = pts.row(next);
        min_dist = par::map_range(m, |j| min_dist[j].min(sq_dist(pts.row(j), centroid)));
    }
    chosen
}

/// Nearest-center assignment. Returns labels and the squared distance of
/// each point to its assigned center.
fn assign<'a, F>(pts: &PointSet, k: usize, center: F) -> (Vec<usize>, Vec<f64>)
where
    F: Fn(usize) -> &'a [f64] + Sync + Send,
{
    par::map_range(pts.len(), |i| {
        let x = pts.row(i);
        let mut best = 0;
        let mut best_d = sq_dist(x, center(0));
        for c in 1..k {
            let d = sq_dist(x, center(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        (best, best_d)
    })
    .into_iter()
    .unzip()
}

fn assign_medoids(pts: &PointSet, medoids: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let (mut labels, mut dists) = assign(pts, medoids.len(), |c| pts.row(medoids[c]));
    // A medoid always belongs to its own cluster. With duplicate points the
    // argmin may prefer another medoid at distance zero; overriding keeps
    // the cost unchanged.
    for (c, &idx) in medoids.iter().enumerate() {
        labels[idx] = c;
        dists[idx] = 0.0;
    }
    (labels, dists)
}

fn cluster_sums(pts: &PointSet, labels: &[usize], k: usize) -> (Vec<f64>, Vec<usize>) {
    let dim = pts.dim();
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (row, &c) in pts.rows().zip(labels) {
        counts[c] += 1;
        for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
            *s += v;
        }
    }
    (sums, counts)
}

fn means_from_sums(sums: &mut [f64], counts: &[usize], dim: usize) {
    for (chunk, &n) in sums.chunks_exact_mut(dim).zip(counts) {
        if n > 0 {
            let inv = n as f64;
            chunk.iter_mut().for_each(|v| *v /= inv);
        }
    }
}

fn update_medoids(pts: &PointSet, labels: &[usize], medoids: &[usize]) -> Vec<usize> {
    let k = medoids.len();
    let dim = pts.dim();
    let (mut means, counts) = cluster_sums(pts, labels, k);
    means_from_sums(&mut means, &counts, dim);

    let mut best: Vec<Option<(usize, f64)>> = vec![None; k];
    for (i, &c) in labels.iter().enumerate() {
        let d = sq_dist(pts.row(i), &means[c * dim..(c + 1) * dim]);
        match best[c] {
            Some((_, bd)) if d >= bd => {}
            _ => best[c] = Some((i, d)),
        }
    }
    best.iter()
        .zip(medoids)
        .map(|(b, &old)| b.map_or(old, |(i, _)| i))
        .collect()
}

/// k-medoids++: KKZ seeding, then alternate nearest-medoid assignment with
/// snapping each medoid to the member closest to its cluster mean, until
/// the labels stop changing or `max_iterations` updates have run.
pub fn kmedoids_pp(points: &PointSet, config: &KMedoidsConfig) -> Result<PartitionOutcome> {
    validate(points, config.k)?;
    let pts = working_points(points, config.metric);
    let pts = pts.as_ref();

    let mut medoids = kkz_unchecked(pts, config.k);
    let (mut labels, dists) = assign_medoids(pts, &medoids);
    let mut cost = total(&dists);
    let mut history = vec![cost];
    let mut iterations = 0;

    while iterations < config.max_iterations {
        let next = update_medoids(pts, &labels, &medoids);
        iterations += 1;

        let (next_labels, dists) = assign_medoids(pts, &next);
        let next_cost = total(&dists);
        debug_assert!(
            next_cost <= stale_cost(pts, &labels, |c| pts.row(next[c])),
            "assignment step increased the cost"
        );

        let converged = next_labels == labels;
        medoids = next;
        labels = next_labels;
        cost = next_cost;
        history.push(cost);
        if converged {
            break;
        }
    }

    Ok(PartitionOutcome {
        centers: Centers::Medoids(medoids),
        labels,
        iterations_run: iterations,
        final_cost: cost,
        cost_history: history,
    })
}

/// Lloyd's k-means with KKZ seeding and true means as centers. Empty
/// clusters keep their previous center.
pub fn kmeans(points: &PointSet, config: &KMedoidsConfig) -> Result<PartitionOutcome> {
    validate(points, config.k)?;
    let pts = working_points(points, config.metric);
    let pts = pts.as_ref();
    let k = config.k;
    let dim = pts.dim();

    let seeds = kkz_unchecked(pts, k);
    let mut centers: Vec<f64> = seeds.iter().flat_map(|&i| pts.row(i).to_vec()).collect();
    let (mut labels, dists) = assign(pts, k, |c| &centers[c * dim..(c + 1) * dim]);
    let mut cost = total(&dists);
    let mut history = vec![cost];
    let mut iterations = 0;

    while iterations < config.max_iterations {
        let (mut sums, counts) = cluster_sums(pts, &labels, k);
        means_from_sums(&mut sums, &counts, dim);
        for c in 0..k {
            if counts[c] == 0 {
                sums[c * dim..(c + 1) * dim].copy_from_slice(&centers[c * dim..(c + 1) * dim]);
            }
        }
        centers = sums;
        iterations += 1;

        let (next_labels, dists) = assign(pts, k, |c| &centers[c * dim..(c + 1) * dim]);
        let converged = next_labels == labels;
        labels = next_labels;
        cost = total(&dists);
        history.push(cost);
        if converged {
            break;
        }
    }

    Ok(PartitionOutcome {
        centers: Centers::Means(PointSet::new(dim, centers)?),
        labels,
        iterations_run: iterations,
        final_cost: cost,
        cost_history: history,
    })
}

fn total(dists: &[f64]) -> f64 {
    dists.iter().sum()
}

fn stale_cost<'a, F>(pts: &PointSet, labels: &[usize], center: F) -> f64
where
    F: Fn(usize) -> &'a [f64],
{
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(pts.row(i), center(c)))
        .sum()
}
