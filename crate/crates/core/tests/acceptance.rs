//! Acceptance suite. Runs every criterion in sequence (so the timing checks
//! are not disturbed by other tests), prints one PASS/FAIL line each and
//! exits non-zero if any fails.
//!
//!     cargo test -p tokencluster --test acceptance

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokencluster::embedding::save_cluster_result;
use tokencluster::metrics::adjusted_rand_index;
use tokencluster::retrieval::{contrastive_loss, loss_gradient_check, RetrievalBatch};
use tokencluster::spectral::{
    build_knn_graph, normalized_laplacian, sign_flip, smallest_eigenvectors, DEFAULT_SIGMA,
};
use tokencluster::synth::{generate, SynthConfig};
use tokencluster::{
    cluster_segments, kkz_init, kmedoids_pp, reduction_report, Algorithm, KMedoidsConfig, Metric,
    PointSet, Stage, TokenSet,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn random_points(rng: &mut ChaCha8Rng, m: usize, d: usize) -> PointSet {
    let data = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    PointSet::new(d, data).unwrap()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn vit_b32(seed: u64) -> TokenSet {
    generate(&SynthConfig {
        dim: 512,
        num_frames: 12,
        grid_rows: 7,
        grid_cols: 7,
        blobs: 24,
        separation: 4.0,
        jitter: 0.5,
        seed,
    })
    .unwrap()
    .tokens
}

fn timed_median(runs: usize, mut f: impl FnMut()) -> Duration {
    let mut times: Vec<Duration> = (0..runs)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed()
        })
        .collect();
    times.sort();
    times[runs / 2]
}

fn reduction_arithmetic() -> Outcome {
    let tokens = vit_b32(1);
    ensure!(tokens.len() == 588, "expected 588 input tokens, got {}", tokens.len());
    let (result, reduced) = cluster_segments(&tokens, &Stage::new(3, 49, Algorithm::kmedoids())).unwrap();
    let report = reduction_report(&tokens, &reduced);
    ensure!(reduced.len() == 147, "kept {} tokens", reduced.len());
    ensure!(result.total_centers() == 147, "result lists {} centers", result.total_centers());
    ensure!(report.tokens_before == 588 && report.tokens_after == 147, "{report:?}");
    ensure!(report.token_reduction_ratio == 0.75, "ratio {}", report.token_reduction_ratio);
    ensure!(report.attention_cost_ratio == 0.0625, "proxy {}", report.attention_cost_ratio);
    Ok("588 -> 147, reduction 0.75, attention 0.0625".into())
}

fn kkz_oracle(p: &PointSet, k: usize) -> Vec<usize> {
    let m = p.len();
    let norm = |i: usize| p.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut first = 0;
    for i in 1..m {
        if norm(i) > norm(first) {
            first = i;
        }
    }
    let mut chosen = vec![first];
    while chosen.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..m).filter(|i| !chosen.contains(i)) {
            let d = chosen
                .iter()
                .map(|&c| sq(p.row(i), p.row(c)).sqrt())
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

fn kkz_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..200 {
        let m = rng.random_range(1..=32);
        let d = rng.random_range(1..=8);
        let k = rng.random_range(1..=m);
        let p = random_points(&mut rng, m, d);
        let got = kkz_init(&p, k, Metric::default()).unwrap();
        let want = kkz_oracle(&p, k);
        ensure!(got == want, "case {case} (m={m}, d={d}, K={k}): {got:?} vs oracle {want:?}");
    }
    Ok("200/200 instances match index-for-index".into())
}

fn medoid_cost(p: &PointSet, medoids: &[usize]) -> f64 {
    p.rows()
        .map(|x| medoids.iter().map(|&c| sq(x, p.row(c))).fold(f64::INFINITY, f64::min))
        .sum()
}

fn subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if m < k {
        return vec![];
    }
    let mut out = subsets(m - 1, k);
    for mut s in subsets(m - 1, k - 1) {
        s.push(m - 1);
        out.push(s);
    }
    out
}

fn kmedoids_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut within = 0;
    for case in 0..100 {
        let m = rng.random_range(1..=10);
        let k = rng.random_range(1..=m.min(3));
        let d = rng.random_range(1..=4);
        let p = random_points(&mut rng, m, d);
        let out = kmedoids_pp(&p, &KMedoidsConfig::new(k)).unwrap();
        let optimum = subsets(m, k)
            .iter()
            .map(|s| medoid_cost(&p, s))
            .fold(f64::INFINITY, f64::min);
        let init_cost = medoid_cost(&p, &kkz_oracle(&p, k));
        let final_cost = medoid_cost(&p, out.medoids().unwrap());
        ensure!(
            final_cost <= init_cost && out.final_cost <= out.initial_cost(),
            "case {case}: final cost {final_cost} above KKZ cost {init_cost}"
        );
        if final_cost <= 1.05 * optimum {
            within += 1;
        }
    }
    ensure!(within >= 90, "only {within}/100 within 5% of the optimum");
    Ok(format!("{within}/100 within 5% of optimum, never above KKZ cost"))
}

fn components(w: &DMatrix<f64>) -> usize {
    let m = w.nrows();
    let mut seen = vec![false; m];
    let mut count = 0;
    for s in 0..m {
        if seen[s] {
            continue;
        }
        count += 1;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(i) = stack.pop() {
            for j in 0..m {
                if w[(i, j)] > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

fn spectral_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut max_components = 0;
    for case in 0..100 {
        // Up to four groups far apart; each group is larger than knn so no
        // vertex needs a neighbor outside its group.
        let groups = rng.random_range(1..=4);
        let knn = rng.random_range(1..=6);
        let d = rng.random_range(1..=6);
        let scale = rng.random_range(0.5..4.0);
        let mut data = Vec::new();
        let mut m = 0;
        for g in 0..groups {
            let size = rng.random_range(knn + 1..=16);
            for _ in 0..size {
                for c in 0..d {
                    let offset = if c == 0 { 1000.0 * g as f64 } else { 0.0 };
                    data.push(offset + scale * rng.random_range(0.0..1.0));
                }
            }
            m += size;
        }
        let p = PointSet::new(d, data).unwrap();
        let graph = build_knn_graph(&p, knn, DEFAULT_SIGMA).unwrap();
        let l = normalized_laplacian(&graph).unwrap();
        ensure!(l == l.transpose(), "case {case}: L_sym not exactly symmetric");
        let (_, eig) = smallest_eigenvectors(&l, m).unwrap();
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ensure!(min >= -1e-8, "case {case}: min eigenvalue {min}");
        ensure!(max <= 2.0 + 1e-8, "case {case}: max eigenvalue {max}");
        let zeros = eig.iter().filter(|&&v| v < 1e-8).count();
        let comps = components(graph.weights());
        ensure!(zeros == comps, "case {case}: {zeros} zero eigenvalues, {comps} components");
        max_components = max_components.max(comps);
    }
    Ok(format!("100 graphs, up to {max_components} components"))
}

/// `s_k` computed from the explicit deflated matrix
/// `Y_k = L - sum_{i != k} lambda_i u_i u_i^T`.
fn sign_statistic_oracle(l: &DMatrix<f64>, u: &DMatrix<f64>, eig: &[f64], k: usize) -> f64 {
    let mut y = l.clone();
    for (i, &lambda) in eig.iter().enumerate() {
        if i != k {
            let ui = u.column(i);
            y -= lambda * ui * ui.transpose();
        }
    }
    let p = y.transpose() * u.column(k);
    p.iter().map(|v| v.signum() * v * v).sum()
}

fn sign_flip_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let m = rng.random_range(1..=32);
        let k = rng.random_range(1..=m.min(8));
        let b = DMatrix::from_fn(m + 2, m, |_, _| rng.random_range(-1.0..1.0));
        let a = b.transpose() * &b;
        let l = DMatrix::from_fn(m, m, |i, j| if i <= j { a[(i, j)] } else { a[(j, i)] });
        let (u, eig) = smallest_eigenvectors(&l, k).unwrap();
        let flipped = sign_flip(&l, &u, &eig).unwrap();
        for c in 0..k {
            let s = sign_statistic_oracle(&l, &flipped, &eig, c);
            ensure!(s >= 0.0, "case {case}: column {c} has s_k = {s}");
        }
        let again = sign_flip(&l, &flipped, &eig).unwrap();
        let same = again
            .iter()
            .zip(flipped.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        ensure!(same, "case {case}: second application changed the matrix");
    }
    Ok("100 matrices, s_k >= 0 and bitwise idempotent".into())
}

fn planted_recovery() -> Outcome {
    let mut worst: f64 = 1.0;
    for seed in 0..20 {
        let synth = generate(&SynthConfig {
            blobs: 5,
            separation: 10.0,
            jitter: 1.0,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        for algorithm in [Algorithm::kmedoids(), Algorithm::spectral()] {
            let kind = algorithm.kind();
            let (result, _) = cluster_segments(&synth.tokens, &Stage::new(1, 5, algorithm)).unwrap();
            let ari = adjusted_rand_index(&result.segments[0].assignment, &synth.labels);
            ensure!(ari == 1.0, "seed {seed}, {}: ARI {ari}", kind.as_str());
            worst = worst.min(ari);
        }
    }
    Ok(format!("20 seeds x 2 algorithms, min ARI {worst}"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let tokens = vit_b32(7);
    let stages = [
        Stage::new(3, 49, Algorithm::kmedoids()),
        Stage::new(3, 49, Algorithm::spectral()),
        Stage::new(4, 20, Algorithm::kmedoids()).after_block(6),
        Stage::new(1, 30, Algorithm::spectral()),
    ];
    for (n, stage) in stages.iter().enumerate() {
        let mut docs = Vec::new();
        for run in 0..2 {
            let (result, _) = cluster_segments(&tokens, stage).unwrap();
            let path = dir.path().join(format!("result-{n}-{run}.json"));
            save_cluster_result(&result, &path).unwrap();
            docs.push(std::fs::read(&path).unwrap());
        }
        ensure!(docs[0] == docs[1], "stage {n}: documents differ between runs");
    }
    Ok(format!("{} configurations byte-identical", stages.len()))
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn loss_correctness() -> Outcome {
    let batch = RetrievalBatch::new(
        vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        1.0,
    )
    .unwrap();
    let loss = contrastive_loss(&batch).unwrap().loss;
    let e = std::f64::consts::E;
    ensure!((loss - 0.313262).abs() <= 1e-5, "identity batch loss {loss}");
    ensure!((loss + (e / (e + 1.0)).ln()).abs() <= 1e-12, "loss {loss} off closed form");

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let n = rng.random_range(1..=4);
        let d = rng.random_range(1..=8);
        let s = rng.random_range(1..=3);
        let videos = (0..n)
            .map(|_| (0..s).map(|_| unit_vector(&mut rng, d)).collect())
            .collect();
        let texts = (0..n).map(|_| unit_vector(&mut rng, d)).collect();
        let tau = rng.random_range(0.1..1.0);
        let batch = RetrievalBatch::new(videos, texts, tau).unwrap();
        let err = loss_gradient_check(&batch, 1e-5).unwrap();
        ensure!(err <= 1e-4, "case {case}: max relative error {err}");
        worst = worst.max(err);
    }
    Ok(format!("loss {loss:.6}, gradient max rel err {worst:.2e}"))
}

fn ordering_invariant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..50 {
        let segments = rng.random_range(1..=4);
        let frames = segments * rng.random_range(1..=3);
        let rows = rng.random_range(1..=4);
        let cols = rng.random_range(1..=4);
        let per_segment = frames / segments * rows * cols;
        let clusters = rng.random_range(1..=per_segment);
        let algorithm = if per_segment > 1 && rng.random_bool(0.5) {
            Algorithm::spectral()
        } else {
            Algorithm::kmedoids()
        };
        let tokens = generate(&SynthConfig {
            dim: rng.random_range(2..=8),
            num_frames: frames,
            grid_rows: rows,
            grid_cols: cols,
            blobs: rng.random_range(1..=(rows * cols).min(4)),
            seed: case,
            ..SynthConfig::default()
        })
        .unwrap()
        .tokens;
        let (_, reduced) = cluster_segments(&tokens, &Stage::new(segments, clusters, algorithm)).unwrap();
        let idx = reduced.indices();
        for j in 0..segments {
            let seg = &idx[reduced.segment(j)];
            let key = |t: &tokencluster::TokenIndex| (t.frame, t.row, t.col);
            ensure!(
                seg.windows(2).all(|w| key(&w[0]) < key(&w[1])),
                "case {case}: segment {j} not sorted"
            );
            if j + 1 < segments {
                let next = &idx[reduced.segment(j + 1)];
                ensure!(
                    seg.last().unwrap().frame < next[0].frame,
                    "case {case}: frames not monotone across segments {j}/{}",
                    j + 1
                );
            }
        }
    }
    Ok("50 shapes sorted within and monotone across segments".into())
}

fn performance() -> Outcome {
    let tokens = vit_b32(10);
    let segment = PointSet::from_f32(512, &tokens.data()[..196 * 512]).unwrap();
    let cfg = KMedoidsConfig::new(49);
    let kmedoids = timed_median(11, || {
        kmedoids_pp(&segment, &cfg).unwrap();
    });
    ensure!(kmedoids < Duration::from_millis(100), "k-medoids median {kmedoids:?}");

    // Both spectral configurations run on one thread so the comparison is
    // about the m^3 eigen-solve, not about segment-level parallelism.
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let spectral = |s: usize, k: usize| {
        single.install(|| {
            timed_median(3, || {
                cluster_segments(&tokens, &Stage::new(s, k, Algorithm::spectral())).unwrap();
            })
        })
    };
    let one = spectral(1, 147);
    let three = spectral(3, 49);
    ensure!(three < one, "spectral S=3 {three:?} not faster than S=1 {one:?}");
    Ok(format!(
        "k-medoids 196x512 K=49 median {kmedoids:.1?}; spectral S=1 {one:.1?}, S=3 {three:.1?}"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("reduction arithmetic", reduction_arithmetic, Some(Duration::from_secs(1))),
        ("KKZ oracle equivalence", kkz_equivalence, Some(Duration::from_secs(10))),
        ("k-medoids small-scale optimality", kmedoids_optimality, Some(Duration::from_secs(30))),
        ("spectral invariants", spectral_invariants, Some(Duration::from_secs(30))),
        ("sign-flip contract", sign_flip_contract, Some(Duration::from_secs(10))),
        ("planted-cluster recovery", planted_recovery, Some(Duration::from_secs(20))),
        ("determinism", determinism, None),
        ("loss correctness", loss_correctness, Some(Duration::from_secs(10))),
        ("ordering invariant", ordering_invariant, Some(Duration::from_secs(5))),
        ("performance sanity", performance, None),
    ];
    let mut failed = 0;
    for (n, (name, check, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut outcome = check();
        let elapsed = start.elapsed();
        if let (Ok(_), Some(limit)) = (&outcome, limit) {
            if elapsed > *limit {
                outcome = Err(format!("took {elapsed:.2?}, limit {limit:?}"));
            }
        }
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{elapsed:.2?}]", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{elapsed:.2?}]", n + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
