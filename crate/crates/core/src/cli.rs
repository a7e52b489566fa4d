//! Command-line front end. Every report goes to the given writer as pretty
//! JSON with stable key names.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::distance::Metric;
use crate::embedding::save_cluster_result;
use crate::error::{Error, Result};
use crate::kmedoids::DEFAULT_MAX_ITERATIONS;
use crate::points::PointSet;
use crate::retrieval::{contrastive_loss, rank_rows, transpose, RetrievalBatch};
use crate::segmenter::{
    cluster_one, cluster_stage, load_sequence, save_sequence, stage_params, Algorithm,
    ReducedSequence, ReductionReport, Stage,
};
use crate::spectral::DEFAULT_SIGMA;
use crate::synth::{generate, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "tokencluster", version, about = "Multi-segment token clustering for video token reduction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster a token file and write the centers and reduced sequence.
    Cluster(ClusterCmd),
    /// Generate a synthetic token set with planted clusters.
    Synth(SynthCmd),
    /// Time clustering and report token reduction.
    Bench(BenchCmd),
    /// Score a retrieval batch: similarities, rankings and loss.
    Score(ScoreCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgorithmArg {
    Kmedoids,
    Spectral,
}

#[derive(Debug, Clone, Args)]
pub struct StageArgs {
    #[arg(long, value_enum, default_value = "kmedoids")]
    pub algorithm: AlgorithmArg,
    /// Number of temporal segments S.
    #[arg(long)]
    pub segments: usize,
    /// Centers kept per segment K.
    #[arg(long)]
    pub clusters: usize,
    /// Gaussian width for the spectral similarity graph.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Neighbors per vertex; defaults to 5 x frames per segment (+ --knn-extra).
    #[arg(long)]
    pub knn: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub knn_extra: usize,
    /// l2-normalize token embeddings before clustering.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long = "max-iters", default_value_t = DEFAULT_MAX_ITERATIONS)]
    pub max_iterations: usize,
    /// Encoder block the clustering follows (recorded in metadata only).
    #[arg(long)]
    pub block_tag: Option<i64>,
}

impl StageArgs {
    pub fn stage(&self) -> Stage {
        let metric = if self.normalize {
            Metric::normalized()
        } else {
            Metric::default()
        };
        let algorithm = match self.algorithm {
            AlgorithmArg::Kmedoids => Algorithm::KMedoids {
                max_iterations: self.max_iterations,
                metric,
            },
            AlgorithmArg::Spectral => Algorithm::Spectral {
                knn: self.knn,
                knn_extra: self.knn_extra,
                sigma: self.sigma,
                max_iterations: self.max_iterations,
                metric,
            },
        };
        Stage {
            block_tag: self.block_tag,
            segments: self.segments,
            clusters: self.clusters,
            algorithm,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ClusterCmd {
    /// Token-set or reduced-sequence manifest.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for clusters.json and reduced.json/reduced.f32.
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub stage: StageArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long, default_value_t = 4)]
    pub grid_rows: usize,
    #[arg(long, default_value_t = 4)]
    pub grid_cols: usize,
    #[arg(long, default_value_t = 5)]
    pub blobs: usize,
    #[arg(long, default_value_t = 10.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.1)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        SynthConfig {
            dim: self.dim,
            num_frames: self.frames,
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            blobs: self.blobs,
            separation: self.separation,
            jitter: self.jitter,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthCmd {
    /// Output directory for tokens.json, tokens.f32 and labels.json.
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub synth: SynthArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BenchCmd {
    /// Token manifest to benchmark; synthetic data is generated when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[command(flatten)]
    pub stage: StageArgs,
    #[command(flatten)]
    pub synth: SynthArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreCmd {
    /// JSON file with `videos` (N x S x d), `texts` (N x d) and optional `tau`.
    #[arg(long)]
    pub input: PathBuf,
    /// Temperature; overrides the file's `tau`. Defaults to 1.0.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreInput {
    pub videos: Vec<Vec<Vec<f64>>>,
    pub texts: Vec<Vec<f64>>,
    #[serde(default)]
    pub tau: Option<f64>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status: 0 success, 1 validation error, 2 I/O error.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Cluster(cmd) => cmd_cluster(cmd, out),
        Command::Synth(cmd) => cmd_synth(cmd, out),
        Command::Bench(cmd) => cmd_bench(cmd, out),
        Command::Score(cmd) => cmd_score(cmd, out),
    }
}

fn emit(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_cluster(cmd: &ClusterCmd, out: &mut dyn Write) -> Result<()> {
    let input = load_sequence(&cmd.input)?;
    let stage = cmd.stage.stage();
    let (result, reduced) = cluster_stage(&input, &stage)?;
    create_dir(&cmd.output)?;
    let clusters_path = cmd.output.join("clusters.json");
    let reduced_path = cmd.output.join("reduced.json");
    save_cluster_result(&result, &clusters_path)?;
    save_sequence(&reduced, &reduced_path)?;

    let report = ReductionReport::from_counts(input.len(), reduced.len());
    emit(
        out,
        &json!({
            "command": "cluster",
            "algorithm": result.metadata.algorithm,
            "segments": result.metadata.segments,
            "clusters": result.metadata.k,
            "block_tag": result.metadata.block_tag,
            "sigma": result.metadata.sigma,
            "knn": result.metadata.knn,
            "normalize": result.metadata.normalize,
            "max_iterations_run": result.segments.iter().map(|s| s.iterations_run).max(),
            "tokens_before": report.tokens_before,
            "tokens_after": report.tokens_after,
            "token_reduction_ratio": report.token_reduction_ratio,
            "attention_cost_ratio": report.attention_cost_ratio,
            "clusters_path": clusters_path,
            "reduced_path": reduced_path,
        }),
    )
}

pub fn cmd_synth(cmd: &SynthCmd, out: &mut dyn Write) -> Result<()> {
    let generated = generate(&cmd.synth.config())?;
    create_dir(&cmd.output)?;
    let tokens_path = cmd.output.join("tokens.json");
    let labels_path = cmd.output.join("labels.json");
    crate::embedding::save_token_set(&generated.tokens, &tokens_path)?;
    let labels = json!({ "blobs": cmd.synth.blobs, "labels": generated.labels });
    let text = serde_json::to_string(&labels).expect("labels serialize") + "\n";
    fs::write(&labels_path, text).map_err(|e| Error::io(&labels_path, e))?;
    emit(
        out,
        &json!({
            "command": "synth",
            "config": cmd.synth.config(),
            "tokens": generated.tokens.len(),
            "tokens_path": tokens_path,
            "labels_path": labels_path,
        }),
    )
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn cmd_bench(cmd: &BenchCmd, out: &mut dyn Write) -> Result<()> {
    let input = match &cmd.input {
        Some(path) => load_sequence(path)?,
        None => ReducedSequence::from(&generate(&cmd.synth.config())?.tokens),
    };
    if cmd.repeats == 0 {
        return Err(Error::invalid("--repeats must be at least 1"));
    }
    let stage = cmd.stage.stage();
    let (params, bins) = stage_params(&input, &stage)?;
    let dim = input.dim();
    let segments: Vec<PointSet> = bins
        .iter()
        .map(|b| PointSet::from_f32(dim, &input.data()[b.start * dim..b.end * dim]))
        .collect::<Result<_>>()?;

    // Per-segment timings run the segments one after another so each
    // number is the cost of a single m-point problem.
    let mut segment_ms = vec![Vec::with_capacity(cmd.repeats); segments.len()];
    let mut iterations = vec![0; segments.len()];
    for _ in 0..cmd.repeats {
        for (j, points) in segments.iter().enumerate() {
            let start = Instant::now();
            let outcome = cluster_one(points, &stage, &params)?;
            segment_ms[j].push(start.elapsed().as_secs_f64() * 1e3);
            iterations[j] = outcome.iterations_run;
        }
    }
    let mut stage_ms = Vec::with_capacity(cmd.repeats);
    let mut tokens_after = 0;
    for _ in 0..cmd.repeats {
        let start = Instant::now();
        let (_, reduced) = cluster_stage(&input, &stage)?;
        stage_ms.push(start.elapsed().as_secs_f64() * 1e3);
        tokens_after = reduced.len();
    }

    let per_segment: Vec<f64> = segment_ms.iter_mut().map(|v| median(v)).collect();
    let total_sequential: f64 = per_segment.iter().sum();
    let report = ReductionReport::from_counts(input.len(), tokens_after);
    emit(
        out,
        &json!({
            "command": "bench",
            "algorithm": stage.algorithm.kind(),
            "segments": stage.segments,
            "clusters": stage.clusters,
            "tokens_per_segment": params.tokens_per_segment,
            "knn": params.knn,
            "sigma": params.sigma,
            "repeats": cmd.repeats,
            "parallel": cfg!(feature = "parallel"),
            "tokens_before": report.tokens_before,
            "tokens_after": report.tokens_after,
            "token_reduction_ratio": report.token_reduction_ratio,
            "attention_cost_ratio": report.attention_cost_ratio,
            "iterations_run": iterations,
            "median_segment_ms": per_segment,
            "median_segment_ms_max": per_segment.iter().copied().fold(0.0, f64::max),
            "sum_segment_ms": total_sequential,
            "median_stage_ms": median(&mut stage_ms),
        }),
    )
}

pub fn cmd_score(cmd: &ScoreCmd, out: &mut dyn Write) -> Result<()> {
    let text = fs::read_to_string(&cmd.input).map_err(|e| Error::io(&cmd.input, e))?;
    let input: ScoreInput = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: cmd.input.clone(),
        source,
    })?;
    let tau = cmd.tau.or(input.tau).unwrap_or(1.0);
    let batch = RetrievalBatch::new(input.videos, input.texts, tau)?;
    let loss = contrastive_loss(&batch)?;
    emit(
        out,
        &json!({
            "command": "score",
            "tau": tau,
            "similarity": loss.similarity,
            "video_to_text_ranking": rank_rows(&loss.similarity),
            "text_to_video_ranking": rank_rows(&transpose(&loss.similarity)),
            "loss": loss.loss,
            "loss_video_to_text": loss.video_to_text,
            "loss_text_to_video": loss.text_to_video,
        }),
    )
}
