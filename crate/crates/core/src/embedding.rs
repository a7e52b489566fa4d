//! Token data model and on-disk formats.
//!
//! A token set is stored as a JSON manifest plus a raw payload of
//! little-endian `f32` values laid out frame-major, then patch row, then
//! patch column, then embedding component:
//!
//! ```json
//! {
//!   "dim": 512, "num_frames": 12, "tokens_per_frame": 49,
//!   "grid_rows": 7, "grid_cols": 7, "dtype": "f32le", "payload": "tokens.f32"
//! }
//! ```
//!
//! `payload` is resolved relative to the manifest's directory. Reduced
//! sequences reuse the same manifest with two extra keys, `token_indices`
//! (one `[frame, row, col]` triple per stored token) and `segment_offsets`.
//! Class tokens are never part of a token set.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTYPE_F32LE: &str = "f32le";

/// Spatio-temporal position of a patch token. The derived ordering is
/// lexicographic on (frame, row, col), which is the canonical token order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenIndex {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

impl TokenIndex {
    pub const fn new(frame: usize, row: usize, col: usize) -> Self {
        Self { frame, row, col }
    }
}

/// Dense patch-token embeddings for one video: `num_frames * grid_rows *
/// grid_cols` vectors of `dim` finite components.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    dim: usize,
    num_frames: usize,
    grid_rows: usize,
    grid_cols: usize,
    data: Vec<f32>,
}

impl TokenSet {
    pub fn new(
        dim: usize,
        num_frames: usize,
        grid_rows: usize,
        grid_cols: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 || num_frames == 0 || grid_rows == 0 || grid_cols == 0 {
            return Err(Error::invalid(format!(
                "token set shape must be positive, got dim {dim}, frames {num_frames}, grid {grid_rows}x{grid_cols}"
            )));
        }
        let expected = dim * num_frames * grid_rows * grid_cols;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "token data holds {} values, shape requires {expected}",
                data.len()
            )));
        }
        let set = Self {
            dim,
            num_frames,
            grid_rows,
            grid_cols,
            data,
        };
        if let Some(pos) = set.data.iter().position(|v| !v.is_finite()) {
            let idx = set.index_of(pos / dim);
            return Err(Error::NonFinite {
                frame: idx.frame,
                row: idx.row,
                col: idx.col,
                component: pos % dim,
            });
        }
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn grid_rows(&self) -> usize {
        self.grid_rows
    }

    pub fn grid_cols(&self) -> usize {
        self.grid_cols
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Total number of tokens, `num_frames * tokens_per_frame`.
    pub fn len(&self) -> usize {
        self.num_frames * self.tokens_per_frame()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Embedding of the token at flat position `pos` (canonical order).
    pub fn vector(&self, pos: usize) -> &[f32] {
        &self.data[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn get(&self, idx: TokenIndex) -> Option<&[f32]> {
        self.position_of(idx).map(|pos| self.vector(pos))
    }

    pub fn index_of(&self, pos: usize) -> TokenIndex {
        let per_frame = self.tokens_per_frame();
        let within = pos % per_frame;
        TokenIndex::new(pos / per_frame, within / self.grid_cols, within % self.grid_cols)
    }

    pub fn position_of(&self, idx: TokenIndex) -> Option<usize> {
        (idx.frame < self.num_frames && idx.row < self.grid_rows && idx.col < self.grid_cols)
            .then(|| (idx.frame * self.grid_rows + idx.row) * self.grid_cols + idx.col)
    }

    pub fn indices(&self) -> impl Iterator<Item = TokenIndex> + '_ {
        (0..self.len()).map(|p| self.index_of(p))
    }
}

/// Split of `num_frames` frames into `num_segments` equal contiguous runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentSpec {
    pub num_segments: usize,
    pub frames_per_segment: usize,
}

impl SegmentSpec {
    pub fn new(num_frames: usize, num_segments: usize) -> Result<Self> {
        if num_segments == 0 || num_frames == 0 || !num_frames.is_multiple_of(num_segments) {
            return Err(Error::invalid(format!(
                "segment count S = {num_segments} must divide the frame count {num_frames}"
            )));
        }
        Ok(Self {
            num_segments,
            frames_per_segment: num_frames / num_segments,
        })
    }

    pub fn frame_range(&self, segment: usize) -> std::ops::Range<usize> {
        segment * self.frames_per_segment..(segment + 1) * self.frames_per_segment
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmKind {
    Kmedoids,
    Spectral,
}

impl AlgorithmKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmKind::Kmedoids => "kmedoids",
            AlgorithmKind::Spectral => "spectral",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetadata {
    pub algorithm: AlgorithmKind,
    /// Clusters (centers) per segment.
    pub k: usize,
    /// Number of temporal segments.
    pub segments: usize,
    /// Transformer block after which clustering is placed. Bookkeeping only.
    pub block_tag: Option<i64>,
    pub sigma: Option<f64>,
    pub knn: Option<usize>,
    pub normalize: bool,
    pub max_iterations: usize,
    pub tokens_before: usize,
    pub tokens_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentClusters {
    /// Frames `[frame_start, frame_end)` owned by this segment.
    pub frame_start: usize,
    pub frame_end: usize,
    /// Center tokens in canonical order; cluster id `c` is `centers[c]`.
    pub centers: Vec<TokenIndex>,
    /// Position of each center within the segment's token list.
    pub center_positions: Vec<usize>,
    /// Cluster id of every token of the segment, in canonical token order.
    pub assignment: Vec<usize>,
    pub iterations_run: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub metadata: ClusterMetadata,
    pub segments: Vec<SegmentClusters>,
}

impl ClusterResult {
    pub fn total_centers(&self) -> usize {
        self.segments.iter().map(|s| s.centers.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let meta = &self.metadata;
        if self.segments.is_empty() {
            return Err(Error::invalid("cluster result has no segments"));
        }
        if meta.segments != self.segments.len() {
            return Err(Error::invalid(format!(
                "metadata declares {} segments, document has {}",
                meta.segments,
                self.segments.len()
            )));
        }
        let mut prev_end = 0;
        for (j, seg) in self.segments.iter().enumerate() {
            let bad = |msg: String| Error::invalid(format!("segment {j}: {msg}"));
            if seg.frame_start < prev_end || seg.frame_end <= seg.frame_start {
                return Err(bad(format!(
                    "frame range [{}, {}) overlaps or is empty",
                    seg.frame_start, seg.frame_end
                )));
            }
            prev_end = seg.frame_end;
            if seg.centers.len() != meta.k || seg.center_positions.len() != meta.k {
                return Err(bad(format!("expected {} centers, found {}", meta.k, seg.centers.len())));
            }
            if !seg.centers.windows(2).all(|w| w[0] < w[1]) {
                return Err(bad("centers are not distinct and canonically sorted".into()));
            }
            if !seg.center_positions.windows(2).all(|w| w[0] < w[1]) {
                return Err(bad("center positions are not strictly increasing".into()));
            }
            if let Some(c) = seg.centers.iter().find(|c| !(seg.frame_start..seg.frame_end).contains(&c.frame)) {
                return Err(bad(format!("center {c:?} lies outside the segment")));
            }
            if let Some(&a) = seg.assignment.iter().find(|&&a| a >= meta.k) {
                return Err(bad(format!("cluster id {a} out of range")));
            }
            for (c, &p) in seg.center_positions.iter().enumerate() {
                if seg.assignment.get(p) != Some(&c) {
                    return Err(bad(format!("center {c} is not a member of its own cluster")));
                }
            }
        }
        Ok(())
    }
}

pub fn save_cluster_result(result: &ClusterResult, path: impl AsRef<Path>) -> Result<()> {
    result.validate()?;
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(result).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_cluster_result(path: impl AsRef<Path>) -> Result<ClusterResult> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let result: ClusterResult = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    result.validate()?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dim: usize,
    pub num_frames: usize,
    pub tokens_per_frame: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub dtype: String,
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_indices: Option<Vec<[usize; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_offsets: Option<Vec<usize>>,
}

impl Manifest {
    fn dense(tokens: &TokenSet, payload: String) -> Self {
        Self {
            dim: tokens.dim,
            num_frames: tokens.num_frames,
            tokens_per_frame: tokens.tokens_per_frame(),
            grid_rows: tokens.grid_rows,
            grid_cols: tokens.grid_cols,
            dtype: DTYPE_F32LE.to_string(),
            payload,
            token_indices: None,
            segment_offsets: None,
        }
    }

    /// Number of stored tokens.
    pub fn token_count(&self) -> usize {
        self.token_indices
            .as_ref()
            .map_or(self.num_frames * self.tokens_per_frame, Vec::len)
    }

    fn check(&self, path: &Path) -> Result<()> {
        let bad = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            reason,
        };
        if self.dtype != DTYPE_F32LE {
            return Err(bad(format!("unsupported dtype {:?}, expected \"f32le\"", self.dtype)));
        }
        if self.dim == 0 || self.num_frames == 0 || self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(bad("dim, num_frames, grid_rows and grid_cols must be positive".into()));
        }
        if self.grid_rows * self.grid_cols != self.tokens_per_frame {
            return Err(bad(format!(
                "grid {}x{} does not match tokens_per_frame {}",
                self.grid_rows, self.grid_cols, self.tokens_per_frame
            )));
        }
        Ok(())
    }
}

fn payload_name(manifest_path: &Path) -> String {
    let stem = manifest_path
        .file_stem()
        .map_or_else(|| "tokens".to_string(), |s| s.to_string_lossy().into_owned());
    format!("{stem}.f32")
}

fn payload_path(manifest_path: &Path, payload: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(payload)
}

/// Reads a manifest and its payload without interpreting token layout.
pub(crate) fn read_manifest(path: &Path) -> Result<(Manifest, Vec<f32>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    manifest.check(path)?;

    let payload = payload_path(path, &manifest.payload);
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    let expected = (manifest.token_count() * manifest.dim * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((manifest, data))
}

/// Writes `data` next to the manifest and points the manifest at it.
pub(crate) fn write_manifest(path: &Path, mut manifest: Manifest, data: &[f32]) -> Result<()> {
    manifest.payload = payload_name(path);
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    let payload = payload_path(path, &manifest.payload);
    fs::write(&payload, bytes).map_err(|e| Error::io(&payload, e))?;
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_token_set(manifest_path: impl AsRef<Path>) -> Result<TokenSet> {
    let path = manifest_path.as_ref();
    let (manifest, data) = read_manifest(path)?;
    if manifest.token_indices.is_some() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            reason: "manifest describes a reduced sequence, not a dense token set".into(),
        });
    }
    TokenSet::new(
        manifest.dim,
        manifest.num_frames,
        manifest.grid_rows,
        manifest.grid_cols,
        data,
    )
}

/// Writes `tokens` as `<manifest_path>` plus a sibling `<stem>.f32` payload.
pub fn save_token_set(tokens: &TokenSet, manifest_path: impl AsRef<Path>) -> Result<()> {
    let path = manifest_path.as_ref();
    write_manifest(path, Manifest::dense(tokens, String::new()), &tokens.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_raw(dir: &Path, manifest: &str, payload: &[u8]) -> PathBuf {
        let m = dir.join("m.json");
        fs::write(&m, manifest).unwrap();
        fs::write(dir.join("p.f32"), payload).unwrap();
        m
    }

    fn minimal_manifest(dim: usize, frames: usize, rows: usize, cols: usize) -> String {
        format!(
            r#"{{"dim":{dim},"num_frames":{frames},"tokens_per_frame":{},"grid_rows":{rows},"grid_cols":{cols},"dtype":"f32le","payload":"p.f32"}}"#,
            rows * cols
        )
    }

    #[test]
    fn loads_minimal_set() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = [1.5f32, -2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let m = write_raw(dir.path(), &minimal_manifest(2, 1, 1, 1), &bytes);
        let set = load_token_set(&m).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.vector(0), &[1.5, -2.0]);
    }

    #[test]
    fn truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_raw(dir.path(), &minimal_manifest(2, 1, 1, 1), &[0u8; 4]);
        assert!(matches!(
            load_token_set(&m),
            Err(Error::SizeMismatch { expected: 8, found: 4 })
        ));
    }

    #[test]
    fn vit_b32_shape() {
        let dir = tempfile::tempdir().unwrap();
        let n = 12 * 49 * 512;
        let bytes: Vec<u8> = (0..n).flat_map(|i| (i as f32 * 1e-3).to_le_bytes()).collect();
        let m = write_raw(dir.path(), &minimal_manifest(512, 12, 7, 7), &bytes);
        let set = load_token_set(&m).unwrap();
        assert_eq!((set.num_frames(), set.tokens_per_frame(), set.dim()), (12, 49, 512));
        // Row-major: frame outermost, then row, col, dim.
        let idx = TokenIndex::new(3, 2, 5);
        let pos = ((3 * 7 + 2) * 7 + 5) * 512;
        assert_eq!(set.get(idx).unwrap()[0], pos as f32 * 1e-3);
    }

    #[test]
    fn non_finite_names_first_offender() {
        let dir = tempfile::tempdir().unwrap();
        let mut vals = [0.0f32; 2 * 2 * 2 * 3];
        vals[2 * 2 * 3 + 3 + 1] = f32::NAN; // frame 1, row 0, col 1, component 1
        vals[20] = f32::INFINITY;
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let m = write_raw(dir.path(), &minimal_manifest(3, 2, 2, 2), &bytes);
        match load_token_set(&m) {
            Err(Error::NonFinite { frame, row, col, component }) => {
                assert_eq!((frame, row, col, component), (1, 0, 1, 1))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_raw(dir.path(), "{not json", &[]);
        assert!(matches!(load_token_set(&m), Err(Error::Manifest { .. })));
        let text = minimal_manifest(2, 1, 1, 1).replace("f32le", "f16");
        let m = write_raw(dir.path(), &text, &[0; 8]);
        assert!(matches!(load_token_set(&m), Err(Error::Manifest { .. })));
        let text = minimal_manifest(2, 1, 1, 1).replace("\"tokens_per_frame\":1", "\"tokens_per_frame\":2");
        let m = write_raw(dir.path(), &text, &[0; 8]);
        assert!(matches!(load_token_set(&m), Err(Error::Manifest { .. })));
        let missing = dir.path().join("absent.json");
        assert_eq!(load_token_set(missing).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn segment_spec_requires_divisibility() {
        let spec = SegmentSpec::new(12, 3).unwrap();
        assert_eq!(spec.frames_per_segment, 4);
        assert_eq!(spec.frame_range(2), 8..12);
        assert!(SegmentSpec::new(12, 5).is_err());
        assert!(SegmentSpec::new(12, 0).is_err());
    }

    fn sample_result(k: usize, segments: usize) -> ClusterResult {
        let per = 4 * k;
        ClusterResult {
            metadata: ClusterMetadata {
                algorithm: AlgorithmKind::Kmedoids,
                k,
                segments,
                block_tag: Some(6),
                sigma: None,
                knn: None,
                normalize: false,
                max_iterations: 50,
                tokens_before: per * segments,
                tokens_after: k * segments,
            },
            segments: (0..segments)
                .map(|j| SegmentClusters {
                    frame_start: 4 * j,
                    frame_end: 4 * j + 4,
                    centers: (0..k).map(|c| TokenIndex::new(4 * j + c / 7 % 4, c % 7, 0)).collect(),
                    center_positions: (0..k).collect(),
                    assignment: (0..per).map(|i| if i < k { i } else { i % k }).collect(),
                    iterations_run: 3,
                    cost: 0.1 + j as f64 / 3.0,
                })
                .collect(),
        }
    }

    #[test]
    fn cluster_result_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clusters.json");
        let result = sample_result(7, 3);
        result.validate().unwrap();
        save_cluster_result(&result, &path).unwrap();
        assert_eq!(load_cluster_result(&path).unwrap(), result);
    }

    #[test]
    fn forty_nine_centers_three_segments() {
        let mut result = sample_result(49, 3);
        for seg in &mut result.segments {
            seg.centers = (0..49)
                .map(|c| TokenIndex::new(seg.frame_start, c / 7, c % 7))
                .collect();
        }
        result.validate().unwrap();
        assert_eq!(result.total_centers(), 147);
        let json = serde_json::to_value(&result).unwrap();
        let listed: usize = json["segments"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| s["centers"].as_array().unwrap().len())
            .sum();
        assert_eq!(listed, 147);
    }

    #[test]
    fn empty_result_is_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clusters.json");
        let mut result = sample_result(2, 1);
        result.segments.clear();
        assert!(save_cluster_result(&result, &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn center_must_belong_to_its_cluster() {
        let mut result = sample_result(2, 1);
        result.segments[0].assignment[1] = 0;
        assert!(result.validate().is_err());
    }

    #[test]
    fn unwritable_path() {
        let err = save_cluster_result(&sample_result(2, 1), "/nonexistent-dir/x/clusters.json")
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    proptest! {
        #[test]
        fn token_set_round_trip(
            (dim, frames, rows, cols) in (1usize..5, 1usize..4, 1usize..4, 1usize..4),
            seed in any::<u64>(),
        ) {
            let n = dim * frames * rows * cols;
            let data: Vec<f32> = (0..n)
                .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 11) as f32).sin())
                .collect();
            let set = TokenSet::new(dim, frames, rows, cols, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("tokens.json");
            save_token_set(&set, &path).unwrap();
            prop_assert_eq!(load_token_set(&path).unwrap(), set.clone());
            for (p, idx) in set.indices().enumerate() {
                prop_assert_eq!(set.position_of(idx), Some(p));
            }
            prop_assert!(set.indices().collect::<Vec<_>>().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
