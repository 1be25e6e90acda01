//! Per-checkpoint embedding snapshots and the similarity matrices derived
//! from them.
//!
//! A [`SnapshotSeries`] holds, for every saved checkpoint of a reference
//! model, the token-level feature sequences of all `N` videos and all `N`
//! texts. Pair similarities are computed from those sequences under one of
//! three [`Aggregation`] strategies. Series can also be stored as
//! precomputed similarity matrices ([`SimilaritySeries`]) for interop with
//! trainers that do not export embeddings.
//!
//! On disk a series is a directory:
//!
//! ```text
//! manifest.json            {"n", "dim", "checkpoints", "aggregation", "kind"}
//! ckpt_<k>/video.mat       one record per sample (see `matfile`)
//! ckpt_<k>/text.mat
//! ckpt_<k>/sim.mat         similarity kind only: N single-row records
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Text,
}

/// How a pair of feature sequences collapses to one similarity value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Cosine of the row-0 (global) tokens.
    Cls,
    /// Cosine of the column-wise means.
    Mean,
    /// Token-level max-then-mean in both directions, averaged.
    Cico,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Cls, Aggregation::Mean, Aggregation::Cico];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Cls => "cls",
            Aggregation::Mean => "mean",
            Aggregation::Cico => "cico",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Aggregation::Cls),
            "mean" => Ok(Aggregation::Mean),
            "cico" => Ok(Aggregation::Cico),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregation {other:?} (expected cls, mean or cico)"
            ))),
        }
    }
}

/// A `T × d` token/frame feature matrix for one sample of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub sample_id: usize,
    pub modality: Modality,
    pub features: Array2<f64>,
}

impl FeatureSequence {
    pub fn new(sample_id: usize, modality: Modality, features: Array2<f64>) -> Result<Self> {
        let (t, d) = features.dim();
        if t == 0 || d == 0 {
            return Err(Error::DimensionMismatch(format!(
                "sample {sample_id} ({modality:?}) has shape {t}x{d}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "sample {sample_id} ({modality:?}) contains non-finite values"
            )));
        }
        Ok(Self { sample_id, modality, features })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Embeddings of every paired sample at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub checkpoint: usize,
    pub video: Vec<FeatureSequence>,
    pub text: Vec<FeatureSequence>,
}

impl Snapshot {
    pub fn new(checkpoint: usize, video: Vec<FeatureSequence>, text: Vec<FeatureSequence>) -> Result<Self> {
        if video.len() != text.len() {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint {checkpoint}: {} videos but {} texts",
                video.len(),
                text.len()
            )));
        }
        if video.is_empty() {
            return Err(Error::InsufficientData(format!("checkpoint {checkpoint} has no samples")));
        }
        let dim = video[0].dim();
        for (expected, (v, t)) in video.iter().zip(&text).enumerate() {
            if v.sample_id != expected || t.sample_id != expected {
                return Err(Error::Format(format!(
                    "checkpoint {checkpoint}: sample ids must be 0..N-1 in order, found {}/{} at {expected}",
                    v.sample_id, t.sample_id
                )));
            }
            if v.modality != Modality::Video || t.modality != Modality::Text {
                return Err(Error::Format(format!(
                    "checkpoint {checkpoint}: sample {expected} has the wrong modality"
                )));
            }
            if v.dim() != dim || t.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "checkpoint {checkpoint}: sample {expected} has dims {}/{}, expected {dim}",
                    v.dim(),
                    t.dim()
                )));
            }
        }
        Ok(Self { checkpoint, video, text })
    }

    pub fn n(&self) -> usize {
        self.video.len()
    }

    pub fn dim(&self) -> usize {
        self.video[0].dim()
    }
}

/// Checkpoint indices must start at 0 and strictly increase.
pub fn validate_checkpoints(checkpoints: &[usize]) -> Result<()> {
    let ok = checkpoints.first() == Some(&0) && checkpoints.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::NonMonotoneCheckpoints(checkpoints.to_vec()))
    }
}

/// Ordered snapshots of one reference run.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSeries {
    snapshots: Vec<Snapshot>,
    /// Aggregation the producing run trained with, if known.
    pub aggregation: Option<Aggregation>,
}

impl SnapshotSeries {
    pub fn new(snapshots: Vec<Snapshot>, aggregation: Option<Aggregation>) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::InsufficientData("series has no snapshots".into()));
        }
        let checkpoints: Vec<usize> = snapshots.iter().map(|s| s.checkpoint).collect();
        validate_checkpoints(&checkpoints)?;
        let (n, dim) = (snapshots[0].n(), snapshots[0].dim());
        for s in &snapshots {
            if s.n() != n || s.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "checkpoint {} has N={} d={}, expected N={n} d={dim}",
                    s.checkpoint,
                    s.n(),
                    s.dim()
                )));
            }
        }
        Ok(Self { snapshots, aggregation })
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn checkpoints(&self) -> Vec<usize> {
        self.snapshots.iter().map(|s| s.checkpoint).collect()
    }

    /// The largest checkpoint index `K`.
    pub fn final_checkpoint(&self) -> usize {
        self.snapshots.last().map(|s| s.checkpoint).unwrap_or(0)
    }

    pub fn n(&self) -> usize {
        self.snapshots[0].n()
    }

    pub fn dim(&self) -> usize {
        self.snapshots[0].dim()
    }

    pub fn similarity_series(&self, mode: Aggregation) -> Result<SimilaritySeries> {
        let matrices = self
            .snapshots
            .iter()
            .map(|s| similarity_matrix(s, mode))
            .collect::<Result<Vec<_>>>()?;
        SimilaritySeries::new(matrices)
    }
}

/// Video-by-text similarities at one checkpoint; entry `(i, j)` compares
/// video `i` with text `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub checkpoint: usize,
    pub values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }
}

/// Similarity matrices over a checkpoint set, without the embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilaritySeries {
    matrices: Vec<SimilarityMatrix>,
}

impl SimilaritySeries {
    pub fn new(matrices: Vec<SimilarityMatrix>) -> Result<Self> {
        if matrices.is_empty() {
            return Err(Error::InsufficientData("no similarity matrices".into()));
        }
        let checkpoints: Vec<usize> = matrices.iter().map(|m| m.checkpoint).collect();
        validate_checkpoints(&checkpoints)?;
        let n = matrices[0].n();
        for m in &matrices {
            if m.values.nrows() != n || m.values.ncols() != n {
                return Err(Error::DimensionMismatch(format!(
                    "checkpoint {} matrix is {}x{}, expected {n}x{n}",
                    m.checkpoint,
                    m.values.nrows(),
                    m.values.ncols()
                )));
            }
            if m.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("checkpoint {} has non-finite similarities", m.checkpoint)));
            }
        }
        Ok(Self { matrices })
    }

    pub fn matrices(&self) -> &[SimilarityMatrix] {
        &self.matrices
    }

    pub fn checkpoints(&self) -> Vec<usize> {
        self.matrices.iter().map(|m| m.checkpoint).collect()
    }

    pub fn n(&self) -> usize {
        self.matrices[0].n()
    }

    /// Keeps only checkpoints that are multiples of `stride`, plus the final one.
    pub fn subsample(&self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let last = self.matrices.len() - 1;
        let kept = self
            .matrices
            .iter()
            .enumerate()
            .filter(|(idx, m)| m.checkpoint % stride == 0 || *idx == last)
            .map(|(_, m)| m.clone())
            .collect();
        Self::new(kept)
    }
}

/// Cosine of the angle between `u` and `v`.
pub fn cosine_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateEmbedding("zero-norm vector in cosine similarity".into()));
    }
    Ok(u.dot(&v) / (nu * nv))
}

fn mean_rows(m: ArrayView2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0)).expect("sequence has at least one row")
}

/// Mean over rows of `a` of the best cosine against any row of `b`.
pub fn cico_directional(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let mut total = 0.0;
    for ra in a.rows() {
        let mut best = f64::NEG_INFINITY;
        for rb in b.rows() {
            best = best.max(cosine_similarity(ra, rb)?);
        }
        total += best;
    }
    Ok(total / a.nrows() as f64)
}

/// Similarity of a video sequence and a text sequence under `mode`.
pub fn aggregate_similarity(v: &FeatureSequence, t: &FeatureSequence, mode: Aggregation) -> Result<f64> {
    if v.dim() != t.dim() {
        return Err(Error::DimensionMismatch(format!(
            "video dim {} vs text dim {}",
            v.dim(),
            t.dim()
        )));
    }
    match mode {
        Aggregation::Cls => cosine_similarity(v.features.row(0), t.features.row(0)),
        Aggregation::Mean => {
            let pv = mean_rows(v.features.view());
            let pt = mean_rows(t.features.view());
            cosine_similarity(pv.view(), pt.view())
        }
        Aggregation::Cico => {
            let v2t = cico_directional(v.features.view(), t.features.view())?;
            let t2v = cico_directional(t.features.view(), v.features.view())?;
            Ok(0.5 * (v2t + t2v))
        }
    }
}

/// All `N × N` video-text similarities of a snapshot.
pub fn similarity_matrix(snapshot: &Snapshot, mode: Aggregation) -> Result<SimilarityMatrix> {
    let n = snapshot.n();
    let rows = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    aggregate_similarity(&snapshot.video[i], &snapshot.text[j], mode).map_err(|e| match e {
                        Error::DegenerateEmbedding(msg) => Error::DegenerateEmbedding(format!(
                            "checkpoint {}, pair ({i}, {j}): {msg}",
                            snapshot.checkpoint
                        )),
                        other => other,
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let values = Array2::from_shape_vec((n, n), rows.into_iter().flatten().collect()).expect("n*n entries");
    Ok(SimilarityMatrix { checkpoint: snapshot.checkpoint, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreKind {
    #[default]
    Embeddings,
    Similarity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    n: usize,
    dim: usize,
    checkpoints: Vec<usize>,
    aggregation: Option<Aggregation>,
    #[serde(default)]
    kind: StoreKind,
}

/// Contents of a snapshot directory, whichever kind it holds.
#[derive(Debug, Clone, PartialEq)]
pub enum SeriesStore {
    Embeddings(SnapshotSeries),
    Similarity { series: SimilaritySeries, aggregation: Option<Aggregation> },
}

impl SeriesStore {
    /// Similarity matrices for analysis. `mode` overrides the stored aggregation
    /// for embedding stores and is ignored for similarity stores.
    pub fn similarities(&self, mode: Option<Aggregation>) -> Result<SimilaritySeries> {
        match self {
            SeriesStore::Embeddings(series) => {
                let mode = mode.or(series.aggregation).unwrap_or(Aggregation::Mean);
                series.similarity_series(mode)
            }
            SeriesStore::Similarity { series, .. } => Ok(series.clone()),
        }
    }

    pub fn checkpoints(&self) -> Vec<usize> {
        match self {
            SeriesStore::Embeddings(s) => s.checkpoints(),
            SeriesStore::Similarity { series, .. } => series.checkpoints(),
        }
    }
}

fn ckpt_dir(root: &Path, k: usize) -> std::path::PathBuf {
    root.join(format!("ckpt_{k}"))
}

fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    validate_checkpoints(&manifest.checkpoints)?;
    Ok(manifest)
}

pub fn write_series(series: &SnapshotSeries, root: &Path) -> Result<()> {
    write_manifest(
        root,
        &Manifest {
            n: series.n(),
            dim: series.dim(),
            checkpoints: series.checkpoints(),
            aggregation: series.aggregation,
            kind: StoreKind::Embeddings,
        },
    )?;
    for snap in series.snapshots() {
        let dir = ckpt_dir(root, snap.checkpoint);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        matfile::write_records(&dir.join("video.mat"), snap.video.iter().map(|s| (s.sample_id, &s.features)))?;
        matfile::write_records(&dir.join("text.mat"), snap.text.iter().map(|s| (s.sample_id, &s.features)))?;
    }
    Ok(())
}

pub fn write_similarity_series(series: &SimilaritySeries, aggregation: Option<Aggregation>, root: &Path) -> Result<()> {
    write_manifest(
        root,
        &Manifest {
            n: series.n(),
            dim: series.n(),
            checkpoints: series.checkpoints(),
            aggregation,
            kind: StoreKind::Similarity,
        },
    )?;
    for m in series.matrices() {
        let dir = ckpt_dir(root, m.checkpoint);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        matfile::write_square(&dir.join("sim.mat"), &m.values)?;
    }
    Ok(())
}

fn read_sequences(path: &Path, manifest: &Manifest, modality: Modality) -> Result<Vec<FeatureSequence>> {
    let records = matfile::read_records(path, manifest.dim)?;
    if records.len() != manifest.n {
        return Err(Error::DimensionMismatch(format!(
            "{}: manifest declares N = {} but file holds {} sequences",
            path.display(),
            manifest.n,
            records.len()
        )));
    }
    records
        .into_iter()
        .map(|(id, m)| FeatureSequence::new(id, modality, m))
        .collect()
}

/// Reads an embedding series; fails on similarity-kind directories.
pub fn read_series(root: &Path) -> Result<SnapshotSeries> {
    match read_store(root)? {
        SeriesStore::Embeddings(s) => Ok(s),
        SeriesStore::Similarity { .. } => Err(Error::Format(format!(
            "{} holds similarity matrices, not embeddings",
            root.display()
        ))),
    }
}

pub fn read_store(root: &Path) -> Result<SeriesStore> {
    let manifest = read_manifest(root)?;
    match manifest.kind {
        StoreKind::Embeddings => {
            let snapshots = manifest
                .checkpoints
                .iter()
                .map(|&k| {
                    let dir = ckpt_dir(root, k);
                    let video = read_sequences(&dir.join("video.mat"), &manifest, Modality::Video)?;
                    let text = read_sequences(&dir.join("text.mat"), &manifest, Modality::Text)?;
                    Snapshot::new(k, video, text)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SeriesStore::Embeddings(SnapshotSeries::new(snapshots, manifest.aggregation)?))
        }
        StoreKind::Similarity => {
            let matrices = manifest
                .checkpoints
                .iter()
                .map(|&k| {
                    let path = ckpt_dir(root, k).join("sim.mat");
                    let values = matfile::read_square(&path)?;
                    if values.nrows() != manifest.n {
                        return Err(Error::DimensionMismatch(format!(
                            "{}: manifest declares N = {} but matrix is {}x{}",
                            path.display(),
                            manifest.n,
                            values.nrows(),
                            values.ncols()
                        )));
                    }
                    Ok(SimilarityMatrix { checkpoint: k, values })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SeriesStore::Similarity {
                series: SimilaritySeries::new(matrices)?,
                aggregation: manifest.aggregation,
            })
        }
    }
}
