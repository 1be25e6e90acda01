//! Synthetic paired data with planted duplicate-text groups.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matfile;

/// Raw input shapes: feature widths and sequence lengths per modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDims {
    pub d_video: usize,
    pub d_text: usize,
    pub t_video: usize,
    pub t_text: usize,
}

impl Default for ToyDims {
    fn default() -> Self {
        Self { d_video: 4, d_text: 4, t_video: 3, t_text: 3 }
    }
}

impl FromStr for ToyDims {
    type Err = Error;

    /// Parses `d_video,d_text,t_video,t_text`.
    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::InvalidArgument(format!("bad dims {s:?}")))?;
        match parts[..] {
            [d_video, d_text, t_video, t_text] if parts.iter().all(|&p| p > 0) => {
                Ok(Self { d_video, d_text, t_video, t_text })
            }
            _ => Err(Error::InvalidArgument(format!(
                "dims must be four positive integers d_video,d_text,t_video,t_text, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for ToyDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.d_video, self.d_text, self.t_video, self.t_text)
    }
}

/// Histogram of duplicate-group sizes: `(group size, number of groups)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec(pub Vec<(usize, usize)>);

impl GroupSpec {
    /// Every sample in its own group.
    pub fn singletons(n: usize) -> Self {
        GroupSpec(vec![(1, n)])
    }

    pub fn total(&self) -> usize {
        self.0.iter().map(|(size, count)| size * count).sum()
    }
}

impl FromStr for GroupSpec {
    type Err = Error;

    /// Parses `"3:10,1:34"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad group spec {s:?} (expected size:count,...)"));
        let entries = s
            .split(',')
            .map(|entry| {
                let (size, count) = entry.trim().split_once(':').ok_or_else(bad)?;
                let size: usize = size.trim().parse().map_err(|_| bad())?;
                let count: usize = count.trim().parse().map_err(|_| bad())?;
                if size == 0 {
                    return Err(bad());
                }
                Ok((size, count))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GroupSpec(entries))
    }
}

impl fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(s, c)| format!("{s}:{c}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// `N` paired raw samples. Samples in the same group share a bitwise
/// identical text matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub dims: ToyDims,
    /// `t_video × d_video` per sample.
    pub video: Vec<Array2<f64>>,
    /// `t_text × d_text` per sample.
    pub text: Vec<Array2<f64>>,
    pub groups: Vec<usize>,
}

impl ToyDataset {
    pub fn n(&self) -> usize {
        self.video.len()
    }

    /// Ordered negative pairs `(i, j)` whose texts are duplicates.
    pub fn same_group_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.groups[i] == self.groups[j])
            .collect()
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Draws one latent token matrix per group (used verbatim as the group's
/// text) and derives each member's video by a fixed random linear map of
/// the latent tokens plus Gaussian noise of scale `noise`.
pub fn generate_synthetic(n: usize, dims: ToyDims, groups: &GroupSpec, noise: f64, seed: u64) -> Result<ToyDataset> {
    if groups.total() != n {
        return Err(Error::InvalidArgument(format!(
            "group spec {groups} covers {} samples, expected {n}",
            groups.total()
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise must be finite and non-negative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mixing = gaussian_matrix(&mut rng, dims.d_video, dims.d_text, 1.0 / (dims.d_text as f64).sqrt());

    let mut assignment: Vec<usize> = Vec::with_capacity(n);
    let mut group = 0;
    for &(size, count) in &groups.0 {
        for _ in 0..count {
            assignment.extend(std::iter::repeat_n(group, size));
            group += 1;
        }
    }
    assignment.shuffle(&mut rng);

    let latents: Vec<Array2<f64>> = (0..group)
        .map(|_| gaussian_matrix(&mut rng, dims.t_text, dims.d_text, 1.0))
        .collect();

    let mut video = Vec::with_capacity(n);
    let mut text = Vec::with_capacity(n);
    for &g in &assignment {
        let latent = &latents[g];
        let mut v = Array2::zeros((dims.t_video, dims.d_video));
        for a in 0..dims.t_video {
            let token = latent.row(a % dims.t_text);
            let signal = mixing.dot(&token);
            for c in 0..dims.d_video {
                let z: f64 = StandardNormal.sample(&mut rng);
                v[[a, c]] = signal[c] + noise * z;
            }
        }
        video.push(v);
        text.push(latent.clone());
    }
    Ok(ToyDataset { dims, video, text, groups: assignment })
}

#[derive(Debug, Serialize, Deserialize)]
struct DataManifest {
    n: usize,
    dims: ToyDims,
    groups: Vec<usize>,
}

/// Writes `manifest.json`, `video.mat` and `text.mat` under `root`.
pub fn write_dataset(data: &ToyDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest = DataManifest { n: data.n(), dims: data.dims, groups: data.groups.clone() };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    matfile::write_records(&root.join("video.mat"), data.video.iter().enumerate())?;
    matfile::write_records(&root.join("text.mat"), data.text.iter().enumerate())
}

pub fn read_dataset(root: &Path) -> Result<ToyDataset> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DataManifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.groups.len() != m.n {
        return Err(Error::DimensionMismatch(format!("{} group ids for N = {}", m.groups.len(), m.n)));
    }
    let load = |file: &str, dim: usize, rows: usize| -> Result<Vec<Array2<f64>>> {
        let path = root.join(file);
        let records = matfile::read_records(&path, dim)?;
        if records.len() != m.n {
            return Err(Error::DimensionMismatch(format!(
                "{}: manifest declares N = {} but file holds {} samples",
                path.display(),
                m.n,
                records.len()
            )));
        }
        records
            .into_iter()
            .enumerate()
            .map(|(expected, (id, mat))| {
                if id != expected || mat.nrows() != rows {
                    Err(Error::DimensionMismatch(format!(
                        "{}: record {expected} has id {id} and {} rows (expected {rows})",
                        path.display(),
                        mat.nrows()
                    )))
                } else {
                    Ok(mat)
                }
            })
            .collect()
    };
    Ok(ToyDataset {
        dims: m.dims,
        video: load("video.mat", m.dims.d_video, m.dims.t_video)?,
        text: load("text.mat", m.dims.d_text, m.dims.t_text)?,
        groups: m.groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_specs() {
        let g: GroupSpec = "3:10,1:34".parse().unwrap();
        assert_eq!(g.0, vec![(3, 10), (1, 34)]);
        assert_eq!(g.total(), 64);
        assert!("3-10".parse::<GroupSpec>().is_err());
        let d: ToyDims = "4,4,3,3".parse().unwrap();
        assert_eq!(d, ToyDims::default());
        assert!("4,4,3".parse::<ToyDims>().is_err());
        assert!("4,0,3,3".parse::<ToyDims>().is_err());
    }

    #[test]
    fn singleton_groups_have_no_duplicates() {
        let d = generate_synthetic(12, ToyDims::default(), &GroupSpec::singletons(12), 0.1, 1).unwrap();
        let mut g = d.groups.clone();
        g.sort_unstable();
        assert_eq!(g, (0..12).collect::<Vec<_>>());
        assert!(d.same_group_pairs().is_empty());
    }

    #[test]
    fn triplet_groups_share_identical_text() {
        let d = generate_synthetic(30, ToyDims::default(), &GroupSpec(vec![(3, 10)]), 0.1, 2).unwrap();
        let mut sizes = std::collections::BTreeMap::new();
        for &g in &d.groups {
            *sizes.entry(g).or_insert(0) += 1;
        }
        assert_eq!(sizes.len(), 10);
        assert!(sizes.values().all(|&s| s == 3));
        for (i, j) in d.same_group_pairs() {
            assert_eq!(d.text[i], d.text[j]);
            assert_ne!(d.video[i], d.video[j]);
        }
        assert_eq!(d.same_group_pairs().len(), 10 * 6);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec: GroupSpec = "2:3,1:4".parse().unwrap();
        let a = generate_synthetic(10, ToyDims::default(), &spec, 0.2, 42).unwrap();
        let b = generate_synthetic(10, ToyDims::default(), &spec, 0.2, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(10, ToyDims::default(), &spec, 0.2, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn inconsistent_spec_is_rejected() {
        assert!(generate_synthetic(10, ToyDims::default(), &GroupSpec(vec![(3, 3)]), 0.1, 0).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let spec: GroupSpec = "2:2,1:3".parse().unwrap();
        let d = generate_synthetic(7, "3,2,2,4".parse().unwrap(), &spec, 0.5, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
    }
}
