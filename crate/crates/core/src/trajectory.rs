//! Similarity-trajectory fitting and the four-regime negative taxonomy.
//!
//! Every ordered pair `(video i, text j)` has one similarity per checkpoint.
//! A least-squares line through those points smooths the trajectory; the
//! fitted change between the first and last checkpoint is the difficulty
//! proxy `delta`. Negatives are then labelled by where they end up (above or
//! below the mean final negative similarity) and how far they moved.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snapshot::SimilaritySeries;

/// Threshold on `|delta|` separating "stable" from "moving" pairs.
pub const DEFAULT_EPSILON: f64 = 0.2;

/// Ordinary least squares line `s ≈ slope·k + intercept` through `points`.
///
/// Centred normal equations; the mean of `s` is accumulated relative to the
/// first sample so constant trajectories are recovered bit-exactly.
pub fn fit_trajectory(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "regression needs at least 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(k, s)| !k.is_finite() || !s.is_finite()) {
        return Err(Error::Format("non-finite trajectory point".into()));
    }
    let n = points.len() as f64;
    let k_mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let s_ref = points[0].1;
    let s_mean = s_ref + points.iter().map(|p| p.1 - s_ref).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(k, s) in points {
        let dk = k - k_mean;
        sxx += dk * dk;
        sxy += dk * (s - s_mean);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateRegression);
    }
    let slope = sxy / sxx;
    Ok((slope, s_mean - slope * k_mean))
}

/// A fitted trajectory for the pair (video `i`, text `j`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryFit {
    pub i: usize,
    pub j: usize,
    pub slope: f64,
    pub intercept: f64,
    /// Fitted similarity at checkpoint 0 (equals `intercept`).
    pub fitted_start: f64,
    /// Fitted similarity at the final checkpoint `K`.
    pub fitted_end: f64,
    /// `slope · K`, the fitted change over training.
    pub delta: f64,
}

impl TrajectoryFit {
    pub fn from_line(i: usize, j: usize, slope: f64, intercept: f64, final_checkpoint: f64) -> Self {
        let delta = slope * final_checkpoint;
        Self {
            i,
            j,
            slope,
            intercept,
            fitted_start: intercept,
            fitted_end: delta + intercept,
            delta,
        }
    }

    pub fn fit(i: usize, j: usize, points: &[(f64, f64)]) -> Result<Self> {
        let (slope, intercept) = fit_trajectory(points)?;
        let last = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        Ok(Self::from_line(i, j, slope, intercept, last))
    }
}

/// Smoothed similarity `slope·k + intercept` at checkpoint `k`.
pub fn approx_similarity(fit: &TrajectoryFit, k: f64) -> f64 {
    fit.slope * k + fit.intercept
}

/// `N × N` fitted similarity changes; the diagonal is zero and never used.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMatrix {
    values: Array2<f64>,
}

impl DeltaMatrix {
    /// Wraps a square matrix, zeroing the diagonal.
    pub fn new(mut values: Array2<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() || values.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "delta matrix must be square and nonempty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("delta matrix has non-finite entries".into()));
        }
        values.diag_mut().fill(0.0);
        Ok(Self { values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Output of [`delta_matrix`].
#[derive(Debug, Clone)]
pub struct DeltaAnalysis {
    pub delta: DeltaMatrix,
    /// Negative-pair fits in row-major order, skipping the diagonal.
    pub fits: Vec<TrajectoryFit>,
    /// Positive-pair (diagonal) fits, diagnostics only.
    pub positive_fits: Vec<TrajectoryFit>,
    /// Mean fitted final similarity over all negatives.
    pub s_mean: f64,
    pub checkpoints: Vec<usize>,
}

/// Fits every pair's trajectory across the series and derives `delta`.
pub fn delta_matrix(series: &SimilaritySeries) -> Result<DeltaAnalysis> {
    let matrices = series.matrices();
    if matrices.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "trajectory analysis needs at least 2 checkpoints, got {}",
            matrices.len()
        )));
    }
    let n = series.n();
    let checkpoints = series.checkpoints();
    let final_k = *checkpoints.last().unwrap() as f64;

    let rows: Vec<Vec<TrajectoryFit>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut points = vec![(0.0, 0.0); matrices.len()];
            (0..n)
                .map(|j| {
                    for (p, m) in points.iter_mut().zip(matrices) {
                        *p = (m.checkpoint as f64, m.values[[i, j]]);
                    }
                    let (slope, intercept) = fit_trajectory(&points)?;
                    Ok(TrajectoryFit::from_line(i, j, slope, intercept, final_k))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut values = Array2::zeros((n, n));
    let mut fits = Vec::with_capacity(n * n.saturating_sub(1));
    let mut positive_fits = Vec::with_capacity(n);
    for fit in rows.into_iter().flatten() {
        if fit.i == fit.j {
            positive_fits.push(fit);
        } else {
            values[[fit.i, fit.j]] = fit.delta;
            fits.push(fit);
        }
    }
    let s_mean = if fits.is_empty() {
        0.0
    } else {
        fits.iter().map(|f| f.fitted_end).sum::<f64>() / fits.len() as f64
    };
    Ok(DeltaAnalysis {
        delta: DeltaMatrix::new(values)?,
        fits,
        positive_fits,
        s_mean,
        checkpoints,
    })
}

/// The four trajectory regimes, named start-level then end-level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    HighToLow,
    LowToLow,
    HighToHigh,
    LowToHigh,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::HighToLow,
        Category::LowToLow,
        Category::HighToHigh,
        Category::LowToHigh,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Category::HighToLow => "HL",
            Category::LowToLow => "LL",
            Category::HighToHigh => "HH",
            Category::LowToHigh => "LH",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Ends above the mean final negative similarity.
    pub fn ends_high(self) -> bool {
        matches!(self, Category::HighToHigh | Category::LowToHigh)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.code() == s)
            .ok_or_else(|| Error::Format(format!("unknown category {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CategoryLabel {
    pub category: Category,
    /// Set when none of the four base rules matched and the pair was
    /// assigned by its start/end levels instead.
    pub fall_through: bool,
}

/// Labels a negative from its fitted final similarity and change.
pub fn classify(fitted_end: f64, delta: f64, s_mean: f64, epsilon: f64) -> CategoryLabel {
    let high = fitted_end > s_mean;
    let (category, fall_through) = if delta.abs() <= epsilon {
        (if high { Category::HighToHigh } else { Category::LowToLow }, false)
    } else if delta > epsilon {
        if high {
            (Category::LowToHigh, false)
        } else {
            // rose but still ends low: started low as well
            (Category::LowToLow, true)
        }
    } else if high {
        // fell but still ends high: started high as well
        (Category::HighToHigh, true)
    } else {
        (Category::HighToLow, false)
    };
    CategoryLabel { category, fall_through }
}

pub fn classify_pair(fit: &TrajectoryFit, s_mean: f64, epsilon: f64) -> CategoryLabel {
    classify(fit.fitted_end, fit.delta, s_mean, epsilon)
}

/// Category counts over a set of negative-pair fits.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryReport {
    /// Indexed by [`Category::index`].
    pub counts: [usize; 4],
    pub fractions: [f64; 4],
    pub fall_through_count: usize,
    pub s_mean: f64,
    pub epsilon: f64,
    /// One label per input fit, same order.
    pub labels: Vec<CategoryLabel>,
}

impl CategoryReport {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn count(&self, c: Category) -> usize {
        self.counts[c.index()]
    }

    pub fn fraction(&self, c: Category) -> f64 {
        self.fractions[c.index()]
    }
}

pub fn category_report(fits: &[TrajectoryFit], s_mean: f64, epsilon: f64) -> CategoryReport {
    let labels: Vec<CategoryLabel> = fits.iter().map(|f| classify_pair(f, s_mean, epsilon)).collect();
    let mut counts = [0usize; 4];
    for l in &labels {
        counts[l.category.index()] += 1;
    }
    let total = labels.len();
    let fractions = if total == 0 {
        [0.0; 4]
    } else {
        counts.map(|c| c as f64 / total as f64)
    };
    CategoryReport {
        counts,
        fractions,
        fall_through_count: labels.iter().filter(|l| l.fall_through).count(),
        s_mean,
        epsilon,
        labels,
    }
}

/// Mean fitted line of a group of fits, evaluated at each checkpoint.
/// `None` when the group is empty.
pub fn mean_fitted_curve<'a, I>(fits: I, checkpoints: &[usize]) -> Option<Vec<(f64, f64)>>
where
    I: IntoIterator<Item = &'a TrajectoryFit>,
{
    let (mut slope, mut intercept, mut count) = (0.0, 0.0, 0usize);
    for f in fits {
        slope += f.slope;
        intercept += f.intercept;
        count += 1;
    }
    if count == 0 {
        return None;
    }
    let (slope, intercept) = (slope / count as f64, intercept / count as f64);
    Some(
        checkpoints
            .iter()
            .map(|&k| (k as f64, slope * k as f64 + intercept))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snapshot::SimilarityMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cramer's rule on the raw (uncentred) 2x2 normal system.
    fn cramer_oracle(points: &[(f64, f64)]) -> (f64, f64) {
        let n = points.len() as f64;
        let sk: f64 = points.iter().map(|p| p.0).sum();
        let skk: f64 = points.iter().map(|p| p.0 * p.0).sum();
        let ss: f64 = points.iter().map(|p| p.1).sum();
        let sks: f64 = points.iter().map(|p| p.0 * p.1).sum();
        // [skk sk; sk n] [a; b] = [sks; ss]
        let det = skk * n - sk * sk;
        ((sks * n - sk * ss) / det, (skk * ss - sk * sks) / det)
    }

    #[test]
    fn collinear_points_recover_the_line() {
        let (a, b) = fit_trajectory(&[(0.0, 0.0), (5.0, 0.5), (10.0, 1.0)]).unwrap();
        assert_eq!(a, 0.1);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn constant_trajectory_is_flat() {
        for c in [0.1, -0.37, 0.9999, 1.0 / 3.0] {
            let (a, b) = fit_trajectory(&[(0.0, c), (5.0, c), (10.0, c)]).unwrap();
            assert_eq!(a, 0.0);
            assert_eq!(b, c);
        }
    }

    #[test]
    fn four_point_fixture_matches_cramer() {
        let pts = [(0.0, 0.1), (5.0, 0.9), (10.0, 0.2), (15.0, 0.8)];
        let (a, b) = fit_trajectory(&pts).unwrap();
        let (oa, ob) = cramer_oracle(&pts);
        assert!((a - oa).abs() < 1e-10 && (b - ob).abs() < 1e-10);
    }

    #[test]
    fn regression_errors() {
        assert!(matches!(fit_trajectory(&[(0.0, 1.0)]), Err(Error::InsufficientData(_))));
        assert!(matches!(
            fit_trajectory(&[(3.0, 1.0), (3.0, 2.0)]),
            Err(Error::DegenerateRegression)
        ));
    }

    #[test]
    fn approx_similarity_evaluates_the_line() {
        let fit = TrajectoryFit::from_line(0, 1, 0.1, 0.0, 80.0);
        assert_eq!(approx_similarity(&fit, 5.0), 0.5);
        assert_eq!(approx_similarity(&fit, 0.0), fit.intercept);
        assert_eq!(approx_similarity(&fit, 80.0), fit.fitted_end);
    }

    fn series_from(ks: &[usize], f: impl Fn(usize, usize, usize) -> f64, n: usize) -> SimilaritySeries {
        SimilaritySeries::new(
            ks.iter()
                .map(|&k| SimilarityMatrix {
                    checkpoint: k,
                    values: Array2::from_shape_fn((n, n), |(i, j)| f(k, i, j)),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn unchanged_matrices_give_zero_delta() {
        let series = series_from(&[0, 40], |_, i, j| 0.1 * i as f64 - 0.05 * j as f64, 4);
        let a = delta_matrix(&series).unwrap();
        assert!(a.delta.values().iter().all(|&d| d == 0.0));
        let m = &series.matrices()[0].values;
        let off: Vec<f64> = (0..4)
            .flat_map(|i| (0..4).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]])
            .collect();
        let want = off.iter().sum::<f64>() / off.len() as f64;
        assert!((a.s_mean - want).abs() < 1e-15);
    }

    #[test]
    fn single_linear_pair() {
        let ks: Vec<usize> = (0..=80).step_by(5).collect();
        let series = series_from(&ks, |k, i, j| if (i, j) == (1, 2) { 0.01 * k as f64 } else { 0.3 }, 3);
        let a = delta_matrix(&series).unwrap();
        assert!((a.delta.get(1, 2) - 0.8).abs() < 1e-12);
        assert_eq!(a.delta.get(2, 1), 0.0);
        assert_eq!(a.fits.len(), 6);
        assert_eq!(a.positive_fits.len(), 3);
    }

    #[test]
    fn delta_matches_per_pair_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ks = [0, 5, 10, 15, 20];
        let raw: Vec<Array2<f64>> = ks.iter().map(|_| Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0))).collect();
        let series = SimilaritySeries::new(
            ks.iter()
                .zip(&raw)
                .map(|(&k, m)| SimilarityMatrix { checkpoint: k, values: m.clone() })
                .collect(),
        )
        .unwrap();
        let a = delta_matrix(&series).unwrap();
        let mut ends = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    assert_eq!(a.delta.get(i, j), 0.0);
                    continue;
                }
                let pts: Vec<(f64, f64)> = ks.iter().zip(&raw).map(|(&k, m)| (k as f64, m[[i, j]])).collect();
                let (oa, ob) = cramer_oracle(&pts);
                assert!((a.delta.get(i, j) - oa * 20.0).abs() < 1e-10);
                ends.push(oa * 20.0 + ob);
            }
        }
        let brute = ends.iter().sum::<f64>() / ends.len() as f64;
        assert!((a.s_mean - brute).abs() < 1e-10);
        for f in &a.fits {
            assert_eq!(f.delta, f.slope * 20.0);
            assert_eq!(f.fitted_start, f.intercept);
        }
    }

    #[test]
    fn one_checkpoint_is_insufficient() {
        let series = series_from(&[0], |_, _, _| 0.5, 2);
        assert!(matches!(delta_matrix(&series), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn classification_fixtures() {
        let c = |end, delta, mean| classify(end, delta, mean, DEFAULT_EPSILON);
        assert_eq!(c(0.9, 0.05, 0.5).category, Category::HighToHigh);
        assert_eq!(c(0.1, -0.5, 0.5).category, Category::HighToLow);
        assert_eq!(c(0.8, 0.4, 0.5).category, Category::LowToHigh);
        assert_eq!(c(0.1, 0.01, 0.5).category, Category::LowToLow);
        let ft = c(0.3, 0.3, 0.5);
        assert_eq!(ft, CategoryLabel { category: Category::LowToLow, fall_through: true });
        let ft = c(0.8, -0.3, 0.5);
        assert_eq!(ft, CategoryLabel { category: Category::HighToHigh, fall_through: true });
        // boundaries: equal to the mean is low, |delta| == epsilon is stable
        assert_eq!(c(0.5, 0.2, 0.5).category, Category::LowToLow);
        assert!(!c(0.5, -0.2, 0.5).fall_through);
    }

    #[test]
    fn two_pair_report() {
        let fits = [
            TrajectoryFit::from_line(0, 1, 0.0, 0.2, 10.0),
            TrajectoryFit::from_line(1, 0, 0.0, 0.4, 10.0),
        ];
        let r = category_report(&fits, 0.3, DEFAULT_EPSILON);
        assert_eq!(r.count(Category::LowToLow), 1);
        assert_eq!(r.count(Category::HighToHigh), 1);
        assert_eq!(r.total(), 2);
        assert_eq!(r.fractions.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn zero_epsilon_leaves_almost_nothing_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fits: Vec<TrajectoryFit> = (0..500)
            .map(|n| TrajectoryFit::from_line(n, n + 1, rng.random_range(-0.02..0.02), rng.random_range(-1.0..1.0), 40.0))
            .collect();
        let r = category_report(&fits, 0.0, 0.0);
        let moving = fits.iter().zip(&r.labels).filter(|(f, l)| {
            l.fall_through || matches!(l.category, Category::HighToLow | Category::LowToHigh) || f.delta == 0.0
        });
        assert_eq!(moving.count(), fits.len());
    }

    #[test]
    fn mean_curve_of_empty_group_is_none() {
        assert!(mean_fitted_curve(std::iter::empty(), &[0, 5]).is_none());
        let fits = [
            TrajectoryFit::from_line(0, 1, 0.02, 0.1, 10.0),
            TrajectoryFit::from_line(1, 0, 0.0, 0.3, 10.0),
        ];
        let curve = mean_fitted_curve(&fits, &[0, 10]).unwrap();
        assert_eq!(curve[0], (0.0, 0.2));
        assert!((curve[1].1 - 0.3).abs() < 1e-15);
    }
}
