//! Dual linear encoder and the symmetric contrastive objective with exact
//! analytic gradients.
//!
//! Forward path per batch: token rows are projected by `w_video`/`w_text`,
//! collapsed to pair similarities by the chosen [`Aggregation`], divided by
//! the temperature `exp(log_tau)` and scored with a row-wise softmax
//! cross-entropy in both directions. The backward pass retraces the same
//! path; `max` in the token-level aggregation routes its gradient to the
//! first maximising token.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snapshot::{cosine_similarity, Aggregation, FeatureSequence, Modality};
use crate::toy::data::ToyDataset;

/// Conventional contrastive-learning initial temperature.
pub const INITIAL_TAU: f64 = 0.07;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEncoder {
    /// `d × d_video`
    pub w_video: Array2<f64>,
    /// `d × d_text`
    pub w_text: Array2<f64>,
    pub log_tau: f64,
}

impl DualEncoder {
    /// Gaussian weights with variance `1 / fan_in`; `tau = 0.07`.
    pub fn init<R: Rng + ?Sized>(embed_dim: usize, d_video: usize, d_text: usize, rng: &mut R) -> Self {
        let mut gaussian = |rows: usize, cols: usize| {
            let scale = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
        };
        let w_video = gaussian(embed_dim, d_video);
        let w_text = gaussian(embed_dim, d_text);
        Self { w_video, w_text, log_tau: INITIAL_TAU.ln() }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_video.nrows()
    }

    fn projection(&self, modality: Modality) -> &Array2<f64> {
        match modality {
            Modality::Video => &self.w_video,
            Modality::Text => &self.w_text,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("encoder serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let enc: Self = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if enc.w_video.nrows() != enc.w_text.nrows() || !enc.log_tau.is_finite() {
            return Err(Error::Format(format!("{}: inconsistent encoder parameters", path.display())));
        }
        Ok(enc)
    }
}

/// Projects every token row of `x` with the modality's weight matrix.
pub fn encode(enc: &DualEncoder, sample_id: usize, x: &Array2<f64>, modality: Modality) -> Result<FeatureSequence> {
    let w = enc.projection(modality);
    if x.ncols() != w.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{modality:?} input has {} columns, projection expects {}",
            x.ncols(),
            w.ncols()
        )));
    }
    FeatureSequence::new(sample_id, modality, x.dot(&w.t()))
}

fn check_square(m: &Array2<f64>, b: usize, what: &str) -> Result<()> {
    if m.nrows() != b || m.ncols() != b {
        return Err(Error::DimensionMismatch(format!(
            "{what} is {}x{}, expected {b}x{b}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Row-wise softmax of `logits` and the summed log-probability of the diagonal.
fn softmax_rows(logits: &Array2<f64>) -> (Array2<f64>, f64) {
    let mut probs = logits.clone();
    let mut diag_log_prob = 0.0;
    for (i, mut row) in probs.axis_iter_mut(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        diag_log_prob += row[i] - lse;
        row.mapv_inplace(|v| (v - lse).exp());
    }
    (probs, diag_log_prob)
}

/// Symmetric InfoNCE: mean over both directions of the cross-entropy of
/// each row's softmax against its diagonal entry.
pub fn contrastive_loss(s_v2t: &Array2<f64>, s_t2v: &Array2<f64>, tau: f64) -> Result<f64> {
    let b = s_v2t.nrows();
    if b == 0 {
        return Err(Error::InsufficientData("empty similarity matrix".into()));
    }
    check_square(s_v2t, b, "video-to-text similarities")?;
    check_square(s_t2v, b, "text-to-video similarities")?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let (_, lp1) = softmax_rows(&(s_v2t / tau));
    let (_, lp2) = softmax_rows(&(s_t2v / tau));
    Ok(-(lp1 + lp2) / (2.0 * b as f64))
}

/// Loss plus gradients with respect to every encoder parameter.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    pub grad_video: Array2<f64>,
    pub grad_text: Array2<f64>,
    pub grad_log_tau: f64,
    pub s_v2t: Array2<f64>,
    pub s_t2v: Array2<f64>,
}

/// Gradient of `cos(u, v)` with respect to `u` and `v`.
fn cosine_grads(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    let c = cosine_similarity(u, v)?;
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    let du = &v / (nu * nv) - &u * (c / (nu * nu));
    let dv = &u / (nu * nv) - &v * (c / (nv * nv));
    Ok((c, du, dv))
}

fn pooled(tokens: &Array2<f64>, mode: Aggregation) -> Array1<f64> {
    match mode {
        Aggregation::Cls => tokens.row(0).to_owned(),
        _ => tokens.mean_axis(Axis(0)).expect("nonempty sequence"),
    }
}

/// Adds `grad` (w.r.t. the pooled vector) back onto the token rows.
fn unpool(dst: &mut Array2<f64>, grad: &Array1<f64>, mode: Aggregation) {
    match mode {
        Aggregation::Cls => {
            let mut row = dst.row_mut(0);
            row += grad;
        }
        _ => {
            let scaled = grad / dst.nrows() as f64;
            for mut row in dst.rows_mut() {
                row += &scaled;
            }
        }
    }
}

/// Index and value of the best cosine of `row` against the rows of `others`.
fn best_match(row: ArrayView1<f64>, others: &Array2<f64>) -> Result<(usize, f64)> {
    let mut best = (0, f64::NEG_INFINITY);
    for (idx, other) in others.rows().into_iter().enumerate() {
        let c = cosine_similarity(row, other)?;
        if c > best.1 {
            best = (idx, c);
        }
    }
    Ok(best)
}

/// Accumulates the gradient of one directional max-then-mean score.
fn cico_backward(
    from: &Array2<f64>,
    to: &Array2<f64>,
    g: f64,
    d_from: &mut Array2<f64>,
    d_to: &mut Array2<f64>,
) -> Result<()> {
    let scale = g / from.nrows() as f64;
    for (a, row) in from.rows().into_iter().enumerate() {
        let (b, _) = best_match(row, to)?;
        let (_, du, dv) = cosine_grads(row, to.row(b))?;
        let mut ra = d_from.row_mut(a);
        ra.scaled_add(scale, &du);
        let mut rb = d_to.row_mut(b);
        rb.scaled_add(scale, &dv);
    }
    Ok(())
}

fn cico_forward(from: &Array2<f64>, to: &Array2<f64>) -> Result<f64> {
    let mut total = 0.0;
    for row in from.rows() {
        total += best_match(row, to)?.1;
    }
    Ok(total / from.nrows() as f64)
}

/// Forward and backward pass of the contrastive loss on one batch.
///
/// For `cls`/`mean` the text-to-video matrix is the transpose of the
/// video-to-text one; for `cico` each direction is its own asymmetric
/// max-then-mean score.
pub fn loss_and_grads(enc: &DualEncoder, ids: &[usize], data: &ToyDataset, mode: Aggregation) -> Result<LossGrads> {
    let b = ids.len();
    if b == 0 {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    for &id in ids {
        if id >= data.n() {
            return Err(Error::IdOutOfRange { id, n: data.n() });
        }
    }
    let degenerate = |e: Error, i: usize, j: usize| match e {
        Error::DegenerateEmbedding(msg) => {
            Error::DegenerateEmbedding(format!("batch pair ({}, {}): {msg}", ids[i], ids[j]))
        }
        other => other,
    };

    let video: Vec<Array2<f64>> = ids
        .iter()
        .map(|&id| encode(enc, id, &data.video[id], Modality::Video).map(|s| s.features))
        .collect::<Result<_>>()?;
    let text: Vec<Array2<f64>> = ids
        .iter()
        .map(|&id| encode(enc, id, &data.text[id], Modality::Text).map(|s| s.features))
        .collect::<Result<_>>()?;

    let mut s_v2t = Array2::zeros((b, b));
    let mut s_t2v = Array2::zeros((b, b));
    match mode {
        Aggregation::Cls | Aggregation::Mean => {
            let pv: Vec<Array1<f64>> = video.iter().map(|m| pooled(m, mode)).collect();
            let pt: Vec<Array1<f64>> = text.iter().map(|m| pooled(m, mode)).collect();
            for i in 0..b {
                for j in 0..b {
                    s_v2t[[i, j]] = cosine_similarity(pv[i].view(), pt[j].view()).map_err(|e| degenerate(e, i, j))?;
                }
            }
            s_t2v.assign(&s_v2t.t());
        }
        Aggregation::Cico => {
            for i in 0..b {
                for j in 0..b {
                    s_v2t[[i, j]] = cico_forward(&video[i], &text[j]).map_err(|e| degenerate(e, i, j))?;
                    // text i against video j
                    s_t2v[[i, j]] = cico_forward(&text[i], &video[j]).map_err(|e| degenerate(e, j, i))?;
                }
            }
        }
    }

    let tau = enc.tau();
    let z1 = &s_v2t / tau;
    let z2 = &s_t2v / tau;
    let (p1, lp1) = softmax_rows(&z1);
    let (p2, lp2) = softmax_rows(&z2);
    let norm = 2.0 * b as f64;
    let loss = -(lp1 + lp2) / norm;

    // dL/dZ = (P - I) / 2B
    let eye = Array2::<f64>::eye(b);
    let dz1 = (&p1 - &eye) / norm;
    let dz2 = (&p2 - &eye) / norm;
    let grad_log_tau = -((&dz1 * &z1).sum() + (&dz2 * &z2).sum());
    let ds1 = &dz1 / tau;
    let ds2 = &dz2 / tau;

    let mut d_video: Vec<Array2<f64>> = video.iter().map(|m| Array2::zeros(m.raw_dim())).collect();
    let mut d_text: Vec<Array2<f64>> = text.iter().map(|m| Array2::zeros(m.raw_dim())).collect();
    match mode {
        Aggregation::Cls | Aggregation::Mean => {
            let pv: Vec<Array1<f64>> = video.iter().map(|m| pooled(m, mode)).collect();
            let pt: Vec<Array1<f64>> = text.iter().map(|m| pooled(m, mode)).collect();
            let mut dpv: Vec<Array1<f64>> = pv.iter().map(|p| Array1::zeros(p.len())).collect();
            let mut dpt: Vec<Array1<f64>> = pt.iter().map(|p| Array1::zeros(p.len())).collect();
            for i in 0..b {
                for j in 0..b {
                    let g = ds1[[i, j]] + ds2[[j, i]];
                    let (_, du, dv) = cosine_grads(pv[i].view(), pt[j].view())?;
                    dpv[i].scaled_add(g, &du);
                    dpt[j].scaled_add(g, &dv);
                }
            }
            for i in 0..b {
                unpool(&mut d_video[i], &dpv[i], mode);
                unpool(&mut d_text[i], &dpt[i], mode);
            }
        }
        Aggregation::Cico => {
            for i in 0..b {
                for j in 0..b {
                    cico_backward(&video[i], &text[j], ds1[[i, j]], &mut d_video[i], &mut d_text[j])?;
                    cico_backward(&text[i], &video[j], ds2[[i, j]], &mut d_text[i], &mut d_video[j])?;
                }
            }
        }
    }

    let mut grad_video = Array2::zeros(enc.w_video.raw_dim());
    let mut grad_text = Array2::zeros(enc.w_text.raw_dim());
    for (k, &id) in ids.iter().enumerate() {
        grad_video += &d_video[k].t().dot(&data.video[id]);
        grad_text += &d_text[k].t().dot(&data.text[id]);
    }
    Ok(LossGrads { loss, grad_video, grad_text, grad_log_tau, s_v2t, s_t2v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::data::{generate_synthetic, GroupSpec, ToyDims};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_projection_is_a_no_op() {
        let enc = DualEncoder { w_video: Array2::eye(3), w_text: Array2::eye(3), log_tau: 0.0 };
        let x = array![[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]];
        assert_eq!(encode(&enc, 0, &x, Modality::Video).unwrap().features, x);
        let z = Array2::zeros((2, 3));
        let out = encode(&enc, 0, &z, Modality::Text).unwrap();
        assert!(out.features.iter().all(|&v| v == 0.0));
        assert!(matches!(
            encode(&enc, 0, &Array2::zeros((2, 4)), Modality::Text),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn encode_matches_schoolbook_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = DualEncoder::init(5, 3, 4, &mut rng);
        let x = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        let out = encode(&enc, 0, &x, Modality::Video).unwrap().features;
        for t in 0..2 {
            for r in 0..5 {
                let mut acc = 0.0;
                for c in 0..3 {
                    acc += enc.w_video[[r, c]] * x[[t, c]];
                }
                assert!((out[[t, r]] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn loss_fixtures() {
        let one = array![[0.3]];
        assert_eq!(contrastive_loss(&one, &one, 0.07).unwrap(), 0.0);
        let flat = Array2::from_elem((5, 5), 0.4);
        assert!((contrastive_loss(&flat, &flat, 0.07).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(contrastive_loss(&flat, &Array2::zeros((4, 4)), 0.07).is_err());
        assert!(contrastive_loss(&flat, &flat, 0.0).is_err());
        assert!(contrastive_loss(&Array2::zeros((2, 3)), &Array2::zeros((2, 3)), 1.0).is_err());
    }

    #[test]
    fn loss_matches_direct_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let s1 = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
            let s2 = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
            let tau: f64 = 0.07;
            let mut total = 0.0;
            for m in [&s1, &s2] {
                for i in 0..4 {
                    let denom: f64 = (0..4).map(|k| (m[[i, k]] / tau).exp()).sum();
                    total += ((m[[i, i]] / tau).exp() / denom).ln();
                }
            }
            let want = -total / 8.0;
            let got = contrastive_loss(&s1, &s2, tau).unwrap();
            assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    fn small_problem(seed: u64) -> (DualEncoder, ToyDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims: ToyDims = "3,2,2,3".parse().unwrap();
        let data = generate_synthetic(5, dims, &GroupSpec::singletons(5), 0.3, seed).unwrap();
        let mut enc = DualEncoder::init(4, 3, 2, &mut rng);
        enc.log_tau = rng.random_range(-1.5..0.0);
        (enc, data)
    }

    #[test]
    fn loss_is_consistent_with_similarity_matrices() {
        let (enc, data) = small_problem(1);
        for mode in Aggregation::ALL {
            let lg = loss_and_grads(&enc, &[0, 2, 4], &data, mode).unwrap();
            let direct = contrastive_loss(&lg.s_v2t, &lg.s_t2v, enc.tau()).unwrap();
            assert!((lg.loss - direct).abs() < 1e-13);
            if mode != Aggregation::Cico {
                assert_eq!(lg.s_t2v, lg.s_v2t.t());
            }
        }
    }

    #[test]
    fn temperature_stationary_point_has_zero_gradient() {
        // mostly aligned pairs, but sample 3's video copies sample 0's text,
        // so the loss is bounded below along log_tau with an interior minimum
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let text: Vec<Array2<f64>> = (0..4)
            .map(|_| Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let mut video: Vec<Array2<f64>> = text.iter().map(|t| t.mapv(|v| v + 0.05)).collect();
        video[3] = text[0].clone();
        let dims = ToyDims { d_video: 3, d_text: 3, t_video: 2, t_text: 2 };
        let data = ToyDataset { dims, video, text, groups: vec![0, 1, 2, 3] };
        let mut enc = DualEncoder::init(3, 3, 3, &mut rng);
        enc.w_text = enc.w_video.clone();
        let ids = [0, 1, 2, 3];
        let grad = |enc: &DualEncoder| loss_and_grads(enc, &ids, &data, Aggregation::Mean).unwrap().grad_log_tau;
        // convex in 1/tau: the gradient changes sign once, so bisect
        let (mut lo, mut hi) = (-8.0, 4.0);
        enc.log_tau = lo;
        assert!(grad(&enc) < 0.0);
        enc.log_tau = hi;
        assert!(grad(&enc) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            enc.log_tau = mid;
            if grad(&enc) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        enc.log_tau = 0.5 * (lo + hi);
        assert!(grad(&enc).abs() < 1e-9, "{} at {}", grad(&enc), enc.log_tau);
    }

    #[test]
    fn doubling_tau_equals_halving_similarities() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s1 = Array2::from_shape_fn((5, 5), |_| rng.random_range(-1.0..1.0));
        let s2 = Array2::from_shape_fn((5, 5), |_| rng.random_range(-1.0..1.0));
        let a = contrastive_loss(&s1, &s2, 0.14).unwrap();
        let b = contrastive_loss(&(&s1 / 2.0), &(&s2 / 2.0), 0.07).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn save_and_load_encoder() {
        let (enc, _) = small_problem(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("encoder.json");
        enc.save(&path).unwrap();
        assert_eq!(DualEncoder::load(&path).unwrap(), enc);
    }
}
