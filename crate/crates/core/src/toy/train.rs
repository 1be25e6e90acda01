//! Gradient-descent training loops for the reference and selective stages.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::selection::{epoch_seed, shuffled_batches, EpochPlan};
use crate::snapshot::{Aggregation, Modality, Snapshot, SnapshotSeries};
use crate::toy::data::ToyDataset;
use crate::toy::model::{encode, loss_and_grads, DualEncoder};

/// Mixed into the run seed for batch shuffling so it never collides with
/// the stream used for weight initialisation.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4521;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub checkpoint_interval: usize,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub embed_dim: usize,
    /// Skip updates to the text projection.
    pub freeze_text: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.05,
            checkpoint_interval: 5,
            aggregation: Aggregation::Mean,
            seed: 0,
            embed_dim: 8,
            freeze_text: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.checkpoint_interval == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidArgument(
                "batch size, checkpoint interval and embedding dim must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Checkpoint indices saved for a run: 0, every `interval` epochs, and `epochs`.
pub fn checkpoint_schedule(epochs: usize, interval: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (0..=epochs).step_by(interval.max(1)).collect();
    if ks.last() != Some(&epochs) {
        ks.push(epochs);
    }
    ks
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub alpha: Option<f64>,
    pub mean_batch_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub series: SnapshotSeries,
    pub encoder: DualEncoder,
    pub log: Vec<EpochLog>,
}

/// Embeds every sample with the current encoder.
pub fn take_snapshot(enc: &DualEncoder, data: &ToyDataset, checkpoint: usize) -> Result<Snapshot> {
    let video = (0..data.n())
        .map(|i| encode(enc, i, &data.video[i], Modality::Video))
        .collect::<Result<Vec<_>>>()?;
    let text = (0..data.n())
        .map(|i| encode(enc, i, &data.text[i], Modality::Text))
        .collect::<Result<Vec<_>>>()?;
    Snapshot::new(checkpoint, video, text)
}

fn check_encoder(enc: &DualEncoder, data: &ToyDataset) -> Result<()> {
    if enc.w_video.ncols() != data.dims.d_video || enc.w_text.ncols() != data.dims.d_text {
        return Err(Error::DimensionMismatch(format!(
            "encoder expects inputs {}/{} but data has {}/{}",
            enc.w_video.ncols(),
            enc.w_text.ncols(),
            data.dims.d_video,
            data.dims.d_text
        )));
    }
    Ok(())
}

struct EpochBatches {
    batches: Vec<Vec<usize>>,
    alpha: Option<f64>,
    mean_batch_score: Option<f64>,
}

fn run(
    data: &ToyDataset,
    cfg: &TrainConfig,
    init: Option<DualEncoder>,
    mut batches_for: impl FnMut(usize) -> EpochBatches,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.n() == 0 {
        return Err(Error::InsufficientData("dataset is empty".into()));
    }
    let mut enc = match init {
        Some(enc) => enc,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            DualEncoder::init(cfg.embed_dim, data.dims.d_video, data.dims.d_text, &mut rng)
        }
    };
    check_encoder(&enc, data)?;

    let checkpoints = checkpoint_schedule(cfg.epochs, cfg.checkpoint_interval);
    let mut snapshots = vec![take_snapshot(&enc, data, 0)?];
    let mut log = Vec::with_capacity(cfg.epochs);
    let lr = cfg.learning_rate;

    for epoch in 0..cfg.epochs {
        let EpochBatches { batches, alpha, mean_batch_score } = batches_for(epoch);
        let mut total = 0.0;
        for ids in &batches {
            let lg = loss_and_grads(&enc, ids, data, cfg.aggregation)?;
            if !lg.loss.is_finite() {
                return Err(Error::Divergence { epoch, loss: lg.loss });
            }
            total += lg.loss;
            enc.w_video.scaled_add(-lr, &lg.grad_video);
            if !cfg.freeze_text {
                enc.w_text.scaled_add(-lr, &lg.grad_text);
            }
            enc.log_tau -= lr * lg.grad_log_tau;
        }
        let loss = total / batches.len() as f64;
        if !loss.is_finite() || !enc.log_tau.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        log.push(EpochLog { epoch, loss, alpha, mean_batch_score });
        let completed = epoch + 1;
        if checkpoints.binary_search(&completed).is_ok() {
            snapshots.push(take_snapshot(&enc, data, completed)?);
        }
    }
    Ok(TrainOutcome {
        series: SnapshotSeries::new(snapshots, Some(cfg.aggregation))?,
        encoder: enc,
        log,
    })
}

/// Reference stage: uniformly shuffled batches each epoch.
pub fn train_reference(data: &ToyDataset, cfg: &TrainConfig, init: Option<DualEncoder>) -> Result<TrainOutcome> {
    let n = data.n();
    let (seed, batch_size) = (cfg.seed ^ SHUFFLE_STREAM, cfg.batch_size);
    run(data, cfg, init, |epoch| {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
        EpochBatches { batches: shuffled_batches(n, batch_size, &mut rng), alpha: None, mean_batch_score: None }
    })
}

/// Selective stage: batch composition comes from precomputed plans.
pub fn train_selective(
    data: &ToyDataset,
    cfg: &TrainConfig,
    plans: &[EpochPlan],
    init: Option<DualEncoder>,
) -> Result<TrainOutcome> {
    if plans.len() < cfg.epochs {
        return Err(Error::Format(format!(
            "plan covers {} epochs but training runs {}",
            plans.len(),
            cfg.epochs
        )));
    }
    for plan in &plans[..cfg.epochs] {
        plan.check_partition(data.n())?;
    }
    run(data, cfg, init, |epoch| {
        let plan = &plans[epoch];
        EpochBatches {
            batches: plan.batches.iter().map(|b| b.ids.clone()).collect(),
            alpha: plan.alpha,
            mean_batch_score: Some(plan.mean_score()),
        }
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with header `epoch,loss,alpha,mean_batch_score`; absent values are empty.
pub fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,loss,alpha,mean_batch_score\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch,
            row.loss,
            opt(row.alpha),
            opt(row.mean_batch_score)
        ));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("epoch,loss,alpha,mean_batch_score") {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let bad = || Error::Format(format!("{}: bad row {line:?}", path.display()));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let maybe = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad())
                }
            };
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                alpha: maybe(f[2])?,
                mean_batch_score: maybe(f[3])?,
            })
        })
        .collect()
}
