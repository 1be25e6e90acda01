//! Curriculum-based pair selection.
//!
//! Batches are grown greedily: a uniformly drawn seed pair, then repeatedly
//! the remaining candidate whose incremental score sits at the
//! `alpha`-quantile of all candidates. Low `alpha` favours negatives whose
//! similarity fell during reference training (easy); high `alpha` favours
//! negatives whose similarity rose (hard). A [`Schedule`] moves `alpha` from
//! 0 to 1 over the training epochs.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::DeltaMatrix;

/// One mini-batch of paired samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    /// Sum of `delta` over all ordered negative pairs in the batch.
    pub score: f64,
    pub seed_id: usize,
}

/// All batches of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPlan {
    pub epoch: usize,
    /// `None` for random (unscored) batching.
    pub alpha: Option<f64>,
    pub batches: Vec<Batch>,
    /// Seed the epoch was built with; not persisted in plan files.
    pub rng_seed: Option<u64>,
}

impl EpochPlan {
    /// Checks that the batches partition `0..n`.
    pub fn check_partition(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for b in &self.batches {
            for &id in &b.ids {
                if id >= n {
                    return Err(Error::IdOutOfRange { id, n });
                }
                if std::mem::replace(&mut seen[id], true) {
                    return Err(Error::Format(format!("epoch {}: id {id} appears twice", self.epoch)));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("epoch {}: id {missing} is never batched", self.epoch)));
        }
        Ok(())
    }

    pub fn mean_score(&self) -> f64 {
        if self.batches.is_empty() {
            return 0.0;
        }
        self.batches.iter().map(|b| b.score).sum::<f64>() / self.batches.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    /// Uniform shuffling; no scoring.
    Random,
    EasyOnly,
    HardOnly,
    Linear,
    Sqrt,
    Log,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Random => "random",
            ScheduleKind::EasyOnly => "easy",
            ScheduleKind::HardOnly => "hard",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Sqrt => "sqrt",
            ScheduleKind::Log => "log",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "random" => ScheduleKind::Random,
            "easy" | "easy_only" => ScheduleKind::EasyOnly,
            "hard" | "hard_only" => ScheduleKind::HardOnly,
            "linear" => ScheduleKind::Linear,
            "sqrt" => ScheduleKind::Sqrt,
            "log" => ScheduleKind::Log,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown schedule {other:?} (expected random, easy, hard, linear, sqrt or log)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub total_epochs: usize,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, total_epochs: usize) -> Self {
        Self { kind, total_epochs }
    }
}

/// Curriculum ratio at epoch `e`; `None` means selection is bypassed.
pub fn schedule_alpha(schedule: &Schedule, epoch: usize) -> Result<Option<f64>> {
    let total = schedule.total_epochs;
    if epoch > total {
        return Err(Error::EpochOutOfRange { epoch, total });
    }
    let progress = if total == 0 { 1.0 } else { epoch as f64 / total as f64 };
    let alpha = match schedule.kind {
        ScheduleKind::Random => return Ok(None),
        ScheduleKind::EasyOnly => 0.0,
        ScheduleKind::HardOnly => 1.0,
        ScheduleKind::Linear => progress,
        ScheduleKind::Sqrt => progress.sqrt(),
        ScheduleKind::Log => (1.0 + progress * (std::f64::consts::E - 1.0)).ln(),
    };
    Ok(Some(alpha.clamp(0.0, 1.0)))
}

fn check_id(id: usize, delta: &DeltaMatrix) -> Result<()> {
    if id < delta.n() {
        Ok(())
    } else {
        Err(Error::IdOutOfRange { id, n: delta.n() })
    }
}

/// Sum of `delta[i][j]` over ordered pairs `i != j` within `ids`.
pub fn batch_score(ids: &[usize], delta: &DeltaMatrix) -> Result<f64> {
    for &id in ids {
        check_id(id, delta)?;
    }
    let mut score = 0.0;
    for &i in ids {
        for &j in ids {
            if i != j {
                score += delta.get(i, j);
            }
        }
    }
    Ok(score)
}

/// Score increase from adding `candidate` to the batch `ids`.
pub fn incremental_score(candidate: usize, ids: &[usize], delta: &DeltaMatrix) -> Result<f64> {
    check_id(candidate, delta)?;
    let mut total = 0.0;
    for &i in ids {
        check_id(i, delta)?;
        if i == candidate {
            return Err(Error::DuplicateMember(candidate));
        }
        total += delta.get(i, candidate) + delta.get(candidate, i);
    }
    Ok(total)
}

/// Position `⌊alpha·(len − 1)⌋` in an ascending ordering of `len` candidates.
pub fn quantile_rank(len: usize, alpha: f64) -> usize {
    debug_assert!(len > 0);
    let r = (alpha * (len - 1) as f64).floor();
    (r.max(0.0) as usize).min(len - 1)
}

/// Orders by score, then by ascending id.
fn by_score_then_id(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn pick_at_rank(mut scored: Vec<(f64, usize)>, alpha: f64) -> usize {
    let r = quantile_rank(scored.len(), alpha);
    let (_, picked, _) = scored.select_nth_unstable_by(r, by_score_then_id);
    picked.1
}

/// Picks from `pool` the candidate at the `alpha`-quantile of incremental
/// score against `ids`. Recomputes every score from scratch.
pub fn select_by_score(pool: &[usize], ids: &[usize], delta: &DeltaMatrix, alpha: f64) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let scored = pool
        .iter()
        .map(|&u| incremental_score(u, ids, delta).map(|s| (s, u)))
        .collect::<Result<Vec<_>>>()?;
    Ok(pick_at_rank(scored, alpha))
}

/// How the next member of a batch is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Picker {
    Quantile(f64),
    Uniform,
}

/// Optional per-sample duplicate-group ids; samples sharing a group never
/// share a batch when set.
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchOptions<'a> {
    pub exclusive_groups: Option<&'a [usize]>,
}

/// Greedy batch construction over ids `0..delta.n()`.
///
/// Keeps a running incremental score per remaining candidate and updates it
/// in `O(pool)` per pick, so one epoch costs `O(N²)` besides selection.
pub fn build_batches<R: Rng + ?Sized>(
    delta: &DeltaMatrix,
    picker: Picker,
    batch_size: usize,
    rng: &mut R,
    options: BatchOptions<'_>,
) -> Result<Vec<Batch>> {
    let n = delta.n();
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if let Picker::Quantile(alpha) = picker {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
        }
    }
    if let Some(groups) = options.exclusive_groups {
        if groups.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} group ids for {n} samples",
                groups.len()
            )));
        }
    }

    let mut pool: Vec<usize> = (0..n).collect();
    let mut running = vec![0.0; n];
    let mut batches = Vec::with_capacity(n.div_ceil(batch_size));

    while !pool.is_empty() {
        let seed = pool.remove(rng.random_range(0..pool.len()));
        let mut ids = vec![seed];
        for &u in &pool {
            running[u] = delta.get(seed, u) + delta.get(u, seed);
        }
        while ids.len() < batch_size && !pool.is_empty() {
            let eligible: Vec<usize> = match options.exclusive_groups {
                Some(groups) => pool
                    .iter()
                    .copied()
                    .filter(|&u| ids.iter().all(|&m| groups[m] != groups[u]))
                    .collect(),
                None => pool.clone(),
            };
            if eligible.is_empty() {
                break;
            }
            let pick = match picker {
                Picker::Quantile(alpha) => pick_at_rank(eligible.iter().map(|&u| (running[u], u)).collect(), alpha),
                Picker::Uniform => eligible[rng.random_range(0..eligible.len())],
            };
            let at = pool.iter().position(|&u| u == pick).expect("pick comes from the pool");
            pool.remove(at);
            ids.push(pick);
            for &u in &pool {
                running[u] += delta.get(pick, u) + delta.get(u, pick);
            }
        }
        let score = batch_score(&ids, delta)?;
        batches.push(Batch { ids, score, seed_id: seed });
    }
    Ok(batches)
}

/// Per-epoch seed derived from the run seed (splitmix64 finaliser).
pub fn epoch_seed(base_seed: u64, epoch: usize) -> u64 {
    let mut z = base_seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One plan per epoch `0..E`, each rebuilt from its own seeded generator.
pub fn plan_epochs(
    schedule: &Schedule,
    delta: &DeltaMatrix,
    batch_size: usize,
    base_seed: u64,
    options: BatchOptions<'_>,
) -> Result<Vec<EpochPlan>> {
    (0..schedule.total_epochs)
        .map(|epoch| {
            let seed = epoch_seed(base_seed, epoch);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let alpha = schedule_alpha(schedule, epoch)?;
            let picker = alpha.map_or(Picker::Uniform, Picker::Quantile);
            let batches = build_batches(delta, picker, batch_size, &mut rng, options)?;
            Ok(EpochPlan { epoch, alpha, batches, rng_seed: Some(seed) })
        })
        .collect()
}

/// Uniformly shuffled size-`batch_size` batches without scores.
pub fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    ids.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Fractions of in-batch negatives whose `delta` is below `-epsilon`,
/// within `±epsilon`, and above `epsilon`.
pub fn negative_profile(plan: &EpochPlan, delta: &DeltaMatrix, epsilon: f64) -> [f64; 3] {
    let mut counts = [0usize; 3];
    for b in &plan.batches {
        for &i in &b.ids {
            for &j in &b.ids {
                if i == j {
                    continue;
                }
                let d = delta.get(i, j);
                let slot = if d < -epsilon {
                    0
                } else if d > epsilon {
                    2
                } else {
                    1
                };
                counts[slot] += 1;
            }
        }
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    counts.map(|c| c as f64 / total)
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanLine {
    epoch: usize,
    alpha: Option<f64>,
    batch_index: usize,
    ids: Vec<usize>,
    score: f64,
    seed_id: usize,
}

/// Writes plans as JSON lines, one batch per line.
pub fn write_plan(path: &Path, plans: &[EpochPlan]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for plan in plans {
        for (batch_index, b) in plan.batches.iter().enumerate() {
            let line = PlanLine {
                epoch: plan.epoch,
                alpha: plan.alpha,
                batch_index,
                ids: b.ids.clone(),
                score: b.score,
                seed_id: b.seed_id,
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| Error::Format(e.to_string()))?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_plan(path: &Path) -> Result<Vec<EpochPlan>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut plans: Vec<EpochPlan> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = format!("{}:{}", path.display(), lineno + 1);
        let rec: PlanLine = serde_json::from_str(&line).map_err(|e| Error::Format(format!("{at}: {e}")))?;
        if plans.last().map(|p| p.epoch) != Some(rec.epoch) {
            if rec.epoch != plans.len() {
                return Err(Error::Format(format!("{at}: expected epoch {}, found {}", plans.len(), rec.epoch)));
            }
            plans.push(EpochPlan { epoch: rec.epoch, alpha: rec.alpha, batches: Vec::new(), rng_seed: None });
        }
        let plan = plans.last_mut().unwrap();
        if rec.batch_index != plan.batches.len() {
            return Err(Error::Format(format!(
                "{at}: expected batch_index {}, found {}",
                plan.batches.len(),
                rec.batch_index
            )));
        }
        if rec.ids.is_empty() {
            return Err(Error::Format(format!("{at}: empty batch")));
        }
        plan.batches.push(Batch { ids: rec.ids, score: rec.score, seed_id: rec.seed_id });
    }
    Ok(plans)
}
