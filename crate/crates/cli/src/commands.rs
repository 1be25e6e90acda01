use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use scl_core::matfile;
use scl_core::report::{self, AnalysisSummary};
use scl_core::selection::{self, negative_profile, BatchOptions, Schedule};
use scl_core::snapshot::{self, Aggregation};
use scl_core::toy::{self, DualEncoder, GroupSpec, TrainConfig, TrainOutcome};
use scl_core::trajectory::{self, category_report, DeltaMatrix, TrajectoryFit};

use crate::args::*;

macro_rules! progress {
    ($verbose:expr, $($arg:tt)*) => {
        if $verbose {
            eprintln!($($arg)*);
        }
    };
}

pub fn run(cli: &Cli) -> Result<()> {
    let (seed, verbose) = (cli.seed, cli.verbose);
    match &cli.command {
        Command::GenData(a) => gen_data(&a.spec, seed, &a.out, verbose).context("gen-data"),
        Command::TrainRef(a) => train_ref(a, seed, verbose).context("train-ref"),
        Command::Analyze(a) => analyze(a, verbose).context("analyze"),
        Command::BuildBatches(a) => build_batches(a, seed, verbose).context("build-batches"),
        Command::TrainScl(a) => train_scl(a, seed, verbose).context("train-scl"),
        Command::Report(a) => report_cmd(a, verbose).context("report"),
        Command::Pipeline(a) => pipeline(a, seed, verbose),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| scl_core::Error::io(dir, e))?;
    Ok(())
}

fn gen_data(spec: &DataSpec, seed: u64, out: &Path, verbose: bool) -> Result<()> {
    let groups = spec.groups.clone().unwrap_or_else(|| GroupSpec::singletons(spec.n));
    let data = toy::generate_synthetic(spec.n, spec.dims, &groups, spec.noise, seed)?;
    toy::write_dataset(&data, out)?;
    progress!(verbose, "gen-data: {} samples, groups {groups}, written to {}", data.n(), out.display());
    Ok(())
}

fn train_config(model: &ModelArgs, epochs: usize, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        learning_rate: model.lr,
        checkpoint_interval: model.interval,
        aggregation: model.mode,
        seed,
        embed_dim: model.embed_dim,
        freeze_text: model.freeze_text,
    }
}

fn load_init(dir: Option<&PathBuf>) -> Result<Option<DualEncoder>> {
    dir.map(|d| DualEncoder::load(&d.join("encoder.json")).map_err(Into::into)).transpose()
}

fn save_outcome(outcome: &TrainOutcome, out: &Path) -> Result<()> {
    snapshot::write_series(&outcome.series, out)?;
    outcome.encoder.save(&out.join("encoder.json"))?;
    toy::write_loss_log(&out.join("loss.csv"), &outcome.log)?;
    Ok(())
}

fn log_training(verbose: bool, stage: &str, outcome: &TrainOutcome) {
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        progress!(
            verbose,
            "{stage}: loss {:.4} -> {:.4} over {} epochs, tau {:.4}, checkpoints {:?}",
            first.loss,
            last.loss,
            outcome.log.len(),
            outcome.encoder.tau(),
            outcome.series.checkpoints()
        );
    }
}

fn train_ref(a: &TrainArgs, seed: u64, verbose: bool) -> Result<()> {
    let data = toy::read_dataset(&a.data)?;
    let cfg = train_config(&a.model, a.epochs, a.batch_size, seed);
    let outcome = toy::train_reference(&data, &cfg, load_init(a.init_from.as_ref())?)?;
    save_outcome(&outcome, &a.out)?;
    log_training(verbose, "train-ref", &outcome);
    Ok(())
}

fn analyze(a: &AnalyzeArgs, verbose: bool) -> Result<()> {
    if a.epsilon.is_nan() || a.epsilon < 0.0 {
        return Err(scl_core::Error::InvalidArgument(format!("epsilon must be non-negative, got {}", a.epsilon)).into());
    }
    let store = snapshot::read_store(&a.snapshots)?;
    let aggregation = match &store {
        snapshot::SeriesStore::Embeddings(s) => Some(a.mode.or(s.aggregation).unwrap_or(Aggregation::Mean)),
        snapshot::SeriesStore::Similarity { aggregation, .. } => *aggregation,
    };
    let mut series = store.similarities(aggregation)?;
    if let Some(stride) = a.stride {
        series = series.subsample(stride)?;
    }
    let analysis = trajectory::delta_matrix(&series)?;
    let report = category_report(&analysis.fits, analysis.s_mean, a.epsilon);
    report::write_analysis(&a.out, &analysis, &report, aggregation)?;
    progress!(
        verbose,
        "analyze: N = {}, checkpoints {:?}, s_mean = {:.4}, HL/LL/HH/LH = {:?}, fall-through {}",
        analysis.delta.n(),
        analysis.checkpoints,
        analysis.s_mean,
        report.counts,
        report.fall_through_count
    );
    Ok(())
}

fn build_batches(a: &BuildBatchesArgs, seed: u64, verbose: bool) -> Result<()> {
    let delta = DeltaMatrix::new(matfile::read_square(&a.delta)?)?;
    let groups = if a.exclude_duplicate_texts {
        let dir = a.data.as_ref().ok_or_else(|| {
            scl_core::Error::InvalidArgument("--exclude-duplicate-texts needs --data for group ids".into())
        })?;
        Some(toy::read_dataset(dir)?.groups)
    } else {
        None
    };
    let schedule = Schedule::new(a.schedule.schedule, a.schedule.epochs);
    let plans = selection::plan_epochs(
        &schedule,
        &delta,
        a.batch_size,
        seed,
        BatchOptions { exclusive_groups: groups.as_deref() },
    )?;
    selection::write_plan(&a.out, &plans)?;
    if verbose {
        for plan in &plans {
            let [dec, stable, inc] = negative_profile(plan, &delta, a.epsilon);
            eprintln!(
                "build-batches: epoch {:>3} alpha {:>6} mean score {:>9.4} negatives falling/stable/rising {:.2}/{:.2}/{:.2}",
                plan.epoch,
                plan.alpha.map_or("-".to_string(), |x| format!("{x:.3}")),
                plan.mean_score(),
                dec,
                stable,
                inc
            );
        }
    }
    Ok(())
}

fn train_scl(a: &TrainSclArgs, seed: u64, verbose: bool) -> Result<()> {
    let data = toy::read_dataset(&a.data)?;
    let plans = selection::read_plan(&a.plan)?;
    let cfg = train_config(&a.model, a.epochs.unwrap_or(plans.len()), a.batch_size, seed);
    let outcome = toy::train_selective(&data, &cfg, &plans, load_init(a.init_from.as_ref())?)?;
    save_outcome(&outcome, &a.out)?;
    log_training(verbose, "train-scl", &outcome);
    Ok(())
}

fn report_cmd(a: &ReportArgs, verbose: bool) -> Result<()> {
    let summary: AnalysisSummary = report::read_summary(&a.analysis.join("analysis.json"))?;
    let rows = report::read_fits(&a.analysis.join("fits.csv"))?;
    let final_k = *summary.checkpoints.last().unwrap_or(&0);
    let fits: Vec<TrajectoryFit> = rows.iter().map(|r| r.to_fit(final_k)).collect();
    let report = category_report(&fits, summary.s_mean, summary.epsilon);

    create_dir(&a.out)?;
    report::write_report(&a.out.join("report.csv"), &report)?;
    let curves = report::category_curves(fits.iter().zip(&report.labels), &summary.checkpoints);
    report::write_text(&a.out.join("trajectories.svg"), &report::trajectories_svg(&curves))?;
    let schedule = Schedule::new(a.schedule.schedule, a.schedule.epochs);
    report::write_text(&a.out.join("schedule.svg"), &report::schedule_svg(&schedule)?)?;

    let logs = a
        .loss
        .iter()
        .map(|p| Ok((log_name(p), toy::read_loss_log(p)?)))
        .collect::<Result<Vec<_>>>()?;
    if !logs.is_empty() {
        let refs: Vec<(&str, &[toy::EpochLog])> = logs.iter().map(|(n, l)| (n.as_str(), l.as_slice())).collect();
        report::write_text(&a.out.join("loss.svg"), &report::loss_svg(&refs))?;
    }
    progress!(verbose, "report: wrote {} ({} loss logs)", a.out.display(), logs.len());
    Ok(())
}

/// Names a loss log after its parent directory.
fn log_name(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub struct PipelineLayout {
    pub data: PathBuf,
    pub reference: PathBuf,
    pub analysis: PathBuf,
    pub plan: PathBuf,
    pub selective: PathBuf,
    pub report: PathBuf,
}

impl PipelineLayout {
    pub fn new(root: &Path) -> Self {
        Self {
            data: root.join("data"),
            reference: root.join("reference"),
            analysis: root.join("analysis"),
            plan: root.join("plan.jsonl"),
            selective: root.join("selective"),
            report: root.join("report"),
        }
    }
}

fn pipeline(a: &PipelineArgs, seed: u64, verbose: bool) -> Result<()> {
    let layout = PipelineLayout::new(&a.out);
    create_dir(&a.out).context("pipeline setup")?;

    gen_data(&a.spec, seed, &layout.data, verbose).context("gen-data")?;

    train_ref(
        &TrainArgs {
            data: layout.data.clone(),
            epochs: a.epochs,
            batch_size: a.ref_batch_size,
            model: a.model.clone(),
            init_from: None,
            out: layout.reference.clone(),
        },
        seed,
        verbose,
    )
    .context("train-ref")?;

    analyze(
        &AnalyzeArgs {
            snapshots: layout.reference.clone(),
            mode: Some(a.model.mode),
            epsilon: a.epsilon,
            stride: None,
            out: layout.analysis.clone(),
        },
        verbose,
    )
    .context("analyze")?;

    let schedule = ScheduleArgs { schedule: a.schedule, epochs: a.epochs };
    build_batches(
        &BuildBatchesArgs {
            delta: layout.analysis.join("delta.mat"),
            schedule: schedule.clone(),
            batch_size: a.scl_batch_size,
            epsilon: a.epsilon,
            exclude_duplicate_texts: a.exclude_duplicate_texts,
            data: Some(layout.data.clone()),
            out: layout.plan.clone(),
        },
        seed,
        verbose,
    )
    .context("build-batches")?;

    train_scl(
        &TrainSclArgs {
            data: layout.data.clone(),
            plan: layout.plan.clone(),
            epochs: Some(a.epochs),
            batch_size: a.scl_batch_size,
            model: a.model.clone(),
            init_from: a.continue_from_reference.then(|| layout.reference.clone()),
            out: layout.selective.clone(),
        },
        seed,
        verbose,
    )
    .context("train-scl")?;

    report_cmd(
        &ReportArgs {
            analysis: layout.analysis.clone(),
            schedule,
            loss: vec![layout.reference.join("loss.csv"), layout.selective.join("loss.csv")],
            out: layout.report.clone(),
        },
        verbose,
    )
    .context("report")?;

    progress!(verbose, "pipeline: outputs under {}", a.out.display());
    Ok(())
}
