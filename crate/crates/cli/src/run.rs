//! The train and alpha-sweep commands: data loading, per-seed runs,
//! telemetry files, and aggregate summaries.

use crate::config::{RunConfig, Task};
use anyhow::{bail, Context};
use crfscale_core::data::{
    cached_synth_sequences, cached_synth_segmentation, load_taskar_ocr, save_segmentation_dataset,
    save_sequence_dataset, synth_segmentation, synth_sequences, SegmentationDataset,
    SequenceDataset, SynthSegParams, SynthSeqParams,
};
use crfscale_core::scaling::{ScalingMode, ScalingState};
use crfscale_core::training::{
    evaluate, save_checkpoint, train_joint, train_stage, ChainModel, Checkpoint, GcrfModel,
    ModelKind, StageConfig, StageSchedule, TrainOutcome, TrainTelemetry, TrainableModel,
};
use serde::Serialize;
use std::path::Path;
use std::time::Instant;

/// Telemetry column set; the seconds column is the only one that varies
/// between identical runs.
pub const TELEMETRY_HEADER: &str = "epoch,train_loss,val_metric,ratio,alpha,lr,seconds";

/// Training and validation splits for whichever task the config names.
pub enum TaskData {
    Chain {
        train: SequenceDataset,
        val: SequenceDataset,
    },
    Seg {
        train: SegmentationDataset,
        val: SegmentationDataset,
    },
}

fn split_sequences(dataset: SequenceDataset, fraction: f64) -> anyhow::Result<(SequenceDataset, SequenceDataset)> {
    let n = dataset.instances.len();
    let n_train = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 {
        bail!("need at least 2 instances to split, got {n}");
    }
    let mut train = dataset.clone();
    let mut val = dataset;
    val.instances = train.instances.split_off(n_train);
    Ok((train, val))
}

fn split_segmentation(
    dataset: SegmentationDataset,
    fraction: f64,
) -> anyhow::Result<(SegmentationDataset, SegmentationDataset)> {
    let n = dataset.instances.len();
    let n_train = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 {
        bail!("need at least 2 instances to split, got {n}");
    }
    let mut train = dataset.clone();
    let mut val = dataset;
    val.instances = train.instances.split_off(n_train);
    Ok((train, val))
}

pub fn load_task_data(config: &RunConfig) -> anyhow::Result<TaskData> {
    match config.task {
        Task::Ocr => {
            let path = config.data.path.as_ref().expect("validated");
            let full = load_taskar_ocr(path)?;
            let train = full.subset_by_fold(&config.data.train_folds);
            let val = full.subset_by_fold(&config.data.val_folds);
            if train.instances.is_empty() || val.instances.is_empty() {
                bail!("fold selection produced an empty split");
            }
            Ok(TaskData::Chain { train, val })
        }
        Task::SynthSeq => {
            let params = SynthSeqParams {
                seed: config.data.seed,
                count: config.data.count,
                min_len: config.data.min_len,
                max_len: config.data.max_len,
                num_labels: config.data.num_labels,
                feature_dim: config.data.feature_dim,
                unary_snr: config.data.unary_snr,
                transition_strength: config.data.transition_strength,
            };
            let full = match &config.data.cache_dir {
                Some(dir) => cached_synth_sequences(dir, &params)?,
                None => synth_sequences(&params)?,
            };
            let (train, val) = split_sequences(full, config.data.train_fraction)?;
            Ok(TaskData::Chain { train, val })
        }
        Task::SynthSeg => {
            let params = SynthSegParams {
                seed: config.data.seed,
                count: config.data.count,
                height: config.data.height,
                width: config.data.width,
                feature_dim: config.data.feature_dim,
                snr: config.data.snr,
            };
            let full = match &config.data.cache_dir {
                Some(dir) => cached_synth_segmentation(dir, &params)?,
                None => synth_segmentation(&params)?,
            };
            let (train, val) = split_segmentation(full, config.data.train_fraction)?;
            Ok(TaskData::Seg { train, val })
        }
    }
}

fn format_float(value: f64) -> String {
    // The shortest round-trip representation keeps telemetry byte-stable
    // across identical runs.
    format!("{value}")
}

/// Writes one CSV with the pinned header, a row per epoch, and a comment
/// marker line before each stage boundary.
pub fn write_telemetry(path: &Path, telemetry: &TrainTelemetry) -> anyhow::Result<()> {
    let mut out = String::new();
    out.push_str(TELEMETRY_HEADER);
    out.push('\n');
    for (i, rec) in telemetry.records.iter().enumerate() {
        if telemetry.stage_boundaries.contains(&i) {
            out.push_str(&format!("# stage boundary: epoch {}\n", rec.epoch));
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            rec.epoch,
            format_float(rec.train_loss),
            format_float(rec.val_metric),
            format_float(rec.ratio),
            format_float(rec.alpha),
            format_float(rec.learning_rate),
            format_float(rec.seconds),
        ));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub failed: bool,
    pub error: Option<String>,
    pub final_metric: Option<f64>,
    pub final_alpha: Option<f64>,
    pub telemetry: Option<String>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub task: String,
    pub objective: String,
    pub scaling_mode: String,
    pub schedule: String,
    pub seeds: Vec<SeedSummary>,
    pub mean_metric: Option<f64>,
    pub std_metric: Option<f64>,
    pub failed_seeds: usize,
    pub wall_clock_minutes: f64,
    pub stage_boundaries: Vec<usize>,
}

/// Mean and sample standard deviation; the deviation is 0 for a single
/// value and None for none.
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (Some(mean), Some(0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

fn scaling_mode_name(mode: ScalingMode) -> String {
    match mode {
        ScalingMode::None => "none",
        ScalingMode::Online => "online",
        ScalingMode::Offline => "offline",
        ScalingMode::OfflineReg => "offline_reg",
        ScalingMode::Temperature => "temperature",
    }
    .to_string()
}

struct SeedRun {
    outcome: crfscale_core::Result<(TrainOutcome, ModelKind, f64)>,
}

/// Trains one seed and reports the final validation metric; training
/// errors (divergence included) are captured, not propagated.
fn run_seed(
    config: &RunConfig,
    data: &TaskData,
    seed: u64,
    scaling_override: Option<&ScalingState>,
) -> SeedRun {
    let result = (|| {
        let mut train_config = config.train_config(seed).expect("validated");
        if let Some(scaling) = scaling_override {
            train_config.scaling = scaling.clone();
        }
        match data {
            TaskData::Chain { train, val } => {
                let spec = config.chain_spec(train.feature_dim, train.num_labels);
                let mut model = ChainModel::with_unary_gain(&spec, seed, config.model.unary_gain)?;
                if config.model.unary_pretrain_epochs > 0 {
                    let schedule = pretrain_schedule(config, seed);
                    train_stage(&mut model, &train.instances, &val.instances, &schedule)?;
                }
                let train_insts = scaled_sequences(&train.instances, config.data.feature_scale);
                let val_insts = scaled_sequences(&val.instances, config.data.feature_scale);
                scale_param_segment(&mut model, "pairwise", config.model.pairwise_scale)?;
                let outcome = if config.is_stagewise() {
                    let mut schedule = config.stage_schedule(seed).expect("validated");
                    if let Some(scaling) = scaling_override {
                        schedule.base.scaling = scaling.clone();
                    }
                    train_stage(&mut model, &train_insts, &val_insts, &schedule)?
                } else {
                    train_joint(&mut model, &train_insts, &val_insts, &train_config)?
                };
                let final_metric = match outcome.telemetry.records.last() {
                    Some(rec) => rec.val_metric,
                    None => evaluate(&model, &val_insts, train_config.objective, &outcome.scaling)?,
                };
                Ok((outcome, ModelKind::Chain(model), final_metric))
            }
            TaskData::Seg { train, val } => {
                let (unary_spec, embed_spec) = config.gcrf_specs(train.feature_dim);
                let mut model = GcrfModel::with_unary_gain(
                    &unary_spec,
                    &embed_spec,
                    config.model.lambda,
                    seed,
                    config.model.unary_gain,
                )?;
                if config.model.unary_pretrain_epochs > 0 {
                    let schedule = pretrain_schedule(config, seed);
                    train_stage(&mut model, &train.instances, &val.instances, &schedule)?;
                }
                let train_insts = scaled_segmentations(&train.instances, config.data.feature_scale);
                let val_insts = scaled_segmentations(&val.instances, config.data.feature_scale);
                let outcome = if config.is_stagewise() {
                    let mut schedule = config.stage_schedule(seed).expect("validated");
                    if let Some(scaling) = scaling_override {
                        schedule.base.scaling = scaling.clone();
                    }
                    train_stage(&mut model, &train_insts, &val_insts, &schedule)?
                } else {
                    train_joint(&mut model, &train_insts, &val_insts, &train_config)?
                };
                let final_metric = match outcome.telemetry.records.last() {
                    Some(rec) => rec.val_metric,
                    None => evaluate(&model, &val_insts, train_config.objective, &outcome.scaling)?,
                };
                Ok((outcome, ModelKind::Gcrf(model), final_metric))
            }
        }
    })();
    SeedRun { outcome: result }
}

/// Runs every seed of a config, writing per-seed telemetry and
/// checkpoints plus a JSON summary, and returns the aggregate.
pub fn cmd_train(
    config: &RunConfig,
    seeds: &[u64],
    out_dir: &Path,
) -> anyhow::Result<RunResult> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let data = load_task_data(config)?;
    write_val_split(config, &data, out_dir)?;

    let mut summaries = Vec::new();
    let mut finals = Vec::new();
    let mut stage_boundaries = Vec::new();
    for &seed in seeds {
        let run = run_seed(config, &data, seed, None);
        let seed_dir = out_dir.join(format!("seed_{seed}"));
        let summary = match run.outcome {
            Ok((outcome, model, final_metric)) => {
                let telemetry_rel = format!("seed_{seed}/telemetry.csv");
                let checkpoint_rel = format!("seed_{seed}/model.ckpt");
                write_telemetry(&seed_dir.join("telemetry.csv"), &outcome.telemetry)?;
                let ckpt = Checkpoint {
                    model,
                    objective: config.objective()?,
                    scaling: outcome.scaling.clone(),
                };
                save_checkpoint(&seed_dir.join("model.ckpt"), &ckpt)?;
                stage_boundaries = outcome.telemetry.stage_boundaries.clone();
                finals.push(final_metric);
                SeedSummary {
                    seed,
                    failed: false,
                    error: None,
                    final_metric: Some(final_metric),
                    final_alpha: Some(outcome.scaling.alpha),
                    telemetry: Some(telemetry_rel),
                    checkpoint: Some(checkpoint_rel),
                }
            }
            Err(err) => SeedSummary {
                seed,
                failed: true,
                error: Some(err.to_string()),
                final_metric: None,
                final_alpha: None,
                telemetry: None,
                checkpoint: None,
            },
        };
        summaries.push(summary);
    }

    let (mean, std) = mean_std(&finals);
    let result = RunResult {
        task: config.task.name().to_string(),
        objective: config.objective()?.name().to_string(),
        scaling_mode: scaling_mode_name(config.scaling.mode),
        schedule: config.schedule.kind.clone(),
        failed_seeds: summaries.iter().filter(|s| s.failed).count(),
        seeds: summaries,
        mean_metric: mean,
        std_metric: std,
        wall_clock_minutes: started.elapsed().as_secs_f64() / 60.0,
        stage_boundaries,
    };
    let json = serde_json::to_string_pretty(&result)?;
    std::fs::write(out_dir.join("summary.json"), json)?;
    Ok(result)
}

/// Persists the validation split next to the run so a checkpoint can be
/// re-evaluated on exactly the data that produced the telemetry metric.
fn write_val_split(config: &RunConfig, data: &TaskData, out_dir: &Path) -> anyhow::Result<()> {
    // The saved split carries the feature multiplier so a later eval sees
    // exactly what the checkpointed model was trained on.
    let path = out_dir.join("val_data.bin");
    match data {
        TaskData::Chain { val, .. } => {
            let mut scaled = val.clone();
            scaled.instances = scaled_sequences(&val.instances, config.data.feature_scale);
            save_sequence_dataset(&path, &scaled)?;
        }
        TaskData::Seg { val, .. } => {
            let mut scaled = val.clone();
            scaled.instances = scaled_segmentations(&val.instances, config.data.feature_scale);
            save_segmentation_dataset(&path, &scaled)?;
        }
    }
    Ok(())
}

fn scaled_sequences(
    instances: &[crfscale_core::data::SequenceInstance],
    factor: f64,
) -> Vec<crfscale_core::data::SequenceInstance> {
    let mut out = instances.to_vec();
    if factor != 1.0 {
        for inst in &mut out {
            for v in inst.features.data_mut() {
                *v *= factor;
            }
        }
    }
    out
}

fn scaled_segmentations(
    instances: &[crfscale_core::data::SegmentationInstance],
    factor: f64,
) -> Vec<crfscale_core::data::SegmentationInstance> {
    let mut out = instances.to_vec();
    if factor != 1.0 {
        for inst in &mut out {
            for v in inst.features.data_mut() {
                *v *= factor;
            }
        }
    }
    out
}

fn scale_param_segment<M: TrainableModel>(
    model: &mut M,
    segment: &str,
    factor: f64,
) -> crfscale_core::Result<()> {
    if factor == 1.0 {
        return Ok(());
    }
    let mut params = model.flatten_params();
    let layout = model.param_layout();
    let (_, range) = layout
        .iter()
        .find(|(name, _)| *name == segment)
        .unwrap_or_else(|| panic!("model has no parameter segment named {segment:?}"));
    for p in &mut params[range.clone()] {
        *p *= factor;
    }
    model.assign_params(&params)
}

/// Warmup schedule for `model.unary_pretrain_epochs`: a single unary-only
/// stage at the base learning rate with the plateau and early-stop logic
/// disabled so the warmup always consumes its full budget.
fn pretrain_schedule(config: &RunConfig, seed: u64) -> StageSchedule {
    let epochs = config.model.unary_pretrain_epochs;
    let mut base = config.train_config(seed).expect("validated");
    base.scaling = ScalingState::new(ScalingMode::None);
    let idle = StageConfig {
        epochs: 0,
        learning_rate: base.learning_rate,
        plateau_patience: epochs + 1,
        stop_patience: epochs + 1,
    };
    StageSchedule {
        unary_stage: StageConfig {
            epochs,
            learning_rate: base.learning_rate,
            plateau_patience: epochs + 1,
            stop_patience: epochs + 1,
        },
        structure_stage: idle.clone(),
        finetune_stage: idle,
        base,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub setting: String,
    pub alpha: Option<f64>,
    pub mean_metric: Option<f64>,
    pub std_metric: Option<f64>,
    pub failed_seeds: usize,
    pub per_seed: Vec<Option<f64>>,
}

/// One full training per (alpha, seed) at a constant unary scale, plus
/// unary-only and stagewise reference rows for the same seeds.
pub fn cmd_alpha_sweep(
    config: &RunConfig,
    alphas: &[f64],
    seeds: &[u64],
    out_dir: &Path,
) -> anyhow::Result<Vec<SweepRow>> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let data = load_task_data(config)?;
    let mut rows = Vec::new();

    for &alpha in alphas {
        // A single-point grid holds the scale constant through training
        // and evaluation while reusing the scaled-loss code path.
        let mut fixed = ScalingState::new(ScalingMode::Online);
        fixed.alpha = alpha;
        fixed.grid = vec![alpha];
        fixed.validate()?;
        let mut finals = Vec::new();
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let run = run_seed(config, &data, seed, Some(&fixed));
            match run.outcome {
                Ok((_, _, metric)) => {
                    finals.push(metric);
                    per_seed.push(Some(metric));
                }
                Err(_) => per_seed.push(None),
            }
        }
        let (mean, std) = mean_std(&finals);
        rows.push(SweepRow {
            setting: "fixed_alpha".into(),
            alpha: Some(alpha),
            mean_metric: mean,
            std_metric: std,
            failed_seeds: per_seed.iter().filter(|m| m.is_none()).count(),
            per_seed,
        });
    }

    rows.push(baseline_row(config, &data, seeds, Baseline::UnaryOnly)?);
    rows.push(baseline_row(config, &data, seeds, Baseline::Stage)?);

    let mut csv = String::from("setting,alpha,mean_metric,std_metric,failed_seeds\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.setting,
            row.alpha.map(|a| format_float(a)).unwrap_or_default(),
            row.mean_metric.map(format_float).unwrap_or_default(),
            row.std_metric.map(format_float).unwrap_or_default(),
            row.failed_seeds,
        ));
    }
    std::fs::write(out_dir.join("sweep.csv"), csv)?;
    let json = serde_json::to_string_pretty(&rows)?;
    std::fs::write(out_dir.join("sweep.json"), json)?;
    Ok(rows)
}

enum Baseline {
    UnaryOnly,
    Stage,
}

/// Reference rows: the unary-only classifier (structure never trained)
/// and the classic stagewise schedule, both without scaling.
fn baseline_row(
    config: &RunConfig,
    data: &TaskData,
    seeds: &[u64],
    baseline: Baseline,
) -> anyhow::Result<SweepRow> {
    let mut reference = config.clone();
    reference.scaling = crate::config::ScalingSection::default();
    let setting = match baseline {
        Baseline::UnaryOnly => {
            reference.schedule.kind = "stage".into();
            reference.schedule.stage_epochs = Some(vec![reference.schedule.epochs, 0, 0]);
            "unary_only"
        }
        Baseline::Stage => {
            reference.schedule.kind = "stage".into();
            if reference.schedule.stage_epochs.is_none() {
                let per = reference.schedule.epochs / 3;
                reference.schedule.stage_epochs =
                    Some(vec![per, per, reference.schedule.epochs - 2 * per]);
            }
            "stage"
        }
    };
    let mut finals = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let run = run_seed(&reference, data, seed, None);
        match run.outcome {
            Ok((_, _, metric)) => {
                finals.push(metric);
                per_seed.push(Some(metric));
            }
            Err(_) => per_seed.push(None),
        }
    }
    let (mean, std) = mean_std(&finals);
    Ok(SweepRow {
        setting: setting.into(),
        alpha: None,
        mean_metric: mean,
        std_metric: std,
        failed_seeds: per_seed.iter().filter(|m| m.is_none()).count(),
        per_seed,
    })
}
