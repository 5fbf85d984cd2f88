//! Joint and stagewise training loops, telemetry, and the rescaling
//! equivalence property.
//!
//! One epoch is a full shuffled pass over the training split in minibatches
//! whose loss is the mean over instances. In online mode an alpha grid
//! search runs after every epoch's optimizer pass on a subset that is fixed
//! once per run, and the chosen alpha carries into the next epoch and into
//! evaluation. Gradient reduction is ordered, so a run is bit-reproducible
//! for a given seed and thread-count independent.

use super::model::{Objective, TrainableModel};
use super::optim::{EarlyStop, Optimizer, OptimizerKind, PlateauScheduler};
use crate::error::{Error, Result};
use crate::scaling::{grid_search_alpha, ScalingMode, ScalingState};
use rayon::prelude::*;
use std::ops::Range;
use std::time::Instant;

/// Knobs for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub stop_patience: usize,
    /// Absolute validation-metric improvement below which an epoch counts
    /// as a plateau epoch.
    pub metric_threshold: f64,
    pub seed: u64,
    pub scaling: ScalingState,
    /// Instances in the fixed probe subset used for the alpha grid search
    /// and the ratio statistic.
    pub probe_size: usize,
}

impl TrainConfig {
    pub fn new(objective: Objective, seed: u64) -> Self {
        Self {
            objective,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::adam_default(),
            plateau_patience: 3,
            plateau_factor: 0.1,
            stop_patience: 7,
            metric_threshold: 1e-3,
            seed,
            scaling: ScalingState::new(ScalingMode::None),
            probe_size: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.plateau_patience == 0 || self.stop_patience == 0 {
            return Err(Error::Config("patience values must be positive".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config("plateau_factor must lie in (0,1)".into()));
        }
        if self.probe_size == 0 {
            return Err(Error::Config("probe_size must be positive".into()));
        }
        self.scaling.validate()
    }
}

/// One telemetry row per completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    /// Mean unary-to-pairwise ratio of raw potentials over the probe
    /// subset; infinite when any probe instance has a zero pairwise norm.
    pub ratio: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub seconds: f64,
    /// Which schedule stage produced this epoch (0 for joint training).
    pub stage: usize,
}

/// Telemetry of a full run, with the epochs at which later stages began.
#[derive(Debug, Clone, Default)]
pub struct TrainTelemetry {
    pub records: Vec<EpochRecord>,
    pub stage_boundaries: Vec<usize>,
    /// Epoch at which training left the numerically solvable region, if it
    /// did. That epoch's partial updates are rolled back before stopping,
    /// so the model and the records reflect the last completed epoch.
    pub diverged_at: Option<usize>,
}

/// Final scaling state (with any learned alpha) plus telemetry.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub telemetry: TrainTelemetry,
    pub scaling: ScalingState,
}

fn shuffled_indices(n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn probe_indices(n: usize, probe_size: usize, seed: u64) -> Vec<usize> {
    let mut rng = crate::numerics::seeded_rng(seed, crate::numerics::RngDomain::SubsetSelect);
    let mut order = shuffled_indices(n, &mut rng);
    order.truncate(probe_size.min(n));
    order
}

fn named_segment(layout: &[(&'static str, Range<usize>)], index: usize) -> String {
    for (name, range) in layout {
        if range.contains(&index) {
            return (*name).to_string();
        }
    }
    format!("coordinate {index}")
}

/// Mean loss and mean flat gradient over a batch; per-instance work fans
/// out to worker threads, and the reduction walks results in batch order.
fn batch_loss_grad<M: TrainableModel>(
    model: &M,
    data: &[M::Instance],
    batch: &[usize],
    objective: Objective,
    scaling: &ScalingState,
) -> Result<(f64, Vec<f64>)> {
    let per_instance: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|&i| model.loss_grad(&data[i], objective, scaling))
        .collect();
    let mut loss_sum = 0.0;
    let mut grads = vec![0.0; model.num_params()];
    for result in per_instance {
        let (loss, grad) = result?;
        loss_sum += loss;
        for (g, v) in grads.iter_mut().zip(&grad) {
            *g += v;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grads {
        *g *= scale;
    }
    Ok((loss_sum * scale, grads))
}

fn batch_unary_only_loss_grad<M: TrainableModel>(
    model: &M,
    data: &[M::Instance],
    batch: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let per_instance: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|&i| model.unary_only_loss_grad(&data[i]))
        .collect();
    let mut loss_sum = 0.0;
    let mut grads = vec![0.0; model.num_params()];
    for result in per_instance {
        let (loss, grad) = result?;
        loss_sum += loss;
        for (g, v) in grads.iter_mut().zip(&grad) {
            *g += v;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grads {
        *g *= scale;
    }
    Ok((loss_sum * scale, grads))
}

/// Task metric of the model's predictions on a dataset slice under the
/// given objective and scaling.
pub fn evaluate<M: TrainableModel>(
    model: &M,
    data: &[M::Instance],
    objective: Objective,
    scaling: &ScalingState,
) -> Result<f64> {
    let preds: Vec<Vec<usize>> = data
        .par_iter()
        .map(|inst| model.predict(inst, objective, scaling))
        .collect::<Result<_>>()?;
    let golds: Vec<Vec<usize>> = data.iter().map(|inst| model.gold(inst).to_vec()).collect();
    model.metric(&preds, &golds)
}

fn evaluate_unary_only<M: TrainableModel>(model: &M, data: &[M::Instance]) -> Result<f64> {
    let preds: Vec<Vec<usize>> = data
        .par_iter()
        .map(|inst| model.predict_unary_only(inst))
        .collect::<Result<_>>()?;
    let golds: Vec<Vec<usize>> = data.iter().map(|inst| model.gold(inst).to_vec()).collect();
    model.metric(&preds, &golds)
}

fn mean_probe_ratio<M: TrainableModel>(model: &M, data: &[M::Instance], probe: &[usize]) -> Result<f64> {
    let mut sum = 0.0;
    for &i in probe {
        sum += model.raw_ratio(&data[i])?;
    }
    Ok(sum / probe.len() as f64)
}

/// Mean training loss over the probe subset at a candidate alpha, with
/// parameters frozen. This is the quantity the online grid search ranks.
fn probe_loss_at_alpha<M: TrainableModel>(
    model: &M,
    data: &[M::Instance],
    probe: &[usize],
    objective: Objective,
    scaling: &ScalingState,
    alpha: f64,
) -> f64 {
    let mut candidate = scaling.clone();
    candidate.alpha = alpha;
    let mut sum = 0.0;
    for &i in probe {
        match model.loss_grad(&data[i], objective, &candidate) {
            Ok((loss, _)) => sum += loss,
            Err(_) => return f64::NAN,
        }
    }
    sum / probe.len() as f64
}

struct EpochLoopState<'a, M: TrainableModel> {
    model: &'a mut M,
    params: Vec<f64>,
    optimizer: Optimizer,
    plateau: PlateauScheduler,
    stop: EarlyStop,
    layout: Vec<(&'static str, Range<usize>)>,
}

impl<'a, M: TrainableModel> EpochLoopState<'a, M> {
    fn apply_update(&mut self, grads: &[f64], epoch: usize) -> Result<()> {
        if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: named_segment(&self.layout, idx),
                epoch: Some(epoch),
            });
        }
        self.optimizer.step(&mut self.params, grads)?;
        self.model.assign_params(&self.params)
    }
}

/// Joint training: one optimizer pass per epoch, then the online alpha
/// update when configured, then evaluation and scheduling.
///
/// A numerical blowup mid-epoch, such as a non-finite loss or gradient or
/// a conjugate-gradient divergence when the pairwise operator outgrows its
/// diagonal regularizer, does not abort the run: the epoch is rolled back
/// and training stops with the last stable parameters, flagged in the
/// telemetry's `diverged_at`.
pub fn train_joint<M: TrainableModel>(
    model: &mut M,
    train: &[M::Instance],
    val: &[M::Instance],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_joint_observed(model, train, val, config, |_, _, _, _| {})
}

/// `train_joint` with a hook invoked after each epoch's alpha update,
/// receiving the frozen model, the probe indices, the scaling state, and
/// the epoch index. Tests use it to re-derive the grid search result on the
/// exact same snapshot.
pub fn train_joint_observed<M: TrainableModel>(
    model: &mut M,
    train: &[M::Instance],
    val: &[M::Instance],
    config: &TrainConfig,
    mut observer: impl FnMut(&M, &[usize], &ScalingState, usize),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("train and validation splits must be nonempty".into()));
    }
    let mut scaling = config.scaling.clone();
    let mut telemetry = TrainTelemetry::default();
    run_epochs(
        model,
        train,
        val,
        config,
        &mut scaling,
        EpochPlan {
            epochs: config.epochs,
            stage: 0,
            epoch_offset: 0,
            unary_only: false,
            freeze_unary: false,
            learning_rate: config.learning_rate,
            plateau_patience: config.plateau_patience,
            stop_patience: config.stop_patience,
        },
        &mut telemetry,
        &mut observer,
    )?;
    Ok(TrainOutcome { telemetry, scaling })
}

/// Per-stage learning-rate and stopping settings; everything else comes
/// from the base config.
#[derive(Debug, Clone, Copy)]
pub struct StageConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub stop_patience: usize,
}

/// The three-stage schedule: unary-only pretraining, structure-only
/// training with the unary network frozen, then joint fine-tuning.
#[derive(Debug, Clone)]
pub struct StageSchedule {
    pub base: TrainConfig,
    pub unary_stage: StageConfig,
    pub structure_stage: StageConfig,
    pub finetune_stage: StageConfig,
}

impl StageSchedule {
    /// Splits a joint budget into the classic three stages with shared
    /// settings.
    pub fn uniform(base: TrainConfig, epochs_per_stage: usize) -> Self {
        let stage = StageConfig {
            epochs: epochs_per_stage,
            learning_rate: base.learning_rate,
            plateau_patience: base.plateau_patience,
            stop_patience: base.stop_patience,
        };
        Self {
            base,
            unary_stage: stage,
            structure_stage: stage,
            finetune_stage: stage,
        }
    }
}

/// Stagewise training. Telemetry keeps one global epoch counter; the
/// boundaries vector holds the first epoch index of stages two and three.
/// A stage that diverges ends the whole schedule at its rollback point.
pub fn train_stage<M: TrainableModel>(
    model: &mut M,
    train: &[M::Instance],
    val: &[M::Instance],
    schedule: &StageSchedule,
) -> Result<TrainOutcome> {
    schedule.base.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("train and validation splits must be nonempty".into()));
    }
    let mut scaling = schedule.base.scaling.clone();
    let mut telemetry = TrainTelemetry::default();
    let mut observer = |_: &M, _: &[usize], _: &ScalingState, _: usize| {};

    let stages = [
        (&schedule.unary_stage, true, false),
        (&schedule.structure_stage, false, true),
        (&schedule.finetune_stage, false, false),
    ];
    for (stage_idx, (stage, unary_only, freeze_unary)) in stages.iter().enumerate() {
        if stage_idx > 0 {
            telemetry.stage_boundaries.push(telemetry.records.len());
        }
        run_epochs(
            model,
            train,
            val,
            &schedule.base,
            &mut scaling,
            EpochPlan {
                epochs: stage.epochs,
                stage: stage_idx,
                epoch_offset: telemetry.records.len(),
                unary_only: *unary_only,
                freeze_unary: *freeze_unary,
                learning_rate: stage.learning_rate,
                plateau_patience: stage.plateau_patience,
                stop_patience: stage.stop_patience,
            },
            &mut telemetry,
            &mut observer,
        )?;
        if telemetry.diverged_at.is_some() {
            break;
        }
    }
    Ok(TrainOutcome { telemetry, scaling })
}

struct EpochPlan {
    epochs: usize,
    stage: usize,
    epoch_offset: usize,
    unary_only: bool,
    freeze_unary: bool,
    learning_rate: f64,
    plateau_patience: usize,
    stop_patience: usize,
}

fn run_epochs<M: TrainableModel>(
    model: &mut M,
    train: &[M::Instance],
    val: &[M::Instance],
    config: &TrainConfig,
    scaling: &mut ScalingState,
    plan: EpochPlan,
    telemetry: &mut TrainTelemetry,
    observer: &mut impl FnMut(&M, &[usize], &ScalingState, usize),
) -> Result<()> {
    let n = train.len();
    let probe = probe_indices(n, config.probe_size, config.seed);
    // The shuffle stream depends on the stage's global epoch offset so
    // stages draw distinct orders while staying seed-deterministic.
    let mut shuffle_rng = crate::numerics::seeded_rng(
        config.seed.wrapping_add(plan.epoch_offset as u64),
        crate::numerics::RngDomain::BatchShuffle,
    );
    let mut state = EpochLoopState {
        params: model.flatten_params(),
        layout: model.param_layout(),
        optimizer: Optimizer::new(config.optimizer, plan.learning_rate, model.num_params()),
        plateau: PlateauScheduler::new(plan.plateau_patience, config.plateau_factor, config.metric_threshold),
        stop: EarlyStop::new(plan.stop_patience, config.metric_threshold),
        model,
    };
    let unary_range = state.model.unary_param_range();

    for local_epoch in 0..plan.epochs {
        let epoch = plan.epoch_offset + local_epoch;
        let started = Instant::now();
        let order = shuffled_indices(n, &mut shuffle_rng);
        let checkpoint_params = state.params.clone();
        let checkpoint_optimizer = state.optimizer.clone();
        let checkpoint_alpha = scaling.alpha;
        let epoch_result = (|| -> Result<(f64, f64, f64)> {
            let mut loss_weighted = 0.0;
            for batch in order.chunks(config.batch_size) {
                let (batch_loss, mut grads) = if plan.unary_only {
                    batch_unary_only_loss_grad(&*state.model, train, batch)?
                } else {
                    batch_loss_grad(&*state.model, train, batch, config.objective, scaling)?
                };
                if plan.freeze_unary {
                    for g in &mut grads[unary_range.clone()] {
                        *g = 0.0;
                    }
                }
                state.apply_update(&grads, epoch).map_err(|e| match e {
                    Error::NonFiniteGradient { tensor, .. } => Error::NonFiniteGradient {
                        tensor,
                        epoch: Some(epoch),
                    },
                    other => other,
                })?;
                loss_weighted += batch_loss * batch.len() as f64;
            }
            let train_loss = loss_weighted / n as f64;

            if !plan.unary_only && scaling.mode == ScalingMode::Online {
                let best = grid_search_alpha(&scaling.grid.clone(), |alpha| {
                    probe_loss_at_alpha(&*state.model, train, &probe, config.objective, scaling, alpha)
                })?;
                scaling.alpha = best;
            }

            let val_metric = if plan.unary_only {
                evaluate_unary_only(&*state.model, val)?
            } else {
                evaluate(&*state.model, val, config.objective, scaling)?
            };
            let ratio = mean_probe_ratio(&*state.model, train, &probe)?;
            Ok((train_loss, val_metric, ratio))
        })();

        let (train_loss, val_metric, ratio) = match epoch_result {
            Ok(stats) => stats,
            Err(e) if is_numerical_blowup(&e) => {
                state.params = checkpoint_params;
                state.optimizer = checkpoint_optimizer;
                scaling.alpha = checkpoint_alpha;
                state.model.assign_params(&state.params)?;
                telemetry.diverged_at = Some(epoch);
                break;
            }
            Err(e) => return Err(e),
        };
        observer(&*state.model, &probe, scaling, epoch);

        telemetry.records.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
            ratio,
            alpha: scaling.alpha,
            learning_rate: state.optimizer.learning_rate(),
            seconds: started.elapsed().as_secs_f64(),
            stage: plan.stage,
        });

        if state.plateau.observe(val_metric) {
            let lr = state.optimizer.learning_rate() * config.plateau_factor;
            state.optimizer.set_learning_rate(lr);
        }
        if state.stop.observe(val_metric) {
            break;
        }
    }
    Ok(())
}

/// Whether an error is a numerical blowup that divergence rollback should
/// absorb, as opposed to a structural problem that must propagate.
fn is_numerical_blowup(e: &Error) -> bool {
    matches!(
        e,
        Error::CgDivergence { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NonFinite(_)
            | Error::NoFiniteGridPoint
    )
}

/// Largest parameter gaps between the two runs of the rescaling
/// construction, maximized over steps.
#[derive(Debug, Clone, Copy)]
pub struct RescalingDeviation {
    /// max |V_b - alpha * V_a| over the final linear layer.
    pub final_layer: f64,
    /// max |p_b - p_a| over all other parameters.
    pub feature_layers: f64,
}

/// Compares two training runs that the rescaling argument predicts are
/// equivalent under plain SGD: run A trains with unaries scaled by alpha;
/// run B starts from the final layer pre-multiplied by alpha and uses an
/// alpha^2 learning-rate multiplier on that layer. Returns the largest
/// deviations seen at any step.
pub fn rescaling_equivalence_check(
    seed: u64,
    alpha: f64,
    eta: f64,
    steps: usize,
) -> Result<RescalingDeviation> {
    rescaling_deviation_with(OptimizerKind::sgd(0.0), seed, alpha, eta, steps)
}

/// Same construction under any optimizer; adaptive optimizers break the
/// equivalence, which is part of what the property documents.
pub fn rescaling_deviation_with(
    optimizer: OptimizerKind,
    seed: u64,
    alpha: f64,
    eta: f64,
    steps: usize,
) -> Result<RescalingDeviation> {
    use super::model::ChainModel;
    use crate::data::{synth_sequences, SynthSeqParams};
    use crate::neural::{Activation, MlpSpec};

    let spec = MlpSpec {
        input_dim: 4,
        hidden_dims: vec![5],
        output_dim: 3,
        hidden_activation: Activation::Relu,
        final_activation: Activation::Identity,
        final_bias: false,
    };
    let data = synth_sequences(&SynthSeqParams {
        seed,
        count: 8,
        min_len: 3,
        max_len: 5,
        num_labels: 3,
        feature_dim: 4,
        unary_snr: 1.0,
        transition_strength: 1.0,
    })?;
    let batch: Vec<usize> = (0..data.instances.len()).collect();

    let mut model_a = ChainModel::new(&spec, seed)?;
    let mut model_b = model_a.clone();
    let final_range = model_a.final_layer_range();

    // Run A sees alpha * U in its loss; run B starts from alpha * V and
    // trains unscaled potentials with the lr multiplier on that layer.
    let mut scaled_view = ScalingState::new(ScalingMode::Online);
    scaled_view.alpha = alpha;
    let plain_view = ScalingState::new(ScalingMode::None);

    let mut params_b = model_b.flatten_params();
    for v in &mut params_b[final_range.clone()] {
        *v *= alpha;
    }
    model_b.assign_params(&params_b)?;

    let dim = model_a.num_params();
    let mut opt_a = Optimizer::new(optimizer, eta, dim);
    let mut opt_b = Optimizer::new(optimizer, eta, dim);
    let mut multipliers_b = vec![1.0; dim];
    for m in &mut multipliers_b[final_range.clone()] {
        *m = alpha * alpha;
    }

    let mut params_a = model_a.flatten_params();
    let mut deviation = RescalingDeviation {
        final_layer: 0.0,
        feature_layers: 0.0,
    };
    for _ in 0..steps {
        let (_, grads_a) =
            batch_loss_grad(&model_a, &data.instances, &batch, Objective::CeExact, &scaled_view)?;
        let (_, grads_b) =
            batch_loss_grad(&model_b, &data.instances, &batch, Objective::CeExact, &plain_view)?;
        opt_a.step(&mut params_a, &grads_a)?;
        opt_b.step_with_multipliers(&mut params_b, &grads_b, Some(&multipliers_b))?;
        model_a.assign_params(&params_a)?;
        model_b.assign_params(&params_b)?;

        for i in 0..dim {
            let gap = if final_range.contains(&i) {
                (params_b[i] - alpha * params_a[i]).abs()
            } else {
                (params_b[i] - params_a[i]).abs()
            };
            let slot = if final_range.contains(&i) {
                &mut deviation.final_layer
            } else {
                &mut deviation.feature_layers
            };
            if gap > *slot {
                *slot = gap;
            }
        }
    }
    Ok(deviation)
}

#[cfg(test)]
mod tests {
    use super::super::model::ChainModel;
    use super::*;
    use crate::data::{synth_sequences, SynthSeqParams};
    use crate::neural::{Activation, MlpSpec};

    fn spec() -> MlpSpec {
        MlpSpec {
            input_dim: 4,
            hidden_dims: vec![5],
            output_dim: 3,
            hidden_activation: Activation::Relu,
            final_activation: Activation::Identity,
            final_bias: true,
        }
    }

    fn dataset(seed: u64, count: usize) -> crate::data::SequenceDataset {
        synth_sequences(&SynthSeqParams {
            seed,
            count,
            min_len: 3,
            max_len: 5,
            num_labels: 3,
            feature_dim: 4,
            unary_snr: 2.0,
            transition_strength: 1.5,
        })
        .unwrap()
    }

    fn quick_config(seed: u64) -> TrainConfig {
        let mut config = TrainConfig::new(Objective::CeExact, seed);
        config.epochs = 3;
        config.batch_size = 4;
        config.learning_rate = 5e-3;
        config.probe_size = 4;
        config
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let data = dataset(1, 12);
        let mut model = ChainModel::new(&spec(), 1).unwrap();
        let before = model.flatten_params();
        let mut config = quick_config(1);
        config.epochs = 0;
        let outcome = train_joint(&mut model, &data.instances[..8], &data.instances[8..], &config).unwrap();
        assert_eq!(model.flatten_params(), before);
        assert!(outcome.telemetry.records.is_empty());
    }

    #[test]
    fn telemetry_shape_and_epoch_indices() {
        let data = dataset(2, 12);
        let mut model = ChainModel::new(&spec(), 2).unwrap();
        let config = quick_config(2);
        let outcome = train_joint(&mut model, &data.instances[..8], &data.instances[8..], &config).unwrap();
        let records = &outcome.telemetry.records;
        assert_eq!(records.len(), 3);
        for (i, rec) in records.iter().enumerate() {
            assert_eq!(rec.epoch, i);
            assert_eq!(rec.stage, 0);
            assert!(rec.train_loss.is_finite());
            assert!((0.0..=1.0).contains(&rec.val_metric));
            assert!(rec.alpha == 1.0);
            assert!(rec.seconds >= 0.0);
        }
        assert!(outcome.telemetry.stage_boundaries.is_empty());
    }

    #[test]
    fn divergence_rolls_back_to_last_stable_epoch() {
        use super::super::model::GcrfModel;
        use crate::data::{synth_segmentation, SynthSegParams};

        let data = synth_segmentation(&SynthSegParams {
            seed: 31,
            count: 8,
            height: 8,
            width: 8,
            feature_dim: 3,
            snr: 1.0,
        })
        .unwrap();
        let unary_spec = MlpSpec {
            input_dim: 3,
            hidden_dims: vec![6],
            output_dim: 2,
            hidden_activation: Activation::Relu,
            final_activation: Activation::Identity,
            final_bias: true,
        };
        let embed_spec = MlpSpec {
            input_dim: 3,
            hidden_dims: vec![6],
            output_dim: 3,
            hidden_activation: Activation::Relu,
            final_activation: Activation::Identity,
            final_bias: true,
        };
        let mut model =
            GcrfModel::with_unary_gain(&unary_spec, &embed_spec, 25.0, 31, 0.2).unwrap();
        let mut config = TrainConfig::new(Objective::CeExact, 31);
        config.epochs = 40;
        config.batch_size = 4;
        config.learning_rate = 2e-2;
        config.optimizer = crate::training::OptimizerKind::adam_default();
        config.probe_size = 4;
        let outcome =
            train_joint(&mut model, &data.instances[..6], &data.instances[6..], &config).unwrap();

        let diverged = outcome.telemetry.diverged_at.expect("run should leave the PD region");
        assert!(diverged > 0, "flat-unary runaway should survive at least one epoch");
        assert_eq!(outcome.telemetry.records.len(), diverged);
        assert!(outcome.telemetry.records.iter().all(|r| r.val_metric.is_finite()));
        assert!(model.flatten_params().iter().all(|p| p.is_finite()));
        let metric = evaluate(&model, &data.instances[6..], config.objective, &outcome.scaling)
            .expect("rolled-back model must still be solvable");
        assert!((0.0..=1.0).contains(&metric));
    }

    #[test]
    fn training_is_deterministic_modulo_wall_clock() {
        let data = dataset(3, 12);
        let run = || {
            let mut model = ChainModel::new(&spec(), 3).unwrap();
            let config = quick_config(3);
            let outcome =
                train_joint(&mut model, &data.instances[..8], &data.instances[8..], &config)
                    .unwrap();
            (model.flatten_params(), outcome.telemetry)
        };
        let (params_a, telem_a) = run();
        let (params_b, telem_b) = run();
        assert_eq!(params_a, params_b);
        assert_eq!(telem_a.records.len(), telem_b.records.len());
        for (a, b) in telem_a.records.iter().zip(&telem_b.records) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_metric.to_bits(), b.val_metric.to_bits());
            assert_eq!(a.ratio.to_bits(), b.ratio.to_bits());
            assert_eq!(a.alpha.to_bits(), b.alpha.to_bits());
        }
    }

    #[test]
    fn online_alpha_matches_exhaustive_grid_oracle() {
        let data = dataset(4, 12);
        let mut model = ChainModel::new(&spec(), 4).unwrap();
        let mut config = quick_config(4);
        config.scaling = ScalingState::new(ScalingMode::Online);
        let train = &data.instances[..8];
        let val = &data.instances[8..];

        let mut mismatches = 0;
        let outcome = train_joint_observed(&mut model, train, val, &config, |m, probe, scaling, _| {
            // Independent exhaustive loop over the same frozen snapshot.
            let mut best_alpha = f64::NAN;
            let mut best_loss = f64::INFINITY;
            for &alpha in &scaling.grid {
                let mut candidate = scaling.clone();
                candidate.alpha = alpha;
                let mut sum = 0.0;
                for &i in probe {
                    sum += m.loss_grad(&train[i], config.objective, &candidate).unwrap().0;
                }
                let loss = sum / probe.len() as f64;
                if loss < best_loss {
                    best_loss = loss;
                    best_alpha = alpha;
                }
            }
            if scaling.alpha != best_alpha {
                mismatches += 1;
            }
        })
        .unwrap();
        assert_eq!(mismatches, 0);
        // The recorded alpha per epoch is the grid-search result.
        assert!(outcome.telemetry.records.iter().all(|r| r.alpha > 0.0));
    }

    #[test]
    fn stage_schedule_freezes_unary_in_stage_two() {
        let data = dataset(5, 12);
        let base = quick_config(5);

        // Run stages one and two only; the unary parameters after stage two
        // must be bit-identical to the stage-one output.
        let stage = StageConfig {
            epochs: 2,
            learning_rate: base.learning_rate,
            plateau_patience: base.plateau_patience,
            stop_patience: base.stop_patience,
        };
        let zero_stage = StageConfig { epochs: 0, ..stage };

        let mut model_one = ChainModel::new(&spec(), 5).unwrap();
        let schedule_one = StageSchedule {
            base: base.clone(),
            unary_stage: stage,
            structure_stage: zero_stage,
            finetune_stage: zero_stage,
        };
        train_stage(&mut model_one, &data.instances[..8], &data.instances[8..], &schedule_one)
            .unwrap();

        let mut model_two = ChainModel::new(&spec(), 5).unwrap();
        let schedule_two = StageSchedule {
            base: base.clone(),
            unary_stage: stage,
            structure_stage: stage,
            finetune_stage: zero_stage,
        };
        let outcome =
            train_stage(&mut model_two, &data.instances[..8], &data.instances[8..], &schedule_two)
                .unwrap();

        let range = model_one.unary_param_range();
        assert_eq!(
            model_one.flatten_params()[range.clone()],
            model_two.flatten_params()[range.clone()]
        );
        // Structure parameters did move in stage two.
        assert_ne!(
            model_one.flatten_params()[range.end..],
            model_two.flatten_params()[range.end..]
        );
        assert_eq!(outcome.telemetry.stage_boundaries.len(), 2);
    }

    #[test]
    fn stage_telemetry_has_two_boundaries_and_global_epochs() {
        let data = dataset(6, 12);
        let base = quick_config(6);
        let mut model = ChainModel::new(&spec(), 6).unwrap();
        let schedule = StageSchedule::uniform(base, 2);
        let outcome =
            train_stage(&mut model, &data.instances[..8], &data.instances[8..], &schedule).unwrap();
        assert_eq!(outcome.telemetry.stage_boundaries, vec![2, 4]);
        assert_eq!(outcome.telemetry.records.len(), 6);
        let stages: Vec<usize> = outcome.telemetry.records.iter().map(|r| r.stage).collect();
        assert_eq!(stages, vec![0, 0, 1, 1, 2, 2]);
        let epochs: Vec<usize> = outcome.telemetry.records.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn rescaling_equivalence_alpha_one_is_exact() {
        let dev = rescaling_equivalence_check(7, 1.0, 0.05, 10).unwrap();
        assert_eq!(dev.final_layer, 0.0);
        assert_eq!(dev.feature_layers, 0.0);
    }

    #[test]
    fn rescaling_equivalence_holds_for_plain_sgd() {
        let dev = rescaling_equivalence_check(8, 0.25, 0.05, 50).unwrap();
        assert!(dev.final_layer <= 1e-8, "final layer deviated {:e}", dev.final_layer);
        assert!(dev.feature_layers <= 1e-8, "feature layers deviated {:e}", dev.feature_layers);

        let dev4 = rescaling_equivalence_check(8, 4.0, 0.02, 50).unwrap();
        assert!(dev4.final_layer <= 1e-6, "final layer deviated {:e}", dev4.final_layer);
        assert!(dev4.feature_layers <= 1e-6, "feature layers deviated {:e}", dev4.feature_layers);
    }

    #[test]
    fn rescaling_equivalence_breaks_under_adam() {
        let dev = rescaling_deviation_with(OptimizerKind::adam_default(), 9, 4.0, 0.02, 50).unwrap();
        assert!(
            dev.final_layer > 1e-3,
            "adaptive steps should break the equivalence, deviation {:e}",
            dev.final_layer
        );
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut config = quick_config(1);
        config.batch_size = 0;
        assert!(config.validate().is_err());
        let mut config = quick_config(1);
        config.plateau_factor = 1.5;
        assert!(config.validate().is_err());
        let mut config = quick_config(1);
        config.scaling.alpha = -2.0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn empty_split_is_rejected() {
        let data = dataset(10, 4);
        let mut model = ChainModel::new(&spec(), 10).unwrap();
        let config = quick_config(10);
        assert!(train_joint(&mut model, &[], &data.instances, &config).is_err());
        assert!(train_joint(&mut model, &data.instances, &[], &config).is_err());
    }
}
