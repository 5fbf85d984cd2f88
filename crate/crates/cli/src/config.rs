//! Run configuration: a TOML file with one section per concern.
//!
//! ```toml
//! task = "synth_seq"              # ocr | synth_seq | synth_seg
//! seeds = [0, 1, 2]
//! output_dir = "runs/demo"
//!
//! [data]                          # synthetic generator knobs or the OCR path
//! seed = 0
//! count = 64
//!
//! [model]
//! hidden_dims = [32]
//!
//! [objective]
//! kind = "ce_exact"               # nll | ce_exact | ce_meanfield | ssvm
//!
//! [schedule]
//! kind = "joint"                  # joint | stage
//! epochs = 10
//!
//! [scaling]
//! mode = "online"                 # none | online | offline | offline_reg | temperature
//!
//! [optimizer]
//! kind = "adam"                   # adam | sgd
//! learning_rate = 0.01
//! ```
//!
//! Unknown keys are rejected so a typo cannot silently fall back to a
//! default. Every omitted section takes the defaults shown by
//! `crfscale train --help`.

use anyhow::{bail, Context};
use crfscale_core::neural::{Activation, MlpSpec};
use crfscale_core::scaling::{ScalingMode, ScalingState};
use crfscale_core::training::{Objective, OptimizerKind, StageConfig, StageSchedule, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Root of the run directory tree; relative output directories are joined
/// under it when set.
pub const RUN_DIR_ENV: &str = "CRFSCALE_RUN_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ocr,
    SynthSeq,
    SynthSeg,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Ocr => "ocr",
            Task::SynthSeq => "synth_seq",
            Task::SynthSeg => "synth_seg",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub scaling: ScalingSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Taskar OCR file; required for the ocr task, unused otherwise.
    pub path: Option<PathBuf>,
    pub train_folds: Vec<usize>,
    pub val_folds: Vec<usize>,
    /// Generator seed for synthetic tasks, independent of training seeds.
    pub seed: u64,
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub num_labels: usize,
    pub feature_dim: usize,
    pub unary_snr: f64,
    pub transition_strength: f64,
    pub height: usize,
    pub width: usize,
    pub snr: f64,
    /// Leading fraction of synthetic instances used for training; the rest
    /// is the validation split.
    pub train_fraction: f64,
    /// Multiplier applied to every input feature before training. Values
    /// far from 1 emulate a feature pipeline whose output scale was never
    /// normalized, which inflates the unary potentials relative to the
    /// pairwise block.
    pub feature_scale: f64,
    /// When set, synthetic datasets are generated once and reused from
    /// versioned cache files in this directory.
    pub cache_dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            train_folds: (0..9).collect(),
            val_folds: vec![9],
            seed: 0,
            count: 64,
            min_len: 3,
            max_len: 8,
            num_labels: 4,
            feature_dim: 8,
            unary_snr: 1.0,
            transition_strength: 1.0,
            height: 16,
            width: 16,
            snr: 1.0,
            train_fraction: 0.8,
            feature_scale: 1.0,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub final_activation: Activation,
    pub final_bias: bool,
    /// Multiplier applied to the final unary layer at initialization;
    /// values far from 1 produce deliberately mis-scaled potentials.
    pub unary_gain: f64,
    /// Multiplier applied to the initial transition block (chain tasks
    /// only), shrinking or inflating the pairwise side of the ratio.
    pub pairwise_scale: f64,
    /// Unary-only warmup epochs run before the main schedule, on features
    /// prior to `data.feature_scale`. This produces an informative unary
    /// block whose output scale is then inflated by the feature multiplier.
    pub unary_pretrain_epochs: usize,
    /// Embedding width of the coupling network (segmentation only).
    pub embed_dim: usize,
    /// Diagonal regularizer of the quadratic model (segmentation only).
    pub lambda: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dims: vec![32],
            hidden_activation: Activation::Relu,
            final_activation: Activation::Identity,
            final_bias: true,
            unary_gain: 1.0,
            pairwise_scale: 1.0,
            unary_pretrain_epochs: 0,
            embed_dim: 4,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    pub kind: String,
    pub meanfield_sweeps: usize,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self {
            kind: "ce_exact".into(),
            meanfield_sweeps: 5,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    /// "joint" trains everything together; "stage" runs unary pretraining,
    /// frozen-unary structure training, then joint fine-tuning.
    pub kind: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub stop_patience: usize,
    pub metric_threshold: f64,
    /// Per-stage epoch budget for the stage schedule; when omitted the
    /// joint budget is split evenly.
    pub stage_epochs: Option<Vec<usize>>,
    /// Instances in the fixed probe subset used for the alpha grid search
    /// and the ratio telemetry.
    pub probe_size: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: "joint".into(),
            epochs: 30,
            batch_size: 8,
            plateau_patience: 3,
            plateau_factor: 0.1,
            stop_patience: 7,
            metric_threshold: 1e-3,
            stage_epochs: None,
            probe_size: 16,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSection {
    pub mode: ScalingMode,
    pub alpha: f64,
    /// Online grid; empty means the default powers-of-two grid.
    pub grid: Vec<f64>,
    pub reg_lambda: f64,
    pub reg_alpha: f64,
}

impl Default for ScalingSection {
    fn default() -> Self {
        Self {
            mode: ScalingMode::None,
            alpha: 1.0,
            grid: Vec::new(),
            reg_lambda: 1.0,
            reg_alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub kind: String,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            kind: "adam".into(),
            learning_rate: 1e-2,
            momentum: 0.9,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds list must be nonempty");
        }
        if self.task == Task::Ocr {
            let path = self
                .data
                .path
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("ocr task requires data.path"))?;
            if !path.exists() {
                bail!("data.path {} does not exist", path.display());
            }
            if self.data.train_folds.is_empty() || self.data.val_folds.is_empty() {
                bail!("ocr task requires nonempty train_folds and val_folds");
            }
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            bail!("data.train_fraction must lie in (0,1)");
        }
        if !(self.data.feature_scale.is_finite() && self.data.feature_scale > 0.0) {
            bail!("data.feature_scale must be positive and finite");
        }
        if !(self.model.pairwise_scale.is_finite() && self.model.pairwise_scale > 0.0) {
            bail!("model.pairwise_scale must be positive and finite");
        }
        if self.task == Task::SynthSeg && self.model.pairwise_scale != 1.0 {
            bail!("model.pairwise_scale applies to chain tasks only");
        }
        match self.schedule.kind.as_str() {
            "joint" | "stage" => {}
            other => bail!("unknown schedule kind {other:?}, expected joint or stage"),
        }
        if let Some(stage_epochs) = &self.schedule.stage_epochs {
            if stage_epochs.len() != 3 {
                bail!("schedule.stage_epochs must list exactly 3 budgets");
            }
        }
        self.objective()?;
        self.optimizer_kind()?;
        self.scaling_state()?.validate()?;
        self.train_config(self.seeds[0])?.validate()?;
        Ok(())
    }

    pub fn objective(&self) -> anyhow::Result<Objective> {
        Ok(Objective::parse(
            &self.objective.kind,
            self.objective.meanfield_sweeps,
        )?)
    }

    pub fn optimizer_kind(&self) -> anyhow::Result<OptimizerKind> {
        match self.optimizer.kind.as_str() {
            "adam" => Ok(OptimizerKind::adam_default()),
            "sgd" => Ok(OptimizerKind::sgd(self.optimizer.momentum)),
            other => bail!("unknown optimizer kind {other:?}, expected adam or sgd"),
        }
    }

    pub fn scaling_state(&self) -> anyhow::Result<ScalingState> {
        let mut state = ScalingState::new(self.scaling.mode);
        state.alpha = self.scaling.alpha;
        if !self.scaling.grid.is_empty() {
            state.grid = self.scaling.grid.clone();
        }
        state.reg_lambda = self.scaling.reg_lambda;
        state.reg_alpha = self.scaling.reg_alpha;
        state.validate()?;
        Ok(state)
    }

    pub fn train_config(&self, seed: u64) -> anyhow::Result<TrainConfig> {
        let mut config = TrainConfig::new(self.objective()?, seed);
        config.epochs = self.schedule.epochs;
        config.batch_size = self.schedule.batch_size;
        config.learning_rate = self.optimizer.learning_rate;
        config.optimizer = self.optimizer_kind()?;
        config.plateau_patience = self.schedule.plateau_patience;
        config.plateau_factor = self.schedule.plateau_factor;
        config.stop_patience = self.schedule.stop_patience;
        config.metric_threshold = self.schedule.metric_threshold;
        config.scaling = self.scaling_state()?;
        config.probe_size = self.schedule.probe_size;
        Ok(config)
    }

    pub fn is_stagewise(&self) -> bool {
        self.schedule.kind == "stage"
    }

    /// Stage budgets from the config, or the joint budget split into three
    /// near-equal parts when none are given.
    pub fn stage_schedule(&self, seed: u64) -> anyhow::Result<StageSchedule> {
        let base = self.train_config(seed)?;
        let budgets = match &self.schedule.stage_epochs {
            Some(budgets) => [budgets[0], budgets[1], budgets[2]],
            None => {
                let per = self.schedule.epochs / 3;
                [per, per, self.schedule.epochs - 2 * per]
            }
        };
        let stage = |epochs| StageConfig {
            epochs,
            learning_rate: base.learning_rate,
            plateau_patience: base.plateau_patience,
            stop_patience: base.stop_patience,
        };
        Ok(StageSchedule {
            unary_stage: stage(budgets[0]),
            structure_stage: stage(budgets[1]),
            finetune_stage: stage(budgets[2]),
            base,
        })
    }

    pub fn chain_spec(&self, input_dim: usize, num_labels: usize) -> MlpSpec {
        MlpSpec {
            input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            output_dim: num_labels,
            hidden_activation: self.model.hidden_activation,
            final_activation: self.model.final_activation,
            final_bias: self.model.final_bias,
        }
    }

    pub fn gcrf_specs(&self, feature_dim: usize) -> (MlpSpec, MlpSpec) {
        let unary = MlpSpec {
            input_dim: feature_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            output_dim: 2,
            hidden_activation: self.model.hidden_activation,
            final_activation: self.model.final_activation,
            final_bias: self.model.final_bias,
        };
        let embed = MlpSpec {
            input_dim: feature_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            output_dim: self.model.embed_dim,
            hidden_activation: self.model.hidden_activation,
            final_activation: self.model.final_activation,
            final_bias: self.model.final_bias,
        };
        (unary, embed)
    }

    /// Output directory after applying the command-line override and the
    /// run-root environment variable.
    pub fn resolve_output_dir(&self, cli_out: Option<&Path>) -> PathBuf {
        let base = cli_out.unwrap_or(&self.output_dir);
        if base.is_absolute() {
            return base.to_path_buf();
        }
        match std::env::var_os(RUN_DIR_ENV) {
            Some(root) => PathBuf::from(root).join(base),
            None => base.to_path_buf(),
        }
    }
}

/// Seed list syntax: a single seed `5`, an inclusive range `0..7`, or a
/// comma list `0,3,9`.
pub fn parse_seeds(text: &str) -> anyhow::Result<Vec<u64>> {
    let text = text.trim();
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: u64 = lo.trim().parse().context("range start")?;
        let hi: u64 = hi.trim().parse().context("range end")?;
        if hi < lo {
            bail!("seed range {text:?} is empty");
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',')
        .map(|part| part.trim().parse::<u64>().with_context(|| format!("seed {part:?}")))
        .collect()
}

/// Alpha list syntax: comma-separated positive numbers.
pub fn parse_alphas(text: &str) -> anyhow::Result<Vec<f64>> {
    let alphas: Vec<f64> = text
        .split(',')
        .map(|part| part.trim().parse::<f64>().with_context(|| format!("alpha {part:?}")))
        .collect::<anyhow::Result<_>>()?;
    if alphas.is_empty() {
        bail!("alpha list must be nonempty");
    }
    for &alpha in &alphas {
        if !(alpha > 0.0 && alpha.is_finite()) {
            bail!("alphas must be positive and finite, got {alpha}");
        }
    }
    Ok(alphas)
}
