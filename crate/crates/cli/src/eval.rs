//! Checkpoint evaluation and dataset generation.

use anyhow::{bail, Context};
use crfscale_core::data::{
    load_segmentation_dataset, load_sequence_dataset, load_taskar_ocr, save_segmentation_dataset,
    save_sequence_dataset, synth_segmentation, synth_sequences, SynthSegParams, SynthSeqParams,
};
use crfscale_core::training::{evaluate, load_checkpoint, ModelKind, Objective};
use std::io::Read;
use std::path::Path;

const DATASET_MAGIC: &[u8; 8] = b"CRFDATA\0";

fn has_dataset_magic(path: &Path) -> anyhow::Result<bool> {
    let mut file =
        std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut magic = [0u8; 8];
    match file.read_exact(&mut magic) {
        Ok(()) => Ok(&magic == DATASET_MAGIC),
        Err(_) => Ok(false),
    }
}

fn decoder_name(objective: Objective) -> &'static str {
    match objective {
        Objective::Nll | Objective::Ssvm => "map",
        Objective::CeExact => "marginal",
        Objective::CeMeanField { .. } => "meanfield_marginal",
    }
}

/// Loads a checkpoint and a dataset, applies the decoder matched to the
/// training objective (with the persisted scale), and prints the metric.
/// Chain models also report the MAP and exact-marginal decoders side by
/// side.
pub fn cmd_eval(ckpt_path: &Path, data_path: &Path) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    match &ckpt.model {
        ModelKind::Chain(model) => {
            let dataset = if has_dataset_magic(data_path)? {
                load_sequence_dataset(data_path)?
            } else {
                load_taskar_ocr(data_path)?
            };
            let spec = model.unary_net().spec();
            if dataset.feature_dim != spec.input_dim {
                bail!(
                    "dataset has {} features but the model expects {}",
                    dataset.feature_dim,
                    spec.input_dim
                );
            }
            if dataset.num_labels != spec.output_dim {
                bail!(
                    "dataset has {} labels but the model expects {}",
                    dataset.num_labels,
                    spec.output_dim
                );
            }
            let metric = evaluate(model, &dataset.instances, ckpt.objective, &ckpt.scaling)?;
            let map_metric = evaluate(model, &dataset.instances, Objective::Nll, &ckpt.scaling)?;
            let marginal_metric =
                evaluate(model, &dataset.instances, Objective::CeExact, &ckpt.scaling)?;
            println!("metric: {metric}");
            println!("decoder: {}", decoder_name(ckpt.objective));
            println!("alpha: {}", ckpt.scaling.alpha);
            println!("map_metric: {map_metric}");
            println!("marginal_metric: {marginal_metric}");
        }
        ModelKind::Gcrf(model) => {
            if !has_dataset_magic(data_path)? {
                bail!("segmentation evaluation needs a generated dataset file");
            }
            let dataset = load_segmentation_dataset(data_path)?;
            let spec = model.unary_net().spec();
            if dataset.feature_dim != spec.input_dim {
                bail!(
                    "dataset has {} features but the model expects {}",
                    dataset.feature_dim,
                    spec.input_dim
                );
            }
            let metric = evaluate(model, &dataset.instances, ckpt.objective, &ckpt.scaling)?;
            println!("metric: {metric}");
            println!("decoder: threshold");
            println!("alpha: {}", ckpt.scaling.alpha);
        }
    }
    Ok(())
}

/// Size knobs for `gen-data`; unset values fall back to the defaults of
/// the matching generator.
#[derive(Debug, Clone, Copy, Default)]
pub struct GenDataOverrides {
    pub count: Option<usize>,
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
    pub num_labels: Option<usize>,
    pub feature_dim: Option<usize>,
    pub unary_snr: Option<f64>,
    pub transition_strength: Option<f64>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub snr: Option<f64>,
}

/// Generates a synthetic dataset and writes it in the versioned binary
/// format the other commands read.
pub fn cmd_gen_data(
    kind: &str,
    seed: u64,
    out: &Path,
    overrides: &GenDataOverrides,
) -> anyhow::Result<()> {
    match kind {
        "synth_seq" => {
            let params = SynthSeqParams {
                seed,
                count: overrides.count.unwrap_or(200),
                min_len: overrides.min_len.unwrap_or(3),
                max_len: overrides.max_len.unwrap_or(8),
                num_labels: overrides.num_labels.unwrap_or(4),
                feature_dim: overrides.feature_dim.unwrap_or(8),
                unary_snr: overrides.unary_snr.unwrap_or(1.0),
                transition_strength: overrides.transition_strength.unwrap_or(1.0),
            };
            let dataset = synth_sequences(&params)?;
            save_sequence_dataset(out, &dataset)?;
            println!(
                "wrote {} sequences ({} labels, {} features) to {}",
                dataset.instances.len(),
                dataset.num_labels,
                dataset.feature_dim,
                out.display()
            );
        }
        "synth_seg" => {
            let params = SynthSegParams {
                seed,
                count: overrides.count.unwrap_or(40),
                height: overrides.height.unwrap_or(16),
                width: overrides.width.unwrap_or(16),
                feature_dim: overrides.feature_dim.unwrap_or(4),
                snr: overrides.snr.unwrap_or(1.0),
            };
            let dataset = synth_segmentation(&params)?;
            save_segmentation_dataset(out, &dataset)?;
            println!(
                "wrote {} images ({}x{}, {} features) to {}",
                dataset.instances.len(),
                dataset.height,
                dataset.width,
                dataset.feature_dim,
                out.display()
            );
        }
        other => bail!("unknown kind {other:?}, expected synth_seq or synth_seg"),
    }
    Ok(())
}
