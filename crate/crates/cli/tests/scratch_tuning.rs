use crfscale_core::data::{synth_sequences, SequenceInstance, SynthSeqParams};
use crfscale_core::neural::{Activation, MlpSpec};
use crfscale_core::scaling::{ScalingMode, ScalingState};
use crfscale_core::training::{
    train_joint, train_stage, ChainModel, Objective, OptimizerKind, StageConfig, StageSchedule,
    TrainConfig, TrainableModel,
};

const EPOCHS: usize = 140;
const FEATURE_SCALE: f64 = 12.0;
const PAIRWISE_SHRINK: f64 = 1.0 / 6.0;
const PRETRAIN_EPOCHS: usize = 12;

fn experiment_data() -> (Vec<SequenceInstance>, Vec<SequenceInstance>) {
    let ds = synth_sequences(&SynthSeqParams {
        seed: 90,
        count: 100,
        min_len: 4,
        max_len: 8,
        num_labels: 4,
        feature_dim: 6,
        unary_snr: 0.6,
        transition_strength: 3.5,
    })
    .unwrap();
    let mut train = ds.instances;
    let val = train.split_off(80);
    (train, val)
}

fn spec() -> MlpSpec {
    MlpSpec {
        input_dim: 6,
        hidden_dims: vec![],
        output_dim: 4,
        hidden_activation: Activation::Relu,
        final_activation: Activation::Identity,
        final_bias: true,
    }
}

fn mis_scaled_setup(seed: u64) -> (ChainModel, Vec<SequenceInstance>, Vec<SequenceInstance>) {
    let (train, val) = experiment_data();
    let mut model = ChainModel::new(&spec(), seed).unwrap();
    let base = config(seed, ScalingState::new(ScalingMode::None));
    let idle = StageConfig {
        epochs: 0,
        learning_rate: 1e-2,
        plateau_patience: EPOCHS,
        stop_patience: EPOCHS + 1,
    };
    let schedule = StageSchedule {
        base,
        unary_stage: StageConfig {
            epochs: PRETRAIN_EPOCHS,
            learning_rate: 2e-2,
            plateau_patience: EPOCHS,
            stop_patience: EPOCHS + 1,
        },
        structure_stage: idle.clone(),
        finetune_stage: idle,
    };
    train_stage(&mut model, &train, &val, &schedule).unwrap();

    let scale_all = |insts: Vec<SequenceInstance>| -> Vec<SequenceInstance> {
        insts
            .into_iter()
            .map(|mut inst| {
                for v in inst.features.data_mut() {
                    *v *= FEATURE_SCALE;
                }
                inst
            })
            .collect()
    };
    let train = scale_all(train);
    let val = scale_all(val);

    let mut params = model.flatten_params();
    let layout = model.param_layout();
    let (_, range) = layout.iter().find(|(name, _)| *name == "pairwise").unwrap();
    for p in &mut params[range.clone()] {
        *p *= PAIRWISE_SHRINK;
    }
    model.assign_params(&params).unwrap();
    (model, train, val)
}

fn config(seed: u64, scaling: ScalingState) -> TrainConfig {
    let mut c = TrainConfig::new(Objective::CeExact, seed);
    c.epochs = EPOCHS;
    c.batch_size = 8;
    c.learning_rate = 2e-2;
    c.optimizer = OptimizerKind::adam_default();
    c.plateau_patience = 3;
    c.plateau_factor = 0.05;
    c.metric_threshold = 0.006;
    c.stop_patience = EPOCHS + 1;
    c.probe_size = 16;
    c.scaling = scaling;
    c
}

fn run_joint(seed: u64, scaling: ScalingState) -> (f64, Vec<f64>, Vec<f64>) {
    let (mut model, train, val) = mis_scaled_setup(seed);
    let out = train_joint(&mut model, &train, &val, &config(seed, scaling)).unwrap();
    let metric = out.telemetry.records.last().unwrap().val_metric;
    let ratios = out.telemetry.records.iter().map(|r| r.ratio).collect();
    let lrs = out.telemetry.records.iter().map(|r| r.learning_rate).collect();
    (metric, ratios, lrs)
}

fn run_staged(seed: u64, budgets: (usize, usize, usize, f64)) -> f64 {
    let (mut model, train, val) = mis_scaled_setup(seed);
    let base = config(seed, ScalingState::new(ScalingMode::None));
    let stage = |epochs, lr, patience| StageConfig {
        epochs,
        learning_rate: lr,
        plateau_patience: patience,
        stop_patience: EPOCHS + 1,
    };
    let schedule = StageSchedule {
        base,
        unary_stage: stage(budgets.0, budgets.3, EPOCHS),
        structure_stage: stage(budgets.1, 2e-2, EPOCHS),
        finetune_stage: stage(budgets.2, 2e-3, 3),
    };
    let out = train_stage(&mut model, &train, &val, &schedule).unwrap();
    if seed < 2 && budgets.1 > 0 {
        let vals: Vec<f64> = out.telemetry.records.iter().map(|r| r.val_metric).collect();
        let b1 = budgets.0.min(vals.len()) - 1;
        let b2 = (budgets.0 + budgets.1).min(vals.len()) - 1;
        println!(
            "    stage seed {seed}: after-unary {:.3} after-structure {:.3} final {:.3} (epochs {})",
            vals[b1],
            vals[b2],
            vals.last().unwrap(),
            vals.len()
        );
    }
    out.telemetry.records.last().unwrap().val_metric
}

fn mean_trace(traces: &[Vec<f64>]) -> Vec<f64> {
    let len = traces[0].len();
    (0..len)
        .map(|i| traces.iter().map(|t| t[i]).sum::<f64>() / traces.len() as f64)
        .collect()
}

#[test]
#[ignore]
fn tune_chain_experiment() {
    let seeds: Vec<u64> = (0..8).collect();

    let (model, strain, _sval) = mis_scaled_setup(0);
    let r: f64 = strain[..16]
        .iter()
        .map(|i| model.raw_ratio(i).unwrap())
        .sum::<f64>()
        / 16.0;
    println!("init ratio seed0: {r:.1}");

    let mut means = std::collections::BTreeMap::new();
    let mut plain_mean_final_ratio = 0.0;
    for (name, mode) in [
        ("plain", ScalingMode::None),
        ("online", ScalingMode::Online),
        ("offline", ScalingMode::Offline),
    ] {
        let mut finals = Vec::new();
        let mut traces = Vec::new();
        let mut lr50 = Vec::new();
        for &s in &seeds {
            let (m, tr, lrs) = run_joint(s, ScalingState::new(mode));
            finals.push(m);
            traces.push(tr);
            lr50.push(lrs[EPOCHS / 2]);
        }
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        println!("{name}: mean {mean:.4} finals {finals:.3?} lr@50 {:.1e}", lr50[0]);
        means.insert(name, mean);
        let mt = mean_trace(&traces);
        let half = &mt[EPOCHS / 2..];
        if name == "plain" {
            plain_mean_final_ratio = *mt.last().unwrap();
            let dips: Vec<String> = half
                .windows(2)
                .filter(|w| w[1] < w[0] * (1.0 - 1e-9))
                .map(|w| format!("{:.6}->{:.6}", w[0], w[1]))
                .collect();
            println!(
                "  plain mean trace: final ratio {:.2}, last-half dips {} {:?}",
                mt.last().unwrap(),
                dips.len(),
                dips.iter().take(5).collect::<Vec<_>>()
            );
            for (s, tr) in traces.iter().enumerate() {
                let h = &tr[EPOCHS / 2..];
                let d = h.windows(2).filter(|w| w[1] < w[0] * (1.0 - 1e-9)).count();
                println!("    seed {s}: final {:.2} dips {d}", tr.last().unwrap());
            }
        }
        if name == "online" {
            let lo = half.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = half.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!(
                "  online mean trace: last-half range {:.4} (bound {:.4}) final {:.2}",
                hi - lo,
                0.25 * plain_mean_final_ratio,
                mt.last().unwrap()
            );
        }
    }

    let mut stage_finals = Vec::new();
    let mut unary_finals = Vec::new();
    for &s in &seeds {
        stage_finals.push(run_staged(s, (60, 70, 10, 2e-2)));
        unary_finals.push(run_staged(s, (EPOCHS, 0, 0, 2e-2)));
    }
    let stage_mean = stage_finals.iter().sum::<f64>() / 8.0;
    let unary_mean = unary_finals.iter().sum::<f64>() / 8.0;
    println!("stage: mean {stage_mean:.4} finals {stage_finals:.3?}");
    println!("unary: mean {unary_mean:.4} finals {unary_finals:.3?}");

    for t in [-4i32, 4] {
        let alpha = 2f64.powi(t);
        let mut finals = Vec::new();
        for &s in &seeds {
            let mut fixed = ScalingState::new(ScalingMode::Online);
            fixed.alpha = alpha;
            fixed.grid = vec![alpha];
            let (m, _, _) = run_joint(s, fixed);
            finals.push(m);
        }
        let mean = finals.iter().sum::<f64>() / 8.0;
        println!("fixed alpha {alpha}: mean {mean:.4} (unary bar {unary_mean:.4})");
    }

    let mut temp_means = Vec::new();
    for t in -4i32..=4 {
        let alpha = 2f64.powi(t);
        let mut finals = Vec::new();
        for &s in &seeds {
            let mut state = ScalingState::new(ScalingMode::Temperature);
            state.alpha = alpha;
            let (m, _, _) = run_joint(s, state);
            finals.push(m);
        }
        temp_means.push(finals.iter().sum::<f64>() / 8.0);
    }
    let best_temp = temp_means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("temperature means {temp_means:.4?} best {best_temp:.4}");
    println!(
        "gaps: online-plain {:.4} offline-plain {:.4} stage-(online-0.005) {:.4} besttemp-plain {:.4}",
        means["online"] - means["plain"],
        means["offline"] - means["plain"],
        stage_mean - (means["online"] - 0.005),
        best_temp - means["plain"]
    );
}

#[test]
#[ignore]
fn tune_alpha_sweep() {
    let toml_text = r#"
task = "synth_seq"
seeds = [0]
output_dir = "sweep"

[data]
seed = 90
count = 100
min_len = 4
max_len = 8
num_labels = 4
feature_dim = 6
unary_snr = 0.6
transition_strength = 3.5
train_fraction = 0.8
feature_scale = 1.0

[model]
hidden_dims = []
unary_gain = 1.0
pairwise_scale = 1.0
unary_pretrain_epochs = 0

[objective]
kind = "ce_exact"

[schedule]
kind = "joint"
epochs = 140
batch_size = 8
plateau_patience = 3
plateau_factor = 0.05
stop_patience = 141
metric_threshold = 0.006
probe_size = 16

[scaling]
mode = "none"

[optimizer]
kind = "adam"
learning_rate = 0.02
"#;
    let config: crfscale_cli::config::RunConfig = toml::from_str(toml_text).unwrap();
    config.validate().unwrap();
    let alphas: Vec<f64> = (-4..=4).map(|t| 2f64.powi(t)).collect();
    let seeds: Vec<u64> = (0..8).collect();
    let dir = tempfile::tempdir().unwrap();
    let rows = crfscale_cli::run::cmd_alpha_sweep(&config, &alphas, &seeds, dir.path()).unwrap();
    for r in &rows {
        println!(
            "  {} alpha {:?} mean {:?} failed {}",
            r.setting, r.alpha, r.mean_metric, r.failed_seeds
        );
    }
}

#[test]
#[ignore]
fn tune_gcrf_experiment() {
    use crfscale_core::data::{synth_segmentation, SegmentationInstance, SynthSegParams};
    use crfscale_core::gcrf::solve_scores;
    use crfscale_core::training::GcrfModel;

    let envf = |k: &str, d: f64| -> f64 {
        std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
    };
    let lambda = envf("T_LAMBDA", 40.0);
    let gain = envf("T_GAIN", 200.0);
    let embed_damp = envf("T_DAMP", 0.7);
    let lr = envf("T_LR", 1e-2);
    let g_epochs = envf("T_EPOCHS", 12.0) as usize;
    println!("lambda {lambda} gain {gain} damp {embed_damp} lr {lr} epochs {g_epochs}");

    let ds = synth_segmentation(&SynthSegParams {
        seed: 77,
        count: 40,
        height: 16,
        width: 16,
        feature_dim: 4,
        snr: 0.8,
    })
    .unwrap();
    let mut train = ds.instances;
    let val = train.split_off(32);

    let unary_spec = MlpSpec {
        input_dim: 4,
        hidden_dims: vec![8],
        output_dim: 2,
        hidden_activation: Activation::Relu,
        final_activation: Activation::Identity,
        final_bias: true,
    };
    let embed_spec = MlpSpec {
        input_dim: 4,
        hidden_dims: vec![8],
        output_dim: 3,
        hidden_activation: Activation::Relu,
        final_activation: Activation::Identity,
        final_bias: true,
    };

    let build = |seed: u64| {
        let mut model =
            GcrfModel::with_unary_gain(&unary_spec, &embed_spec, lambda, seed, gain).unwrap();
        let mut params = model.flatten_params();
        let layout = model.param_layout();
        let (_, range) = layout.iter().find(|(n, _)| *n == "embed_net").unwrap();
        for p in &mut params[range.clone()] {
            *p *= embed_damp;
        }
        model.assign_params(&params).unwrap();
        model
    };

    let sigma_max = |model: &GcrfModel, inst: &SegmentationInstance| -> f64 {
        let (sys, _, _) = model.system(&inst.features).unwrap();
        let n = sys.dim();
        let mut v: Vec<f64> = (0..n).map(|i| ((i * 37 + 11) % 97) as f64 / 97.0 - 0.5).collect();
        let mut out = vec![0.0; n];
        let mut eig = 0.0;
        for _ in 0..60 {
            sys.apply_pairwise(&v, &mut out);
            let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-30 {
                return 0.0;
            }
            eig = norm;
            for (a, b) in v.iter_mut().zip(&out) {
                *a = b / norm;
            }
        }
        eig
    };

    let max_residual = |model: &GcrfModel, insts: &[SegmentationInstance]| -> (f64, usize) {
        let mut worst = 0.0f64;
        let mut worst_iters = 0;
        for inst in insts {
            let (sys, _, _) = model.system(&inst.features).unwrap();
            let sol = solve_scores(&sys, 1e-10).unwrap();
            if sol.residual > worst {
                worst = sol.residual;
                worst_iters = sol.iters;
            }
        }
        (worst, worst_iters)
    };

    let m0 = build(0);
    let ratio: f64 = val.iter().map(|i| m0.raw_ratio(i).unwrap()).sum::<f64>() / val.len() as f64;
    let sig0 = sigma_max(&m0, &val[0]);
    let (res0, it0) = max_residual(&m0, &val);
    println!("init: ratio {ratio:.1} sigma_max {sig0:.1} (lambda {lambda}) cg res {res0:.2e} iters {it0}");

    let gconfig = |seed: u64, scaling: ScalingState| {
        let mut c = TrainConfig::new(Objective::CeExact, seed);
        c.epochs = g_epochs;
        c.batch_size = 4;
        c.learning_rate = lr;
        c.optimizer = OptimizerKind::adam_default();
        c.plateau_patience = g_epochs + 1;
        c.plateau_factor = 0.5;
        c.metric_threshold = 0.002;
        c.stop_patience = g_epochs + 1;
        c.probe_size = 8;
        c.scaling = scaling;
        c
    };

    let t0 = std::time::Instant::now();
    for (name, mode) in [("plain", ScalingMode::None), ("online", ScalingMode::Online)] {
        let mut finals = Vec::new();
        let mut diverged = Vec::new();
        let mut worst_sig: f64 = 0.0;
        let mut worst_res: f64 = 0.0;
        for seed in 0..8u64 {
            let mut model = build(seed);
            let out = train_joint(&mut model, &train, &val, &gconfig(seed, ScalingState::new(mode)))
                .unwrap();
            let metric = match out.telemetry.records.last() {
                Some(rec) => rec.val_metric,
                None => crfscale_core::training::evaluate(&model, &val, Objective::CeExact, &out.scaling)
                    .unwrap(),
            };
            finals.push(metric);
            diverged.push(out.telemetry.diverged_at.map(|e| e as i64).unwrap_or(-1));
            worst_sig = worst_sig.max(sigma_max(&model, &val[0]));
            let (r, _) = max_residual(&model, &val);
            worst_res = worst_res.max(r);
        }
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        println!(
            "{name}: mean {mean:.4} finals {finals:.3?} diverged {diverged:?} post sigma_max {worst_sig:.1} cg res {worst_res:.2e}"
        );
    }
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
}

#[test]
#[ignore]
fn tune_gcrf_nan() {
    use crfscale_core::data::{synth_segmentation, SynthSegParams};
    use crfscale_core::training::GcrfModel;

    let ds = synth_segmentation(&SynthSegParams {
        seed: 77,
        count: 40,
        height: 16,
        width: 16,
        feature_dim: 4,
        snr: 0.8,
    })
    .unwrap();
    let train = &ds.instances[..32];

    let unary_spec = MlpSpec {
        input_dim: 4,
        hidden_dims: vec![8],
        output_dim: 2,
        hidden_activation: Activation::Relu,
        final_activation: Activation::Identity,
        final_bias: true,
    };
    let embed_spec = MlpSpec {
        input_dim: 4,
        hidden_dims: vec![8],
        output_dim: 3,
        hidden_activation: Activation::Relu,
        final_activation: Activation::Identity,
        final_bias: true,
    };
    let mut model = GcrfModel::with_unary_gain(&unary_spec, &embed_spec, 400.0, 0, 12.0).unwrap();
    {
        let mut params = model.flatten_params();
        let layout = model.param_layout();
        let (_, range) = layout.iter().find(|(n, _)| *n == "embed_net").unwrap();
        for p in &mut params[range.clone()] {
            *p *= 0.7;
        }
        model.assign_params(&params).unwrap();
    }

    let scaling = ScalingState::new(ScalingMode::None);
    let mut opt = crfscale_core::training::Optimizer::new(
        OptimizerKind::adam_default(),
        1e-2,
        model.num_params(),
    );
    'outer: for step in 0..200 {
        let inst = &train[step % train.len()];
        match model.loss_grad(inst, Objective::CeExact, &scaling) {
            Ok((loss, grad)) => {
                let finite = grad.iter().all(|g| g.is_finite());
                if step % 8 == 0 || !finite || !loss.is_finite() {
                    let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                    println!("step {step}: loss {loss:.4} gnorm {gnorm:.3e} finite {finite}");
                }
                if !finite || !loss.is_finite() {
                    break;
                }
                let mut params = model.flatten_params();
                let _ = opt.step(&mut params, &grad);
                let pfin = params.iter().all(|p| p.is_finite());
                model.assign_params(&params).unwrap();
                if !pfin {
                    println!("step {step}: params went non-finite");
                    break;
                }
                if step % 8 == 7 {
                    match crfscale_core::training::evaluate(
                        &model,
                        &ds.instances[32..],
                        Objective::CeExact,
                        &scaling,
                    ) {
                        Ok(m) => println!("  epoch {}: val {m:.4}", step / 8),
                        Err(e) => {
                            println!("  epoch {}: evaluate error: {e}", step / 8);
                            break 'outer;
                        }
                    }
                }
            }
            Err(e) => {
                println!("step {step}: loss_grad error: {e}");
                break;
            }
        }
    }
}
