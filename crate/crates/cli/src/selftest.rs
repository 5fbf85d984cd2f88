//! Fast end-to-end checks against the independent oracles, runnable on
//! any install without test infrastructure.

use crfscale_core::chain_crf::{forward_backward, map_decode, ChainPotentials};
use crfscale_core::check::enumerate_chain;
use crfscale_core::data::{synth_segmentation, synth_sequences, SynthSegParams, SynthSeqParams};
use crfscale_core::gcrf;
use crfscale_core::numerics::{
    finite_difference_grad, max_rel_deviation, seeded_rng, RngDomain, Tensor, CG_DEFAULT_TOL,
};
use crfscale_core::scaling::{ScalingMode, ScalingState};
use crfscale_core::training::{
    rescaling_equivalence_check, train_joint_observed, ChainModel, GcrfModel, Objective,
    TrainConfig, TrainableModel,
};
use crfscale_core::neural::{Activation, MlpSpec};
use rand::Rng;

fn random_potentials(seed: u64, len: usize, labels: usize) -> ChainPotentials {
    let mut rng = seeded_rng(seed, RngDomain::Probe);
    let unary: Vec<f64> = (0..len * labels).map(|_| rng.random_range(-2.0..2.0)).collect();
    let pairwise: Vec<f64> = (0..labels * labels).map(|_| rng.random_range(-2.0..2.0)).collect();
    ChainPotentials::new(
        Tensor::matrix(len, labels, unary).unwrap(),
        Tensor::matrix(labels, labels, pairwise).unwrap(),
    )
    .unwrap()
}

fn check_chain_inference() -> Result<(), String> {
    for seed in 0..20u64 {
        let len = 2 + (seed as usize % 4);
        let labels = 2 + (seed as usize % 3);
        let p = random_potentials(seed, len, labels);
        let exact = enumerate_chain(&p);
        let inferred = forward_backward(&p);
        let rel = (inferred.log_partition - exact.log_partition).abs()
            / exact.log_partition.abs().max(1.0);
        if rel > 1e-9 {
            return Err(format!("seed {seed}: log partition off by rel {rel:e}"));
        }
        let (labels_hat, _) = map_decode(&p);
        if labels_hat != exact.best_labeling {
            return Err(format!("seed {seed}: decoder disagrees with enumeration"));
        }
    }
    Ok(())
}

fn chain_fixture(seed: u64) -> (ChainModel, crfscale_core::data::SequenceDataset) {
    let spec = MlpSpec {
        input_dim: 4,
        hidden_dims: vec![6],
        output_dim: 3,
        hidden_activation: Activation::Relu,
        final_activation: Activation::Identity,
        final_bias: true,
    };
    let data = synth_sequences(&SynthSeqParams {
        seed,
        count: 8,
        min_len: 3,
        max_len: 5,
        num_labels: 3,
        feature_dim: 4,
        unary_snr: 1.5,
        transition_strength: 1.0,
    })
    .unwrap();
    (ChainModel::new(&spec, seed).unwrap(), data)
}

fn check_chain_gradients() -> Result<(), String> {
    let plain = ScalingState::new(ScalingMode::None);
    for (objective, seeds) in [
        (Objective::Nll, 0..2u64),
        (Objective::CeExact, 2..4),
        (Objective::Ssvm, 4..6),
    ] {
        for seed in seeds {
            let (model, data) = chain_fixture(seed);
            let inst = &data.instances[0];
            let (_, grad) = model
                .loss_grad(inst, objective, &plain)
                .map_err(|e| e.to_string())?;
            let base = model.flatten_params();
            let fd = finite_difference_grad(
                |params| {
                    let mut probe = model.clone();
                    probe.assign_params(params).unwrap();
                    probe.loss_grad(inst, objective, &plain).unwrap().0
                },
                &base,
                1e-5,
            )
            .map_err(|e| e.to_string())?;
            let dev = max_rel_deviation(&grad, &fd, 1e-6);
            if dev > 1e-4 {
                return Err(format!(
                    "{} seed {seed}: analytic vs numeric gradient deviates {dev:e}",
                    objective.name()
                ));
            }
        }
    }
    Ok(())
}

fn check_gcrf() -> Result<(), String> {
    let unary_spec = MlpSpec {
        input_dim: 3,
        hidden_dims: vec![4],
        output_dim: 2,
        hidden_activation: Activation::Relu,
        final_activation: Activation::Identity,
        final_bias: true,
    };
    let embed_spec = MlpSpec {
        input_dim: 3,
        hidden_dims: vec![4],
        output_dim: 3,
        hidden_activation: Activation::Relu,
        final_activation: Activation::Identity,
        final_bias: true,
    };
    let data = synth_segmentation(&SynthSegParams {
        seed: 5,
        count: 2,
        height: 3,
        width: 3,
        feature_dim: 3,
        snr: 1.5,
    })
    .unwrap();
    // The diagonal term must dominate the coupling's spectral radius for
    // the quadratic model to be well posed.
    let model = GcrfModel::new(&unary_spec, &embed_spec, 6.0, 7).map_err(|e| e.to_string())?;

    let (sys, _, _) = model
        .system(&data.instances[0].features)
        .map_err(|e| e.to_string())?;
    let solved = gcrf::solve_scores(&sys, CG_DEFAULT_TOL).map_err(|e| e.to_string())?;
    if solved.residual > CG_DEFAULT_TOL * 10.0 {
        return Err(format!("solver residual {:e} above tolerance", solved.residual));
    }

    let plain = ScalingState::new(ScalingMode::None);
    let inst = &data.instances[0];
    let (_, grad) = model
        .loss_grad(inst, Objective::CeExact, &plain)
        .map_err(|e| e.to_string())?;
    let base = model.flatten_params();
    let fd = finite_difference_grad(
        |params| {
            let mut probe = model.clone();
            probe.assign_params(params).unwrap();
            probe.loss_grad(inst, Objective::CeExact, &plain).unwrap().0
        },
        &base,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    let dev = max_rel_deviation(&grad, &fd, 1e-6);
    if dev > 1e-4 {
        return Err(format!("analytic vs numeric gradient deviates {dev:e}"));
    }
    Ok(())
}

fn check_rescaling_equivalence() -> Result<(), String> {
    let dev = rescaling_equivalence_check(0, 0.25, 0.05, 10).map_err(|e| e.to_string())?;
    if dev.final_layer > 1e-8 || dev.feature_layers > 1e-8 {
        return Err(format!(
            "runs diverged: final layer {:e}, feature layers {:e}",
            dev.final_layer, dev.feature_layers
        ));
    }
    Ok(())
}

fn check_online_grid() -> Result<(), String> {
    let (mut model, data) = chain_fixture(11);
    let mut config = TrainConfig::new(Objective::CeExact, 11);
    config.epochs = 2;
    config.batch_size = 4;
    config.probe_size = 4;
    config.scaling = ScalingState::new(ScalingMode::Online);
    let train = &data.instances[..6];
    let val = &data.instances[6..];
    let mut mismatches = 0usize;
    train_joint_observed(&mut model, train, val, &config, |m, probe, scaling, _| {
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
    .map_err(|e| e.to_string())?;
    if mismatches > 0 {
        return Err(format!("{mismatches} epochs picked a non-minimal alpha"));
    }
    Ok(())
}

/// Runs every check, printing one line per suite; returns false when any
/// failed.
pub fn cmd_selftest() -> bool {
    let checks: [(&str, fn() -> Result<(), String>); 5] = [
        ("chain inference vs enumeration", check_chain_inference),
        ("loss gradients vs finite differences", check_chain_gradients),
        ("gcrf solve and gradients", check_gcrf),
        ("rescaling equivalence under sgd", check_rescaling_equivalence),
        ("online alpha grid search", check_online_grid),
    ];
    let mut ok = true;
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("ok   {name}"),
            Err(msg) => {
                ok = false;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    if ok {
        println!("selftest passed ({} suites)", checks.len());
    } else {
        println!("selftest FAILED");
    }
    ok
}
