//! Neural-potential models for both structured tasks, the glue between
//! networks, potentials, objectives, and scaling, plus checkpointing.
//!
//! A chain model maps per-position features through a shared unary network
//! and keeps a learned label-transition table. A segmentation model maps
//! per-pixel features through a unary network (two scores per pixel) and an
//! embedding network whose outer products form the pairwise coupling. Both
//! expose a flat parameter vector so optimizers stay model-agnostic.

use crate::chain_crf::{
    forward_backward, loss_ce, loss_nll, loss_ssvm, map_decode, mean_field, ChainPotentials,
    MarginalSource,
};
use crate::data::{
    atomic_write, ByteReader, ByteWriter, SegmentationInstance, SequenceInstance,
};
use crate::error::{Error, Result};
use crate::gcrf::{self, GcrfSystem};
use crate::neural::{self, Activation, Mlp, MlpSpec, ParamGrads, Tape};
use crate::numerics::{log_softmax_in_place, Tensor, CG_DEFAULT_TOL};
use crate::scaling::{
    apply_unary_scale, offline_normalize_backward, offline_normalize_guarded, offline_scales_gcrf_guarded,
    potential_ratio, potential_ratio_gcrf, ratio_regularizer, ratio_regularizer_gcrf,
    temperature_scale, ScalingMode, ScalingState, NORM_FLOOR,
};
use std::ops::Range;
use std::path::Path;

/// Training objective for the chain task. The segmentation model always
/// trains with its cross-entropy and ignores this choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Nll,
    CeExact,
    CeMeanField { sweeps: usize },
    Ssvm,
}

impl Objective {
    /// Parses the config-file spelling; mean-field sweep count comes from a
    /// separate knob.
    pub fn parse(name: &str, meanfield_sweeps: usize) -> Result<Self> {
        match name {
            "nll" => Ok(Objective::Nll),
            "ce_exact" => Ok(Objective::CeExact),
            "ce_meanfield" => {
                if meanfield_sweeps == 0 {
                    return Err(Error::Config("meanfield_sweeps must be at least 1".into()));
                }
                Ok(Objective::CeMeanField {
                    sweeps: meanfield_sweeps,
                })
            }
            "ssvm" => Ok(Objective::Ssvm),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Nll => "nll",
            Objective::CeExact => "ce_exact",
            Objective::CeMeanField { .. } => "ce_meanfield",
            Objective::Ssvm => "ssvm",
        }
    }
}

/// Shared behavior the training loops need from a model.
pub trait TrainableModel: Clone + Send + Sync {
    type Instance: Send + Sync;

    fn num_params(&self) -> usize;
    fn flatten_params(&self) -> Vec<f64>;
    fn assign_params(&mut self, flat: &[f64]) -> Result<()>;
    /// Named contiguous segments of the flat vector, for error reporting.
    fn param_layout(&self) -> Vec<(&'static str, Range<usize>)>;
    /// Segment holding the unary network, frozen during stage-2 training.
    fn unary_param_range(&self) -> Range<usize>;
    /// Final linear layer of the unary network within the flat vector.
    fn final_layer_range(&self) -> Range<usize>;

    /// Loss and flat gradient on one instance under the given objective and
    /// scaling mode.
    fn loss_grad(
        &self,
        inst: &Self::Instance,
        objective: Objective,
        scaling: &ScalingState,
    ) -> Result<(f64, Vec<f64>)>;
    /// Per-position classification loss on the unary network alone,
    /// ignoring all structure. Gradient is zero outside the unary segment.
    fn unary_only_loss_grad(&self, inst: &Self::Instance) -> Result<(f64, Vec<f64>)>;

    fn predict(
        &self,
        inst: &Self::Instance,
        objective: Objective,
        scaling: &ScalingState,
    ) -> Result<Vec<usize>>;
    fn predict_unary_only(&self, inst: &Self::Instance) -> Result<Vec<usize>>;

    fn gold<'a>(&self, inst: &'a Self::Instance) -> &'a [usize];
    /// Unary-to-pairwise magnitude ratio of the raw potentials produced for
    /// this instance.
    fn raw_ratio(&self, inst: &Self::Instance) -> Result<f64>;
    /// Task metric over aligned predictions and golds, higher is better.
    fn metric(&self, preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64>;
}

/// Chain CRF with a neural unary network and a learned transition table.
#[derive(Debug, Clone)]
pub struct ChainModel {
    unary_net: Mlp,
    pairwise: Tensor,
}

impl ChainModel {
    /// Fresh model: network weights at the standard fan-in scale, the
    /// transition table uniform in ±1/sqrt(num_labels).
    pub fn new(spec: &MlpSpec, seed: u64) -> Result<Self> {
        let unary_net = neural::init_params(spec, seed)?;
        let m = spec.output_dim;
        let mut rng = crate::numerics::seeded_rng(seed.wrapping_add(1), crate::numerics::RngDomain::ParamInit);
        use rand::Rng;
        let bound = 1.0 / (m as f64).sqrt();
        let pairwise = Tensor::from_vec(
            vec![m, m],
            (0..m * m).map(|_| rng.random_range(-bound..bound)).collect(),
        )?;
        Ok(Self { unary_net, pairwise })
    }

    /// Fresh model with the unary network's final layer inflated by `gain`,
    /// producing a deliberately mis-scaled starting point.
    pub fn with_unary_gain(spec: &MlpSpec, seed: u64, gain: f64) -> Result<Self> {
        let mut model = Self::new(spec, seed)?;
        model.unary_net.scale_final_layer(gain);
        Ok(model)
    }

    pub fn num_labels(&self) -> usize {
        self.unary_net.output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.unary_net.input_dim()
    }

    pub fn unary_net(&self) -> &Mlp {
        &self.unary_net
    }

    pub fn pairwise(&self) -> &Tensor {
        &self.pairwise
    }

    /// Raw potentials for one feature sequence, with the per-position tapes
    /// needed for backprop.
    pub fn potentials(&self, features: &Tensor) -> Result<(ChainPotentials, Vec<Tape>)> {
        let len = features.rows();
        let m = self.num_labels();
        let mut unary = Tensor::zeros(&[len, m]);
        let mut tapes = Vec::with_capacity(len);
        for j in 0..len {
            let (out, tape) = neural::forward(&self.unary_net, features.row(j))?;
            unary.row_mut(j).copy_from_slice(&out);
            tapes.push(tape);
        }
        let p = ChainPotentials::new(unary, self.pairwise.clone())?;
        Ok((p, tapes))
    }

    fn backprop_unary(&self, tapes: &[Tape], grad_unary: &Tensor) -> Result<ParamGrads> {
        let mut grads = ParamGrads::zeros_like(&self.unary_net);
        for (j, tape) in tapes.iter().enumerate() {
            let (pg, _) = neural::backward(&self.unary_net, tape, grad_unary.row(j))?;
            grads.add_assign(&pg);
        }
        Ok(grads)
    }
}

fn chain_objective_loss(
    p: &ChainPotentials,
    y: &[usize],
    objective: Objective,
) -> Result<(f64, Tensor, Tensor)> {
    match objective {
        Objective::Nll => loss_nll(p, y),
        Objective::CeExact => loss_ce(p, y, MarginalSource::Exact),
        Objective::CeMeanField { sweeps } => loss_ce(p, y, MarginalSource::MeanField { sweeps }),
        Objective::Ssvm => loss_ssvm(p, y).map(|(l, gu, gw, _)| (l, gu, gw)),
    }
}

/// Loss and potential-space gradients with the scaling mode folded in: the
/// objective sees the transformed potentials, and the returned gradients are
/// with respect to the raw ones.
fn scaled_chain_loss(
    p: &ChainPotentials,
    y: &[usize],
    objective: Objective,
    scaling: &ScalingState,
) -> Result<(f64, Tensor, Tensor)> {
    match scaling.mode {
        ScalingMode::None => chain_objective_loss(p, y, objective),
        ScalingMode::Online => {
            let q = apply_unary_scale(p, scaling.alpha)?;
            let (loss, gu_hat, gw) = chain_objective_loss(&q, y, objective)?;
            Ok((loss, gu_hat.scaled(scaling.alpha), gw))
        }
        ScalingMode::Temperature => {
            let q = temperature_scale(p, scaling.alpha)?;
            let (loss, gu_hat, gw_hat) = chain_objective_loss(&q, y, objective)?;
            Ok((
                loss,
                gu_hat.scaled(scaling.alpha),
                gw_hat.scaled(scaling.alpha),
            ))
        }
        ScalingMode::Offline => {
            let q = offline_normalize_guarded(p, scaling.alpha)?;
            let (loss, gu_hat, gw_hat) = chain_objective_loss(&q, y, objective)?;
            let (gu, gw) = offline_normalize_backward(p, scaling.alpha, &gu_hat, &gw_hat);
            Ok((loss, gu, gw))
        }
        ScalingMode::OfflineReg => {
            let (loss, mut gu, mut gw) = chain_objective_loss(p, y, objective)?;
            let (penalty, rgu, rgw) = ratio_regularizer(p, scaling.reg_lambda, scaling.reg_alpha)?;
            gu.add_assign(&rgu);
            gw.add_assign(&rgw);
            Ok((loss + penalty, gu, gw))
        }
    }
}

/// The potentials inference should run on at evaluation time under the
/// given scaling mode.
fn eval_chain_potentials(p: &ChainPotentials, scaling: &ScalingState) -> Result<ChainPotentials> {
    match scaling.mode {
        ScalingMode::None | ScalingMode::OfflineReg => Ok(p.clone()),
        ScalingMode::Online => apply_unary_scale(p, scaling.alpha),
        ScalingMode::Offline => offline_normalize_guarded(p, scaling.alpha),
        ScalingMode::Temperature => temperature_scale(p, scaling.alpha),
    }
}

fn decode_chain(p: &ChainPotentials, objective: Objective) -> Vec<usize> {
    let argmax_rows = |marginals: &Tensor| -> Vec<usize> {
        (0..marginals.rows())
            .map(|j| {
                let row = marginals.row(j);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    };
    match objective {
        Objective::CeExact => argmax_rows(&forward_backward(p).unary_marginals),
        Objective::CeMeanField { sweeps } => argmax_rows(&mean_field(p, sweeps)),
        Objective::Nll | Objective::Ssvm => map_decode(p).0,
    }
}

impl TrainableModel for ChainModel {
    type Instance = SequenceInstance;

    fn num_params(&self) -> usize {
        self.unary_net.num_params() + self.pairwise.len()
    }

    fn flatten_params(&self) -> Vec<f64> {
        let mut flat = self.unary_net.flatten_params();
        flat.extend_from_slice(self.pairwise.data());
        flat
    }

    fn assign_params(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.unary_net.num_params();
        if flat.len() != n + self.pairwise.len() {
            return Err(Error::DataLength {
                expected: n + self.pairwise.len(),
                got: flat.len(),
            });
        }
        self.unary_net.assign_params(&flat[..n])?;
        for (dst, &src) in self.pairwise.data_mut().iter_mut().zip(&flat[n..]) {
            *dst = src;
        }
        if !self.pairwise.all_finite() {
            return Err(Error::NonFinite("pairwise table".into()));
        }
        Ok(())
    }

    fn param_layout(&self) -> Vec<(&'static str, Range<usize>)> {
        let n = self.unary_net.num_params();
        vec![
            ("unary_net", 0..n),
            ("pairwise", n..n + self.pairwise.len()),
        ]
    }

    fn unary_param_range(&self) -> Range<usize> {
        0..self.unary_net.num_params()
    }

    fn final_layer_range(&self) -> Range<usize> {
        self.unary_net.final_layer_range()
    }

    fn loss_grad(
        &self,
        inst: &SequenceInstance,
        objective: Objective,
        scaling: &ScalingState,
    ) -> Result<(f64, Vec<f64>)> {
        let (p, tapes) = self.potentials(&inst.features)?;
        let (loss, gu, gw) = scaled_chain_loss(&p, &inst.labels, objective, scaling)?;
        let net_grads = self.backprop_unary(&tapes, &gu)?;
        let mut flat = net_grads.flatten();
        flat.extend_from_slice(gw.data());
        Ok((loss, flat))
    }

    fn unary_only_loss_grad(&self, inst: &SequenceInstance) -> Result<(f64, Vec<f64>)> {
        let len = inst.features.rows();
        let m = self.num_labels();
        let mut loss = 0.0;
        let mut grads = ParamGrads::zeros_like(&self.unary_net);
        for j in 0..len {
            let (out, tape) = neural::forward(&self.unary_net, inst.features.row(j))?;
            let mut logp = out.clone();
            log_softmax_in_place(&mut logp);
            let label = inst.labels[j];
            if label >= m {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_labels: m,
                    pos: j,
                });
            }
            loss -= logp[label] / len as f64;
            let mut dl: Vec<f64> = logp.iter().map(|lp| lp.exp() / len as f64).collect();
            dl[label] -= 1.0 / len as f64;
            let (pg, _) = neural::backward(&self.unary_net, &tape, &dl)?;
            grads.add_assign(&pg);
        }
        let mut flat = grads.flatten();
        flat.extend(std::iter::repeat(0.0).take(self.pairwise.len()));
        Ok((loss, flat))
    }

    fn predict(
        &self,
        inst: &SequenceInstance,
        objective: Objective,
        scaling: &ScalingState,
    ) -> Result<Vec<usize>> {
        let (p, _) = self.potentials(&inst.features)?;
        let q = eval_chain_potentials(&p, scaling)?;
        Ok(decode_chain(&q, objective))
    }

    fn predict_unary_only(&self, inst: &SequenceInstance) -> Result<Vec<usize>> {
        let len = inst.features.rows();
        let mut preds = Vec::with_capacity(len);
        for j in 0..len {
            let (out, _) = neural::forward(&self.unary_net, inst.features.row(j))?;
            let mut best = 0;
            for (k, &v) in out.iter().enumerate() {
                if v > out[best] {
                    best = k;
                }
            }
            preds.push(best);
        }
        Ok(preds)
    }

    fn gold<'a>(&self, inst: &'a SequenceInstance) -> &'a [usize] {
        &inst.labels
    }

    fn raw_ratio(&self, inst: &SequenceInstance) -> Result<f64> {
        let (p, _) = self.potentials(&inst.features)?;
        Ok(potential_ratio(&p))
    }

    fn metric(&self, preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
        crate::data::metric_accuracy(preds, golds)
    }
}

/// Gaussian CRF with a unary network (two scores per pixel) and an embedding
/// network whose pairwise coupling is formed matrix-free.
#[derive(Debug, Clone)]
pub struct GcrfModel {
    unary_net: Mlp,
    embed_net: Mlp,
    lambda: f64,
}

impl GcrfModel {
    pub fn new(unary_spec: &MlpSpec, embed_spec: &MlpSpec, lambda: f64, seed: u64) -> Result<Self> {
        if unary_spec.output_dim != 2 {
            return Err(Error::Config(format!(
                "unary network must emit 2 scores per pixel, spec says {}",
                unary_spec.output_dim
            )));
        }
        if unary_spec.input_dim != embed_spec.input_dim {
            return Err(Error::Config(format!(
                "unary and embedding networks disagree on feature dim: {} vs {}",
                unary_spec.input_dim, embed_spec.input_dim
            )));
        }
        if !(lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self {
            unary_net: neural::init_params(unary_spec, seed)?,
            embed_net: neural::init_params(embed_spec, seed.wrapping_add(1))?,
            lambda,
        })
    }

    pub fn with_unary_gain(
        unary_spec: &MlpSpec,
        embed_spec: &MlpSpec,
        lambda: f64,
        seed: u64,
        gain: f64,
    ) -> Result<Self> {
        let mut model = Self::new(unary_spec, embed_spec, lambda, seed)?;
        model.unary_net.scale_final_layer(gain);
        Ok(model)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn unary_net(&self) -> &Mlp {
        &self.unary_net
    }

    pub fn embed_net(&self) -> &Mlp {
        &self.embed_net
    }

    /// Builds the quadratic system for one image, keeping both networks'
    /// tapes for backprop. Unaries are class-major: all class-1 scores,
    /// then all class-2 scores.
    pub fn system(&self, features: &Tensor) -> Result<(GcrfSystem, Vec<Tape>, Vec<Tape>)> {
        let pixels = features.rows();
        let depth = self.embed_net.output_dim();
        let mut unary = vec![0.0; 2 * pixels];
        let mut embeddings = Tensor::zeros(&[pixels, depth]);
        let mut unary_tapes = Vec::with_capacity(pixels);
        let mut embed_tapes = Vec::with_capacity(pixels);
        for j in 0..pixels {
            let (scores, tape) = neural::forward(&self.unary_net, features.row(j))?;
            unary[j] = scores[0];
            unary[pixels + j] = scores[1];
            unary_tapes.push(tape);
            let (emb, tape) = neural::forward(&self.embed_net, features.row(j))?;
            embeddings.row_mut(j).copy_from_slice(&emb);
            embed_tapes.push(tape);
        }
        let sys = GcrfSystem::new(unary, embeddings, self.lambda)?;
        Ok((sys, unary_tapes, embed_tapes))
    }

    /// Scale factors the mode implies for this system's solve.
    fn mode_scales(&self, sys: &GcrfSystem, scaling: &ScalingState) -> Result<(f64, f64)> {
        match scaling.mode {
            ScalingMode::None | ScalingMode::OfflineReg => Ok((1.0, 1.0)),
            ScalingMode::Online => Ok((scaling.alpha, 1.0)),
            ScalingMode::Temperature => Ok((scaling.alpha, scaling.alpha)),
            ScalingMode::Offline => offline_scales_gcrf_guarded(sys, scaling.alpha),
        }
    }

    fn backprop_nets(
        &self,
        unary_tapes: &[Tape],
        embed_tapes: &[Tape],
        dl_du: &[f64],
        dl_da: &Tensor,
    ) -> Result<(ParamGrads, ParamGrads)> {
        let pixels = unary_tapes.len();
        let mut unary_grads = ParamGrads::zeros_like(&self.unary_net);
        let mut embed_grads = ParamGrads::zeros_like(&self.embed_net);
        for j in 0..pixels {
            let dl_dy = [dl_du[j], dl_du[pixels + j]];
            let (pg, _) = neural::backward(&self.unary_net, &unary_tapes[j], &dl_dy)?;
            unary_grads.add_assign(&pg);
            let (pg, _) = neural::backward(&self.embed_net, &embed_tapes[j], dl_da.row(j))?;
            embed_grads.add_assign(&pg);
        }
        Ok((unary_grads, embed_grads))
    }
}

impl TrainableModel for GcrfModel {
    type Instance = SegmentationInstance;

    fn num_params(&self) -> usize {
        self.unary_net.num_params() + self.embed_net.num_params()
    }

    fn flatten_params(&self) -> Vec<f64> {
        let mut flat = self.unary_net.flatten_params();
        flat.extend(self.embed_net.flatten_params());
        flat
    }

    fn assign_params(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.unary_net.num_params();
        if flat.len() != self.num_params() {
            return Err(Error::DataLength {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        self.unary_net.assign_params(&flat[..n])?;
        self.embed_net.assign_params(&flat[n..])
    }

    fn param_layout(&self) -> Vec<(&'static str, Range<usize>)> {
        let n = self.unary_net.num_params();
        vec![
            ("unary_net", 0..n),
            ("embed_net", n..self.num_params()),
        ]
    }

    fn unary_param_range(&self) -> Range<usize> {
        0..self.unary_net.num_params()
    }

    fn final_layer_range(&self) -> Range<usize> {
        self.unary_net.final_layer_range()
    }

    fn loss_grad(
        &self,
        inst: &SegmentationInstance,
        _objective: Objective,
        scaling: &ScalingState,
    ) -> Result<(f64, Vec<f64>)> {
        let (sys, unary_tapes, embed_tapes) = self.system(&inst.features)?;
        let (unary_scale, pairwise_scale) = self.mode_scales(&sys, scaling)?;
        let ce = gcrf::loss_ce_scaled(&sys, &inst.mask, unary_scale, pairwise_scale, CG_DEFAULT_TOL)?;

        let mut loss = ce.loss;
        let mut dl_du = ce.backward.dl_du.clone();
        let mut dl_da = ce.backward.dl_da.clone();

        match scaling.mode {
            ScalingMode::Offline => {
                // The scales are themselves functions of the potentials:
                // unary_scale = alpha / mean_abs(U), pairwise_scale =
                // 1 / pairwise_norm(A); chain their derivatives unless the
                // norm sat at the floor, where the clamp is constant.
                let unary_norm = sys.unary_norm();
                if unary_norm >= NORM_FLOOR {
                    let count = sys.unary().len() as f64;
                    let factor = -scaling.alpha / (count * unary_norm * unary_norm);
                    let g_scale = ce.backward.dl_dunary_scale;
                    for (g, &u) in dl_du.iter_mut().zip(sys.unary()) {
                        if u != 0.0 {
                            *g += g_scale * factor * u.signum();
                        }
                    }
                }
                let pairwise_norm = sys.pairwise_norm();
                if pairwise_norm >= NORM_FLOOR {
                    let factor = -1.0 / (pairwise_norm * pairwise_norm);
                    let g_scale = ce.backward.dl_dpairwise_scale;
                    dl_da.axpy(g_scale * factor, &sys.pairwise_norm_grad());
                }
            }
            ScalingMode::OfflineReg => {
                let (penalty, rgu, rga) =
                    ratio_regularizer_gcrf(&sys, scaling.reg_lambda, scaling.reg_alpha)?;
                loss += penalty;
                for (g, r) in dl_du.iter_mut().zip(rgu) {
                    *g += r;
                }
                dl_da.add_assign(&rga);
            }
            _ => {}
        }

        let (unary_grads, embed_grads) =
            self.backprop_nets(&unary_tapes, &embed_tapes, &dl_du, &dl_da)?;
        let mut flat = unary_grads.flatten();
        flat.extend(embed_grads.flatten());
        Ok((loss, flat))
    }

    fn unary_only_loss_grad(&self, inst: &SegmentationInstance) -> Result<(f64, Vec<f64>)> {
        let pixels = inst.features.rows();
        let mut loss = 0.0;
        let mut grads = ParamGrads::zeros_like(&self.unary_net);
        for j in 0..pixels {
            let (out, tape) = neural::forward(&self.unary_net, inst.features.row(j))?;
            let mut logp = out.clone();
            log_softmax_in_place(&mut logp);
            let label = inst.mask[j];
            if label > 1 {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_labels: 2,
                    pos: j,
                });
            }
            loss -= logp[label] / pixels as f64;
            let mut dl: Vec<f64> = logp.iter().map(|lp| lp.exp() / pixels as f64).collect();
            dl[label] -= 1.0 / pixels as f64;
            let (pg, _) = neural::backward(&self.unary_net, &tape, &dl)?;
            grads.add_assign(&pg);
        }
        let mut flat = grads.flatten();
        flat.extend(std::iter::repeat(0.0).take(self.embed_net.num_params()));
        Ok((loss, flat))
    }

    fn predict(
        &self,
        inst: &SegmentationInstance,
        _objective: Objective,
        scaling: &ScalingState,
    ) -> Result<Vec<usize>> {
        let (sys, _, _) = self.system(&inst.features)?;
        let (unary_scale, pairwise_scale) = self.mode_scales(&sys, scaling)?;
        let solved = gcrf::solve_scores_scaled(&sys, unary_scale, pairwise_scale, CG_DEFAULT_TOL)?;
        Ok(gcrf::predict(&solved.scores))
    }

    fn predict_unary_only(&self, inst: &SegmentationInstance) -> Result<Vec<usize>> {
        let pixels = inst.features.rows();
        let mut preds = Vec::with_capacity(pixels);
        for j in 0..pixels {
            let (out, _) = neural::forward(&self.unary_net, inst.features.row(j))?;
            preds.push(usize::from(out[1] > out[0]));
        }
        Ok(preds)
    }

    fn gold<'a>(&self, inst: &'a SegmentationInstance) -> &'a [usize] {
        &inst.mask
    }

    fn raw_ratio(&self, inst: &SegmentationInstance) -> Result<f64> {
        let (sys, _, _) = self.system(&inst.features)?;
        Ok(potential_ratio_gcrf(&sys))
    }

    fn metric(&self, preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
        crate::data::metric_iou(preds, golds)
    }
}

/// A model together with everything evaluation needs: the objective it was
/// trained with and the scaling state (including any learned alpha).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelKind,
    pub objective: Objective,
    pub scaling: ScalingState,
}

#[derive(Debug, Clone)]
pub enum ModelKind {
    Chain(ChainModel),
    Gcrf(GcrfModel),
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"CRFCKPT\0";

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Sigmoid => 1,
        Activation::Identity => 2,
    }
}

fn activation_from_code(code: u8) -> Result<Activation> {
    match code {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Sigmoid),
        2 => Ok(Activation::Identity),
        other => Err(Error::Checkpoint(format!("unknown activation code {other}"))),
    }
}

fn write_spec(w: &mut ByteWriter, spec: &MlpSpec) {
    w.u64(spec.input_dim as u64);
    w.u64(spec.hidden_dims.len() as u64);
    for &d in &spec.hidden_dims {
        w.u64(d as u64);
    }
    w.u64(spec.output_dim as u64);
    w.buf.push(activation_code(spec.hidden_activation));
    w.buf.push(activation_code(spec.final_activation));
    w.buf.push(u8::from(spec.final_bias));
}

fn read_spec(r: &mut ByteReader) -> Result<MlpSpec> {
    let input_dim = r.u64()? as usize;
    let hidden_count = r.u64()? as usize;
    let mut hidden_dims = Vec::with_capacity(hidden_count);
    for _ in 0..hidden_count {
        hidden_dims.push(r.u64()? as usize);
    }
    let output_dim = r.u64()? as usize;
    let hidden_activation = activation_from_code(r.take(1)?[0])?;
    let final_activation = activation_from_code(r.take(1)?[0])?;
    let final_bias = r.take(1)?[0] != 0;
    let spec = MlpSpec {
        input_dim,
        hidden_dims,
        output_dim,
        hidden_activation,
        final_activation,
        final_bias,
    };
    spec.validate()?;
    Ok(spec)
}

fn scaling_mode_code(mode: ScalingMode) -> u8 {
    match mode {
        ScalingMode::None => 0,
        ScalingMode::Online => 1,
        ScalingMode::Offline => 2,
        ScalingMode::OfflineReg => 3,
        ScalingMode::Temperature => 4,
    }
}

fn scaling_mode_from_code(code: u8) -> Result<ScalingMode> {
    match code {
        0 => Ok(ScalingMode::None),
        1 => Ok(ScalingMode::Online),
        2 => Ok(ScalingMode::Offline),
        3 => Ok(ScalingMode::OfflineReg),
        4 => Ok(ScalingMode::Temperature),
        other => Err(Error::Checkpoint(format!("unknown scaling mode code {other}"))),
    }
}

fn objective_code(objective: Objective) -> (u8, u64) {
    match objective {
        Objective::Nll => (0, 0),
        Objective::CeExact => (1, 0),
        Objective::CeMeanField { sweeps } => (2, sweeps as u64),
        Objective::Ssvm => (3, 0),
    }
}

fn objective_from_code(code: u8, sweeps: u64) -> Result<Objective> {
    match code {
        0 => Ok(Objective::Nll),
        1 => Ok(Objective::CeExact),
        2 => Ok(Objective::CeMeanField {
            sweeps: sweeps as usize,
        }),
        3 => Ok(Objective::Ssvm),
        other => Err(Error::Checkpoint(format!("unknown objective code {other}"))),
    }
}

fn write_params(w: &mut ByteWriter, flat: &[f64]) {
    w.u64(flat.len() as u64);
    for &v in flat {
        w.f64(v);
    }
}

fn read_params(r: &mut ByteReader) -> Result<Vec<f64>> {
    let count = r.u64()? as usize;
    let mut flat = Vec::with_capacity(count);
    for _ in 0..count {
        flat.push(r.f64()?);
    }
    Ok(flat)
}

/// Serializes a checkpoint. The layout is versioned and every float is
/// stored by bit pattern, so identical models produce identical bytes.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_FORMAT_VERSION);
    let (obj_code, sweeps) = objective_code(ckpt.objective);
    w.buf.push(obj_code);
    w.u64(sweeps);
    w.buf.push(scaling_mode_code(ckpt.scaling.mode));
    w.f64(ckpt.scaling.alpha);
    w.u64(ckpt.scaling.grid.len() as u64);
    for &a in &ckpt.scaling.grid {
        w.f64(a);
    }
    w.f64(ckpt.scaling.reg_lambda);
    w.f64(ckpt.scaling.reg_alpha);
    match &ckpt.model {
        ModelKind::Chain(model) => {
            w.buf.push(1);
            write_spec(&mut w, model.unary_net.spec());
            w.u64(model.pairwise.rows() as u64);
            write_params(&mut w, &model.flatten_params());
        }
        ModelKind::Gcrf(model) => {
            w.buf.push(2);
            write_spec(&mut w, model.unary_net.spec());
            write_spec(&mut w, model.embed_net.spec());
            w.f64(model.lambda);
            write_params(&mut w, &model.flatten_params());
        }
    }
    atomic_write(path, &w.buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )));
    }
    let obj_code = r.take(1)?[0];
    let sweeps = r.u64()?;
    let objective = objective_from_code(obj_code, sweeps)?;
    let mode = scaling_mode_from_code(r.take(1)?[0])?;
    let alpha = r.f64()?;
    let grid_len = r.u64()? as usize;
    let mut grid = Vec::with_capacity(grid_len);
    for _ in 0..grid_len {
        grid.push(r.f64()?);
    }
    let reg_lambda = r.f64()?;
    let reg_alpha = r.f64()?;
    let scaling = ScalingState {
        mode,
        alpha,
        grid,
        reg_lambda,
        reg_alpha,
    };

    let kind = r.take(1)?[0];
    let model = match kind {
        1 => {
            let spec = read_spec(&mut r)?;
            let m = r.u64()? as usize;
            if m != spec.output_dim {
                return Err(Error::Checkpoint(format!(
                    "pairwise table size {m} does not match {} labels",
                    spec.output_dim
                )));
            }
            let flat = read_params(&mut r)?;
            let mut model = ChainModel {
                unary_net: neural::init_params(&spec, 0)?,
                pairwise: Tensor::zeros(&[m, m]),
            };
            model.assign_params(&flat)?;
            ModelKind::Chain(model)
        }
        2 => {
            let unary_spec = read_spec(&mut r)?;
            let embed_spec = read_spec(&mut r)?;
            let lambda = r.f64()?;
            let flat = read_params(&mut r)?;
            let mut model = GcrfModel::new(&unary_spec, &embed_spec, lambda, 0)?;
            model.assign_params(&flat)?;
            ModelKind::Gcrf(model)
        }
        other => return Err(Error::Checkpoint(format!("unknown model kind {other}"))),
    };
    Ok(Checkpoint {
        model,
        objective,
        scaling,
    })
}
