//! Checks of the surrogate analysis on actual (tiny) path-locked models.

use crate::error::{Error, Result};
use crate::grad::{finite_diff_hessian_block, HessianProbe, HESSIAN_STEP};
use crate::model::{forward, last_layer_split, Block, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{Route, EOS};
use crate::trainer::{
    batch_route, mode_loss_and_grad, objective_graph, ChatExample, LossReduction, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Sampled maximum `|∂²L/∂a∂b|` per parameter block pair of the full objective.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianAudit {
    pub beta0_beta1: HessianProbe,
    pub alpha_beta0: HessianProbe,
    pub alpha_beta1: HessianProbe,
    pub beta0_beta0: HessianProbe,
}

/// Probes Hessian blocks of `π0·L0 + π1·L1` by nested finite differences,
/// with `π_r` taken from the two batch sizes.
pub fn hessian_block_audit(
    params: &ModelParams,
    batch0: &[ChatExample],
    batch1: &[ChatExample],
    probes: usize,
    seed: u64,
) -> Result<HessianAudit> {
    if batch_route(batch0)? != Route::NoThink || batch_route(batch1)? != Route::Think {
        return Err(Error::Batching("expected a no-think batch and a think batch".into()));
    }
    let pools = [batch0.to_vec(), batch1.to_vec()];
    let layout = &params.layout;
    let f = |tape: &mut Tape, vars: &[Var], pools: &[Vec<ChatExample>; 2]| {
        objective_graph(tape, layout, vars, pools, LossReduction::ExampleMean)
    };
    let alpha = params.segment_names(Block::Shared);
    let b0 = params.segment_names(Block::Expert(Route::NoThink));
    let b1 = params.segment_names(Block::Expert(Route::Think));
    let probe = |a: &[&str], b: &[&str], salt: u64| {
        finite_diff_hessian_block(f, params.values(), &pools, a, b, HESSIAN_STEP, probes, seed ^ salt)
    };
    Ok(HessianAudit {
        beta0_beta1: probe(&b0, &b1, 0x01)?,
        alpha_beta0: probe(&alpha, &b0, 0x02)?,
        alpha_beta1: probe(&alpha, &b1, 0x03)?,
        beta0_beta0: probe(&b0, &b0, 0x04)?,
    })
}

/// What follows the last routed MLP block in the linearization check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downstream {
    /// Final norm and LM head, as in the model.
    Model,
    /// LM head only, an affine map.
    LmHeadOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearizationRow {
    pub epsilon: f64,
    /// `‖o(1) − o(0)‖` over all positions and logits.
    pub gap_norm: f64,
    /// `‖J_G·(f1 − f0)‖`.
    pub prediction_norm: f64,
    pub residual_norm: f64,
}

impl LinearizationRow {
    /// `residual / gap`, zero when both vanish.
    pub fn relative(&self) -> f64 {
        if self.gap_norm == 0.0 {
            if self.residual_norm == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.residual_norm / self.gap_norm
        }
    }
}

/// A standard normal direction over the last layer's think expert
/// `[gate, up, down]`.
pub fn random_last_expert_direction(params: &ModelParams, seed: u64) -> [Tensor; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = params.config().n_layers - 1;
    params.expert_segments(last, Route::Think).map(|s| {
        let shape = params.values().segment(s).shape().to_vec();
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(shape, data).expect("matching length")
    })
}

/// Sets the last layer's think expert to `no-think expert + ε·direction`.
pub fn perturb_last_think_expert(params: &ModelParams, direction: &[Tensor; 3], epsilon: f64) -> Result<ModelParams> {
    let last = params.config().n_layers - 1;
    let src = params.expert_segments(last, Route::NoThink);
    let dst = params.expert_segments(last, Route::Think);
    let mut out = params.clone();
    for ((&s, &d), dir) in src.iter().zip(&dst).zip(direction) {
        let base = params.values().segment(s);
        if dir.shape() != base.shape() {
            return Err(Error::shape("perturbation direction", dir.shape(), base.shape()));
        }
        let target = out.values_mut().segment_mut(d).data_mut();
        for ((t, b), v) in target.iter_mut().zip(base.data()).zip(dir.data()) {
            *t = b + epsilon * v;
        }
    }
    Ok(out)
}

fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn axpy(a: &Tensor, k: f64, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + k * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Compares the exact route logit gap with its first-order prediction
/// `J_G(h0)·(f1(u) − f0(u))`, where `h0 = u + f0(u)` is the route-0 output
/// of the last block. The Jacobian-vector product is a central difference
/// of step `fd_step` along the normalised direction.
///
/// The last layer's think expert is set to `β0 + ε·direction` for each `ε`;
/// all earlier experts must coincide so that `u` is route independent.
pub fn linearization_residual(
    params: &ModelParams,
    tokens: &[usize],
    direction: &[Tensor; 3],
    epsilons: &[f64],
    downstream: Downstream,
    fd_step: f64,
) -> Result<Vec<LinearizationRow>> {
    if !(fd_step > 0.0) {
        return Err(Error::Argument(format!("fd_step must be positive, got {fd_step}")));
    }
    let last = params.config().n_layers - 1;
    for l in 0..last {
        let a = params.expert_segments(l, Route::NoThink);
        let b = params.expert_segments(l, Route::Think);
        if a.iter().zip(&b).any(|(&x, &y)| params.values().segment(x) != params.values().segment(y)) {
            return Err(Error::Argument(format!("experts of layer {l} differ; only the last layer may")));
        }
    }
    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let model = perturb_last_think_expert(params, direction, eps)?;
        let split = last_layer_split(&model, tokens, Route::NoThink)?;
        let g = |h: &Tensor| match downstream {
            Downstream::Model => split.downstream(h),
            Downstream::LmHeadOnly => split.lm_head_only(h),
        };
        let f0 = split.expert_update(Route::NoThink)?;
        let f1 = split.expert_update(Route::Think)?;
        let h0 = axpy(&split.residual, 1.0, &f0);
        let h1 = axpy(&split.residual, 1.0, &f1);
        let gap = match downstream {
            Downstream::Model => sub(&forward(&model, tokens, Route::Think)?, &forward(&model, tokens, Route::NoThink)?),
            Downstream::LmHeadOnly => sub(&g(&h1)?, &g(&h0)?),
        };
        let df = sub(&f1, &f0);
        let df_norm = df.norm();
        let prediction = if df_norm == 0.0 {
            Tensor::zeros(gap.shape())
        } else {
            let plus = g(&axpy(&h0, fd_step / df_norm, &df))?;
            let minus = g(&axpy(&h0, -fd_step / df_norm, &df))?;
            let d = sub(&plus, &minus);
            let k = df_norm / (2.0 * fd_step);
            Tensor::new(d.shape().to_vec(), d.data().iter().map(|v| v * k).collect())?
        };
        rows.push(LinearizationRow {
            epsilon: eps,
            gap_norm: gap.norm(),
            prediction_norm: prediction.norm(),
            residual_norm: sub(&gap, &prediction).norm(),
        });
    }
    Ok(rows)
}

/// Response-length accounting of one mode's pool.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModeMass {
    pub count: usize,
    pub mean_length: f64,
    /// Total target tokens.
    pub token_mass: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LengthMassReport {
    /// Indexed by route.
    pub modes: [ModeMass; 2],
}

impl LengthMassReport {
    /// Think token mass over no-think token mass (`None` when the latter is zero).
    pub fn think_to_no_think_mass(&self) -> Option<f64> {
        let m0 = self.modes[0].token_mass;
        (m0 > 0).then(|| self.modes[1].token_mass as f64 / m0 as f64)
    }
}

pub fn length_mass_report(dataset: &[ChatExample]) -> LengthMassReport {
    let mut modes = [ModeMass::default(); 2];
    for ex in dataset {
        let m = &mut modes[ex.mode.index()];
        m.count += 1;
        m.token_mass += ex.target_ids.len();
    }
    for m in &mut modes {
        m.mean_length = if m.count > 0 {
            m.token_mass as f64 / m.count as f64
        } else {
            0.0
        };
    }
    LengthMassReport { modes }
}

/// Norm of `π_r·∇_β L_r` restricted to the parameters the mode updates:
/// the shared MLP of a dense model or the route's own expert.
pub fn update_mass_by_mode(params: &ModelParams, dataset: &[ChatExample], reduction: LossReduction) -> Result<[f64; 2]> {
    let pi = crate::trainer::mode_fractions(dataset)?;
    let pools = crate::trainer::split_by_mode(dataset);
    let mut out = [0.0; 2];
    for r in Route::BOTH {
        if pools[r.index()].is_empty() {
            continue;
        }
        let (_, g) = mode_loss_and_grad(params, &pools[r.index()], reduction)?;
        let block = match params.architecture() {
            crate::model::Architecture::Dense => Block::DenseMlp,
            crate::model::Architecture::PathLocked => Block::Expert(r),
        };
        let flat = crate::model::flat_of(&g, &params.segments_in(block));
        out[r.index()] = pi[r.index()] * flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    Ok(out)
}

/// Repeats the body of every think target `factor` times (EOS kept once).
pub fn stretch_think_targets(dataset: &[ChatExample], factor: usize) -> Vec<ChatExample> {
    dataset
        .iter()
        .map(|ex| {
            if ex.mode != Route::Think {
                return ex.clone();
            }
            let body: Vec<usize> = ex.target_ids.iter().copied().filter(|&t| t != EOS).collect();
            let mut target = body.repeat(factor.max(1));
            if ex.target_ids.last() == Some(&EOS) {
                target.push(EOS);
            }
            ChatExample {
                target_ids: target,
                ..ex.clone()
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthInvarianceReport {
    pub base_mass: LengthMassReport,
    pub stretched_mass: LengthMassReport,
    /// Max |Δ| between the final no-think experts of the two runs.
    pub beta0_max_diff: f64,
    /// Max |Δ| between the final think experts of the two runs.
    pub beta1_max_diff: f64,
    /// The no-think expert after every step agrees bitwise across runs.
    pub beta0_trajectory_identical: bool,
}

/// Trains twice from the same initialisation, once with think targets
/// stretched by `factor`, and compares the no-think expert.
///
/// With a trainable backbone the think pool still reaches the no-think
/// expert through the shared parameters; the bitwise claim concerns
/// `config.freeze_shared = true`.
pub fn think_length_invariance(
    params: &ModelParams,
    dataset: &[ChatExample],
    factor: usize,
    config: &TrainConfig,
) -> Result<LengthInvarianceReport> {
    let stretched = stretch_think_targets(dataset, factor);
    let run = |data: &[ChatExample]| -> Result<(Vec<Vec<f64>>, ModelParams)> {
        let mut trainer = crate::trainer::Trainer::new(params.clone(), config.clone())?;
        let mut trail = Vec::new();
        for _ in 0..config.epochs {
            let order = trainer.schedule(data);
            for idx in order {
                let batch: Vec<ChatExample> = idx.iter().map(|&i| data[i].clone()).collect();
                trainer.step(&batch)?;
                trail.push(trainer.params().block_flat(Block::Expert(Route::NoThink)));
            }
        }
        Ok((trail, trainer.into_parts().0))
    };
    let (trail_a, a) = run(dataset)?;
    let (trail_b, b) = run(&stretched)?;
    let diff = |block: Block| {
        a.block_flat(block)
            .iter()
            .zip(b.block_flat(block))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    Ok(LengthInvarianceReport {
        base_mass: length_mass_report(dataset),
        stretched_mass: length_mass_report(&stretched),
        beta0_max_diff: diff(Block::Expert(Route::NoThink)),
        beta1_max_diff: diff(Block::Expert(Route::Think)),
        beta0_trajectory_identical: trail_a.len() == trail_b.len()
            && trail_a.iter().zip(&trail_b).all(|(x, y)| {
                x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
            }),
    })
}
