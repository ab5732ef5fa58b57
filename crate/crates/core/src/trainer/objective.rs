use super::data::ChatExample;
use crate::error::{Error, Result};
use crate::grad::{evaluate_loss, value_and_grad, value_and_grad_with_fault};
use crate::model::{build_forward, Layout, ModelParams, Routing};
use crate::tape::{BackwardFault, Reduction, Tape, Var};
use crate::tensor::ParamVector;
use crate::tokenizer::Route;
use serde::{Deserialize, Serialize};

/// How token losses of a batch are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Mean over each example's target tokens, then mean over examples.
    #[default]
    ExampleMean,
    /// Sum over each example's target tokens, then mean over examples, so
    /// longer responses carry proportionally more weight.
    TokenSum,
}

impl LossReduction {
    fn per_example(self) -> Reduction {
        match self {
            LossReduction::ExampleMean => Reduction::Mean,
            LossReduction::TokenSum => Reduction::Sum,
        }
    }
}

/// The single route shared by every example of a batch.
pub fn batch_route(batch: &[ChatExample]) -> Result<Route> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Argument("empty batch".into()))?
        .mode;
    if let Some(pos) = batch.iter().position(|ex| ex.mode != first) {
        return Err(Error::Batching(format!(
            "batch mixes modes: example 0 is {} but example {pos} is {}",
            first.name(),
            batch[pos].mode.name()
        )));
    }
    Ok(first)
}

pub(crate) fn batch_loss_graph(
    tape: &mut Tape,
    layout: &Layout,
    vars: &[Var],
    batch: &[ChatExample],
    reduction: LossReduction,
) -> Result<Var> {
    let route = batch_route(batch)?;
    let mut total: Option<Var> = None;
    for ex in batch {
        let (inputs, targets, mask) = ex.lm_triplet();
        let out = build_forward(tape, layout, vars, &inputs, Routing::Sequence(route), None)?;
        let ce = tape.cross_entropy(out.logits, &targets, &mask, reduction.per_example())?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    let total = total.expect("batch is non-empty");
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

/// `π0·L0 + π1·L1` over two mode pools on one tape, `π_r` from pool sizes.
pub(crate) fn objective_graph(
    tape: &mut Tape,
    layout: &Layout,
    vars: &[Var],
    pools: &[Vec<ChatExample>; 2],
    reduction: LossReduction,
) -> Result<Var> {
    let n = (pools[0].len() + pools[1].len()) as f64;
    let mut total: Option<Var> = None;
    for pool in pools.iter().filter(|p| !p.is_empty()) {
        let l = batch_loss_graph(tape, layout, vars, pool, reduction)?;
        let weighted = tape.scale(l, pool.len() as f64 / n);
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    total.ok_or_else(|| Error::Argument("empty dataset".into()))
}

fn loss_fn<'a>(
    layout: &'a Layout,
    reduction: LossReduction,
) -> impl Fn(&mut Tape, &[Var], &[ChatExample]) -> Result<Var> + 'a {
    move |tape: &mut Tape, vars: &[Var], batch: &[ChatExample]| batch_loss_graph(tape, layout, vars, batch, reduction)
}

/// Causal LM loss of a mode-pure batch under its route.
pub fn mode_loss(params: &ModelParams, batch: &[ChatExample], reduction: LossReduction) -> Result<f64> {
    evaluate_loss(&loss_fn(&params.layout, reduction), params.values(), batch)
}

pub fn mode_loss_and_grad(
    params: &ModelParams,
    batch: &[ChatExample],
    reduction: LossReduction,
) -> Result<(f64, ParamVector)> {
    value_and_grad(loss_fn(&params.layout, reduction), params.values(), batch)
}

/// [`mode_loss_and_grad`] through a deliberately corrupted backward rule.
pub fn mode_loss_and_grad_with_fault(
    params: &ModelParams,
    batch: &[ChatExample],
    reduction: LossReduction,
    fault: Option<BackwardFault>,
) -> Result<(f64, ParamVector)> {
    value_and_grad_with_fault(loss_fn(&params.layout, reduction), params.values(), batch, fault)
}

/// The loss closure over a raw parameter vector, for finite-difference oracles.
pub fn mode_loss_fn(
    params: &ModelParams,
    reduction: LossReduction,
) -> impl Fn(&mut Tape, &[Var], &[ChatExample]) -> Result<Var> + '_ {
    loss_fn(&params.layout, reduction)
}

/// Splits a dataset into its no-think and think pools.
pub fn split_by_mode(dataset: &[ChatExample]) -> [Vec<ChatExample>; 2] {
    let mut pools: [Vec<ChatExample>; 2] = [Vec::new(), Vec::new()];
    for ex in dataset {
        pools[ex.mode.index()].push(ex.clone());
    }
    pools
}

/// `π_r = |D_r| / |D|`.
pub fn mode_fractions(dataset: &[ChatExample]) -> Result<[f64; 2]> {
    if dataset.is_empty() {
        return Err(Error::Argument("empty dataset".into()));
    }
    let n1 = dataset.iter().filter(|ex| ex.mode == Route::Think).count();
    let n = dataset.len() as f64;
    Ok([(dataset.len() - n1) as f64 / n, n1 as f64 / n])
}

/// `π0·L0 + π1·L1` with example-count weights.
pub fn full_objective(params: &ModelParams, dataset: &[ChatExample], reduction: LossReduction) -> Result<f64> {
    let pi = mode_fractions(dataset)?;
    let pools = split_by_mode(dataset);
    let mut total = 0.0;
    for r in Route::BOTH {
        if !pools[r.index()].is_empty() {
            total += pi[r.index()] * mode_loss(params, &pools[r.index()], reduction)?;
        }
    }
    Ok(total)
}

/// Value and gradient of [`full_objective`], as `π0·∇L0 + π1·∇L1`.
pub fn full_objective_grad(
    params: &ModelParams,
    dataset: &[ChatExample],
    reduction: LossReduction,
) -> Result<(f64, ParamVector)> {
    let pi = mode_fractions(dataset)?;
    let pools = split_by_mode(dataset);
    let mut total = 0.0;
    let mut grad = params.values().zeros_like();
    for r in Route::BOTH {
        if pools[r.index()].is_empty() {
            continue;
        }
        let (l, g) = mode_loss_and_grad(params, &pools[r.index()], reduction)?;
        total += pi[r.index()] * l;
        axpy(&mut grad, pi[r.index()], &g);
    }
    Ok((total, grad))
}

/// Gradient of `π0·L0 + π1·L1` recorded as one graph over both pools,
/// without splitting the objective by mode first.
pub fn joint_objective_grad(
    params: &ModelParams,
    dataset: &[ChatExample],
    reduction: LossReduction,
) -> Result<(f64, ParamVector)> {
    let pools = split_by_mode(dataset);
    let layout = &params.layout;
    let f = |tape: &mut Tape, vars: &[Var], pools: &[Vec<ChatExample>; 2]| {
        objective_graph(tape, layout, vars, pools, reduction)
    };
    value_and_grad(f, params.values(), &pools)
}

/// `y ← y + a·x` over same-layout vectors.
pub(crate) fn axpy(y: &mut ParamVector, a: f64, x: &ParamVector) {
    for (ys, xs) in y.tensors_mut().iter_mut().zip(x.tensors()) {
        ys.data_mut().iter_mut().zip(xs.data()).for_each(|(yv, xv)| *yv += a * xv);
    }
}

/// Loss and gradients of one example when each input position picks its own
/// expert. Only used to contrast against sequence-level routing.
pub fn token_level_route_gradients(
    params: &ModelParams,
    example: &ChatExample,
    routes: &[Route],
    reduction: LossReduction,
) -> Result<(f64, ParamVector)> {
    let layout = &params.layout;
    let f = |tape: &mut Tape, vars: &[Var], ex: &ChatExample| -> Result<Var> {
        let (inputs, targets, mask) = ex.lm_triplet();
        let out = build_forward(tape, layout, vars, &inputs, Routing::PerToken(routes), None)?;
        tape.cross_entropy(out.logits, &targets, &mask, reduction.per_example())
    };
    value_and_grad(f, params.values(), example)
}

/// `p ← p − η·g` on every coordinate.
pub fn sgd_step(params: &mut ParamVector, grads: &ParamVector, learning_rate: f64) -> Result<()> {
    if !params.same_layout(grads) {
        return Err(Error::Argument("gradient layout does not match parameters".into()));
    }
    axpy(params, -learning_rate, grads);
    Ok(())
}
