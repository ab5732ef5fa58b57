//! Reverse-mode gradients over a [`ParamVector`] and the finite-difference
//! oracles used to check them.
//!
//! A loss function is any closure that records a scalar onto a fresh tape
//! given one leaf per parameter segment (in segment order) and a batch.

use crate::error::{Error, Result};
use crate::tape::{BackwardFault, Tape, Var};
use crate::tensor::{ParamVector, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

/// Default central-difference step for first derivatives.
pub const FD_STEP: f64 = 1e-5;
/// Default step for nested (mixed second-derivative) differences.
pub const HESSIAN_STEP: f64 = 1e-3;

fn bind_leaves(tape: &mut Tape, params: &ParamVector) -> Vec<Var> {
    params.tensors().iter().map(|t| tape.leaf(t.clone())).collect()
}

/// Forward-only evaluation of the loss.
pub fn evaluate_loss<B: ?Sized, F>(loss_fn: &F, params: &ParamVector, batch: &B) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var], &B) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = bind_leaves(&mut tape, params);
    let out = loss_fn(&mut tape, &vars, batch)?;
    scalar_output(&tape, out)
}

fn scalar_output(tape: &Tape, out: Var) -> Result<f64> {
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::shape("loss", value.shape(), &[]));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            op: tape.first_nonfinite().unwrap_or("loss"),
        });
    }
    Ok(v)
}

/// Loss value and its gradient with the same segment layout as `params`.
///
/// Segments that did not take part in the forward pass get an all-zero
/// gradient.
pub fn value_and_grad<B: ?Sized, F>(loss_fn: F, params: &ParamVector, batch: &B) -> Result<(f64, ParamVector)>
where
    F: Fn(&mut Tape, &[Var], &B) -> Result<Var>,
{
    value_and_grad_with_fault(loss_fn, params, batch, None)
}

/// [`value_and_grad`] with an optional corrupted backward rule, used as a
/// negative control by the verification harness.
pub fn value_and_grad_with_fault<B: ?Sized, F>(
    loss_fn: F,
    params: &ParamVector,
    batch: &B,
    fault: Option<BackwardFault>,
) -> Result<(f64, ParamVector)>
where
    F: Fn(&mut Tape, &[Var], &B) -> Result<Var>,
{
    let mut tape = match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let vars = bind_leaves(&mut tape, params);
    let out = loss_fn(&mut tape, &vars, batch)?;
    let loss = scalar_output(&tape, out)?;
    let grads = tape.backward(out)?;
    let mut result = params.zeros_like();
    for (seg, var) in vars.iter().enumerate() {
        if let Some(g) = grads.get(*var) {
            result.segment_mut(seg).data_mut().copy_from_slice(g);
        }
    }
    Ok((loss, result))
}

/// Central differences `(L(p+h·e) − L(p−h·e)) / 2h` for every coordinate.
pub fn finite_diff_grad<B: ?Sized, F>(loss_fn: F, params: &ParamVector, batch: &B, step: f64) -> Result<ParamVector>
where
    F: Fn(&mut Tape, &[Var], &B) -> Result<Var>,
{
    let coords: Vec<usize> = (0..params.numel()).collect();
    let values = finite_diff_grad_at(&loss_fn, params, batch, step, &coords)?;
    params.unflatten(&values)
}

/// Central differences restricted to the given flat coordinates.
pub fn finite_diff_grad_at<B: ?Sized, F>(
    loss_fn: &F,
    params: &ParamVector,
    batch: &B,
    step: f64,
    coords: &[usize],
) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var], &B) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {step}")));
    }
    let mut work = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &c in coords {
        let (seg, el) = params.locate(c).ok_or(Error::Index {
            what: "finite_diff coordinate",
            index: c,
            bound: params.numel(),
        })?;
        let orig = params.segment(seg).data()[el];
        work.segment_mut(seg).data_mut()[el] = orig + step;
        let plus = evaluate_loss(loss_fn, &work, batch)?;
        work.segment_mut(seg).data_mut()[el] = orig - step;
        let minus = evaluate_loss(loss_fn, &work, batch)?;
        work.segment_mut(seg).data_mut()[el] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// One sampled mixed partial derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianSample {
    pub coord_a: usize,
    pub coord_b: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HessianProbe {
    pub max_abs: f64,
    pub samples: Vec<HessianSample>,
}

fn block_coords(params: &ParamVector, names: &[&str]) -> Result<Vec<(usize, usize)>> {
    // (flat offset, len) per named segment
    let mut offsets = Vec::with_capacity(params.len());
    let mut acc = 0;
    for t in params.tensors() {
        offsets.push(acc);
        acc += t.len();
    }
    names
        .iter()
        .map(|name| {
            let idx = params
                .index_of(name)
                .ok_or_else(|| Error::Argument(format!("unknown segment `{name}`")))?;
            Ok((offsets[idx], params.segment(idx).len()))
        })
        .collect()
}

fn sample_coord(rng: &mut ChaCha8Rng, spans: &[(usize, usize)], total: usize) -> usize {
    let mut u = rng.random_range(0..total);
    for &(offset, len) in spans {
        if u < len {
            return offset + u;
        }
        u -= len;
    }
    unreachable!("sample within total")
}

/// Estimates `max |∂²L/∂a∂b|` over `probes` random coordinate pairs drawn
/// from two disjoint segment blocks, by nested central differences.
///
/// `block_a == block_b` (the same set) is allowed for diagonal blocks; any
/// other overlap is rejected.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_hessian_block<B: ?Sized, F>(
    loss_fn: F,
    params: &ParamVector,
    batch: &B,
    block_a: &[&str],
    block_b: &[&str],
    step: f64,
    probes: usize,
    seed: u64,
) -> Result<HessianProbe>
where
    F: Fn(&mut Tape, &[Var], &B) -> Result<Var>,
{
    if probes == 0 {
        return Err(Error::Argument("probes must be at least 1".into()));
    }
    if !(step > 0.0) {
        return Err(Error::Argument(format!("step must be positive, got {step}")));
    }
    let set_a: HashSet<&str> = block_a.iter().copied().collect();
    let set_b: HashSet<&str> = block_b.iter().copied().collect();
    if set_a != set_b && !set_a.is_disjoint(&set_b) {
        return Err(Error::Argument("hessian blocks overlap".into()));
    }
    let spans_a = block_coords(params, block_a)?;
    let spans_b = block_coords(params, block_b)?;
    let total_a: usize = spans_a.iter().map(|s| s.1).sum();
    let total_b: usize = spans_b.iter().map(|s| s.1).sum();
    if total_a == 0 || total_b == 0 {
        return Err(Error::Argument("empty hessian block".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut samples = Vec::with_capacity(probes);
    let mut max_abs: f64 = 0.0;
    for _ in 0..probes {
        let ca = sample_coord(&mut rng, &spans_a, total_a);
        let cb = sample_coord(&mut rng, &spans_b, total_b);
        let (sa, ea) = params.locate(ca).expect("in range");
        let (sb, eb) = params.locate(cb).expect("in range");
        let mut corner = |da: f64, db: f64| -> Result<f64> {
            work.segment_mut(sa).data_mut()[ea] += da;
            work.segment_mut(sb).data_mut()[eb] += db;
            let v = evaluate_loss(&loss_fn, &work, batch);
            work.segment_mut(sa).data_mut()[ea] = params.segment(sa).data()[ea];
            work.segment_mut(sb).data_mut()[eb] = params.segment(sb).data()[eb];
            v
        };
        let pp = corner(step, step)?;
        let pm = corner(step, -step)?;
        let mp = corner(-step, step)?;
        let mm = corner(-step, -step)?;
        let value = (pp - pm - mp + mm) / (4.0 * step * step);
        max_abs = max_abs.max(value.abs());
        samples.push(HessianSample {
            coord_a: ca,
            coord_b: cb,
            value,
        });
    }
    Ok(HessianProbe { max_abs, samples })
}

/// Relative error with a denominator floor: `|a−b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst relative error between two same-layout gradient vectors.
pub fn max_relative_error(a: &ParamVector, b: &ParamVector, floor: f64) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(&x, y)| relative_error(x, y, floor))
        .fold(0.0, f64::max)
}

/// Convenience: a one-segment parameter vector.
pub fn single_segment(name: &str, tensor: Tensor) -> ParamVector {
    let mut pv = ParamVector::new();
    pv.push(name, tensor).expect("fresh vector");
    pv
}
