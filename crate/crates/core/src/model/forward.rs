use super::params::{ExpertMlp, Layout, ModelParams};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::Route;
use std::collections::BTreeSet;

/// How experts are chosen while building a forward graph.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Routing<'a> {
    /// One route for every layer and position.
    Sequence(Route),
    /// A route per input position (contrast experiment only).
    PerToken(&'a [Route]),
}

/// One expert evaluation over a block of token rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertCall {
    pub layer: usize,
    pub route: Route,
    pub tokens: usize,
}

/// Instrumentation of expert evaluations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExpertAudit {
    pub calls: Vec<ExpertCall>,
}

impl ExpertAudit {
    pub(crate) fn record(&mut self, layer: usize, route: Route, tokens: usize) {
        self.calls.push(ExpertCall { layer, route, tokens });
    }

    /// Total per-token expert evaluations.
    pub fn token_evaluations(&self) -> usize {
        self.calls.iter().map(|c| c.tokens).sum()
    }

    pub fn routes_used(&self) -> BTreeSet<Route> {
        self.calls.iter().map(|c| c.route).collect()
    }

    pub fn extend(&mut self, other: ExpertAudit) {
        self.calls.extend(other.calls);
    }
}

pub(crate) struct ForwardVars {
    pub logits: Var,
    /// Residual stream entering the last layer's routed MLP block.
    pub last_residual: Var,
}

pub(crate) fn expert_graph(tape: &mut Tape, slots: [Var; 3], x: Var) -> Result<Var> {
    let [gate, up, down] = slots;
    let g = tape.matmul_t(x, gate)?;
    let u = tape.matmul_t(x, up)?;
    let a = tape.silu(g);
    let h = tape.mul(a, u)?;
    tape.matmul_t(h, down)
}

/// Records the decoder on `tape` given one leaf per parameter segment.
pub(crate) fn build_forward(
    tape: &mut Tape,
    layout: &Layout,
    vars: &[Var],
    tokens: &[usize],
    routing: Routing<'_>,
    mut audit: Option<&mut ExpertAudit>,
) -> Result<ForwardVars> {
    let cfg = &layout.config;
    if tokens.len() > cfg.max_seq {
        return Err(Error::Capacity {
            len: tokens.len(),
            max: cfg.max_seq,
        });
    }
    if let Routing::PerToken(routes) = routing {
        if routes.len() != tokens.len() {
            return Err(Error::shape("per-token routes", &[tokens.len()], &[routes.len()]));
        }
    }
    let t = tokens.len();
    let slot = |i: usize| vars[i];
    let mut h = tape.embed(slot(layout.embed), tokens)?;
    let mut last_residual = h;
    for (l, layer) in layout.layers.iter().enumerate() {
        let x = tape.rms_norm(h, slot(layer.ln1))?;
        let q = tape.matmul_t(x, slot(layer.wq))?;
        let k = tape.matmul_t(x, slot(layer.wk))?;
        let v = tape.matmul_t(x, slot(layer.wv))?;
        let q = tape.rope(q, cfg.n_heads, cfg.rope_base, 0)?;
        let k = tape.rope(k, cfg.n_heads, cfg.rope_base, 0)?;
        let att = tape.attention(q, k, v, cfg.n_heads)?;
        let proj = tape.matmul_t(att, slot(layer.wo))?;
        h = tape.add(h, proj)?;
        last_residual = h;

        let x2 = tape.rms_norm(h, slot(layer.ln2))?;
        let expert_vars = |route: Route| layout.expert(l, route).map(slot);
        let update = match routing {
            Routing::Sequence(route) => {
                if let Some(a) = audit.as_deref_mut() {
                    a.record(l, route, t);
                }
                expert_graph(tape, expert_vars(route), x2)?
            }
            Routing::PerToken(routes) => {
                let take_think: Vec<bool> = routes.iter().map(|&r| r == Route::Think).collect();
                let n_think = take_think.iter().filter(|&&b| b).count();
                if let Some(a) = audit.as_deref_mut() {
                    a.record(l, Route::NoThink, t - n_think);
                    a.record(l, Route::Think, n_think);
                }
                let f0 = expert_graph(tape, expert_vars(Route::NoThink), x2)?;
                let f1 = expert_graph(tape, expert_vars(Route::Think), x2)?;
                tape.select_rows(f0, f1, &take_think)?
            }
        };
        h = tape.add(h, update)?;
    }
    let hn = tape.rms_norm(h, slot(layout.final_norm))?;
    let logits = tape.matmul_t(hn, slot(layout.lm_head))?;
    Ok(ForwardVars { logits, last_residual })
}

pub(crate) fn bind(tape: &mut Tape, params: &ModelParams) -> Vec<Var> {
    params
        .values()
        .tensors()
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect()
}

/// Logits `[T × vocab]` with every layer using the route's expert.
pub fn forward(params: &ModelParams, tokens: &[usize], route: Route) -> Result<Tensor> {
    run(params, tokens, Routing::Sequence(route), None)
}

/// [`forward`] that also records each expert evaluation.
pub fn forward_audited(
    params: &ModelParams,
    tokens: &[usize],
    route: Route,
    audit: &mut ExpertAudit,
) -> Result<Tensor> {
    run(params, tokens, Routing::Sequence(route), Some(audit))
}

/// Logits with a separate route per position.
pub fn forward_token_routed(params: &ModelParams, tokens: &[usize], routes: &[Route]) -> Result<Tensor> {
    run(params, tokens, Routing::PerToken(routes), None)
}

fn run(
    params: &ModelParams,
    tokens: &[usize],
    routing: Routing<'_>,
    audit: Option<&mut ExpertAudit>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params);
    let out = build_forward(&mut tape, &params.layout, &vars, tokens, routing, audit)?;
    Ok(tape.value(out.logits).clone())
}

/// `W_down · (SiLU(W_gate·x) ⊙ W_up·x)` for a vector `x` or each row of a matrix.
pub fn mlp_expert(expert: &ExpertMlp<'_>, x: &Tensor) -> Result<Tensor> {
    let vector_input = x.shape().len() == 1;
    let rows = if vector_input {
        Tensor::new(vec![1, x.len()], x.data().to_vec())?
    } else {
        x.clone()
    };
    let mut tape = Tape::new();
    let slots = [
        tape.leaf(expert.gate.clone()),
        tape.leaf(expert.up.clone()),
        tape.leaf(expert.down.clone()),
    ];
    let xv = tape.leaf(rows);
    let out = expert_graph(&mut tape, slots, xv)?;
    let value = tape.value(out).clone();
    if vector_input {
        Ok(Tensor::vector(value.into_data()))
    } else {
        Ok(value)
    }
}

/// Per-position `max_v |logits(think) − logits(no_think)|`.
pub fn route_logit_gap(params: &ModelParams, tokens: &[usize]) -> Result<Vec<f64>> {
    let l0 = forward(params, tokens, Route::NoThink)?;
    let l1 = forward(params, tokens, Route::Think)?;
    Ok((0..tokens.len())
        .map(|t| {
            l0.row(t)
                .iter()
                .zip(l1.row(t))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect())
}

/// The decoder split at the last routed MLP block:
/// `logits = G(u + f_r(u))` with `G` = final norm and LM head.
pub struct LastLayerSplit<'a> {
    params: &'a ModelParams,
    /// `u`, the residual stream entering the last MLP block, `[T × d_model]`.
    pub residual: Tensor,
}

/// Computes `u` for the last layer under `route`.
pub fn last_layer_split<'a>(params: &'a ModelParams, tokens: &[usize], route: Route) -> Result<LastLayerSplit<'a>> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params);
    let out = build_forward(&mut tape, &params.layout, &vars, tokens, Routing::Sequence(route), None)?;
    Ok(LastLayerSplit {
        params,
        residual: tape.value(out.last_residual).clone(),
    })
}

impl LastLayerSplit<'_> {
    /// `f_r(u)`: the routed expert applied to the normalised residual.
    pub fn expert_update(&self, route: Route) -> Result<Tensor> {
        let layout = &self.params.layout;
        let last = layout.layers.len() - 1;
        let mut tape = Tape::new();
        let u = tape.leaf(self.residual.clone());
        let gain = tape.leaf(self.params.values().segment(layout.layers[last].ln2).clone());
        let x = tape.rms_norm(u, gain)?;
        let slots = layout
            .expert(last, route)
            .map(|i| tape.leaf(self.params.values().segment(i).clone()));
        let out = expert_graph(&mut tape, slots, x)?;
        Ok(tape.value(out).clone())
    }

    /// `G(h)`: final norm followed by the LM head.
    pub fn downstream(&self, h: &Tensor) -> Result<Tensor> {
        let layout = &self.params.layout;
        let mut tape = Tape::new();
        let hv = tape.leaf(h.clone());
        let gain = tape.leaf(self.params.values().segment(layout.final_norm).clone());
        let head = tape.leaf(self.params.values().segment(layout.lm_head).clone());
        let x = tape.rms_norm(hv, gain)?;
        let out = tape.matmul_t(x, head)?;
        Ok(tape.value(out).clone())
    }

    /// The LM head alone (`G` without the final norm), an affine map.
    pub fn lm_head_only(&self, h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let hv = tape.leaf(h.clone());
        let head = tape.leaf(self.params.values().segment(self.params.layout.lm_head).clone());
        let out = tape.matmul_t(hv, head)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::silu;
    use crate::model::PleConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn models() -> (ModelParams, ModelParams) {
        let dense = ModelParams::init_dense(&PleConfig::tiny(20), 11).unwrap();
        let ple = ModelParams::clone_from_dense(&dense).unwrap();
        (dense, ple)
    }

    const TOKENS: [usize; 7] = [1, 7, 9, 12, 3, 8, 15];

    #[test]
    fn mlp_expert_zero_input_and_scalar_case() {
        let (_, ple) = models();
        let e = ple.expert(0, Route::NoThink);
        let out = mlp_expert(&e, &Tensor::zeros(&[16])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let one = Tensor::filled(&[1, 1], 1.0);
        let e = ExpertMlp { gate: &one, up: &one, down: &one };
        let out = mlp_expert(&e, &Tensor::vector(vec![1.0])).unwrap();
        assert!((out.data()[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn mlp_expert_matches_straight_line_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (f, d) = (6, 4);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (g, u, dn, x) = (rand_t(&[f, d]), rand_t(&[f, d]), rand_t(&[d, f]), rand_t(&[d]));
        let got = mlp_expert(&ExpertMlp { gate: &g, up: &u, down: &dn }, &x).unwrap();
        // reference: explicit loops
        let mut hidden = vec![0.0; f];
        for i in 0..f {
            let mut gi = 0.0;
            let mut ui = 0.0;
            for j in 0..d {
                gi += g.data()[i * d + j] * x.data()[j];
                ui += u.data()[i * d + j] * x.data()[j];
            }
            hidden[i] = silu(gi) * ui;
        }
        for o in 0..d {
            let mut acc = 0.0;
            for i in 0..f {
                acc += dn.data()[o * f + i] * hidden[i];
            }
            assert!((got.data()[o] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn cloned_model_is_route_independent_and_matches_dense() {
        let (dense, ple) = models();
        let l0 = forward(&ple, &TOKENS, Route::NoThink).unwrap();
        let l1 = forward(&ple, &TOKENS, Route::Think).unwrap();
        let ld = forward(&dense, &TOKENS, Route::NoThink).unwrap();
        assert_eq!(l0.max_abs_diff(&l1), 0.0);
        assert_eq!(l0, ld);
        assert!(route_logit_gap(&ple, &TOKENS).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn route_zero_ignores_think_expert() {
        let (_, mut ple) = models();
        let before0 = forward(&ple, &TOKENS, Route::NoThink).unwrap();
        let before1 = forward(&ple, &TOKENS, Route::Think).unwrap();
        let seg = ple.expert_segments(1, Route::Think)[0];
        ple.values_mut().segment_mut(seg).data_mut()[3] += 0.5;
        assert_eq!(forward(&ple, &TOKENS, Route::NoThink).unwrap(), before0);
        assert!(forward(&ple, &TOKENS, Route::Think).unwrap().max_abs_diff(&before1) > 0.0);
    }

    #[test]
    fn one_expert_evaluation_per_layer_per_token() {
        let (_, ple) = models();
        let mut audit = ExpertAudit::default();
        forward_audited(&ple, &TOKENS, Route::Think, &mut audit).unwrap();
        assert_eq!(audit.token_evaluations(), 2 * TOKENS.len());
        assert_eq!(audit.routes_used().into_iter().collect::<Vec<_>>(), vec![Route::Think]);
    }

    #[test]
    fn causal_prefix_invariance() {
        let (_, ple) = models();
        let full = forward(&ple, &TOKENS, Route::NoThink).unwrap();
        let mut changed = TOKENS;
        changed[5] = 2;
        changed[6] = 4;
        let other = forward(&ple, &changed, Route::NoThink).unwrap();
        for t in 0..5 {
            assert_eq!(full.row(t), other.row(t));
        }
    }

    #[test]
    fn capacity_error_for_long_sequences() {
        let (_, ple) = models();
        let long = vec![6usize; 65];
        assert!(matches!(forward(&ple, &long, Route::NoThink), Err(Error::Capacity { len: 65, max: 64 })));
    }

    #[test]
    fn last_layer_split_reproduces_logits() {
        let (_, ple) = models();
        let split = last_layer_split(&ple, &TOKENS, Route::NoThink).unwrap();
        let f0 = split.expert_update(Route::NoThink).unwrap();
        let mut h = split.residual.clone();
        h.data_mut().iter_mut().zip(f0.data()).for_each(|(a, b)| *a += b);
        let via_split = split.downstream(&h).unwrap();
        assert_eq!(via_split, forward(&ple, &TOKENS, Route::NoThink).unwrap());
    }
}
