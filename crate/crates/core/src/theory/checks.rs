//! Check families: one [`CheckRecord`] per random instance or seed.

use super::network::{hessian_block_audit, linearization_residual, random_last_expert_direction, Downstream};
use super::quadratic::{
    conflict_gap, dense_objective, dense_optimum, equal_curvature_gap, fixed_backbone_dominance, min_eigenvalue,
    random_quadratic_pair, random_vector, split_objective, verify_interference_on_quadratic, QuadraticMode,
};
use super::{tiny_audit_fixture, CheckRecord};
use crate::error::{Error, Result};
use crate::grad::{finite_diff_grad, max_relative_error, FD_STEP};
use crate::model::{Block, ModelParams};
use crate::tape::{BackwardFault, Tape, Var};
use crate::tokenizer::{Route, BOS};
use crate::trainer::{mode_loss_and_grad_with_fault, objective_graph, split_by_mode, ChatExample, LossReduction};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

/// Relative-error threshold of the gradient oracle.
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
/// Denominator floor of the gradient relative error. Central differences
/// carry roughly `1e-11` of absolute rounding noise, so entries far below
/// this floor are compared on an absolute scale.
pub const GRADIENT_FLOOR: f64 = 1e-4;
/// Cross-block Hessian threshold.
pub const CROSS_BLOCK_TOLERANCE: f64 = 1e-6;
/// Minimum curvature the control blocks must show.
pub const CONTROL_FLOOR: f64 = 1e-4;
/// Perturbation sizes of the linearization check; each halves the last.
pub const LINEARIZATION_EPSILONS: [f64; 3] = [1e-1, 5e-2, 2.5e-2];
/// Largest allowed residual ratio between successive halvings.
pub const LINEARIZATION_RATIO: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CheckFamily {
    Gradient,
    Decoupling,
    DenseOptimum,
    ConflictGap,
    EqualCurvature,
    Dominance,
    Interference,
    Hessian,
    Linearization,
}

impl CheckFamily {
    pub const ALL: [CheckFamily; 9] = [
        CheckFamily::Gradient,
        CheckFamily::Decoupling,
        CheckFamily::DenseOptimum,
        CheckFamily::ConflictGap,
        CheckFamily::EqualCurvature,
        CheckFamily::Dominance,
        CheckFamily::Interference,
        CheckFamily::Hessian,
        CheckFamily::Linearization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckFamily::Gradient => "gradient",
            CheckFamily::Decoupling => "decoupling",
            CheckFamily::DenseOptimum => "dense-optimum",
            CheckFamily::ConflictGap => "conflict-gap",
            CheckFamily::EqualCurvature => "equal-curvature",
            CheckFamily::Dominance => "dominance",
            CheckFamily::Interference => "interference",
            CheckFamily::Hessian => "hessian",
            CheckFamily::Linearization => "linearization",
        }
    }

    /// Families that run on tiny networks and are counted in seeds rather
    /// than random quadratic instances.
    pub fn is_network(self) -> bool {
        matches!(
            self,
            CheckFamily::Gradient | CheckFamily::Decoupling | CheckFamily::Hessian | CheckFamily::Linearization
        )
    }
}

impl fmt::Display for CheckFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown check family {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Random instances per quadratic family.
    pub instances: usize,
    /// Seeds per network family.
    pub seeds: usize,
    pub base_seed: u64,
    /// Probe pairs per Hessian block.
    pub probes: usize,
    /// Corrupts the reverse pass of the gradient family.
    pub fault: Option<BackwardFault>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            instances: 100,
            seeds: 5,
            base_seed: 0,
            probes: 64,
            fault: None,
        }
    }
}

impl CheckOptions {
    fn validate(&self) -> Result<()> {
        if self.probes == 0 {
            return Err(Error::Argument("probes must be at least 1".into()));
        }
        Ok(())
    }
}

fn flat(m: &QuadraticMode) -> Vec<f64> {
    let mut v: Vec<f64> = m.h().iter().copied().collect();
    v.extend(m.beta_star().iter());
    v.push(m.pi());
    v.push(m.base_loss());
    v
}

fn pair_inputs(m0: &QuadraticMode, m1: &QuadraticMode) -> Vec<f64> {
    let mut v = flat(m0);
    v.extend(flat(m1));
    v
}

const QUADRATIC_DIM: usize = 4;

/// Runs one family. Quadratic families yield `instances` records, network
/// families `seeds` records.
pub fn run_family(family: CheckFamily, options: &CheckOptions) -> Result<Vec<CheckRecord>> {
    options.validate()?;
    let count = if family.is_network() { options.seeds } else { options.instances };
    (0..count)
        .map(|i| {
            let seed = options.base_seed.wrapping_add(i as u64);
            let mut rec = run_one(family, seed, options)?;
            rec.instance = i;
            Ok(rec)
        })
        .collect()
}

/// Runs several families in order.
pub fn run_checks(families: &[CheckFamily], options: &CheckOptions) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    for &f in families {
        out.extend(run_family(f, options)?);
    }
    Ok(out)
}

fn run_one(family: CheckFamily, seed: u64, options: &CheckOptions) -> Result<CheckRecord> {
    let name = family.name();
    match family {
        CheckFamily::Gradient => {
            let (ple, b0, b1) = tiny_audit_fixture(seed)?;
            gradient_record(name, &ple, &[b0, b1].concat(), options.fault, None)
        }
        CheckFamily::Decoupling => {
            let (ple, b0, b1) = tiny_audit_fixture(seed)?;
            decoupling_record(name, &ple, &b0, &b1)
        }
        CheckFamily::DenseOptimum => {
            let (m0, m1) = random_quadratic_pair(QUADRATIC_DIM, seed, false);
            let bd = dense_optimum(&m0, &m1)?;
            let grad = m0.gradient(&bd) * m0.pi() + m1.gradient(&bd) * m1.pi();
            Ok(CheckRecord::at_most(name, &pair_inputs(&m0, &m1), grad.norm(), 1e-10))
        }
        CheckFamily::ConflictGap => {
            let (m0, m1) = random_quadratic_pair(QUADRATIC_DIM, seed, false);
            let gap = conflict_gap(&m0, &m1)?;
            let bd = dense_optimum(&m0, &m1)?;
            let direct = dense_objective(&m0, &m1, &bd) - split_objective(&m0, &m1, m0.beta_star(), m1.beta_star());
            let err = (gap - direct).abs();
            Ok(CheckRecord::new(name, &pair_inputs(&m0, &m1), err, 1e-10, err <= 1e-10 && gap >= -1e-12))
        }
        CheckFamily::EqualCurvature => {
            let (m0, m1) = random_quadratic_pair(QUADRATIC_DIM, seed, true);
            let closed = equal_curvature_gap(m0.h(), m0.beta_star(), m1.beta_star(), m0.pi())?;
            let err = (closed - conflict_gap(&m0, &m1)?).abs();
            Ok(CheckRecord::at_most(name, &pair_inputs(&m0, &m1), err, 1e-10))
        }
        CheckFamily::Dominance => {
            let (m0, m1) = random_quadratic_pair(QUADRATIC_DIM, seed, false);
            let rep = fixed_backbone_dominance(&m0, &m1)?;
            // measured: how far the split optimum sits above the dense one
            let excess = rep.split_value - rep.dense_value;
            Ok(CheckRecord::new(name, &pair_inputs(&m0, &m1), excess, 1e-12, rep.holds && excess <= 1e-12))
        }
        CheckFamily::Interference => {
            let (m0, m1) = random_quadratic_pair(QUADRATIC_DIM, seed, false);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let beta = random_vector(QUADRATIC_DIM, &mut rng);
            let lmax = -min_eigenvalue(&(-m0.h()));
            let eta = 0.1 / lmax.max(1e-12);
            let rep = verify_interference_on_quadratic(&m0, &m1, &beta, eta)?;
            let mut inputs = pair_inputs(&m0, &m1);
            inputs.extend(beta.iter());
            inputs.push(eta);
            // measured: how far the dense change strays from its first-order
            // prediction, relative to the allowed second-order bound
            let excess = (rep.change() - rep.first_order).abs() - rep.second_order_bound;
            let pass = rep.consistent && rep.split_within_bound();
            Ok(CheckRecord::new(name, &inputs, excess, 0.0, pass))
        }
        CheckFamily::Hessian => {
            let (ple, b0, b1) = tiny_audit_fixture(seed)?;
            let audit = hessian_block_audit(&ple, &b0, &b1, options.probes, seed)?;
            let cross = audit.beta0_beta1.max_abs;
            let controls = audit.beta0_beta0.max_abs > CONTROL_FLOOR && audit.alpha_beta0.max_abs > CONTROL_FLOOR;
            Ok(CheckRecord::new(
                name,
                &ple.values().flatten(),
                cross,
                CROSS_BLOCK_TOLERANCE,
                cross <= CROSS_BLOCK_TOLERANCE && controls,
            ))
        }
        CheckFamily::Linearization => {
            let (ple, _, _) = tiny_audit_fixture(seed)?;
            let dense = ModelParams::init_dense(ple.config(), seed)?;
            let cloned = ModelParams::clone_from_dense(&dense)?;
            let tokens = [BOS, 6, 7, 8, 9, 10];
            let dir = random_last_expert_direction(&cloned, seed);
            let rows = linearization_residual(&cloned, &tokens, &dir, &LINEARIZATION_EPSILONS, Downstream::Model, FD_STEP)?;
            let worst = rows
                .windows(2)
                .map(|w| w[1].relative() / w[0].relative())
                .fold(0.0, f64::max);
            let affine = linearization_residual(&cloned, &tokens, &dir, &[0.1], Downstream::LmHeadOnly, 1.0)?;
            let pass = worst <= LINEARIZATION_RATIO && affine[0].residual_norm <= 1e-10;
            Ok(CheckRecord::new(name, &cloned.values().flatten(), worst, LINEARIZATION_RATIO, pass))
        }
    }
}

/// Reverse-mode gradient of the mode-weighted objective against central
/// differences. With `coords`, only those flat coordinates are compared.
pub fn gradient_record(
    name: &str,
    params: &ModelParams,
    dataset: &[ChatExample],
    fault: Option<BackwardFault>,
    coords: Option<&[usize]>,
) -> Result<CheckRecord> {
    let pools = split_by_mode(dataset);
    let n = dataset.len() as f64;
    let pi = [pools[0].len() as f64 / n, pools[1].len() as f64 / n];
    let mut reverse = params.values().zeros_like();
    for r in Route::BOTH {
        if pools[r.index()].is_empty() {
            continue;
        }
        let (_, g) = mode_loss_and_grad_with_fault(params, &pools[r.index()], LossReduction::ExampleMean, fault)?;
        for (ys, xs) in reverse.tensors_mut().iter_mut().zip(g.tensors()) {
            ys.data_mut().iter_mut().zip(xs.data()).for_each(|(y, x)| *y += pi[r.index()] * x);
        }
    }
    let layout = &params.layout;
    let f = |tape: &mut Tape, vars: &[Var], pools: &[Vec<ChatExample>; 2]| {
        objective_graph(tape, layout, vars, pools, LossReduction::ExampleMean)
    };
    let err = match coords {
        None => {
            let fd = finite_diff_grad(f, params.values(), &pools, FD_STEP)?;
            max_relative_error(&reverse, &fd, GRADIENT_FLOOR)
        }
        Some(cs) => {
            let fd = crate::grad::finite_diff_grad_at(&f, params.values(), &pools, FD_STEP, cs)?;
            let rev = reverse.flatten();
            cs.iter()
                .zip(&fd)
                .map(|(&c, &v)| crate::grad::relative_error(rev[c], v, GRADIENT_FLOOR))
                .fold(0.0, f64::max)
        }
    };
    Ok(CheckRecord::at_most(name, &params.values().flatten(), err, GRADIENT_TOLERANCE))
}

/// Largest absolute gradient any mode-pure batch puts on the inactive
/// expert. Passes only at exactly zero.
pub fn decoupling_record(
    name: &str,
    params: &ModelParams,
    batch0: &[ChatExample],
    batch1: &[ChatExample],
) -> Result<CheckRecord> {
    let mut worst: f64 = 0.0;
    for (batch, inactive) in [(batch0, Route::Think), (batch1, Route::NoThink)] {
        let (_, g) = mode_loss_and_grad_with_fault(params, batch, LossReduction::ExampleMean, None)?;
        for s in params.segments_in(Block::Expert(inactive)) {
            worst = g.segment(s).data().iter().fold(worst, |m, v| m.max(v.abs()));
        }
    }
    Ok(CheckRecord::new(name, &params.values().flatten(), worst, 0.0, worst == 0.0))
}
