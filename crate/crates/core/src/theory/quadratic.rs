use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = -1e-10;
const SINGULAR_TOL: f64 = 1e-10;
const PI_TOL: f64 = 1e-12;

/// Local quadratic surrogate of one mode's loss:
/// `L(β) = base_loss + ½ (β − β★)ᵀ H (β − β★)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticMode {
    h: DMatrix<f64>,
    beta_star: DVector<f64>,
    pi: f64,
    base_loss: f64,
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

impl QuadraticMode {
    pub fn new(h: DMatrix<f64>, beta_star: DVector<f64>, pi: f64, base_loss: f64) -> Result<Self> {
        let d = beta_star.len();
        if h.nrows() != d || h.ncols() != d {
            return Err(Error::shape("quadratic mode", &[h.nrows(), h.ncols()], &[d]));
        }
        if d == 0 {
            return Err(Error::Argument("quadratic mode needs at least one dimension".into()));
        }
        if !(0.0..=1.0).contains(&pi) {
            return Err(Error::Argument(format!("mode weight must lie in [0, 1], got {pi}")));
        }
        let asym = (&h - h.transpose()).abs().max();
        if asym > SYMMETRY_TOL {
            return Err(Error::Argument(format!("curvature is not symmetric (max asymmetry {asym:e})")));
        }
        let min = min_eigenvalue(&h);
        if min < PSD_TOL {
            return Err(Error::Argument(format!(
                "curvature is not positive semidefinite (min eigenvalue {min:e})"
            )));
        }
        Ok(Self {
            h,
            beta_star,
            pi,
            base_loss,
        })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn beta_star(&self) -> &DVector<f64> {
        &self.beta_star
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    pub fn base_loss(&self) -> f64 {
        self.base_loss
    }

    pub fn dim(&self) -> usize {
        self.beta_star.len()
    }

    pub fn loss(&self, beta: &DVector<f64>) -> f64 {
        let d = beta - &self.beta_star;
        self.base_loss + 0.5 * d.dot(&(&self.h * &d))
    }

    pub fn gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.h * (beta - &self.beta_star)
    }
}

fn check_pair(m0: &QuadraticMode, m1: &QuadraticMode) -> Result<()> {
    if m0.dim() != m1.dim() {
        return Err(Error::shape("quadratic pair", &[m0.dim()], &[m1.dim()]));
    }
    if (m0.pi + m1.pi - 1.0).abs() > PI_TOL {
        return Err(Error::Argument(format!(
            "mode weights must sum to 1, got {} + {}",
            m0.pi, m1.pi
        )));
    }
    Ok(())
}

/// `π0·L0(β) + π1·L1(β)` with one shared parameter vector.
pub fn dense_objective(m0: &QuadraticMode, m1: &QuadraticMode, beta: &DVector<f64>) -> f64 {
    m0.pi * m0.loss(beta) + m1.pi * m1.loss(beta)
}

/// `π0·L0(β0) + π1·L1(β1)` with separate parameters per mode.
pub fn split_objective(m0: &QuadraticMode, m1: &QuadraticMode, beta0: &DVector<f64>, beta1: &DVector<f64>) -> f64 {
    m0.pi * m0.loss(beta0) + m1.pi * m1.loss(beta1)
}

/// Minimiser of [`dense_objective`]:
/// `(π0H0 + π1H1)⁻¹ (π0H0β0★ + π1H1β1★)`.
pub fn dense_optimum(m0: &QuadraticMode, m1: &QuadraticMode) -> Result<DVector<f64>> {
    check_pair(m0, m1)?;
    let a = &m0.h * m0.pi + &m1.h * m1.pi;
    let min = min_eigenvalue(&a);
    if min <= SINGULAR_TOL {
        return Err(Error::Singular { min_eigenvalue: min });
    }
    let rhs = (&m0.h * &m0.beta_star) * m0.pi + (&m1.h * &m1.beta_star) * m1.pi;
    let chol = a.cholesky().ok_or(Error::Singular { min_eigenvalue: min })?;
    Ok(chol.solve(&rhs))
}

/// `½ Σ_r π_r (β_dense★ − β_r★)ᵀ H_r (β_dense★ − β_r★)`.
pub fn conflict_gap(m0: &QuadraticMode, m1: &QuadraticMode) -> Result<f64> {
    let bd = dense_optimum(m0, m1)?;
    Ok([m0, m1]
        .iter()
        .map(|m| {
            let d = &bd - &m.beta_star;
            0.5 * m.pi * d.dot(&(&m.h * &d))
        })
        .sum())
}

/// `½ π0 π1 Δβᵀ H Δβ` with `Δβ = β1★ − β0★`.
pub fn equal_curvature_gap(h: &DMatrix<f64>, beta0_star: &DVector<f64>, beta1_star: &DVector<f64>, pi0: f64) -> Result<f64> {
    if beta0_star.len() != beta1_star.len() || h.nrows() != beta0_star.len() || h.ncols() != beta0_star.len() {
        return Err(Error::shape("equal_curvature_gap", &[h.nrows(), h.ncols()], &[beta0_star.len(), beta1_star.len()]));
    }
    if !(0.0..=1.0).contains(&pi0) {
        return Err(Error::Argument(format!("pi0 must lie in [0, 1], got {pi0}")));
    }
    let delta = beta1_star - beta0_star;
    Ok(0.5 * pi0 * (1.0 - pi0) * delta.dot(&(h * &delta)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DominanceReport {
    /// `π0·L0(β0★) + π1·L1(β1★)`.
    pub split_value: f64,
    /// Dense objective at the dense optimum.
    pub dense_value: f64,
    pub holds: bool,
}

/// Compares the best split (separate-expert) objective with the best dense one.
pub fn fixed_backbone_dominance(m0: &QuadraticMode, m1: &QuadraticMode) -> Result<DominanceReport> {
    let bd = dense_optimum(m0, m1)?;
    let split_value = split_objective(m0, m1, &m0.beta_star, &m1.beta_star);
    let dense_value = dense_objective(m0, m1, &bd);
    Ok(DominanceReport {
        split_value,
        dense_value,
        holds: split_value <= dense_value + 1e-12,
    })
}

/// Per-mode gradients at a shared point.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPair {
    pub g0: DVector<f64>,
    pub g1: DVector<f64>,
    pub pi0: f64,
    pub pi1: f64,
}

impl GradientPair {
    pub fn new(g0: DVector<f64>, g1: DVector<f64>, pi0: f64, pi1: f64) -> Result<Self> {
        if g0.len() != g1.len() {
            return Err(Error::shape("gradient pair", &[g0.len()], &[g1.len()]));
        }
        if pi0 < 0.0 || pi1 < 0.0 || (pi0 + pi1 - 1.0).abs() > PI_TOL {
            return Err(Error::Argument(format!("weights must be non-negative and sum to 1, got {pi0} + {pi1}")));
        }
        Ok(Self { g0, g1, pi0, pi1 })
    }

    /// Dense update direction `π0·g0 + π1·g1`.
    pub fn combined(&self) -> DVector<f64> {
        &self.g0 * self.pi0 + &self.g1 * self.pi1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterferenceVerdict {
    /// `g0ᵀg1 < −(π0/π1)·‖g0‖²`: a dense step raises the mode-0 loss at first order.
    pub interferes: bool,
    /// `π0‖g0‖² + π1·g0ᵀg1`; the first-order mode-0 change is `−η·delta`.
    pub delta: f64,
}

pub fn interference_predicate(gp: &GradientPair) -> Result<InterferenceVerdict> {
    let g0_sq = gp.g0.norm_squared();
    if g0_sq == 0.0 || gp.pi1 == 0.0 {
        return Err(Error::Degenerate(
            "interference needs a nonzero mode-0 gradient and a positive mode-1 weight".into(),
        ));
    }
    let dot = gp.g0.dot(&gp.g1);
    Ok(InterferenceVerdict {
        interferes: dot < -(gp.pi0 / gp.pi1) * g0_sq,
        delta: gp.pi0 * g0_sq + gp.pi1 * dot,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterferenceReport {
    pub verdict: InterferenceVerdict,
    pub loss_before: f64,
    /// Mode-0 loss after one dense step `β − η(π0g0 + π1g1)`.
    pub loss_after: f64,
    /// `−η·delta`.
    pub first_order: f64,
    /// `½η²·dᵀH0d` with `d = π0g0 + π1g1`.
    pub second_order_bound: f64,
    /// Mode-0 loss change after a split step `β0 − η·π0·g0` instead.
    pub split_change: f64,
    /// `−η·π0·‖g0‖²`.
    pub split_first_order: f64,
    /// `½η²π0²·g0ᵀH0g0`.
    pub split_second_order_bound: f64,
    /// The measured change lies within the second-order bound of the
    /// first-order prediction, and shares its sign whenever the first-order
    /// term dominates.
    pub consistent: bool,
}

impl InterferenceReport {
    pub fn change(&self) -> f64 {
        self.loss_after - self.loss_before
    }

    /// The split step changes the mode-0 loss by at most its first-order
    /// decrease plus the second-order bound.
    pub fn split_within_bound(&self) -> bool {
        let slack = 1e-12 * (1.0 + self.loss_before.abs());
        self.split_change <= self.split_first_order + self.split_second_order_bound + slack
    }
}

/// Takes one dense SGD step on exact quadratic losses and checks the
/// first-order interference prediction against the measured mode-0 change.
pub fn verify_interference_on_quadratic(
    m0: &QuadraticMode,
    m1: &QuadraticMode,
    beta: &DVector<f64>,
    eta: f64,
) -> Result<InterferenceReport> {
    check_pair(m0, m1)?;
    if beta.len() != m0.dim() {
        return Err(Error::shape("interference point", &[beta.len()], &[m0.dim()]));
    }
    if !(eta > 0.0) {
        return Err(Error::Argument(format!("step size must be positive, got {eta}")));
    }
    let gp = GradientPair::new(m0.gradient(beta), m1.gradient(beta), m0.pi, m1.pi)?;
    let verdict = interference_predicate(&gp)?;
    let d = gp.combined();
    let loss_before = m0.loss(beta);
    let loss_after = m0.loss(&(beta - &d * eta));
    let first_order = -eta * verdict.delta;
    let second_order_bound = 0.5 * eta * eta * d.dot(&(&m0.h * &d));

    let split_dir = &gp.g0 * gp.pi0;
    let split_change = m0.loss(&(beta - &split_dir * eta)) - loss_before;
    let split_first_order = -eta * gp.pi0 * gp.g0.norm_squared();
    let split_second_order_bound = 0.5 * eta * eta * split_dir.dot(&(&m0.h * &split_dir));

    let change = loss_after - loss_before;
    let slack = 1e-12 * (1.0 + loss_before.abs());
    let within = (change - first_order).abs() <= second_order_bound + slack;
    let signs_agree = first_order.abs() <= second_order_bound || change.signum() == first_order.signum();
    Ok(InterferenceReport {
        verdict,
        loss_before,
        loss_after,
        first_order,
        second_order_bound,
        split_change,
        split_first_order,
        split_second_order_bound,
        consistent: within && signs_agree,
    })
}

/// `AᵀA` with `A` an `(d + extra_rows) × d` standard normal matrix.
pub fn random_psd(d: usize, extra_rows: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d + extra_rows, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let h = a.transpose() * &a;
    // exact symmetry
    (&h + h.transpose()) * 0.5
}

pub fn random_vector(d: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// A random full-rank pair with `π0 ∈ (0.1, 0.9)`; `equal_curvature`
/// gives both modes the same `H`.
pub fn random_quadratic_pair(d: usize, seed: u64, equal_curvature: bool) -> (QuadraticMode, QuadraticMode) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h0 = random_psd(d, 2, &mut rng);
    let h1 = if equal_curvature { h0.clone() } else { random_psd(d, 2, &mut rng) };
    let pi0 = rng.random_range(0.1..0.9);
    let b0 = random_vector(d, &mut rng);
    let b1 = random_vector(d, &mut rng);
    let base0 = rng.random_range(0.0..1.0);
    let base1 = rng.random_range(0.0..1.0);
    (
        QuadraticMode::new(h0, b0, pi0, base0).expect("AᵀA is PSD"),
        QuadraticMode::new(h1, b1, 1.0 - pi0, base1).expect("AᵀA is PSD"),
    )
}
