//! Quadratic-surrogate analysis of mode conflict, and the numerical checks
//! that tie it to real path-locked models.

mod checks;
mod network;
mod quadratic;

pub use checks::{
    decoupling_record, gradient_record, run_checks, run_family, CheckFamily, CheckOptions, CONTROL_FLOOR,
    CROSS_BLOCK_TOLERANCE, GRADIENT_FLOOR, GRADIENT_TOLERANCE, LINEARIZATION_EPSILONS, LINEARIZATION_RATIO,
};

pub use network::{
    hessian_block_audit, length_mass_report, linearization_residual, perturb_last_think_expert,
    random_last_expert_direction, stretch_think_targets, think_length_invariance, update_mass_by_mode, Downstream,
    HessianAudit, LengthInvarianceReport, LengthMassReport, LinearizationRow, ModeMass,
};
pub use quadratic::{
    conflict_gap, dense_objective, dense_optimum, equal_curvature_gap, fixed_backbone_dominance, interference_predicate,
    min_eigenvalue, random_psd, random_quadratic_pair, random_vector, split_objective,
    verify_interference_on_quadratic, DominanceReport, GradientPair, InterferenceReport, InterferenceVerdict,
    QuadraticMode,
};

use crate::error::Result;
use crate::model::{ModelParams, PleConfig};
use crate::tokenizer::{Route, BOS, EOS};
use crate::trainer::ChatExample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

/// Outcome of one numerical check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub check: String,
    /// Index of the random instance or seed within its family.
    pub instance: usize,
    /// SHA-256 of the check's numeric inputs.
    pub inputs_digest: String,
    pub measured: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CheckRecord {
    pub fn new(check: &str, inputs: &[f64], measured: f64, threshold: f64, pass: bool) -> Self {
        Self {
            check: check.to_string(),
            instance: 0,
            inputs_digest: digest_f64s(inputs),
            measured,
            threshold,
            pass,
        }
    }

    /// Passes when `measured ≤ threshold`.
    pub fn at_most(check: &str, inputs: &[f64], measured: f64, threshold: f64) -> Self {
        Self::new(check, inputs, measured, threshold, measured <= threshold)
    }
}

/// Hex SHA-256 over the little-endian bytes of `values`.
pub fn digest_f64s(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Fixed-width table of check records.
pub fn render_table(records: &[CheckRecord]) -> String {
    let width = records.iter().map(|r| r.check.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  {:>5}  {:>12}  {:>12}  result\n", "check", "inst", "measured", "threshold");
    for r in records {
        let _ = writeln!(
            s,
            "{:<width$}  {:>5}  {:>12.4e}  {:>12.4e}  {}",
            r.check,
            r.instance,
            r.measured,
            r.threshold,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    s
}

/// A tiny cloned model with its experts pulled apart by a short burst of
/// per-mode training, plus one batch per mode.
pub fn tiny_audit_fixture(seed: u64) -> Result<(ModelParams, Vec<ChatExample>, Vec<ChatExample>)> {
    let cfg = PleConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_seq: 16,
        rope_base: 10_000.0,
    };
    let dense = ModelParams::init_dense(&cfg, seed)?;
    let mut ple = ModelParams::clone_from_dense(&dense)?;
    // separate the experts so the audit is not taken at a symmetric point
    for r in Route::BOTH {
        for l in 0..cfg.n_layers {
            for (k, s) in ple.expert_segments(l, r).into_iter().enumerate() {
                let data = ple.values_mut().segment_mut(s).data_mut();
                for (i, v) in data.iter_mut().enumerate() {
                    *v += 0.05 * (((i * 7 + k * 3 + l + r.index() * 11) % 13) as f64 / 13.0 - 0.5);
                }
            }
        }
    }
    let tok = |i: usize| 6 + (i + seed as usize) % 6;
    let b0 = vec![
        ChatExample::new(vec![BOS, tok(0), tok(1)], vec![tok(2), EOS], Route::NoThink)?,
        ChatExample::new(vec![BOS, tok(3)], vec![tok(4), tok(5), EOS], Route::NoThink)?,
    ];
    let b1 = vec![ChatExample::new(vec![BOS, tok(1), tok(4)], vec![tok(0), tok(3), tok(2), EOS], Route::Think)?];
    Ok((ple, b0, b1))
}
