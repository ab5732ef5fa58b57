//! Routing-conditioned supervised fine-tuning.
//!
//! Batches are mode-pure: each one runs every layer through the expert of
//! its route, so a batch's gradient is exactly zero on the other expert.
//! Pools alternate no-think/think while both have batches left.

mod data;
mod objective;

pub use data::{
    example_from_record, load_dataset, parse_dataset, read_records, validate_dataset, write_records, ChatExample,
    DatasetRecord,
};
pub use objective::{
    batch_route, full_objective, full_objective_grad, joint_objective_grad, mode_fractions, mode_loss, mode_loss_and_grad,
    mode_loss_and_grad_with_fault, mode_loss_fn, sgd_step, split_by_mode, token_level_route_gradients,
    LossReduction,
};
pub(crate) use objective::objective_graph;

use crate::error::{Error, Result};
use crate::model::{flat_of, Block, ModelParams};
use crate::tensor::ParamVector;
use crate::tokenizer::Route;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    /// Heavy-ball momentum. Breaks the exact trajectory identity.
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub reduction: LossReduction,
    /// Shuffle each pool at the start of every epoch.
    pub shuffle: bool,
    /// Global-norm gradient clipping. Breaks the exact trajectory identity.
    pub clip_norm: Option<f64>,
    /// Leave the shared backbone untouched and train experts only.
    pub freeze_shared: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 1,
            batch_size: 8,
            seed: 0,
            optimizer: Optimizer::Sgd,
            momentum: 0.9,
            reduction: LossReduction::ExampleMean,
            shuffle: true,
            clip_norm: None,
            freeze_shared: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Whether `β1 − β0 = (β1 − β0)⁽⁰⁾ − η·Σ(g1 − g0)` holds exactly.
    pub fn exact_trajectory(&self) -> bool {
        self.optimizer == Optimizer::Sgd && self.clip_norm.is_none()
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub mode: Route,
    pub loss: f64,
    /// Norm of the gradient on the active expert.
    pub grad_norm: f64,
    /// Norm of the running `Σ g1 − Σ g0`.
    pub cum_grad_diff_norm: f64,
    /// `‖β1 − β0‖` after the step.
    pub expert_gap_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryLog {
    pub records: Vec<StepRecord>,
    learning_rate: f64,
    exact: bool,
    initial_gap: Vec<f64>,
    cum_grad_diff: Vec<f64>,
}

pub const TRAJECTORY_CSV_HEADER: &str = "step,epoch,mode,loss,grad_norm,cum_grad_diff_norm,expert_gap_norm";

fn expert_gap(params: &ModelParams) -> Vec<f64> {
    let b0 = params.block_flat(Block::Expert(Route::NoThink));
    let b1 = params.block_flat(Block::Expert(Route::Think));
    b1.iter().zip(&b0).map(|(a, b)| a - b).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl TrajectoryLog {
    fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        let initial_gap = expert_gap(params);
        Self {
            records: Vec::new(),
            learning_rate: config.learning_rate,
            exact: config.exact_trajectory(),
            cum_grad_diff: vec![0.0; initial_gap.len()],
            initial_gap,
        }
    }

    /// Running `Σ_s g1⁽ˢ⁾ − Σ_s g0⁽ˢ⁾` over the expert coordinates.
    pub fn cumulative_grad_diff(&self) -> &[f64] {
        &self.cum_grad_diff
    }

    /// `(β1 − β0)⁽⁰⁾ − η·Σ(g1 − g0)`.
    pub fn predicted_gap(&self) -> Vec<f64> {
        self.initial_gap
            .iter()
            .zip(&self.cum_grad_diff)
            .map(|(g0, c)| g0 - self.learning_rate * c)
            .collect()
    }

    /// Largest per-coordinate deviation between the measured expert gap of
    /// `params` and [`predicted_gap`](Self::predicted_gap).
    pub fn identity_residual(&self, params: &ModelParams) -> Result<f64> {
        if !self.exact {
            return Err(Error::Argument(
                "the trajectory identity is exact only for plain SGD without clipping".into(),
            ));
        }
        let measured = expert_gap(params);
        if measured.len() != self.initial_gap.len() {
            return Err(Error::Argument("parameters do not belong to this run".into()));
        }
        Ok(measured
            .iter()
            .zip(self.predicted_gap())
            .map(|(m, p)| (m - p).abs())
            .fold(0.0, f64::max))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAJECTORY_CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{:e},{:e},{:e},{:e}",
                r.step, r.epoch, r.mode, r.loss, r.grad_norm, r.cum_grad_diff_norm, r.expert_gap_norm
            );
        }
        s
    }
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    /// Mean batch loss per mode, `None` for an empty pool.
    pub mean_loss: [Option<f64>; 2],
}

/// Owns the parameters for the duration of training.
pub struct Trainer {
    params: ModelParams,
    config: TrainConfig,
    log: TrajectoryLog,
    velocity: Option<ParamVector>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let log = TrajectoryLog::new(&params, &config);
        let velocity = (config.optimizer == Optimizer::SgdMomentum).then(|| params.values().zeros_like());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            params,
            config,
            log,
            velocity,
            rng,
            epoch: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn log(&self) -> &TrajectoryLog {
        &self.log
    }

    pub fn into_parts(self) -> (ModelParams, TrajectoryLog) {
        (self.params, self.log)
    }

    fn is_active(&self, segment: usize, route: Route) -> bool {
        match self.params.block_of(segment) {
            Block::Shared => !self.config.freeze_shared,
            Block::Expert(r) => r == route,
            Block::DenseMlp => true,
        }
    }

    /// One update on a mode-pure batch. Segments of the inactive expert
    /// (and of the backbone when frozen) are not touched, optimizer state
    /// included.
    pub fn step(&mut self, batch: &[ChatExample]) -> Result<&StepRecord> {
        let route = batch_route(batch)?;
        let (loss, mut grads) = mode_loss_and_grad(&self.params, batch, self.config.reduction)?;
        let active: Vec<usize> = (0..grads.len()).filter(|&s| self.is_active(s, route)).collect();

        let expert_segments = self.params.segments_in(Block::Expert(route));
        let expert_grad = flat_of(&grads, &expert_segments);
        if !expert_grad.is_empty() {
            let sign = match route {
                Route::Think => 1.0,
                Route::NoThink => -1.0,
            };
            for (c, g) in self.log.cum_grad_diff.iter_mut().zip(&expert_grad) {
                *c += sign * g;
            }
        }

        if let Some(limit) = self.config.clip_norm {
            let n = norm(&flat_of(&grads, &active));
            if n > limit {
                let k = limit / n;
                for &s in &active {
                    grads.segment_mut(s).data_mut().iter_mut().for_each(|g| *g *= k);
                }
            }
        }

        let lr = self.config.learning_rate;
        let mu = self.config.momentum;
        let values = self.params.values_mut();
        for &s in &active {
            let g = grads.segment(s).data();
            let p = values.segment_mut(s).data_mut();
            match self.velocity.as_mut() {
                None => p.iter_mut().zip(g).for_each(|(pv, gv)| *pv += -lr * gv),
                Some(vel) => {
                    let v = vel.segment_mut(s).data_mut();
                    for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                        *vv = mu * *vv + gv;
                        *pv += -lr * *vv;
                    }
                }
            }
        }

        let record = StepRecord {
            step: self.log.records.len(),
            epoch: self.epoch,
            mode: route,
            loss,
            grad_norm: norm(&expert_grad),
            cum_grad_diff_norm: norm(&self.log.cum_grad_diff),
            expert_gap_norm: norm(&expert_gap(&self.params)),
        };
        self.log.records.push(record);
        Ok(self.log.records.last().expect("just pushed"))
    }

    /// Batch index lists for one epoch: each pool shuffled (if enabled),
    /// chunked, then interleaved no-think, think, no-think, ...
    pub fn schedule(&mut self, dataset: &[ChatExample]) -> Vec<Vec<usize>> {
        let mut pools: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (i, ex) in dataset.iter().enumerate() {
            pools[ex.mode.index()].push(i);
        }
        let mut chunks: [Vec<Vec<usize>>; 2] = [Vec::new(), Vec::new()];
        for (pool, out) in pools.iter_mut().zip(chunks.iter_mut()) {
            if self.config.shuffle {
                pool.shuffle(&mut self.rng);
            }
            *out = pool.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect();
        }
        let [c0, c1] = chunks;
        let mut order = Vec::with_capacity(c0.len() + c1.len());
        let mut i0 = c0.into_iter();
        let mut i1 = c1.into_iter();
        loop {
            let a = i0.next();
            let b = i1.next();
            if a.is_none() && b.is_none() {
                break;
            }
            order.extend(a);
            order.extend(b);
        }
        order
    }

    pub fn run_epoch(&mut self, dataset: &[ChatExample]) -> Result<EpochSummary> {
        if dataset.is_empty() {
            return Err(Error::Argument("empty dataset".into()));
        }
        validate_dataset(dataset)?;
        let order = self.schedule(dataset);
        let mut sums = [0.0; 2];
        let mut counts = [0usize; 2];
        for indices in &order {
            let batch: Vec<ChatExample> = indices.iter().map(|&i| dataset[i].clone()).collect();
            let rec = self.step(&batch)?;
            sums[rec.mode.index()] += rec.loss;
            counts[rec.mode.index()] += 1;
        }
        let summary = EpochSummary {
            epoch: self.epoch,
            steps: order.len(),
            mean_loss: [0, 1].map(|r| (counts[r] > 0).then(|| sums[r] / counts[r] as f64)),
        };
        self.epoch += 1;
        Ok(summary)
    }
}

/// Runs `config.epochs` epochs and returns the trained parameters with the log.
pub fn train(params: ModelParams, dataset: &[ChatExample], config: &TrainConfig) -> Result<(ModelParams, TrajectoryLog)> {
    validate_dataset(dataset)?;
    let mut trainer = Trainer::new(params, config.clone())?;
    for _ in 0..config.epochs {
        trainer.run_epoch(dataset)?;
    }
    Ok(trainer.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PleConfig;
    use crate::tokenizer::BOS;

    fn setup() -> (ModelParams, Vec<ChatExample>) {
        let dense = ModelParams::init_dense(&PleConfig::tiny(16), 2).unwrap();
        let ple = ModelParams::clone_from_dense(&dense).unwrap();
        let mut data = Vec::new();
        for i in 0..6 {
            let mode = if i % 3 == 0 { Route::Think } else { Route::NoThink };
            data.push(ChatExample::new(vec![BOS, 6 + i], vec![7 + i, 2], mode).unwrap());
        }
        (ple, data)
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut p = crate::grad::single_segment("p", crate::Tensor::scalar(1.0));
        let g = crate::grad::single_segment("p", crate::Tensor::scalar(2.0));
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!((p.segment(0).item() - 0.8).abs() < 1e-15);
        let before = p.clone();
        sgd_step(&mut p, &before.zeros_like(), 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn schedule_alternates_modes() {
        let (ple, data) = setup();
        let mut t = Trainer::new(
            ple,
            TrainConfig {
                batch_size: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let modes: Vec<Route> = t.schedule(&data).iter().map(|b| data[b[0]].mode).collect();
        assert_eq!(
            modes,
            vec![Route::NoThink, Route::Think, Route::NoThink, Route::Think, Route::NoThink, Route::NoThink]
        );
    }

    #[test]
    fn mixed_batch_is_rejected() {
        let (ple, data) = setup();
        assert!(matches!(mode_loss(&ple, &data, LossReduction::ExampleMean), Err(Error::Batching(_))));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"optimizer":"sgd_momentum","epochs":3}"#).unwrap();
        assert_eq!(parsed.optimizer, Optimizer::SgdMomentum);
        assert_eq!(parsed.batch_size, 8);
    }

    #[test]
    fn trajectory_identity_and_determinism() {
        let (ple, data) = setup();
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 2,
            learning_rate: 0.1,
            ..Default::default()
        };
        let (a, log_a) = train(ple.clone(), &data, &cfg).unwrap();
        let (b, log_b) = train(ple, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert!(log_a.identity_residual(&a).unwrap() <= 1e-10);
        assert!(log_a.to_csv().starts_with(TRAJECTORY_CSV_HEADER));
    }
}
