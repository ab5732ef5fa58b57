//! End-to-end run on the synthetic task: a dense source is cloned into a
//! path-locked model, fine-tuned on both modes and scored per mode on
//! held-out prompts, next to a dense model trained the same way.

use super::synth::{generate_synth_dataset, synth_eval_items, SynthTaskSpec};
use super::{evaluate, EvalSettings, LeakageReport, ReflectiveLexicon};
use crate::error::{Error, Result};
use crate::model::{ModelParams, PleConfig};
use crate::tokenizer::{Route, Vocabulary};
use crate::trainer::{validate_dataset, Optimizer, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub task: SynthTaskSpec,
    /// Evaluation prompts, drawn from the same distribution with another seed.
    pub held_out: SynthTaskSpec,
    /// `vocab_size` is replaced by the task vocabulary's size.
    pub model: PleConfig,
    pub init_seed: u64,
    /// `epochs` is ignored; training runs epoch by epoch until the target.
    pub train: TrainConfig,
    pub max_epochs: usize,
    pub target_think_accuracy: f64,
    pub max_new: usize,
    pub baseline: bool,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            task: SynthTaskSpec {
                problems: 1000,
                modulus: 10,
                seed: 1,
            },
            held_out: SynthTaskSpec {
                problems: 200,
                modulus: 10,
                seed: 99,
            },
            model: PleConfig {
                vocab_size: 0,
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                d_ff: 128,
                max_seq: 32,
                rope_base: 10_000.0,
            },
            init_seed: 7,
            train: TrainConfig {
                learning_rate: 0.05,
                batch_size: 16,
                seed: 3,
                optimizer: Optimizer::SgdMomentum,
                momentum: 0.9,
                ..TrainConfig::default()
            },
            max_epochs: 12,
            target_think_accuracy: 0.95,
            max_new: 24,
            baseline: true,
        }
    }
}

/// Held-out scores after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoEpoch {
    pub epoch: usize,
    pub mean_loss: [Option<f64>; 2],
    pub think: LeakageReport,
    pub no_think: LeakageReport,
}

#[derive(Clone, Debug)]
pub struct DemoOutcome {
    pub vocab: Vocabulary,
    pub model: ModelParams,
    pub history: Vec<DemoEpoch>,
    /// Whether the think accuracy target was reached within `max_epochs`.
    pub reached_target: bool,
    /// Dense model after the same number of epochs, `[no_think, think]`.
    pub baseline: Option<[LeakageReport; 2]>,
}

impl DemoOutcome {
    pub fn last(&self) -> &DemoEpoch {
        self.history.last().expect("at least one epoch")
    }
}

fn evaluate_both(
    model: &ModelParams,
    vocab: &Vocabulary,
    items: &[super::EvalItem],
    settings: &EvalSettings,
    lexicon: &ReflectiveLexicon,
) -> Result<[LeakageReport; 2]> {
    Ok([
        evaluate(model, vocab, items, Route::NoThink, settings, lexicon)?,
        evaluate(model, vocab, items, Route::Think, settings, lexicon)?,
    ])
}

/// Trains until the held-out think accuracy reaches the target or
/// `max_epochs` have run, then trains the dense baseline for as many epochs.
pub fn run_demo(config: &DemoConfig) -> Result<DemoOutcome> {
    if config.max_epochs == 0 {
        return Err(Error::Config("max_epochs must be at least 1".into()));
    }
    let (vocab, data) = generate_synth_dataset(&config.task)?;
    validate_dataset(&data)?;
    let items = synth_eval_items(&config.held_out, &vocab)?;
    let model_cfg = PleConfig {
        vocab_size: vocab.len(),
        ..config.model.clone()
    };
    let dense = ModelParams::init_dense(&model_cfg, config.init_seed)?;
    let ple = ModelParams::clone_from_dense(&dense)?;
    let train = TrainConfig {
        epochs: 1,
        ..config.train.clone()
    };
    let settings = EvalSettings {
        generate: crate::model::GenerateOptions {
            max_new: config.max_new,
            ..Default::default()
        },
        append_control: true,
    };
    let lexicon = ReflectiveLexicon::default();

    let mut trainer = Trainer::new(ple, train.clone())?;
    let mut history = Vec::new();
    let mut reached_target = false;
    for epoch in 0..config.max_epochs {
        let summary = trainer.run_epoch(&data)?;
        let [no_think, think] = evaluate_both(trainer.params(), &vocab, &items, &settings, &lexicon)?;
        reached_target = think.accuracy >= config.target_think_accuracy;
        history.push(DemoEpoch {
            epoch,
            mean_loss: summary.mean_loss,
            think,
            no_think,
        });
        if reached_target {
            break;
        }
    }
    let (model, _) = trainer.into_parts();

    let baseline = if config.baseline {
        let mut dense_trainer = Trainer::new(dense, train)?;
        for _ in 0..history.len() {
            dense_trainer.run_epoch(&data)?;
        }
        Some(evaluate_both(dense_trainer.params(), &vocab, &items, &settings, &lexicon)?)
    } else {
        None
    };
    Ok(DemoOutcome {
        vocab,
        model,
        history,
        reached_target,
        baseline,
    })
}
