#![allow(dead_code)]

use ple_core::model::{ModelParams, PleConfig};
use ple_core::tokenizer::{BOS, CTRL_THINK, EOS};
use ple_core::trainer::ChatExample;
use ple_core::Route;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A cloned tiny model whose think expert has been pushed away from the
/// no-think one in every layer.
pub fn diverged_model(vocab: usize, seed: u64) -> ModelParams {
    let dense = ModelParams::init_dense(&PleConfig::tiny(vocab), seed).unwrap();
    let mut ple = ModelParams::clone_from_dense(&dense).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1f);
    for l in 0..ple.config().n_layers {
        for s in ple.expert_segments(l, Route::Think) {
            for v in ple.values_mut().segment_mut(s).data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
    ple
}

/// A model that greedily emits the think control token after any prompt,
/// whichever route it runs on. Residual dimension 0 is held at the
/// embedding's constant 1 (no attention or expert writes to it) and is the
/// only dimension the final norm passes to the head, whose only nonzero row
/// is the think control token's.
pub fn forced_think_emitter(vocab: usize, seed: u64) -> ModelParams {
    let mut ple = diverged_model(vocab, seed);
    let cfg = ple.config().clone();
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let values = ple.values_mut();
    let idx = |values: &ple_core::ParamVector, name: &str| values.index_of(name).unwrap();

    let embed = idx(values, "embed");
    for row in values.segment_mut(embed).data_mut().chunks_mut(d) {
        row[0] = 1.0;
    }
    for l in 0..cfg.n_layers {
        let wo = idx(values, &format!("layer{l}.attn.wo"));
        values.segment_mut(wo).data_mut()[..d].fill(0.0);
        for e in 0..2 {
            let down = idx(values, &format!("layer{l}.expert{e}.down"));
            values.segment_mut(down).data_mut()[..f].fill(0.0);
        }
    }
    let norm = idx(values, "final_norm");
    let gain = values.segment_mut(norm).data_mut();
    gain.fill(0.0);
    gain[0] = 1.0;
    let head = idx(values, "lm_head");
    let w = values.segment_mut(head).data_mut();
    w.fill(0.0);
    w[CTRL_THINK * d] = 10.0;
    ple
}

/// A random mixed-mode dataset over ids `6..vocab`.
pub fn random_dataset(vocab: usize, n: usize, seed: u64) -> Vec<ChatExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mode = if i % 3 == 1 || rng.random_bool(0.3) { Route::Think } else { Route::NoThink };
            let plen = rng.random_range(1..4);
            let tlen = rng.random_range(1..5);
            let mut prompt = vec![BOS];
            prompt.extend((0..plen).map(|_| rng.random_range(6..vocab)));
            let mut target: Vec<usize> = (0..tlen).map(|_| rng.random_range(6..vocab)).collect();
            target.push(EOS);
            ChatExample::new(prompt, target, mode).unwrap()
        })
        .collect()
}

use ple_core::leakage::{Candidate, RejectReason};

/// 100 wrong answers, 100 correct but reflective answers and 100 correct
/// short clean answers, interleaved, with the reason each one should fail.
pub fn filter_pool() -> (Vec<Candidate>, Vec<Option<RejectReason>>) {
    let mut pool = Vec::new();
    let mut expected = Vec::new();
    for i in 0..100 {
        let gold = (i % 10).to_string();
        let wrong = ((i + 3) % 10).to_string();
        let prompt = format!("{} + {} =", i % 7, i % 5);
        pool.push(Candidate {
            prompt: prompt.clone(),
            response: format!("answer: {wrong}"),
            gold: gold.clone(),
        });
        expected.push(Some(RejectReason::Correctness));
        pool.push(Candidate {
            prompt: prompt.clone(),
            response: format!("hmm answer: {gold}"),
            gold: gold.clone(),
        });
        expected.push(Some(RejectReason::Style));
        pool.push(Candidate {
            prompt,
            response: format!("answer: {gold}"),
            gold,
        });
        expected.push(None);
    }
    (pool, expected)
}
