use super::EvalItem;
use crate::error::{Error, Result};
use crate::tokenizer::{Route, Vocabulary, BOS};
use crate::trainer::{example_from_record, ChatExample, DatasetRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Modular-addition question answering. Each problem `a + b` (operands
/// below `modulus`) yields a think example with a worked derivation that
/// contains reflective markers, and a no-think example that states only
/// the answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub problems: usize,
    pub modulus: usize,
    pub seed: u64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        Self {
            problems: 1000,
            modulus: 10,
            seed: 0,
        }
    }
}

impl SynthTaskSpec {
    fn validate(&self) -> Result<()> {
        if self.modulus < 2 {
            return Err(Error::Config(format!("modulus must be at least 2, got {}", self.modulus)));
        }
        Ok(())
    }
}

const WORDS: [&str; 8] = ["+", "=", "hmm", "plus", "makes", "wait", "mod", "gives"];

fn prompt_text(a: usize, b: usize) -> String {
    format!("{a} + {b} =")
}

fn think_text(a: usize, b: usize, m: usize) -> String {
    let s = a + b;
    let g = s % m;
    format!("hmm {a} plus {b} makes {s} wait {s} mod {m} gives {g} answer: {g}")
}

fn no_think_text(g: usize) -> String {
    format!("answer: {g}")
}

fn problems(spec: &SynthTaskSpec) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.problems)
        .map(|_| (rng.random_range(0..spec.modulus), rng.random_range(0..spec.modulus)))
        .collect()
}

/// Every token the task can produce.
pub fn synth_vocabulary(spec: &SynthTaskSpec) -> Vocabulary {
    let numbers = (0..=2 * (spec.modulus.max(2) - 1)).map(|n| n.to_string());
    Vocabulary::new(
        numbers
            .chain(WORDS.iter().map(|w| w.to_string()))
            .chain([super::ANSWER_MARKER.to_string()]),
    )
}

/// Records in problem order, no-think before think for each problem.
pub fn synth_records(spec: &SynthTaskSpec) -> Result<Vec<DatasetRecord>> {
    spec.validate()?;
    let m = spec.modulus;
    let mut out = Vec::with_capacity(2 * spec.problems);
    for (a, b) in problems(spec) {
        let g = (a + b) % m;
        out.push(DatasetRecord {
            prompt: prompt_text(a, b),
            target: no_think_text(g),
            mode: Route::NoThink,
            answer: Some(g.to_string()),
        });
        out.push(DatasetRecord {
            prompt: prompt_text(a, b),
            target: think_text(a, b, m),
            mode: Route::Think,
            answer: Some(g.to_string()),
        });
    }
    Ok(out)
}

/// Vocabulary and encoded examples of the task.
pub fn generate_synth_dataset(spec: &SynthTaskSpec) -> Result<(Vocabulary, Vec<ChatExample>)> {
    let vocab = synth_vocabulary(spec);
    let examples = synth_records(spec)?
        .iter()
        .enumerate()
        .map(|(i, r)| example_from_record(r, &vocab, i))
        .collect::<Result<Vec<_>>>()?;
    Ok((vocab, examples))
}

/// One evaluation prompt per problem, without a control token.
pub fn synth_eval_items(spec: &SynthTaskSpec, vocab: &Vocabulary) -> Result<Vec<EvalItem>> {
    spec.validate()?;
    Ok(problems(spec)
        .into_iter()
        .map(|(a, b)| {
            let mut prompt_ids = vec![BOS];
            prompt_ids.extend(vocab.encode(&prompt_text(a, b)));
            EvalItem {
                prompt_ids,
                gold: ((a + b) % spec.modulus).to_string(),
            }
        })
        .collect())
}
