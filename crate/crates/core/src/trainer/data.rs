use crate::error::{Error, Result};
use crate::tokenizer::{is_control, resolve_route, Route, Vocabulary, BOS, EOS};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// One tagged chat example in token-id form.
#[derive(Clone, Debug, PartialEq)]
pub struct ChatExample {
    /// Ends with the control token of `mode`.
    pub prompt_ids: Vec<usize>,
    /// Assistant response, including the end-of-turn token.
    pub target_ids: Vec<usize>,
    pub mode: Route,
    /// Reference final answer, when the task has one.
    pub answer: Option<String>,
}

impl ChatExample {
    /// Builds an example, appending the mode's control token to the prompt
    /// when the prompt does not already end with it.
    pub fn new(prompt_ids: Vec<usize>, target_ids: Vec<usize>, mode: Route) -> Result<Self> {
        let mut ex = Self {
            prompt_ids,
            target_ids,
            mode,
            answer: None,
        };
        if ex.prompt_ids.last().is_none_or(|&id| !is_control(id)) && !ex.routes_elsewhere() {
            ex.prompt_ids.push(mode.control_token());
        }
        ex.check().map_err(Error::Argument)?;
        Ok(ex)
    }

    fn routes_elsewhere(&self) -> bool {
        self.prompt_ids.iter().any(|&id| is_control(id))
            && resolve_route(&self.prompt_ids, self.mode) != self.mode
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.prompt_ids.is_empty() {
            return Err("empty prompt".into());
        }
        if self.target_ids.is_empty() {
            return Err("empty target".into());
        }
        let resolved = resolve_route(&self.prompt_ids, Route::NoThink);
        if resolved != self.mode {
            return Err(format!(
                "prompt routes to {} but the example is tagged {}",
                resolved.name(),
                self.mode.name()
            ));
        }
        Ok(())
    }

    /// Route-consistency and non-emptiness check, reporting `index` on failure.
    pub fn validate(&self, index: usize) -> Result<()> {
        self.check().map_err(|message| Error::Data { index, message })
    }

    /// Prompt followed by target.
    pub fn tokens(&self) -> Vec<usize> {
        let mut seq = self.prompt_ids.clone();
        seq.extend_from_slice(&self.target_ids);
        seq
    }

    /// Decoder inputs, next-token targets and the mask selecting positions
    /// that predict a target token.
    pub fn lm_triplet(&self) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
        let seq = self.tokens();
        let n = seq.len();
        let inputs = seq[..n - 1].to_vec();
        let targets = seq[1..].to_vec();
        let mask = (0..n - 1).map(|t| t + 1 >= self.prompt_ids.len()).collect();
        (inputs, targets, mask)
    }

    /// Loss mask over the decoder inputs of [`lm_triplet`](Self::lm_triplet).
    pub fn loss_mask(&self) -> Vec<bool> {
        self.lm_triplet().2
    }
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub prompt: String,
    pub target: String,
    pub mode: Route,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

/// Encodes a record: BOS is prepended if missing, the control token is
/// appended if absent, and EOS terminates the target.
pub fn example_from_record(record: &DatasetRecord, vocab: &Vocabulary, index: usize) -> Result<ChatExample> {
    let mut prompt = vocab.encode(&record.prompt);
    if prompt.first() != Some(&BOS) {
        prompt.insert(0, BOS);
    }
    let has_control = prompt.iter().any(|&id| is_control(id));
    if has_control {
        let resolved = resolve_route(&prompt, Route::NoThink);
        if resolved != record.mode {
            return Err(Error::Data {
                index,
                message: format!(
                    "prompt routes to {} but the record is tagged {}",
                    resolved.name(),
                    record.mode.name()
                ),
            });
        }
    }
    if !prompt.last().is_some_and(|&id| is_control(id)) {
        prompt.push(record.mode.control_token());
    }
    let mut target = vocab.encode(&record.target);
    target.push(EOS);
    let ex = ChatExample {
        prompt_ids: prompt,
        target_ids: target,
        mode: record.mode,
        answer: record.answer.clone(),
    };
    ex.validate(index)?;
    Ok(ex)
}

/// Parses line-delimited JSON records. Blank lines are skipped; the error
/// index counts records, starting at 0.
pub fn parse_dataset(text: &str, vocab: &Vocabulary) -> Result<Vec<ChatExample>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(index, line)| {
            let record: DatasetRecord = serde_json::from_str(line).map_err(|e| Error::Data {
                index,
                message: e.to_string(),
            })?;
            example_from_record(&record, vocab, index)
        })
        .collect()
}

pub fn load_dataset(path: &Path, vocab: &Vocabulary) -> Result<Vec<ChatExample>> {
    parse_dataset(&std::fs::read_to_string(path)?, vocab)
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(index, line)| {
            serde_json::from_str(line).map_err(|e| Error::Data {
                index,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Every example's route consistency, reporting the first offender.
pub fn validate_dataset(examples: &[ChatExample]) -> Result<()> {
    examples.iter().enumerate().try_for_each(|(i, ex)| ex.validate(i))
}
