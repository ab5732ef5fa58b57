//! Reasoning-leakage measurement: reflective-marker counts, answer accuracy
//! and response length per mode, the no-think candidate filter and a
//! synthetic think/no-think task.

mod demo;
mod filter;
mod synth;

pub use demo::{run_demo, DemoConfig, DemoEpoch, DemoOutcome};

pub use filter::{filter_no_think_candidates, AuditRecord, Candidate, FilterOutcome, RejectReason, DEFAULT_MAX_LEN};
pub use synth::{generate_synth_dataset, synth_eval_items, synth_records, synth_vocabulary, SynthTaskSpec};

use crate::error::{Error, Result};
use crate::model::{GenerateOptions, Generator};
use crate::tokenizer::{is_control, Route, Vocabulary};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Marker words whose occurrence signals self-reflection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReflectiveLexicon {
    markers: Vec<String>,
}

impl Default for ReflectiveLexicon {
    fn default() -> Self {
        Self {
            markers: vec!["wait".into(), "hmm".into(), "alternatively".into()],
        }
    }
}

impl ReflectiveLexicon {
    pub fn new<I, S>(markers: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out: Vec<String> = Vec::new();
        for m in markers {
            let m = m.as_ref();
            if m.is_empty() || m.contains(char::is_whitespace) {
                return Err(Error::Argument(format!("marker `{m}` is not a single token")));
            }
            let m = m.to_lowercase();
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::Argument("lexicon must contain at least one marker".into()));
        }
        Ok(Self { markers: out })
    }

    /// One marker per line; blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn markers(&self) -> &[String] {
        &self.markers
    }

    pub fn is_marker(&self, token: &str) -> bool {
        let t = token.to_lowercase();
        self.markers.contains(&t)
    }
}

/// Whole-token, case-insensitive marker count.
pub fn count_reflective(text: &str, lexicon: &ReflectiveLexicon) -> usize {
    text.split_whitespace().filter(|t| lexicon.is_marker(t)).count()
}

pub const ANSWER_MARKER: &str = "answer:";

/// The token after the last `answer:` marker.
pub fn extract_answer(text: &str) -> Option<String> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let pos = tokens.iter().rposition(|t| t.eq_ignore_ascii_case(ANSWER_MARKER))?;
    tokens.get(pos + 1).map(|t| t.to_string())
}

pub fn is_correct(text: &str, gold: &str) -> bool {
    extract_answer(text).is_some_and(|a| a.trim() == gold.trim())
}

/// A prompt with its ground-truth answer.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub prompt_ids: Vec<usize>,
    pub gold: String,
}

/// Scores of one model in one mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub mode: Route,
    pub accuracy: f64,
    /// Generated tokens per answer, end-of-turn excluded.
    pub mean_length: f64,
    pub refl_per_answer: f64,
    pub evaluated: usize,
    /// Prompts dropped because they exceeded the model's capacity.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub generate: GenerateOptions,
    /// Replace any control tokens in the prompt with the mode's own. When
    /// false, prompts are used verbatim and the route is imposed directly.
    pub append_control: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            generate: GenerateOptions {
                max_new: 32,
                ..GenerateOptions::default()
            },
            append_control: true,
        }
    }
}

/// `prompt` with control tokens removed and `mode`'s control token appended.
pub fn prompt_for_mode(prompt: &[usize], mode: Route) -> Vec<usize> {
    let mut out: Vec<usize> = prompt.iter().copied().filter(|&id| !is_control(id)).collect();
    out.push(mode.control_token());
    out
}

/// Generates a response per item in `mode` and scores it. Items run in
/// parallel; results are aggregated in input order.
pub fn evaluate<G: Generator + ?Sized>(
    generator: &G,
    vocab: &Vocabulary,
    items: &[EvalItem],
    mode: Route,
    settings: &EvalSettings,
    lexicon: &ReflectiveLexicon,
) -> Result<LeakageReport> {
    let mut options = settings.generate.clone();
    options.route_override = Some(mode);
    let outcomes: Vec<Result<Option<(bool, usize, usize)>>> = items
        .par_iter()
        .map(|item| {
            let prompt = if settings.append_control {
                prompt_for_mode(&item.prompt_ids, mode)
            } else {
                item.prompt_ids.clone()
            };
            match generator.generate(&prompt, &options) {
                Ok(g) => {
                    let text = vocab.decode(&g.tokens)?;
                    Ok(Some((
                        is_correct(&text, &item.gold),
                        g.tokens.len(),
                        count_reflective(&text, lexicon),
                    )))
                }
                Err(Error::Capacity { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut correct = 0usize;
    let mut length = 0usize;
    let mut refl = 0usize;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for o in outcomes {
        match o? {
            Some((ok, len, r)) => {
                evaluated += 1;
                correct += usize::from(ok);
                length += len;
                refl += r;
            }
            None => skipped += 1,
        }
    }
    if evaluated == 0 {
        return Err(Error::Degenerate(format!("no prompt could be evaluated ({skipped} skipped)")));
    }
    let n = evaluated as f64;
    Ok(LeakageReport {
        mode,
        accuracy: correct as f64 / n,
        mean_length: length as f64 / n,
        refl_per_answer: refl as f64 / n,
        evaluated,
        skipped,
    })
}

/// A report tagged with the model that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    #[serde(flatten)]
    pub report: LeakageReport,
}

pub const REPORT_CSV_HEADER: &str = "model,mode,accuracy,mean_length,refl_per_answer";

pub fn reports_to_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{REPORT_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.model,
            r.report.mode.name(),
            r.report.accuracy,
            r.report.mean_length,
            r.report.refl_per_answer
        );
    }
    s
}

/// One row of the comparison against a baseline model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaRow {
    pub model: String,
    pub mode: Route,
    pub accuracy: f64,
    pub d_accuracy: f64,
    pub mean_length: f64,
    pub d_mean_length: f64,
    pub refl_per_answer: f64,
    pub d_refl_per_answer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaTable {
    pub baseline: String,
    pub rows: Vec<DeltaRow>,
}

/// Deltas of every row against the baseline model's row of the same mode.
pub fn leakage_delta_table(rows: &[ReportRow], baseline: &str) -> Result<DeltaTable> {
    if !rows.iter().any(|r| r.model == baseline) {
        return Err(Error::Argument(format!("baseline model `{baseline}` has no report")));
    }
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let base = rows
            .iter()
            .find(|b| b.model == baseline && b.report.mode == r.report.mode)
            .ok_or_else(|| {
                Error::Argument(format!("baseline `{baseline}` has no {} report", r.report.mode.name()))
            })?;
        out.push(DeltaRow {
            model: r.model.clone(),
            mode: r.report.mode,
            accuracy: r.report.accuracy,
            d_accuracy: r.report.accuracy - base.report.accuracy,
            mean_length: r.report.mean_length,
            d_mean_length: r.report.mean_length - base.report.mean_length,
            refl_per_answer: r.report.refl_per_answer,
            d_refl_per_answer: r.report.refl_per_answer - base.report.refl_per_answer,
        });
    }
    Ok(DeltaTable {
        baseline: baseline.to_string(),
        rows: out,
    })
}

impl DeltaTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,mode,accuracy,d_accuracy,mean_length,d_mean_length,refl_per_answer,d_refl_per_answer\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.model,
                r.mode.name(),
                r.accuracy,
                r.d_accuracy,
                r.mean_length,
                r.d_mean_length,
                r.refl_per_answer,
                r.d_refl_per_answer
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{:<w$}  {:<8}  {:>6} {:>8}  {:>8} {:>9}  {:>6} {:>7}\n",
            "model", "mode", "acc", "Δacc", "len", "Δlen", "refl", "Δrefl"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:<8}  {:>6.3} {:>+8.3}  {:>8.2} {:>+9.2}  {:>6.2} {:>+7.2}",
                r.model,
                r.mode.name(),
                r.accuracy,
                r.d_accuracy,
                r.mean_length,
                r.d_mean_length,
                r.refl_per_answer,
                r.d_refl_per_answer
            );
        }
        s
    }
}
