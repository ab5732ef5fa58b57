use super::{count_reflective, is_correct, ReflectiveLexicon};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Token limit for direct answers of the synthetic task.
pub const DEFAULT_MAX_LEN: usize = 8;

/// A candidate direct answer awaiting filtering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub prompt: String,
    pub response: String,
    pub gold: String,
}

/// First failing filter, in the order they are applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Correctness,
    Length,
    Style,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub index: usize,
    /// `"kept"` or `"rejected"`.
    pub verdict: String,
    pub reason: Option<RejectReason>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<Candidate>,
    /// Input index and reason of every rejected candidate.
    pub rejected: Vec<(usize, RejectReason)>,
    /// One record per input candidate, in input order.
    pub audit: Vec<AuditRecord>,
}

fn verdict(c: &Candidate, max_len: usize, lexicon: &ReflectiveLexicon) -> Option<RejectReason> {
    if !is_correct(&c.response, &c.gold) {
        Some(RejectReason::Correctness)
    } else if c.response.split_whitespace().count() > max_len {
        Some(RejectReason::Length)
    } else if count_reflective(&c.response, lexicon) > 0 {
        Some(RejectReason::Style)
    } else {
        None
    }
}

/// Keeps candidates that are correct, at most `max_len` tokens long and free
/// of reflective markers.
pub fn filter_no_think_candidates(
    candidates: &[Candidate],
    max_len: usize,
    lexicon: &ReflectiveLexicon,
) -> Result<FilterOutcome> {
    if max_len == 0 {
        return Err(Error::Argument("max_len must be at least 1".into()));
    }
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    let mut audit = Vec::with_capacity(candidates.len());
    for (index, c) in candidates.iter().enumerate() {
        let reason = verdict(c, max_len, lexicon);
        match reason {
            None => kept.push(c.clone()),
            Some(r) => rejected.push((index, r)),
        }
        audit.push(AuditRecord {
            index,
            verdict: if reason.is_none() { "kept" } else { "rejected" }.into(),
            reason,
        });
    }
    Ok(FilterOutcome { kept, rejected, audit })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(response: &str, gold: &str) -> Candidate {
        Candidate {
            prompt: "p".into(),
            response: response.into(),
            gold: gold.into(),
        }
    }

    #[test]
    fn reasons_follow_filter_order() {
        let lex = ReflectiveLexicon::default();
        let pool = vec![
            cand("answer: 3", "4"),
            cand("wait answer: 4", "4"),
            cand("a b c d e f g h answer: 4", "4"),
            cand("answer: 4", "4"),
            cand("wait a b c d e f g answer: 5", "4"),
        ];
        let out = filter_no_think_candidates(&pool, 8, &lex).unwrap();
        assert_eq!(out.kept, vec![pool[3].clone()]);
        assert_eq!(
            out.rejected,
            vec![
                (0, RejectReason::Correctness),
                (1, RejectReason::Style),
                (2, RejectReason::Length),
                (4, RejectReason::Correctness)
            ]
        );
        assert_eq!(out.audit.len(), pool.len());
        assert!(filter_no_think_candidates(&pool, 0, &lex).is_err());
    }

    #[test]
    fn audit_record_json_shape() {
        let rec = AuditRecord {
            index: 2,
            verdict: "rejected".into(),
            reason: Some(RejectReason::Style),
        };
        assert_eq!(
            serde_json::to_string(&rec).unwrap(),
            r#"{"index":2,"verdict":"rejected","reason":"style"}"#
        );
    }
}
