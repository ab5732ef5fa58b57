use anyhow::{anyhow, Context, Result};
use ple_core::trainer::{example_from_record, ChatExample, DatasetRecord};
use ple_core::Vocabulary;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

/// Parses one JSON value per non-blank line, keeping 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| anyhow!("{} line {}: {e}", path.display(), i + 1))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Encodes records, naming the offending line on failure.
pub fn encode_records(
    path: &Path,
    records: &[(usize, DatasetRecord)],
    vocab: &Vocabulary,
) -> Result<Vec<ChatExample>> {
    records
        .iter()
        .enumerate()
        .map(|(i, (line, r))| {
            example_from_record(r, vocab, i).map_err(|e| anyhow!("{} line {line}: {e}", path.display()))
        })
        .collect()
}
