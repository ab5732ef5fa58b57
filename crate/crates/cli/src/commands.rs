use crate::config::{vocab_path, RunConfig};
use crate::files::{encode_records, read_jsonl, write_json, write_jsonl, write_text};
use crate::{EvalArgs, FilterArgs, GenerateArgs, GradcheckArgs, ModeArg, Status, TheoryArgs, TrainArgs};
use anyhow::{anyhow, bail, Context, Result};
use ple_core::leakage::{
    evaluate, filter_no_think_candidates, generate_synth_dataset, leakage_delta_table, reports_to_csv,
    synth_eval_items, Candidate, EvalItem, EvalSettings, ReflectiveLexicon, RejectReason, ReportRow, DEFAULT_MAX_LEN,
};
use ple_core::model::{generate as decode, load_checkpoint, save_checkpoint, GenerateOptions, ModelParams, Sampler};
use ple_core::tape::BackwardFault;
use ple_core::theory::{
    decoupling_record, gradient_record, hessian_block_audit, render_table, run_checks, tiny_audit_fixture,
    CheckFamily, CheckOptions, CheckRecord, CROSS_BLOCK_TOLERANCE,
};
use ple_core::tokenizer::BOS;
use ple_core::trainer::{split_by_mode, DatasetRecord, Trainer};
use ple_core::{Route, Vocabulary};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// Resolved configuration and arguments, written next to every command's
/// other artifacts.
#[derive(Serialize)]
struct Echo<'a, A: Serialize> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    args: &'a A,
}

fn echo<A: Serialize>(cfg: &RunConfig, command: &str, args: &A) -> Result<()> {
    let path = cfg.report_dir.join(format!("{command}.run.json"));
    write_json(
        &path,
        &Echo {
            command,
            seed: cfg.seed,
            config: cfg,
            args,
        },
    )
}

/// Backward ops a test hook may corrupt.
const FAULT_OPS: [&str; 12] = [
    "matmul",
    "matmul_t",
    "mul",
    "add",
    "scale",
    "sum",
    "silu",
    "rms_norm",
    "rope",
    "attention",
    "embed",
    "cross_entropy",
];

fn parse_fault(name: Option<&str>) -> Result<Option<BackwardFault>> {
    let Some(name) = name else { return Ok(None) };
    let op = FAULT_OPS
        .iter()
        .find(|&&op| op == name)
        .ok_or_else(|| anyhow!("unknown op `{name}` for fault injection"))?;
    Ok(Some(BackwardFault { op, scale: 1.1 }))
}

fn load_model(path: &Path, vocab: Option<&Path>) -> Result<(ModelParams, Vocabulary)> {
    let params = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let vpath = vocab.map(Path::to_path_buf).unwrap_or_else(|| vocab_path(path));
    let vocab = Vocabulary::load(&vpath).with_context(|| format!("loading vocabulary {}", vpath.display()))?;
    if vocab.len() > params.config().vocab_size {
        bail!(
            "vocabulary has {} tokens but the model only {}",
            vocab.len(),
            params.config().vocab_size
        );
    }
    Ok((params, vocab))
}

fn load_lexicon(flag: Option<&Path>, cfg: &RunConfig) -> Result<ReflectiveLexicon> {
    match flag.or(cfg.lexicon.as_deref()) {
        Some(p) => ReflectiveLexicon::load(p).with_context(|| format!("loading lexicon {}", p.display())),
        None => Ok(ReflectiveLexicon::default()),
    }
}

fn print_records(records: &[CheckRecord]) -> Status {
    print!("{}", render_table(records));
    let failed: Vec<String> = records
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{}#{}", r.check, r.instance))
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", records.len());
        Status::Pass
    } else {
        eprintln!("failed checks: {}", failed.join(", "));
        Status::Fail
    }
}

pub fn train(mut cfg: RunConfig, args: TrainArgs) -> Result<Status> {
    if let Some(d) = &args.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(c) = &args.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    let (vocab, examples) = if args.synth {
        generate_synth_dataset(&cfg.synth)?
    } else {
        let path = cfg.require_dataset()?.to_path_buf();
        let records = read_jsonl::<DatasetRecord>(&path)?;
        let vocab = Vocabulary::from_corpus(
            records
                .iter()
                .flat_map(|(_, r)| [r.prompt.as_str(), r.target.as_str()]),
        );
        let examples = encode_records(&path, &records, &vocab)?;
        (vocab, examples)
    };
    if examples.is_empty() {
        bail!("the dataset has no examples");
    }
    if cfg.model.vocab_size == 0 {
        cfg.model.vocab_size = vocab.len();
    } else if cfg.model.vocab_size < vocab.len() {
        bail!(
            "model vocab_size {} is smaller than the corpus vocabulary ({})",
            cfg.model.vocab_size,
            vocab.len()
        );
    }
    echo(&cfg, "train", &args)?;

    let dense = ModelParams::init_dense(&cfg.model, cfg.seed)?;
    let mut trainer = Trainer::new(ModelParams::clone_from_dense(&dense)?, cfg.train.clone())?;
    for _ in 0..cfg.train.epochs {
        let s = trainer.run_epoch(&examples)?;
        let show = |l: Option<f64>| l.map_or("-".to_string(), |v| format!("{v:.6}"));
        println!(
            "epoch {} steps {} no_think_loss {} think_loss {}",
            s.epoch,
            s.steps,
            show(s.mean_loss[0]),
            show(s.mean_loss[1])
        );
    }
    let (params, log) = trainer.into_parts();
    let ckpt = cfg.checkpoint_path();
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(&params, &ckpt).with_context(|| format!("writing checkpoint {}", ckpt.display()))?;
    vocab.save(&vocab_path(&ckpt))?;
    write_text(&cfg.report_dir.join("trajectory.csv"), &log.to_csv())?;
    println!("checkpoint {}", ckpt.display());
    Ok(Status::Pass)
}

#[derive(Serialize)]
struct GenerationReport<'a> {
    prompt: &'a str,
    completion: &'a str,
    route: usize,
    stopped_at_eos: bool,
}

pub fn generate(cfg: RunConfig, args: GenerateArgs) -> Result<Status> {
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
    let (params, vocab) = load_model(&ckpt, args.vocab.as_deref())?;
    let unknown = vocab.unknown_count(&args.prompt);
    if unknown > 0 {
        eprintln!("warning: {unknown} prompt token(s) not in the vocabulary, mapped to <unk>");
    }
    let mut ids = vocab.encode(&args.prompt);
    if ids.first() != Some(&BOS) {
        ids.insert(0, BOS);
    }
    let sampler = match args.temp {
        Some(t) if !args.greedy => Sampler::Temperature(t),
        _ => Sampler::Greedy,
    };
    let options = GenerateOptions {
        max_new: args.max_new,
        sampler,
        seed: cfg.seed,
        ..GenerateOptions::default()
    };
    let g = decode(&params, &ids, &options)?;
    let completion = vocab.decode(&g.tokens)?;
    echo(&cfg, "generate", &args)?;
    write_json(
        &cfg.report_dir.join("generation.json"),
        &GenerationReport {
            prompt: &args.prompt,
            completion: &completion,
            route: g.route.index(),
            stopped_at_eos: g.stopped_at_eos,
        },
    )?;
    println!("{completion}");
    println!("route={}", g.route.index());
    Ok(Status::Pass)
}

pub fn theory(cfg: RunConfig, args: TheoryArgs) -> Result<Status> {
    if args.probes == 0 {
        bail!("--probes must be at least 1");
    }
    let families: Vec<CheckFamily> = if args.checks.is_empty() {
        CheckFamily::ALL.to_vec()
    } else {
        args.checks.iter().map(|c| c.trim().parse()).collect::<ple_core::Result<_>>()?
    };
    let opts = CheckOptions {
        instances: args.instances,
        seeds: args.seeds,
        base_seed: cfg.seed,
        probes: args.probes,
        fault: parse_fault(args.inject_fault.as_deref())?,
    };
    echo(&cfg, "theory", &args)?;
    let records = run_checks(&families, &opts)?;
    write_json(&cfg.report_dir.join("theory.json"), &records)?;
    Ok(print_records(&records))
}

fn dataset_eval_items(path: &Path, vocab: &Vocabulary) -> Result<Vec<EvalItem>> {
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    for (line, r) in read_jsonl::<DatasetRecord>(path)? {
        let gold = r
            .answer
            .ok_or_else(|| anyhow!("{} line {line}: record has no `answer`", path.display()))?;
        if !seen.insert(r.prompt.clone()) {
            continue;
        }
        let mut prompt_ids = vec![BOS];
        prompt_ids.extend(vocab.encode(&r.prompt).into_iter().filter(|&id| id != BOS));
        items.push(EvalItem { prompt_ids, gold });
    }
    if items.is_empty() {
        bail!("{} has no evaluation prompts", path.display());
    }
    Ok(items)
}

pub fn eval(mut cfg: RunConfig, args: EvalArgs) -> Result<Status> {
    if let Some(d) = &args.dataset {
        cfg.dataset = Some(d.clone());
    }
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
    let (params, vocab) = load_model(&ckpt, args.vocab.as_deref())?;
    let lexicon = load_lexicon(args.lexicon.as_deref(), &cfg)?;
    let items = if args.synth {
        synth_eval_items(&cfg.synth, &vocab)?
    } else {
        dataset_eval_items(cfg.require_dataset()?, &vocab)?
    };
    let modes: &[Route] = match args.mode {
        ModeArg::Both => &Route::BOTH,
        ModeArg::Think => &[Route::Think],
        ModeArg::NoThink => &[Route::NoThink],
    };
    let mut models = vec![("ple".to_string(), params)];
    if let Some(b) = &args.baseline {
        let base = load_checkpoint(b).with_context(|| format!("loading baseline {}", b.display()))?;
        if base.config().vocab_size != models[0].1.config().vocab_size {
            bail!("baseline and model use different vocabulary sizes");
        }
        models.push(("baseline".to_string(), base));
    }
    let settings = EvalSettings {
        generate: GenerateOptions {
            max_new: args.max_new,
            seed: cfg.seed,
            ..GenerateOptions::default()
        },
        append_control: true,
    };
    echo(&cfg, "eval", &args)?;
    let mut rows = Vec::new();
    for (name, model) in &models {
        for &mode in modes {
            let report = evaluate(model, &vocab, &items, mode, &settings, &lexicon)?;
            if report.skipped > 0 {
                eprintln!("warning: {name} {}: {} prompt(s) over capacity", mode.name(), report.skipped);
            }
            rows.push(ReportRow {
                model: name.clone(),
                report,
            });
        }
    }
    let csv = reports_to_csv(&rows);
    write_text(&cfg.report_dir.join("eval.csv"), &csv)?;
    write_json(&cfg.report_dir.join("eval.json"), &rows)?;
    print!("{csv}");
    if args.baseline.is_some() {
        let table = leakage_delta_table(&rows, "baseline")?;
        write_text(&cfg.report_dir.join("delta.csv"), &table.to_csv())?;
        print!("{}", table.to_text());
    }
    Ok(Status::Pass)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateLine {
    prompt: String,
    response: String,
}

pub fn filter(cfg: RunConfig, args: FilterArgs) -> Result<Status> {
    let lines = read_jsonl::<CandidateLine>(&args.candidates)?;
    let gold_text =
        std::fs::read_to_string(&args.gold).with_context(|| format!("reading {}", args.gold.display()))?;
    let gold: Vec<&str> = gold_text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if gold.len() != lines.len() {
        bail!(
            "{} candidates but {} gold answers in {}",
            lines.len(),
            gold.len(),
            args.gold.display()
        );
    }
    let candidates: Vec<Candidate> = lines
        .into_iter()
        .zip(gold)
        .map(|((_, c), g)| Candidate {
            prompt: c.prompt,
            response: c.response,
            gold: g.to_string(),
        })
        .collect();
    let lexicon = load_lexicon(args.lexicon.as_deref(), &cfg)?;
    let max_len = args.max_len.unwrap_or(DEFAULT_MAX_LEN);
    echo(&cfg, "filter", &args)?;
    let out = filter_no_think_candidates(&candidates, max_len, &lexicon)?;
    write_jsonl(&cfg.report_dir.join("kept.jsonl"), &out.kept)?;
    write_jsonl(&cfg.report_dir.join("audit.jsonl"), &out.audit)?;
    let count = |reason| out.rejected.iter().filter(|(_, r)| *r == reason).count();
    println!(
        "kept {} of {} (correctness {}, length {}, style {})",
        out.kept.len(),
        candidates.len(),
        count(RejectReason::Correctness),
        count(RejectReason::Length),
        count(RejectReason::Style)
    );
    Ok(Status::Pass)
}

/// `n` evenly spaced indices below `len`.
fn spread(n: usize, len: usize) -> Vec<usize> {
    let n = n.min(len);
    (0..n).map(|k| k * len / n).collect()
}

pub fn gradcheck(cfg: RunConfig, args: GradcheckArgs) -> Result<Status> {
    if args.probes == 0 {
        bail!("--probes must be at least 1");
    }
    let fault = parse_fault(args.inject_fault.as_deref())?;
    let (params, b0, b1, coords) = match &args.checkpoint {
        Some(ckpt) => {
            let (params, vocab) = load_model(ckpt, None)?;
            let path: PathBuf = args.dataset.clone().expect("clap requires --dataset with --checkpoint");
            let records = read_jsonl::<DatasetRecord>(&path)?;
            let examples = encode_records(&path, &records, &vocab)?;
            let [p0, p1] = split_by_mode(&examples);
            if p0.is_empty() || p1.is_empty() {
                bail!("{} needs examples of both modes", path.display());
            }
            let coords = spread(args.coords, params.param_count());
            (params, p0[..p0.len().min(2)].to_vec(), p1[..p1.len().min(2)].to_vec(), Some(coords))
        }
        None => {
            let (p, b0, b1) = tiny_audit_fixture(cfg.seed)?;
            (p, b0, b1, None)
        }
    };
    echo(&cfg, "gradcheck", &args)?;
    let mut records = vec![
        gradient_record("gradient", &params, &[b0.clone(), b1.clone()].concat(), fault, coords.as_deref())?,
        decoupling_record("decoupling", &params, &b0, &b1)?,
    ];
    let audit = hessian_block_audit(&params, &b0, &b1, args.probes, cfg.seed)?;
    records.push(CheckRecord::at_most(
        "hessian-cross",
        &[audit.beta0_beta0.max_abs, audit.alpha_beta0.max_abs],
        audit.beta0_beta1.max_abs,
        CROSS_BLOCK_TOLERANCE,
    ));
    write_json(&cfg.report_dir.join("gradcheck.json"), &records)?;
    Ok(print_records(&records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_covers_the_range() {
        assert_eq!(spread(4, 8), vec![0, 2, 4, 6]);
        assert_eq!(spread(10, 3), vec![0, 1, 2]);
    }

    #[test]
    fn fault_names_are_checked() {
        assert!(parse_fault(Some("silu")).unwrap().is_some());
        assert!(parse_fault(Some("conv")).is_err());
        assert!(parse_fault(None).unwrap().is_none());
    }
}
