use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};

use openspan::data::{remap_entities, DropReason, LabelSet, TokenizerKind};
use openspan::eval::{render_table, EvalReport, DEFAULT_THRESHOLDS};
use openspan::spans::{gradient_coverage, ratio_report, CandidateSpanSet, RatioReport};
use openspan::train::{self, evaluate_checkpoint, prepare, Checkpoint, Dataset, TrainError};

use crate::config::{
    apply_tokenizer_flag, expand, load_datasets, parse_thresholds, ReportFormat, RunConfig,
};
use crate::{EvalArgs, StatsArgs, TrainArgs, Usage, ValidateArgs};

/// Configuration, data and compatibility problems exit with 2; everything
/// else is a runtime failure.
fn classify(e: TrainError) -> anyhow::Error {
    match e {
        TrainError::Config(_) | TrainError::Data(_) | TrainError::Incompatible(_) => {
            Usage(e.to_string()).into()
        }
        other => other.into(),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Usage> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, content),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn to_pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

/// The report as JSON with the run's root seed alongside.
fn report_value(report: &EvalReport, seed: u64, split: &str) -> Value {
    let mut v: Value = serde_json::from_str(&report.to_json()).expect("report json parses");
    if let Value::Object(m) = &mut v {
        m.insert("seed".into(), json!(seed));
        m.insert("split".into(), json!(split));
    }
    v
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if !args.data.is_empty() {
        cfg.data.train = args.data.clone();
    }
    if let Some(out) = args.out {
        cfg.out = Some(out);
    }
    if let Some(f) = args.format {
        cfg.format = f;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    for t in &args.tokenizer {
        apply_tokenizer_flag(&mut cfg.tokenizer, t)?;
    }
    if let Some(l) = args.max_span_len {
        cfg.model.max_span_len = l;
    }
    if args.mask_word_boundaries {
        cfg.train.mask_word_boundaries = true;
    }
    if let Some(t) = &args.thresholds {
        cfg.train.thresholds = parse_thresholds(t)?;
    }

    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Usage("out: no output directory (set `out` or pass --out)".into()))?;
    if cfg.data.train.is_empty() {
        return Err(Usage("data.train: no training data (set data.train or pass --data)".into()).into());
    }
    if cfg.model.max_span_len == 0 {
        return Err(Usage("model.max_span_len must be >= 1".into()).into());
    }
    cfg.train.validate().map_err(classify)?;

    let opts = cfg.load_options();
    let train_sets = load_datasets("data.train", &cfg.data.train, opts)?;
    let val_sets = load_datasets("data.val", &cfg.data.val, opts)?;
    let test_sets = load_datasets("data.test", &cfg.data.test, opts)?;

    let tok = cfg.tokenizer_config();
    let l = cfg.model.max_span_len;
    let prep = |sets: &[Dataset]| {
        prepare(sets, &tok, l, cfg.train.mask_word_boundaries, cfg.train.boundary_mode).map_err(classify)
    };
    let train_data = prep(&train_sets)?;
    let val_data = prep(&val_sets)?;

    let outcome = train::train(cfg.model.clone(), tok.clone(), cfg.train.clone(), &train_data, &val_data)
        .map_err(classify)?;

    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    outcome.checkpoint.save(&out.join("checkpoint.json")).map_err(classify)?;

    let seed = cfg.train.seed;
    let mut metrics = String::new();
    for m in &outcome.metrics {
        let mut v = serde_json::to_value(m)?;
        if let Value::Object(o) = &mut v {
            o.insert("seed".into(), json!(seed));
        }
        metrics.push_str(&serde_json::to_string(&v)?);
        metrics.push('\n');
    }
    write_file(&out.join("metrics.jsonl"), &metrics)?;

    let (split, sets) = if !test_sets.is_empty() {
        ("test", &test_sets)
    } else if !val_sets.is_empty() {
        ("val", &val_sets)
    } else {
        ("train", &train_sets)
    };
    let report = evaluate_checkpoint(&outcome.checkpoint, sets, None, &cfg.train.thresholds).map_err(classify)?;
    write_file(&out.join("report.json"), &to_pretty(&report_value(&report, seed, split)))?;
    if cfg.format == ReportFormat::Table {
        let table = render_table(&report);
        write_file(&out.join("report.txt"), &table)?;
        print!("{table}");
    } else {
        let summary = json!({
            "out": out,
            "seed": seed,
            "steps": outcome.checkpoint.step,
            "stopped_early": outcome.stopped_early,
            "restored_step": outcome.restored_step,
            "best_val_macro_f1": outcome.best.map(|b| b.0),
            "best_val_threshold": outcome.best.map(|b| b.1),
            "skipped_batches": outcome.skipped_batches.len(),
            "report_split": split,
            "best_threshold": report.best_threshold().map(|b| b.0),
            "macro_f1": report.best_threshold().map(|b| b.1),
        });
        print!("{}", to_pretty(&summary));
    }
    Ok(())
}

pub fn evaluate(args: EvalArgs, sweep: bool) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    if !args.checkpoint.is_file() {
        return Err(Usage(format!("--checkpoint: {} does not exist", args.checkpoint.display())).into());
    }
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(|e| Usage(format!("--checkpoint: {e}")))?;

    let (field, patterns) = if args.data.is_empty() {
        ("data.test", cfg.data.test.clone())
    } else {
        ("--data", args.data.clone())
    };
    if patterns.is_empty() {
        return Err(Usage("--data: no evaluation data (pass --data or set data.test)".into()).into());
    }
    let sets = load_datasets(field, &patterns, cfg.load_options())?;

    let thresholds = match &args.thresholds {
        Some(t) => parse_thresholds(t)?,
        None if sweep => DEFAULT_THRESHOLDS.to_vec(),
        None => vec![0.5],
    };
    let tokenizer = if args.tokenizer.is_empty() {
        None
    } else {
        let mut section = crate::config::TokenizerSection {
            default: Some(ckpt.tokenizer.default),
            by_language: ckpt.tokenizer.by_language.clone(),
        };
        for t in &args.tokenizer {
            apply_tokenizer_flag(&mut section, t)?;
        }
        Some(openspan::data::TokenizerConfig {
            default: section.default.unwrap_or(TokenizerKind::Whitespace),
            vocab_size: ckpt.tokenizer.vocab_size,
            by_language: section.by_language,
        })
    };
    let report = evaluate_checkpoint(&ckpt, &sets, tokenizer.as_ref(), &thresholds).map_err(classify)?;
    let text = match args.format.unwrap_or(cfg.format) {
        ReportFormat::Json => to_pretty(&report_value(&report, ckpt.train_config.seed, "eval")),
        ReportFormat::Table => render_table(&report),
    };
    emit(args.out.as_deref(), &text)
}

fn stats_table(ratios: &RatioReport, coverage: &[Value]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<14} {:>6} {:>10} {:>10} {:>10}",
        "language", "tokenizer", "masked", "positive", "negative", "ratio"
    );
    for r in &ratios.rows {
        let ratio = r.ratio.map_or_else(|| "inf".to_string(), |x| format!("{x:.5}"));
        let _ = writeln!(
            out,
            "{:<10} {:<14} {:>6} {:>10} {:>10} {:>10}",
            r.language, r.tokenizer, r.masked, r.positives, r.negatives, ratio
        );
    }
    if !coverage.is_empty() {
        let _ = writeln!(out, "\n{:<14} {:>10} {:>10} {:>10}", "tokenizer", "distinct", "vocab", "fraction");
        for c in coverage {
            let _ = writeln!(
                out,
                "{:<14} {:>10} {:>10} {:>10.5}",
                c["tokenizer"].as_str().unwrap_or(""),
                c["distinct_ids"].as_u64().unwrap_or(0),
                c["vocab_size"].as_u64().unwrap_or(0),
                c["fraction"].as_f64().unwrap_or(0.0)
            );
        }
    }
    out
}

pub fn stats(args: StatsArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let patterns = if args.data.is_empty() { cfg.data.train.clone() } else { args.data.clone() };
    if patterns.is_empty() {
        return Err(Usage("--data: no corpus given".into()).into());
    }
    let corpus: Vec<_> = load_datasets("--data", &patterns, cfg.load_options())?
        .into_iter()
        .flat_map(|d| d.examples)
        .collect();

    let kinds: Vec<TokenizerKind> = if args.tokenizer.is_empty() {
        let tok = cfg.tokenizer_config();
        let mut k = vec![tok.default];
        k.extend(tok.by_language.values().copied());
        k.sort();
        k.dedup();
        k
    } else {
        args.tokenizer
            .iter()
            .map(|t| t.parse().map_err(|e| Usage(format!("--tokenizer {t}: {e}"))))
            .collect::<Result<_, _>>()?
    };
    let vocab = args.vocab_size.unwrap_or(cfg.model.vocab_size);
    let l = args.max_span_len.unwrap_or(cfg.model.max_span_len);
    if vocab == 0 || l == 0 {
        return Err(Usage("--vocab-size and --max-span-len must be >= 1".into()).into());
    }
    let masking: &[bool] = if args.mask_word_boundaries { &[false, true] } else { &[false] };

    let ratios = ratio_report(&corpus, &kinds, vocab, l, masking).map_err(|e| Usage(e.to_string()))?;
    let coverage: Vec<Value> = if corpus.is_empty() {
        Vec::new()
    } else {
        kinds
            .iter()
            .map(|&k| {
                gradient_coverage(&corpus, k, vocab)
                    .map_err(|e| Usage(e.to_string()))
                    .map(|row| serde_json::to_value(row).expect("coverage rows serialize"))
            })
            .collect::<Result<_, _>>()?
    };
    let text = match args.format.unwrap_or(cfg.format) {
        ReportFormat::Json => to_pretty(&json!({
            "examples": corpus.len(),
            "max_span_len": l,
            "vocab_size": vocab,
            "ratios": ratios.rows,
            "coverage": coverage,
        })),
        ReportFormat::Table => stats_table(&ratios, &coverage),
    };
    emit(args.out.as_deref(), &text)
}

fn reason_key(r: DropReason) -> &'static str {
    match r {
        DropReason::NoTokens => "no_tokens",
        DropReason::BoundaryMismatch => "boundary_mismatch",
        DropReason::UnknownLabel => "unknown_label",
    }
}

/// Summary of one file, or the error that made it unreadable.
fn validate_file(path: &Path, cfg: &RunConfig) -> Value {
    let examples = match openspan::data::load_jsonl_with(path, cfg.load_options()) {
        Ok(e) => e,
        Err(e) => return json!({ "path": path, "ok": false, "error": e.to_string() }),
    };
    let tok = cfg.tokenizer_config();
    let labels = LabelSet::from_examples(&examples);
    let mut languages: BTreeMap<String, usize> = BTreeMap::new();
    let mut dropped: BTreeMap<&str, usize> = BTreeMap::new();
    let (mut entities, mut too_long) = (0, 0);
    for (i, ex) in examples.iter().enumerate() {
        *languages.entry(ex.language.clone()).or_default() += 1;
        entities += ex.entities.len();
        let t = match remap_entities(ex, tok.for_language(&ex.language).as_ref(), cfg.train.boundary_mode, &labels) {
            Ok(t) => t,
            Err(e) => {
                return json!({ "path": path, "ok": false, "error": format!("record {}: {e}", i + 1) })
            }
        };
        for d in &t.dropped_entities {
            *dropped.entry(reason_key(d.reason)).or_default() += 1;
        }
        too_long += CandidateSpanSet::for_example(&t, cfg.model.max_span_len, false).uncovered.len();
    }
    json!({
        "path": path,
        "ok": true,
        "records": examples.len(),
        "entities": entities,
        "labels": labels.len(),
        "languages": languages,
        "dropped_entities": dropped,
        "spans_longer_than_max": too_long,
    })
}

pub fn validate_data(args: ValidateArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    for t in &args.tokenizer {
        apply_tokenizer_flag(&mut cfg.tokenizer, t)?;
    }
    if let Some(l) = args.max_span_len {
        cfg.model.max_span_len = l;
    }
    let patterns: Vec<String> = if args.data.is_empty() {
        [&cfg.data.train, &cfg.data.val, &cfg.data.test].into_iter().flatten().cloned().collect()
    } else {
        args.data.clone()
    };
    if patterns.is_empty() {
        return Err(Usage("--data: no files given".into()).into());
    }
    let files: Vec<PathBuf> = expand("--data", &patterns)?;
    let results: Vec<Value> = files.iter().map(|p| validate_file(p, &cfg)).collect();
    let ok = results.iter().all(|r| r["ok"] == json!(true));
    let text = match args.format.unwrap_or(cfg.format) {
        ReportFormat::Json => to_pretty(&json!({ "ok": ok, "files": results })),
        ReportFormat::Table => {
            let mut s = String::new();
            for r in &results {
                let path = r["path"].as_str().unwrap_or("");
                if r["ok"] == json!(true) {
                    let _ = writeln!(
                        s,
                        "ok    {path}: {} records, {} entities, {} labels",
                        r["records"], r["entities"], r["labels"]
                    );
                } else {
                    let _ = writeln!(s, "error {path}: {}", r["error"].as_str().unwrap_or(""));
                }
            }
            s
        }
    };
    emit(args.out.as_deref(), &text)?;
    if ok {
        Ok(())
    } else {
        Err(Usage("one or more files failed validation".into()).into())
    }
}
