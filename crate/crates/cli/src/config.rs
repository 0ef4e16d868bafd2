//! Run configuration files and flag overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use openspan::data::{load_jsonl_with, CapSelection, LoadOptions, TokenizerConfig, TokenizerKind};
use openspan::model::ModelConfig;
use openspan::train::{Dataset, TrainConfig};

use crate::Usage;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Json,
    Table,
}

/// JSONL glob patterns per split. Each matched file becomes a dataset named
/// after its file stem; files sharing a stem are concatenated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Records read per file.
    pub cap: Option<usize>,
    /// Sample capped files with this seed instead of keeping the head.
    pub cap_seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub default: Option<TokenizerKind>,
    pub by_language: BTreeMap<String, TokenizerKind>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub format: ReportFormat,
    pub data: DataSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Usage> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Usage(format!("--config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Usage(format!("--config {}: {e}", path.display())))
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        TokenizerConfig {
            default: self.tokenizer.default.unwrap_or(TokenizerKind::Whitespace),
            vocab_size: self.model.vocab_size,
            by_language: self.tokenizer.by_language.clone(),
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            cap: self.data.cap,
            selection: self.data.cap_seed.map_or(CapSelection::First, CapSelection::Seeded),
        }
    }
}

/// `kind` sets the default tokenizer, `lang=kind` a per-language one.
pub fn apply_tokenizer_flag(section: &mut TokenizerSection, flag: &str) -> Result<(), Usage> {
    let parse = |s: &str| {
        s.parse::<TokenizerKind>()
            .map_err(|e| Usage(format!("--tokenizer {flag}: {e}")))
    };
    match flag.split_once('=') {
        Some((lang, kind)) => {
            section.by_language.insert(lang.trim().to_string(), parse(kind)?);
        }
        None => section.default = Some(parse(flag)?),
    }
    Ok(())
}

pub fn parse_thresholds(s: &str) -> Result<Vec<f64>, Usage> {
    let ts: Vec<f64> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Usage(format!("--thresholds: {p:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    if ts.is_empty() {
        return Err(Usage("--thresholds: empty list".into()));
    }
    if let Some(t) = ts.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Usage(format!("--thresholds: {t} is outside (0, 1)")));
    }
    Ok(ts)
}

/// Expands the patterns of one config field. A pattern matching nothing is
/// an error naming the field.
pub fn expand(field: &str, patterns: &[String]) -> Result<Vec<PathBuf>, Usage> {
    let mut out = Vec::new();
    for pat in patterns {
        let paths = glob::glob(pat).map_err(|e| Usage(format!("{field}: {pat:?}: {e}")))?;
        let mut matched: Vec<PathBuf> = paths.filter_map(Result::ok).filter(|p| p.is_file()).collect();
        if matched.is_empty() {
            return Err(Usage(format!("{field}: no file matches {pat:?}")));
        }
        matched.sort();
        out.extend(matched);
    }
    out.dedup();
    Ok(out)
}

pub fn load_datasets(field: &str, patterns: &[String], opts: LoadOptions) -> Result<Vec<Dataset>, Usage> {
    let mut by_name: BTreeMap<String, Dataset> = BTreeMap::new();
    for path in expand(field, patterns)? {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let examples = load_jsonl_with(&path, opts).map_err(|e| Usage(format!("{field}: {e}")))?;
        by_name
            .entry(name.clone())
            .or_insert_with(|| Dataset {
                name,
                examples: Vec::new(),
            })
            .examples
            .extend(examples);
    }
    Ok(by_name.into_values().collect())
}
