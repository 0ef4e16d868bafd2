//! Batching with in-batch label negatives, the training loop, early
//! stopping, checkpoints and checkpoint evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    remap_entities, BoundaryMode, DataError, LabelSet, RawExample, SubwordTokenizer,
    TokenizedExample, TokenizerConfig,
};
use crate::eval::{threshold_sweep, EvalReport, OverlapPolicy, ScoredExample, DEFAULT_THRESHOLDS};
use crate::losses::{loss_parts, reduce, LossConfig, LossError};
use crate::model::{
    joint_layout, tokenize_labels, Architecture, LabelCache, ModelConfig, ModelError, SpanModel,
    THRESHOLD_PARAM,
};
use crate::numeric::{AdamW, AdamWConfig, NumericError, ParamStore, Tape, Tensor, Var};
use crate::spans::{CandidateSpanSet, GoldSpan};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("non-finite loss at step {step}; batch example ids {example_ids:?}")]
    NonFiniteLoss { step: u64, example_ids: Vec<usize> },
    #[error("{skipped} consecutive batches overflowed the joint sequence; nothing left to train on")]
    NoTrainableBatch { skipped: usize },
    #[error("checkpoint is incompatible: {0}")]
    Incompatible(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    Error,
    /// Drop the batch, count it and move on.
    #[default]
    SkipAndLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStoppingConfig {
    pub enabled: bool,
    pub patience: usize,
    /// Validation runs every `eval_every` steps when validation data exists.
    pub eval_every: usize,
}

impl Default for EarlyStoppingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            patience: 3,
            eval_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub learning_rate: f64,
    /// Overrides for the encoder parameters and the head parameters.
    pub encoder_learning_rate: Option<f64>,
    pub head_learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    pub early_stopping: EarlyStoppingConfig,
    pub seed: u64,
    pub thresholds: Vec<f64>,
    pub mask_word_boundaries: bool,
    pub boundary_mode: BoundaryMode,
    pub overflow: OverflowPolicy,
    pub overlap: OverlapPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            max_steps: 1000,
            learning_rate: 3e-5,
            encoder_learning_rate: None,
            head_learning_rate: None,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
            early_stopping: EarlyStoppingConfig::default(),
            seed: 0,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            mask_word_boundaries: false,
            boundary_mode: BoundaryMode::Expand,
            overflow: OverflowPolicy::SkipAndLog,
            overlap: OverlapPolicy::FlatGreedy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.early_stopping.patience == 0 {
            return bad("early_stopping.patience must be >= 1".into());
        }
        if self.early_stopping.eval_every == 0 {
            return bad("early_stopping.eval_every must be >= 1".into());
        }
        let rates = [
            ("learning_rate", Some(self.learning_rate)),
            ("encoder_learning_rate", self.encoder_learning_rate),
            ("head_learning_rate", self.head_learning_rate),
        ];
        for (name, r) in rates {
            if let Some(r) = r {
                if !(r > 0.0) || !r.is_finite() {
                    return bad(format!("{name} must be > 0"));
                }
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0".into());
        }
        if self.thresholds.is_empty() {
            return bad("thresholds must not be empty".into());
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return bad(format!("threshold {t} is outside (0, 1)"));
        }
        self.loss.validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn optimizer(&self) -> AdamWConfig {
        let mut lr_overrides = BTreeMap::new();
        if let Some(lr) = self.encoder_learning_rate {
            for p in ["encoder.", "text_encoder.", "label_encoder."] {
                lr_overrides.insert(p.to_string(), lr);
            }
        }
        if let Some(lr) = self.head_learning_rate {
            lr_overrides.insert("head.".to_string(), lr);
        }
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            lr_overrides,
        }
    }
}

/// A named corpus. Dataset names key the evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<RawExample>,
}

/// An example tokenized, remapped and enumerated once up front.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedExample {
    /// Position across all prepared datasets, used in error reports.
    pub id: usize,
    pub dataset: String,
    pub tokenized: TokenizedExample,
    pub text_ids: Vec<usize>,
    pub label_ids: Vec<Vec<usize>>,
    pub candidates: CandidateSpanSet,
}

impl PreparedExample {
    pub fn language(&self) -> &str {
        &self.tokenized.language
    }

    pub fn labels(&self) -> &LabelSet {
        &self.tokenized.label_set
    }
}

/// Tokenizes every example with its language's tokenizer. An example is
/// scored against all labels of its dataset.
pub fn prepare(
    datasets: &[Dataset],
    tokenizers: &TokenizerConfig,
    max_span_len: usize,
    mask_word_boundaries: bool,
    mode: BoundaryMode,
) -> Result<Vec<PreparedExample>, TrainError> {
    let label_tok = tokenizers.label_tokenizer();
    let mut out = Vec::new();
    for ds in datasets {
        let labels = LabelSet::from_examples(&ds.examples);
        let label_ids = tokenize_labels(&labels, label_tok.as_ref());
        let mut by_lang: HashMap<String, Box<dyn SubwordTokenizer>> = HashMap::new();
        for ex in &ds.examples {
            let tok = by_lang
                .entry(ex.language.clone())
                .or_insert_with(|| tokenizers.for_language(&ex.language));
            let t = remap_entities(ex, tok.as_ref(), mode, &labels)?;
            let candidates = CandidateSpanSet::for_example(&t, max_span_len, mask_word_boundaries);
            out.push(PreparedExample {
                id: out.len(),
                dataset: ds.name.clone(),
                text_ids: t.token_ids(),
                tokenized: t,
                label_ids: label_ids.clone(),
                candidates,
            });
        }
    }
    Ok(out)
}

/// One example of a batch, with gold re-indexed into the batch label set.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub example_id: usize,
    pub text_ids: Vec<usize>,
    pub candidates: CandidateSpanSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Union of the examples' label sets in first-occurrence order.
    pub labels: LabelSet,
    pub label_ids: Vec<Vec<usize>>,
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn example_ids(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.example_id).collect()
    }
}

/// Scores every example of the batch against the union of their labels.
/// For cross-encoders every joint sequence must fit.
pub fn build_batch(
    examples: &[&PreparedExample],
    config: &ModelConfig,
    label_tokenizer: &dyn SubwordTokenizer,
) -> Result<Batch, ModelError> {
    let mut labels = LabelSet::new();
    for ex in examples {
        for l in ex.labels().iter() {
            labels.push(l.to_string());
        }
    }
    let label_ids = tokenize_labels(&labels, label_tokenizer);
    let mut items = Vec::with_capacity(examples.len());
    for ex in examples {
        if config.architecture == Architecture::Cross {
            joint_layout(&ex.text_ids, &label_ids, config.markers(), config.max_seq_len)?;
        }
        let gold: Vec<GoldSpan> = ex
            .tokenized
            .gold_spans
            .iter()
            .filter_map(|g| {
                let name = ex.labels().get(g.label)?;
                Some(GoldSpan {
                    span: g.span,
                    label: labels.index_of(name)?,
                })
            })
            .collect();
        let candidates = CandidateSpanSet {
            gold: Vec::new(),
            uncovered: Vec::new(),
            ..ex.candidates.clone()
        }
        .with_gold(&gold);
        items.push(BatchItem {
            example_id: ex.id,
            text_ids: ex.text_ids.clone(),
            candidates,
        });
    }
    Ok(Batch {
        labels,
        label_ids,
        items,
    })
}

/// Mean loss of a batch recorded on `tape`, against `params`.
pub fn batch_loss(
    tape: &mut Tape,
    model: &SpanModel,
    params: &ParamStore,
    batch: &Batch,
    loss: &LossConfig,
) -> Result<Var, TrainError> {
    let theta = if loss.kind == crate::losses::LossKind::Contrastive {
        tape.param(params, THRESHOLD_PARAM)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let mut parts = Vec::with_capacity(batch.items.len());
    for item in &batch.items {
        let z = model.forward_with(
            tape,
            params,
            &item.text_ids,
            &batch.label_ids,
            &batch.labels,
            &item.candidates,
        )?;
        parts.push(loss_parts(tape, z, theta, &item.candidates, batch.labels.len(), loss)?);
    }
    Ok(reduce(tape, &parts)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Epoch-wise sampling without replacement. The last batch of an epoch may
/// be short.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub epoch: u64,
    pub order: Vec<usize>,
    pub pos: usize,
}

impl SamplerState {
    pub fn next_batch(&mut self, rng: &mut ChaCha8Rng, n: usize, batch_size: usize) -> Vec<usize> {
        if self.pos >= self.order.len() || self.order.len() != n {
            self.order = (0..n).collect();
            self.order.shuffle(rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricRecord {
    Eval {
        step: u64,
        val_macro_f1: f64,
        best_t: f64,
    },
    Step {
        step: u64,
        loss: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedBatch {
    pub step: u64,
    pub example_ids: Vec<usize>,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Patience {
    Improved,
    Waiting,
    Stop,
}

/// Counts consecutive evaluations that fail to beat the best score.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, score: f64) -> Patience {
        if self.best.map_or(true, |b| score > b) {
            self.best = Some(score);
            self.since_best = 0;
            return Patience::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            Patience::Stop
        } else {
            Patience::Waiting
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    pub model: SpanModel,
    pub tokenizer: TokenizerConfig,
    pub train_config: TrainConfig,
    pub optimizer: AdamW,
    pub step: u64,
    pub rng: RngState,
    pub sampler: SamplerState,
    pub skipped_batches: usize,
    /// sha256 over model, tokenizer and training configuration.
    pub config_hash: String,
}

pub fn config_hash(model: &ModelConfig, tokenizer: &TokenizerConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_string(&(model, tokenizer, train)).expect("configs serialize");
    format!("{:x}", Sha256::digest(json.as_bytes()))
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let ckpt: Checkpoint = serde_json::from_str(s)
            .map_err(|e| TrainError::Incompatible(format!("unreadable checkpoint: {e}")))?;
        ckpt.verify()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json()).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let s = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&s)
    }

    pub fn verify(&self) -> Result<(), TrainError> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(TrainError::Incompatible(format!(
                "format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let want = config_hash(&self.model.config, &self.tokenizer, &self.train_config);
        if want != self.config_hash {
            return Err(TrainError::Incompatible("config hash does not match contents".into()));
        }
        if self.model.config.vocab_size != self.tokenizer.vocab_size {
            return Err(TrainError::Incompatible(format!(
                "model vocabulary {} differs from tokenizer vocabulary {}",
                self.model.config.vocab_size, self.tokenizer.vocab_size
            )));
        }
        Ok(())
    }
}

/// Training state: model, optimizer, step counter and sampling state.
pub struct Trainer {
    pub model: SpanModel,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub tokenizer: TokenizerConfig,
    pub step: u64,
    pub skipped: Vec<SkippedBatch>,
    rng: ChaCha8Rng,
    sampler: SamplerState,
    label_tokenizer: Box<dyn SubwordTokenizer>,
}

/// Sampling uses its own ChaCha stream so it never shares words with
/// parameter initialization.
const SAMPLER_STREAM: u64 = 1;

impl Trainer {
    pub fn new(
        model: ModelConfig,
        tokenizer: TokenizerConfig,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if model.vocab_size != tokenizer.vocab_size {
            return Err(TrainError::Config(format!(
                "model.vocab_size {} must equal tokenizer.vocab_size {}",
                model.vocab_size, tokenizer.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(Self {
            model: SpanModel::new(model, config.seed),
            optimizer: AdamW::new(config.optimizer()),
            label_tokenizer: tokenizer.label_tokenizer(),
            tokenizer,
            config,
            step: 0,
            skipped: Vec::new(),
            rng,
            sampler: SamplerState::default(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, TrainError> {
        ckpt.verify()?;
        Ok(Self {
            label_tokenizer: ckpt.tokenizer.label_tokenizer(),
            rng: ckpt.rng.restore(),
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            config: ckpt.train_config,
            tokenizer: ckpt.tokenizer,
            step: ckpt.step,
            skipped: Vec::new(),
            sampler: ckpt.sampler,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            architecture: self.model.config.architecture,
            config_hash: config_hash(&self.model.config, &self.tokenizer, &self.config),
            model: self.model.clone(),
            tokenizer: self.tokenizer.clone(),
            train_config: self.config.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            rng: RngState::capture(self.config.seed, &self.rng),
            sampler: self.sampler.clone(),
            skipped_batches: self.skipped.len(),
        }
    }

    /// Draws batches until one fits, then takes one optimizer step and
    /// returns its loss.
    pub fn train_step(&mut self, data: &[PreparedExample]) -> Result<f64, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Config("training corpus is empty".into()));
        }
        let batches_per_epoch = data.len().div_ceil(self.config.batch_size);
        let mut consecutive = 0;
        let batch = loop {
            let idx = self
                .sampler
                .next_batch(&mut self.rng, data.len(), self.config.batch_size);
            let refs: Vec<&PreparedExample> = idx.iter().map(|&i| &data[i]).collect();
            match build_batch(&refs, &self.model.config, self.label_tokenizer.as_ref()) {
                Ok(b) => break b,
                Err(e @ ModelError::SequenceOverflow { .. })
                    if self.config.overflow == OverflowPolicy::SkipAndLog =>
                {
                    self.skipped.push(SkippedBatch {
                        step: self.step + 1,
                        example_ids: refs.iter().map(|e| e.id).collect(),
                        reason: e.to_string(),
                    });
                    consecutive += 1;
                    if consecutive > 2 * batches_per_epoch {
                        return Err(TrainError::NoTrainableBatch { skipped: consecutive });
                    }
                }
                Err(e) => return Err(e.into()),
            }
        };

        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, &self.model, &self.model.params, &batch, &self.config.loss)?;
        let value = tape.value(loss).item().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step + 1,
                example_ids: batch.example_ids(),
            });
        }
        let grads = tape.backward(loss)?;
        self.optimizer.step(&mut self.model.params, grads.params())?;
        self.step += 1;
        Ok(value)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final state, or the best-validation state when early stopping
    /// restored it.
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    pub stopped_early: bool,
    pub restored_step: Option<u64>,
    /// Best validation macro-F1 and its threshold.
    pub best: Option<(f64, f64)>,
    pub skipped_batches: Vec<SkippedBatch>,
}

/// Validation hook: macro-F1 and the threshold achieving it.
pub type Validator<'a> = dyn FnMut(&SpanModel) -> Result<(f64, f64), TrainError> + 'a;

/// Runs until `max_steps` (counted from the trainer's current step) or an
/// early stop. Validation runs every `eval_every` steps whenever
/// `has_validation` is set.
pub fn run_training(
    mut trainer: Trainer,
    train: &[PreparedExample],
    has_validation: bool,
    validate: &mut Validator<'_>,
) -> Result<TrainOutcome, TrainError> {
    let cfg = trainer.config.clone();
    let mut metrics = Vec::new();
    let mut stopper = EarlyStopping::new(cfg.early_stopping.patience);
    let mut best_ckpt: Option<Checkpoint> = None;
    let mut best: Option<(f64, f64)> = None;
    let mut stopped_early = false;
    let end = trainer.step + cfg.max_steps;

    while trainer.step < end {
        let loss = trainer.train_step(train)?;
        metrics.push(MetricRecord::Step {
            step: trainer.step,
            loss,
        });
        if has_validation && trainer.step % cfg.early_stopping.eval_every as u64 == 0 {
            let (f1, t) = validate(&trainer.model)?;
            metrics.push(MetricRecord::Eval {
                step: trainer.step,
                val_macro_f1: f1,
                best_t: t,
            });
            match stopper.observe(f1) {
                Patience::Improved => {
                    best = Some((f1, t));
                    if cfg.early_stopping.enabled {
                        best_ckpt = Some(trainer.checkpoint());
                    }
                }
                Patience::Stop if cfg.early_stopping.enabled => {
                    stopped_early = true;
                    break;
                }
                _ => {}
            }
        }
    }

    let final_ckpt = trainer.checkpoint();
    let restored_step = best_ckpt
        .as_ref()
        .filter(|b| b.step != final_ckpt.step)
        .map(|b| b.step);
    Ok(TrainOutcome {
        checkpoint: best_ckpt.unwrap_or(final_ckpt),
        metrics,
        stopped_early,
        restored_step,
        best,
        skipped_batches: trainer.skipped,
    })
}

/// Full training with validation on `val` at the configured threshold grid.
pub fn train(
    model: ModelConfig,
    tokenizer: TokenizerConfig,
    config: TrainConfig,
    train: &[PreparedExample],
    val: &[PreparedExample],
) -> Result<TrainOutcome, TrainError> {
    let thresholds = config.thresholds.clone();
    let overlap = config.overlap;
    let trainer = Trainer::new(model, tokenizer, config)?;
    let mut validate = |m: &SpanModel| -> Result<(f64, f64), TrainError> {
        let report = evaluate(m, val, &thresholds, overlap, &[])?;
        Ok(report
            .best_threshold()
            .map_or((0.0, thresholds[0]), |(t, f)| (f, t)))
    };
    run_training(trainer, train, !val.is_empty(), &mut validate)
}

/// Scores every example once. Bi-encoders encode each distinct label set
/// once and reuse it. Cross-encoder examples whose joint sequence does not
/// fit are returned unscored.
pub fn score_examples(model: &SpanModel, examples: &[PreparedExample]) -> Result<Vec<ScoredExample>, TrainError> {
    let mut caches: HashMap<&[String], LabelCache> = HashMap::new();
    if model.architecture() == Architecture::Bi {
        for ex in examples {
            let key = ex.labels().as_slice();
            if !caches.contains_key(key) {
                caches.insert(key, model.build_label_cache(ex.labels(), &ex.label_ids)?);
            }
        }
    }
    examples
        .par_iter()
        .map(|ex| {
            let grid = match caches.get(ex.labels().as_slice()) {
                Some(cache) => Some(model.score_with_cache(&ex.text_ids, cache, &ex.candidates)?),
                None => match model.score(&ex.text_ids, &ex.label_ids, ex.labels(), &ex.candidates) {
                    Ok(g) => Some(g),
                    Err(ModelError::SequenceOverflow { .. }) => None,
                    Err(e) => return Err(e.into()),
                },
            };
            Ok(ScoredExample {
                dataset: ex.dataset.clone(),
                language: ex.language().to_string(),
                grid,
                gold: ex.tokenized.gold_spans.clone(),
                candidates: ex.candidates.clone(),
                extra_fn: ex.tokenized.dropped_entities.len(),
            })
        })
        .collect()
}

/// Scores once, then decodes at every threshold.
pub fn evaluate(
    model: &SpanModel,
    examples: &[PreparedExample],
    thresholds: &[f64],
    overlap: OverlapPolicy,
    expected: &[(String, String)],
) -> Result<EvalReport, TrainError> {
    let scored = score_examples(model, examples)?;
    Ok(threshold_sweep(&scored, thresholds, overlap, expected))
}

/// Evaluates a frozen checkpoint on raw datasets. A supplied tokenizer
/// configuration must agree with the one the checkpoint was trained with.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    datasets: &[Dataset],
    tokenizer: Option<&TokenizerConfig>,
    thresholds: &[f64],
) -> Result<EvalReport, TrainError> {
    ckpt.verify()?;
    if let Some(tok) = tokenizer {
        if tok.vocab_size != ckpt.tokenizer.vocab_size {
            return Err(TrainError::Incompatible(format!(
                "tokenizer vocabulary {} differs from the checkpoint's {}",
                tok.vocab_size, ckpt.tokenizer.vocab_size
            )));
        }
    }
    let tok = tokenizer.unwrap_or(&ckpt.tokenizer);
    let cfg = &ckpt.train_config;
    let examples = prepare(
        datasets,
        tok,
        ckpt.model.config.max_span_len,
        cfg.mask_word_boundaries,
        cfg.boundary_mode,
    )?;
    let expected: BTreeSet<(String, String)> = datasets
        .iter()
        .flat_map(|d| d.examples.iter().map(|e| (d.name.clone(), e.language.clone())))
        .collect();
    let expected: Vec<_> = expected.into_iter().collect();
    evaluate(&ckpt.model, &examples, thresholds, cfg.overlap, &expected)
}
