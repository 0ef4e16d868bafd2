//! Encoder compositions for both architectures, span heads, score grids and
//! the bi-encoder label cache.

mod encoder;
mod heads;

pub use encoder::{Encoder, ReferenceEncoder};
pub use heads::{HeadParams, THRESHOLD_PARAM, WIDTH_PARAM};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{LabelSet, SubwordTokenizer};
use crate::numeric::{Activation, NumericError, ParamStore, Tape, Tensor, Var};
use crate::spans::{CandidateSpanSet, Span};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(
        "joint sequence needs {required} positions but the maximum is {max_len}; \
         only {labels_that_fit} of {labels} labels fit in one forward pass"
    )]
    SequenceOverflow {
        required: usize,
        max_len: usize,
        labels_that_fit: usize,
        labels: usize,
    },
    #[error("sequence of {len} tokens exceeds the maximum of {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("token id {id} outside encoder vocabulary of {vocab_size}")]
    TokenOutOfVocab { id: usize, vocab_size: usize },
    #[error("label {index} ({label:?}) has an empty description")]
    EmptyLabel { index: usize, label: String },
    #[error("span width {width} has no embedding (max span length {max_span_len})")]
    WidthOutOfRange { width: usize, max_span_len: usize },
    #[error("hidden states have {got} rows but candidates need {needed}")]
    HiddenRows { needed: usize, got: usize },
    #[error("label cache built at parameter version {cache} but parameters are at {current}")]
    StaleCache { cache: u64, current: u64 },
    #[error("label caching needs a bi-encoder")]
    NotBiEncoder,
    #[error("label count mismatch: {labels} labels but {token_lists} token lists")]
    LabelTokens { labels: usize, token_lists: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Bi,
    Cross,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bi => "bi",
            Self::Cross => "cross",
        })
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bi" => Ok(Self::Bi),
            "cross" => Ok(Self::Cross),
            other => Err(format!("unknown architecture `{other}` (expected bi or cross)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Tokenizer vocabulary; the encoders add three reserved ids on top.
    pub vocab_size: usize,
    pub d_model: usize,
    /// Hidden width of every two-layer MLP; defaults to `d_mlp`.
    #[serde(default)]
    pub d_hidden: Option<usize>,
    pub d_mlp: usize,
    pub d_width: usize,
    pub max_span_len: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Bi,
            vocab_size: 4096,
            d_model: 64,
            d_hidden: None,
            d_mlp: 384,
            d_width: 128,
            max_span_len: 30,
            max_seq_len: 512,
            activation: Activation::Relu,
        }
    }
}

/// Reserved ids placed directly above the tokenizer vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Markers {
    pub label: usize,
    pub sep: usize,
    pub cls: usize,
}

impl ModelConfig {
    pub fn markers(&self) -> Markers {
        Markers {
            label: self.vocab_size,
            sep: self.vocab_size + 1,
            cls: self.vocab_size + 2,
        }
    }

    pub fn encoder_vocab(&self) -> usize {
        self.vocab_size + 3
    }

    pub fn heads(&self) -> HeadParams {
        HeadParams {
            d_model: self.d_model,
            d_hidden: self.d_hidden.unwrap_or(self.d_mlp),
            d_mlp: self.d_mlp,
            d_width: self.d_width,
            max_span_len: self.max_span_len,
            activation: self.activation,
        }
    }

    /// The text encoder (the joint encoder for cross-encoders).
    pub fn text_encoder(&self) -> ReferenceEncoder {
        let prefix = match self.architecture {
            Architecture::Bi => "text_encoder",
            Architecture::Cross => "encoder",
        };
        ReferenceEncoder::new(prefix, self.encoder_vocab(), self.d_model, self.max_seq_len)
    }

    pub fn label_encoder(&self) -> Option<ReferenceEncoder> {
        (self.architecture == Architecture::Bi).then(|| {
            ReferenceEncoder::new(
                "label_encoder",
                self.encoder_vocab(),
                self.d_model,
                self.max_seq_len,
            )
        })
    }
}

/// Token ids of each label description.
pub fn tokenize_labels(labels: &LabelSet, tokenizer: &dyn SubwordTokenizer) -> Vec<Vec<usize>> {
    labels
        .iter()
        .map(|l| tokenizer.tokenize(l).iter().map(|t| t.id).collect())
        .collect()
}

/// Layout of a joint label+text sequence:
/// `[LABEL] l1.. [LABEL] l2.. ... [SEP] text..`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointLayout {
    pub ids: Vec<usize>,
    pub label_positions: Vec<usize>,
    pub text_positions: Vec<usize>,
}

pub fn joint_layout(
    text_ids: &[usize],
    label_ids: &[Vec<usize>],
    markers: Markers,
    max_len: usize,
) -> Result<JointLayout, ModelError> {
    let label_part: usize = label_ids.iter().map(|l| l.len() + 1).sum();
    let required = label_part + 1 + text_ids.len();
    if required > max_len {
        let mut used = 1 + text_ids.len();
        let mut fit = 0;
        for l in label_ids {
            if used + l.len() + 1 > max_len {
                break;
            }
            used += l.len() + 1;
            fit += 1;
        }
        return Err(ModelError::SequenceOverflow {
            required,
            max_len,
            labels_that_fit: fit,
            labels: label_ids.len(),
        });
    }
    let mut ids = Vec::with_capacity(required);
    let mut label_positions = Vec::with_capacity(label_ids.len());
    for l in label_ids {
        label_positions.push(ids.len());
        ids.push(markers.label);
        ids.extend_from_slice(l);
    }
    ids.push(markers.sep);
    let text_positions = (ids.len()..ids.len() + text_ids.len()).collect();
    ids.extend_from_slice(text_ids);
    Ok(JointLayout {
        ids,
        label_positions,
        text_positions,
    })
}

/// One pass of the joint encoder over labels and text. Returns `(H_X, H_Y)`:
/// hidden rows at the text positions and at the `[LABEL]` markers.
pub fn cross_encode(
    tape: &mut Tape,
    params: &ParamStore,
    encoder: &dyn Encoder,
    text_ids: &[usize],
    label_ids: &[Vec<usize>],
    markers: Markers,
) -> Result<(Var, Var), ModelError> {
    let layout = joint_layout(text_ids, label_ids, markers, encoder.max_len())?;
    let h = encoder.encode(tape, params, &layout.ids)?;
    let hx = tape.gather_rows(h, &layout.text_positions)?;
    let hy = tape.gather_rows(h, &layout.label_positions)?;
    Ok((hx, hy))
}

/// Label representations from the label tower: the hidden state at the
/// leading `[CLS]` position of each description, encoded on its own.
pub fn encode_labels(
    tape: &mut Tape,
    params: &ParamStore,
    label_encoder: &dyn Encoder,
    label_ids: &[Vec<usize>],
    markers: Markers,
    labels: &LabelSet,
) -> Result<Var, ModelError> {
    if label_ids.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[0, label_encoder.hidden_dim()])));
    }
    let mut rows = Vec::with_capacity(label_ids.len());
    for (index, ids) in label_ids.iter().enumerate() {
        if ids.is_empty() {
            return Err(ModelError::EmptyLabel {
                index,
                label: labels.get(index).unwrap_or_default().to_string(),
            });
        }
        let mut seq = Vec::with_capacity(ids.len() + 1);
        seq.push(markers.cls);
        seq.extend_from_slice(ids);
        let h = label_encoder.encode(tape, params, &seq)?;
        rows.push(tape.gather_rows(h, &[0])?);
    }
    Ok(tape.concat_rows(&rows)?)
}

/// Two independent towers: `H_X` never sees the labels.
pub fn bi_encode(
    tape: &mut Tape,
    params: &ParamStore,
    text_encoder: &dyn Encoder,
    label_encoder: &dyn Encoder,
    text_ids: &[usize],
    label_ids: &[Vec<usize>],
    markers: Markers,
    labels: &LabelSet,
) -> Result<(Var, Var), ModelError> {
    let hx = text_encoder.encode(tape, params, text_ids)?;
    let hy = encode_labels(tape, params, label_encoder, label_ids, markers, labels)?;
    Ok((hx, hy))
}

/// Logits of every candidate span against every label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreGrid {
    /// `[spans, labels]`.
    pub logits: Tensor,
    pub spans: Vec<Span>,
    pub labels: LabelSet,
}

impl ScoreGrid {
    pub fn new(logits: Tensor, spans: Vec<Span>, labels: LabelSet) -> Self {
        debug_assert_eq!(logits.rows(), spans.len());
        Self {
            logits,
            spans,
            labels,
        }
    }

    pub fn num_spans(&self) -> usize {
        self.spans.len()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn logit(&self, span: usize, label: usize) -> f64 {
        self.logits.data()[span * self.num_labels() + label]
    }
}

/// Projected label matrix `Q`, frozen at a parameter version.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelCache {
    pub labels: LabelSet,
    pub projected: Tensor,
    pub param_version: u64,
}

/// Model parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanModel {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Root seed first, followed by any derived seeds.
    pub seed_lineage: Vec<u64>,
}

impl SpanModel {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        config.text_encoder().init(&mut params, &mut rng);
        if let Some(le) = config.label_encoder() {
            le.init(&mut params, &mut rng);
        }
        config.heads().init(&mut params, &mut rng);
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config,
            params,
            seed_lineage: vec![seed],
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    /// `(H_X, H_Y)` for either architecture.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        text_ids: &[usize],
        label_ids: &[Vec<usize>],
        labels: &LabelSet,
    ) -> Result<(Var, Var), ModelError> {
        let markers = self.config.markers();
        let text_enc = self.config.text_encoder();
        match self.config.label_encoder() {
            None => cross_encode(tape, params, &text_enc, text_ids, label_ids, markers),
            Some(label_enc) => bi_encode(
                tape, params, &text_enc, &label_enc, text_ids, label_ids, markers, labels,
            ),
        }
    }

    /// Logits `[candidates, labels]` recorded on `tape` against `params`
    /// (normally `&self.params`).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        text_ids: &[usize],
        label_ids: &[Vec<usize>],
        labels: &LabelSet,
        candidates: &CandidateSpanSet,
    ) -> Result<Var, ModelError> {
        if labels.len() != label_ids.len() {
            return Err(ModelError::LabelTokens {
                labels: labels.len(),
                token_lists: label_ids.len(),
            });
        }
        let (hx, hy) = self.encode(tape, params, text_ids, label_ids, labels)?;
        self.config
            .heads()
            .span_logits(tape, params, hx, hy, candidates)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        text_ids: &[usize],
        label_ids: &[Vec<usize>],
        labels: &LabelSet,
        candidates: &CandidateSpanSet,
    ) -> Result<Var, ModelError> {
        self.forward_with(tape, &self.params, text_ids, label_ids, labels, candidates)
    }

    pub fn score(
        &self,
        text_ids: &[usize],
        label_ids: &[Vec<usize>],
        labels: &LabelSet,
        candidates: &CandidateSpanSet,
    ) -> Result<ScoreGrid, ModelError> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, text_ids, label_ids, labels, candidates)?;
        Ok(ScoreGrid::new(
            tape.value(logits).clone(),
            candidates.spans.clone(),
            labels.clone(),
        ))
    }

    /// Encodes and projects a label set once, for reuse across texts.
    pub fn build_label_cache(
        &self,
        labels: &LabelSet,
        label_ids: &[Vec<usize>],
    ) -> Result<LabelCache, ModelError> {
        let label_enc = self.config.label_encoder().ok_or(ModelError::NotBiEncoder)?;
        if labels.len() != label_ids.len() {
            return Err(ModelError::LabelTokens {
                labels: labels.len(),
                token_lists: label_ids.len(),
            });
        }
        let mut tape = Tape::new();
        let hy = encode_labels(
            &mut tape,
            &self.params,
            &label_enc,
            label_ids,
            self.config.markers(),
            labels,
        )?;
        let q = self
            .config
            .heads()
            .project_labels(&mut tape, &self.params, hy)?;
        Ok(LabelCache {
            labels: labels.clone(),
            projected: tape.value(q).clone(),
            param_version: self.params.version(),
        })
    }

    pub fn score_with_cache(
        &self,
        text_ids: &[usize],
        cache: &LabelCache,
        candidates: &CandidateSpanSet,
    ) -> Result<ScoreGrid, ModelError> {
        if self.config.architecture != Architecture::Bi {
            return Err(ModelError::NotBiEncoder);
        }
        if cache.param_version != self.params.version() {
            return Err(ModelError::StaleCache {
                cache: cache.param_version,
                current: self.params.version(),
            });
        }
        let mut tape = Tape::new();
        let hx = self
            .config
            .text_encoder()
            .encode(&mut tape, &self.params, text_ids)?;
        let heads = self.config.heads();
        let keys = heads.span_representations(&mut tape, &self.params, hx, candidates)?;
        let q = tape.constant(cache.projected.clone());
        let logits = heads.logits_from(&mut tape, keys, q)?;
        Ok(ScoreGrid::new(
            tape.value(logits).clone(),
            candidates.spans.clone(),
            cache.labels.clone(),
        ))
    }

    /// The learned global threshold logit used by contrastive training.
    pub fn threshold_logit(&self) -> f64 {
        self.params
            .get(THRESHOLD_PARAM)
            .and_then(Tensor::item)
            .unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch: Architecture) -> SpanModel {
        SpanModel::new(
            ModelConfig {
                architecture: arch,
                vocab_size: 30,
                d_model: 6,
                d_hidden: Some(5),
                d_mlp: 4,
                d_width: 3,
                max_span_len: 4,
                max_seq_len: 16,
                activation: Activation::Relu,
            },
            9,
        )
    }

    fn labels(n: usize) -> (LabelSet, Vec<Vec<usize>>) {
        let names: Vec<String> = (0..n).map(|i| format!("label{i}")).collect();
        let ids = (0..n).map(|i| vec![i + 1, 2 * i + 3]).collect();
        (LabelSet::from_labels(names), ids)
    }

    #[test]
    fn cross_shapes() {
        let m = tiny(Architecture::Cross);
        let (ls, ids) = labels(2);
        let mut tape = Tape::new();
        let (hx, hy) = m.encode(&mut tape, &m.params, &[4, 5, 6], &ids, &ls).unwrap();
        assert_eq!(tape.value(hx).shape(), &[3, 6]);
        assert_eq!(tape.value(hy).shape(), &[2, 6]);

        let mut tape = Tape::new();
        let (hx, hy) = m
            .encode(&mut tape, &m.params, &[4, 5, 6], &[], &LabelSet::new())
            .unwrap();
        assert_eq!(tape.value(hx).shape(), &[3, 6]);
        assert_eq!(tape.value(hy).rows(), 0);
    }

    #[test]
    fn cross_overflow_reports_fit() {
        let m = tiny(Architecture::Cross);
        let (ls, ids) = labels(5);
        let mut tape = Tape::new();
        // 5 labels * 3 + sep + 4 text = 20 > 16; 1 + 4 + 3k <= 16 -> k = 3
        let err = m
            .encode(&mut tape, &m.params, &[1, 2, 3, 4], &ids, &ls)
            .unwrap_err();
        assert_eq!(
            err,
            ModelError::SequenceOverflow {
                required: 20,
                max_len: 16,
                labels_that_fit: 3,
                labels: 5
            }
        );
    }

    #[test]
    fn joint_layout_positions() {
        let markers = Markers {
            label: 100,
            sep: 101,
            cls: 102,
        };
        let l = joint_layout(&[7, 8], &[vec![1], vec![2, 3]], markers, 10).unwrap();
        assert_eq!(l.ids, vec![100, 1, 100, 2, 3, 101, 7, 8]);
        assert_eq!(l.label_positions, vec![0, 2]);
        assert_eq!(l.text_positions, vec![6, 7]);
    }

    #[test]
    fn bi_labels_shape_and_identity() {
        let m = tiny(Architecture::Bi);
        let ls = LabelSet::from_labels(["a", "b", "c"]);
        let ids = vec![vec![3, 4], vec![5], vec![3, 4]];
        let mut tape = Tape::new();
        let (_, hy) = m.encode(&mut tape, &m.params, &[1, 2], &ids, &ls).unwrap();
        let hy = tape.value(hy);
        assert_eq!(hy.shape(), &[3, 6]);
        assert_eq!(hy.row(0), hy.row(2));
    }

    #[test]
    fn bi_empty_label_rejected() {
        let m = tiny(Architecture::Bi);
        let ls = LabelSet::from_labels(["a", "b"]);
        let mut tape = Tape::new();
        let err = m
            .encode(&mut tape, &m.params, &[1], &[vec![1], vec![]], &ls)
            .unwrap_err();
        assert!(matches!(err, ModelError::EmptyLabel { index: 1, .. }));
    }

    #[test]
    fn cache_matches_and_detects_staleness() {
        let mut m = tiny(Architecture::Bi);
        let (ls, ids) = labels(3);
        let cands = CandidateSpanSet::new(4, 4);
        let text = [5, 6, 7, 8];
        let cache = m.build_label_cache(&ls, &ids).unwrap();
        let cached = m.score_with_cache(&text, &cache, &cands).unwrap();
        let fresh = m.score(&text, &ids, &ls, &cands).unwrap();
        assert_eq!(cached, fresh);

        m.params.get_mut("head.label.b2").unwrap().data_mut()[0] += 0.1;
        assert!(matches!(
            m.score_with_cache(&text, &cache, &cands),
            Err(ModelError::StaleCache { .. })
        ));
    }

    #[test]
    fn empty_cache_gives_zero_columns() {
        let m = tiny(Architecture::Bi);
        let cache = m.build_label_cache(&LabelSet::new(), &[]).unwrap();
        let g = m
            .score_with_cache(&[1, 2, 3], &cache, &CandidateSpanSet::new(3, 4))
            .unwrap();
        assert_eq!(g.logits.shape(), &[6, 0]);
    }

    #[test]
    fn cache_rejected_for_cross() {
        let m = tiny(Architecture::Cross);
        assert_eq!(
            m.build_label_cache(&LabelSet::new(), &[]).unwrap_err(),
            ModelError::NotBiEncoder
        );
    }

    #[test]
    fn width_beyond_table_is_error() {
        let m = tiny(Architecture::Bi);
        let (ls, ids) = labels(1);
        let cands = CandidateSpanSet::new(6, 5);
        assert!(matches!(
            m.score(&[1, 2, 3, 4, 5, 6], &ids, &ls, &cands),
            Err(ModelError::WidthOutOfRange { width: 4, .. })
        ));
    }
}
