//! Decoding score grids into entity predictions, exact-match counting, and
//! report aggregation across languages, datasets and thresholds.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::ScoreGrid;
use crate::numeric::sigmoid_scalar;
use crate::spans::{CandidateSpanSet, GoldSpan, Span};

/// Decision thresholds swept by default.
pub const DEFAULT_THRESHOLDS: [f64; 7] = [0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5];

/// Report key of a threshold.
pub fn threshold_key(t: f64) -> String {
    format!("{t}")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapPolicy {
    /// Greedy by probability; no two accepted spans share a token.
    #[default]
    FlatGreedy,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub span: Span,
    pub label: usize,
    pub probability: f64,
}

/// Greedy acceptance order: probability descending, then earlier start,
/// then shorter span, then lower label index.
pub fn greedy_order(a: &Prediction, b: &Prediction) -> Ordering {
    b.probability
        .total_cmp(&a.probability)
        .then(a.span.start.cmp(&b.span.start))
        .then(a.span.len().cmp(&b.span.len()))
        .then(a.label.cmp(&b.label))
}

fn survivors(
    grid: &ScoreGrid,
    cands: &CandidateSpanSet,
    keep: impl Fn(f64, f64) -> bool,
) -> Vec<Prediction> {
    let k = grid.num_labels();
    let mut out = Vec::new();
    for (i, span) in grid.spans.iter().enumerate() {
        if !cands.mask.get(i).copied().unwrap_or(false) {
            continue;
        }
        for label in 0..k {
            let z = grid.logit(i, label);
            let p = sigmoid_scalar(z);
            if keep(z, p) {
                out.push(Prediction {
                    span: *span,
                    label,
                    probability: p,
                });
            }
        }
    }
    out
}

pub fn resolve_overlaps(mut preds: Vec<Prediction>, policy: OverlapPolicy) -> Vec<Prediction> {
    preds.sort_by(greedy_order);
    if policy == OverlapPolicy::None {
        return preds;
    }
    let mut accepted: Vec<Prediction> = Vec::with_capacity(preds.len());
    for p in preds {
        if accepted.iter().all(|a| !a.span.overlaps(&p.span)) {
            accepted.push(p);
        }
    }
    accepted
}

/// Pairs with `sigmoid(logit) > t` on mask-true candidates, then overlap
/// resolution. Output is in greedy order.
pub fn decode(
    grid: &ScoreGrid,
    cands: &CandidateSpanSet,
    t: f64,
    policy: OverlapPolicy,
) -> Vec<Prediction> {
    resolve_overlaps(survivors(grid, cands, |_, p| p > t), policy)
}

/// Decoding against a learned threshold logit: keep pairs with
/// `logit > theta`.
pub fn decode_without_threshold(
    grid: &ScoreGrid,
    cands: &CandidateSpanSet,
    theta: f64,
    policy: OverlapPolicy,
) -> Vec<Prediction> {
    resolve_overlaps(survivors(grid, cands, |z, _| z > theta), policy)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        Self { tp, fp, fn_ }
    }

    pub fn merge(self, o: Counts) -> Counts {
        Counts::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Nothing to count: F1 is 0/0 and reported as 0.
    pub fn is_degenerate(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn score(&self) -> F1Score {
        F1Score {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
            degenerate: self.is_degenerate(),
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

/// Exact-match counts with multiset semantics on `(start, end, label)`.
pub fn match_counts(gold: &[GoldSpan], pred: &[Prediction]) -> Counts {
    let mut remaining: HashMap<(usize, usize, usize), usize> = HashMap::new();
    for g in gold {
        *remaining
            .entry((g.span.start, g.span.end, g.label))
            .or_default() += 1;
    }
    let mut tp = 0;
    for p in pred {
        if let Some(n) = remaining.get_mut(&(p.span.start, p.span.end, p.label)) {
            if *n > 0 {
                *n -= 1;
                tp += 1;
            }
        }
    }
    Counts::new(tp, pred.len() - tp, gold.len() - tp)
}

pub fn micro_f1(gold: &[GoldSpan], pred: &[Prediction]) -> F1Score {
    match_counts(gold, pred).score()
}

/// One example after scoring. `grid` is `None` when the example could not
/// be scored (e.g. cross-encoder overflow); its gold then counts as missed.
#[derive(Clone, Debug)]
pub struct ScoredExample {
    pub dataset: String,
    pub language: String,
    pub grid: Option<ScoreGrid>,
    pub candidates: CandidateSpanSet,
    /// All remapped gold, including spans longer than the candidate limit.
    pub gold: Vec<GoldSpan>,
    /// Entities lost before remapping; always false negatives.
    pub extra_fn: usize,
}

impl ScoredExample {
    pub fn counts_at(&self, t: f64, policy: OverlapPolicy) -> Counts {
        let mut c = match &self.grid {
            Some(g) => match_counts(&self.gold, &decode(g, &self.candidates, t, policy)),
            None => Counts::new(0, 0, self.gold.len()),
        };
        c.fn_ += self.extra_fn;
        c
    }
}

/// Counts of one (dataset, language) split at every threshold of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPiece {
    pub dataset: String,
    pub language: String,
    pub examples: usize,
    pub skipped: usize,
    /// Aligned with the sweep's threshold list.
    pub counts: Vec<Counts>,
}

/// Decodes every example once per threshold (scores are reused) and
/// pools counts per split. Splits come out sorted by (dataset, language).
pub fn sweep_pieces(examples: &[ScoredExample], thresholds: &[f64], policy: OverlapPolicy) -> Vec<SplitPiece> {
    let per_example: Vec<Vec<Counts>> = examples
        .par_iter()
        .map(|ex| thresholds.iter().map(|&t| ex.counts_at(t, policy)).collect())
        .collect();
    let mut by_split: BTreeMap<(String, String), SplitPiece> = BTreeMap::new();
    for (ex, counts) in examples.iter().zip(per_example) {
        let piece = by_split
            .entry((ex.dataset.clone(), ex.language.clone()))
            .or_insert_with(|| SplitPiece {
                dataset: ex.dataset.clone(),
                language: ex.language.clone(),
                examples: 0,
                skipped: 0,
                counts: vec![Counts::default(); thresholds.len()],
            });
        piece.examples += 1;
        piece.skipped += usize::from(ex.grid.is_none());
        for (acc, c) in piece.counts.iter_mut().zip(counts) {
            *acc = acc.merge(c);
        }
    }
    by_split.into_values().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub examples: usize,
    /// Examples that could not be scored; their gold counts as missed.
    pub skipped: usize,
    pub thresholds: BTreeMap<String, F1Score>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    /// `None` marks an expected split that produced no results.
    pub languages: BTreeMap<String, Option<SplitReport>>,
    /// Pooled-count F1 over the dataset's present languages.
    pub micro_f1: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestThresholdReport {
    /// Always true: thresholds are picked on the very data they score.
    pub oracle_diagnostic: bool,
    /// dataset -> language -> chosen threshold key.
    pub chosen: BTreeMap<String, BTreeMap<String, String>>,
    pub dataset_micro_f1: BTreeMap<String, f64>,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: BTreeMap<String, DatasetReport>,
    pub macro_f1: BTreeMap<String, f64>,
    pub best_per_language_macro_f1: Option<f64>,
    pub best_per_language: Option<BestThresholdReport>,
    /// `dataset/language` pairs that were expected but missing.
    pub holes: Vec<String>,
}

impl EvalReport {
    pub fn macro_at(&self, t: f64) -> Option<f64> {
        self.macro_f1.get(&threshold_key(t)).copied()
    }

    /// Threshold keys in numeric order.
    pub fn threshold_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = self.macro_f1.keys().cloned().collect();
        keys.sort_by(|a, b| key_value(a).total_cmp(&key_value(b)));
        keys
    }

    /// Best threshold by macro-F1, ties toward the smaller threshold.
    pub fn best_threshold(&self) -> Option<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        for k in self.threshold_keys() {
            let (t, f) = (key_value(&k), self.macro_f1[&k]);
            if best.map_or(true, |(_, bf)| f > bf) {
                best = Some((t, f));
            }
        }
        best
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn key_value(k: &str) -> f64 {
    k.parse().unwrap_or(f64::NAN)
}

/// Builds the report. Dataset micro-F1 pools counts across languages;
/// macro-F1 is the unweighted mean over datasets. Every pair in `expected`
/// without a piece becomes a hole.
pub fn aggregate(pieces: &[SplitPiece], thresholds: &[f64], expected: &[(String, String)]) -> EvalReport {
    let keys: Vec<String> = thresholds.iter().map(|&t| threshold_key(t)).collect();
    let mut datasets: BTreeMap<String, DatasetReport> = BTreeMap::new();
    let mut pooled: BTreeMap<String, Vec<Counts>> = BTreeMap::new();
    let mut holes = Vec::new();

    for p in pieces {
        let split = SplitReport {
            examples: p.examples,
            skipped: p.skipped,
            thresholds: keys
                .iter()
                .zip(&p.counts)
                .map(|(k, c)| (k.clone(), c.score()))
                .collect(),
        };
        datasets
            .entry(p.dataset.clone())
            .or_insert_with(|| DatasetReport {
                languages: BTreeMap::new(),
                micro_f1: BTreeMap::new(),
            })
            .languages
            .insert(p.language.clone(), Some(split));
        let acc = pooled
            .entry(p.dataset.clone())
            .or_insert_with(|| vec![Counts::default(); thresholds.len()]);
        for (a, c) in acc.iter_mut().zip(&p.counts) {
            *a = a.merge(*c);
        }
    }
    for (dataset, language) in expected {
        let entry = datasets.entry(dataset.clone()).or_insert_with(|| DatasetReport {
            languages: BTreeMap::new(),
            micro_f1: BTreeMap::new(),
        });
        if !entry.languages.contains_key(language) {
            entry.languages.insert(language.clone(), None);
            holes.push(format!("{dataset}/{language}"));
        }
    }
    holes.sort();

    let mut macro_f1 = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        let mut sum = 0.0;
        let mut n = 0;
        for (name, counts) in &pooled {
            let f = counts[i].f1();
            datasets.get_mut(name).unwrap().micro_f1.insert(k.clone(), f);
            sum += f;
            n += 1;
        }
        if n > 0 {
            macro_f1.insert(k.clone(), sum / n as f64);
        }
    }
    EvalReport {
        datasets,
        macro_f1,
        best_per_language_macro_f1: None,
        best_per_language: None,
        holes,
    }
}

/// Picks, per (dataset, language), the threshold with the highest F1 (ties
/// toward the smaller threshold), then pools the chosen counts per dataset
/// and averages over datasets.
pub fn best_threshold_per_language(pieces: &[SplitPiece], thresholds: &[f64]) -> Option<BestThresholdReport> {
    if thresholds.is_empty() || pieces.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..thresholds.len()).collect();
    order.sort_by(|&a, &b| thresholds[a].total_cmp(&thresholds[b]));

    let mut chosen: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut pooled: BTreeMap<String, Counts> = BTreeMap::new();
    for p in pieces {
        let mut best = order[0];
        for &i in &order[1..] {
            if p.counts[i].f1() > p.counts[best].f1() {
                best = i;
            }
        }
        chosen
            .entry(p.dataset.clone())
            .or_default()
            .insert(p.language.clone(), threshold_key(thresholds[best]));
        let acc = pooled.entry(p.dataset.clone()).or_default();
        *acc = acc.merge(p.counts[best]);
    }
    let dataset_micro_f1: BTreeMap<String, f64> =
        pooled.iter().map(|(d, c)| (d.clone(), c.f1())).collect();
    let macro_f1 = dataset_micro_f1.values().sum::<f64>() / dataset_micro_f1.len() as f64;
    Some(BestThresholdReport {
        oracle_diagnostic: true,
        chosen,
        dataset_micro_f1,
        macro_f1,
    })
}

/// Full sweep: one decode per threshold over already-scored examples.
pub fn threshold_sweep(
    examples: &[ScoredExample],
    thresholds: &[f64],
    policy: OverlapPolicy,
    expected: &[(String, String)],
) -> EvalReport {
    let pieces = sweep_pieces(examples, thresholds, policy);
    let mut report = aggregate(&pieces, thresholds, expected);
    report.best_per_language = best_threshold_per_language(&pieces, thresholds);
    report.best_per_language_macro_f1 = report.best_per_language.as_ref().map(|b| b.macro_f1);
    report
}

/// Plain-text table: one row per (dataset, threshold), one column per
/// language, then the dataset micro-F1. Macro rows close the table.
pub fn render_table(report: &EvalReport) -> String {
    let keys = report.threshold_keys();
    let mut out = String::new();
    for (name, ds) in &report.datasets {
        let langs: Vec<&String> = ds.languages.keys().collect();
        let _ = write!(out, "{:<16} {:>6}", "dataset", "t");
        for l in &langs {
            let _ = write!(out, " {:>8}", l);
        }
        let _ = writeln!(out, " {:>8}", "micro");
        for k in &keys {
            let _ = write!(out, "{:<16} {:>6}", name, k);
            for l in &langs {
                match ds.languages[*l].as_ref().and_then(|s| s.thresholds.get(k)) {
                    Some(s) => {
                        let _ = write!(out, " {:>8.3}", s.f1);
                    }
                    None => {
                        let _ = write!(out, " {:>8}", "-");
                    }
                }
            }
            match ds.micro_f1.get(k) {
                Some(f) => {
                    let _ = writeln!(out, " {:>8.3}", f);
                }
                None => {
                    let _ = writeln!(out, " {:>8}", "-");
                }
            }
        }
        out.push('\n');
    }
    for k in &keys {
        let _ = writeln!(out, "{:<16} {:>6} {:>8.3}", "macro", k, report.macro_f1[k]);
    }
    if let Some(best) = &report.best_per_language {
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>8.3}   (best t per language, oracle diagnostic)",
            "macro", "*", best.macro_f1
        );
    }
    for h in &report.holes {
        let _ = writeln!(out, "missing split: {h}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelSet;
    use crate::numeric::Tensor;

    fn gs(start: usize, end: usize, label: usize) -> GoldSpan {
        GoldSpan {
            span: Span::new(start, end),
            label,
        }
    }

    fn pred(start: usize, end: usize, label: usize, probability: f64) -> Prediction {
        Prediction {
            span: Span::new(start, end),
            label,
            probability,
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn nothing_above_threshold() {
        let cands = CandidateSpanSet::new(2, 2);
        let grid = ScoreGrid::new(
            Tensor::full(&[3, 1], -5.0),
            cands.spans.clone(),
            LabelSet::from_labels(["PER"]),
        );
        assert!(decode(&grid, &cands, 0.5, OverlapPolicy::FlatGreedy).is_empty());
        assert!(decode_without_threshold(&grid, &cands, -6.0, OverlapPolicy::None).len() == 3);
    }

    #[test]
    fn greedy_prefers_higher_probability() {
        // spans of n=2, L=2: (0,0), (0,1), (1,1)
        let cands = CandidateSpanSet::new(2, 2);
        let data = vec![logit(0.9), logit(0.6), -10.0];
        let grid = ScoreGrid::new(
            Tensor::new(vec![3, 1], data).unwrap(),
            cands.spans.clone(),
            LabelSet::from_labels(["PER"]),
        );
        let p = decode(&grid, &cands, 0.5, OverlapPolicy::FlatGreedy);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].span, Span::new(0, 0));
        assert_eq!(decode(&grid, &cands, 0.5, OverlapPolicy::None).len(), 2);
    }

    #[test]
    fn masked_candidates_never_predicted() {
        let cands = CandidateSpanSet::new(2, 1).with_mask(vec![false, true]);
        let grid = ScoreGrid::new(
            Tensor::full(&[2, 1], 5.0),
            cands.spans.clone(),
            LabelSet::from_labels(["X"]),
        );
        let p = decode(&grid, &cands, 0.5, OverlapPolicy::None);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].span, Span::new(1, 1));
    }

    #[test]
    fn tie_breaks() {
        let a = pred(2, 3, 0, 0.7);
        let b = pred(1, 4, 0, 0.7);
        let c = pred(1, 1, 1, 0.7);
        let d = pred(1, 1, 0, 0.7);
        let out = resolve_overlaps(vec![a, b, c, d], OverlapPolicy::None);
        assert_eq!(out, vec![d, c, b, a]);
    }

    #[test]
    fn f1_examples() {
        let gold = [gs(0, 0, 0), gs(2, 3, 1)];
        assert_eq!(micro_f1(&gold, &[pred(0, 0, 0, 0.9), pred(2, 3, 1, 0.8)]).f1, 1.0);
        let s = micro_f1(&gold, &[pred(0, 0, 0, 0.9), pred(1, 1, 0, 0.8)]);
        assert_eq!((s.tp, s.fp, s.fn_), (1, 1, 1));
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        let s = micro_f1(&[], &[]);
        assert_eq!(s.f1, 0.0);
        assert!(s.degenerate);
    }

    #[test]
    fn label_must_match() {
        let s = micro_f1(&[gs(0, 1, 0)], &[pred(0, 1, 1, 0.9)]);
        assert_eq!((s.tp, s.fp, s.fn_), (0, 1, 1));
    }

    fn piece(dataset: &str, language: &str, counts: Vec<Counts>) -> SplitPiece {
        SplitPiece {
            dataset: dataset.into(),
            language: language.into(),
            examples: 1,
            skipped: 0,
            counts,
        }
    }

    #[test]
    fn macro_is_mean_of_dataset_micro() {
        // F1 0.2: tp=1, fp=4, fn=4; F1 0.6: tp=3, fp=2, fn=2
        let pieces = [
            piece("a", "en", vec![Counts::new(1, 4, 4)]),
            piece("b", "en", vec![Counts::new(3, 2, 2)]),
        ];
        let r = aggregate(&pieces, &[0.5], &[]);
        assert!((r.macro_at(0.5).unwrap() - 0.4).abs() < 1e-12);
        let single = aggregate(&pieces[..1], &[0.5], &[]);
        assert_eq!(single.macro_at(0.5), single.datasets["a"].micro_f1.get("0.5").copied());
    }

    #[test]
    fn dataset_micro_pools_counts() {
        let small = Counts::new(10, 0, 0);
        let large = Counts::new(100, 450, 450);
        let r = aggregate(
            &[piece("d", "xx", vec![small]), piece("d", "yy", vec![large])],
            &[0.3],
            &[],
        );
        let pooled = small.merge(large).f1();
        let mean = (small.f1() + large.f1()) / 2.0;
        let got = r.datasets["d"].micro_f1["0.3"];
        assert_eq!(got, pooled);
        assert!((got - mean).abs() > 0.1);
    }

    #[test]
    fn missing_split_is_a_hole() {
        let r = aggregate(
            &[piece("d", "en", vec![Counts::new(1, 0, 0)])],
            &[0.5],
            &[("d".into(), "en".into()), ("d".into(), "sw".into())],
        );
        assert_eq!(r.holes, vec!["d/sw".to_string()]);
        assert_eq!(r.datasets["d"].languages["sw"], None);
        assert_eq!(r.macro_at(0.5), Some(1.0));
    }

    #[test]
    fn best_threshold_ties_go_low() {
        let pieces = [piece(
            "d",
            "en",
            vec![Counts::new(1, 1, 0), Counts::new(1, 1, 0), Counts::new(0, 0, 1)],
        )];
        let b = best_threshold_per_language(&pieces, &[0.3, 0.1, 0.5]).unwrap();
        assert_eq!(b.chosen["d"]["en"], "0.1");
        assert!(b.oracle_diagnostic);
    }

    #[test]
    fn report_json_shape() {
        let pieces = [piece("d", "en", vec![Counts::new(1, 0, 1)])];
        let mut r = aggregate(&pieces, &[0.05], &[]);
        r.best_per_language = best_threshold_per_language(&pieces, &[0.05]);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let s = &v["datasets"]["d"]["languages"]["en"]["thresholds"]["0.05"];
        assert_eq!(s["tp"], 1);
        assert_eq!(s["fn"], 1);
        assert!(v["macro_f1"]["0.05"].is_number());
        assert!(v["datasets"]["d"]["micro_f1"]["0.05"].is_number());
        let table = render_table(&r);
        assert!(table.contains("0.05"));
    }

    #[test]
    fn threshold_keys() {
        let k: Vec<String> = DEFAULT_THRESHOLDS.iter().map(|&t| threshold_key(t)).collect();
        assert_eq!(k, ["0.05", "0.1", "0.15", "0.2", "0.3", "0.4", "0.5"]);
    }
}
