//! Training objectives over (span, label) pairs.
//!
//! Each loss is recorded on a [`Tape`] so gradients flow back through the
//! heads and encoders. A loss over one example is returned as
//! [`LossParts`]: unreduced sums with their pair counts. Batches pool those
//! sums before dividing, so the batch loss is a mean over every
//! contributing pair in the batch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ScoreGrid;
use crate::numeric::{NumericError, Tape, Tensor, Var};
use crate::spans::CandidateSpanSet;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before any logarithm.
pub const EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Bce,
    BcePosWeight,
    Focal,
    Contrastive,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Bce,
        LossKind::BcePosWeight,
        LossKind::Focal,
        LossKind::Contrastive,
    ];
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("logit grid is {rows}x{cols} but candidates need {spans}x{labels}")]
    GridShape {
        rows: usize,
        cols: usize,
        spans: usize,
        labels: usize,
    },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight on positive pairs for `bce_pos_weight`.
    pub pos_weight: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub alpha_typing: f64,
    pub beta_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Bce,
            pos_weight: 10.0,
            alpha: 0.25,
            gamma: 0.0,
            alpha_typing: 0.55,
            beta_threshold: 0.5,
        }
    }
}

impl LossConfig {
    pub fn bce() -> Self {
        Self::default()
    }

    pub fn with_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: &str| Err(LossError::Config(m.to_string()));
        if !(self.pos_weight > 0.0) || !self.pos_weight.is_finite() {
            return bad("pos_weight must be a positive finite number");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad("gamma must be finite and >= 0");
        }
        if !(self.alpha_typing >= 0.0) || !(self.beta_threshold >= 0.0) {
            return bad("alpha_typing and beta_threshold must be >= 0");
        }
        Ok(())
    }
}

/// One weighted mean term before reduction: `weight * sum / count`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub weight: f64,
    pub sum: Var,
    pub count: usize,
}

/// Unreduced loss terms of one example. Term `i` of every example in a
/// batch has the same meaning, so terms pool position-wise.
#[derive(Clone, Debug, Default)]
pub struct LossParts {
    pub terms: Vec<LossTerm>,
}

/// Pools the terms of several examples and returns the scalar loss
/// `Σ_i weight_i · (Σ sums_i) / (Σ counts_i)`. A term with no contributing
/// pairs anywhere contributes 0.
pub fn reduce(tape: &mut Tape, parts: &[LossParts]) -> Result<Var, LossError> {
    let n_terms = parts.iter().map(|p| p.terms.len()).max().unwrap_or(0);
    let mut total = tape.constant(Tensor::scalar(0.0));
    for i in 0..n_terms {
        let mut sum: Option<Var> = None;
        let mut count = 0usize;
        let mut weight = 0.0;
        for p in parts {
            if let Some(term) = p.terms.get(i) {
                weight = term.weight;
                count += term.count;
                sum = Some(match sum {
                    None => term.sum,
                    Some(acc) => tape.add(acc, term.sum)?,
                });
            }
        }
        if let (Some(sum), true) = (sum, count > 0) {
            let mean = tape.scale(sum, weight / count as f64);
            total = tape.add(total, mean)?;
        }
    }
    Ok(total)
}

fn check_shape(tape: &Tape, logits: Var, cands: &CandidateSpanSet, n_labels: usize) -> Result<(), LossError> {
    let t = tape.value(logits);
    let (rows, cols) = if t.is_matrix() { (t.rows(), t.cols()) } else { (0, 0) };
    if !t.is_matrix() || rows != cands.len() || cols != n_labels {
        return Err(LossError::GridShape {
            rows,
            cols,
            spans: cands.len(),
            labels: n_labels,
        });
    }
    Ok(())
}

/// 0/1 targets and the contribution mask, flattened row-major.
fn targets(cands: &CandidateSpanSet, n_labels: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let mut y = vec![0.0; cands.len() * n_labels];
    let mut m = vec![0.0; cands.len() * n_labels];
    let mut count = 0;
    for i in 0..cands.len() {
        if !cands.mask[i] {
            continue;
        }
        for k in 0..n_labels {
            m[i * n_labels + k] = 1.0;
        }
        count += n_labels;
        for &k in &cands.gold[i] {
            if k < n_labels {
                y[i * n_labels + k] = 1.0;
            }
        }
    }
    (y, m, count)
}

fn clamped_prob(tape: &mut Tape, z: Var) -> Var {
    let p = tape.sigmoid(z);
    tape.clamp(p, EPS, 1.0 - EPS)
}

/// Σ over mask-true pairs of `−w⁺·y·ln p − (1−y)·ln(1−p)`.
fn bce_sum(
    tape: &mut Tape,
    logits: Var,
    cands: &CandidateSpanSet,
    n_labels: usize,
    pos_weight: f64,
) -> Result<(Var, usize), LossError> {
    let shape = tape.value(logits).shape().to_vec();
    let (y, m, count) = targets(cands, n_labels);
    let w_pos: Vec<f64> = y.iter().zip(&m).map(|(y, m)| -pos_weight * y * m).collect();
    let w_neg: Vec<f64> = y.iter().zip(&m).map(|(y, m)| -(1.0 - y) * m).collect();
    let p = clamped_prob(tape, logits);
    let q = tape.one_minus(p);
    let ln_p = tape.ln(p);
    let ln_q = tape.ln(q);
    let a = tape.mul_const(ln_p, Tensor::new(shape.clone(), w_pos)?)?;
    let b = tape.mul_const(ln_q, Tensor::new(shape, w_neg)?)?;
    let both = tape.add(a, b)?;
    Ok((tape.sum(both), count))
}

pub fn bce_parts(
    tape: &mut Tape,
    logits: Var,
    cands: &CandidateSpanSet,
    n_labels: usize,
    cfg: &LossConfig,
) -> Result<LossParts, LossError> {
    check_shape(tape, logits, cands, n_labels)?;
    let w = match cfg.kind {
        LossKind::BcePosWeight => cfg.pos_weight,
        _ => 1.0,
    };
    let (sum, count) = bce_sum(tape, logits, cands, n_labels, w)?;
    Ok(LossParts {
        terms: vec![LossTerm {
            weight: 1.0,
            sum,
            count,
        }],
    })
}

/// `−α_t (1 − p_t)^γ ln p_t` per pair, where `p_t = p` and `α_t = α` on
/// gold pairs, `p_t = 1 − p` and `α_t = 1 − α` elsewhere.
pub fn focal_parts(
    tape: &mut Tape,
    logits: Var,
    cands: &CandidateSpanSet,
    n_labels: usize,
    cfg: &LossConfig,
) -> Result<LossParts, LossError> {
    check_shape(tape, logits, cands, n_labels)?;
    let shape = tape.value(logits).shape().to_vec();
    let (y, m, count) = targets(cands, n_labels);
    let sign: Vec<f64> = y.iter().map(|y| 2.0 * y - 1.0).collect();
    let offset: Vec<f64> = y.iter().map(|y| 1.0 - y).collect();
    let coef: Vec<f64> = y
        .iter()
        .zip(&m)
        .map(|(y, m)| -m * (cfg.alpha * y + (1.0 - cfg.alpha) * (1.0 - y)))
        .collect();

    let p = clamped_prob(tape, logits);
    let signed = tape.mul_const(p, Tensor::new(shape.clone(), sign)?)?;
    let offset = tape.constant(Tensor::new(shape.clone(), offset)?);
    let pt = tape.add(signed, offset)?;
    let ln_pt = tape.ln(pt);
    let one_minus = tape.one_minus(pt);
    let modulator = tape.powf(one_minus, cfg.gamma);
    let per_pair = tape.mul(modulator, ln_pt)?;
    let weighted = tape.mul_const(per_pair, Tensor::new(shape, coef)?)?;
    Ok(LossParts {
        terms: vec![LossTerm {
            weight: 1.0,
            sum: tape.sum(weighted),
            count,
        }],
    })
}

/// Typing term plus thresholding term. The typing term contrasts each gold
/// pair against the mask-true spans of the same example that are not gold
/// for that label. The thresholding term is BCE on `z − θ`.
pub fn contrastive_parts(
    tape: &mut Tape,
    logits: Var,
    theta: Var,
    cands: &CandidateSpanSet,
    n_labels: usize,
    cfg: &LossConfig,
) -> Result<LossParts, LossError> {
    check_shape(tape, logits, cands, n_labels)?;
    let mut typing: Option<Var> = None;
    let mut n_gold = 0;
    for k in 0..n_labels {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for i in 0..cands.len() {
            if !cands.mask[i] {
                continue;
            }
            let flat = i * n_labels + k;
            if cands.gold[i].contains(&k) {
                positives.push(flat);
            } else {
                negatives.push(flat);
            }
        }
        for &pos in &positives {
            n_gold += 1;
            if negatives.is_empty() {
                continue;
            }
            let mut idx = Vec::with_capacity(negatives.len() + 1);
            idx.push(pos);
            idx.extend_from_slice(&negatives);
            let row = tape.gather(logits, &idx)?;
            let lse = tape.logsumexp(row)?;
            let zp = tape.gather(logits, &[pos])?;
            let zp = tape.sum(zp);
            let term = tape.sub(lse, zp)?;
            typing = Some(match typing {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    let typing = typing.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));

    let neg_theta = tape.scale(theta, -1.0);
    let shifted = tape.add_scalar_var(logits, neg_theta)?;
    let (thr, count) = bce_sum(tape, shifted, cands, n_labels, 1.0)?;
    Ok(LossParts {
        terms: vec![
            LossTerm {
                weight: cfg.alpha_typing,
                sum: typing,
                count: n_gold,
            },
            LossTerm {
                weight: cfg.beta_threshold,
                sum: thr,
                count,
            },
        ],
    })
}

/// Dispatches on `cfg.kind`. `theta` is only read by the contrastive loss.
pub fn loss_parts(
    tape: &mut Tape,
    logits: Var,
    theta: Var,
    cands: &CandidateSpanSet,
    n_labels: usize,
    cfg: &LossConfig,
) -> Result<LossParts, LossError> {
    match cfg.kind {
        LossKind::Bce | LossKind::BcePosWeight => bce_parts(tape, logits, cands, n_labels, cfg),
        LossKind::Focal => focal_parts(tape, logits, cands, n_labels, cfg),
        LossKind::Contrastive => contrastive_parts(tape, logits, theta, cands, n_labels, cfg),
    }
}

/// Loss value of a fixed grid, without gradients.
pub fn loss_value(
    grid: &ScoreGrid,
    cands: &CandidateSpanSet,
    cfg: &LossConfig,
    theta: f64,
) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let z = tape.constant(grid.logits.clone());
    let th = tape.constant(Tensor::scalar(theta));
    let parts = loss_parts(&mut tape, z, th, cands, grid.num_labels(), cfg)?;
    let total = reduce(&mut tape, &[parts])?;
    Ok(tape.value(total).item().unwrap_or(0.0))
}

pub fn bce_loss(grid: &ScoreGrid, cands: &CandidateSpanSet, cfg: &LossConfig) -> Result<f64, LossError> {
    let cfg = match cfg.kind {
        LossKind::BcePosWeight => cfg.clone(),
        _ => LossConfig {
            kind: LossKind::Bce,
            ..cfg.clone()
        },
    };
    loss_value(grid, cands, &cfg, 0.0)
}

pub fn focal_loss(grid: &ScoreGrid, cands: &CandidateSpanSet, cfg: &LossConfig) -> Result<f64, LossError> {
    let cfg = LossConfig {
        kind: LossKind::Focal,
        ..cfg.clone()
    };
    loss_value(grid, cands, &cfg, 0.0)
}

pub fn contrastive_loss(
    grid: &ScoreGrid,
    cands: &CandidateSpanSet,
    cfg: &LossConfig,
    theta: f64,
) -> Result<f64, LossError> {
    let cfg = LossConfig {
        kind: LossKind::Contrastive,
        ..cfg.clone()
    };
    loss_value(grid, cands, &cfg, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelSet;
    use crate::spans::{GoldSpan, Span};

    fn grid(rows: &[Vec<f64>]) -> ScoreGrid {
        let cols = rows.first().map_or(0, Vec::len);
        let labels = LabelSet::from_labels((0..cols).map(|i| format!("L{i}")));
        let spans = (0..rows.len()).map(|i| Span::new(i, i)).collect();
        ScoreGrid::new(Tensor::from_rows(rows).unwrap(), spans, labels)
    }

    /// Single-token candidates (max span length 1) with the given gold.
    fn cands(n: usize, gold: &[(usize, usize)]) -> CandidateSpanSet {
        let g: Vec<GoldSpan> = gold
            .iter()
            .map(|&(i, label)| GoldSpan {
                span: Span::new(i, i),
                label,
            })
            .collect();
        CandidateSpanSet::new(n, 1).with_gold(&g)
    }

    #[test]
    fn bce_symmetric_case() {
        let l = bce_loss(&grid(&[vec![0.0, 0.0]]), &cands(1, &[(0, 0)]), &LossConfig::bce()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_near_perfect_is_tiny() {
        let l = bce_loss(&grid(&[vec![60.0, -60.0]]), &cands(1, &[(0, 0)]), &LossConfig::bce()).unwrap();
        assert!(l >= 0.0 && l < 1e-11, "{l}");
    }

    #[test]
    fn pos_weight_on_single_positive() {
        let cfg = LossConfig {
            kind: LossKind::BcePosWeight,
            pos_weight: 10.0,
            ..LossConfig::default()
        };
        let l = bce_loss(&grid(&[vec![0.0]]), &cands(1, &[(0, 0)]), &cfg).unwrap();
        assert!((l - 10.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_gold_pair() {
        let z = (0.9f64 / 0.1).ln();
        let cfg = LossConfig {
            kind: LossKind::Focal,
            alpha: 0.5,
            gamma: 2.0,
            ..LossConfig::default()
        };
        let l = focal_loss(&grid(&[vec![z]]), &cands(1, &[(0, 0)]), &cfg).unwrap();
        let want = -0.5 * 0.01 * 0.9f64.ln();
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
        assert!((l - 5.268e-4).abs() < 1e-7);
    }

    #[test]
    fn contrastive_singleton_and_pair() {
        let cfg = LossConfig {
            kind: LossKind::Contrastive,
            alpha_typing: 1.0,
            beta_threshold: 0.0,
            ..LossConfig::default()
        };
        let l = contrastive_loss(&grid(&[vec![2.0]]), &cands(1, &[(0, 0)]), &cfg, 0.0).unwrap();
        assert_eq!(l, 0.0);

        let (zp, zn) = (1.5, -0.3);
        let l = contrastive_loss(&grid(&[vec![zp], vec![zn]]), &cands(2, &[(0, 0)]), &cfg, 0.0)
            .unwrap();
        let softplus = (1.0 + (zn - zp as f64).exp()).ln();
        assert!((l - softplus).abs() < 1e-12);
    }

    #[test]
    fn contrastive_threshold_only_is_shifted_bce() {
        let cfg = LossConfig {
            kind: LossKind::Contrastive,
            alpha_typing: 0.0,
            beta_threshold: 1.0,
            ..LossConfig::default()
        };
        let g = grid(&[vec![0.4, -1.0], vec![2.0, 0.3]]);
        let c = cands(2, &[(0, 1), (1, 0)]);
        let theta = 0.7;
        let l = contrastive_loss(&g, &c, &cfg, theta).unwrap();
        let shifted = grid(&[vec![0.4 - theta, -1.0 - theta], vec![2.0 - theta, 0.3 - theta]]);
        let b = bce_loss(&shifted, &c, &LossConfig::bce()).unwrap();
        assert!((l - b).abs() < 1e-12);
    }

    #[test]
    fn masked_pairs_contribute_nothing() {
        let g = grid(&[vec![0.3, -0.2], vec![5.0, 7.0]]);
        let c = cands(2, &[(0, 0)]).with_mask(vec![true, false]);
        let zeroed = grid(&[vec![0.3, -0.2], vec![0.0, 0.0]]);
        for kind in LossKind::ALL {
            let cfg = LossConfig::with_kind(kind);
            let a = loss_value(&g, &c, &cfg, 0.1).unwrap();
            let b = loss_value(&zeroed, &c, &cfg, 0.1).unwrap();
            assert_eq!(a, b, "{kind:?}");
        }
    }

    #[test]
    fn batch_pools_before_dividing() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![0.0], vec![0.0], vec![0.0]]).unwrap());
        let th = tape.constant(Tensor::scalar(0.0));
        let cfg = LossConfig::bce();
        let pa = loss_parts(&mut tape, a, th, &cands(1, &[(0, 0)]), 1, &cfg).unwrap();
        let pb = loss_parts(&mut tape, b, th, &cands(3, &[]), 1, &cfg).unwrap();
        let l = reduce(&mut tape, &[pa, pb]).unwrap();
        // four pairs, each at p = 0.5
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn empty_grid_is_zero() {
        let g = ScoreGrid::new(Tensor::zeros(&[0, 2]), vec![], LabelSet::from_labels(["a", "b"]));
        for kind in LossKind::ALL {
            let l = loss_value(&g, &CandidateSpanSet::new(0, 3), &LossConfig::with_kind(kind), 0.0)
                .unwrap();
            assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = [
            LossConfig { pos_weight: 0.0, ..LossConfig::default() },
            LossConfig { alpha: 1.5, ..LossConfig::default() },
            LossConfig { gamma: -1.0, ..LossConfig::default() },
            LossConfig { beta_threshold: -0.1, ..LossConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let g = grid(&[vec![0.0, 0.0]]);
        assert!(matches!(
            bce_loss(&g, &cands(2, &[]), &LossConfig::bce()),
            Err(LossError::GridShape { .. })
        ));
    }
}
