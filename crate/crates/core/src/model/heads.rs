//! Start/end/label projections, width embeddings, span representations
//! and span–label logits.
//!
//! ```text
//! S = MLP_start(H_X)        E = MLP_end(H_X)        Q = MLP_label(H_Y)
//! k(i,j) = MLP_span(S[i] ++ E[j] ++ D[j - i])
//! logit(i,j,n) = k(i,j) · Q[n]
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numeric::{uniform_fan_in, Activation, Mlp2, ParamStore, Tape, Tensor, Var};
use crate::spans::CandidateSpanSet;

pub const THRESHOLD_PARAM: &str = "head.threshold";
pub const WIDTH_PARAM: &str = "head.width";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadParams {
    pub d_model: usize,
    pub d_hidden: usize,
    pub d_mlp: usize,
    pub d_width: usize,
    pub max_span_len: usize,
    pub activation: Activation,
}

impl HeadParams {
    pub fn start(&self) -> Mlp2 {
        Mlp2::new("head.start", self.d_model, self.d_hidden, self.d_mlp)
    }

    pub fn end(&self) -> Mlp2 {
        Mlp2::new("head.end", self.d_model, self.d_hidden, self.d_mlp)
    }

    pub fn label(&self) -> Mlp2 {
        Mlp2::new("head.label", self.d_model, self.d_hidden, self.d_mlp)
    }

    pub fn span(&self) -> Mlp2 {
        Mlp2::new(
            "head.span",
            2 * self.d_mlp + self.d_width,
            self.d_hidden,
            self.d_mlp,
        )
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for mlp in [self.start(), self.end(), self.label(), self.span()] {
            mlp.init(store, rng);
        }
        store.insert(
            WIDTH_PARAM,
            uniform_fan_in(rng, &[self.max_span_len, self.d_width], self.d_width),
        );
        store.insert(THRESHOLD_PARAM, Tensor::new(vec![1], vec![0.0]).expect("shape"));
    }

    /// `Q = MLP_label(H_Y)`.
    pub fn project_labels(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        hy: Var,
    ) -> Result<Var, ModelError> {
        Ok(self.label().forward(tape, params, hy, self.activation)?)
    }

    /// One row `k(i,j)` per candidate, in candidate order.
    pub fn span_representations(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        hx: Var,
        candidates: &CandidateSpanSet,
    ) -> Result<Var, ModelError> {
        let n_rows = tape.value(hx).rows();
        if candidates.n_tokens > n_rows {
            return Err(ModelError::HiddenRows {
                needed: candidates.n_tokens,
                got: n_rows,
            });
        }
        let mut starts = Vec::with_capacity(candidates.len());
        let mut ends = Vec::with_capacity(candidates.len());
        let mut widths = Vec::with_capacity(candidates.len());
        for s in &candidates.spans {
            if s.width() >= self.max_span_len {
                return Err(ModelError::WidthOutOfRange {
                    width: s.width(),
                    max_span_len: self.max_span_len,
                });
            }
            starts.push(s.start);
            ends.push(s.end);
            widths.push(s.width());
        }
        let s = self.start().forward(tape, params, hx, self.activation)?;
        let e = self.end().forward(tape, params, hx, self.activation)?;
        let table = tape.param(params, WIDTH_PARAM)?;
        let s_rows = tape.gather_rows(s, &starts)?;
        let e_rows = tape.gather_rows(e, &ends)?;
        let w_rows = tape.gather_rows(table, &widths)?;
        let cat = tape.concat_cols(&[s_rows, e_rows, w_rows])?;
        Ok(self.span().forward(tape, params, cat, self.activation)?)
    }

    /// `[candidates, labels]` logits from span representations and
    /// projected labels.
    pub fn logits_from(
        &self,
        tape: &mut Tape,
        keys: Var,
        label_proj: Var,
    ) -> Result<Var, ModelError> {
        let qt = tape.transpose(label_proj)?;
        Ok(tape.matmul(keys, qt)?)
    }

    pub fn span_logits(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        hx: Var,
        hy: Var,
        candidates: &CandidateSpanSet,
    ) -> Result<Var, ModelError> {
        let keys = self.span_representations(tape, params, hx, candidates)?;
        let q = self.project_labels(tape, params, hy)?;
        self.logits_from(tape, keys, q)
    }
}
