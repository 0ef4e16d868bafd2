//! AdamW: Adam moments with weight decay applied to the parameter itself
//! rather than folded into the gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NumericError, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate overrides keyed by parameter-name prefix. The longest
    /// matching prefix wins.
    #[serde(default)]
    pub lr_overrides: BTreeMap<String, f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            lr_overrides: BTreeMap::new(),
        }
    }
}

impl AdamWConfig {
    pub fn lr_for(&self, name: &str) -> f64 {
        self.lr_overrides
            .iter()
            .filter(|(prefix, _)| name.starts_with(prefix.as_str()))
            .max_by_key(|(prefix, _)| prefix.len())
            .map_or(self.lr, |(_, &lr)| lr)
    }
}

/// Moment estimates and step counter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: OptimizerState::default(),
        }
    }

    /// Applies one update. Parameters without an entry in `grads` are left
    /// untouched. The whole step is rejected, and nothing mutated, if any
    /// gradient is non-finite or mis-shaped.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), NumericError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| NumericError::UnknownParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(NumericError::GradientShape {
                    name: name.clone(),
                    grad: g.shape().to_vec(),
                    param: p.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(NumericError::NonFiniteGradient(name.clone()));
            }
        }

        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for (name, g) in grads {
            let lr = self.config.lr_for(name);
            let m = self
                .state
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .state
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params
                .tensors_mut()
                .get_mut(name)
                .expect("checked above");
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *w);
            }
        }
        params.bump();
        Ok(())
    }
}
