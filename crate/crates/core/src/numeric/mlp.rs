use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{uniform_fan_in, NumericError, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Shape of a two-layer perceptron whose weights live in a [`ParamStore`]
/// under `{prefix}.w1`, `{prefix}.b1`, `{prefix}.w2`, `{prefix}.b2`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp2 {
    pub prefix: String,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
}

impl Mlp2 {
    pub fn new(prefix: impl Into<String>, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            prefix: prefix.into(),
            d_in,
            d_hidden,
            d_out,
        }
    }

    pub fn param_names(&self) -> [String; 4] {
        ["w1", "b1", "w2", "b2"].map(|s| format!("{}.{s}", self.prefix))
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let [w1, b1, w2, b2] = self.param_names();
        store.insert(w1, uniform_fan_in(rng, &[self.d_in, self.d_hidden], self.d_in));
        store.insert(b1, uniform_fan_in(rng, &[self.d_hidden], self.d_in));
        store.insert(w2, uniform_fan_in(rng, &[self.d_hidden, self.d_out], self.d_hidden));
        store.insert(b2, uniform_fan_in(rng, &[self.d_out], self.d_hidden));
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        activation: Activation,
    ) -> Result<Var, NumericError> {
        let [w1, b1, w2, b2] = self.param_names();
        let params = [
            tape.param(store, &w1)?,
            tape.param(store, &b1)?,
            tape.param(store, &w2)?,
            tape.param(store, &b2)?,
        ];
        mlp2_forward(tape, x, params, activation)
    }
}

/// `activation(x·W1 + b1)·W2 + b2` for already-recorded parameters
/// `[W1, b1, W2, b2]`.
pub fn mlp2_forward(
    tape: &mut Tape,
    x: Var,
    [w1, b1, w2, b2]: [Var; 4],
    activation: Activation,
) -> Result<Var, NumericError> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = match activation {
        Activation::Relu => tape.relu(h),
        Activation::Identity => h,
    };
    let o = tape.matmul(h, w2)?;
    tape.add_row(o, b2)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numeric::Tensor;

    fn run(store: &ParamStore, mlp: &Mlp2, x: Tensor, act: Activation) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = mlp.forward(&mut tape, store, xv, act).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let mlp = Mlp2::new("m", 3, 3, 3);
        let mut store = ParamStore::new();
        store.insert("m.w1", Tensor::identity(3));
        store.insert("m.w2", Tensor::identity(3));
        store.insert("m.b1", Tensor::zeros(&[3]));
        store.insert("m.b2", Tensor::zeros(&[3]));
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -7.0]).unwrap();
        assert_eq!(run(&store, &mlp, x.clone(), Activation::Identity), x);
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let mlp = Mlp2::new("m", 2, 4, 3);
        let mut store = ParamStore::new();
        store.insert("m.w1", Tensor::zeros(&[2, 4]));
        store.insert("m.w2", Tensor::zeros(&[4, 3]));
        store.insert("m.b1", Tensor::full(&[4], 0.3));
        store.insert("m.b2", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let x = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let y = run(&store, &mlp, x, Activation::Relu);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn relu_mlp_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp2::new("m", 4, 5, 2);
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut rng);
        let x = crate::numeric::uniform_fan_in(&mut rng, &[3, 4], 1);
        let y = run(&store, &mlp, x.clone(), Activation::Relu);

        let w1 = store.get("m.w1").unwrap();
        let b1 = store.get("m.b1").unwrap();
        let w2 = store.get("m.w2").unwrap();
        let b2 = store.get("m.b2").unwrap();
        for r in 0..3 {
            let mut hidden = [0.0; 5];
            for (h, slot) in hidden.iter_mut().enumerate() {
                let mut acc = b1.data()[h];
                for i in 0..4 {
                    acc += x.get(r, i) * w1.get(i, h);
                }
                *slot = if acc > 0.0 { acc } else { 0.0 };
            }
            for o in 0..2 {
                let mut acc = b2.data()[o];
                for (h, hv) in hidden.iter().enumerate() {
                    acc += hv * w2.get(h, o);
                }
                assert!((acc - y.get(r, o)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mlp = Mlp2::new("m", 4, 5, 2);
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            mlp.forward(&mut tape, &store, x, Activation::Relu),
            Err(NumericError::Dimension { .. })
        ));
    }
}
