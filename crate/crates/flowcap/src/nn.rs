//! Multilayer perceptrons over a [`ParamStore`], plus the SGD optimizer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, ParamStore, Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => tensor::relu(x),
            Activation::Tanh => tensor::tanh(x),
        }
    }

    fn apply_on(&self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Fully connected network. Hidden layers use the activation; the output
/// layer is linear. Parameters live in an external [`ParamStore`] under
/// `{prefix}.l{i}.w` / `{prefix}.l{i}.b`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,
}

impl Mlp {
    pub fn new(prefix: &str, widths: &[usize], activation: Activation, bias: bool) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        Mlp {
            prefix: prefix.to_string(),
            widths: widths.to_vec(),
            activation,
            bias,
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{}.w", self.prefix, layer)
    }

    fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{}.b", self.prefix, layer)
    }

    /// Register parameters, initialized uniform in [-s, s] with
    /// s = 1/sqrt(fan_in).
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        for layer in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
            let s = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.range(-s, s)).collect();
            store.insert(
                &self.weight_name(layer),
                Tensor::new(vec![fan_out, fan_in], data).unwrap(),
            );
            if self.bias {
                let data: Vec<f64> = (0..fan_out).map(|_| rng.range(-s, s)).collect();
                store.insert(&self.bias_name(layer), Tensor::vector(&data));
            }
        }
    }

    /// Plain forward evaluation; `x` is a vector or a columns-as-samples batch.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in 0..self.layer_count() {
            let w = store.get(&self.weight_name(layer));
            h = if self.bias {
                tensor::affine(w, &h, store.get(&self.bias_name(layer)))?
            } else {
                tensor::matmul(w, &h)?
            };
            if layer + 1 < self.layer_count() {
                h = self.activation.apply(&h);
            }
        }
        Ok(h)
    }

    /// Forward pass recorded on a tape for gradient computation.
    pub fn forward_on(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in 0..self.layer_count() {
            let w = binding.var(&self.weight_name(layer));
            h = if self.bias {
                tape.affine(w, h, binding.var(&self.bias_name(layer)))?
            } else {
                tape.matmul(w, h)?
            };
            if layer + 1 < self.layer_count() {
                h = self.activation.apply_on(tape, h);
            }
        }
        Ok(h)
    }

    /// Weight matrix names, layer by layer.
    pub fn weight_names(&self) -> Vec<String> {
        (0..self.layer_count()).map(|l| self.weight_name(l)).collect()
    }
}

/// SGD with classical momentum: v <- m*v + g; p <- p - lr*v.
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        SgdMomentum {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        if self.velocity.is_empty() {
            self.velocity = store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect();
        }
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let grad = store.grad(name).clone();
            let v = &mut self.velocity[i];
            for (vv, g) in v.data_mut().iter_mut().zip(grad.data()) {
                *vv = self.momentum * *vv + g;
            }
            let lr = self.learning_rate;
            let v_snapshot = v.clone();
            let p = store.get_mut(name);
            for (pv, vv) in p.data_mut().iter_mut().zip(v_snapshot.data()) {
                *pv -= lr * vv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_gradient;

    #[test]
    fn init_respects_fan_in_bound() {
        let mlp = Mlp::new("net", &[9, 4, 2], Activation::Tanh, true);
        let mut store = ParamStore::new();
        mlp.init_params(&mut store, &mut Rng::new(5));
        let w0 = store.get("net.l0.w");
        let bound = 1.0 / 3.0;
        assert!(w0.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(w0.shape(), &[4, 9]);
    }

    #[test]
    fn eval_and_tape_forward_agree() {
        let mlp = Mlp::new("net", &[3, 5, 2], Activation::Relu, true);
        let mut store = ParamStore::new();
        mlp.init_params(&mut store, &mut Rng::new(8));
        let x = Tensor::vector(&[0.5, -1.0, 2.0]);

        let direct = mlp.eval(&store, &x).unwrap();
        let mut tape = Tape::new();
        let binding = tape.bind(&store);
        let xv = tape.leaf(x);
        let out = mlp.forward_on(&mut tape, &binding, xv).unwrap();
        assert_eq!(tape.value(out), &direct);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mlp = Mlp::new("net", &[2, 6, 6, 1], Activation::Tanh, true);
        let mut store = ParamStore::new();
        mlp.init_params(&mut store, &mut Rng::new(21));
        let x = Tensor::vector(&[0.4, -0.9]);
        let y = Tensor::vector(&[0.7]);

        let mut tape = Tape::new();
        let binding = tape.bind(&store);
        let xv = tape.leaf(x.clone());
        let yv = tape.leaf(y.clone());
        let out = mlp.forward_on(&mut tape, &binding, xv).unwrap();
        let loss = tape.mse(out, yv).unwrap();
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&binding, &grads);
        let analytic = store.flatten_grads();

        let numeric = finite_difference_gradient(
            |s| {
                let pred = mlp.eval(s, &x)?;
                Ok(tensor::mse(&pred, &y)?.item())
            },
            &mut store,
            1e-5,
        )
        .unwrap();

        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel <= 1e-6, "{a:e} vs {n:e}");
        }
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(&[1.0]));
        let mut opt = SgdMomentum::new(0.1, 0.0);
        // Pretend the gradient is +2.
        let mut tape = Tape::new();
        let binding = tape.bind(&store);
        let two = tape.leaf(Tensor::scalar(2.0));
        let prod = tape.mul(binding.var("w"), two).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&binding, &grads);
        opt.step(&mut store);
        assert!((store.get("w").data()[0] - 0.8).abs() < 1e-12);
    }
}
