use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

use super::layers::Conv2d;
use super::params::{Bound, ParameterStore};

/// Stacked convolutional LSTM. Each layer computes its four gates (input, forget,
/// output, candidate, in that channel order) with one 3x3 convolution over
/// `concat(x, h)` and starts from a zero state.
#[derive(Clone, Debug)]
pub struct ConvLstm {
    gates: Vec<Conv2d>,
    pub input_channels: usize,
    pub hidden: usize,
}

impl ConvLstm {
    pub fn new<T: Float>(
        store: &mut ParameterStore<T>,
        rng: &mut Rng,
        name: &str,
        input_channels: usize,
        hidden: usize,
        layers: usize,
    ) -> Self {
        assert!(layers >= 1, "cLSTM needs at least one layer");
        let gates = (0..layers)
            .map(|l| {
                let cin = if l == 0 { input_channels } else { hidden };
                Conv2d::new(store, rng, &format!("{name}.layer{l}.gates"), cin + hidden, 4 * hidden, 3, 1)
            })
            .collect();
        Self {
            gates,
            input_channels,
            hidden,
        }
    }

    pub fn layers(&self) -> usize {
        self.gates.len()
    }

    /// Runs the sequence in order and returns the top layer's last hidden state
    /// `[hidden, H, W]`.
    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, '_, T>, sequence: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = sequence
            .first()
            .ok_or_else(|| Error::InvalidArgument("cLSTM over an empty sequence".into()))?;
        let shape = first.shape();
        for s in sequence {
            if s.shape() != shape {
                return Err(Error::Shape(format!(
                    "cLSTM sequence element {:?} differs from {:?}",
                    s.shape(),
                    shape
                )));
            }
        }
        if shape[0] != self.input_channels {
            return Err(Error::Shape(format!(
                "cLSTM expects {} input channels, got {}",
                self.input_channels, shape[0]
            )));
        }
        let graph = p.graph();
        let (h, w) = (shape[1], shape[2]);
        let zero = graph.constant(Tensor::zeros(&[self.hidden, h, w]));
        let mut hidden = vec![zero; self.gates.len()];
        let mut cell = vec![zero; self.gates.len()];
        let n = self.hidden;
        for &x in sequence {
            let mut input = x;
            for (l, conv) in self.gates.iter().enumerate() {
                let z = conv.forward(p, Var::concat(&[input, hidden[l]]));
                let i = z.narrow(0, n).sigmoid();
                let f = z.narrow(n, n).sigmoid();
                let o = z.narrow(2 * n, n).sigmoid();
                let g = z.narrow(3 * n, n).tanh();
                cell[l] = f * cell[l] + i * g;
                hidden[l] = o * cell[l].tanh();
                input = hidden[l];
            }
        }
        Ok(*hidden.last().expect("at least one layer"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::nn::params::Bound;

    fn toy(layers: usize) -> (ParameterStore<f64>, ConvLstm) {
        let mut store = ParameterStore::new();
        let mut rng = Rng::new(3, 1);
        let lstm = ConvLstm::new(&mut store, &mut rng, "lstm", 2, 2, layers);
        // non-zero biases so the bias gradients are exercised away from symmetric points
        let mut r = Rng::new(4, 1);
        for (name, t) in store.iter_mut() {
            if name.ends_with("bias") {
                for v in t.data_mut() {
                    *v = 0.3 * r.normal();
                }
            }
        }
        (store, lstm)
    }

    fn inputs(n: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut r = Rng::new(seed, 9);
        (0..n).map(|_| Tensor::new(&[2, 4, 4], r.normals(32))).collect()
    }

    #[test]
    fn single_step_equals_one_cell_update() {
        let (store, lstm) = toy(1);
        let x = inputs(1, 1).remove(0);
        let g = Graph::new();
        let p = Bound::frozen(&g, &store);
        let out = lstm.forward(&p, &[g.constant(x.clone())]).unwrap().value();
        // from zero state: c = i*g, h = o*tanh(c)
        let g2 = Graph::new();
        let p2 = Bound::frozen(&g2, &store);
        let cat = Var::concat(&[g2.constant(x), g2.constant(Tensor::zeros(&[2, 4, 4]))]);
        let z = cat
            .conv2d(p2.var("lstm.layer0.gates.weight"), Some(p2.var("lstm.layer0.gates.bias")), 1, 1)
            .value();
        let n = 32;
        for k in 0..n {
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let c = sig(z.data()[k]) * z.data()[3 * n + k].tanh();
            let h = sig(z.data()[2 * n + k]) * c.tanh();
            assert!((out.data()[k] - h).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let (store, lstm) = toy(2);
        let xs = inputs(3, 2);
        let report = crate::nn::params::check_store_gradients(&store, |g, p| {
            let seq: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
            lstm.forward(p, &seq).unwrap().sum()
        });
        let err = report.worst;
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn order_matters() {
        let (store, lstm) = toy(2);
        let xs = inputs(3, 5);
        let run = |order: &[usize]| {
            let g = Graph::new();
            let p = Bound::frozen(&g, &store);
            let seq: Vec<_> = order.iter().map(|&i| g.constant(xs[i].clone())).collect();
            lstm.forward(&p, &seq).unwrap().value().to_f64_vec()
        };
        assert_ne!(run(&[0, 1, 2]), run(&[2, 0, 1]));
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let (store, lstm) = toy(1);
        let g = Graph::new();
        let p = Bound::frozen(&g, &store);
        assert!(lstm.forward(&p, &[]).is_err());
    }
}
