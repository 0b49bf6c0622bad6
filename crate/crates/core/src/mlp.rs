//! Small fully connected networks (relu hidden layers, linear output)
//! with plain and taped forward passes.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::Result;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// One weight matrix per layer, `in_dim x out_dim`.
    pub weights: Vec<Tensor>,
    /// One bias row per layer, `1 x out_dim`.
    pub biases: Vec<Tensor>,
}

impl Mlp {
    /// Xavier-initialised network with the given layer widths, e.g.
    /// `[8, 16, 4]` for one hidden layer.
    pub fn new<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let std = (2.0 / (w[0] + w[1]) as f64).sqrt();
            weights.push(Tensor::randn(w[0], w[1], std, rng));
            biases.push(Tensor::zeros(1, w[1]));
        }
        Mlp { weights, biases }
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].rows
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().unwrap().cols
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Plain forward pass on a row vector.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim());
        let mut h = x.to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut out = b.data.clone();
            for (i, &hi) in h.iter().enumerate() {
                if hi == 0.0 {
                    continue;
                }
                for (o, &wij) in out.iter_mut().zip(w.row(i)) {
                    *o += hi * wij;
                }
            }
            if l + 1 < self.weights.len() {
                for o in out.iter_mut() {
                    *o = o.max(0.0);
                }
            }
            h = out;
        }
        h
    }

    /// Inserts the parameters as leaves on a tape; call once per episode.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }
}

/// Tape-resident MLP parameters.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.weights.len() - 1;
        for (l, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let lin = tape.matmul(h, w)?;
            let lin = tape.add(lin, b)?;
            h = if l < last { tape.relu(lin)? } else { lin };
        }
        Ok(h)
    }
}
