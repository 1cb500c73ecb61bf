use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, ParamId, ParamKind, ParamStore, Var};
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

/// Affine map `x W + b` followed by an activation. Rows of `x` are samples.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((in_dim, out_dim), || rng.random_range(-limit..limit));
        Self::from_weights(
            store,
            name,
            w,
            with_bias.then(|| Array2::zeros((1, out_dim))),
            activation,
        )
    }

    pub fn from_weights(
        store: &mut ParamStore,
        name: &str,
        weight: Array2<f64>,
        bias: Option<Array2<f64>>,
        activation: Activation,
    ) -> Self {
        let (in_dim, out_dim) = weight.dim();
        let weight = store.add(format!("{name}.w"), weight, ParamKind::Euclidean);
        let bias = bias.map(|b| store.add(format!("{name}.b"), b, ParamKind::Euclidean));
        Self {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.shape(x).1 != self.in_dim {
            return Err(contract(format!(
                "dense layer expects {} input columns, got {}",
                self.in_dim,
                g.shape(x).1
            )));
        }
        let w = g.param(store, self.weight);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = g.param(store, b);
            y = g.add(y, b)?;
        }
        Ok(match self.activation {
            Activation::Identity => y,
            Activation::Tanh => g.tanh(y),
            Activation::Relu => g.relu(y),
        })
    }
}

/// A stack of dense layers; hidden layers share one activation and the last
/// layer is linear.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden_activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last {
                    Activation::Identity
                } else {
                    hidden_activation
                };
                DenseLayer::new(store, &format!("{name}.{i}"), w[0], w[1], act, true, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(DenseLayer::params).collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, layer| layer.forward(g, store, h))
    }

    /// Zeroes every weight and bias, making the network output identically 0.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in self.params() {
            store.get_mut(id).fill(0.0);
        }
    }
}
