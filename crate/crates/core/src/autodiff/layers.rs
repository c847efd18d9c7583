use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::tensor::{add_row, matmul_t, relu, sigmoid, Tensor};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, t: Tensor) -> Tensor {
        match self {
            Activation::Relu => t.map(relu),
            Activation::Sigmoid => t.map(sigmoid),
            Activation::Identity => t,
        }
    }
}

/// Affine layer `activation(W·x + b)` whose weight `[out×in]` and bias
/// `[out]` live in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub inputs: usize,
    pub outputs: usize,
}

impl DenseLayer {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{prefix}.weight"), &[outputs, inputs], inputs, rng);
        let bias = store.add_uniform(format!("{prefix}.bias"), &[outputs], inputs, rng);
        DenseLayer {
            weight,
            bias,
            activation,
            inputs,
            outputs,
        }
    }

    /// Rebinds a layer to parameters already present in `store` under `prefix`.
    pub fn bind(store: &ParamStore, prefix: &str, activation: Activation) -> Result<Self> {
        let weight = store
            .id(&format!("{prefix}.weight"))
            .ok_or_else(|| crate::Error::Format(format!("missing {prefix}.weight")))?;
        let bias = store
            .id(&format!("{prefix}.bias"))
            .ok_or_else(|| crate::Error::Format(format!("missing {prefix}.bias")))?;
        let w = store.value(weight);
        if w.shape().len() != 2 || store.value(bias).len() != w.rows() {
            return Err(crate::Error::Shape(format!("{prefix}: weight {:?} / bias {:?}", w.shape(), store.value(bias).shape())));
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
            inputs: w.cols(),
            outputs: w.rows(),
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: NodeId) -> Result<NodeId> {
        forward_on_tape(self, tape, store, x, false)
    }

    /// Inference path: no tape.
    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        forward_dense(self, store, x)
    }
}

fn forward_on_tape<'a>(layer: &DenseLayer, tape: &mut Tape<'a>, store: &'a ParamStore, x: NodeId, frozen: bool) -> Result<NodeId> {
    let (w, b) = if frozen {
        (tape.frozen_param(store, layer.weight), tape.frozen_param(store, layer.bias))
    } else {
        (tape.param(store, layer.weight), tape.param(store, layer.bias))
    };
    let z = tape.matmul_t(x, w)?;
    let z = tape.add_row(z, b)?;
    Ok(match layer.activation {
        Activation::Relu => tape.relu(z),
        Activation::Sigmoid => tape.sigmoid(z),
        Activation::Identity => z,
    })
}

/// `activation(x·Wᵀ + b)` for a batch of rows `x`.
pub fn forward_dense(layer: &DenseLayer, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let z = matmul_t(x, store.value(layer.weight))?;
    let z = add_row(&z, store.value(layer.bias))?;
    Ok(layer.activation.apply(z))
}

/// A stack of dense layers sharing one store.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert_eq!(dims.len(), activations.len() + 1);
        let layers = dims
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(i, (d, &act))| DenseLayer::init(store, &format!("{prefix}.l{i}"), d[0], d[1], act, rng))
            .collect();
        Mlp { layers }
    }

    pub fn bind(store: &ParamStore, prefix: &str, activations: &[Activation]) -> Result<Self> {
        let layers = activations
            .iter()
            .enumerate()
            .map(|(i, &act)| DenseLayer::bind(store, &format!("{prefix}.l{i}"), act))
            .collect::<Result<Vec<_>>>()?;
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(crate::Error::Shape(format!("{prefix}: layer widths {} -> {}", pair[0].outputs, pair[1].inputs)));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, mut x: NodeId) -> Result<NodeId> {
        for l in &self.layers {
            x = forward_on_tape(l, tape, store, x, false)?;
        }
        Ok(x)
    }

    /// Same as `forward` but the parameters are read as constants.
    pub fn forward_frozen<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, mut x: NodeId) -> Result<NodeId> {
        for l in &self.layers {
            x = forward_on_tape(l, tape, store, x, true)?;
        }
        Ok(x)
    }

    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = forward_dense(&self.layers[0], store, x)?;
        for l in &self.layers[1..] {
            h = forward_dense(l, store, &h)?;
        }
        Ok(h)
    }
}
