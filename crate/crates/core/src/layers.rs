//! Small parameterized building blocks.

use crate::error::Result;
use crate::numeric::{Real, Tensor, Var};
use crate::params::{Bound, Init, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = init.xavier([d_out, d_in], d_in, d_out);
        Self::from_tensors(store, name, w, Tensor::zeros([d_out]))
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::from_tensors(store, name, Tensor::zeros([d_out, d_in]), Tensor::zeros([d_out]))
    }

    pub fn from_tensors(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Self {
        let (d_out, d_in) = (weight.shape()[0], weight.shape()[1]);
        Linear {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), bias),
            d_in,
            d_out,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(p.var(self.weight), Some(p.var(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: Real = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([width])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([width])),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// Linear layers with relu between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, init, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("empty mlp")
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(p, x)?;
            if i + 1 < self.layers.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}
