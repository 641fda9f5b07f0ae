//! Small layer building blocks over a [`ParamStore`].

use rand::Rng;

use super::graph::Var;
use super::params::{Bound, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x W + b` over the trailing dimension of `x`.
pub fn linear<'g>(x: Var<'g>, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.len() != 2 || xs.last() != Some(&ws[0]) || b.shape() != [ws[1]] {
        return Err(crate::Error::dim(format!(
            "linear x {xs:?} W {ws:?} b {:?}",
            b.shape()
        )));
    }
    let y = if xs.len() == 1 {
        x.reshape(&[1, ws[0]])?.matmul(&w)?.reshape(&[ws[1]])?
    } else {
        x.matmul(&w)?
    };
    y.try_add(&b)
}

/// Xavier-uniform bound for a `fan_in x fan_out` matrix.
fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("shape")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, din, dout));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Linear { w, b, din, dout }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[din, dout]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Linear { w, b, din, dout }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        linear(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(&p.var(self.gamma), &p.var(self.beta), LAYER_NORM_EPS)
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn last(&self) -> Linear {
        *self.layers.last().expect("non-empty mlp")
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, mut x: Var<'g>) -> Result<Var<'g>> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(p, x)?;
            if i + 1 < self.layers.len() {
                x = x.relu();
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Graph;

    #[test]
    fn linear_identity() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 0.0]));
        let w = g.constant(Tensor::eye(2));
        let b = g.constant(Tensor::zeros(&[2]));
        assert_eq!(linear(x, w, b).unwrap().data(), vec![1.0, 0.0]);
    }

    #[test]
    fn linear_hand_arithmetic() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 1.0]));
        let w = g.constant(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap());
        let b = g.constant(Tensor::vector(&[1.0, 1.0]));
        assert_eq!(linear(x, w, b).unwrap().data(), vec![3.0, 4.0]);
    }

    #[test]
    fn linear_rejects_mismatch() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 1.0, 1.0]));
        let w = g.constant(Tensor::eye(2));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(linear(x, w, b), Err(crate::Error::Dimension(_))));
    }
}
