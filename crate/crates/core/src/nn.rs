//! Small building blocks shared by the trainable heads.

use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numcore::{Gradients, Graph, Tensor, Var};
use crate::rng::Rng;

/// Seeded normal initialisation, resampling anything beyond two standard
/// deviations.
pub fn truncated_normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Anything holding an ordered list of tensors.
pub trait Parameters {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|t| g.leaf(t)).collect()
    }

    fn accumulate(&mut self, vars: &[Var], grads: &Gradients) {
        for (t, &v) in self.params_mut().into_iter().zip(vars) {
            grads.accumulate_into(v, t);
        }
    }

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    fn set_trainable(&mut self, on: bool) {
        self.params_mut()
            .into_iter()
            .for_each(|t| t.set_requires_grad(on));
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }
}

/// Two-layer perceptron `in → hidden → out` with GELU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            w1: truncated_normal(rng, &[input, hidden], (1.0 / input as f64).sqrt()).into_param(),
            b1: Tensor::zeros(&[1, hidden]).into_param(),
            w2: truncated_normal(rng, &[hidden, output], (1.0 / hidden as f64).sqrt())
                .into_param(),
            b2: Tensor::zeros(&[1, output]).into_param(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    /// Forward pass over the rows of `x`, with the bound parameter vars.
    pub fn forward(g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let h = g.matmul(x, vars[0])?;
        let h = g.add_row(h, vars[1])?;
        let h = g.gelu(h);
        let o = g.matmul(h, vars[2])?;
        g.add_row(o, vars[3])
    }

    /// Graph-free evaluation.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params().into_iter().map(|t| g.constant(t)).collect();
        let xv = g.constant(x);
        let y = Self::forward(&mut g, &vars, xv)?;
        Ok(g.to_tensor(y))
    }
}

impl Parameters for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// A projection head that is either a trainable MLP or the identity map.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Identity,
    Mlp(Mlp),
}

impl Projection {
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        match self {
            Projection::Identity => Ok(x),
            Projection::Mlp(_) => Mlp::forward(g, vars, x),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Projection::Identity => Ok(x.clone()),
            Projection::Mlp(m) => m.apply(x),
        }
    }
}

impl Parameters for Projection {
    fn params(&self) -> Vec<&Tensor> {
        match self {
            Projection::Identity => Vec::new(),
            Projection::Mlp(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Projection::Identity => Vec::new(),
            Projection::Mlp(m) => m.params_mut(),
        }
    }
}
