//! Mean-embedding alignment between source and target features.

use crate::error::{Error, Result};
use crate::nn::{Mlp, Parameters, Projection};
use crate::numcore::{Graph, Tensor, Var};
use crate::rng::Rng;

/// `f_p`, a `D → D/2 → d_align` MLP or the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentHead {
    pub projection: Projection,
}

impl AlignmentHead {
    pub fn new(embed_dim: usize, align_dim: usize, rng: &mut Rng) -> Self {
        Self {
            projection: Projection::Mlp(Mlp::new(embed_dim, (embed_dim / 2).max(1), align_dim, rng)),
        }
    }

    pub fn identity() -> Self {
        Self {
            projection: Projection::Identity,
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        self.projection.forward(g, vars, x)
    }
}

impl Parameters for AlignmentHead {
    fn params(&self) -> Vec<&Tensor> {
        self.projection.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.projection.params_mut()
    }
}

/// `‖mean(f_p(hˢ)) − mean(f_p(hᵗ))‖²` on a graph.
pub fn dapa_loss(g: &mut Graph, source: Var, target: Var, head: &AlignmentHead, head_vars: &[Var]) -> Result<Var> {
    let (ss, ts) = (g.shape(source).to_vec(), g.shape(target).to_vec());
    if ss.len() != 2 || ts.len() != 2 || ss[1] != ts[1] {
        return Err(Error::dim("dapa", &ss, &ts));
    }
    let fs = head.forward(g, head_vars, source)?;
    let ft = head.forward(g, head_vars, target)?;
    let ms = g.mean_rows(fs)?;
    let mt = g.mean_rows(ft)?;
    let diff = g.sub(ms, mt)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.sum(sq))
}

/// Value-only form of [`dapa_loss`].
pub fn dapa_value(source: &Tensor, target: &Tensor, head: &AlignmentHead) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = head.params().into_iter().map(|t| g.constant(t)).collect();
    let (s, t) = (g.constant(source), g.constant(target));
    let l = dapa_loss(&mut g, s, t, head, &vars)?;
    Ok(g.scalar(l))
}

/// Biased MMD² by explicit kernel double sums.
pub fn mmd_kernel_oracle(xs: &Tensor, ys: &Tensor, kernel: &str) -> Result<f64> {
    if kernel != "linear" {
        return Err(Error::Config(format!("unsupported kernel '{kernel}', only 'linear' is available")));
    }
    if xs.cols() != ys.cols() {
        return Err(Error::dim("mmd", xs.shape(), ys.shape()));
    }
    let k = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let double_sum = |a: &Tensor, b: &Tensor| {
        let mut s = 0.0;
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                s += k(a.row(i), b.row(j));
            }
        }
        s / (a.rows() * b.rows()) as f64
    };
    Ok(double_sum(xs, xs) + double_sum(ys, ys) - 2.0 * double_sum(xs, ys))
}

/// Linear MMD of two feature sets: squared distance of their row means.
pub fn linear_mmd(xs: &Tensor, ys: &Tensor) -> Result<f64> {
    dapa_value(xs, ys, &AlignmentHead::identity())
}
