//! Dense `f64` tensors with reverse-mode differentiation.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Elementwise, Gradients, Graph, Var};
pub use tensor::Tensor;

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut shifted = x.to_vec();
    (0..x.len())
        .map(|i| {
            shifted[i] = x[i] + h;
            let up = f(&shifted);
            shifted[i] = x[i] - h;
            let down = f(&shifted);
            shifted[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Element-wise relative error `|a−b| / max(|a|, |b|, floor)`, maximised.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests;
