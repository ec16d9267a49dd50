use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Strided matrix view: `(data, row_stride, col_stride)`.
pub(crate) type View<'a> = (&'a [f64], isize, isize);

pub(crate) fn row_major(data: &[f64], cols: usize) -> View<'_> {
    (data, cols as isize, 1)
}

pub(crate) fn transposed(data: &[f64], cols: usize) -> View<'_> {
    (data, 1, cols as isize)
}

/// `c = a·b + beta·c`, `a` is m×k, `b` is k×n, `c` row-major m×n.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views and strides describe in-bounds m×k, k×n and m×n
    // matrices; callers construct them from slices of matching length.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
