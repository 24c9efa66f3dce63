//! Value-level numeric kernels shared by the autodiff tape and the eval paths.

use crate::error::{shape_err, Error, Result};
use crate::numcore::Tensor;

/// Operand orientation for [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orient {
    Normal,
    Transposed,
}

/// `c = beta * c + op(a) * op(b)` on row-major buffers.
///
/// `a` is stored `m×k` (or `k×m` when transposed), `b` is stored `k×n` (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: Orient,
    b: &[f64],
    tb: Orient,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Orient::Normal => (k as isize, 1),
        Orient::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Orient::Normal => (n as isize, 1),
        Orient::Transposed => (1, k as isize),
    };
    // SAFETY: strides above address exactly the m×k, k×n and m×n extents whose
    // lengths are asserted against the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of `a: m×k` and `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!("matmul inner dimensions {m}x{k} · {k2}x{n}"));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, a.data(), Orient::Normal, b.data(), Orient::Normal, 0.0, out.data_mut());
    Ok(out)
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax of a matrix, stabilized by subtracting each row's maximum.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, _) = x.dims2()?;
    x.check_finite("softmax_rows input")?;
    let mut out = x.clone();
    for i in 0..r {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| gelu_scalar(x.data()[i]))
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let weights = vec![1.0; targets.len()];
    weighted_cross_entropy(logits, targets, &weights)
}

/// Cross entropy averaged with per-row weights (0 masks a row out).
pub fn weighted_cross_entropy(logits: &Tensor, targets: &[usize], weights: &[f64]) -> Result<f64> {
    let (n, v) = logits.dims2()?;
    if targets.len() != n || weights.len() != n {
        return Err(shape_err!("{} targets / {} weights for {n} logit rows", targets.len(), weights.len()));
    }
    let total_w: f64 = weights.iter().sum();
    if total_w <= 0.0 {
        return Err(Error::Empty("cross entropy over an empty mask".into()));
    }
    let mut loss = 0.0;
    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        if t >= v {
            return Err(Error::Index(format!("target {t} outside vocabulary of {v}")));
        }
        if w == 0.0 {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += w * (lse - row[t]);
    }
    let loss = loss / total_w;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy".into()));
    }
    Ok(loss)
}
