use super::tensor::{gemm, Layout, Mask, Scalar, Tensor};
use super::NumericsError;

/// Layer-norm epsilon used throughout the model.
pub const LAYERNORM_EPS: f64 = 1e-6;

/// Matrix product batched over leading dimensions.
///
/// `a` is `[..., n, k]`; `b` is either `[k, m]` (shared across the batch) or
/// `[..., k, m]` with the same leading dimensions as `a`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let mismatch = || NumericsError::ShapeMismatch {
        op: "matmul",
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    };
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(mismatch());
    }
    let (n, k) = (a.shape()[a.ndim() - 2], a.shape()[a.ndim() - 1]);
    let (kb, m) = (b.shape()[b.ndim() - 2], b.shape()[b.ndim() - 1]);
    if k != kb {
        return Err(mismatch());
    }
    let lead = &a.shape()[..a.ndim() - 2];
    let shared_b = b.ndim() == 2;
    if !shared_b && &b.shape()[..b.ndim() - 2] != lead {
        return Err(mismatch());
    }
    let batch: usize = lead.iter().product();
    let mut shape = lead.to_vec();
    shape.extend([n, m]);
    let mut out = vec![T::zero(); batch * n * m];
    for i in 0..batch {
        let bs = if shared_b {
            b.data()
        } else {
            &b.data()[i * k * m..(i + 1) * k * m]
        };
        gemm(
            &a.data()[i * n * k..(i + 1) * n * k],
            Layout::plain(n, k),
            bs,
            Layout::plain(k, m),
            T::zero(),
            &mut out[i * n * m..(i + 1) * n * m],
        );
    }
    Tensor::new(&shape, out)
}

/// Softmax over the visible entries of one row.
///
/// Masked entries get exactly zero; a row with no visible entry is all zeros.
pub(crate) fn masked_softmax_row<T: Scalar>(logits: &[T], mask: &[bool], out: &mut [T]) {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(None, |acc: Option<T>, l| Some(acc.map_or(l, |a| a.max(l))));
    let Some(max) = max else {
        out.fill(T::zero());
        return;
    };
    let mut sum = T::zero();
    for ((o, &l), &m) in out.iter_mut().zip(logits).zip(mask) {
        *o = if m { (l - max).exp() } else { T::zero() };
        sum = sum + *o;
    }
    for (o, &m) in out.iter_mut().zip(mask) {
        if m {
            *o = *o / sum;
        }
    }
}

/// Row-wise softmax restricted to visible keys.
///
/// `logits` is `[..., rows, cols]` and `mask` is `rows × cols`, broadcast
/// over the leading dimensions.
pub fn masked_softmax<T: Scalar>(
    logits: &Tensor<T>,
    mask: &Mask,
) -> Result<Tensor<T>, NumericsError> {
    let nd = logits.ndim();
    if nd == 0
        || logits.shape()[nd - 1] != mask.cols()
        || (nd >= 2 && logits.shape()[nd - 2] != mask.rows())
        || (nd == 1 && mask.rows() != 1)
    {
        return Err(NumericsError::ShapeMismatch {
            op: "masked_softmax",
            left: logits.shape().to_vec(),
            right: vec![mask.rows(), mask.cols()],
        });
    }
    let cols = mask.cols();
    let mut out = Tensor::zeros(logits.shape());
    for (r, (src, dst)) in logits
        .data()
        .chunks(cols)
        .zip(out.data_mut().chunks_mut(cols))
        .enumerate()
    {
        masked_softmax_row(src, mask.row(r % mask.rows()), dst);
    }
    Ok(out)
}

/// Per-row mean and reciprocal standard deviation.
pub(crate) fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, (var + eps).sqrt().recip())
}

/// Layer normalization over the last dimension.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, NumericsError> {
    let cols = *x.shape().last().ok_or(NumericsError::Rank {
        op: "layernorm",
        expected: 1,
        got: vec![],
    })?;
    if gamma.shape() != [cols] || beta.shape() != [cols] {
        return Err(NumericsError::ShapeMismatch {
            op: "layernorm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks(cols).zip(out.data_mut().chunks_mut(cols)) {
        let (mean, rstd) = row_stats(src, eps);
        for (j, (o, &v)) in dst.iter_mut().zip(src).enumerate() {
            *o = (v - mean) * rstd * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.044_715;

fn gelu_k<T: Scalar>() -> T {
    T::lit((2.0 / std::f64::consts::PI).sqrt())
}

/// Tanh-form GELU.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = gelu_k::<T>() * (x + T::lit(GELU_C) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let k = gelu_k::<T>();
    let c = T::lit(GELU_C);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let dinner = k * (T::one() + T::lit(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}
