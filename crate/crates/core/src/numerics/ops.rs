//! Eager (tape-free) versions of the core operations.

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Standard matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    kernels::gemm_nn(a.data(), b.data(), m, k, n, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let mut out = vec![0.0; m.numel()];
    kernels::softmax_rows(m.data(), m.cols(), &mut out)
        .ok_or_else(|| Error::Numeric("NaN entering softmax".into()))?;
    Ok(Tensor::from_parts(m.shape().to_vec(), out))
}

/// Normalises every length-`d` vector along the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; x.rows()];
    kernels::layer_norm(x.data(), d, gamma.data(), beta.data(), eps, &mut out, &mut xhat, &mut rstd);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Affine map over the last axis, `x · w + b`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let din = x.cols();
    if w.shape().len() != 2 || w.shape()[0] != din || b.numel() != w.shape()[1] {
        return Err(Error::dim("linear", x.shape(), w.shape()));
    }
    let dout = w.shape()[1];
    let rows = x.rows();
    let mut out = vec![0.0; rows * dout];
    kernels::gemm_nn(x.data(), w.data(), rows, din, dout, &mut out);
    for row in out.chunks_mut(dout) {
        row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Ok(Tensor::from_parts(shape, out))
}
