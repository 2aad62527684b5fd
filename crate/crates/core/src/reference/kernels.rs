//! Scalar kernels shared by the golden model and the simulator.
//!
//! Every reduction runs in ascending index order with fp32 accumulators. The
//! simulator fires exactly these functions when a node completes, so any
//! difference between the two paths is a wiring or ordering bug, never a
//! numerics one.

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{AccTensor, FpTensor, QuantTensor, Shape};

pub const GELU_CUBIC: f32 = 0.044715;
pub const SQRT_2_OVER_PI: f32 = 0.797_884_56;

/// Fixed scale of the int8 softmax probabilities.
pub const PROB_SCALE: f32 = 1.0 / 127.0;

fn matrix_dims(s: &Shape, what: &str) -> Result<(usize, usize)> {
    match *s.dims() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::ShapeMismatch(format!("{what} must be rank 2, got {s}"))),
    }
}

fn batch_dims(s: &Shape, what: &str) -> Result<(usize, usize, usize)> {
    match *s.dims() {
        [b, r, c] => Ok((b, r, c)),
        _ => Err(Error::ShapeMismatch(format!("{what} must be rank 3, got {s}"))),
    }
}

/// `out[r][c] = bias[c] + sum_t a[r][t] * w[t][c]`, rows split across `exec`.
fn gemm_rows(
    a: &[i8],
    w: &[i8],
    bias: Option<&[i32]>,
    m: usize,
    k: usize,
    n: usize,
    exec: Exec,
) -> Result<Vec<i32>> {
    let mut wide = vec![0i64; m * n];
    exec.for_each_row(&mut wide, n, |r, row| {
        if let Some(b) = bias {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = i64::from(bv);
            }
        }
        let arow = &a[r * k..(r + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0 {
                continue;
            }
            let av = i64::from(av);
            let wrow = &w[t * n..(t + 1) * n];
            for (o, &wv) in row.iter_mut().zip(wrow) {
                *o += av * i64::from(wv);
            }
        }
    });
    wide.into_iter()
        .enumerate()
        .map(|(i, v)| i32::try_from(v).map_err(|_| Error::Overflow(i)))
        .collect()
}

/// Integer GEMM `a (m x k) . w (k x n) + bias`, exact int32 result.
pub fn gemm(a: &QuantTensor, w: &QuantTensor, bias: Option<&[i32]>, exec: Exec) -> Result<AccTensor> {
    let (m, k) = matrix_dims(a.shape(), "activation")?;
    let (k2, n) = matrix_dims(w.shape(), "weight")?;
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "inner dimensions differ: {} vs {}",
            a.shape(),
            w.shape()
        )));
    }
    if let Some(b) = bias {
        if b.len() != n {
            return Err(Error::ShapeMismatch(format!("bias length {} != {n}", b.len())));
        }
    }
    let data = gemm_rows(a.data(), w.data(), bias, m, k, n, exec)?;
    AccTensor::new(data, a.scale() * w.scale(), Shape::matrix(m, n)?)
}

/// Independent GEMMs `a[i] (m x k) . b[i] (k x n)` for every batch entry.
pub fn batched_gemm(a: &QuantTensor, b: &QuantTensor, exec: Exec) -> Result<AccTensor> {
    let (h, m, k) = batch_dims(a.shape(), "batched activation")?;
    let (h2, k2, n) = batch_dims(b.shape(), "batched weight")?;
    if h != h2 || k != k2 {
        return Err(Error::ShapeMismatch(format!("{} vs {}", a.shape(), b.shape())));
    }
    let mut data = Vec::with_capacity(h * m * n);
    for i in 0..h {
        let part = gemm_rows(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            None,
            m,
            k,
            n,
            exec,
        )
        .map_err(|e| match e {
            Error::Overflow(j) => Error::Overflow(i * m * n + j),
            e => e,
        })?;
        data.extend(part);
    }
    AccTensor::new(data, a.scale() * b.scale(), Shape::new(vec![h, m, n])?)
}

/// Splits `(s, h*d)` into `(h, s, d)`; the head-separating reorder.
pub fn split_heads(x: &QuantTensor, heads: usize) -> Result<QuantTensor> {
    let (s, dm) = matrix_dims(x.shape(), "head split input")?;
    if heads == 0 || dm % heads != 0 {
        return Err(Error::ShapeMismatch(format!("{dm} columns not divisible into {heads} heads")));
    }
    let d = dm / heads;
    let mut out = Vec::with_capacity(s * dm);
    for i in 0..heads {
        for r in 0..s {
            out.extend_from_slice(&x.data()[r * dm + i * d..r * dm + (i + 1) * d]);
        }
    }
    QuantTensor::new(out, x.scale(), Shape::new(vec![heads, s, d])?)
}

/// Splits `(s, h*d)` into `(h, d, s)`: per-head transposed, as installed for `Q.K^T`.
pub fn split_heads_transposed(x: &QuantTensor, heads: usize) -> Result<QuantTensor> {
    let (s, dm) = matrix_dims(x.shape(), "head split input")?;
    if heads == 0 || dm % heads != 0 {
        return Err(Error::ShapeMismatch(format!("{dm} columns not divisible into {heads} heads")));
    }
    let d = dm / heads;
    let mut out = Vec::with_capacity(s * dm);
    for i in 0..heads {
        for c in 0..d {
            for r in 0..s {
                out.push(x.data()[r * dm + i * d + c]);
            }
        }
    }
    QuantTensor::new(out, x.scale(), Shape::new(vec![heads, d, s])?)
}

/// Concatenates `(h, s, d)` head outputs back into `(s, h*d)`.
pub fn concat_heads(x: &QuantTensor) -> Result<QuantTensor> {
    let (h, s, d) = batch_dims(x.shape(), "head outputs")?;
    let mut out = vec![0i8; h * s * d];
    for i in 0..h {
        for r in 0..s {
            let src = &x.data()[(i * s + r) * d..(i * s + r + 1) * d];
            out[r * h * d + i * d..r * h * d + (i + 1) * d].copy_from_slice(src);
        }
    }
    QuantTensor::new(out, x.scale(), Shape::matrix(s, h * d)?)
}

#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    let t = x + GELU_CUBIC * x * x * x;
    let u = (SQRT_2_OVER_PI * t).tanh();
    0.5 * x * (1.0 + u)
}

pub fn gelu(x: &FpTensor) -> Result<FpTensor> {
    FpTensor::new(x.data().iter().map(|&v| gelu_scalar(v)).collect(), x.shape().clone())
}

/// Sum of `row` in ascending index order.
#[inline]
fn row_sum(row: impl Iterator<Item = f32>) -> f32 {
    row.fold(0.0f32, |s, v| s + v)
}

/// Elementwise residual add `a + b`.
pub fn residual_add(a: &FpTensor, b: &FpTensor) -> Result<FpTensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{} vs {}", a.shape(), b.shape())));
    }
    FpTensor::new(a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(), a.shape().clone())
}

/// Per-column mean: ascending-order sum divided by the element count.
pub fn ln_mean(z: &FpTensor) -> Result<Vec<f32>> {
    let k = z.shape().inner();
    Ok(z.data()
        .chunks(k)
        .map(|col| row_sum(col.iter().copied()) / k as f32)
        .collect())
}

/// Layer-norm pass two: `gamma * (z - mean)` and `1 / sqrt(var + eps)` per column.
pub fn ln_pass2(z: &FpTensor, mean: &[f32], gamma: &[f32], eps: f32) -> Result<(FpTensor, Vec<f32>)> {
    let k = z.shape().inner();
    if gamma.len() != k || mean.len() != z.shape().outer() {
        return Err(Error::ShapeMismatch("layer-norm pass two operands".into()));
    }
    let mut centered = Vec::with_capacity(z.data().len());
    let mut rstd = Vec::with_capacity(mean.len());
    for (col, &m) in z.data().chunks(k).zip(mean) {
        let mut sq = 0.0f32;
        for (&v, &g) in col.iter().zip(gamma) {
            let d = v - m;
            sq += d * d;
            centered.push(g * d);
        }
        let var = sq / k as f32;
        rstd.push(1.0 / (var + eps).sqrt());
    }
    Ok((FpTensor::new(centered, z.shape().clone())?, rstd))
}

/// Layer-norm pass three: `gz * rstd + beta`. The int8 image is produced by
/// quantizing this output as it streams.
pub fn ln_pass3(gz: &FpTensor, rstd: &[f32], beta: &[f32]) -> Result<FpTensor> {
    let k = gz.shape().inner();
    if beta.len() != k || rstd.len() != gz.shape().outer() {
        return Err(Error::ShapeMismatch("layer-norm pass three operands".into()));
    }
    let mut out = Vec::with_capacity(gz.data().len());
    for (col, &r) in gz.data().chunks(k).zip(rstd) {
        out.extend(col.iter().zip(beta).map(|(&g, &b)| g * r + b));
    }
    FpTensor::new(out, gz.shape().clone())
}

/// Softmax pass one, fused form: dequantize scores and take each row's maximum.
pub fn softmax_pass1_fused(acc: &AccTensor, scale: f32) -> Result<(FpTensor, Vec<f32>)> {
    let x = crate::tensor::dequantize_acc(acc, scale)?;
    let m = row_max(&x)?;
    Ok((x, m))
}

pub fn row_max(x: &FpTensor) -> Result<Vec<f32>> {
    let n = x.shape().inner();
    Ok(x.data()
        .chunks(n)
        .map(|row| row.iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .collect())
}

/// Softmax pass two: `exp(x - max)` (stored for pass three) and the row sums.
pub fn softmax_pass2(x: &FpTensor, max: &[f32]) -> Result<(FpTensor, Vec<f32>)> {
    let n = x.shape().inner();
    if max.len() != x.shape().outer() {
        return Err(Error::ShapeMismatch("softmax pass two operands".into()));
    }
    let mut e = Vec::with_capacity(x.data().len());
    let mut sums = Vec::with_capacity(max.len());
    for (row, &m) in x.data().chunks(n).zip(max) {
        let start = e.len();
        e.extend(row.iter().map(|&v| (v - m).exp()));
        sums.push(row_sum(e[start..].iter().copied()));
    }
    Ok((FpTensor::new(e, x.shape().clone())?, sums))
}

/// Softmax pass three: multiply by the reciprocal row sum.
pub fn softmax_pass3(e: &FpTensor, sums: &[f32]) -> Result<FpTensor> {
    let n = e.shape().inner();
    if sums.len() != e.shape().outer() {
        return Err(Error::ShapeMismatch("softmax pass three operands".into()));
    }
    let mut p = Vec::with_capacity(e.data().len());
    for (row, &s) in e.data().chunks(n).zip(sums) {
        let r = 1.0 / s;
        p.extend(row.iter().map(|&v| v * r));
    }
    FpTensor::new(p, e.shape().clone())
}

/// Pass three with the int8 probability output consumed by the `P.V` GEMM.
pub fn softmax_pass3_quant(e: &FpTensor, sums: &[f32]) -> Result<QuantTensor> {
    let p = softmax_pass3(e, sums)?;
    crate::tensor::quantize(&p, PROB_SCALE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(data: Vec<i8>, r: usize, c: usize) -> QuantTensor {
        QuantTensor::new(data, 1.0, Shape::matrix(r, c).unwrap()).unwrap()
    }

    #[test]
    fn gemm_identity() {
        let a = q(vec![1, 2, 3, 4], 2, 2);
        let w = q(vec![1, 0, 0, 1], 2, 2);
        let out = gemm(&a, &w, None, Exec::Sequential).unwrap();
        assert_eq!(out.data(), &[1, 2, 3, 4]);
        let out = gemm(&a, &w, Some(&[10, -10]), Exec::Parallel).unwrap();
        assert_eq!(out.data(), &[11, -8, 13, -6]);
    }

    #[test]
    fn gemm_shape_errors() {
        let a = q(vec![1; 6], 2, 3);
        let w = q(vec![1; 4], 2, 2);
        assert!(matches!(gemm(&a, &w, None, Exec::Sequential), Err(Error::ShapeMismatch(_))));
        let w = q(vec![1; 6], 3, 2);
        assert!(gemm(&a, &w, Some(&[1]), Exec::Sequential).is_err());
    }

    #[test]
    fn gemm_overflow_is_an_error() {
        let a = q(vec![-128, -128], 1, 2);
        let w = q(vec![-128, -128], 2, 1);
        let out = gemm(&a, &w, Some(&[i32::MAX - 1]), Exec::Sequential);
        assert_eq!(out, Err(Error::Overflow(0)));
    }

    #[test]
    fn head_split_layouts() {
        // s=2, two heads of width 2
        let x = q(vec![1, 2, 3, 4, 5, 6, 7, 8], 2, 4);
        let h = split_heads(&x, 2).unwrap();
        assert_eq!(h.data(), &[1, 2, 5, 6, 3, 4, 7, 8]);
        let t = split_heads_transposed(&x, 2).unwrap();
        assert_eq!(t.data(), &[1, 5, 2, 6, 3, 7, 4, 8]);
        assert!(split_heads(&x, 3).is_err());
    }

    #[test]
    fn concat_inverts_split() {
        let x = q(vec![1, 2, 3, 4, 5, 6, 7, 8], 2, 4);
        let back = concat_heads(&split_heads(&x, 2).unwrap()).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn gelu_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-5);
        // f64 evaluation of the tanh approximation at x = 1
        let x = 1.0f64;
        let oracle = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        let got = gelu_scalar(1.0);
        let ulp = f32::EPSILON * (oracle as f32).abs();
        assert!(((got as f64) - oracle).abs() <= ulp as f64, "{got} vs {oracle}");
    }

    #[test]
    fn gelu_monotone_for_nonnegative() {
        let mut prev = gelu_scalar(0.0);
        for i in 1..=3000 {
            let v = gelu_scalar(i as f32 * 0.001);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn ln_passes_simple() {
        let z = FpTensor::new(vec![1.0, -1.0], Shape::matrix(1, 2).unwrap()).unwrap();
        let m = ln_mean(&z).unwrap();
        let (gz, r) = ln_pass2(&z, &m, &[1.0, 1.0], 0.0).unwrap();
        let out = ln_pass3(&gz, &r, &[0.0, 0.0]).unwrap();
        assert_eq!(out.data(), &[1.0, -1.0]);
    }

    #[test]
    fn softmax_extremes() {
        let x = FpTensor::new(vec![80.0, -80.0, 0.5, 0.5], Shape::matrix(2, 2).unwrap()).unwrap();
        let m = row_max(&x).unwrap();
        let (e, s) = softmax_pass2(&x, &m).unwrap();
        let p = softmax_pass3(&e, &s).unwrap();
        assert_eq!(p.data()[0], 1.0);
        assert!(p.data()[1] < 1e-30);
        assert_eq!(&p.data()[2..], &[0.5, 0.5]);
    }
}
