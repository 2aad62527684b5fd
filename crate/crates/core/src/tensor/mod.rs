//! Quantized and floating-point tensors.
//!
//! All tensors are row-major. The last dimension is the inner dimension: it is
//! the one reduced by layer normalization and softmax, and the one split into
//! lane-width physical vectors by the machine model.

mod io;

pub use io::{read_tensor, read_tensor_file, write_tensor, write_tensor_file, AnyTensor, DType};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::Shape("rank must be at least 1".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Shape(format!("extent {pos} is zero in {dims:?}")));
        }
        Ok(Shape { dims })
    }

    pub fn matrix(rows: usize, cols: usize) -> Result<Self> {
        Self::new(vec![rows, cols])
    }

    pub fn vector(len: usize) -> Result<Self> {
        Self::new(vec![len])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// Extent of the inner (normalized / reduced) dimension.
    pub fn inner(&self) -> usize {
        *self.dims.last().expect("rank >= 1")
    }

    /// Number of inner-dimension columns, i.e. the product of all outer extents.
    pub fn outer(&self) -> usize {
        self.numel() / self.inner()
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "({})", parts.join("x"))
    }
}

fn check_len(shape: &Shape, len: usize) -> Result<()> {
    if shape.numel() != len {
        return Err(Error::ShapeMismatch(format!(
            "shape {shape} holds {} elements, data has {len}",
            shape.numel()
        )));
    }
    Ok(())
}

fn check_scale(scale: f32) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::BadScale(scale))
    }
}

fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// int8 tensor with a symmetric per-tensor scale (zero-point 0).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    data: Vec<i8>,
    scale: f32,
    shape: Shape,
}

impl QuantTensor {
    pub fn new(data: Vec<i8>, scale: f32, shape: Shape) -> Result<Self> {
        check_scale(scale)?;
        check_len(&shape, data.len())?;
        Ok(QuantTensor { data, scale, shape })
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }
}

/// int32 accumulator tensor; `scale` is the product of the operand scales.
#[derive(Debug, Clone, PartialEq)]
pub struct AccTensor {
    data: Vec<i32>,
    scale: f32,
    shape: Shape,
}

impl AccTensor {
    pub fn new(data: Vec<i32>, scale: f32, shape: Shape) -> Result<Self> {
        check_scale(scale)?;
        check_len(&shape, data.len())?;
        Ok(AccTensor { data, scale, shape })
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpTensor {
    data: Vec<f32>,
    shape: Shape,
}

impl FpTensor {
    pub fn new(data: Vec<f32>, shape: Shape) -> Result<Self> {
        check_len(&shape, data.len())?;
        check_finite(&data)?;
        Ok(FpTensor { data, shape })
    }

    pub fn zeros(shape: Shape) -> Self {
        FpTensor {
            data: vec![0.0; shape.numel()],
            shape,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Scalar quantization rule: round half to even, then saturate to int8.
#[inline]
pub fn quantize_scalar(x: f32, scale: f32) -> i8 {
    (x / scale).round_ties_even().clamp(-128.0, 127.0) as i8
}

pub fn quantize(x: &FpTensor, scale: f32) -> Result<QuantTensor> {
    check_scale(scale)?;
    check_finite(&x.data)?;
    let data = x.data.iter().map(|&v| quantize_scalar(v, scale)).collect();
    QuantTensor::new(data, scale, x.shape.clone())
}

pub fn dequantize(q: &QuantTensor) -> FpTensor {
    let data = q.data.iter().map(|&v| f32::from(v) * q.scale).collect();
    FpTensor {
        data,
        shape: q.shape.clone(),
    }
}

/// Converts accumulators to fp32: one round-to-nearest-even cast, one multiply.
pub fn dequantize_acc(a: &AccTensor, scale_product: f32) -> Result<FpTensor> {
    check_scale(scale_product)?;
    let data: Vec<f32> = a.data.iter().map(|&v| v as f32 * scale_product).collect();
    FpTensor::new(data, a.shape.clone())
}

/// Per-tensor scale mapping the largest magnitude onto 127.
pub fn calibrate_scale(x: &FpTensor) -> Result<f32> {
    check_finite(&x.data)?;
    let max = x.data.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    Ok(if max == 0.0 { 1.0 } else { max / 127.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fp(v: Vec<f32>) -> FpTensor {
        let n = v.len();
        FpTensor::new(v, Shape::vector(n).unwrap()).unwrap()
    }

    #[test]
    fn shape_rules() {
        assert!(Shape::new(vec![3, 0]).is_err());
        assert!(Shape::new(Vec::<usize>::new()).is_err());
        let s = Shape::matrix(128, 768).unwrap();
        assert_eq!(s.numel(), 128 * 768);
        assert_eq!(s.inner(), 768);
        assert_eq!(s.outer(), 128);
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&fp(vec![0.0]), 1.0).unwrap().data(), &[0]);
        assert_eq!(quantize(&fp(vec![1.2]), 0.5).unwrap().data(), &[2]);
        assert_eq!(quantize(&fp(vec![1000.0]), 1.0).unwrap().data(), &[127]);
        assert_eq!(quantize(&fp(vec![-1000.0]), 1.0).unwrap().data(), &[-128]);
        // ties go to even
        assert_eq!(quantize(&fp(vec![2.5, 3.5, -2.5]), 1.0).unwrap().data(), &[2, 4, -2]);
    }

    #[test]
    fn quantize_errors() {
        assert_eq!(quantize(&fp(vec![1.0]), 0.0), Err(Error::BadScale(0.0)));
        assert!(quantize(&fp(vec![1.0]), -1.0).is_err());
        assert!(FpTensor::new(vec![f32::NAN], Shape::vector(1).unwrap()).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let q = QuantTensor::new(vec![2], 0.5, Shape::vector(1).unwrap()).unwrap();
        assert_eq!(dequantize(&q).data(), &[1.0]);
        let q = QuantTensor::new(vec![-128], 0.25, Shape::vector(1).unwrap()).unwrap();
        assert_eq!(dequantize(&q).data(), &[-32.0]);
    }

    #[test]
    fn dequantize_acc_examples() {
        let sh = Shape::vector(1).unwrap();
        let a = AccTensor::new(vec![0], 1.0, sh.clone()).unwrap();
        assert_eq!(dequantize_acc(&a, 3.7).unwrap().data(), &[0.0]);
        let a = AccTensor::new(vec![100], 1.0, sh.clone()).unwrap();
        assert_eq!(dequantize_acc(&a, 0.01).unwrap().data(), &[1.0]);
        assert!(dequantize_acc(&a, 0.0).is_err());
    }

    #[test]
    fn acc_cast_matches_wide_oracle() {
        // Oracle: round 2^24+1 to the nearest fp32 using f64 arithmetic.
        // Neighbours are 2^24 and 2^24+2; the tie resolves to the even mantissa.
        let v: i32 = (1 << 24) + 1;
        let wide = v as f64;
        let lo = 16_777_216.0f64;
        let hi = 16_777_218.0f64;
        assert_eq!(wide - lo, hi - wide);
        let expected = lo as f32;
        let a = AccTensor::new(vec![v], 1.0, Shape::vector(1).unwrap()).unwrap();
        assert_eq!(dequantize_acc(&a, 1.0).unwrap().data(), &[expected]);
        assert_eq!(expected, 16_777_216.0);
    }

    #[test]
    fn calibrate_examples() {
        assert_eq!(calibrate_scale(&fp(vec![0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(calibrate_scale(&fp(vec![-12.7, 1.0])).unwrap(), 12.7f32 / 127.0);
        assert!((calibrate_scale(&fp(vec![-12.7, 1.0])).unwrap() - 0.1).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn calibrated_scale_never_clamps(v in prop::collection::vec(-1e4f32..1e4, 1..64)) {
            let t = fp(v.clone());
            let s = calibrate_scale(&t).unwrap();
            for &x in &v {
                let r = (x / s).round_ties_even();
                prop_assert!((-127.0..=127.0).contains(&r));
            }
        }

        #[test]
        fn quantize_monotone(a in -500f32..500.0, b in -500f32..500.0, s in 0.01f32..4.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_scalar(lo, s) <= quantize_scalar(hi, s));
        }

        #[test]
        fn roundtrip_error_bound(x in -100f32..100.0, s in 0.8f32..2.0) {
            prop_assume!(x.abs() <= 127.5 * s);
            let q = quantize(&fp(vec![x]), s).unwrap();
            let d = dequantize(&q).data()[0];
            // half a step, plus one rounding of the fp32 division/multiply
            prop_assert!((d - x).abs() <= s / 2.0 * (1.0 + 1e-6));
        }

        #[test]
        fn roundtrip_idempotent(v in prop::collection::vec(any::<i8>(), 1..32), s in 0.001f32..10.0) {
            let n = v.len();
            let q = QuantTensor::new(v, s, Shape::vector(n).unwrap()).unwrap();
            let once = quantize(&dequantize(&q), s).unwrap();
            prop_assert_eq!(once.data(), q.data());
        }
    }
}
