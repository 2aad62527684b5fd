//! Straight-line mixed-precision encoder layer and the pure fp32 comparison path.

use super::kernels::*;
use super::params::{EncoderParams, FloatLayer, Model, ModelDims};
use super::{LayerInput, Trace, Value};
use crate::error::Result;
use crate::exec::Exec;
use crate::tensor::{calibrate_scale, dequantize_acc, quantize, FpTensor, QuantTensor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Boundary {
    Q,
    K,
    V,
    Ctx,
    Ln1,
    Gelu,
    Ln2,
}

/// Where the forward pass gets its activation scales from.
trait ScaleSource {
    fn params(&self) -> &EncoderParams;
    fn scale(&mut self, at: Boundary, fp: &FpTensor) -> Result<f32>;
}

struct Fixed<'a>(&'a EncoderParams);

impl ScaleSource for Fixed<'_> {
    fn params(&self) -> &EncoderParams {
        self.0
    }

    fn scale(&mut self, at: Boundary, _fp: &FpTensor) -> Result<f32> {
        let s = self.0.scales;
        Ok(match at {
            Boundary::Q => s.q,
            Boundary::K => s.k,
            Boundary::V => s.v,
            Boundary::Ctx => s.ctx,
            Boundary::Ln1 => s.ln1,
            Boundary::Gelu => s.gelu,
            Boundary::Ln2 => s.ln2,
        })
    }
}

/// Sets each scale from the tensor crossing the boundary, then refreshes the
/// biases that depend on it.
struct Calibrating<'a> {
    float: &'a FloatLayer,
    p: EncoderParams,
}

impl ScaleSource for Calibrating<'_> {
    fn params(&self) -> &EncoderParams {
        &self.p
    }

    fn scale(&mut self, at: Boundary, fp: &FpTensor) -> Result<f32> {
        let v = calibrate_scale(fp)?;
        let s = &mut self.p.scales;
        match at {
            Boundary::Q => s.q = v,
            Boundary::K => s.k = v,
            Boundary::V => s.v = v,
            Boundary::Ctx => s.ctx = v,
            Boundary::Ln1 => s.ln1 = v,
            Boundary::Gelu => s.gelu = v,
            Boundary::Ln2 => s.ln2 = v,
        }
        self.float.requantize_biases(&mut self.p);
        Ok(v)
    }
}

struct Recorder<'a> {
    layer: usize,
    trace: Option<&'a mut Trace>,
}

impl Recorder<'_> {
    fn put(&mut self, name: &str, v: impl FnOnce() -> Value) {
        if let Some(t) = self.trace.as_deref_mut() {
            t.insert(format!("layer{}.{name}", self.layer), v());
        }
    }
}

fn projection<S: ScaleSource>(
    src: &mut S,
    rec: &mut Recorder,
    x8: &QuantTensor,
    which: Boundary,
    exec: Exec,
) -> Result<QuantTensor> {
    let (w, b, tag) = {
        let p = src.params();
        match which {
            Boundary::Q => (p.wq.clone(), p.bq.clone(), "q"),
            Boundary::K => (p.wk.clone(), p.bk.clone(), "k"),
            _ => (p.wv.clone(), p.bv.clone(), "v"),
        }
    };
    let acc = gemm(x8, &w, Some(&b), exec)?;
    let fp = dequantize_acc(&acc, acc.scale())?;
    let s = src.scale(which, &fp)?;
    let q8 = quantize(&fp, s)?;
    rec.put(&format!("{tag}_acc"), || Value::Acc(acc));
    rec.put(&format!("{tag}_fp"), || Value::Fp(fp));
    rec.put(&format!("{tag}8"), || Value::Quant(q8.clone()));
    Ok(q8)
}

fn attention_block<S: ScaleSource>(
    src: &mut S,
    rec: &mut Recorder,
    x: &LayerInput,
    exec: Exec,
) -> Result<LayerInput> {
    let dims = src.params().dims;
    let h = dims.heads;
    let q8 = projection(src, rec, &x.q, Boundary::Q, exec)?;
    let k8 = projection(src, rec, &x.q, Boundary::K, exec)?;
    let v8 = projection(src, rec, &x.q, Boundary::V, exec)?;

    let q_heads = split_heads(&q8, h)?;
    let kt_heads = split_heads_transposed(&k8, h)?;
    let v_heads = split_heads(&v8, h)?;

    let scores = batched_gemm(&q_heads, &kt_heads, exec)?;
    let fold = scores.scale() / (dims.head_size as f32).sqrt();
    let (sm_x, sm_max) = softmax_pass1_fused(&scores, fold)?;
    let (sm_e, sm_sum) = softmax_pass2(&sm_x, &sm_max)?;
    let probs8 = softmax_pass3_quant(&sm_e, &sm_sum)?;

    let ctx_acc = batched_gemm(&probs8, &v_heads, exec)?;
    let ctx_fp = dequantize_acc(&ctx_acc, ctx_acc.scale())?;
    let s_ctx = src.scale(Boundary::Ctx, &ctx_fp)?;
    let ctx8 = concat_heads(&quantize(&ctx_fp, s_ctx)?)?;

    let (wo, bo, gamma1, beta1, eps) = {
        let p = src.params();
        (p.wo.clone(), p.bo.clone(), p.gamma1.clone(), p.beta1.clone(), p.eps)
    };
    let o_acc = gemm(&ctx8, &wo, Some(&bo), exec)?;
    let o_fp = dequantize_acc(&o_acc, o_acc.scale())?;
    let z1 = residual_add(&o_fp, &x.fp)?;
    let mean1 = ln_mean(&z1)?;
    let (gz1, rstd1) = ln_pass2(&z1, &mean1, &gamma1, eps)?;
    let sa_fp = ln_pass3(&gz1, &rstd1, &beta1)?;
    let s_ln1 = src.scale(Boundary::Ln1, &sa_fp)?;
    let sa8 = quantize(&sa_fp, s_ln1)?;

    rec.put("q_heads", || Value::Quant(q_heads));
    rec.put("kt_heads", || Value::Quant(kt_heads));
    rec.put("v_heads", || Value::Quant(v_heads));
    rec.put("scores_acc", || Value::Acc(scores));
    rec.put("sm_x", || Value::Fp(sm_x));
    rec.put("sm_max", || Value::Vector(sm_max));
    rec.put("sm_e", || Value::Fp(sm_e));
    rec.put("sm_sum", || Value::Vector(sm_sum));
    rec.put("probs8", || Value::Quant(probs8));
    rec.put("ctx_acc", || Value::Acc(ctx_acc));
    rec.put("ctx_fp", || Value::Fp(ctx_fp));
    rec.put("ctx8", || Value::Quant(ctx8));
    rec.put("o_acc", || Value::Acc(o_acc));
    rec.put("o_fp", || Value::Fp(o_fp));
    rec.put("z1", || Value::Fp(z1));
    rec.put("mean1", || Value::Vector(mean1));
    rec.put("gz1", || Value::Fp(gz1));
    rec.put("rstd1", || Value::Vector(rstd1));
    rec.put("sa_fp", || Value::Fp(sa_fp.clone()));
    rec.put("sa8", || Value::Quant(sa8.clone()));
    Ok(LayerInput { fp: sa_fp, q: sa8 })
}

fn feed_forward_block<S: ScaleSource>(
    src: &mut S,
    rec: &mut Recorder,
    sa: &LayerInput,
    exec: Exec,
) -> Result<LayerInput> {
    let (w1, b1) = (src.params().w1.clone(), src.params().b1.clone());
    let f1_acc = gemm(&sa.q, &w1, Some(&b1), exec)?;
    let f1_fp = dequantize_acc(&f1_acc, f1_acc.scale())?;
    let act = gelu(&f1_fp)?;
    let s_gelu = src.scale(Boundary::Gelu, &act)?;
    let g8 = quantize(&act, s_gelu)?;

    let (w2, b2, gamma2, beta2, eps) = {
        let p = src.params();
        (p.w2.clone(), p.b2.clone(), p.gamma2.clone(), p.beta2.clone(), p.eps)
    };
    let f2_acc = gemm(&g8, &w2, Some(&b2), exec)?;
    let f2_fp = dequantize_acc(&f2_acc, f2_acc.scale())?;
    let z2 = residual_add(&f2_fp, &sa.fp)?;
    let mean2 = ln_mean(&z2)?;
    let (gz2, rstd2) = ln_pass2(&z2, &mean2, &gamma2, eps)?;
    let out_fp = ln_pass3(&gz2, &rstd2, &beta2)?;
    let s_ln2 = src.scale(Boundary::Ln2, &out_fp)?;
    let out8 = quantize(&out_fp, s_ln2)?;

    rec.put("f1_acc", || Value::Acc(f1_acc));
    rec.put("f1_fp", || Value::Fp(f1_fp));
    rec.put("gelu", || Value::Fp(act));
    rec.put("g8", || Value::Quant(g8));
    rec.put("f2_acc", || Value::Acc(f2_acc));
    rec.put("f2_fp", || Value::Fp(f2_fp));
    rec.put("z2", || Value::Fp(z2));
    rec.put("mean2", || Value::Vector(mean2));
    rec.put("gz2", || Value::Fp(gz2));
    rec.put("rstd2", || Value::Vector(rstd2));
    rec.put("out_fp", || Value::Fp(out_fp.clone()));
    rec.put("out8", || Value::Quant(out8.clone()));
    Ok(LayerInput { fp: out_fp, q: out8 })
}

/// Mixed-precision self-attention block: returns the LN1 output pair.
pub fn self_attention_ref(x: &LayerInput, p: &EncoderParams, exec: Exec) -> Result<LayerInput> {
    p.validate()?;
    check_input(x, &p.dims)?;
    let mut rec = Recorder { layer: 0, trace: None };
    attention_block(&mut Fixed(p), &mut rec, x, exec)
}

/// One mixed-precision encoder layer; the result feeds the next layer.
pub fn encoder_layer_ref(x: &LayerInput, p: &EncoderParams, exec: Exec) -> Result<LayerInput> {
    encoder_layer_traced(x, p, 0, exec, None)
}

/// [`encoder_layer_ref`] that also records every node-boundary tensor.
pub fn encoder_layer_traced(
    x: &LayerInput,
    p: &EncoderParams,
    layer: usize,
    exec: Exec,
    trace: Option<&mut Trace>,
) -> Result<LayerInput> {
    p.validate()?;
    check_input(x, &p.dims)?;
    let mut rec = Recorder { layer, trace };
    let mut src = Fixed(p);
    let sa = attention_block(&mut src, &mut rec, x, exec)?;
    feed_forward_block(&mut src, &mut rec, &sa, exec)
}

/// Runs every layer of `model` on its input, recording a full trace.
pub fn encoder_stack_ref(model: &Model, exec: Exec) -> Result<(LayerInput, Trace)> {
    let mut trace = Trace::new();
    let mut x = LayerInput::from_quant(model.input.clone());
    for (l, p) in model.layers.iter().enumerate() {
        x = encoder_layer_traced(&x, p, l, exec, Some(&mut trace))?;
    }
    Ok((x, trace))
}

pub(crate) fn calibrate_layer(float: &FloatLayer, dims: ModelDims, eps: f32, x: &LayerInput) -> Result<EncoderParams> {
    let p = float.quantize(dims, eps, x.q.scale())?;
    let mut src = Calibrating { float, p };
    let mut rec = Recorder { layer: 0, trace: None };
    let exec = Exec::default();
    let sa = attention_block(&mut src, &mut rec, x, exec)?;
    feed_forward_block(&mut src, &mut rec, &sa, exec)?;
    src.p.validate()?;
    Ok(src.p)
}

fn check_input(x: &LayerInput, dims: &ModelDims) -> Result<()> {
    let want = [dims.seq_len, dims.d_model];
    if x.q.shape().dims() != want || x.fp.shape().dims() != want {
        return Err(crate::error::Error::ShapeMismatch(format!(
            "layer input {} / {}, expected ({}x{})",
            x.q.shape(),
            x.fp.shape(),
            want[0],
            want[1]
        )));
    }
    Ok(())
}

/// Numerically-stable row softmax in fp32.
pub fn softmax_ref(x: &FpTensor) -> Result<FpTensor> {
    let m = row_max(x)?;
    let (e, s) = softmax_pass2(x, &m)?;
    softmax_pass3(&e, &s)
}

/// Layer normalization over the inner dimension, evaluated pass by pass.
pub fn layernorm_ref(z: &FpTensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<FpTensor> {
    let mean = ln_mean(z)?;
    let (gz, rstd) = ln_pass2(z, &mean, gamma, eps)?;
    ln_pass3(&gz, &rstd, beta)
}

fn matmul_f32(a: &FpTensor, w: &FpTensor, bias: &[f32]) -> Result<FpTensor> {
    let (m, k) = (a.shape().outer(), a.shape().inner());
    let n = w.shape().inner();
    let mut out = vec![0.0f32; m * n];
    for r in 0..m {
        let row = &mut out[r * n..(r + 1) * n];
        row.copy_from_slice(bias);
        for t in 0..k {
            let av = a.data()[r * k + t];
            for (o, &wv) in row.iter_mut().zip(&w.data()[t * n..(t + 1) * n]) {
                *o += av * wv;
            }
        }
    }
    FpTensor::new(out, Shape::matrix(m, n)?)
}

/// Pure fp32 layer using the dequantized weights and biases; no activation
/// quantization. Used to report the mixed-precision error.
pub fn encoder_layer_fp32(x: &FpTensor, p: &EncoderParams) -> Result<FpTensor> {
    let d = p.dims;
    let s = p.scales;
    let fbias = |b: &[i32], scale: f32| -> Vec<f32> { b.iter().map(|&v| v as f32 * scale).collect() };
    let [wq, wk, wv, wo, w1, w2] = Model::float_weights(p);
    let q = matmul_f32(x, &wq, &fbias(&p.bq, s.input * p.wq.scale()))?;
    let k = matmul_f32(x, &wk, &fbias(&p.bk, s.input * p.wk.scale()))?;
    let v = matmul_f32(x, &wv, &fbias(&p.bv, s.input * p.wv.scale()))?;
    let (sl, h, dk) = (d.seq_len, d.heads, d.head_size);
    let mut ctx = vec![0.0f32; sl * d.d_model];
    let inv = 1.0 / (dk as f32).sqrt();
    for head in 0..h {
        let mut scores = vec![0.0f32; sl * sl];
        for r in 0..sl {
            for c in 0..sl {
                let mut acc = 0.0f32;
                for t in 0..dk {
                    acc += q.data()[r * d.d_model + head * dk + t] * k.data()[c * d.d_model + head * dk + t];
                }
                scores[r * sl + c] = acc * inv;
            }
        }
        let probs = softmax_ref(&FpTensor::new(scores, Shape::matrix(sl, sl)?)?)?;
        for r in 0..sl {
            for t in 0..dk {
                let mut acc = 0.0f32;
                for c in 0..sl {
                    acc += probs.data()[r * sl + c] * v.data()[c * d.d_model + head * dk + t];
                }
                ctx[r * d.d_model + head * dk + t] = acc;
            }
        }
    }
    let ctx = FpTensor::new(ctx, Shape::matrix(sl, d.d_model)?)?;
    let o = matmul_f32(&ctx, &wo, &fbias(&p.bo, s.ctx * p.wo.scale()))?;
    let sa = layernorm_ref(&residual_add(&o, x)?, &p.gamma1, &p.beta1, p.eps)?;
    let f1 = matmul_f32(&sa, &w1, &fbias(&p.b1, s.ln1 * p.w1.scale()))?;
    let g = gelu(&f1)?;
    let f2 = matmul_f32(&g, &w2, &fbias(&p.b2, s.gelu * p.w2.scale()))?;
    layernorm_ref(&residual_add(&f2, &sa)?, &p.gamma2, &p.beta2, p.eps)
}

/// Largest absolute difference between the mixed-precision and fp32 outputs.
pub fn mixed_precision_error(x: &LayerInput, p: &EncoderParams) -> Result<f32> {
    let mixed = encoder_layer_ref(x, p, Exec::default())?;
    let exact = encoder_layer_fp32(&x.fp, p)?;
    Ok(mixed
        .fp
        .data()
        .iter()
        .zip(exact.data())
        .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
}
