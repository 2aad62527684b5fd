use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{
    calibrate_scale, dequantize, quantize, read_tensor_file, write_tensor_file, AccTensor, AnyTensor, FpTensor,
    QuantTensor, Shape,
};

/// Encoder hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub heads: usize,
    pub head_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub seq_len: usize,
}

impl ModelDims {
    pub fn bert_base() -> Self {
        ModelDims {
            heads: 12,
            head_size: 64,
            d_model: 768,
            d_ff: 3072,
            seq_len: 128,
        }
    }

    /// Smoke-scale model used by the oracle sweeps.
    pub fn tiny() -> Self {
        ModelDims {
            heads: 2,
            head_size: 8,
            d_model: 16,
            d_ff: 64,
            seq_len: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ModelDims {
            heads,
            head_size,
            d_model,
            d_ff,
            seq_len,
        } = *self;
        if heads == 0 || head_size == 0 || d_ff == 0 || seq_len == 0 {
            return Err(Error::Params(format!("all extents must be positive: {self:?}")));
        }
        if d_model != heads * head_size {
            return Err(Error::Params(format!(
                "d_model {d_model} != heads {heads} x head_size {head_size}"
            )));
        }
        Ok(())
    }

    /// Parameter bytes of one layer: int8 weights, int32 biases, fp32 LN vectors.
    pub fn layer_param_bytes(&self) -> u64 {
        let (d, f) = (self.d_model as u64, self.d_ff as u64);
        let weights = 4 * d * d + 2 * d * f;
        let biases = 4 * (4 * d + f + d);
        let ln = 4 * 4 * d;
        weights + biases + ln
    }
}

/// Quantization scales at every int8 boundary of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerScales {
    pub input: f32,
    pub q: f32,
    pub k: f32,
    pub v: f32,
    pub ctx: f32,
    pub ln1: f32,
    pub gelu: f32,
    pub ln2: f32,
}

impl LayerScales {
    fn unit() -> Self {
        LayerScales {
            input: 1.0,
            q: 1.0,
            k: 1.0,
            v: 1.0,
            ctx: 1.0,
            ln1: 1.0,
            gelu: 1.0,
            ln2: 1.0,
        }
    }

    fn fields(&self) -> [(&'static str, f32); 8] {
        [
            ("input", self.input),
            ("q", self.q),
            ("k", self.k),
            ("v", self.v),
            ("ctx", self.ctx),
            ("ln1", self.ln1),
            ("gelu", self.gelu),
            ("ln2", self.ln2),
        ]
    }

    fn set(&mut self, name: &str, v: f32) -> Result<()> {
        match name {
            "input" => self.input = v,
            "q" => self.q = v,
            "k" => self.k = v,
            "v" => self.v = v,
            "ctx" => self.ctx = v,
            "ln1" => self.ln1 = v,
            "gelu" => self.gelu = v,
            "ln2" => self.ln2 = v,
            _ => return Err(Error::Format(format!("unknown scale `{name}`"))),
        }
        Ok(())
    }
}

/// Quantized parameters of one encoder layer. Weights are `(d_in, d_out)` with
/// the heads of `wq`/`wk`/`wv` concatenated along the output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dims: ModelDims,
    pub eps: f32,
    pub wq: QuantTensor,
    pub wk: QuantTensor,
    pub wv: QuantTensor,
    pub wo: QuantTensor,
    pub w1: QuantTensor,
    pub w2: QuantTensor,
    pub bq: Vec<i32>,
    pub bk: Vec<i32>,
    pub bv: Vec<i32>,
    pub bo: Vec<i32>,
    pub b1: Vec<i32>,
    pub b2: Vec<i32>,
    pub gamma1: Vec<f32>,
    pub beta1: Vec<f32>,
    pub gamma2: Vec<f32>,
    pub beta2: Vec<f32>,
    pub scales: LayerScales,
}

impl EncoderParams {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Params(format!("eps must be positive, got {}", self.eps)));
        }
        let (d, f) = (self.dims.d_model, self.dims.d_ff);
        let expect = [
            ("wq", &self.wq, d, d),
            ("wk", &self.wk, d, d),
            ("wv", &self.wv, d, d),
            ("wo", &self.wo, d, d),
            ("w1", &self.w1, d, f),
            ("w2", &self.w2, f, d),
        ];
        for (name, w, r, c) in expect {
            if w.shape().dims() != [r, c] {
                return Err(Error::Params(format!("{name} has shape {}, expected ({r}x{c})", w.shape())));
            }
        }
        let lens = [
            ("bq", self.bq.len(), d),
            ("bk", self.bk.len(), d),
            ("bv", self.bv.len(), d),
            ("bo", self.bo.len(), d),
            ("b1", self.b1.len(), f),
            ("b2", self.b2.len(), d),
            ("gamma1", self.gamma1.len(), d),
            ("beta1", self.beta1.len(), d),
            ("gamma2", self.gamma2.len(), d),
            ("beta2", self.beta2.len(), d),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(Error::Params(format!("{name} has length {got}, expected {want}")));
            }
        }
        for (name, s) in self.scales.fields() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Params(format!("scale {name} = {s}")));
            }
        }
        Ok(())
    }
}

/// Unquantized parameters drawn from the generator, before calibration.
#[derive(Debug, Clone)]
pub struct FloatLayer {
    pub weights: [FpTensor; 6],
    pub biases: [Vec<f32>; 6],
    pub gamma1: Vec<f32>,
    pub beta1: Vec<f32>,
    pub gamma2: Vec<f32>,
    pub beta2: Vec<f32>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, mean: f32, std: f32) -> Vec<f32> {
    let dist = Normal::new(mean, std).expect("valid normal");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl FloatLayer {
    pub fn random(dims: &ModelDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, f) = (dims.d_model, dims.d_ff);
        let shapes = [(d, d), (d, d), (d, d), (d, d), (d, f), (f, d)];
        let mut weights = Vec::with_capacity(6);
        for (r, c) in shapes {
            let data = normal_vec(rng, r * c, 0.0, 1.0 / (r as f32).sqrt());
            weights.push(FpTensor::new(data, Shape::matrix(r, c)?)?);
        }
        let biases = shapes.map(|(_, c)| normal_vec(rng, c, 0.0, 0.1));
        Ok(FloatLayer {
            weights: weights.try_into().expect("six weights"),
            biases,
            gamma1: normal_vec(rng, d, 1.0, 0.1),
            beta1: normal_vec(rng, d, 0.0, 0.1),
            gamma2: normal_vec(rng, d, 1.0, 0.1),
            beta2: normal_vec(rng, d, 0.0, 0.1),
        })
    }

    /// Quantizes weights per tensor and biases at `input_scale * weight_scale`.
    /// Activation scales other than `input` are left at 1.0 for calibration.
    pub fn quantize(&self, dims: ModelDims, eps: f32, input_scale: f32) -> Result<EncoderParams> {
        let mut qw = Vec::with_capacity(6);
        for w in &self.weights {
            qw.push(quantize(w, calibrate_scale(w)?)?);
        }
        // Q, K and V read the layer input; wo reads ctx; w1 reads ln1; w2 reads gelu.
        // Only the input scale is known here, so biases behind later boundaries are
        // requantized by `requantize_biases` once calibration fixes their scales.
        let mut scales = LayerScales::unit();
        scales.input = input_scale;
        let mut p = EncoderParams {
            dims,
            eps,
            wq: qw[0].clone(),
            wk: qw[1].clone(),
            wv: qw[2].clone(),
            wo: qw[3].clone(),
            w1: qw[4].clone(),
            w2: qw[5].clone(),
            bq: Vec::new(),
            bk: Vec::new(),
            bv: Vec::new(),
            bo: Vec::new(),
            b1: Vec::new(),
            b2: Vec::new(),
            gamma1: self.gamma1.clone(),
            beta1: self.beta1.clone(),
            gamma2: self.gamma2.clone(),
            beta2: self.beta2.clone(),
            scales,
        };
        self.requantize_biases(&mut p);
        Ok(p)
    }

    /// Recomputes every int32 bias from the current activation scales.
    pub fn requantize_biases(&self, p: &mut EncoderParams) {
        let q = |b: &[f32], s: f32| -> Vec<i32> { b.iter().map(|&v| (v / s).round_ties_even() as i32).collect() };
        let s = p.scales;
        p.bq = q(&self.biases[0], s.input * p.wq.scale());
        p.bk = q(&self.biases[1], s.input * p.wk.scale());
        p.bv = q(&self.biases[2], s.input * p.wv.scale());
        p.bo = q(&self.biases[3], s.ctx * p.wo.scale());
        p.b1 = q(&self.biases[4], s.ln1 * p.w1.scale());
        p.b2 = q(&self.biases[5], s.gelu * p.w2.scale());
    }
}

/// Default layer-norm epsilon.
pub const DEFAULT_EPS: f32 = 1e-5;

/// A generated model: per-layer parameters plus the int8 input sequence they
/// were calibrated on.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub layers: Vec<EncoderParams>,
    pub input: QuantTensor,
}

/// Draws a seeded model and calibrates every activation scale on its input.
pub fn generate_model(dims: ModelDims, n_layers: usize, seed: u64) -> Result<Model> {
    dims.validate()?;
    if n_layers == 0 {
        return Err(Error::Params("at least one layer required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floats = (0..n_layers)
        .map(|_| FloatLayer::random(&dims, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let x = FpTensor::new(
        normal_vec(&mut rng, dims.seq_len * dims.d_model, 0.0, 1.0),
        Shape::matrix(dims.seq_len, dims.d_model)?,
    )?;
    let input = quantize(&x, calibrate_scale(&x)?)?;
    let mut layer_in = super::LayerInput::from_quant(input.clone());
    let mut layers = Vec::with_capacity(n_layers);
    for fl in &floats {
        let p = super::encoder::calibrate_layer(fl, dims, DEFAULT_EPS, &layer_in)?;
        layer_in = super::encoder::encoder_layer_ref(&layer_in, &p, crate::exec::Exec::default())?;
        layers.push(p);
    }
    Ok(Model { dims, layers, input })
}

fn bias_tensor(b: &[i32]) -> Result<AnyTensor> {
    Ok(AnyTensor::Int32(AccTensor::new(b.to_vec(), 1.0, Shape::vector(b.len())?)?))
}

fn vec_tensor(v: &[f32]) -> Result<AnyTensor> {
    Ok(AnyTensor::Fp32(FpTensor::new(v.to_vec(), Shape::vector(v.len())?)?))
}

impl Model {
    /// Writes `model.txt`, the input and one tensor file per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        let d = self.dims;
        let mut meta = String::new();
        let _ = writeln!(meta, "# encoder model description");
        let _ = writeln!(meta, "heads = {}", d.heads);
        let _ = writeln!(meta, "head_size = {}", d.head_size);
        let _ = writeln!(meta, "d_model = {}", d.d_model);
        let _ = writeln!(meta, "d_ff = {}", d.d_ff);
        let _ = writeln!(meta, "seq_len = {}", d.seq_len);
        let _ = writeln!(meta, "layers = {}", self.layers.len());
        for (l, p) in self.layers.iter().enumerate() {
            let _ = writeln!(meta, "layer{l}.eps = {:e}", p.eps);
            for (name, s) in p.scales.fields() {
                let _ = writeln!(meta, "layer{l}.scale.{name} = {:e}", s);
            }
        }
        std::fs::write(dir.join("model.txt"), meta)?;
        write_tensor_file(&dir.join("input.qtsr"), &AnyTensor::Int8(self.input.clone()))?;
        for (l, p) in self.layers.iter().enumerate() {
            for (name, w) in [("wq", &p.wq), ("wk", &p.wk), ("wv", &p.wv), ("wo", &p.wo), ("w1", &p.w1), ("w2", &p.w2)] {
                write_tensor_file(&dir.join(format!("layer{l}_{name}.qtsr")), &AnyTensor::Int8(w.clone()))?;
            }
            for (name, b) in [("bq", &p.bq), ("bk", &p.bk), ("bv", &p.bv), ("bo", &p.bo), ("b1", &p.b1), ("b2", &p.b2)] {
                write_tensor_file(&dir.join(format!("layer{l}_{name}.qtsr")), &bias_tensor(b)?)?;
            }
            for (name, v) in [
                ("gamma1", &p.gamma1),
                ("beta1", &p.beta1),
                ("gamma2", &p.gamma2),
                ("beta2", &p.beta2),
            ] {
                write_tensor_file(&dir.join(format!("layer{l}_{name}.qtsr")), &vec_tensor(v)?)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("model.txt"))
            .map_err(|e| Error::Io(format!("{}: {e}", dir.join("model.txt").display())))?;
        let mut kv = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("model.txt line {}: expected key = value", i + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> { kv.get(k).ok_or_else(|| Error::Format(format!("model.txt missing `{k}`"))) };
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Format(format!("bad integer for `{k}`"))) };
        let dims = ModelDims {
            heads: num("heads")?,
            head_size: num("head_size")?,
            d_model: num("d_model")?,
            d_ff: num("d_ff")?,
            seq_len: num("seq_len")?,
        };
        dims.validate()?;
        let n = num("layers")?;
        let input = read_tensor_file(&dir.join("input.qtsr"))?.into_quant()?;
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let flt = |k: &str| -> Result<f32> {
                get(k)?.parse().map_err(|_| Error::Format(format!("bad number for `{k}`")))
            };
            let mut scales = LayerScales::unit();
            for (name, _) in LayerScales::unit().fields() {
                scales.set(name, flt(&format!("layer{l}.scale.{name}"))?)?;
            }
            let file = |name: &str| read_tensor_file(&dir.join(format!("layer{l}_{name}.qtsr")));
            let w = |name: &str| file(name)?.into_quant();
            let b = |name: &str| Ok::<_, Error>(file(name)?.into_acc()?.data().to_vec());
            let v = |name: &str| Ok::<_, Error>(file(name)?.into_fp()?.into_data());
            let p = EncoderParams {
                dims,
                eps: flt(&format!("layer{l}.eps"))?,
                wq: w("wq")?,
                wk: w("wk")?,
                wv: w("wv")?,
                wo: w("wo")?,
                w1: w("w1")?,
                w2: w("w2")?,
                bq: b("bq")?,
                bk: b("bk")?,
                bv: b("bv")?,
                bo: b("bo")?,
                b1: b("b1")?,
                b2: b("b2")?,
                gamma1: v("gamma1")?,
                beta1: v("beta1")?,
                gamma2: v("gamma2")?,
                beta2: v("beta2")?,
                scales,
            };
            p.validate()?;
            layers.push(p);
        }
        if input.shape().dims() != [dims.seq_len, dims.d_model] {
            return Err(Error::Params(format!("input shape {} does not match model", input.shape())));
        }
        Ok(Model { dims, layers, input })
    }

    /// fp32 view of the weights, used by the pure-fp32 comparison path.
    pub fn float_weights(p: &EncoderParams) -> [FpTensor; 6] {
        [&p.wq, &p.wk, &p.wv, &p.wo, &p.w1, &p.w2].map(dequantize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_validation() {
        assert!(ModelDims::bert_base().validate().is_ok());
        assert!(ModelDims::tiny().validate().is_ok());
        let mut bad = ModelDims::tiny();
        bad.d_model = 15;
        assert!(matches!(bad.validate(), Err(Error::Params(_))));
    }

    #[test]
    fn bert_base_parameter_bytes() {
        // 4 d^2 + 2 d f int8 weights, (5d + f) int32 biases, 4d fp32 LN vectors
        let d = 768u64;
        let f = 3072u64;
        let expected = 4 * d * d + 2 * d * f + 4 * (5 * d + f) + 16 * d;
        assert_eq!(ModelDims::bert_base().layer_param_bytes(), expected);
        assert_eq!(expected, 7_117_824);
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_model(ModelDims::tiny(), 2, 7).unwrap();
        let b = generate_model(ModelDims::tiny(), 2, 7).unwrap();
        let c = generate_model(ModelDims::tiny(), 2, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for p in &a.layers {
            p.validate().unwrap();
        }
        // layer l+1 reads what layer l wrote
        assert_eq!(a.layers[1].scales.input, a.layers[0].scales.ln2);
    }
}
