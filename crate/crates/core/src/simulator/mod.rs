//! Deterministic cycle-level execution of a schedule.

mod kernels;
mod report;
mod state;

pub use kernels::fire;
pub use report::{report, scratch_high_water, units_busy_at, BlockShare, CycleReport, UnitUsage};
pub use state::{MachineState, Mode};

use crate::error::{Error, Result};
use crate::machine::{ArchConfig, MemoryMap};
use crate::reference::{EncoderParams, Model, Trace, Value};
use crate::scheduler::{validate_schedule, ComputeGraph, Schedule};
use crate::tensor::{dequantize, AccTensor, FpTensor, QuantTensor, Shape};

#[derive(Debug, Clone)]
pub struct SimResult {
    /// Every tensor the run produced, plus the initial image.
    pub values: Trace,
    pub report: CycleReport,
}

/// Runs `s` to completion. In functional mode `init` must hold every
/// constant and input tensor of `g`.
pub fn run(s: &Schedule, g: &ComputeGraph, memory: &MemoryMap, init: Trace, cfg: &ArchConfig, mode: Mode) -> Result<SimResult> {
    validate_schedule(s).map_err(Error::Conflicts)?;
    let mut st = MachineState::new(s, Some(g), cfg, init, mode)?;
    while !st.finished() {
        st.step()?;
    }
    Ok(SimResult { values: st.values, report: report(s, Some(g), memory, cfg) })
}

fn bias(b: &[i32]) -> Result<Value> {
    Ok(Value::Acc(AccTensor::new(b.to_vec(), 1.0, Shape::vector(b.len())?)?))
}

fn put_layer(img: &mut Trace, l: usize, p: &EncoderParams) -> Result<()> {
    let t = |n: &str| format!("layer{l}.{n}");
    for (n, w) in [("wq", &p.wq), ("wk", &p.wk), ("wv", &p.wv), ("wo", &p.wo), ("w1", &p.w1), ("w2", &p.w2)] {
        img.insert(t(n), Value::Quant(w.clone()));
    }
    for (n, b) in [("bq", &p.bq), ("bk", &p.bk), ("bv", &p.bv), ("bo", &p.bo), ("b1", &p.b1), ("b2", &p.b2)] {
        img.insert(t(n), bias(b)?);
    }
    for (n, v) in [("gamma1", &p.gamma1), ("beta1", &p.beta1), ("gamma2", &p.gamma2), ("beta2", &p.beta2)] {
        img.insert(t(n), Value::Vector(v.clone()));
    }
    Ok(())
}

/// MEM image for a model: every layer's parameters plus the input pair.
pub fn model_image(m: &Model) -> Result<Trace> {
    let mut img = Trace::new();
    for (l, p) in m.layers.iter().enumerate() {
        put_layer(&mut img, l, p)?;
    }
    img.insert("input.q".into(), Value::Quant(m.input.clone()));
    img.insert("input.fp".into(), Value::Fp(dequantize(&m.input)));
    Ok(img)
}

/// MEM image for a single layer `p` applied to `x`.
pub fn layer_image(p: &EncoderParams, x: &QuantTensor) -> Result<Trace> {
    let mut img = Trace::new();
    put_layer(&mut img, 0, p)?;
    img.insert("input.q".into(), Value::Quant(x.clone()));
    img.insert("input.fp".into(), Value::Fp(dequantize(x)));
    Ok(img)
}

/// MEM image for a standalone add & norm.
pub fn layernorm_image(acc: AccTensor, residual: FpTensor, gamma: Vec<f32>, beta: Vec<f32>) -> Trace {
    let mut img = Trace::new();
    img.insert("layer0.o_acc".into(), Value::Acc(acc));
    img.insert("input.fp".into(), Value::Fp(residual));
    img.insert("layer0.gamma1".into(), Value::Vector(gamma));
    img.insert("layer0.beta1".into(), Value::Vector(beta));
    img
}

/// Names present in both traces whose values differ bit-for-bit, and names
/// of `expected` missing from `actual`.
pub fn trace_mismatches(actual: &Trace, expected: &Trace) -> Vec<String> {
    expected
        .iter()
        .filter_map(|(k, v)| match actual.get(k) {
            None => Some(format!("{k}: missing")),
            Some(a) if !a.bit_eq(v) => Some(format!("{k}: differs")),
            _ => None,
        })
        .collect()
}
