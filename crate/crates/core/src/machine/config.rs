use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Shape;

/// Pointwise VXM operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    Max,
    Tanh,
    Exp,
    Rsqrt,
    Recip,
    Cast,
    ClampRound,
    /// Operand staging: forwards a stream operand to re-time it within a chain.
    Move,
}

impl AluOp {
    pub const ALL: [AluOp; 11] = [
        AluOp::Add,
        AluOp::Sub,
        AluOp::Mul,
        AluOp::Max,
        AluOp::Tanh,
        AluOp::Exp,
        AluOp::Rsqrt,
        AluOp::Recip,
        AluOp::Cast,
        AluOp::ClampRound,
        AluOp::Move,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Mul => "mul",
            AluOp::Max => "max",
            AluOp::Tanh => "tanh",
            AluOp::Exp => "exp",
            AluOp::Rsqrt => "rsqrt",
            AluOp::Recip => "recip",
            AluOp::Cast => "cast",
            AluOp::ClampRound => "clamp_round",
            AluOp::Move => "move",
        }
    }

    pub fn from_name(s: &str) -> Option<AluOp> {
        AluOp::ALL.into_iter().find(|op| op.name() == s)
    }
}

/// Parameterized machine description.
///
/// Hemispheres are collapsed into flat pools: one pool of MXM planes, one
/// pool of VXM ALUs, one pool of memory slices, and direction-tagged streams
/// (ids `0..streams_per_direction` flow east, the rest west).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchConfig {
    pub lane_width: usize,
    pub vxm_alu_count: usize,
    pub mxm_plane_count: usize,
    pub mxm_plane_rows: usize,
    pub mxm_plane_cols: usize,
    pub mem_slice_count: usize,
    pub slice_bytes: u64,
    pub streams_per_direction: usize,
    pub sxm_port_count: usize,
    pub stream_hop_latency_cycles: u64,
    pub alu_latency: BTreeMap<AluOp, u64>,
    pub mxm_install_latency_cycles: u64,
    pub mxm_pipeline_depth_cycles: u64,
    pub sxm_reorder_latency_cycles: u64,
    pub mem_read_latency_cycles: u64,
    pub instruction_bytes: u64,
    pub clock_hz: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::with_lane_width(320)
    }
}

impl ArchConfig {
    /// Default machine scaled to lane width `l`: planes are `l x l`, weight
    /// installs move four rows per cycle.
    pub fn with_lane_width(l: usize) -> Self {
        let alu_latency = AluOp::ALL
            .into_iter()
            .map(|op| {
                let lat = match op {
                    AluOp::Tanh | AluOp::Exp | AluOp::Rsqrt | AluOp::Recip => 3,
                    _ => 1,
                };
                (op, lat)
            })
            .collect();
        ArchConfig {
            lane_width: l,
            vxm_alu_count: 16,
            mxm_plane_count: 4,
            mxm_plane_rows: l,
            mxm_plane_cols: l,
            mem_slice_count: 88,
            slice_bytes: 2_621_440,
            streams_per_direction: 32,
            sxm_port_count: 4,
            stream_hop_latency_cycles: 1,
            alu_latency,
            mxm_install_latency_cycles: (l as u64 / 4).max(1),
            mxm_pipeline_depth_cycles: 20,
            sxm_reorder_latency_cycles: 4,
            mem_read_latency_cycles: 1,
            instruction_bytes: 32,
            clock_hz: 900e6,
        }
    }

    /// Small machine for oracle sweeps: lane width 32.
    pub fn tiny() -> Self {
        Self::with_lane_width(32)
    }

    pub fn latency(&self, op: AluOp) -> u64 {
        self.alu_latency.get(&op).copied().unwrap_or(1)
    }

    pub fn stream_count(&self) -> usize {
        2 * self.streams_per_direction
    }

    pub fn sram_bytes(&self) -> u64 {
        self.mem_slice_count as u64 * self.slice_bytes
    }

    pub fn cycles_to_us(&self, cycles: u64) -> f64 {
        cycles as f64 / self.clock_hz * 1e6
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys absent from the
    /// file keep their defaults, unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ArchConfig::default();
        let mut lane_set = false;
        let mut explicit = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let int = |v: &str| -> Result<u64> {
                v.parse::<u64>()
                    .map_err(|_| Error::Config(format!("line {}: `{k}` expects an integer, got `{v}`", i + 1)))
            };
            match k {
                "lane_width" => {
                    c.lane_width = int(v)? as usize;
                    lane_set = true;
                }
                "vxm_alu_count" => c.vxm_alu_count = int(v)? as usize,
                "mxm_plane_count" => c.mxm_plane_count = int(v)? as usize,
                "mxm_plane_rows" => c.mxm_plane_rows = int(v)? as usize,
                "mxm_plane_cols" => c.mxm_plane_cols = int(v)? as usize,
                "mem_slice_count" => c.mem_slice_count = int(v)? as usize,
                "slice_bytes" => c.slice_bytes = int(v)?,
                "streams_per_direction" => c.streams_per_direction = int(v)? as usize,
                "sxm_port_count" => c.sxm_port_count = int(v)? as usize,
                "stream_hop_latency_cycles" => c.stream_hop_latency_cycles = int(v)?,
                "mxm_install_latency_cycles" => c.mxm_install_latency_cycles = int(v)?,
                "mxm_pipeline_depth_cycles" => c.mxm_pipeline_depth_cycles = int(v)?,
                "sxm_reorder_latency_cycles" => c.sxm_reorder_latency_cycles = int(v)?,
                "mem_read_latency_cycles" => c.mem_read_latency_cycles = int(v)?,
                "instruction_bytes" => c.instruction_bytes = int(v)?,
                "clock_hz" => {
                    c.clock_hz = v
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("line {}: `clock_hz` expects a number", i + 1)))?
                }
                _ => match k.strip_prefix("alu_latency.").and_then(AluOp::from_name) {
                    Some(op) => {
                        c.alu_latency.insert(op, int(v)?);
                    }
                    None => return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1))),
                },
            }
            explicit.insert(k.to_string());
        }
        // Plane geometry and install cost follow the lane width unless given.
        if lane_set {
            let l = c.lane_width;
            if !explicit.contains("mxm_plane_rows") {
                c.mxm_plane_rows = l;
            }
            if !explicit.contains("mxm_plane_cols") {
                c.mxm_plane_cols = l;
            }
            if !explicit.contains("mxm_install_latency_cycles") {
                c.mxm_install_latency_cycles = (l as u64 / 4).max(1);
            }
        }
        Ok(c)
    }

    /// Serializes every key, with comments on the defaults that are modelling
    /// choices rather than published machine facts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# streaming tensor processor configuration");
        let _ = writeln!(s, "lane_width = {}", self.lane_width);
        let _ = writeln!(s, "vxm_alu_count = {}", self.vxm_alu_count);
        let _ = writeln!(s, "mxm_plane_count = {}", self.mxm_plane_count);
        let _ = writeln!(s, "mxm_plane_rows = {}", self.mxm_plane_rows);
        let _ = writeln!(s, "mxm_plane_cols = {}", self.mxm_plane_cols);
        let _ = writeln!(s, "# hemispheres collapsed into one pool of slices");
        let _ = writeln!(s, "mem_slice_count = {}", self.mem_slice_count);
        let _ = writeln!(s, "slice_bytes = {}", self.slice_bytes);
        let _ = writeln!(s, "streams_per_direction = {}", self.streams_per_direction);
        let _ = writeln!(s, "sxm_port_count = {}", self.sxm_port_count);
        let _ = writeln!(s, "# single global SRF-to-SRF hop");
        let _ = writeln!(s, "stream_hop_latency_cycles = {}", self.stream_hop_latency_cycles);
        let _ = writeln!(s, "# modelling defaults, not measured values");
        let _ = writeln!(s, "mxm_install_latency_cycles = {}", self.mxm_install_latency_cycles);
        let _ = writeln!(s, "mxm_pipeline_depth_cycles = {}", self.mxm_pipeline_depth_cycles);
        let _ = writeln!(s, "sxm_reorder_latency_cycles = {}", self.sxm_reorder_latency_cycles);
        let _ = writeln!(s, "mem_read_latency_cycles = {}", self.mem_read_latency_cycles);
        let _ = writeln!(s, "instruction_bytes = {}", self.instruction_bytes);
        for (op, lat) in &self.alu_latency {
            let _ = writeln!(s, "alu_latency.{} = {lat}", op.name());
        }
        let _ = writeln!(s, "clock_hz = {}", self.clock_hz);
        s
    }
}

/// Every invariant violation of `c`; empty when the configuration is usable.
pub fn validate_config(c: &ArchConfig) -> Vec<String> {
    let mut errs = Vec::new();
    if c.lane_width < 4 {
        errs.push(format!("lane width {} is below 4", c.lane_width));
    }
    if c.lane_width % 4 != 0 {
        errs.push("lane width not divisible by 4".to_string());
    }
    let positive = [
        ("vxm_alu_count", c.vxm_alu_count as u64),
        ("mxm_plane_count", c.mxm_plane_count as u64),
        ("mxm_plane_rows", c.mxm_plane_rows as u64),
        ("mxm_plane_cols", c.mxm_plane_cols as u64),
        ("mem_slice_count", c.mem_slice_count as u64),
        ("slice_bytes", c.slice_bytes),
        ("streams_per_direction", c.streams_per_direction as u64),
        ("sxm_port_count", c.sxm_port_count as u64),
        ("instruction_bytes", c.instruction_bytes),
    ];
    for (name, v) in positive {
        if v == 0 {
            errs.push(format!("{name} must be at least 1"));
        }
    }
    let latencies = [
        ("stream_hop_latency_cycles", c.stream_hop_latency_cycles),
        ("mxm_install_latency_cycles", c.mxm_install_latency_cycles),
        ("mxm_pipeline_depth_cycles", c.mxm_pipeline_depth_cycles),
        ("sxm_reorder_latency_cycles", c.sxm_reorder_latency_cycles),
        ("mem_read_latency_cycles", c.mem_read_latency_cycles),
    ];
    for (name, v) in latencies {
        if v < 1 {
            errs.push(format!("{name} must be at least 1 cycle"));
        }
    }
    for op in AluOp::ALL {
        if c.latency(op) < 1 {
            errs.push(format!("alu_latency.{} must be at least 1 cycle", op.name()));
        }
    }
    if c.mxm_plane_rows != c.lane_width || c.mxm_plane_cols != c.lane_width {
        errs.push(format!(
            "MXM plane {}x{} does not match lane width {}",
            c.mxm_plane_rows, c.mxm_plane_cols, c.lane_width
        ));
    }
    if !(c.clock_hz > 0.0 && c.clock_hz.is_finite()) {
        errs.push("clock_hz must be positive".to_string());
    }
    errs
}

/// Physical vectors needed for `shape`: every inner-dimension column splits
/// into `ceil(inner / lanes)` vectors.
pub fn physical_vectors(shape: &Shape, lanes: usize) -> u64 {
    (shape.outer() * shape.inner().div_ceil(lanes)) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        assert!(validate_config(&ArchConfig::default()).is_empty());
        assert!(validate_config(&ArchConfig::tiny()).is_empty());
    }

    #[test]
    fn lane_width_ten_rejected() {
        let c = ArchConfig::with_lane_width(10);
        let errs = validate_config(&c);
        assert!(errs.iter().any(|e| e == "lane width not divisible by 4"), "{errs:?}");
    }

    #[test]
    fn eight_alus_is_a_valid_config() {
        let mut c = ArchConfig::default();
        c.vxm_alu_count = 8;
        assert!(validate_config(&c).is_empty());
    }

    #[test]
    fn default_capacity_is_220_mib() {
        assert_eq!(ArchConfig::default().sram_bytes(), 220 * 1024 * 1024);
    }

    #[test]
    fn physical_vector_counts() {
        let v = |k: usize, j: usize, l: usize| physical_vectors(&Shape::matrix(j, k).unwrap(), l);
        assert_eq!(v(320, 1, 320), 1);
        assert_eq!(v(768, 128, 320), 384);
        assert_eq!(v(64, 128, 320), 128);
        for k in 1..700 {
            assert!(v(k + 1, 3, 320) >= v(k, 3, 320));
            assert!(v(k, 4, 320) >= v(k, 3, 320));
        }
    }

    #[test]
    fn text_roundtrip_and_fail_closed() {
        let c = ArchConfig::tiny();
        assert_eq!(ArchConfig::parse(&c.to_text()).unwrap(), c);
        assert!(matches!(ArchConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(ArchConfig::parse("lane_width = x").is_err());
        assert!(ArchConfig::parse("lane_width").is_err());
        let c = ArchConfig::parse("lane_width = 64 # small\nalu_latency.exp = 5").unwrap();
        assert_eq!(c.mxm_plane_rows, 64);
        assert_eq!(c.mxm_install_latency_cycles, 16);
        assert_eq!(c.latency(AluOp::Exp), 5);
    }
}
