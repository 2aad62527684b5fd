//! ALU chain recipes. Each recipe lists the VXM operations one vector passes
//! through, in order; a chain occupies one ALU per stage.

use crate::error::{Error, Result};
use crate::machine::{AluOp, ArchConfig};
use AluOp::*;

/// The GELU body: nine arithmetic stages following the scalar kernel's
/// evaluation order, interleaved with four operand-staging moves that carry
/// `x` forward to the stages that need it again.
pub const GELU_STAGES: [AluOp; 13] = [Mul, Mul, Move, Mul, Add, Move, Mul, Tanh, Move, Add, Move, Mul, Mul];

/// int32 accumulator to int8: cast, scale, round-and-clamp.
pub const REQUANT: [AluOp; 3] = [Cast, Mul, ClampRound];
/// Dequantize two stages, GELU body, quantize one stage.
pub const GELU_CHAIN: [AluOp; 16] = [
    Cast, Mul, Mul, Mul, Move, Mul, Add, Move, Mul, Tanh, Move, Add, Move, Mul, Mul, ClampRound,
];
/// Dequantize, residual add, running sum.
pub const LN_PASS1: [AluOp; 4] = [Cast, Mul, Add, Add];
/// Centre, square, accumulate variance, scale by gamma.
pub const LN_PASS2: [AluOp; 4] = [Sub, Mul, Add, Mul];
/// Multiply by rstd, add beta, scale, round to int8.
pub const LN_PASS3: [AluOp; 4] = [Mul, Add, Mul, ClampRound];
/// Reduce the four partial sums and divide by the row length.
pub const LN_MEAN_STEP: [AluOp; 3] = [Add, Add, Mul];
/// Reduce partial variances, divide, add epsilon, reciprocal square root.
pub const LN_RSTD_STEP: [AluOp; 5] = [Add, Add, Mul, Add, Rsqrt];
/// Dequantize with the folded attention scale, running max.
pub const SM_PASS1: [AluOp; 3] = [Cast, Mul, Max];
/// Subtract the max, exponentiate, running sum.
pub const SM_PASS2: [AluOp; 3] = [Sub, Exp, Add];
/// Multiply by the reciprocal sum, quantize.
pub const SM_PASS3: [AluOp; 2] = [Mul, ClampRound];
pub const SM_MAX_STEP: [AluOp; 2] = [Max, Max];
pub const SM_RECIP_STEP: [AluOp; 3] = [Add, Add, Recip];

/// Chains processing four vectors per cycle in LN and softmax passes.
pub const PARALLEL_CHAINS: usize = 4;

/// ALUs the encoder mapping needs at once (GELU and every LN pass).
pub const REQUIRED_ALUS: usize = 16;

/// An allocated chain: `alus[i]` runs `ops[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AluChain {
    pub alus: Vec<u16>,
    pub ops: Vec<AluOp>,
}

impl AluChain {
    /// Allocates `ops` onto consecutive ALUs starting at `first`.
    pub fn new(ops: &[AluOp], first: u16, cfg: &ArchConfig) -> Result<Self> {
        let end = first as usize + ops.len();
        if end > cfg.vxm_alu_count {
            return Err(Error::Schedule(format!(
                "chain of {} stages from ALU {first} exceeds the {} available ALUs",
                ops.len(),
                cfg.vxm_alu_count
            )));
        }
        Ok(AluChain { alus: (first..end as u16).collect(), ops: ops.to_vec() })
    }

    pub fn stages(&self) -> usize {
        self.ops.len()
    }

    pub fn latency(&self, cfg: &ArchConfig) -> u64 {
        latency(&self.ops, cfg)
    }
}

pub fn latency(ops: &[AluOp], cfg: &ArchConfig) -> u64 {
    ops.iter().map(|&op| cfg.latency(op)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_chain_is_thirteen_plus_three() {
        assert_eq!(GELU_STAGES.len(), 13);
        let compute = GELU_STAGES.iter().filter(|&&op| op != Move).count();
        assert_eq!(compute, 9);
        assert_eq!(&GELU_CHAIN[2..15], &GELU_STAGES);
        assert_eq!(GELU_CHAIN.len() - GELU_STAGES.len(), 3);
        assert_eq!(GELU_CHAIN.len(), REQUIRED_ALUS);
    }

    #[test]
    fn ln_passes_fill_the_vxm() {
        for pass in [&LN_PASS1[..], &LN_PASS2, &LN_PASS3] {
            assert_eq!(pass.len() * PARALLEL_CHAINS, REQUIRED_ALUS);
        }
    }

    #[test]
    fn chain_allocation_respects_alu_count() {
        let cfg = ArchConfig::default();
        let c = AluChain::new(&GELU_CHAIN, 0, &cfg).unwrap();
        assert_eq!((c.stages(), c.alus[15]), (16, 15));
        assert_eq!(c.latency(&cfg), 18);
        assert!(AluChain::new(&REQUANT, 14, &cfg).is_err());
        let mut small = cfg.clone();
        small.vxm_alu_count = 8;
        assert!(AluChain::new(&GELU_CHAIN, 0, &small).is_err());
    }
}
