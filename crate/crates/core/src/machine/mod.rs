//! Machine description: configuration, instruction vocabulary and memory map.

mod config;
mod isa;
mod memory;

pub use config::{physical_vectors, validate_config, AluOp, ArchConfig};
pub use isa::{Dep, DepKind, Instruction, Opcode, Tile, Unit};
pub use memory::{alloc_memory, MemoryMap, Placement, Region, RegionKind, Utilization};
