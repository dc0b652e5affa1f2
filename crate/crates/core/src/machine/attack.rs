//! Arbitrary read/write primitive, constrained by the PKRU like any other
//! code in the acting partition.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::policy::PartitionLabel;

use super::exec::Access;
use super::state::MachineState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackOp {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackReport {
    pub bytes_leaked: u64,
    pub bytes_corrupted: u64,
    pub faults: u64,
    pub range: String,
}

/// Byte value written by write sweeps.
pub const POISON: u8 = 0x41;

/// Sweep `range` one byte at a time with the acting partition's default
/// rights loaded. Faults are counted, never raised.
pub fn attack(state: &mut MachineState, acting: PartitionLabel, op: AttackOp, range: Range<u64>) -> AttackReport {
    let vector = state.runtime.keys.to_vector(&state.runtime.policy.default_vector(acting));
    state.load_pkru(&vector).expect("default rights are representable");
    let mut report = AttackReport {
        bytes_leaked: 0,
        bytes_corrupted: 0,
        faults: 0,
        range: format!("{:#x}..{:#x}", range.start, range.end),
    };
    for addr in range {
        match op {
            AttackOp::Read => match state.check_access(addr, Access::Read) {
                Ok(()) => {
                    let _ = state.process.memory.read(addr);
                    report.bytes_leaked += 1;
                }
                Err(_) => report.faults += 1,
            },
            AttackOp::Write => match state.check_access(addr, Access::Write) {
                Ok(()) => {
                    state.process.memory.write(addr, POISON);
                    report.bytes_corrupted += 1;
                }
                Err(_) => report.faults += 1,
            },
        }
    }
    report
}
