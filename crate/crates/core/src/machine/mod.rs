//! Simulated protection-key machine: key-tagged memory, a PKRU model,
//! partition heaps, the address-taken function table, an interpreter that
//! checks every access, the attack primitive and the reference monitor.

pub mod attack;
pub mod exec;
pub mod heap;
pub mod memory;
pub mod monitor;
pub mod pkru;
pub mod state;
pub mod trace;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::policy::StatementId;

pub use attack::{attack, AttackOp, AttackReport};
pub use exec::{Completion, Limits};
pub use monitor::{oracle_check, OracleReport, Violation, ViolationKind};
pub use pkru::Pkru;
pub use state::{init, InitError, MachineState};
pub use trace::{format_trace, parse_trace, TraceEvent, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultKind {
    PkeyAccessFault,
    PkeyWriteFault,
    CfiFault,
    DoubleFree,
    InvalidFree,
    UnknownKey,
    OutOfMemory,
    InvalidSize,
    ConflictingRegistration,
    UnrepresentableRights,
    ResourceLimit,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A fault stops the run; machine state up to that point stays inspectable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub kind: FaultKind,
    /// Faulting address, call target, or key, depending on `kind`.
    pub addr: u64,
    pub stmt: StatementId,
    pub detail: Option<String>,
}

impl Fault {
    pub fn new(kind: FaultKind, addr: u64, stmt: StatementId) -> Self {
        Fault { kind, addr, stmt, detail: None }
    }

    pub fn with_detail(mut self, detail: &str) -> Self {
        self.detail = Some(detail.to_string());
        self
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {:#x} in statement {}", self.kind, self.addr, self.stmt)?;
        if let Some(d) = &self.detail {
            write!(f, " ({d})")?;
        }
        Ok(())
    }
}

impl std::error::Error for Fault {}
