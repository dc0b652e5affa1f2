//! Reference monitor. Runs the uninstrumented IR and judges every access
//! directly against the policy tuple: no keys, no PKRU, no runtime calls.

use std::collections::{BTreeMap, BTreeSet};

use crate::instrument::layout::{assign_sections, RegionKind};
use crate::lang::analysis::allocation_partition;
use crate::lang::ir::*;
use crate::policy::{effective_rights, map_partitions_to_keys, Policy, ProtectionKey, StatementId};

use super::exec::{Access, Completion, Hooks, Interpreter, Limits};
use super::memory::Process;
use super::trace::TraceEvent;
use super::{Fault, FaultKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationKind {
    Read,
    Write,
    Unmapped,
    Cfi,
}

impl ViolationKind {
    /// The fault an enforcing machine must raise for this violation.
    pub fn fault_kind(self) -> FaultKind {
        match self {
            ViolationKind::Read | ViolationKind::Unmapped => FaultKind::PkeyAccessFault,
            ViolationKind::Write => FaultKind::PkeyWriteFault,
            ViolationKind::Cfi => FaultKind::CfiFault,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Violation {
    pub stmt: StatementId,
    pub kind: ViolationKind,
    pub addr: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleReport {
    /// Violations along the executed path. Execution stops at the first,
    /// since nothing after it is reachable under enforcement.
    pub violations: Vec<Violation>,
    /// How execution ended when no violation occurred, or a non-policy
    /// runtime error (double free, resource limit, ...).
    pub outcome: Result<Completion, Fault>,
}

impl OracleReport {
    pub fn first(&self) -> Option<&Violation> {
        self.violations.first()
    }

    pub fn as_set(&self) -> BTreeSet<(StatementId, ViolationKind)> {
        self.violations.iter().map(|v| (v.stmt, v.kind)).collect()
    }
}

struct Monitor<'a> {
    policy: &'a Policy,
    heap_keys: BTreeMap<InstRef, ProtectionKey>,
    readonly_pages: BTreeSet<u64>,
    taken: BTreeSet<FuncId>,
    violations: Vec<Violation>,
}

impl Monitor<'_> {
    fn violation(&mut self, stmt: StatementId, kind: ViolationKind, addr: u64) -> Fault {
        self.violations.push(Violation { stmt, kind, addr });
        Fault::new(kind.fault_kind(), addr, stmt)
    }
}

impl Hooks for Monitor<'_> {
    fn check(&mut self, proc: &Process, stmt: StatementId, addr: u64, access: Access) -> Result<(), Fault> {
        let Some(region) = proc.layout.region_at(addr) else {
            return Err(self.violation(stmt, ViolationKind::Unmapped, addr));
        };
        if region.kind == RegionKind::Runtime {
            return Ok(());
        }
        // Attribute the byte to a datum: a global, then a heap object, then the region.
        let (partition, immutable) = if let Some(sym) = proc.layout.symbol_at(addr) {
            (sym.partition, sym.immutable)
        } else if let Some((partition, _)) = proc.heap_object(addr) {
            (partition, false)
        } else {
            let constant = self.readonly_pages.contains(&(addr / proc.layout.page_size));
            (region.partition.expect("application region"), constant)
        };
        let rights = effective_rights(stmt, partition, self.policy, immutable);
        match access {
            Access::Read if !rights.can_read() => Err(self.violation(stmt, ViolationKind::Read, addr)),
            Access::Write if !rights.can_write() => Err(self.violation(stmt, ViolationKind::Write, addr)),
            _ => Ok(()),
        }
    }

    fn enter(&mut self, ir: &IRModule, callee: FuncId, indirect: bool, stmt: StatementId) -> Result<(), Fault> {
        // Valid indirect targets are exactly the functions whose address the
        // program has taken so far.
        if indirect && !self.taken.contains(&callee) {
            let _ = ir;
            return Err(self.violation(stmt, ViolationKind::Cfi, function_address(callee)));
        }
        Ok(())
    }

    fn leave(&mut self, _ir: &IRModule, _function: FuncId) {}

    fn take_address(&mut self, function: FuncId) {
        self.taken.insert(function);
    }

    fn runtime(&mut self, _: &IRModule, _: FuncId, _: &Inst, _: Option<&Inst>, _: i64) -> Result<(), Fault> {
        Ok(())
    }

    fn heap_key(&mut self, site: InstRef) -> ProtectionKey {
        self.heap_keys.get(&site).copied().unwrap_or_default()
    }

    fn event(&mut self, _event: TraceEvent) {}
}

/// Run `ir` under the reference monitor with the same layout, heaps and
/// input placement the machine uses.
pub fn oracle_check(ir: &IRModule, policy: &Policy, input: &[u8]) -> OracleReport {
    oracle_check_with(ir, policy, input, Limits::default())
}

pub fn oracle_check_with(ir: &IRModule, policy: &Policy, input: &[u8], limits: Limits) -> OracleReport {
    let keys = map_partitions_to_keys(&policy.labels()).unwrap_or_default();
    let layout = assign_sections(ir, &keys);
    let done = |outcome| OracleReport { violations: Vec::new(), outcome };
    let Ok(mut proc) = Process::new(&layout, &keys) else {
        return done(Err(Fault::new(FaultKind::ResourceLimit, 0, StatementId(0)).with_detail("layout")));
    };
    proc.load_image(ir);
    let Some(entry) = ir.function_by_name("main") else {
        return done(Ok(Completion::Returned(0)));
    };
    let mut heap_keys = BTreeMap::new();
    for f in &ir.functions {
        for inst in f.insts() {
            if matches!(inst.op, Op::HeapAlloc { .. } | Op::HeapFree { .. }) {
                let site = InstRef { function: f.id, value: inst.id };
                let label = allocation_partition(ir, site).unwrap_or(f.home);
                heap_keys.insert(site, keys.key_of(label).unwrap_or_default());
            }
        }
    }
    let key = keys.key_of(entry.home).unwrap_or_default();
    let (ptr, len) = match proc.place_input(key, input) {
        Ok(v) => v,
        Err(_) => return done(Err(Fault::new(FaultKind::OutOfMemory, 0, entry.entry_stmt))),
    };
    let mut monitor = Monitor {
        policy,
        heap_keys,
        readonly_pages: layout.readonly_pages(),
        taken: BTreeSet::new(),
        violations: Vec::new(),
    };
    let outcome = Interpreter::new(ir, &mut proc, &mut monitor, limits).run(entry.id, &[ptr as i64, len as i64]);
    let mut violations = monitor.violations;
    // A call through a value that is not a function address at all.
    if let Err(f) = &outcome {
        if f.kind == FaultKind::CfiFault && violations.is_empty() {
            violations.push(Violation { stmt: f.stmt, kind: ViolationKind::Cfi, addr: f.addr });
        }
    }
    OracleReport { violations, outcome }
}
