//! Machine state and the runtime support library: privilege switching,
//! partition allocation, and the address-taken function table.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::instrument::layout::LayoutPlan;
use crate::instrument::{InstrumentedModule, Vectors};
use crate::lang::ir::*;
use crate::policy::{
    KeyAssignment, PartitionLabel, Policy, ProtectionKey, RightsVector, StatementId, MAX_APPLICATION_PARTITIONS,
};

use super::exec::{Access, Completion, Hooks, Interpreter, Limits};
use super::memory::{AllocError, Process};
use super::pkru::{Pkru, ThreadState};
use super::trace::{TraceEvent, TraceRecord};
use super::{Fault, FaultKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InitError {
    #[error("{declared} partitions declared but only {MAX_APPLICATION_PARTITIONS} protection keys are available")]
    KeyExhaustion { declared: usize },
    #[error("layout regions overlap at {0:#x}")]
    LayoutOverlap(u64),
    #[error("layout region uses key {0} which is not assigned to any partition")]
    UnknownKey(u8),
    #[error("entry rights cannot be encoded: {0}")]
    UnrepresentableRights(String),
}

/// Everything besides memory: registers, the AT table, counters and trace.
#[derive(Debug, Clone)]
pub struct Runtime {
    pub policy: Policy,
    pub keys: KeyAssignment,
    pub threads: Vec<ThreadState>,
    pub current_thread: usize,
    pub at_table: BTreeMap<FuncId, RightsVector>,
    pub wrpkru_count: u64,
    /// Switches performed by the dynamic (indirect-call) path.
    pub dynamic_switches: u64,
    pub fault_count: u64,
    pub trace: Vec<TraceRecord>,
    homes: Vec<PartitionLabel>,
    last_left: Option<PartitionLabel>,
}

#[derive(Debug, Clone)]
pub struct MachineState {
    pub process: Process,
    pub runtime: Runtime,
    pub limits: Limits,
    loaded: bool,
}

/// Map and tag every region, set up heaps, and load the entry partition's
/// default rights into the PKRU.
pub fn init(layout: &LayoutPlan, policy: &Policy, keys: &KeyAssignment) -> Result<MachineState, InitError> {
    if policy.partitions.len() > MAX_APPLICATION_PARTITIONS || keys.len() > MAX_APPLICATION_PARTITIONS {
        return Err(InitError::KeyExhaustion { declared: policy.partitions.len().max(keys.len()) });
    }
    for r in &layout.regions {
        if r.key.0 != 0 && keys.partition_of(r.key).is_none() {
            return Err(InitError::UnknownKey(r.key.0));
        }
    }
    layout.validate().map_err(|e| match e {
        crate::instrument::layout::LayoutError::Overlap(_, b) => InitError::LayoutOverlap(b),
        other => InitError::LayoutOverlap(match other {
            crate::instrument::layout::LayoutError::Misaligned(a) => a,
            _ => 0,
        }),
    })?;
    let process = Process::new(layout, keys).map_err(InitError::LayoutOverlap)?;
    let vector = match policy.entry_partition {
        Some(p) => keys.to_vector(&policy.default_vector(p)),
        None => RightsVector::default(),
    };
    let pkru = Pkru::from_vector(&vector).map_err(|e| InitError::UnrepresentableRights(e.to_string()))?;
    Ok(MachineState {
        process,
        runtime: Runtime {
            policy: policy.clone(),
            keys: keys.clone(),
            threads: vec![ThreadState { pkru }],
            current_thread: 0,
            at_table: BTreeMap::new(),
            wrpkru_count: 0,
            dynamic_switches: 0,
            fault_count: 0,
            trace: Vec::new(),
            homes: Vec::new(),
            last_left: None,
        },
        limits: Limits::default(),
        loaded: false,
    })
}

impl Runtime {
    pub fn pkru(&self) -> Pkru {
        self.threads[self.current_thread].pkru
    }

    fn set_pkru(&mut self, pkru: Pkru) {
        self.threads[self.current_thread].pkru = pkru;
    }

    /// The current PKRU image over all assigned keys.
    pub fn current_vector(&self) -> RightsVector {
        self.pkru().to_vector(self.keys.iter().map(|(_, k)| k))
    }

    fn home(&self) -> PartitionLabel {
        self.homes.last().copied().or(self.policy.entry_partition).unwrap_or_default()
    }

    fn push(&mut self, event: TraceEvent) {
        let seq = self.trace.len() as u64;
        self.trace.push(TraceRecord { seq, event });
    }

    /// Replace the PKRU wholesale. Always counts, even when nothing changes.
    pub fn set_privileges(
        &mut self,
        vector: &RightsVector,
        role: &str,
        stmt: StatementId,
        from: PartitionLabel,
        to: PartitionLabel,
    ) -> Result<(), Fault> {
        let pkru = Pkru::from_vector(vector)
            .map_err(|_| Fault::new(FaultKind::UnrepresentableRights, 0, stmt).with_detail(&vector.to_string()))?;
        let before = self.current_vector();
        self.set_pkru(pkru);
        self.wrpkru_count += 1;
        let after = self.current_vector();
        self.push(TraceEvent::Switch { role: role.to_string(), stmt, from, to, before, after });
        Ok(())
    }

    pub fn register_at_fn(&mut self, function: FuncId, name: &str, vector: &RightsVector) -> Result<(), Fault> {
        match self.at_table.get(&function) {
            Some(existing) if existing == vector => Ok(()),
            Some(_) => Err(Fault::new(FaultKind::ConflictingRegistration, function_address(function), StatementId(0))
                .with_detail(name)),
            None => {
                self.at_table.insert(function, vector.clone());
                self.push(TraceEvent::Register { function: name.to_string(), vector: vector.clone() });
                Ok(())
            }
        }
    }

    /// Switch to an indirect-call target's registered rights, if they differ.
    pub fn set_privileges_dynamic(&mut self, ir: &IRModule, target: u64, stmt: StatementId) -> Result<bool, Fault> {
        let Some((fid, vector)) = function_at(target).and_then(|f| self.at_table.get(&f).map(|v| (f, v.clone())))
        else {
            return Err(Fault::new(FaultKind::CfiFault, target, stmt));
        };
        if vector == self.current_vector() {
            return Ok(false);
        }
        let to = ir.function(fid).home;
        self.set_privileges(&vector, "dynamic_enter", stmt, self.home(), to)?;
        self.dynamic_switches += 1;
        Ok(true)
    }

    fn check_access(&self, proc: &Process, stmt: StatementId, addr: u64, access: Access) -> Result<(), Fault> {
        let Some((key, readonly)) = proc.memory.tag(addr) else {
            return Err(Fault::new(FaultKind::PkeyAccessFault, addr, stmt).with_detail("unmapped"));
        };
        let pkru = self.pkru();
        match access {
            Access::Read if !pkru.can_read(key) => Err(Fault::new(FaultKind::PkeyAccessFault, addr, stmt)),
            Access::Write if !pkru.can_write(key) => Err(Fault::new(FaultKind::PkeyWriteFault, addr, stmt)),
            Access::Write if readonly => Err(Fault::new(FaultKind::PkeyWriteFault, addr, stmt).with_detail("readonly")),
            _ => Ok(()),
        }
    }
}

impl Hooks for Runtime {
    fn check(&mut self, proc: &Process, stmt: StatementId, addr: u64, access: Access) -> Result<(), Fault> {
        self.check_access(proc, stmt, addr, access)
    }

    fn enter(&mut self, ir: &IRModule, callee: FuncId, indirect: bool, stmt: StatementId) -> Result<(), Fault> {
        let f = ir.function(callee);
        self.homes.push(f.home);
        self.push(TraceEvent::Call { function: f.name.clone(), partition: f.home, indirect, stmt });
        Ok(())
    }

    fn leave(&mut self, ir: &IRModule, function: FuncId) {
        let f = ir.function(function);
        self.push(TraceEvent::Return { function: f.name.clone(), partition: f.home });
        self.homes.pop();
        self.last_left = Some(f.home);
    }

    fn take_address(&mut self, _function: FuncId) {}

    fn runtime(
        &mut self,
        ir: &IRModule,
        _current: FuncId,
        inst: &Inst,
        next: Option<&Inst>,
        operand: i64,
    ) -> Result<(), Fault> {
        let here = self.home();
        match &inst.op {
            Op::SetPrivileges { vector, role } => {
                let (from, to) = match role {
                    SwitchRole::CallEnter => {
                        let to = match next.map(|n| &n.op) {
                            Some(Op::CallDirect { callee, .. }) => ir.function(*callee).home,
                            _ => here,
                        };
                        (here, to)
                    }
                    SwitchRole::CallExit => (self.last_left.unwrap_or(here), here),
                    _ => (here, here),
                };
                self.set_privileges(vector, role.as_str(), inst.stmt, from, to)
            }
            Op::SetPrivilegesDynamic { .. } => self.set_privileges_dynamic(ir, operand as u64, inst.stmt).map(|_| ()),
            Op::RestorePrivilegesDynamic { vector } => {
                if *vector != self.current_vector() {
                    let from = self.last_left.unwrap_or(here);
                    self.set_privileges(vector, "dynamic_exit", inst.stmt, from, here)?;
                    self.dynamic_switches += 1;
                }
                Ok(())
            }
            Op::RegisterAtFn { function, vector } => {
                let name = ir.function(*function).name.clone();
                self.register_at_fn(*function, &name, vector).map_err(|mut f| {
                    f.stmt = inst.stmt;
                    f
                })
            }
            _ => Ok(()),
        }
    }

    fn heap_key(&mut self, _site: InstRef) -> ProtectionKey {
        // Instrumented modules carry keys on every allocation.
        ProtectionKey(0)
    }

    fn event(&mut self, event: TraceEvent) {
        self.push(event);
    }
}

impl MachineState {
    pub fn pkru(&self) -> Pkru {
        self.runtime.pkru()
    }

    pub fn current_vector(&self) -> RightsVector {
        self.runtime.current_vector()
    }

    pub fn wrpkru_count(&self) -> u64 {
        self.runtime.wrpkru_count
    }

    pub fn fault_count(&self) -> u64 {
        self.runtime.fault_count
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.runtime.trace
    }

    /// Write initial global values into memory.
    pub fn load_image(&mut self, ir: &IRModule) {
        self.process.load_image(ir);
        self.loaded = true;
    }

    /// Load a rights image without counting it or tracing it.
    pub fn load_pkru(&mut self, vector: &RightsVector) -> Result<(), Fault> {
        let pkru =
            Pkru::from_vector(vector).map_err(|_| Fault::new(FaultKind::UnrepresentableRights, 0, StatementId(0)))?;
        self.runtime.set_pkru(pkru);
        Ok(())
    }

    pub fn set_privileges(&mut self, vector: &RightsVector) -> Result<(), Fault> {
        let home = self.runtime.home();
        self.runtime.set_privileges(vector, "explicit", StatementId(0), home, home)
    }

    pub fn partition_alloc(&mut self, key: ProtectionKey, size: i64) -> Result<u64, Fault> {
        match self.process.alloc(key, size) {
            Ok(block) => {
                let stmt = StatementId(0);
                self.runtime.push(TraceEvent::Alloc { addr: block.addr, size: block.size, key, stmt });
                Ok(block.addr)
            }
            Err(AllocError::UnknownKey) => Err(Fault::new(FaultKind::UnknownKey, u64::from(key.0), StatementId(0))),
            Err(AllocError::Heap(e)) => Err(Fault::new(
                match e {
                    super::heap::HeapError::InvalidSize => FaultKind::InvalidSize,
                    _ => FaultKind::OutOfMemory,
                },
                0,
                StatementId(0),
            )),
        }
    }

    pub fn partition_free(&mut self, addr: u64) -> Result<(), Fault> {
        let (key, block) = self.process.free(addr).map_err(|e| {
            let kind = match e {
                super::heap::HeapError::DoubleFree => FaultKind::DoubleFree,
                _ => FaultKind::InvalidFree,
            };
            Fault::new(kind, addr, StatementId(0))
        })?;
        self.runtime.push(TraceEvent::Free { addr, size: block.size, key, stmt: StatementId(0) });
        Ok(())
    }

    pub fn register_at_fn(&mut self, ir: &IRModule, function: FuncId, vector: &RightsVector) -> Result<(), Fault> {
        let name = ir.function(function).name.clone();
        self.runtime.register_at_fn(function, &name, vector)
    }

    pub fn set_privileges_dynamic(&mut self, ir: &IRModule, target: u64) -> Result<bool, Fault> {
        self.runtime.set_privileges_dynamic(ir, target, StatementId(0))
    }

    /// Check one access under the current PKRU, as the program would.
    pub fn check_access(&self, addr: u64, access: Access) -> Result<(), Fault> {
        self.runtime.check_access(&self.process, StatementId(0), addr, access)
    }

    /// Read bytes ignoring the PKRU; unmapped bytes read as zero.
    pub fn read_privileged(&self, addr: u64, len: u64) -> Vec<u8> {
        (addr..addr + len).map(|a| self.process.memory.read(a).unwrap_or(0)).collect()
    }

    /// Execute `entry` with `input` copied into the entry partition's heap.
    /// The entry function receives `(pointer, length)`.
    pub fn run(&mut self, module: &InstrumentedModule, entry: &str, input: &[u8]) -> Result<Completion, Fault> {
        if !self.loaded {
            self.load_image(&module.ir);
        }
        let Some(f) = module.ir.function_by_name(entry) else {
            return Ok(Completion::Returned(0));
        };
        let (fid, stmt, home) = (f.id, f.entry_stmt, f.home);
        let outcome = self.start(module, fid, stmt, home, input);
        if let Err(fault) = &outcome {
            self.runtime.fault_count += 1;
            self.runtime.push(TraceEvent::Fault { kind: fault.kind.to_string(), addr: fault.addr, stmt: fault.stmt });
        }
        outcome
    }

    fn start(
        &mut self,
        module: &InstrumentedModule,
        fid: FuncId,
        stmt: StatementId,
        home: PartitionLabel,
        input: &[u8],
    ) -> Result<Completion, Fault> {
        let key = module.keys.key_of(home).unwrap_or_default();
        let (ptr, len) = self.process.place_input(key, input).map_err(|e| match e {
            AllocError::UnknownKey => Fault::new(FaultKind::UnknownKey, u64::from(key.0), stmt),
            AllocError::Heap(_) => Fault::new(FaultKind::OutOfMemory, 0, stmt),
        })?;
        let vectors = Vectors::new(&module.ir, &self.runtime.policy, &module.keys);
        let entry_vector = vectors.function(fid);
        self.load_pkru(&entry_vector)?;
        let mut interp = Interpreter::new(&module.ir, &mut self.process, &mut self.runtime, self.limits);
        interp.run(fid, &[ptr as i64, len as i64])
    }
}
