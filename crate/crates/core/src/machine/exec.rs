//! IR interpreter shared by the protection-key machine and the reference
//! monitor. Everything that differs between the two goes through [`Hooks`].

use crate::lang::ir::*;
use crate::lang::lower::eval_arith;
use crate::policy::{ProtectionKey, StatementId};

use super::heap::HeapError;
use super::memory::{AllocError, Process};
use super::trace::TraceEvent;
use super::{Fault, FaultKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    /// Source instructions executed; runtime calls are not counted.
    pub max_steps: u64,
    pub max_depth: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_steps: 200_000, max_depth: 128 }
    }
}

/// How a run ended without a fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Returned(i64),
    /// A noreturn function returned; the program stops there.
    Halted,
}

pub trait Hooks {
    /// Decide whether one byte access may proceed.
    fn check(&mut self, proc: &Process, stmt: StatementId, addr: u64, access: Access) -> Result<(), Fault>;

    /// Called once a call target is known, before the callee starts.
    fn enter(&mut self, ir: &IRModule, callee: FuncId, indirect: bool, stmt: StatementId) -> Result<(), Fault>;

    fn leave(&mut self, ir: &IRModule, function: FuncId);

    fn take_address(&mut self, function: FuncId);

    /// Execute an injected runtime call. `next` is the following instruction.
    fn runtime(
        &mut self,
        ir: &IRModule,
        current: FuncId,
        inst: &Inst,
        next: Option<&Inst>,
        operand: i64,
    ) -> Result<(), Fault>;

    /// Key of the heap an uninstrumented allocation or free site uses.
    fn heap_key(&mut self, site: InstRef) -> ProtectionKey;

    fn event(&mut self, event: TraceEvent);
}

enum Stop {
    Fault(Fault),
    Halt,
}

impl From<Fault> for Stop {
    fn from(f: Fault) -> Self {
        Stop::Fault(f)
    }
}

pub struct Interpreter<'a, H: Hooks> {
    pub ir: &'a IRModule,
    pub proc: &'a mut Process,
    pub hooks: &'a mut H,
    pub limits: Limits,
    pub steps: u64,
}

fn heap_fault(err: HeapError, addr: u64, stmt: StatementId) -> Fault {
    let kind = match err {
        HeapError::InvalidSize => FaultKind::InvalidSize,
        HeapError::OutOfMemory => FaultKind::OutOfMemory,
        HeapError::DoubleFree => FaultKind::DoubleFree,
        HeapError::InvalidFree => FaultKind::InvalidFree,
    };
    Fault::new(kind, addr, stmt)
}

impl<'a, H: Hooks> Interpreter<'a, H> {
    pub fn new(ir: &'a IRModule, proc: &'a mut Process, hooks: &'a mut H, limits: Limits) -> Self {
        Interpreter { ir, proc, hooks, limits, steps: 0 }
    }

    pub fn run(&mut self, entry: FuncId, args: &[i64]) -> Result<Completion, Fault> {
        let stmt = self.ir.function(entry).entry_stmt;
        let result =
            self.hooks.enter(self.ir, entry, false, stmt).map_err(Stop::Fault).and_then(|_| self.call(entry, args, 0));
        match result {
            Ok(v) => Ok(Completion::Returned(v)),
            Err(Stop::Halt) => Ok(Completion::Halted),
            Err(Stop::Fault(f)) => Err(f),
        }
    }

    fn alloc(&mut self, key: ProtectionKey, size: i64, stmt: StatementId) -> Result<u64, Fault> {
        match self.proc.alloc(key, size) {
            Ok(block) => {
                self.hooks.event(TraceEvent::Alloc { addr: block.addr, size: block.size, key, stmt });
                Ok(block.addr)
            }
            Err(AllocError::UnknownKey) => Err(Fault::new(FaultKind::UnknownKey, u64::from(key.0), stmt)),
            Err(AllocError::Heap(e)) => Err(heap_fault(e, 0, stmt)),
        }
    }

    fn free(&mut self, addr: u64, stmt: StatementId) -> Result<(), Fault> {
        let (key, block) = self.proc.free(addr).map_err(|e| heap_fault(e, addr, stmt))?;
        self.hooks.event(TraceEvent::Free { addr, size: block.size, key, stmt });
        Ok(())
    }

    fn access(&mut self, stmt: StatementId, addr: u64, size: u64, access: Access) -> Result<(), Fault> {
        for i in 0..size {
            self.hooks.check(self.proc, stmt, addr.wrapping_add(i), access)?;
        }
        Ok(())
    }

    fn key_at(&self, addr: u64) -> ProtectionKey {
        self.proc.memory.tag(addr).map_or(ProtectionKey(0), |(k, _)| k)
    }

    fn call(&mut self, fid: FuncId, args: &[i64], depth: usize) -> Result<i64, Stop> {
        let f = self.ir.function(fid);
        if depth >= self.limits.max_depth {
            return Err(Fault::new(FaultKind::ResourceLimit, 0, f.entry_stmt).with_detail("call-depth").into());
        }
        let mut values = vec![0i64; f.next_value as usize];
        let mut stack_blocks: Vec<u64> = Vec::new();
        let mut block = BlockId(0);
        let mut prev: Option<BlockId> = None;
        let result = 'exec: loop {
            let insts = &f.blocks[block.index()].insts;
            // Phis read their operands simultaneously on block entry.
            let phi_values: Vec<(ValueId, i64)> = insts
                .iter()
                .filter_map(|i| match &i.op {
                    Op::Phi(incoming) => {
                        let v = incoming.iter().find(|(_, b)| Some(*b) == prev).map_or(0, |(v, _)| values[v.index()]);
                        Some((i.id, v))
                    }
                    _ => None,
                })
                .collect();
            for (id, v) in phi_values {
                values[id.index()] = v;
            }
            for (pos, inst) in insts.iter().enumerate() {
                let stmt = inst.stmt;
                if !inst.op.is_runtime_call() && !inst.op.is_marker() {
                    self.steps += 1;
                    if self.steps > self.limits.max_steps {
                        break 'exec Err(Fault::new(FaultKind::ResourceLimit, 0, stmt).with_detail("steps").into());
                    }
                }
                let val = |v: &ValueId| values[v.index()];
                let out: i64 = match &inst.op {
                    Op::Phi(_) | Op::ScopeEnter(_) | Op::ScopeExit(_) => continue,
                    Op::Param(i) => args.get(*i as usize).copied().unwrap_or(0),
                    Op::Const(c) => *c,
                    Op::GlobalAddr(g) => self.proc.layout.symbol(*g).map_or(0, |s| s.base as i64),
                    Op::Arith(op, a, b) => eval_arith(*op, val(a), val(b)),
                    Op::AllocStack { size, partition, key } => {
                        let key = key.or_else(|| self.proc.keys.key_of(*partition)).unwrap_or(ProtectionKey(0));
                        match self.alloc(key, *size as i64, stmt) {
                            Ok(addr) => {
                                stack_blocks.push(addr);
                                addr as i64
                            }
                            Err(e) => break 'exec Err(e.into()),
                        }
                    }
                    Op::HeapAlloc { size } => {
                        let key = self.hooks.heap_key(InstRef { function: fid, value: inst.id });
                        match self.alloc(key, val(size), stmt) {
                            Ok(addr) => addr as i64,
                            Err(e) => break 'exec Err(e.into()),
                        }
                    }
                    Op::PartitionAlloc { size, key } => match self.alloc(*key, val(size), stmt) {
                        Ok(addr) => addr as i64,
                        Err(e) => break 'exec Err(e.into()),
                    },
                    Op::HeapFree { ptr } | Op::PartitionFree { ptr, .. } => {
                        let addr = val(ptr) as u64;
                        if stack_blocks.contains(&addr) {
                            break 'exec Err(Fault::new(FaultKind::InvalidFree, addr, stmt)
                                .with_detail("stack")
                                .into());
                        }
                        if let Err(e) = self.free(addr, stmt) {
                            break 'exec Err(e.into());
                        }
                        0
                    }
                    Op::Load { addr, width } => {
                        let addr = val(addr) as u64;
                        if let Err(e) = self.access(stmt, addr, width.bytes(), Access::Read) {
                            break 'exec Err(e.into());
                        }
                        let mut bytes = [0u8; 8];
                        for i in 0..width.bytes() {
                            bytes[i as usize] = self.proc.memory.read(addr.wrapping_add(i)).unwrap_or(0);
                        }
                        let key = self.key_at(addr);
                        self.hooks.event(TraceEvent::Load { addr, size: width.bytes(), key, stmt });
                        i64::from_le_bytes(bytes)
                    }
                    Op::Store { addr, value, width } => {
                        let addr = val(addr) as u64;
                        if let Err(e) = self.access(stmt, addr, width.bytes(), Access::Write) {
                            break 'exec Err(e.into());
                        }
                        let bytes = val(value).to_le_bytes();
                        for i in 0..width.bytes() {
                            self.proc.memory.write(addr.wrapping_add(i), bytes[i as usize]);
                        }
                        let key = self.key_at(addr);
                        self.hooks.event(TraceEvent::Store { addr, size: width.bytes(), key, stmt });
                        0
                    }
                    Op::CallDirect { callee, args: a } => {
                        let a: Vec<i64> = a.iter().map(val).collect();
                        if let Err(e) = self.hooks.enter(self.ir, *callee, false, stmt) {
                            break 'exec Err(e.into());
                        }
                        match self.call(*callee, &a, depth + 1) {
                            Ok(v) => v,
                            Err(stop) => break 'exec Err(stop),
                        }
                    }
                    Op::CallIndirect { callee, args: a } => {
                        let addr = val(callee) as u64;
                        let target = match function_at(addr).filter(|t| t.index() < self.ir.functions.len()) {
                            Some(t) => t,
                            None => break 'exec Err(Fault::new(FaultKind::CfiFault, addr, stmt).into()),
                        };
                        let a: Vec<i64> = a.iter().map(val).collect();
                        if let Err(e) = self.hooks.enter(self.ir, target, true, stmt) {
                            break 'exec Err(e.into());
                        }
                        match self.call(target, &a, depth + 1) {
                            Ok(v) => v,
                            Err(stop) => break 'exec Err(stop),
                        }
                    }
                    Op::TakeFnAddr(target) => {
                        self.hooks.take_address(*target);
                        function_address(*target) as i64
                    }
                    Op::Branch { cond, then_block, else_block } => {
                        prev = Some(block);
                        block = if val(cond) != 0 { *then_block } else { *else_block };
                        continue 'exec;
                    }
                    Op::Jump(target) => {
                        prev = Some(block);
                        block = *target;
                        continue 'exec;
                    }
                    Op::Ret(v) => break 'exec Ok(v.map_or(0, |v| val(&v))),
                    Op::SetPrivileges { .. }
                    | Op::SetPrivilegesDynamic { .. }
                    | Op::RestorePrivilegesDynamic { .. }
                    | Op::RegisterAtFn { .. } => {
                        let operand = inst.op.operands().first().map_or(0, val);
                        if let Err(e) = self.hooks.runtime(self.ir, fid, inst, insts.get(pos + 1), operand) {
                            break 'exec Err(e.into());
                        }
                        continue;
                    }
                };
                values[inst.id.index()] = out;
            }
            // A block without a terminator falls off the function.
            break 'exec Ok(0);
        };
        let value = result?;
        for addr in stack_blocks.into_iter().rev() {
            self.free(addr, f.entry_stmt)?;
        }
        self.hooks.leave(self.ir, fid);
        if f.noreturn {
            return Err(Stop::Halt);
        }
        Ok(value)
    }
}
