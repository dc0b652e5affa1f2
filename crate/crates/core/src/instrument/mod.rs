//! Enforcement pass: rewrites policy-annotated IR into IR that calls the
//! runtime to switch privileges, dispatch allocations and track
//! address-taken functions.

pub mod layout;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::analysis::{allocation_partition, ResolveError};
use crate::lang::ir::*;
use crate::policy::{
    map_partitions_to_keys, KeyAssignment, PartitionRights, Policy, PolicyError, RightsVector, StatementId,
};

pub use layout::{assign_sections, emit_layout, parse_layout, LayoutPlan, Region, RegionKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstrumentError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Resolve(#[from] ResolveError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentedModule {
    pub ir: IRModule,
    pub keys: KeyAssignment,
    /// Statically inserted call-boundary switches.
    pub switch_site_count: usize,
}

/// Output of the whole pass pipeline.
#[derive(Debug, Clone)]
pub struct Build {
    pub module: InstrumentedModule,
    pub layout: LayoutPlan,
}

/// Rights vectors for functions, statements and refinement scopes.
pub struct Vectors<'a> {
    ir: &'a IRModule,
    policy: &'a Policy,
    keys: &'a KeyAssignment,
}

impl<'a> Vectors<'a> {
    pub fn new(ir: &'a IRModule, policy: &'a Policy, keys: &'a KeyAssignment) -> Self {
        Vectors { ir, policy, keys }
    }

    pub fn statement_row(&self, stmt: StatementId) -> PartitionRights {
        self.policy.privilege_row(stmt).unwrap_or_default()
    }

    pub fn statement(&self, stmt: StatementId) -> RightsVector {
        self.keys.to_vector(&self.statement_row(stmt))
    }

    /// Rights a function runs with outside any block refinement.
    pub fn function(&self, id: FuncId) -> RightsVector {
        self.statement(self.ir.function(id).entry_stmt)
    }

    /// Rights inside `scope`, or the function's rights for `None`.
    pub fn scope(&self, function: FuncId, scope: Option<ScopeId>) -> RightsVector {
        let mut row = self.statement_row(self.ir.function(function).entry_stmt);
        for s in self.ir.scope_chain(scope).into_iter().rev() {
            let s = self.ir.scope(s);
            let cur = row.get(&s.label).copied().unwrap_or_default();
            row.insert(s.label, cur.union(s.rights));
        }
        self.keys.to_vector(&row)
    }
}

/// Rebuild every block of `f`, letting `rewrite` replace each instruction
/// with a sequence.
fn rewrite_function(f: &mut IRFunction, mut rewrite: impl FnMut(&mut IRFunction, Inst) -> Vec<Inst>) {
    let blocks = std::mem::take(&mut f.blocks);
    let mut out = Vec::with_capacity(blocks.len());
    for block in blocks {
        let mut insts = Vec::with_capacity(block.insts.len());
        for inst in block.insts {
            insts.extend(rewrite(f, inst));
        }
        out.push(BasicBlock { id: block.id, insts });
    }
    f.blocks = out;
}

fn runtime_inst(f: &mut IRFunction, anchor: &Inst, op: Op) -> Inst {
    Inst { id: f.fresh_value(), op, stmt: anchor.stmt, meta: anchor.meta }
}

/// Bracket cross-partition direct calls with `set_privileges`, and compile
/// refinement markers into scope switches. Returns the number of
/// call-boundary switch sites.
pub fn instrument_direct_calls(ir: &mut IRModule, policy: &Policy, keys: &KeyAssignment) -> usize {
    let snapshot = ir.clone();
    let vectors = Vectors::new(&snapshot, policy, keys);
    let mut sites = 0;
    for f in &mut ir.functions {
        let fid = f.id;
        let function_vector = vectors.function(fid);
        rewrite_function(f, |f, inst| match &inst.op {
            Op::CallDirect { callee, .. } => {
                let caller = vectors.statement(inst.stmt);
                let target = vectors.function(*callee);
                if caller == target {
                    return vec![inst];
                }
                let enter = runtime_inst(f, &inst, Op::SetPrivileges { vector: target, role: SwitchRole::CallEnter });
                sites += 1;
                let mut seq = vec![enter, inst.clone()];
                if !snapshot.function(*callee).noreturn {
                    seq.push(runtime_inst(f, &inst, Op::SetPrivileges { vector: caller, role: SwitchRole::CallExit }));
                    sites += 1;
                }
                seq
            }
            Op::ScopeEnter(scope) | Op::ScopeExit(scope) => {
                let parent = snapshot.scope(*scope).parent;
                let inner = vectors.scope(fid, Some(*scope));
                let outer = vectors.scope(fid, parent);
                if inner == outer {
                    return Vec::new();
                }
                let op = if matches!(inst.op, Op::ScopeEnter(_)) {
                    Op::SetPrivileges { vector: inner, role: SwitchRole::ScopeEnter }
                } else {
                    Op::SetPrivileges { vector: outer, role: SwitchRole::ScopeExit }
                };
                vec![runtime_inst(f, &inst, op)]
            }
            Op::Ret(_) if inst.meta.refinement_scope_id.is_some() => {
                let current = vectors.scope(fid, inst.meta.refinement_scope_id);
                if current == function_vector {
                    return vec![inst];
                }
                let unwind = Op::SetPrivileges { vector: function_vector.clone(), role: SwitchRole::ReturnUnwind };
                vec![runtime_inst(f, &inst, unwind), inst]
            }
            _ => vec![inst],
        });
    }
    sites
}

/// Register address-taken functions and route indirect calls through the
/// dynamic privilege check.
pub fn instrument_indirect(ir: &mut IRModule, policy: &Policy, keys: &KeyAssignment) {
    let snapshot = ir.clone();
    let vectors = Vectors::new(&snapshot, policy, keys);
    for f in &mut ir.functions {
        rewrite_function(f, |f, inst| match &inst.op {
            Op::TakeFnAddr(target) => {
                let register = Op::RegisterAtFn { function: *target, vector: vectors.function(*target) };
                vec![runtime_inst(f, &inst, register), inst]
            }
            Op::CallIndirect { callee, .. } => {
                let check = runtime_inst(f, &inst, Op::SetPrivilegesDynamic { target: *callee });
                let restore = Op::RestorePrivilegesDynamic { vector: vectors.statement(inst.stmt) };
                let restore = runtime_inst(f, &inst, restore);
                vec![check, inst, restore]
            }
            _ => vec![inst],
        });
    }
}

/// Rewrite raw heap operations into partition-aware ones.
pub fn instrument_allocations(ir: &mut IRModule, keys: &KeyAssignment) -> Result<(), ResolveError> {
    let snapshot = ir.clone();
    let mut resolved = BTreeMap::new();
    for f in &snapshot.functions {
        for inst in f.insts() {
            if matches!(inst.op, Op::HeapAlloc { .. } | Op::HeapFree { .. }) {
                let site = InstRef { function: f.id, value: inst.id };
                let label = allocation_partition(&snapshot, site)?;
                resolved.insert(site, keys.key_of(label).expect("declared partition has a key"));
            }
        }
    }
    for f in &mut ir.functions {
        let fid = f.id;
        for block in &mut f.blocks {
            for inst in &mut block.insts {
                let site = InstRef { function: fid, value: inst.id };
                inst.op = match &inst.op {
                    Op::HeapAlloc { size } => Op::PartitionAlloc { size: *size, key: resolved[&site] },
                    Op::HeapFree { ptr } => Op::PartitionFree { ptr: *ptr, key: resolved[&site] },
                    Op::AllocStack { size, partition, .. } => {
                        Op::AllocStack { size: *size, partition: *partition, key: keys.key_of(*partition) }
                    }
                    other => other.clone(),
                };
            }
        }
    }
    Ok(())
}

/// Run every pass in order and plan the memory layout.
pub fn instrument(ir: &IRModule, policy: &Policy) -> Result<Build, InstrumentError> {
    let keys = map_partitions_to_keys(&policy.labels())?;
    let mut out = ir.clone();
    instrument_allocations(&mut out, &keys)?;
    instrument_indirect(&mut out, policy, &keys);
    let switch_site_count = instrument_direct_calls(&mut out, policy, &keys);
    let layout = assign_sections(ir, &keys);
    Ok(Build { module: InstrumentedModule { ir: out, keys, switch_site_count }, layout })
}
