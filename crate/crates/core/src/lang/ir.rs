//! SSA-form intermediate representation with embedded policy metadata.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ast::{BinOp, DeclType, Refinement};
use crate::policy::{AccessRights, PartitionLabel, ProgramIndex, ProtectionKey, RightsVector, StatementId, VariableId};

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(ValueId, "%");
id_type!(BlockId, "bb");
id_type!(FuncId, "fn");
id_type!(GlobalId, "g");
id_type!(ScopeId, "scope");
id_type!(LocalId, "local");

/// Base of the simulated code address space. Function pointers are
/// `CODE_BASE + 16 * (id + 1)` and never point at mapped data.
pub const CODE_BASE: u64 = 0x7f00_0000_0000;

pub fn function_address(id: FuncId) -> u64 {
    CODE_BASE + 16 * (u64::from(id.0) + 1)
}

pub fn function_at(addr: u64) -> Option<FuncId> {
    let offset = addr.checked_sub(CODE_BASE)?;
    if offset == 0 || offset % 16 != 0 {
        return None;
    }
    u32::try_from(offset / 16 - 1).ok().map(FuncId)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyMetadata {
    pub partition_label: PartitionLabel,
    pub rights: AccessRights,
    pub refinement_scope_id: Option<ScopeId>,
}

impl fmt::Display for PolicyMetadata {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "!partition({},{})", self.partition_label, self.rights)?;
        if let Some(scope) = self.refinement_scope_id {
            write!(f, ",!scope({})", scope.0)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Width {
    Byte,
    Word,
}

impl Width {
    pub fn bytes(self) -> u64 {
        match self {
            Width::Byte => 1,
            Width::Word => 8,
        }
    }
}

/// Why a static privilege switch was inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwitchRole {
    CallEnter,
    CallExit,
    ScopeEnter,
    ScopeExit,
    ReturnUnwind,
}

impl SwitchRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SwitchRole::CallEnter => "call_enter",
            SwitchRole::CallExit => "call_exit",
            SwitchRole::ScopeEnter => "scope_enter",
            SwitchRole::ScopeExit => "scope_exit",
            SwitchRole::ReturnUnwind => "return_unwind",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Param(u32),
    Const(i64),
    GlobalAddr(GlobalId),
    Arith(BinOp, ValueId, ValueId),
    /// Function-lifetime array. `key` is filled in by allocation dispatch.
    AllocStack {
        size: u64,
        partition: PartitionLabel,
        key: Option<ProtectionKey>,
    },
    HeapAlloc {
        size: ValueId,
    },
    HeapFree {
        ptr: ValueId,
    },
    Load {
        addr: ValueId,
        width: Width,
    },
    Store {
        addr: ValueId,
        value: ValueId,
        width: Width,
    },
    CallDirect {
        callee: FuncId,
        args: Vec<ValueId>,
    },
    CallIndirect {
        callee: ValueId,
        args: Vec<ValueId>,
    },
    TakeFnAddr(FuncId),
    Phi(Vec<(ValueId, BlockId)>),
    Branch {
        cond: ValueId,
        then_block: BlockId,
        else_block: BlockId,
    },
    Jump(BlockId),
    Ret(Option<ValueId>),
    /// Refinement markers; replaced or dropped by instrumentation.
    ScopeEnter(ScopeId),
    ScopeExit(ScopeId),
    // Runtime calls injected by instrumentation.
    SetPrivileges {
        vector: RightsVector,
        role: SwitchRole,
    },
    SetPrivilegesDynamic {
        target: ValueId,
    },
    RestorePrivilegesDynamic {
        vector: RightsVector,
    },
    RegisterAtFn {
        function: FuncId,
        vector: RightsVector,
    },
    PartitionAlloc {
        size: ValueId,
        key: ProtectionKey,
    },
    PartitionFree {
        ptr: ValueId,
        key: ProtectionKey,
    },
}

impl Op {
    pub fn opcode(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Const(_) | Op::GlobalAddr(_) => "const",
            Op::Arith(..) => "arith",
            Op::AllocStack { .. } => "alloc_stack",
            Op::HeapAlloc { .. } => "heap_alloc",
            Op::HeapFree { .. } => "heap_free",
            Op::Load { .. } => "load",
            Op::Store { .. } => "store",
            Op::CallDirect { .. } => "call_direct",
            Op::CallIndirect { .. } => "call_indirect",
            Op::TakeFnAddr(_) => "take_fn_addr",
            Op::Phi(_) => "phi",
            Op::Branch { .. } | Op::Jump(_) => "branch",
            Op::Ret(_) => "ret",
            Op::ScopeEnter(_) => "scope_enter",
            Op::ScopeExit(_) => "scope_exit",
            Op::SetPrivileges { .. } => "set_privileges",
            Op::SetPrivilegesDynamic { .. } => "set_privileges_dynamic",
            Op::RestorePrivilegesDynamic { .. } => "restore_privileges_dynamic",
            Op::RegisterAtFn { .. } => "register_at_fn",
            Op::PartitionAlloc { .. } => "partition_alloc",
            Op::PartitionFree { .. } => "partition_free",
        }
    }

    pub fn is_terminator(&self) -> bool {
        matches!(self, Op::Branch { .. } | Op::Jump(_) | Op::Ret(_))
    }

    /// Calls into the runtime support library.
    pub fn is_runtime_call(&self) -> bool {
        matches!(
            self,
            Op::SetPrivileges { .. }
                | Op::SetPrivilegesDynamic { .. }
                | Op::RestorePrivilegesDynamic { .. }
                | Op::RegisterAtFn { .. }
                | Op::PartitionAlloc { .. }
                | Op::PartitionFree { .. }
        )
    }

    pub fn is_marker(&self) -> bool {
        matches!(self, Op::ScopeEnter(_) | Op::ScopeExit(_))
    }

    /// Values this instruction reads.
    pub fn operands(&self) -> Vec<ValueId> {
        match self {
            Op::Arith(_, a, b) => vec![*a, *b],
            Op::HeapAlloc { size } | Op::PartitionAlloc { size, .. } => vec![*size],
            Op::HeapFree { ptr } | Op::PartitionFree { ptr, .. } => vec![*ptr],
            Op::Load { addr, .. } => vec![*addr],
            Op::Store { addr, value, .. } => vec![*addr, *value],
            Op::CallDirect { args, .. } => args.clone(),
            Op::CallIndirect { callee, args } => std::iter::once(*callee).chain(args.iter().copied()).collect(),
            Op::Phi(incoming) => incoming.iter().map(|(v, _)| *v).collect(),
            Op::Branch { cond, .. } => vec![*cond],
            Op::Ret(Some(v)) => vec![*v],
            Op::SetPrivilegesDynamic { target } => vec![*target],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inst {
    pub id: ValueId,
    pub op: Op,
    pub stmt: StatementId,
    pub meta: PolicyMetadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub id: BlockId,
    pub insts: Vec<Inst>,
}

impl BasicBlock {
    pub fn successors(&self) -> Vec<BlockId> {
        match self.insts.last().map(|i| &i.op) {
            Some(Op::Branch { then_block, else_block, .. }) => {
                if then_block == else_block {
                    vec![*then_block]
                } else {
                    vec![*then_block, *else_block]
                }
            }
            Some(Op::Jump(target)) => vec![*target],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IRGlobal {
    pub id: GlobalId,
    pub name: String,
    pub variable: VariableId,
    pub ty: DeclType,
    pub immutable: bool,
    pub init: Option<i64>,
    pub unit: String,
    pub meta: PolicyMetadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalDecl {
    pub id: LocalId,
    pub name: String,
    pub variable: VariableId,
    pub ty: Option<DeclType>,
    pub partition: PartitionLabel,
    pub rights: AccessRights,
    /// Carries an explicit partition attribute.
    pub annotated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IRFunction {
    pub id: FuncId,
    pub name: String,
    pub unit: String,
    pub home: PartitionLabel,
    pub noreturn: bool,
    pub refinement: Option<Refinement>,
    pub params: Vec<LocalId>,
    pub locals: Vec<LocalDecl>,
    /// Values that were assigned to a local variable.
    pub bindings: Vec<(ValueId, LocalId)>,
    pub blocks: Vec<BasicBlock>,
    pub next_value: u32,
    /// Statement covering the prologue and implicit return.
    pub entry_stmt: StatementId,
}

impl IRFunction {
    pub fn fresh_value(&mut self) -> ValueId {
        let v = ValueId(self.next_value);
        self.next_value += 1;
        v
    }

    pub fn insts(&self) -> impl Iterator<Item = &Inst> {
        self.blocks.iter().flat_map(|b| b.insts.iter())
    }

    pub fn find(&self, id: ValueId) -> Option<(BlockId, usize, &Inst)> {
        self.blocks.iter().find_map(|b| b.insts.iter().position(|i| i.id == id).map(|pos| (b.id, pos, &b.insts[pos])))
    }

    pub fn local(&self, id: LocalId) -> &LocalDecl {
        &self.locals[id.index()]
    }

    /// Number of instructions excluding injected runtime calls and markers.
    pub fn source_inst_count(&self) -> usize {
        self.insts().filter(|i| !i.op.is_runtime_call() && !i.op.is_marker()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementScope {
    pub id: ScopeId,
    pub function: FuncId,
    pub parent: Option<ScopeId>,
    pub label: PartitionLabel,
    pub rights: AccessRights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementInfo {
    pub id: StatementId,
    pub function: FuncId,
    pub line: u32,
    pub scope: Option<ScopeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IRModule {
    pub globals: Vec<IRGlobal>,
    pub functions: Vec<IRFunction>,
    pub scopes: Vec<RefinementScope>,
    pub statements: Vec<StatementInfo>,
}

/// Reference to one instruction in a module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstRef {
    pub function: FuncId,
    pub value: ValueId,
}

impl IRModule {
    pub fn function(&self, id: FuncId) -> &IRFunction {
        &self.functions[id.index()]
    }

    pub fn function_by_name(&self, name: &str) -> Option<&IRFunction> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn global(&self, id: GlobalId) -> &IRGlobal {
        &self.globals[id.index()]
    }

    pub fn scope(&self, id: ScopeId) -> &RefinementScope {
        &self.scopes[id.index() - 1]
    }

    pub fn statement(&self, id: StatementId) -> Option<&StatementInfo> {
        self.statements.get(id.0 as usize)
    }

    pub fn inst(&self, site: InstRef) -> Option<&Inst> {
        self.function(site.function).find(site.value).map(|(_, _, i)| i)
    }

    /// Scope chain of `scope`, innermost first.
    pub fn scope_chain(&self, scope: Option<ScopeId>) -> Vec<ScopeId> {
        let mut chain = Vec::new();
        let mut cur = scope;
        while let Some(s) = cur {
            chain.push(s);
            cur = self.scope(s).parent;
        }
        chain
    }

    /// Statements lexically inside `scope` (or a scope nested in it).
    pub fn statements_in_scope(&self, scope: ScopeId) -> BTreeSet<StatementId> {
        self.statements.iter().filter(|s| self.scope_chain(s.scope).contains(&scope)).map(|s| s.id).collect()
    }

    pub fn program_index(&self) -> ProgramIndex {
        let mut index = ProgramIndex::default();
        index.variables.extend(self.globals.iter().map(|g| g.variable.clone()));
        for f in &self.functions {
            index.variables.extend(f.locals.iter().map(|l| l.variable.clone()));
        }
        index.statements.extend(self.statements.iter().map(|s| s.id));
        index
    }

    /// Every value id is defined exactly once per function.
    pub fn check_ssa(&self) -> Result<(), String> {
        for f in &self.functions {
            let mut seen = BTreeSet::new();
            for inst in f.insts() {
                if !seen.insert(inst.id) {
                    return Err(format!("{} defines {} twice", f.name, inst.id));
                }
            }
            for inst in f.insts() {
                for operand in inst.op.operands() {
                    if !seen.contains(&operand) {
                        return Err(format!("{} uses undefined {}", f.name, operand));
                    }
                }
            }
        }
        Ok(())
    }
}
