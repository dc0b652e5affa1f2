//! Lowering from the surface syntax to SSA IR, producing the policy tuple
//! implied by pragmas, partition attributes and refinements on the side.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use super::ast::*;
use super::ir::*;
use crate::policy::{AccessRights, PartitionId, PartitionLabel, PartitionRights, Policy, StatementId, VariableId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LowerError {
    #[error("line {line}: partition {label} is not declared by any unit pragma")]
    UndeclaredPartition { label: PartitionLabel, line: u32 },
    #[error("partition {label} is declared with rights {first} and {second}")]
    ConflictingPartitionRights { label: PartitionLabel, first: AccessRights, second: AccessRights },
    #[error("line {line}: `{name}` is defined more than once")]
    DuplicateDefinition { name: String, line: u32 },
    #[error("line {line}: unknown name `{name}`")]
    UnknownName { name: String, line: u32 },
    #[error("line {line}: `{name}` is immutable")]
    ImmutableWrite { name: String, line: u32 },
    #[error("line {line}: {message}")]
    InvalidUse { message: String, line: u32 },
    #[error("line {line}: `{name}` takes {expected} argument(s), {found} given")]
    ArityMismatch { name: String, expected: usize, found: usize, line: u32 },
}

impl LowerError {
    pub fn code(&self) -> &'static str {
        match self {
            LowerError::UndeclaredPartition { .. } => "UndeclaredPartition",
            LowerError::ConflictingPartitionRights { .. } => "ConflictingPartitionRights",
            LowerError::DuplicateDefinition { .. } => "DuplicateDefinition",
            LowerError::UnknownName { .. } => "UnknownName",
            LowerError::ImmutableWrite { .. } => "ImmutableWrite",
            LowerError::InvalidUse { .. } => "InvalidUse",
            LowerError::ArityMismatch { .. } => "ArityMismatch",
        }
    }

    pub fn location(&self) -> String {
        match self {
            LowerError::UndeclaredPartition { line, .. }
            | LowerError::DuplicateDefinition { line, .. }
            | LowerError::UnknownName { line, .. }
            | LowerError::ImmutableWrite { line, .. }
            | LowerError::InvalidUse { line, .. }
            | LowerError::ArityMismatch { line, .. } => format!("line:{line}"),
            LowerError::ConflictingPartitionRights { label, .. } => format!("partition:{label}"),
        }
    }
}

struct FunctionSig {
    id: FuncId,
    arity: usize,
}

struct ModuleCtx {
    globals: HashMap<String, GlobalId>,
    functions: HashMap<String, FunctionSig>,
}

/// Lower a parsed program. Returns the IR and the policy it embeds.
pub fn lower_to_ir(ast: &SourceProgram) -> Result<(IRModule, Policy), LowerError> {
    let mut policy = Policy::default();
    for unit in &ast.units {
        let label = unit.pragma.label;
        match policy.home_rights.get(&label) {
            Some(first) if *first != unit.pragma.rights => {
                return Err(LowerError::ConflictingPartitionRights { label, first: *first, second: unit.pragma.rights })
            }
            Some(_) => {}
            None => {
                policy.partitions.push(PartitionId { label, name: unit.name.clone() });
                policy.home_rights.insert(label, unit.pragma.rights);
                policy.defaults.insert(label, AccessRights::NONE);
            }
        }
    }

    let mut module = IRModule::default();
    let mut ctx = ModuleCtx { globals: HashMap::new(), functions: HashMap::new() };

    for unit in &ast.units {
        for g in &unit.globals {
            let (label, rights) = resolve_attr(&policy, unit, g.partition_attr, g.span.line)?;
            if ctx.globals.contains_key(&g.name) || ctx.functions.contains_key(&g.name) {
                return Err(LowerError::DuplicateDefinition { name: g.name.clone(), line: g.span.line });
            }
            let id = GlobalId(module.globals.len() as u32);
            let variable = VariableId::global(&g.name);
            policy.data_assignment.insert(variable.clone(), label);
            if g.immutable {
                policy.immutable.insert(variable.clone());
            }
            let ty = g.declared_type.unwrap_or(DeclType::Int);
            if g.init.is_some() && matches!(ty, DeclType::Bytes(_)) {
                return Err(LowerError::InvalidUse {
                    message: format!("array `{}` cannot have a scalar initializer", g.name),
                    line: g.span.line,
                });
            }
            module.globals.push(IRGlobal {
                id,
                name: g.name.clone(),
                variable,
                ty,
                immutable: g.immutable,
                init: g.init,
                unit: unit.name.clone(),
                meta: PolicyMetadata { partition_label: label, rights, refinement_scope_id: None },
            });
            ctx.globals.insert(g.name.clone(), id);
        }
    }

    for unit in &ast.units {
        for f in &unit.functions {
            if ctx.globals.contains_key(&f.name) || ctx.functions.contains_key(&f.name) {
                return Err(LowerError::DuplicateDefinition { name: f.name.clone(), line: f.span.line });
            }
            let id = FuncId(ctx.functions.len() as u32);
            ctx.functions.insert(f.name.clone(), FunctionSig { id, arity: f.params.len() });
        }
    }

    let mut next_stmt = 0u32;
    for unit in &ast.units {
        for f in &unit.functions {
            let id = ctx.functions[&f.name].id;
            let lowered = FnLower::run(&ctx, &mut policy, &mut module, unit, f, id, &mut next_stmt)?;
            module.functions.push(lowered);
        }
    }

    policy.entry_partition = module.function_by_name("main").map(|f| f.home);
    Ok((module, policy))
}

fn resolve_attr(
    policy: &Policy,
    unit: &TranslationUnit,
    attr: Option<PartitionAttr>,
    line: u32,
) -> Result<(PartitionLabel, AccessRights), LowerError> {
    match attr {
        Some(a) if !policy.is_declared(a.label) => Err(LowerError::UndeclaredPartition { label: a.label, line }),
        Some(a) => Ok((a.label, a.rights)),
        None => Ok((unit.pragma.label, unit.pragma.rights)),
    }
}

/// Per-function lowering state.
struct FnLower<'a> {
    ctx: &'a ModuleCtx,
    policy: &'a mut Policy,
    module: &'a mut IRModule,
    unit: &'a TranslationUnit,
    func: IRFunction,
    current: BlockId,
    terminated: bool,
    lexical: Vec<HashMap<String, LocalId>>,
    env: BTreeMap<LocalId, ValueId>,
    refinements: Vec<ScopeId>,
    stmt: StatementId,
    line: u32,
    next_stmt: &'a mut u32,
    used_names: BTreeMap<String, u32>,
}

impl<'a> FnLower<'a> {
    fn run(
        ctx: &'a ModuleCtx,
        policy: &'a mut Policy,
        module: &'a mut IRModule,
        unit: &'a TranslationUnit,
        def: &FunctionDef,
        id: FuncId,
        next_stmt: &'a mut u32,
    ) -> Result<IRFunction, LowerError> {
        if let Some(r) = def.refinement {
            if !policy.is_declared(r.label) {
                return Err(LowerError::UndeclaredPartition { label: r.label, line: def.span.line });
            }
        }
        let func = IRFunction {
            id,
            name: def.name.clone(),
            unit: unit.name.clone(),
            home: unit.pragma.label,
            noreturn: def.noreturn,
            refinement: def.refinement,
            params: Vec::new(),
            locals: Vec::new(),
            bindings: Vec::new(),
            blocks: vec![BasicBlock { id: BlockId(0), insts: Vec::new() }],
            next_value: 0,
            entry_stmt: StatementId(0),
        };
        let mut l = FnLower {
            ctx,
            policy,
            module,
            unit,
            func,
            current: BlockId(0),
            terminated: false,
            lexical: vec![HashMap::new()],
            env: BTreeMap::new(),
            refinements: Vec::new(),
            stmt: StatementId(0),
            line: def.span.line,
            next_stmt,
            used_names: BTreeMap::new(),
        };
        l.begin_statement(def.span.line);
        l.func.entry_stmt = l.stmt;
        for (i, p) in def.params.iter().enumerate() {
            let local = l.declare_local(p)?;
            l.func.params.push(local);
            let v = l.emit(Op::Param(i as u32));
            l.bind(local, v);
        }
        l.block(&def.body)?;
        if !l.terminated {
            l.line = def.span.line;
            l.stmt = l.func.entry_stmt;
            let zero = l.emit(Op::Const(0));
            l.emit(Op::Ret(Some(zero)));
        }
        Ok(l.func)
    }

    fn begin_statement(&mut self, line: u32) {
        let id = StatementId(*self.next_stmt);
        *self.next_stmt += 1;
        self.stmt = id;
        self.line = line;
        let scope = self.refinements.last().copied();
        self.module.statements.push(StatementInfo { id, function: self.func.id, line, scope });
        self.policy.statement_home.insert(id, self.func.home);

        let mut grants: Vec<(PartitionLabel, AccessRights)> = Vec::new();
        if let Some(r) = self.func.refinement {
            grants.push((r.label, r.rights));
        }
        for s in &self.refinements {
            let scope = self.module.scope(*s);
            grants.push((scope.label, scope.rights));
        }
        let mut row: PartitionRights = BTreeMap::new();
        for (label, rights) in grants {
            let base =
                row.get(&label).copied().or_else(|| self.policy.implied_privilege(id, label)).unwrap_or_default();
            row.insert(label, base.union(rights));
        }
        row.retain(|label, rights| self.policy.implied_privilege(id, *label) != Some(*rights));
        if !row.is_empty() {
            self.policy.overrides.insert(id, row);
        }
    }

    fn meta(&self) -> PolicyMetadata {
        PolicyMetadata {
            partition_label: self.func.home,
            rights: self.unit.pragma.rights,
            refinement_scope_id: self.refinements.last().copied(),
        }
    }

    fn emit(&mut self, op: Op) -> ValueId {
        let id = self.func.fresh_value();
        let inst = Inst { id, op, stmt: self.stmt, meta: self.meta() };
        self.func.blocks[self.current.index()].insts.push(inst);
        id
    }

    fn emit_into(&mut self, block: BlockId, op: Op) {
        let id = self.func.fresh_value();
        let inst = Inst { id, op, stmt: self.stmt, meta: self.meta() };
        self.func.blocks[block.index()].insts.push(inst);
    }

    fn new_block(&mut self) -> BlockId {
        let id = BlockId(self.func.blocks.len() as u32);
        self.func.blocks.push(BasicBlock { id, insts: Vec::new() });
        id
    }

    fn bind(&mut self, local: LocalId, value: ValueId) {
        self.env.insert(local, value);
        if !self.func.bindings.contains(&(value, local)) {
            self.func.bindings.push((value, local));
        }
    }

    fn declare_local(&mut self, decl: &VariableDecl) -> Result<LocalId, LowerError> {
        let (partition, rights) = resolve_attr(self.policy, self.unit, decl.partition_attr, decl.span.line)?;
        let count = self.used_names.entry(decl.name.clone()).or_insert(0);
        let qualified = if *count == 0 { decl.name.clone() } else { format!("{}#{}", decl.name, count) };
        *count += 1;
        let variable = VariableId::local(&self.func.name, &qualified);
        let id = LocalId(self.func.locals.len() as u32);
        self.func.locals.push(LocalDecl {
            id,
            name: decl.name.clone(),
            variable: variable.clone(),
            ty: decl.declared_type,
            partition,
            rights,
            annotated: decl.partition_attr.is_some(),
        });
        self.policy.data_assignment.insert(variable, partition);
        self.lexical.last_mut().expect("lexical scope").insert(decl.name.clone(), id);
        Ok(id)
    }

    fn lookup_local(&self, name: &str) -> Option<LocalId> {
        self.lexical.iter().rev().find_map(|scope| scope.get(name).copied())
    }

    fn block(&mut self, block: &Block) -> Result<(), LowerError> {
        self.lexical.push(HashMap::new());
        for stmt in &block.stmts {
            if self.terminated {
                break;
            }
            self.stmt(stmt)?;
        }
        self.lexical.pop();
        Ok(())
    }

    fn stmt(&mut self, stmt: &Stmt) -> Result<(), LowerError> {
        self.begin_statement(stmt.span.line);
        match &stmt.kind {
            StmtKind::Let { decl, value } => {
                let v = match (decl.declared_type, value) {
                    (Some(DeclType::Bytes(n)), _) => {
                        let partition = decl.partition_attr.map_or(self.func.home, |a| a.label);
                        self.emit(Op::AllocStack { size: u64::from(n), partition, key: None })
                    }
                    (_, Some(e)) => self.expr(e)?,
                    (_, None) => self.emit(Op::Const(0)),
                };
                let local = self.declare_local(decl)?;
                self.bind(local, v);
            }
            StmtKind::Assign { place: Place::Var(name), value } => {
                if let Some(local) = self.lookup_local(name) {
                    if matches!(self.func.local(local).ty, Some(DeclType::Bytes(_))) {
                        return Err(self.invalid(format!("cannot assign to array `{name}`")));
                    }
                    let v = self.expr(value)?;
                    self.bind(local, v);
                } else if let Some(&gid) = self.ctx.globals.get(name) {
                    let g = self.module.global(gid);
                    if g.immutable {
                        return Err(LowerError::ImmutableWrite { name: name.clone(), line: self.line });
                    }
                    if matches!(g.ty, DeclType::Bytes(_)) {
                        return Err(self.invalid(format!("cannot assign to array `{name}`")));
                    }
                    let v = self.expr(value)?;
                    let addr = self.emit(Op::GlobalAddr(gid));
                    self.emit(Op::Store { addr, value: v, width: Width::Word });
                } else {
                    return Err(self.unknown(name));
                }
            }
            StmtKind::Assign { place: Place::Index(name, idx), value } => {
                if let Some(&gid) = self.ctx.globals.get(name) {
                    if self.lookup_local(name).is_none() && self.module.global(gid).immutable {
                        return Err(LowerError::ImmutableWrite { name: name.clone(), line: self.line });
                    }
                }
                let base = self.pointer_of(name)?;
                let offset = self.expr(idx)?;
                let v = self.expr(value)?;
                let addr = self.emit(Op::Arith(BinOp::Add, base, offset));
                self.emit(Op::Store { addr, value: v, width: Width::Byte });
            }
            StmtKind::Expr(e) => {
                self.expr(e)?;
            }
            StmtKind::Free(e) => {
                let ptr = self.expr(e)?;
                self.emit(Op::HeapFree { ptr });
            }
            StmtKind::Return(value) => {
                let v = match value {
                    Some(e) => self.expr(e)?,
                    None => self.emit(Op::Const(0)),
                };
                self.emit(Op::Ret(Some(v)));
                self.terminated = true;
            }
            StmtKind::If { cond, then_block, else_block } => self.if_stmt(cond, then_block, else_block.as_ref())?,
            StmtKind::While { cond, body } => self.while_stmt(cond, body)?,
            StmtKind::Refine { refinement, body, .. } => {
                if !self.policy.is_declared(refinement.label) {
                    return Err(LowerError::UndeclaredPartition { label: refinement.label, line: self.line });
                }
                let id = ScopeId(self.module.scopes.len() as u32 + 1);
                self.module.scopes.push(RefinementScope {
                    id,
                    function: self.func.id,
                    parent: self.refinements.last().copied(),
                    label: refinement.label,
                    rights: refinement.rights,
                });
                let outer_stmt = self.stmt;
                self.refinements.push(id);
                // The marker belongs to the refined region.
                self.begin_statement(stmt.span.line);
                self.emit(Op::ScopeEnter(id));
                self.block(body)?;
                if !self.terminated {
                    self.emit(Op::ScopeExit(id));
                }
                self.refinements.pop();
                self.stmt = outer_stmt;
            }
        }
        Ok(())
    }

    fn if_stmt(&mut self, cond: &Expr, then_block: &Block, else_block: Option<&Block>) -> Result<(), LowerError> {
        let c = self.expr(cond)?;
        let branch_stmt = self.stmt;
        let entry_env = self.env.clone();
        let then_bb = self.new_block();
        let fallthrough = if else_block.is_none() { Some(self.new_block()) } else { None };
        let else_bb = match fallthrough {
            Some(join) => join,
            None => self.new_block(),
        };
        self.emit(Op::Branch { cond: c, then_block: then_bb, else_block: else_bb });
        let branch_block = self.current;

        let mut exits: Vec<(BlockId, BTreeMap<LocalId, ValueId>)> = Vec::new();

        self.current = then_bb;
        self.terminated = false;
        self.block(then_block)?;
        if !self.terminated {
            exits.push((self.current, self.env.clone()));
        }

        match else_block {
            Some(else_block) => {
                self.current = else_bb;
                self.env = entry_env.clone();
                self.terminated = false;
                self.block(else_block)?;
                if !self.terminated {
                    exits.push((self.current, self.env.clone()));
                }
            }
            None => exits.push((branch_block, entry_env.clone())),
        }

        if exits.is_empty() {
            self.terminated = true;
            return Ok(());
        }
        let join = match fallthrough {
            Some(join) => join,
            None => self.new_block(),
        };
        self.stmt = branch_stmt;
        for (block, _) in &exits {
            if *block != branch_block {
                self.emit_into(*block, Op::Jump(join));
            }
        }
        self.current = join;
        self.terminated = false;
        self.env = entry_env.clone();
        for local in entry_env.keys() {
            let incoming: Vec<(ValueId, BlockId)> = exits.iter().map(|(b, env)| (env[local], *b)).collect();
            let first = incoming[0].0;
            if incoming.iter().all(|(v, _)| *v == first) {
                self.env.insert(*local, first);
            } else {
                let phi = self.emit(Op::Phi(incoming));
                self.bind(*local, phi);
            }
        }
        Ok(())
    }

    fn while_stmt(&mut self, cond: &Expr, body: &Block) -> Result<(), LowerError> {
        let loop_stmt = self.stmt;
        let preheader = self.current;
        let header = self.new_block();
        self.emit(Op::Jump(header));
        self.current = header;

        let mut assigned = BTreeSet::new();
        collect_assigned(body, &mut assigned);
        let mut phis: Vec<(LocalId, ValueId)> = Vec::new();
        for name in &assigned {
            let Some(local) = self.lookup_local(name) else { continue };
            let Some(&incoming) = self.env.get(&local) else { continue };
            let phi = self.emit(Op::Phi(vec![(incoming, preheader)]));
            self.bind(local, phi);
            phis.push((local, phi));
        }

        let c = self.expr(cond)?;
        let body_bb = self.new_block();
        let exit_bb = self.new_block();
        self.emit(Op::Branch { cond: c, then_block: body_bb, else_block: exit_bb });
        let header_env = self.env.clone();

        self.current = body_bb;
        self.block(body)?;
        if !self.terminated {
            let latch = self.current;
            self.stmt = loop_stmt;
            self.emit(Op::Jump(header));
            for (local, phi) in &phis {
                let value = self.env[local];
                let (block, pos, _) = self.func.find(*phi).expect("phi exists");
                if let Op::Phi(incoming) = &mut self.func.blocks[block.index()].insts[pos].op {
                    incoming.push((value, latch));
                }
            }
        }
        self.current = exit_bb;
        self.terminated = false;
        self.env = header_env;
        Ok(())
    }

    fn invalid(&self, message: String) -> LowerError {
        LowerError::InvalidUse { message, line: self.line }
    }

    fn unknown(&self, name: &str) -> LowerError {
        LowerError::UnknownName { name: name.to_string(), line: self.line }
    }

    /// Base address for `name[...]`.
    fn pointer_of(&mut self, name: &str) -> Result<ValueId, LowerError> {
        if let Some(local) = self.lookup_local(name) {
            return Ok(self.env[&local]);
        }
        if let Some(&gid) = self.ctx.globals.get(name) {
            let addr = self.emit(Op::GlobalAddr(gid));
            return Ok(match self.module.global(gid).ty {
                DeclType::Bytes(_) => addr,
                _ => self.emit(Op::Load { addr, width: Width::Word }),
            });
        }
        if self.ctx.functions.contains_key(name) {
            return Err(self.invalid(format!("function `{name}` cannot be indexed")));
        }
        Err(self.unknown(name))
    }

    fn expr(&mut self, e: &Expr) -> Result<ValueId, LowerError> {
        match e {
            Expr::Int(v) => Ok(self.emit(Op::Const(*v))),
            Expr::Var(name) => {
                if let Some(local) = self.lookup_local(name) {
                    return Ok(self.env[&local]);
                }
                if let Some(&gid) = self.ctx.globals.get(name) {
                    let addr = self.emit(Op::GlobalAddr(gid));
                    return Ok(match self.module.global(gid).ty {
                        DeclType::Bytes(_) => addr,
                        _ => self.emit(Op::Load { addr, width: Width::Word }),
                    });
                }
                if self.ctx.functions.contains_key(name) {
                    return Err(self.invalid(format!("use `&{name}` to take a function's address")));
                }
                Err(self.unknown(name))
            }
            Expr::Index(name, idx) => {
                let base = self.pointer_of(name)?;
                let offset = self.expr(idx)?;
                let addr = self.emit(Op::Arith(BinOp::Add, base, offset));
                Ok(self.emit(Op::Load { addr, width: Width::Byte }))
            }
            Expr::AddrOf(name) => {
                if self.lookup_local(name).is_some() {
                    return Err(self.invalid(format!("cannot take the address of local `{name}`")));
                }
                if let Some(&gid) = self.ctx.globals.get(name) {
                    if self.module.global(gid).immutable {
                        return Err(LowerError::ImmutableWrite { name: name.clone(), line: self.line });
                    }
                    return Ok(self.emit(Op::GlobalAddr(gid)));
                }
                if let Some(sig) = self.ctx.functions.get(name) {
                    return Ok(self.emit(Op::TakeFnAddr(sig.id)));
                }
                Err(self.unknown(name))
            }
            Expr::Call(name, args) => {
                let mut values = Vec::with_capacity(args.len());
                for a in args {
                    values.push(self.expr(a)?);
                }
                if let Some(local) = self.lookup_local(name) {
                    let callee = self.env[&local];
                    return Ok(self.emit(Op::CallIndirect { callee, args: values }));
                }
                if let Some(sig) = self.ctx.functions.get(name) {
                    if sig.arity != values.len() {
                        return Err(LowerError::ArityMismatch {
                            name: name.clone(),
                            expected: sig.arity,
                            found: values.len(),
                            line: self.line,
                        });
                    }
                    return Ok(self.emit(Op::CallDirect { callee: sig.id, args: values }));
                }
                Err(self.unknown(name))
            }
            Expr::Alloc(size) => {
                let size = self.expr(size)?;
                Ok(self.emit(Op::HeapAlloc { size }))
            }
            Expr::Unary(UnOp::Neg, inner) => {
                let v = self.expr(inner)?;
                let zero = self.emit(Op::Const(0));
                Ok(self.emit(Op::Arith(BinOp::Sub, zero, v)))
            }
            Expr::Unary(UnOp::Not, inner) => {
                let v = self.expr(inner)?;
                let zero = self.emit(Op::Const(0));
                Ok(self.emit(Op::Arith(BinOp::Eq, v, zero)))
            }
            Expr::Binary(op, l, r) => {
                let a = self.expr(l)?;
                let b = self.expr(r)?;
                Ok(self.emit(Op::Arith(*op, a, b)))
            }
        }
    }
}

fn collect_assigned(block: &Block, out: &mut BTreeSet<String>) {
    for stmt in &block.stmts {
        match &stmt.kind {
            StmtKind::Assign { place: Place::Var(name), .. } => {
                out.insert(name.clone());
            }
            StmtKind::If { then_block, else_block, .. } => {
                collect_assigned(then_block, out);
                if let Some(e) = else_block {
                    collect_assigned(e, out);
                }
            }
            StmtKind::While { body, .. } | StmtKind::Refine { body, .. } => collect_assigned(body, out),
            _ => {}
        }
    }
}

/// Evaluate an arithmetic opcode on two words.
pub fn eval_arith(op: BinOp, a: i64, b: i64) -> i64 {
    match op {
        BinOp::Add => a.wrapping_add(b),
        BinOp::Sub => a.wrapping_sub(b),
        BinOp::Mul => a.wrapping_mul(b),
        BinOp::Div => {
            if b == 0 {
                0
            } else {
                a.wrapping_div(b)
            }
        }
        BinOp::Rem => {
            if b == 0 {
                0
            } else {
                a.wrapping_rem(b)
            }
        }
        BinOp::And => a & b,
        BinOp::Or => a | b,
        BinOp::Xor => a ^ b,
        BinOp::Shl => a.wrapping_shl((b & 63) as u32),
        BinOp::Shr => ((a as u64) >> (b & 63)) as i64,
        BinOp::Eq => i64::from(a == b),
        BinOp::Ne => i64::from(a != b),
        BinOp::Lt => i64::from(a < b),
        BinOp::Le => i64::from(a <= b),
        BinOp::Gt => i64::from(a > b),
        BinOp::Ge => i64::from(a >= b),
        BinOp::LogicAnd => i64::from(a != 0 && b != 0),
        BinOp::LogicOr => i64::from(a != 0 || b != 0),
    }
}
