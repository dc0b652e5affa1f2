//! Byte-stable textual IR dump.
//!
//! One instruction per line:
//! `%id = opcode operands !partition(<label>,<rights>)[,!scope(<n>)],!stmt(<s>)`.

use std::fmt::Write as _;

use super::ir::*;

pub fn dump_module(module: &IRModule) -> String {
    let mut out = String::new();
    for g in &module.globals {
        let _ = write!(out, "global @{}: {}", g.name, g.ty);
        if let Some(init) = g.init {
            let _ = write!(out, " = {init}");
        }
        if g.immutable {
            out.push_str(" const");
        }
        let _ = writeln!(out, " {}", g.meta);
    }
    for s in &module.scopes {
        let parent = s.parent.map_or("none".to_string(), |p| p.0.to_string());
        let _ = writeln!(
            out,
            "scope {} @{} parent={} partition={} rights={}",
            s.id.0,
            module.function(s.function).name,
            parent,
            s.label,
            s.rights
        );
    }
    for f in &module.functions {
        out.push('\n');
        dump_function(&mut out, module, f);
    }
    out
}

fn dump_function(out: &mut String, module: &IRModule, f: &IRFunction) {
    let _ = write!(out, "fn @{}(", f.name);
    for (i, p) in f.params.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&f.local(*p).name);
    }
    let _ = write!(out, ") home={}", f.home);
    if f.noreturn {
        out.push_str(" noreturn");
    }
    if let Some(r) = f.refinement {
        let _ = write!(out, " privilege({},{})", r.label, r.rights);
    }
    out.push('\n');
    for l in &f.locals {
        let ty = l.ty.map_or("word".to_string(), |t| t.to_string());
        let _ = writeln!(
            out,
            "  local {} : {} !partition({},{}){}",
            l.variable,
            ty,
            l.partition,
            l.rights,
            if l.annotated { " annotated" } else { "" }
        );
    }
    for b in &f.blocks {
        let _ = writeln!(out, "{}:", b.id);
        for inst in &b.insts {
            let _ = writeln!(out, "  {}", format_inst(module, inst));
        }
    }
}

fn list(values: &[ValueId]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

fn width(w: Width) -> &'static str {
    match w {
        Width::Byte => "byte",
        Width::Word => "word",
    }
}

pub fn format_inst(module: &IRModule, inst: &Inst) -> String {
    let fname = |id: FuncId| module.functions.get(id.index()).map_or(id.to_string(), |f| f.name.clone());
    let operands = match &inst.op {
        Op::Param(i) => i.to_string(),
        Op::Const(v) => v.to_string(),
        Op::GlobalAddr(g) => format!("@{}", module.globals.get(g.index()).map_or(g.to_string(), |g| g.name.clone())),
        Op::Arith(op, a, b) => format!("{} {a}, {b}", format!("{op:?}").to_lowercase()),
        Op::AllocStack { size, partition, key } => match key {
            Some(k) => format!("{size} partition={partition} key={k}"),
            None => format!("{size} partition={partition}"),
        },
        Op::HeapAlloc { size } => size.to_string(),
        Op::HeapFree { ptr } => ptr.to_string(),
        Op::Load { addr, width: w } => format!("{} {addr}", width(*w)),
        Op::Store { addr, value, width: w } => format!("{} {addr}, {value}", width(*w)),
        Op::CallDirect { callee, args } => format!("@{}({})", fname(*callee), list(args)),
        Op::CallIndirect { callee, args } => format!("{callee}({})", list(args)),
        Op::TakeFnAddr(f) => format!("@{}", fname(*f)),
        Op::Phi(incoming) => incoming.iter().map(|(v, b)| format!("[{v}, {b}]")).collect::<Vec<_>>().join(", "),
        Op::Branch { cond, then_block, else_block } => format!("{cond}, {then_block}, {else_block}"),
        Op::Jump(b) => b.to_string(),
        Op::Ret(v) => v.map_or(String::new(), |v| v.to_string()),
        Op::ScopeEnter(s) | Op::ScopeExit(s) => s.0.to_string(),
        Op::SetPrivileges { vector, role } => format!("{vector} {}", role.as_str()),
        Op::SetPrivilegesDynamic { target } => target.to_string(),
        Op::RestorePrivilegesDynamic { vector } => vector.to_string(),
        Op::RegisterAtFn { function, vector } => format!("@{} {vector}", fname(*function)),
        Op::PartitionAlloc { size, key } => format!("{size}, key={key}"),
        Op::PartitionFree { ptr, key } => format!("{ptr}, key={key}"),
    };
    let mut line = format!("{} = {}", inst.id, inst.op.opcode());
    if !operands.is_empty() {
        line.push(' ');
        line.push_str(&operands);
    }
    let _ = write!(line, " {},!stmt({})", inst.meta, inst.stmt);
    line
}
