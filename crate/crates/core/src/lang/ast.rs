//! Surface syntax tree for `.pml` programs, and its pretty printer.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::policy::{AccessRights, PartitionLabel};

/// Source position. Positions never participate in equality so that a
/// printed-and-reparsed tree compares equal to the original.
#[derive(Debug, Clone, Copy, Default)]
pub struct Span {
    pub line: u32,
    pub col: u32,
}

impl PartialEq for Span {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Eq for Span {}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SourceProgram {
    pub units: Vec<TranslationUnit>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranslationUnit {
    pub name: String,
    pub pragma: PartitionPragma,
    pub globals: Vec<VariableDecl>,
    pub functions: Vec<FunctionDef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionPragma {
    pub label: PartitionLabel,
    pub rights: AccessRights,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionAttr {
    pub label: PartitionLabel,
    pub rights: AccessRights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeclType {
    Int,
    Ptr,
    Bytes(u32),
}

impl DeclType {
    pub fn size(self) -> u64 {
        match self {
            DeclType::Int | DeclType::Ptr => 8,
            DeclType::Bytes(n) => u64::from(n),
        }
    }
}

impl fmt::Display for DeclType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeclType::Int => f.write_str("int"),
            DeclType::Ptr => f.write_str("ptr"),
            DeclType::Bytes(n) => write!(f, "bytes[{n}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Global,
    Local,
    Param,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableDecl {
    pub name: String,
    pub scope: Scope,
    /// `None` for untyped locals (`let x = e;`), which hold a word.
    pub declared_type: Option<DeclType>,
    pub immutable: bool,
    pub partition_attr: Option<PartitionAttr>,
    pub init: Option<i64>,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refinement {
    pub label: PartitionLabel,
    pub rights: AccessRights,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionDef {
    pub name: String,
    pub params: Vec<VariableDecl>,
    pub noreturn: bool,
    pub refinement: Option<Refinement>,
    pub body: Block,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Block {
    pub stmts: Vec<Stmt>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stmt {
    pub kind: StmtKind,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StmtKind {
    Let {
        decl: VariableDecl,
        value: Option<Expr>,
    },
    Assign {
        place: Place,
        value: Expr,
    },
    Expr(Expr),
    If {
        cond: Expr,
        then_block: Block,
        else_block: Option<Block>,
    },
    While {
        cond: Expr,
        body: Block,
    },
    Return(Option<Expr>),
    Free(Expr),
    /// Block-structured privilege refinement. `braced` is false for the
    /// single-statement form.
    Refine {
        refinement: Refinement,
        body: Block,
        braced: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Place {
    Var(String),
    Index(String, Expr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    LogicAnd,
    LogicOr,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Rem => "%",
            BinOp::And => "&",
            BinOp::Or => "|",
            BinOp::Xor => "^",
            BinOp::Shl => "<<",
            BinOp::Shr => ">>",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::LogicAnd => "&&",
            BinOp::LogicOr => "||",
        }
    }

    /// Binding strength; higher binds tighter.
    pub fn precedence(self) -> u8 {
        match self {
            BinOp::LogicOr => 1,
            BinOp::LogicAnd => 2,
            BinOp::Or => 3,
            BinOp::Xor => 4,
            BinOp::And => 5,
            BinOp::Eq | BinOp::Ne => 6,
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => 7,
            BinOp::Shl | BinOp::Shr => 8,
            BinOp::Add | BinOp::Sub => 9,
            BinOp::Mul | BinOp::Div | BinOp::Rem => 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Int(i64),
    Var(String),
    Index(String, Box<Expr>),
    AddrOf(String),
    Call(String, Vec<Expr>),
    Alloc(Box<Expr>),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

impl fmt::Display for SourceProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        for (i, unit) in self.units.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            print_unit(&mut out, unit);
        }
        f.write_str(&out)
    }
}

fn print_unit(out: &mut String, unit: &TranslationUnit) {
    let _ = writeln!(out, "module {} {{", unit.name);
    let _ = writeln!(out, "  #pragma partition {} {}", unit.pragma.label, unit.pragma.rights);
    for g in &unit.globals {
        out.push_str("  ");
        print_global(out, g);
        out.push('\n');
    }
    for func in &unit.functions {
        print_function(out, func);
    }
    out.push_str("}\n");
}

fn print_partition_attr(out: &mut String, attr: &Option<PartitionAttr>) {
    if let Some(attr) = attr {
        let _ = write!(out, "[[partition({}, {})]] ", attr.label, attr.rights);
    }
}

fn print_global(out: &mut String, g: &VariableDecl) {
    print_partition_attr(out, &g.partition_attr);
    if g.immutable {
        out.push_str("const ");
    }
    let ty = g.declared_type.unwrap_or(DeclType::Int);
    let _ = write!(out, "global {}: {}", g.name, ty);
    if let Some(init) = g.init {
        let _ = write!(out, " = {init}");
    }
    out.push(';');
}

fn print_int(v: i64) -> String {
    if v < 0 {
        format!("({v})")
    } else {
        v.to_string()
    }
}

fn print_function(out: &mut String, func: &FunctionDef) {
    out.push_str("  ");
    if func.noreturn {
        out.push_str("[[noreturn]] ");
    }
    if let Some(r) = func.refinement {
        let _ = write!(out, "[[privilege({}, {})]] ", r.label, r.rights);
    }
    let _ = write!(out, "fn {}(", func.name);
    for (i, p) in func.params.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        print_partition_attr(out, &p.partition_attr);
        out.push_str(&p.name);
        if let Some(ty) = p.declared_type {
            let _ = write!(out, ": {ty}");
        }
    }
    out.push_str(") ");
    print_block(out, &func.body, 1);
    out.push('\n');
}

fn indent(out: &mut String, depth: usize) {
    for _ in 0..depth {
        out.push_str("  ");
    }
}

fn print_block(out: &mut String, block: &Block, depth: usize) {
    out.push_str("{\n");
    for stmt in &block.stmts {
        indent(out, depth + 1);
        print_stmt(out, stmt, depth + 1);
        out.push('\n');
    }
    indent(out, depth);
    out.push('}');
}

fn print_stmt(out: &mut String, stmt: &Stmt, depth: usize) {
    match &stmt.kind {
        StmtKind::Let { decl, value } => {
            print_partition_attr(out, &decl.partition_attr);
            let _ = write!(out, "let {}", decl.name);
            if let Some(ty) = decl.declared_type {
                let _ = write!(out, ": {ty}");
            }
            if let Some(v) = value {
                let _ = write!(out, " = {v}");
            }
            out.push(';');
        }
        StmtKind::Assign { place, value } => {
            match place {
                Place::Var(name) => out.push_str(name),
                Place::Index(name, idx) => {
                    let _ = write!(out, "{name}[{idx}]");
                }
            }
            let _ = write!(out, " = {value};");
        }
        StmtKind::Expr(e) => {
            let _ = write!(out, "{e};");
        }
        StmtKind::If { cond, then_block, else_block } => {
            let _ = write!(out, "if {cond} ");
            print_block(out, then_block, depth);
            if let Some(e) = else_block {
                out.push_str(" else ");
                print_block(out, e, depth);
            }
        }
        StmtKind::While { cond, body } => {
            let _ = write!(out, "while {cond} ");
            print_block(out, body, depth);
        }
        StmtKind::Return(None) => out.push_str("return;"),
        StmtKind::Return(Some(e)) => {
            let _ = write!(out, "return {e};");
        }
        StmtKind::Free(e) => {
            let _ = write!(out, "free({e});");
        }
        StmtKind::Refine { refinement, body, braced } => {
            let _ = write!(out, "[[privilege({}, {})]] ", refinement.label, refinement.rights);
            if *braced {
                print_block(out, body, depth);
            } else if let Some(inner) = body.stmts.first() {
                print_stmt(out, inner, depth);
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Int(v) => f.write_str(&print_int(*v)),
            Expr::Var(name) => f.write_str(name),
            Expr::Index(name, idx) => write!(f, "{name}[{idx}]"),
            Expr::AddrOf(name) => write!(f, "&{name}"),
            Expr::Call(name, args) => {
                write!(f, "{name}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
            Expr::Alloc(size) => write!(f, "alloc({size})"),
            Expr::Unary(UnOp::Neg, e) => write!(f, "-({e})"),
            Expr::Unary(UnOp::Not, e) => write!(f, "!({e})"),
            // Fully parenthesised: printing never depends on precedence.
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
        }
    }
}
