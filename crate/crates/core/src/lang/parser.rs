//! Lexer and recursive-descent parser for `.pml` source.

use thiserror::Error;

use super::ast::*;
use crate::policy::{AccessRights, PartitionLabel};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("{line}:{col}: {message}")]
    Syntax { line: u32, col: u32, message: String },
    #[error("{line}:{col}: privilege refinement has no structurally matching end")]
    UnbalancedRefinement { line: u32, col: u32 },
    #[error("{line}:{col}: unit `{unit}` already carries a partition pragma")]
    DuplicatePragma { unit: String, line: u32, col: u32 },
    #[error("unit `{unit}` has no `#pragma partition` directive")]
    MissingPragma { unit: String },
}

impl ParseError {
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::Syntax { .. } => "ParseError",
            ParseError::UnbalancedRefinement { .. } => "UnbalancedRefinement",
            ParseError::DuplicatePragma { .. } => "DuplicatePragma",
            ParseError::MissingPragma { .. } => "MissingPragma",
        }
    }

    pub fn location(&self) -> String {
        match self {
            ParseError::Syntax { line, col, .. }
            | ParseError::UnbalancedRefinement { line, col }
            | ParseError::DuplicatePragma { line, col, .. } => format!("{line}:{col}"),
            ParseError::MissingPragma { unit } => format!("unit:{unit}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(u64),
    Punct(&'static str),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    span: Span,
}

const PUNCTS: [&str; 30] = [
    "==", "!=", "<=", ">=", "<<", ">>", "&&", "||", "{", "}", "(", ")", "[", "]", ",", ";", ":", "=", "<", ">", "+",
    "-", "*", "/", "%", "&", "|", "^", "!", "#",
];

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    while i < chars.len() {
        let c = chars[i];
        let span = Span { line, col };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += (i - start) as u32;
            tokens.push(Token { tok: Tok::Ident(chars[start..i].iter().collect()), span });
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                i += 1;
            }
            col += (i - start) as u32;
            let literal: String = chars[start..i].iter().collect();
            let value = match literal.strip_prefix("0x").or_else(|| literal.strip_prefix("0X")) {
                Some(hex) => u64::from_str_radix(hex, 16),
                None => literal.parse::<u64>(),
            }
            .map_err(|_| ParseError::Syntax {
                line: span.line,
                col: span.col,
                message: format!("bad integer literal `{literal}`"),
            })?;
            tokens.push(Token { tok: Tok::Int(value), span });
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 2)].iter().collect();
        let punct = PUNCTS.iter().find(|p| rest.starts_with(**p));
        match punct {
            Some(p) => {
                i += p.len();
                col += p.len() as u32;
                tokens.push(Token { tok: Tok::Punct(p), span });
            }
            None => return Err(ParseError::Syntax { line, col, message: format!("unexpected character `{c}`") }),
        }
    }
    tokens.push(Token { tok: Tok::Eof, span: Span { line, col } });
    Ok(tokens)
}

const KEYWORDS: [&str; 14] =
    ["module", "global", "const", "fn", "let", "if", "else", "while", "return", "free", "alloc", "int", "ptr", "bytes"];

/// Attributes that may precede an item or statement.
#[derive(Debug, Default)]
struct Attrs {
    partition: Option<PartitionAttr>,
    privilege: Option<(Refinement, Span)>,
    noreturn: bool,
    span: Option<Span>,
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    /// Spans of refinement blocks currently open, innermost last.
    open_refinements: Vec<Span>,
    /// Refinement blocks opened so far in the current function.
    fn_refinements: Vec<Span>,
}

/// Parse a program whose units are all wrapped in `module` blocks, or a
/// single unnamed unit (named `main`).
pub fn parse_program(text: &str) -> Result<SourceProgram, ParseError> {
    parse_source(text, "main")
}

/// Parse one source file. Files without `module` blocks form a single unit
/// named `default_unit`.
pub fn parse_source(text: &str, default_unit: &str) -> Result<SourceProgram, ParseError> {
    let tokens = lex(text)?;
    let mut p = Parser { tokens, pos: 0, open_refinements: Vec::new(), fn_refinements: Vec::new() };
    p.program(default_unit)
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        let idx = (self.pos + n).min(self.tokens.len() - 1);
        &self.tokens[idx].tok
    }

    fn span(&self) -> Span {
        self.tokens[self.pos].span
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        let span = self.span();
        Err(ParseError::Syntax { line: span.line, col: span.col, message: message.into() })
    }

    fn describe(&self) -> String {
        match self.peek() {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Int(v) => format!("`{v}`"),
            Tok::Punct(p) => format!("`{p}`"),
            Tok::Eof => "end of input".to_string(),
        }
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Tok::Punct(q) if *q == p)
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if self.is_punct(p) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, p: &str) -> Result<(), ParseError> {
        if self.eat_punct(p) {
            Ok(())
        } else {
            self.error(format!("expected `{p}`, found {}", self.describe()))
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.is_keyword(kw) {
            self.bump();
            Ok(())
        } else {
            self.error(format!("expected `{kw}`, found {}", self.describe()))
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                self.bump();
                Ok(s)
            }
            _ => self.error(format!("expected identifier, found {}", self.describe())),
        }
    }

    fn int(&mut self) -> Result<u64, ParseError> {
        match *self.peek() {
            Tok::Int(v) => {
                self.bump();
                Ok(v)
            }
            _ => self.error(format!("expected integer, found {}", self.describe())),
        }
    }

    fn label(&mut self) -> Result<PartitionLabel, ParseError> {
        let span = self.span();
        let v = self.int()?;
        u32::try_from(v).map(PartitionLabel).map_err(|_| ParseError::Syntax {
            line: span.line,
            col: span.col,
            message: format!("partition label {v} out of range"),
        })
    }

    fn rights(&mut self) -> Result<AccessRights, ParseError> {
        let span = self.span();
        let word = match self.peek().clone() {
            Tok::Ident(s) => s,
            Tok::Punct("-") => "-".to_string(),
            _ => return self.error(format!("expected access rights, found {}", self.describe())),
        };
        self.bump();
        word.parse().map_err(|_| ParseError::Syntax {
            line: span.line,
            col: span.col,
            message: format!("unknown access rights `{word}` (expected rw, r, w or none)"),
        })
    }

    fn program(&mut self, default_unit: &str) -> Result<SourceProgram, ParseError> {
        let mut program = SourceProgram::default();
        if self.is_keyword("module") {
            while self.is_keyword("module") {
                let span = self.span();
                self.bump();
                let name = self.ident()?;
                self.expect_punct("{")?;
                let unit = self.unit_body(name, span, true)?;
                program.units.push(unit);
            }
            if *self.peek() != Tok::Eof {
                return self.error(format!("expected `module`, found {}", self.describe()));
            }
        } else if *self.peek() != Tok::Eof {
            let span = self.span();
            program.units.push(self.unit_body(default_unit.to_string(), span, false)?);
        }
        Ok(program)
    }

    fn unit_body(&mut self, name: String, _span: Span, braced: bool) -> Result<TranslationUnit, ParseError> {
        let mut pragma: Option<PartitionPragma> = None;
        let mut globals = Vec::new();
        let mut functions = Vec::new();
        loop {
            if braced && self.eat_punct("}") {
                break;
            }
            // A module that runs out while its last function opened a
            // refinement: that block consumed the function's closing brace.
            if braced && (*self.peek() == Tok::Eof || self.is_keyword("module")) {
                if let Some(open) = self.fn_refinements.last() {
                    return Err(ParseError::UnbalancedRefinement { line: open.line, col: open.col });
                }
            }
            if *self.peek() == Tok::Eof {
                if braced {
                    return self.error(format!("unterminated module `{name}`"));
                }
                break;
            }
            if self.is_punct("#") {
                let span = self.span();
                self.bump();
                self.expect_keyword("pragma")?;
                self.expect_keyword("partition")?;
                let label = self.label()?;
                let rights = self.rights()?;
                if pragma.is_some() {
                    return Err(ParseError::DuplicatePragma { unit: name, line: span.line, col: span.col });
                }
                pragma = Some(PartitionPragma { label, rights, span });
                continue;
            }
            let attrs = self.attributes()?;
            if self.is_keyword("fn") {
                functions.push(self.function(attrs)?);
            } else if self.is_keyword("global") || self.is_keyword("const") {
                globals.push(self.global(attrs)?);
            } else {
                return self.error(format!("expected `fn`, `global` or `#pragma`, found {}", self.describe()));
            }
        }
        let pragma = pragma.ok_or(ParseError::MissingPragma { unit: name.clone() })?;
        Ok(TranslationUnit { name, pragma, globals, functions })
    }

    fn at_attribute(&self) -> bool {
        self.is_punct("[") && matches!(self.peek_at(1), Tok::Punct("["))
    }

    fn attributes(&mut self) -> Result<Attrs, ParseError> {
        let mut attrs = Attrs::default();
        while self.at_attribute() {
            attrs.span.get_or_insert(self.span());
            self.bump();
            self.bump();
            loop {
                let span = self.span();
                let name = match self.peek().clone() {
                    Tok::Ident(s) => s,
                    _ => return self.error(format!("expected attribute name, found {}", self.describe())),
                };
                self.bump();
                match name.as_str() {
                    "partition" | "privilege" => {
                        self.expect_punct("(")?;
                        let label = self.label()?;
                        self.expect_punct(",")?;
                        let rights = self.rights()?;
                        self.expect_punct(")")?;
                        if name == "partition" {
                            if attrs.partition.is_some() {
                                return Err(syntax(span, "duplicate partition attribute"));
                            }
                            attrs.partition = Some(PartitionAttr { label, rights });
                        } else {
                            if attrs.privilege.is_some() {
                                return Err(syntax(span, "duplicate privilege attribute"));
                            }
                            attrs.privilege = Some((Refinement { label, rights }, span));
                        }
                    }
                    "noreturn" => attrs.noreturn = true,
                    other => return Err(syntax(span, format!("unknown attribute `{other}`"))),
                }
                if !self.eat_punct(",") {
                    break;
                }
            }
            self.expect_punct("]")?;
            self.expect_punct("]")?;
        }
        Ok(attrs)
    }

    fn decl_type(&mut self) -> Result<DeclType, ParseError> {
        if self.is_keyword("int") {
            self.bump();
            Ok(DeclType::Int)
        } else if self.is_keyword("ptr") {
            self.bump();
            Ok(DeclType::Ptr)
        } else if self.is_keyword("bytes") {
            self.bump();
            self.expect_punct("[")?;
            let span = self.span();
            let n = self.int()?;
            self.expect_punct("]")?;
            match u32::try_from(n) {
                Ok(n) if n > 0 => Ok(DeclType::Bytes(n)),
                _ => Err(syntax(span, format!("invalid array length {n}"))),
            }
        } else {
            self.error(format!("expected type, found {}", self.describe()))
        }
    }

    fn global(&mut self, attrs: Attrs) -> Result<VariableDecl, ParseError> {
        let span = attrs.span.unwrap_or(self.span());
        if attrs.privilege.is_some() || attrs.noreturn {
            return Err(syntax(span, "only `partition` attributes apply to globals"));
        }
        let immutable = self.is_keyword("const");
        if immutable {
            self.bump();
        }
        self.expect_keyword("global")?;
        let name = self.ident()?;
        self.expect_punct(":")?;
        let ty = self.decl_type()?;
        let init = if self.eat_punct("=") {
            let negative = self.eat_punct("-");
            let v = self.int()? as i64;
            Some(if negative { v.wrapping_neg() } else { v })
        } else {
            None
        };
        self.expect_punct(";")?;
        Ok(VariableDecl {
            name,
            scope: Scope::Global,
            declared_type: Some(ty),
            immutable,
            partition_attr: attrs.partition,
            init,
            span,
        })
    }

    fn function(&mut self, attrs: Attrs) -> Result<FunctionDef, ParseError> {
        self.fn_refinements.clear();
        let span = attrs.span.unwrap_or(self.span());
        if attrs.partition.is_some() {
            return Err(syntax(span, "`partition` attributes apply to data, not functions"));
        }
        self.expect_keyword("fn")?;
        let name = self.ident()?;
        self.expect_punct("(")?;
        let mut params = Vec::new();
        if !self.is_punct(")") {
            loop {
                let pattrs = self.attributes()?;
                let pspan = pattrs.span.unwrap_or(self.span());
                if pattrs.privilege.is_some() || pattrs.noreturn {
                    return Err(syntax(pspan, "only `partition` attributes apply to parameters"));
                }
                let pname = self.ident()?;
                let declared_type = if self.eat_punct(":") { Some(self.decl_type()?) } else { None };
                if matches!(declared_type, Some(DeclType::Bytes(_))) {
                    return Err(syntax(pspan, "parameters cannot be arrays"));
                }
                params.push(VariableDecl {
                    name: pname,
                    scope: Scope::Param,
                    declared_type,
                    immutable: false,
                    partition_attr: pattrs.partition,
                    init: None,
                    span: pspan,
                });
                if !self.eat_punct(",") {
                    break;
                }
            }
        }
        self.expect_punct(")")?;
        let body = self.block()?;
        Ok(FunctionDef {
            name,
            params,
            noreturn: attrs.noreturn,
            refinement: attrs.privilege.map(|(r, _)| r),
            body,
            span,
        })
    }

    fn block(&mut self) -> Result<Block, ParseError> {
        self.expect_punct("{")?;
        let mut stmts = Vec::new();
        loop {
            if self.eat_punct("}") {
                return Ok(Block { stmts });
            }
            // A block that runs into the next item or the end of input has
            // lost a closing brace; blame the latest refinement if any, since
            // its body will have consumed the enclosing block's brace.
            let open = self.open_refinements.last().or(self.fn_refinements.last()).copied();
            if let Some(open) = open {
                let runaway = matches!(self.peek(), Tok::Eof | Tok::Punct("#"))
                    || self.is_keyword("fn")
                    || self.is_keyword("module")
                    || self.is_keyword("global");
                if runaway {
                    return Err(ParseError::UnbalancedRefinement { line: open.line, col: open.col });
                }
            }
            if *self.peek() == Tok::Eof {
                return self.error("unexpected end of input, expected `}`");
            }
            stmts.push(self.stmt()?);
        }
    }

    fn stmt(&mut self) -> Result<Stmt, ParseError> {
        let attrs = self.attributes()?;
        let span = attrs.span.unwrap_or(self.span());
        let rspan = span;
        if attrs.noreturn {
            return Err(syntax(span, "`noreturn` applies to functions only"));
        }
        if let Some((refinement, _)) = attrs.privilege {
            if attrs.partition.is_some() {
                return Err(syntax(span, "a refinement cannot carry a partition attribute"));
            }
            // A raise with nothing to scope over: the begin-without-end shape.
            if self.is_punct(";") || self.is_punct("}") || *self.peek() == Tok::Eof {
                return Err(ParseError::UnbalancedRefinement { line: rspan.line, col: rspan.col });
            }
            if self.is_keyword("let") {
                return Err(syntax(span, "a refinement cannot wrap a declaration"));
            }
            let braced = self.is_punct("{");
            let body = if braced {
                self.open_refinements.push(rspan);
                self.fn_refinements.push(rspan);
                let body = self.block();
                self.open_refinements.pop();
                body?
            } else {
                Block { stmts: vec![self.stmt()?] }
            };
            return Ok(Stmt { kind: StmtKind::Refine { refinement, body, braced }, span });
        }
        if self.is_keyword("let") {
            self.bump();
            let name = self.ident()?;
            let declared_type = if self.eat_punct(":") { Some(self.decl_type()?) } else { None };
            let value = if self.eat_punct("=") { Some(self.expr()?) } else { None };
            if matches!(declared_type, Some(DeclType::Bytes(_))) && value.is_some() {
                return Err(syntax(span, "array locals cannot have an initializer"));
            }
            self.expect_punct(";")?;
            let decl = VariableDecl {
                name,
                scope: Scope::Local,
                declared_type,
                immutable: false,
                partition_attr: attrs.partition,
                init: None,
                span,
            };
            return Ok(Stmt { kind: StmtKind::Let { decl, value }, span });
        }
        if attrs.partition.is_some() {
            return Err(syntax(span, "`partition` attributes apply to declarations only"));
        }
        let kind = if self.is_keyword("if") {
            self.if_stmt()?
        } else if self.is_keyword("while") {
            self.bump();
            let cond = self.expr()?;
            let body = self.block()?;
            StmtKind::While { cond, body }
        } else if self.is_keyword("return") {
            self.bump();
            let value = if self.is_punct(";") { None } else { Some(self.expr()?) };
            self.expect_punct(";")?;
            StmtKind::Return(value)
        } else if self.is_keyword("free") {
            self.bump();
            self.expect_punct("(")?;
            let e = self.expr()?;
            self.expect_punct(")")?;
            self.expect_punct(";")?;
            StmtKind::Free(e)
        } else {
            self.simple_stmt()?
        };
        Ok(Stmt { kind, span })
    }

    fn if_stmt(&mut self) -> Result<StmtKind, ParseError> {
        self.expect_keyword("if")?;
        let cond = self.expr()?;
        let then_block = self.block()?;
        let else_block = if self.is_keyword("else") {
            self.bump();
            if self.is_keyword("if") {
                let span = self.span();
                let nested = self.if_stmt()?;
                Some(Block { stmts: vec![Stmt { kind: nested, span }] })
            } else {
                Some(self.block()?)
            }
        } else {
            None
        };
        Ok(StmtKind::If { cond, then_block, else_block })
    }

    fn simple_stmt(&mut self) -> Result<StmtKind, ParseError> {
        if let Tok::Ident(name) = self.peek().clone() {
            if !KEYWORDS.contains(&name.as_str()) {
                let save = self.pos;
                self.bump();
                let place = if self.eat_punct("[") {
                    let idx = self.expr()?;
                    self.expect_punct("]")?;
                    Some(Place::Index(name, idx))
                } else {
                    Some(Place::Var(name))
                };
                if self.eat_punct("=") {
                    let value = self.expr()?;
                    self.expect_punct(";")?;
                    return Ok(StmtKind::Assign { place: place.expect("place parsed"), value });
                }
                self.pos = save;
            }
        }
        let e = self.expr()?;
        self.expect_punct(";")?;
        Ok(StmtKind::Expr(e))
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.binary(1)
    }

    fn peek_binop(&self) -> Option<BinOp> {
        let Tok::Punct(p) = self.peek() else { return None };
        Some(match *p {
            "+" => BinOp::Add,
            "-" => BinOp::Sub,
            "*" => BinOp::Mul,
            "/" => BinOp::Div,
            "%" => BinOp::Rem,
            "&" => BinOp::And,
            "|" => BinOp::Or,
            "^" => BinOp::Xor,
            "<<" => BinOp::Shl,
            ">>" => BinOp::Shr,
            "==" => BinOp::Eq,
            "!=" => BinOp::Ne,
            "<" => BinOp::Lt,
            "<=" => BinOp::Le,
            ">" => BinOp::Gt,
            ">=" => BinOp::Ge,
            "&&" => BinOp::LogicAnd,
            "||" => BinOp::LogicOr,
            _ => return None,
        })
    }

    fn binary(&mut self, min_prec: u8) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.peek_binop() {
            if op.precedence() < min_prec {
                break;
            }
            self.bump();
            let rhs = self.binary(op.precedence() + 1)?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat_punct("-") {
            let inner = self.unary()?;
            return Ok(match inner {
                Expr::Int(v) => Expr::Int(v.wrapping_neg()),
                other => Expr::Unary(UnOp::Neg, Box::new(other)),
            });
        }
        if self.eat_punct("!") {
            return Ok(Expr::Unary(UnOp::Not, Box::new(self.unary()?)));
        }
        if self.eat_punct("&") {
            return Ok(Expr::AddrOf(self.ident()?));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(Expr::Int(v as i64))
            }
            Tok::Punct("(") => {
                self.bump();
                let e = self.expr()?;
                self.expect_punct(")")?;
                Ok(e)
            }
            Tok::Ident(kw) if kw == "alloc" => {
                self.bump();
                self.expect_punct("(")?;
                let size = self.expr()?;
                self.expect_punct(")")?;
                Ok(Expr::Alloc(Box::new(size)))
            }
            Tok::Ident(_) => {
                let name = self.ident()?;
                if self.eat_punct("(") {
                    let mut args = Vec::new();
                    if !self.is_punct(")") {
                        loop {
                            args.push(self.expr()?);
                            if !self.eat_punct(",") {
                                break;
                            }
                        }
                    }
                    self.expect_punct(")")?;
                    Ok(Expr::Call(name, args))
                } else if self.eat_punct("[") {
                    let idx = self.expr()?;
                    self.expect_punct("]")?;
                    Ok(Expr::Index(name, Box::new(idx)))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            _ => self.error(format!("expected expression, found {}", self.describe())),
        }
    }
}

fn syntax(span: Span, message: impl Into<String>) -> ParseError {
    ParseError::Syntax { line: span.line, col: span.col, message: message.into() }
}
