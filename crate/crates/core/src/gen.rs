//! Random `.pml` program generator for differential testing.
//!
//! Programs have at most four partitions and functions of at most
//! [`MAX_FUNCTION_INSTS`] IR instructions. Functions only call functions
//! generated before them, so there is no recursion.

use std::fmt::Write as _;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::lang::lower::lower_to_ir;
use crate::lang::parser::parse_program;

pub const MAX_PARTITIONS: usize = 4;
pub const MAX_FUNCTION_INSTS: usize = 30;

#[derive(Debug, Clone)]
struct Global {
    name: String,
    bytes: Option<u32>,
    immutable: bool,
}

#[derive(Debug, Clone)]
struct Func {
    name: String,
    arity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LocalKind {
    Word,
    Ptr(u32),
    Array(u32),
    FnPtr(usize),
}

#[derive(Debug, Clone)]
struct Local {
    name: String,
    kind: LocalKind,
}

struct Gen<'r> {
    rng: &'r mut StdRng,
    partitions: usize,
    globals: Vec<Global>,
    funcs: Vec<Func>,
    scopes: Vec<Vec<Local>>,
    fresh: usize,
    budget: i32,
}

impl Gen<'_> {
    fn chance(&mut self, p: f64) -> bool {
        self.rng.random_bool(p)
    }

    fn partition(&mut self) -> usize {
        self.rng.random_range(0..self.partitions)
    }

    fn rights(&mut self) -> &'static str {
        match self.rng.random_range(0..6) {
            0 => "r",
            1 => "none",
            _ => "rw",
        }
    }

    fn name(&mut self, prefix: &str) -> String {
        self.fresh += 1;
        format!("{prefix}{}", self.fresh)
    }

    fn locals(&self) -> impl Iterator<Item = &Local> {
        self.scopes.iter().flatten()
    }

    fn pick_local(&mut self, want: impl Fn(LocalKind) -> bool) -> Option<Local> {
        let found: Vec<Local> = self.locals().filter(|l| want(l.kind)).cloned().collect();
        if found.is_empty() {
            None
        } else {
            let i = self.rng.random_range(0..found.len());
            Some(found[i].clone())
        }
    }

    fn declare(&mut self, name: &str, kind: LocalKind) {
        self.scopes.last_mut().expect("scope").push(Local { name: name.to_string(), kind });
    }

    /// A small word-valued expression.
    fn atom(&mut self) -> String {
        if self.chance(0.5) {
            if let Some(l) = self.pick_local(|k| k == LocalKind::Word) {
                return l.name;
            }
        }
        self.rng.random_range(0..20).to_string()
    }

    fn expr(&mut self) -> String {
        if self.chance(0.3) {
            let op = ["+", "-", "*", "^", "&"][self.rng.random_range(0..5)];
            format!("({} {op} {})", self.atom(), self.atom())
        } else {
            self.atom()
        }
    }

    fn index(&mut self, len: u32) -> String {
        // Occasionally step just past the end.
        let hi = if self.chance(0.05) { len + 8 } else { len };
        self.rng.random_range(0..hi.max(1)).to_string()
    }

    fn args(&mut self, n: usize) -> String {
        (0..n).map(|_| self.atom()).collect::<Vec<_>>().join(", ")
    }

    fn stmt(&mut self, out: &mut String, depth: usize, in_loop: bool) {
        self.budget -= 1;
        let pad = "  ".repeat(depth + 2);
        let choice = self.rng.random_range(0..100);
        match choice {
            0..=11 if !self.globals.is_empty() => {
                let g = self.globals[self.rng.random_range(0..self.globals.len())].clone();
                let v = self.name("v");
                match g.bytes {
                    Some(n) => {
                        let i = self.index(n);
                        let _ = writeln!(out, "{pad}let {v} = {}[{i}];", g.name);
                    }
                    None => {
                        let _ = writeln!(out, "{pad}let {v} = {};", g.name);
                    }
                }
                self.declare(&v, LocalKind::Word);
            }
            12..=23 if self.globals.iter().any(|g| !g.immutable) => {
                let mutable: Vec<Global> = self.globals.iter().filter(|g| !g.immutable).cloned().collect();
                let g = mutable[self.rng.random_range(0..mutable.len())].clone();
                let e = self.expr();
                match g.bytes {
                    Some(n) => {
                        let i = self.index(n);
                        let _ = writeln!(out, "{pad}{}[{i}] = {e};", g.name);
                    }
                    None => {
                        let _ = writeln!(out, "{pad}{} = {e};", g.name);
                    }
                }
            }
            24..=35 if !self.funcs.is_empty() => {
                let f = self.funcs[self.rng.random_range(0..self.funcs.len())].clone();
                let v = self.name("r");
                let args = self.args(f.arity);
                let _ = writeln!(out, "{pad}let {v} = {}({args});", f.name);
                self.declare(&v, LocalKind::Word);
            }
            36..=45 if !self.funcs.is_empty() => {
                let fp = match self.pick_local(|k| matches!(k, LocalKind::FnPtr(_))) {
                    Some(l) if self.chance(0.5) => l,
                    _ => {
                        let target = self.rng.random_range(0..self.funcs.len());
                        let name = self.name("fp");
                        let _ = writeln!(out, "{pad}let {name} = &{};", self.funcs[target].name);
                        self.declare(&name, LocalKind::FnPtr(target));
                        Local { name, kind: LocalKind::FnPtr(target) }
                    }
                };
                let LocalKind::FnPtr(target) = fp.kind else { unreachable!() };
                let arity = self.funcs[target].arity;
                let args = self.args(arity);
                let v = self.name("r");
                let _ = writeln!(out, "{pad}let {v} = {}({args});", fp.name);
                self.declare(&v, LocalKind::Word);
            }
            46..=47 => {
                // A forged code pointer.
                let name = self.name("fp");
                let addr = 0x7f00_0000_0000u64 + self.rng.random_range(0..4) * 16 + 8;
                let _ = writeln!(out, "{pad}let {name} = {addr};");
                let _ = writeln!(out, "{pad}{name}();");
            }
            48..=57 => {
                let name = self.name("p");
                let size = [8u32, 16, 32][self.rng.random_range(0..3)];
                let attr =
                    if self.chance(0.6) { format!("[[partition({}, rw)]] ", self.partition()) } else { String::new() };
                let _ = writeln!(out, "{pad}{attr}let {name} = alloc({size});");
                self.declare(&name, LocalKind::Ptr(size));
            }
            58..=65 => match self.pick_local(|k| matches!(k, LocalKind::Ptr(_) | LocalKind::Array(_))) {
                Some(Local { name, kind: LocalKind::Ptr(n) | LocalKind::Array(n) }) => {
                    let i = self.index(n);
                    if self.chance(0.5) {
                        let e = self.expr();
                        let _ = writeln!(out, "{pad}{name}[{i}] = {e};");
                    } else {
                        let v = self.name("v");
                        let _ = writeln!(out, "{pad}let {v} = {name}[{i}];");
                        self.declare(&v, LocalKind::Word);
                    }
                }
                _ => {
                    let v = self.name("v");
                    let e = self.expr();
                    let _ = writeln!(out, "{pad}let {v} = {e};");
                    self.declare(&v, LocalKind::Word);
                }
            },
            66..=68 => match self.pick_local(|k| matches!(k, LocalKind::Ptr(_))) {
                Some(l) => {
                    let _ = writeln!(out, "{pad}free({});", l.name);
                }
                None => {
                    let name = self.name("a");
                    let attr = if self.chance(0.5) {
                        format!("[[partition({}, rw)]] ", self.partition())
                    } else {
                        String::new()
                    };
                    let _ = writeln!(out, "{pad}{attr}let {name}: bytes[8];");
                    self.declare(&name, LocalKind::Array(8));
                }
            },
            69..=78 if depth < 3 => {
                let label = self.partition();
                let rights = if self.chance(0.8) { "rw" } else { "r" };
                let _ = writeln!(out, "{pad}[[privilege({label}, {rights})]] {{");
                self.block(out, depth + 1, in_loop, 3);
                if self.chance(0.3) {
                    let cond = self.atom();
                    let e = self.expr();
                    let _ = writeln!(
                        out,
                        "{pad}  if {cond} > {} {{\n{pad}    return {e};\n{pad}  }}",
                        self.rng.random_range(0..5)
                    );
                }
                let _ = writeln!(out, "{pad}}}");
            }
            79..=85 if depth < 3 => {
                let cond = format!("{} > {}", self.atom(), self.rng.random_range(0..10));
                let _ = writeln!(out, "{pad}if {cond} {{");
                if self.chance(0.5) {
                    self.block(out, depth + 1, in_loop, 2);
                }
                if self.chance(0.4) {
                    let e = self.expr();
                    let _ = writeln!(out, "{pad}  return {e};");
                }
                let _ = writeln!(out, "{pad}}}");
            }
            86..=89 if depth < 2 && !in_loop => {
                let i = self.name("i");
                let n = self.rng.random_range(1..4);
                let _ = writeln!(out, "{pad}let {i} = 0;");
                let _ = writeln!(out, "{pad}while {i} < {n} {{");
                self.scopes.push(Vec::new());
                self.block(out, depth + 1, true, 2);
                self.scopes.pop();
                let _ = writeln!(out, "{pad}  {i} = {i} + 1;");
                let _ = writeln!(out, "{pad}}}");
                self.budget -= 2;
            }
            _ => {
                let v = self.name("v");
                let e = self.expr();
                let _ = writeln!(out, "{pad}let {v} = {e};");
                self.declare(&v, LocalKind::Word);
            }
        }
    }

    fn block(&mut self, out: &mut String, depth: usize, in_loop: bool, max: usize) {
        self.scopes.push(Vec::new());
        let n = self.rng.random_range(1..=max);
        for _ in 0..n {
            if self.budget <= 0 {
                break;
            }
            self.stmt(out, depth, in_loop);
        }
        self.scopes.pop();
    }

    fn function(&mut self, out: &mut String, name: &str, params: &[&str], noreturn: bool) {
        let mut head = String::from("  ");
        if noreturn {
            head.push_str("[[noreturn]] ");
        }
        if self.chance(0.15) {
            let _ = write!(head, "[[privilege({}, rw)]] ", self.partition());
        }
        let _ = writeln!(out, "{head}fn {name}({}) {{", params.join(", "));
        self.scopes = vec![params.iter().map(|p| Local { name: p.to_string(), kind: LocalKind::Word }).collect()];
        self.budget = self.rng.random_range(2..7);
        if name == "main" {
            let _ = writeln!(out, "    if len > 0 {{\n      let c = input[0];\n    }}");
            // `input` is a pointer, not a word.
            self.scopes[0].retain(|l| l.name != "input");
        }
        while self.budget > 0 {
            self.stmt(out, 0, false);
        }
        let e = self.expr();
        let _ = writeln!(out, "    return {e};\n  }}");
    }
}

/// Generate one program from `rng`. The result always parses and lowers,
/// and every function stays within [`MAX_FUNCTION_INSTS`].
pub fn generate(rng: &mut StdRng) -> String {
    loop {
        let source = attempt(rng);
        let Ok(program) = parse_program(&source) else { continue };
        let Ok((ir, _)) = lower_to_ir(&program) else { continue };
        let size_ok =
            ir.functions.iter().all(|f| f.blocks.iter().map(|b| b.insts.len()).sum::<usize>() <= MAX_FUNCTION_INSTS);
        if size_ok {
            return source;
        }
    }
}

/// Convenience wrapper seeding a fresh generator.
pub fn generate_seeded(seed: u64) -> String {
    generate(&mut StdRng::seed_from_u64(seed))
}

fn attempt(rng: &mut StdRng) -> String {
    let partitions = rng.random_range(1..=MAX_PARTITIONS);
    let mut g =
        Gen { rng, partitions, globals: Vec::new(), funcs: Vec::new(), scopes: Vec::new(), fresh: 0, budget: 0 };
    let pragma_rights: Vec<&str> = (0..partitions).map(|_| if g.chance(0.85) { "rw" } else { g.rights() }).collect();

    let mut global_decls = vec![String::new(); partitions];
    for decls in global_decls.iter_mut() {
        for _ in 0..g.rng.random_range(0..3) {
            let name = g.name("g");
            let attr = if g.chance(0.3) {
                let p = g.partition();
                format!("[[partition({p}, {})]] ", g.rights())
            } else {
                String::new()
            };
            let immutable = g.chance(0.15);
            let bytes = if g.chance(0.4) { Some([8u32, 16][g.rng.random_range(0..2)]) } else { None };
            let constness = if immutable { "const " } else { "" };
            let _ = match bytes {
                Some(n) => writeln!(decls, "  {attr}{constness}global {name}: bytes[{n}];"),
                None => writeln!(decls, "  {attr}{constness}global {name}: int = {};", g.rng.random_range(0..100)),
            };
            g.globals.push(Global { name, bytes, immutable });
        }
    }

    let mut bodies = vec![String::new(); partitions];
    for _ in 0..g.rng.random_range(0..5) {
        let unit = g.partition();
        let name = g.name("f");
        let arity = g.rng.random_range(0..3);
        let noreturn = g.chance(0.1);
        let params: Vec<String> = (0..arity).map(|i| format!("x{i}")).collect();
        let params: Vec<&str> = params.iter().map(String::as_str).collect();
        let mut body = String::new();
        g.function(&mut body, &name, &params, noreturn);
        bodies[unit].push_str(&body);
        g.funcs.push(Func { name, arity });
    }
    let mut main = String::new();
    g.function(&mut main, "main", &["input", "len"], false);
    bodies[0].push_str(&main);

    let mut out = String::new();
    for unit in 0..partitions {
        let _ = writeln!(out, "module m{unit} {{\n  #pragma partition {unit} {}", pragma_rights[unit]);
        out.push_str(&global_decls[unit]);
        out.push_str(&bodies[unit]);
        out.push_str("}\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_programs_respect_the_bounds() {
        for seed in 0..50 {
            let src = generate_seeded(seed);
            let (ir, policy) = lower_to_ir(&parse_program(&src).unwrap()).unwrap();
            assert!(policy.partitions.len() <= MAX_PARTITIONS);
            assert!(ir.function_by_name("main").is_some());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_seeded(7), generate_seeded(7));
    }
}
