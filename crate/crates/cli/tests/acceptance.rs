//! Acceptance suite: one PASS/FAIL line per criterion, each with a pinned
//! time budget. Run with `--nocapture` to see the report.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use keyward_cli::{cmd_build, cmd_check, cmd_run, trace_stats, CliError, EXIT_FAULT, EXIT_POLICY};
use keyward_core::instrument::{InstrumentError, RegionKind, Vectors};
use keyward_core::lang::analysis::ResolveError;
use keyward_core::lang::ir::{function_address, Op};
use keyward_core::lang::parser::{parse_program, ParseError};
use keyward_core::machine::{attack, AttackOp, Completion, FaultKind, TraceEvent};
use keyward_core::pipeline::{build, compile, machine, CompileError};
use keyward_core::policy::{rights_partial_order, AccessRights, PartitionLabel, RightsOrdering};

use support::{check_restoration, differential, Differential, Restorations};

const SIGNING: &str = include_str!("../../core/tests/programs/signing.pml");
const UNREFINED: &str = include_str!("../../core/tests/programs/signing_unrefined.pml");
const REQUEST: &[u8] = b"GET /sign?msg=hello";

const CORPUS: usize = 1000;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Report {
    failed: Vec<u32>,
}

impl Report {
    fn criterion(&mut self, n: u32, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(_) if elapsed > budget => Err(format!("took {elapsed:?}, budget {budget:?}")),
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} ({:.0?})", elapsed),
            Err(why) => {
                println!("FAIL {n:>2} {name}: {why}");
                self.failed.push(n);
            }
        }
    }
}

fn file(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn set_order(a: AccessRights, b: AccessRights) -> RightsOrdering {
    let ops = |r: AccessRights| [r.can_read(), r.can_write()];
    let (x, y) = (ops(a), ops(b));
    let sub = |p: [bool; 2], q: [bool; 2]| p.iter().zip(q).all(|(l, r)| !l || r);
    match (sub(x, y), sub(y, x)) {
        (true, true) => RightsOrdering::Equal,
        (true, false) => RightsOrdering::Less,
        (false, true) => RightsOrdering::Greater,
        (false, false) => RightsOrdering::Incomparable,
    }
}

fn lattice() -> Outcome {
    let all = AccessRights::ALL;
    for a in all {
        for b in all {
            let got = rights_partial_order(a, b);
            ensure!(got == set_order(a, b), "{a:?} vs {b:?}: {got:?}");
        }
    }
    let le = |a, b| matches!(rights_partial_order(a, b), RightsOrdering::Less | RightsOrdering::Equal);
    let bottoms: Vec<_> = all.into_iter().filter(|a| all.iter().all(|b| le(*a, *b))).collect();
    let tops: Vec<_> = all.into_iter().filter(|a| all.iter().all(|b| le(*b, *a))).collect();
    ensure!(bottoms == [AccessRights::NONE], "bottoms {bottoms:?}");
    ensure!(tops == [AccessRights::READ_WRITE], "tops {tops:?}");
    Ok("16 pairs, unique bottom and top".into())
}

fn signing() -> Outcome {
    let (c, b) = build(SIGNING).map_err(|e| e.to_string())?;
    let mut m = machine(&c, &b).map_err(|e| e.to_string())?;
    let done = m.run(&b.module, "main", REQUEST).map_err(|f| f.to_string())?;
    ensure!(matches!(done, Completion::Returned(_)), "{done:?}");
    let key = c.ir.globals.iter().find(|g| g.name == "private_key").unwrap();
    let sym = b.layout.symbol(key.id).unwrap();
    let refined = c.ir.statements_in_scope(c.ir.scopes[0].id);
    let mut outside_libssl = 0;
    for r in m.trace() {
        if let TraceEvent::Load { addr, stmt, .. } | TraceEvent::Store { addr, stmt, .. } = r.event {
            if addr >= sym.base && addr < sym.base + sym.size && c.policy.statement_home[&stmt] != PartitionLabel(2) {
                ensure!(refined.contains(&stmt), "private_key touched at statement {stmt} outside the refinement");
                outside_libssl += 1;
            }
        }
    }
    ensure!(outside_libssl > 0, "no refined accesses recorded");

    let dir = tempfile::tempdir().unwrap();
    let src = file(dir.path(), "signing.pml", SIGNING);
    cmd_build(&[src], &dir.path().join("ok")).map_err(|e| e.to_string())?;
    cmd_run(&dir.path().join("ok"), REQUEST).map_err(|e| format!("exit {}: {e}", e.exit_code()))?;

    let src = file(dir.path(), "unrefined.pml", UNREFINED);
    cmd_build(&[src], &dir.path().join("bad")).map_err(|e| e.to_string())?;
    let c = compile(UNREFINED).unwrap();
    let line = UNREFINED.lines().position(|l| l.contains("private_key[k]")).unwrap() as u32 + 1;
    let stmt = c.ir.statements.iter().find(|s| s.line == line).unwrap().id;
    match cmd_run(&dir.path().join("bad"), REQUEST) {
        Err(e @ CliError::Fault { .. }) => {
            let CliError::Fault { fault, .. } = &e else { unreachable!() };
            ensure!(e.exit_code() == EXIT_FAULT, "exit {}", e.exit_code());
            ensure!(
                fault.kind == FaultKind::PkeyAccessFault && fault.stmt == stmt,
                "fault {fault}, expected statement {stmt}"
            );
        }
        other => return Err(format!("unrefined variant: {other:?}")),
    }
    Ok(format!("{outside_libssl} refined key accesses; unrefined exits 4 at statement {stmt}"))
}

/// The criterion-3 corpus, shared with criterion 5.
#[derive(Default)]
struct Corpus {
    runs: Vec<Differential>,
}

fn equivalence(corpus: &mut Corpus) -> Outcome {
    let (mut seed, mut ambiguous) = (0u64, 0);
    let mut features = [0usize; 4];
    while corpus.runs.len() < CORPUS {
        match differential(seed)? {
            Some(d) => {
                let c = compile(&d.source).map_err(|e| e.to_string())?;
                ensure!(c.policy.partitions.len() <= 4, "seed {seed}: {} partitions", c.policy.partitions.len());
                for f in &c.ir.functions {
                    let n = f.insts().count();
                    ensure!(n <= 30, "seed {seed}: {} has {n} instructions", f.name);
                }
                let ops: Vec<&Op> = c.ir.functions.iter().flat_map(|f| f.insts()).map(|i| &i.op).collect();
                let has = |p: fn(&Op) -> bool| ops.iter().any(|o| p(o)) as usize;
                features[0] += has(|o| matches!(o, Op::CallDirect { .. }));
                features[1] += has(|o| matches!(o, Op::CallIndirect { .. }));
                features[2] += has(|o| matches!(o, Op::HeapAlloc { .. }));
                features[3] += (!c.ir.scopes.is_empty()) as usize;
                corpus.runs.push(d);
            }
            None => ambiguous += 1,
        }
        seed += 1;
    }
    ensure!(features.iter().all(|n| *n >= 100), "feature mix too thin: {features:?}");
    let violating = corpus.runs.iter().filter(|d| d.violating).count();
    ensure!(violating > 0 && violating < CORPUS, "{violating} violating programs");
    Ok(format!(
        "{CORPUS} programs agree ({violating} violating, {ambiguous} rejected as ambiguous; \
         direct/indirect/alloc/refine in {features:?})"
    ))
}

fn confinement() -> Outcome {
    let (c, b) = build(SIGNING).map_err(|e| e.to_string())?;
    let mut m = machine(&c, &b).map_err(|e| e.to_string())?;
    let mut swept = 0;
    for kind in [RegionKind::Globals, RegionKind::Heap] {
        let r = b.layout.region(PartitionLabel(2), kind).unwrap();
        let rep = attack(&mut m, PartitionLabel(0), AttackOp::Read, r.base..r.end());
        ensure!(rep.bytes_leaked == 0 && rep.faults == r.length, "libssl {kind:?}: {rep:?}");
        let own = b.layout.region(PartitionLabel(0), kind).unwrap();
        let rep = attack(&mut m, PartitionLabel(0), AttackOp::Read, own.base..own.end());
        ensure!(rep.bytes_leaked == own.length && rep.faults == 0, "own {kind:?}: {rep:?}");
        swept += r.length + own.length;
    }
    Ok(format!("{swept} bytes swept"))
}

fn restoration(corpus: &Corpus) -> Outcome {
    ensure!(corpus.runs.len() >= CORPUS, "criterion-3 corpus unavailable");
    let mut total = Restorations::default();
    let mut nested = 0;
    for d in &corpus.runs {
        let r = check_restoration(&d.trace, &d.initial)?;
        total.scopes += r.scopes;
        total.calls += r.calls;
        total.unwinds += r.unwinds;
        let mut depth = 0;
        for r in &d.trace {
            if let TraceEvent::Switch { role, .. } = &r.event {
                match role.as_str() {
                    "scope_enter" => depth += 1,
                    "scope_exit" | "return_unwind" => depth -= 1,
                    _ => {}
                }
                if depth >= 2 {
                    nested += 1;
                    break;
                }
            }
        }
    }
    ensure!(
        total.scopes > 0 && total.calls > 0 && total.unwinds > 0 && nested > 0,
        "coverage {total:?}, nested {nested}"
    );
    Ok(format!(
        "{} scope exits, {} call returns, {} early-return unwinds, {nested} runs with nested scopes",
        total.scopes, total.calls, total.unwinds
    ))
}

fn switch_accounting() -> Outcome {
    let mut main = String::from("fn main(input, len) {\n let s = 0;\n");
    for _ in 0..10 {
        main.push_str(" s = s + work();\n");
    }
    main.push_str(" s = s + helper();\n s = s + helper();\n stop();\n return s;\n }\n");
    let src = format!(
        "module app {{ #pragma partition 0 rw\n fn helper() {{ return 1; }}\n {main} }}\n\
         module lib {{ #pragma partition 1 rw\n global n: int = 2;\n fn work() {{ return n; }}\n \
         [[noreturn]] fn stop() {{ n = 0; return 0; }} }}\n"
    );
    let (c, b) = build(&src).map_err(|e| e.to_string())?;
    let mut m = machine(&c, &b).map_err(|e| e.to_string())?;
    let done = m.run(&b.module, "main", b"").map_err(|f| f.to_string())?;
    ensure!(done == Completion::Halted, "{done:?}");
    ensure!(m.wrpkru_count() == 21, "wrpkru_count {}", m.wrpkru_count());
    let stats = trace_stats(&keyward_core::machine::format_trace(m.trace())).map_err(|e| e.to_string())?;
    ensure!(stats.wrpkru_count == 21, "stats report {}", stats.wrpkru_count);
    Ok("wrpkru_count 21".into())
}

fn many_partitions(n: u32) -> String {
    let mut src = String::new();
    for l in 0..n {
        src.push_str(&format!(
            "module p{l} {{ #pragma partition {l} rw\n global v{l}: int = {l};\n fn get{l}() {{ return v{l}; }}\n"
        ));
        if l == 0 {
            src.push_str(" fn main(input, len) {\n let s = 0;\n");
            for k in 0..n {
                src.push_str(&format!(" s = s + get{k}();\n"));
            }
            src.push_str(" return s;\n }\n");
        }
        src.push_str("}\n");
    }
    src
}

fn key_exhaustion() -> Outcome {
    let (c, b) = build(&many_partitions(15)).map_err(|e| e.to_string())?;
    let mut m = machine(&c, &b).map_err(|e| e.to_string())?;
    let done = m.run(&b.module, "main", b"").map_err(|f| f.to_string())?;
    ensure!(done == Completion::Returned(105), "{done:?}");
    let dir = tempfile::tempdir().unwrap();
    let src = file(dir.path(), "sixteen.pml", &many_partitions(16));
    match cmd_check(&[src]) {
        Err(e) if e.exit_code() == EXIT_POLICY && e.to_string().contains("KeyExhaustion") => {
            Ok("15 partitions run; 16 rejected by check with KeyExhaustion".into())
        }
        other => Err(format!("16 partitions: {other:?}")),
    }
}

const PHI_MERGE: &str = "module app { #pragma partition 0 rw\n\
    fn main(input, len) {\n\
    [[partition(0, rw)]] let a = alloc(16);\n\
    [[partition(1, rw)]] let b = alloc(16);\n\
    let p = a;\n\
    if len > 2 {\n\
    p = b;\n\
    }\n\
    free(p);\n\
    return 0;\n\
    } }\n\
    module secret { #pragma partition 1 rw }\n";

fn multiple_partitions() -> Outcome {
    let line = PHI_MERGE.lines().position(|l| l.contains("free(p)")).unwrap() as u32 + 1;
    match build(PHI_MERGE) {
        Err(CompileError::Instrument(InstrumentError::Resolve(ResolveError::MultiplePartitions {
            line: at,
            function,
            partitions,
            ..
        }))) => {
            ensure!(at == line && function == "main", "reported {function} line {at}, call site is line {line}");
            ensure!(partitions == [PartitionLabel(0), PartitionLabel(1)], "partitions {partitions:?}");
        }
        other => return Err(format!("build: {:?}", other.map(|_| ()))),
    }
    let dir = tempfile::tempdir().unwrap();
    let src = file(dir.path(), "phi.pml", PHI_MERGE);
    match cmd_build(&[src], &dir.path().join("out")) {
        Err(e) if e.exit_code() == EXIT_POLICY && e.to_string().contains("MultiplePartitions") => {}
        other => return Err(format!("cmd_build: {other:?}")),
    }
    Ok(format!("free at line {line} reaches partitions 0 and 1"))
}

fn scrub() -> Outcome {
    let src = "#pragma partition 0 rw\nfn main(input, len) {\n [[partition(0, rw)]] let p = alloc(32);\n \
               let i = 0;\n while i < 32 {\n p[i] = 255 - i;\n i = i + 1;\n }\n free(p);\n return 0;\n}\n";
    let (c, b) = build(src).map_err(|e| e.to_string())?;
    let mut m = machine(&c, &b).map_err(|e| e.to_string())?;
    m.run(&b.module, "main", b"").map_err(|f| f.to_string())?;
    let block = m
        .trace()
        .iter()
        .find_map(|r| match r.event {
            TraceEvent::Alloc { addr, size: 32, .. } => Some(addr),
            _ => None,
        })
        .ok_or("no 32-byte allocation in the trace")?;
    let stores = m
        .trace()
        .iter()
        .filter(|r| matches!(r.event, TraceEvent::Store { addr, .. } if addr >= block && addr < block + 32))
        .count();
    ensure!(stores == 32, "{stores} stores into the block");
    let bytes = m.read_privileged(block, 32);
    ensure!(bytes.iter().all(|b| *b == 0), "freed block holds {bytes:?}");
    Ok(format!("32 bytes at {block:#x} read 0x00 after free"))
}

/// The misplaced-end pattern: the brace meant to lower privileges closes the
/// conditional instead, so the raised block swallows the rest of the function.
const MISPLACED_END: &str = "module server { #pragma partition 0 rw\n\
    fn handle(len) {\n\
    [[privilege(1, rw)]] {\n\
    let s = secret;\n\
    if len > 0 {\n\
    return s;\n\
    }\n\
    }\n\
    return 0;\n\
    }\n\
    module keys { #pragma partition 1 rw\n global secret: int = 7; }\n";

const BARE_RAISE: &str = "#pragma partition 0 rw\nfn main() {\n [[privilege(1, rw)]];\n return 0;\n}\n";

fn leak_inexpressible() -> Outcome {
    for (name, src) in [("misplaced end", MISPLACED_END), ("bare raise", BARE_RAISE)] {
        match parse_program(src) {
            Err(ParseError::UnbalancedRefinement { line: 3, .. }) => {}
            other => return Err(format!("{name}: {:?}", other.map(|_| ()))),
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let src = file(dir.path(), "leak.pml", MISPLACED_END);
    match cmd_check(&[src]) {
        Err(e) if e.exit_code() == 3 && e.to_string().contains("UnbalancedRefinement") => {}
        other => return Err(format!("check: {other:?}")),
    }
    Ok("both variants rejected at parse time".into())
}

fn cfi() -> Outcome {
    let src = "module a { #pragma partition 0 rw\n global x: int = 1;\n fn local() { return x; }\n \
               fn main(input, len) {\n let f = &local;\n let g = &sign;\n return f() + g() + f(); } }\n\
               module b { #pragma partition 1 rw\n global k: int = 40;\n fn sign() { return k; } }";
    let (c, b) = build(src).map_err(|e| e.to_string())?;
    let mut m = machine(&c, &b).map_err(|e| e.to_string())?;
    let done = m.run(&b.module, "main", b"").map_err(|f| f.to_string())?;
    ensure!(done == Completion::Returned(42), "{done:?}");
    let vectors = Vectors::new(&c.ir, &c.policy, &b.module.keys);
    let mut targets = BTreeSet::new();
    for name in ["local", "sign"] {
        let id = c.ir.function_by_name(name).unwrap().id;
        let want = vectors.function(id);
        ensure!(
            m.runtime.at_table.get(&id) == Some(&want),
            "{name}: table {:?}, expected {want}",
            m.runtime.at_table.get(&id)
        );
        targets.insert(name);
    }
    let mut calls = 0;
    let mut switched = m.trace().iter().filter_map(|r| match &r.event {
        TraceEvent::Switch { role, after, .. } if role == "dynamic_enter" => Some(after.clone()),
        _ => None,
    });
    let sign = c.ir.function_by_name("sign").unwrap().id;
    ensure!(switched.next() == Some(vectors.function(sign)) && switched.next().is_none(), "dynamic entries");
    for r in m.trace() {
        if let TraceEvent::Call { function, indirect: true, .. } = &r.event {
            ensure!(targets.contains(function.as_str()), "dispatched to {function}");
            calls += 1;
        }
    }
    ensure!(
        calls == 3 && m.runtime.dynamic_switches == 2,
        "{calls} indirect calls, {} switches",
        m.runtime.dynamic_switches
    );

    let same = "#pragma partition 0 rw\nfn f() { return 1; }\nfn main(input, len) {\n let p = &f;\n return p(); }";
    let (c2, b2) = build(same).map_err(|e| e.to_string())?;
    let mut m2 = machine(&c2, &b2).map_err(|e| e.to_string())?;
    m2.run(&b2.module, "main", b"").map_err(|f| f.to_string())?;
    ensure!(m2.runtime.dynamic_switches == 0 && m2.wrpkru_count() == 0, "same-partition dispatch switched");

    let forged = "#pragma partition 0 rw\nfn f() { return 1; }\nfn g() { return 2; }\n\
                  fn main(input, len) {\n let p = &f;\n let q = p + 16;\n return q(); }";
    let (c3, b3) = build(forged).map_err(|e| e.to_string())?;
    let mut m3 = machine(&c3, &b3).map_err(|e| e.to_string())?;
    let fault = m3.run(&b3.module, "main", b"").err().ok_or("unregistered call completed")?;
    let g = c3.ir.function_by_name("g").unwrap().id;
    ensure!(fault.kind == FaultKind::CfiFault && fault.addr == function_address(g), "{fault}");
    Ok("unregistered target faults; 3 registered dispatches; same-partition dispatch 0 switches".into())
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let src = file(dir.path(), "signing.pml", SIGNING);
    let bin = env!("CARGO_BIN_EXE_keyward");
    let mut outs = Vec::new();
    for n in 0..2 {
        let out = dir.path().join(format!("build{n}"));
        let status =
            Command::new(bin).arg("build").arg(&src).arg("--out").arg(&out).output().map_err(|e| e.to_string())?;
        ensure!(status.status.success(), "build {n}: {}", String::from_utf8_lossy(&status.stderr));
        outs.push(out);
    }
    let mut bytes = 0;
    for name in ["module.ir", "layout.json", "policy.json", "module.json"] {
        let a = std::fs::read(outs[0].join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(outs[1].join(name)).map_err(|e| e.to_string())?;
        ensure!(a == b, "{name} differs between builds");
        bytes += a.len();
    }
    Ok(format!("4 files, {bytes} bytes identical"))
}

#[test]
fn acceptance() {
    let mut report = Report { failed: Vec::new() };
    let mut corpus = Corpus::default();
    let secs = Duration::from_secs;
    report.criterion(1, "lattice", secs(1), lattice);
    report.criterion(2, "signing scenario", secs(1), signing);
    report.criterion(3, "oracle equivalence", secs(60), || equivalence(&mut corpus));
    report.criterion(4, "attack confinement", secs(5), confinement);
    report.criterion(5, "restoration", secs(30), || restoration(&corpus));
    report.criterion(6, "switch accounting", secs(5), switch_accounting);
    report.criterion(7, "key exhaustion", secs(5), key_exhaustion);
    report.criterion(8, "multi-partition allocation", secs(5), multiple_partitions);
    report.criterion(9, "scrub", secs(5), scrub);
    report.criterion(10, "leak inexpressibility", secs(5), leak_inexpressible);
    report.criterion(11, "cfi", secs(5), cfi);
    report.criterion(12, "reproducibility", secs(30), reproducibility);
    assert!(report.failed.is_empty(), "failed criteria: {:?}", report.failed);
}
