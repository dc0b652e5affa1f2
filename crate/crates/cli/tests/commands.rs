use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use keyward_core::instrument::{parse_layout, RegionKind};
use keyward_core::policy::PartitionLabel;
use serde_json::Value;

const SIGNING: &str = include_str!("../../core/tests/programs/signing.pml");
const UNREFINED: &str = include_str!("../../core/tests/programs/signing_unrefined.pml");

fn keyward(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_keyward"));
    for a in args {
        cmd.arg(a);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// Build `src` into `dir/name`, asserting success.
fn built(dir: &Path, name: &str, src: &str) -> PathBuf {
    let path = write(dir, &format!("{name}.pml"), src);
    let out = dir.join(name);
    let r = keyward(&[&"build", &path, &"--out", &out]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    out
}

fn region(artifact: &Path, label: u32, kind: RegionKind) -> String {
    let plan = parse_layout(&std::fs::read(artifact.join("layout.json")).unwrap()).unwrap();
    let r = plan.region(PartitionLabel(label), kind).unwrap();
    format!("{:#x}..{:#x}", r.base, r.end())
}

fn attack(artifact: &Path, partition: &str, op: &str, range: &str) -> (i32, Option<Value>) {
    let out = keyward(&[&"attack", &artifact, &"--partition", &partition, &"--op", &op, &"--range", &range]);
    let json = serde_json::from_str(&stdout(&out)).ok();
    (code(&out), json)
}

#[test]
fn check_reports_exit_codes_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write(dir.path(), "signing.pml", SIGNING);
    assert_eq!(code(&keyward(&[&"check", &ok])), 0);

    let unbalanced = write(dir.path(), "leak.pml", "#pragma partition 0 rw\nfn main() {\n [[privilege(1, rw)]];\n}\n");
    let r = keyward(&[&"check", &unbalanced]);
    assert_eq!(code(&r), 3);
    assert!(stderr(&r).starts_with("error UnbalancedRefinement 3:2 "), "{}", stderr(&r));

    let mut sixteen = String::new();
    for l in 0..16 {
        sixteen.push_str(&format!("module p{l} {{ #pragma partition {l} rw }}\n"));
    }
    let r = keyward(&[&"check", &write(dir.path(), "many.pml", &sixteen)]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains(" KeyExhaustion "), "{}", stderr(&r));

    let r = keyward(&[&"check", &dir.path().join("missing.pml")]);
    assert_eq!(code(&r), 3);
}

#[test]
fn sources_split_across_files_form_one_program() {
    let dir = tempfile::tempdir().unwrap();
    let lib = write(dir.path(), "lib.pml", "#pragma partition 1 rw\nglobal k: int = 5;\nfn get() { return k; }\n");
    let app = write(dir.path(), "app.pml", "#pragma partition 0 rw\nfn main(input, len) { return get() + 1; }\n");
    let out = dir.path().join("out");
    let r = keyward(&[&"build", &app, &lib, &"--out", &out]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert_eq!(stdout(&r), "switch sites: 2\n");
    let r = keyward(&[&"run", &out]);
    assert_eq!(code(&r), 0);
    assert_eq!(stderr(&r).trim(), "returned 6");
}

#[test]
fn build_without_cross_partition_calls_has_no_switch_sites() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(
        dir.path(),
        "one.pml",
        "#pragma partition 0 rw\nfn f() { return 1; }\nfn main(input, len) { return f(); }\n",
    );
    let r = keyward(&[&"build", &src, &"--out", &dir.path().join("out")]);
    assert_eq!(code(&r), 0);
    assert_eq!(stdout(&r), "switch sites: 0\n");
    for name in ["module.ir", "layout.json", "policy.json", "module.json"] {
        assert!(dir.path().join("out").join(name).is_file(), "{name}");
    }
}

#[test]
fn run_exits_zero_or_four() {
    let dir = tempfile::tempdir().unwrap();
    let request = write(dir.path(), "request", "GET /sign?msg=hello");
    let good = built(dir.path(), "good", SIGNING);
    let trace = dir.path().join("good.trace");
    let r = keyward(&[&"run", &good, &"--input", &request, &"--trace", &trace]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(std::fs::read_to_string(&trace).unwrap().lines().count() > 100);

    let bad = built(dir.path(), "bad", UNREFINED);
    let r = keyward(&[&"run", &bad, &"--input", &request]);
    assert_eq!(code(&r), 4);
    let last = stdout(&r).lines().last().unwrap().to_string();
    assert!(last.contains("fault fault=PkeyAccessFault"), "{last}");
    assert!(stderr(&r).starts_with("PkeyAccessFault"), "{}", stderr(&r));

    let empty = built(dir.path(), "empty", "");
    let trace = dir.path().join("empty.trace");
    let r = keyward(&[&"run", &empty, &"--trace", &trace]);
    assert_eq!(code(&r), 0);
    assert_eq!(std::fs::read_to_string(&trace).unwrap(), "");

    assert_eq!(code(&keyward(&[&"run", &dir.path().join("nothing")])), 3);
}

#[test]
fn attack_reports_json_and_rejects_unknown_partitions() {
    let dir = tempfile::tempdir().unwrap();
    let art = built(dir.path(), "signing", SIGNING);
    let libssl = region(&art, 2, RegionKind::Globals);
    let (status, report) = attack(&art, "main", "read", &libssl);
    let report = report.unwrap();
    assert_eq!(status, 0);
    assert_eq!(report["bytes_leaked"], 0);
    assert_eq!(report["faults"], 4096);
    assert_eq!(report["range"], libssl.as_str());

    // Partitions may be named by label as well.
    let own = region(&art, 0, RegionKind::Heap);
    let (_, report) = attack(&art, "0", "read", &own);
    assert_eq!(report.unwrap()["bytes_leaked"], 16 * 4096);

    let (_, report) = attack(&art, "main", "write", &libssl);
    assert_eq!(report.unwrap()["bytes_corrupted"], 0);

    assert_eq!(attack(&art, "kernel", "read", &libssl).0, 2);
    assert_eq!(attack(&art, "main", "read", "0x10-0x20").0, 3);
}

fn trace_of(dir: &Path, name: &str, src: &str) -> PathBuf {
    let art = built(dir, name, src);
    let trace = dir.join(format!("{name}.trace"));
    let r = keyward(&[&"run", &art, &"--trace", &trace]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    trace
}

fn stat(out: &str, key: &str) -> u64 {
    let line = out.lines().find(|l| l.starts_with(&format!("{key}:"))).unwrap();
    line[key.len() + 1..].split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn stats_count_switches_from_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let calls = " s = s + work();\n".repeat(10);
    let src = format!(
        "module app {{ #pragma partition 0 rw\n fn main(input, len) {{\n let s = 0;\n{calls} return s; }} }}\n\
         module lib {{ #pragma partition 1 rw\n fn work() {{ return 1; }} }}\n"
    );
    let trace = trace_of(dir.path(), "calls", &src);
    let r = keyward(&[&"stats", &"--trace", &trace]);
    assert_eq!(code(&r), 0);
    let out = stdout(&r);
    assert_eq!(stat(&out, "wrpkru"), 20);
    assert_eq!(stat(&out, "faults"), 0);
    assert!(out.contains("  0 -> 1: 10\n") && out.contains("  1 -> 0: 10\n"), "{out}");
    assert_eq!(stdout(&keyward(&[&"stats", &"--trace", &trace])), out);

    let same = "#pragma partition 0 rw\nfn f() { return 1; }\nfn main(input, len) {\n let p = &f;\n return p(); }\n";
    let trace = trace_of(dir.path(), "icall", same);
    let out = stdout(&keyward(&[&"stats", &"--trace", &trace]));
    assert_eq!(stat(&out, "dynamic switches"), 0);

    let alloc = "#pragma partition 0 rw\nfn main(input, len) {\n [[partition(0, rw)]] let p = alloc(32);\n free(p);\n return 0; }\n";
    let trace = trace_of(dir.path(), "alloc", alloc);
    let out = stdout(&keyward(&[&"stats", &"--trace", &trace]));
    assert_eq!((stat(&out, "allocs"), stat(&out, "frees")), (1, 1));
    assert!(out.contains("allocs: 1 (32 bytes)"), "{out}");
}

#[test]
fn stats_on_empty_and_malformed_traces() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "empty.trace", "");
    let out = stdout(&keyward(&[&"stats", &"--trace", &empty]));
    for key in ["wrpkru", "dynamic switches", "faults", "allocs", "frees"] {
        assert_eq!(stat(&out, key), 0, "{key}");
    }
    let bad = write(dir.path(), "bad.trace", "0 switch role=call_enter\n");
    assert_eq!(code(&keyward(&[&"stats", &"--trace", &bad])), 3);
}

#[test]
fn bad_arguments_exit_three() {
    assert_eq!(code(&keyward(&[&"frobnicate"])), 3);
    assert_eq!(code(&keyward(&[&"check"])), 3);
    assert_eq!(code(&keyward(&[&"--help"])), 0);
}
