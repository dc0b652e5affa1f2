//! Command implementations behind the `keyward` binary. Every command
//! returns its standard output as a string so it can be tested without
//! spawning a process.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use keyward_core::instrument::{emit_layout, parse_layout, Build, InstrumentedModule};
use keyward_core::lang::ast::SourceProgram;
use keyward_core::lang::dump::dump_module;
use keyward_core::lang::parser::parse_source;
use keyward_core::machine::{attack, format_trace, parse_trace, AttackOp, AttackReport, Completion, Fault, TraceEvent};
use keyward_core::pipeline::{build_compiled, compile_program, machine, CompileError, Compiled};
use keyward_core::policy::{PartitionLabel, Policy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_POLICY: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_FAULT: i32 = 4;

pub const MODULE_DUMP: &str = "module.ir";
pub const LAYOUT_FILE: &str = "layout.json";
pub const POLICY_FILE: &str = "policy.json";
pub const MODULE_FILE: &str = "module.json";

/// Name of the function every run starts at.
pub const ENTRY: &str = "main";

#[derive(Debug, Error)]
pub enum CliError {
    /// Policy or semantic rejection, with line-oriented diagnostics.
    #[error("{0}")]
    Policy(String),
    /// Unparseable source, artifact, trace or argument.
    #[error("{0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// The run stopped on a fault; `output` holds what was produced before it.
    #[error("{fault}")]
    Fault { fault: Fault, output: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Policy(_) => EXIT_POLICY,
            CliError::Format(_) | CliError::Io { .. } => EXIT_FORMAT,
            CliError::Fault { .. } => EXIT_FAULT,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Diagnostics for a rejected compile, one `severity code location message`
/// line per finding.
pub fn diagnostics(err: &CompileError) -> String {
    match err {
        CompileError::Parse(e) => format!("error {} {} {}\n", e.code(), e.location(), e),
        CompileError::Lower(e) => format!("error {} {} {}\n", e.code(), e.location(), e),
        CompileError::Policy(report) => report.to_string(),
        CompileError::Instrument(e) => format!("error {} build {}\n", instrument_code(e), e),
        CompileError::Init(e) => format!("error InitError runtime {e}\n"),
    }
}

fn instrument_code(e: &keyward_core::instrument::InstrumentError) -> &'static str {
    use keyward_core::instrument::InstrumentError;
    use keyward_core::lang::analysis::ResolveError;
    match e {
        InstrumentError::Policy(_) => "KeyExhaustion",
        InstrumentError::Resolve(ResolveError::MultiplePartitions { .. }) => "MultiplePartitions",
        InstrumentError::Resolve(_) => "UnresolvedAllocation",
    }
}

fn compile_error(err: CompileError) -> CliError {
    let text = diagnostics(&err);
    match err {
        CompileError::Parse(_) => CliError::Format(text),
        _ => CliError::Policy(text),
    }
}

/// Parse every file as its own translation unit set. Files without `module`
/// blocks form one unit named after the file stem.
pub fn load_sources(paths: &[PathBuf]) -> Result<SourceProgram, CliError> {
    let mut units = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("main");
        let program = parse_source(&text, stem).map_err(|e| compile_error(CompileError::Parse(e)))?;
        units.extend(program.units);
    }
    Ok(SourceProgram { units })
}

fn compile_paths(paths: &[PathBuf]) -> Result<Compiled, CliError> {
    compile_program(load_sources(paths)?).map_err(compile_error)
}

/// Validate the policy of the given sources.
pub fn cmd_check(paths: &[PathBuf]) -> Result<String, CliError> {
    let compiled = compile_paths(paths)?;
    Ok(format!("ok: {} partition(s), {} function(s)\n", compiled.policy.partitions.len(), compiled.ir.functions.len()))
}

/// Everything `run` and `attack` need, as written to `module.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub module: InstrumentedModule,
    pub policy: Policy,
}

/// Rendered artifact files, keyed by file name.
pub fn render_artifact(compiled: &Compiled, build: &Build) -> BTreeMap<&'static str, Vec<u8>> {
    let artifact = Artifact { module: build.module.clone(), policy: compiled.policy.clone() };
    let mut files = BTreeMap::new();
    files.insert(MODULE_DUMP, dump_module(&build.module.ir).into_bytes());
    files.insert(LAYOUT_FILE, emit_layout(&build.layout));
    files.insert(POLICY_FILE, pretty_json(&compiled.policy));
    files.insert(MODULE_FILE, pretty_json(&artifact));
    files
}

fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    bytes
}

/// Compile, instrument and write the artifact files into `out`.
pub fn cmd_build(paths: &[PathBuf], out: &Path) -> Result<String, CliError> {
    let compiled = compile_paths(paths)?;
    let (compiled, build) = build_compiled(compiled).map_err(compile_error)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    for (name, bytes) in render_artifact(&compiled, &build) {
        let path = out.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(format!("switch sites: {}\n", build.module.switch_site_count))
}

/// A built artifact read back from disk.
pub struct Loaded {
    pub artifact: Artifact,
    pub build: Build,
    pub compiled: Compiled,
}

pub fn load_artifact(dir: &Path) -> Result<Loaded, CliError> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(io_err(&path))
    };
    let artifact: Artifact = serde_json::from_slice(&read(MODULE_FILE)?)
        .map_err(|e| CliError::Format(format!("{}: {e}", dir.join(MODULE_FILE).display())))?;
    let layout = parse_layout(&read(LAYOUT_FILE)?)
        .map_err(|e| CliError::Format(format!("{}: {e}", dir.join(LAYOUT_FILE).display())))?;
    let build = Build { module: artifact.module.clone(), layout };
    let compiled = Compiled {
        program: SourceProgram { units: Vec::new() },
        ir: artifact.module.ir.clone(),
        policy: artifact.policy.clone(),
    };
    Ok(Loaded { artifact, build, compiled })
}

/// Result of a run: the formatted trace and a one-line outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutput {
    pub trace: String,
    pub outcome: String,
}

/// Execute the artifact's entry function on `input`. A fault is returned as
/// `CliError::Fault` carrying the trace up to and including the fault.
pub fn cmd_run(dir: &Path, input: &[u8]) -> Result<RunOutput, CliError> {
    let loaded = load_artifact(dir)?;
    let mut state = machine(&loaded.compiled, &loaded.build).map_err(compile_error)?;
    let result = state.run(&loaded.build.module, ENTRY, input);
    let trace = format_trace(state.trace());
    match result {
        Ok(Completion::Returned(v)) => Ok(RunOutput { trace, outcome: format!("returned {v}") }),
        Ok(Completion::Halted) => Ok(RunOutput { trace, outcome: "halted".into() }),
        Err(fault) => Err(CliError::Fault { fault, output: trace }),
    }
}

/// Parse `0xA..0xB` (decimal bounds also accepted).
pub fn parse_range(text: &str) -> Result<Range<u64>, CliError> {
    let bad = || CliError::Format(format!("bad range `{text}`, expected 0xSTART..0xEND"));
    let (a, b) = text.split_once("..").ok_or_else(bad)?;
    let num = |s: &str| {
        let s = s.trim();
        match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16).ok(),
            None => s.replace('_', "").parse().ok(),
        }
    };
    let (start, end) = (num(a).ok_or_else(bad)?, num(b).ok_or_else(bad)?);
    if start > end {
        return Err(bad());
    }
    Ok(start..end)
}

/// Sweep `range` from `partition` (name or label) on a freshly loaded
/// machine and return the JSON report.
pub fn cmd_attack(dir: &Path, partition: &str, op: AttackOp, range: Range<u64>) -> Result<String, CliError> {
    let loaded = load_artifact(dir)?;
    let acting = resolve_partition(&loaded.artifact.policy, partition)?;
    let mut state = machine(&loaded.compiled, &loaded.build).map_err(compile_error)?;
    let report: AttackReport = attack(&mut state, acting, op, range);
    let mut json = serde_json::to_string(&report).expect("report serializes");
    json.push('\n');
    Ok(json)
}

pub fn resolve_partition(policy: &Policy, name: &str) -> Result<PartitionLabel, CliError> {
    policy
        .find_partition(name)
        .map(|p| p.label)
        .ok_or_else(|| CliError::Policy(format!("error UnknownPartition {name} no partition named `{name}`\n")))
}

/// Counters derived from a trace file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceStats {
    pub wrpkru_count: u64,
    pub dynamic_switches: u64,
    pub faults: u64,
    pub allocs: u64,
    pub frees: u64,
    pub bytes_allocated: u64,
    pub bytes_freed: u64,
    /// Switch events per `(from, to)` partition pair.
    pub matrix: BTreeMap<(PartitionLabel, PartitionLabel), u64>,
}

pub fn trace_stats(text: &str) -> Result<TraceStats, CliError> {
    let records = parse_trace(text).map_err(|e| CliError::Format(e.to_string()))?;
    let mut s = TraceStats::default();
    for r in &records {
        match &r.event {
            TraceEvent::Switch { role, from, to, .. } => {
                s.wrpkru_count += 1;
                if role.starts_with("dynamic") {
                    s.dynamic_switches += 1;
                }
                *s.matrix.entry((*from, *to)).or_default() += 1;
            }
            TraceEvent::Alloc { size, .. } => {
                s.allocs += 1;
                s.bytes_allocated += size;
            }
            TraceEvent::Free { size, .. } => {
                s.frees += 1;
                s.bytes_freed += size;
            }
            TraceEvent::Fault { .. } => s.faults += 1,
            _ => {}
        }
    }
    Ok(s)
}

impl TraceStats {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "wrpkru: {}", self.wrpkru_count);
        let _ = writeln!(out, "dynamic switches: {}", self.dynamic_switches);
        let _ = writeln!(out, "faults: {}", self.faults);
        let _ = writeln!(out, "allocs: {} ({} bytes)", self.allocs, self.bytes_allocated);
        let _ = writeln!(out, "frees: {} ({} bytes)", self.frees, self.bytes_freed);
        let _ = writeln!(out, "switch matrix (from -> to: count):");
        for ((from, to), n) in &self.matrix {
            let _ = writeln!(out, "  {from} -> {to}: {n}");
        }
        out
    }
}

/// Summarise a trace file.
pub fn cmd_stats(trace: &Path) -> Result<String, CliError> {
    let text = fs::read_to_string(trace).map_err(io_err(trace))?;
    Ok(trace_stats(&text)?.render())
}
