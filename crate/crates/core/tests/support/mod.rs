//! Oracles shared by the core integration tests and the acceptance suite.
#![allow(dead_code)]

use keyward_core::gen::generate_seeded;
use keyward_core::instrument::Vectors;
use keyward_core::machine::{oracle_check, Fault, FaultKind, TraceEvent, TraceRecord};
use keyward_core::pipeline::{build, machine, CompileError};
use keyward_core::policy::RightsVector;

pub const INPUT: &[u8] = b"ping";

/// One program run on both sides.
pub struct Differential {
    pub source: String,
    pub violating: bool,
    pub trace: Vec<TraceRecord>,
    pub initial: RightsVector,
    pub wrpkru_count: u64,
}

fn is_policy_fault(kind: FaultKind) -> bool {
    matches!(kind, FaultKind::PkeyAccessFault | FaultKind::PkeyWriteFault | FaultKind::CfiFault)
}

/// Run generated program `seed` instrumented on the machine and under the
/// reference monitor. `Ok(None)` when the build is rejected as ambiguous.
pub fn differential(seed: u64) -> Result<Option<Differential>, String> {
    let source = generate_seeded(seed);
    let (compiled, built) = match build(&source) {
        Ok(b) => b,
        Err(CompileError::Instrument(e)) if e.to_string().contains("reaches partitions") => return Ok(None),
        Err(e) => return Err(format!("seed {seed}: build failed: {e}\n{source}")),
    };
    let mut state = machine(&compiled, &built).map_err(|e| e.to_string())?;
    let main = compiled.ir.function_by_name("main").expect("generated main").id;
    let initial = Vectors::new(&built.module.ir, &compiled.policy, &built.module.keys).function(main);
    let actual = state.run(&built.module, "main", INPUT);
    let oracle = oracle_check(&compiled.ir, &compiled.policy, INPUT);
    let fail = |why: String| Err(format!("seed {seed}: {why}\nmachine: {actual:?}\noracle: {oracle:?}\n{source}"));
    let violating = match (oracle.first(), &actual) {
        (Some(v), Err(Fault { kind, stmt, .. })) if *stmt == v.stmt && *kind == v.kind.fault_kind() => true,
        (Some(v), _) => return fail(format!("monitor reports {:?} at statement {}", v.kind, v.stmt)),
        (None, Err(f)) if is_policy_fault(f.kind) => {
            return fail(format!("spurious {} at statement {}", f.kind, f.stmt))
        }
        (None, Err(f)) => match &oracle.outcome {
            Err(g) if g.kind == f.kind && g.stmt == f.stmt => false,
            _ => return fail("runtime errors differ".into()),
        },
        (None, Ok(c)) => match &oracle.outcome {
            Ok(d) if d == c => false,
            _ => return fail("completions differ".into()),
        },
    };
    Ok(Some(Differential {
        source,
        violating,
        trace: state.trace().to_vec(),
        initial,
        wrpkru_count: state.wrpkru_count(),
    }))
}

enum Frame {
    Call { entry: RightsVector, caller: RightsVector },
    Scope { before: RightsVector },
}

/// Counts of restoration points a trace was checked at.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Restorations {
    pub scopes: usize,
    pub calls: usize,
    pub unwinds: usize,
}

/// Replay the Switch events of a trace and check that every scope exit and
/// every returning call restores the image held before entry. `initial` is
/// the image the entry function starts with.
pub fn check_restoration(trace: &[TraceRecord], initial: &RightsVector) -> Result<Restorations, String> {
    let mut image = initial.clone();
    let mut frames: Vec<Frame> = Vec::new();
    let mut pending: Option<RightsVector> = None;
    // Image a caller must hold again once the callee has returned.
    let mut expect: Option<RightsVector> = None;
    let mut seen = Restorations::default();
    for r in trace {
        let at = r.seq;
        let restoring =
            matches!(&r.event, TraceEvent::Switch { role, .. } if role == "call_exit" || role == "dynamic_exit");
        if let Some(want) = expect.take() {
            if !restoring {
                if image != want {
                    return Err(format!("#{at}: image {image} after return, caller held {want}"));
                }
                seen.calls += 1;
            } else {
                expect = Some(want);
            }
        }
        match &r.event {
            TraceEvent::Switch { role, before, after, .. } => {
                if *before != image {
                    return Err(format!("#{at}: switch reports before={before} but image is {image}"));
                }
                image = after.clone();
                match role.as_str() {
                    "call_enter" | "dynamic_enter" => pending = Some(before.clone()),
                    "scope_enter" => frames.push(Frame::Scope { before: before.clone() }),
                    "scope_exit" => match frames.pop() {
                        Some(Frame::Scope { before: want }) if want == *after => seen.scopes += 1,
                        Some(Frame::Scope { before: want }) => {
                            return Err(format!("#{at}: scope exit to {after}, entered from {want}"))
                        }
                        _ => return Err(format!("#{at}: scope exit without an open scope")),
                    },
                    "return_unwind" => {
                        let entry = frames.iter().rev().find_map(|f| match f {
                            Frame::Call { entry, .. } => Some(entry),
                            Frame::Scope { .. } => None,
                        });
                        match entry {
                            Some(e) if e == after => seen.unwinds += 1,
                            Some(e) => return Err(format!("#{at}: unwind to {after}, function entered with {e}")),
                            None => return Err(format!("#{at}: unwind outside any function")),
                        }
                    }
                    "call_exit" | "dynamic_exit" => match expect.take() {
                        Some(want) if want == *after => seen.calls += 1,
                        Some(want) => return Err(format!("#{at}: {role} to {after}, caller held {want}")),
                        None => return Err(format!("#{at}: {role} without a returning call")),
                    },
                    _ => {}
                }
            }
            TraceEvent::Call { .. } => {
                let caller = pending.take().unwrap_or_else(|| image.clone());
                frames.push(Frame::Call { entry: image.clone(), caller });
            }
            TraceEvent::Return { function, .. } => {
                let (entry, caller) = loop {
                    match frames.pop() {
                        Some(Frame::Call { entry, caller }) => break (entry, caller),
                        Some(Frame::Scope { .. }) => continue,
                        None => return Err(format!("#{at}: return from {function} without a call")),
                    }
                };
                if image != entry {
                    return Err(format!("#{at}: {function} returns holding {image}, entered with {entry}"));
                }
                expect = Some(caller);
            }
            TraceEvent::Fault { .. } => break,
            _ => {}
        }
    }
    Ok(seen)
}
