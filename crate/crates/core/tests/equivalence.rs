//! Differential testing of instrumented execution against the reference
//! monitor, and trace-level restoration checks, over a generated corpus.

mod support;

use support::{check_restoration, differential, Restorations};

const CORPUS: u64 = 1000;

#[test]
fn machine_agrees_with_monitor_on_generated_corpus() {
    let mut violating = 0;
    let mut failures = Vec::new();
    for seed in 0..CORPUS {
        match differential(seed) {
            Ok(Some(d)) => violating += usize::from(d.violating),
            Ok(None) => {}
            Err(e) => failures.push(e),
        }
    }
    assert!(failures.is_empty(), "{} disagreements; first:\n{}", failures.len(), failures[0]);
    // The corpus must exercise both outcomes.
    assert!(violating > 100 && violating < 900, "{violating} violating programs");
}

#[test]
fn every_exit_restores_the_entry_image() {
    let mut total = Restorations::default();
    for seed in 0..CORPUS {
        let Some(d) = differential(seed).unwrap() else { continue };
        let seen = check_restoration(&d.trace, &d.initial).unwrap_or_else(|e| panic!("seed {seed}: {e}\n{}", d.source));
        total.scopes += seen.scopes;
        total.calls += seen.calls;
        total.unwinds += seen.unwinds;
    }
    assert!(total.scopes > 50 && total.calls > 200 && total.unwinds > 5, "{total:?}");
}

#[test]
fn switch_counter_matches_switch_events() {
    for seed in 0..200 {
        let Some(d) = differential(seed).unwrap() else { continue };
        let switches = d.trace.iter().filter(|r| r.event.kind() == "switch").count() as u64;
        assert_eq!(d.wrpkru_count, switches, "seed {seed}");
    }
}

#[test]
fn runs_are_deterministic() {
    for seed in 0..100 {
        let (Some(a), Some(b)) = (differential(seed).unwrap(), differential(seed).unwrap()) else { continue };
        assert_eq!(a.trace, b.trace, "seed {seed}");
    }
}

#[test]
fn restoration_checker_catches_a_leaked_scope() {
    use keyward_core::machine::TraceEvent;
    let (seed, d) = (0..CORPUS)
        .filter_map(|s| differential(s).unwrap().map(|d| (s, d)))
        .find(|(_, d)| {
            d.trace.iter().any(|r| matches!(&r.event, TraceEvent::Switch { role, .. } if role == "scope_exit"))
        })
        .expect("corpus has a refinement scope");
    let mut trace = d.trace.clone();
    let pos =
        trace.iter().position(|r| matches!(&r.event, TraceEvent::Switch { role, .. } if role == "scope_exit")).unwrap();
    // Pretend the exit kept the raised rights.
    if let TraceEvent::Switch { before, after, .. } = &mut trace[pos].event {
        *after = before.clone();
    }
    assert!(check_restoration(&trace, &d.initial).is_err(), "seed {seed}");
}
