use std::collections::{BTreeSet, VecDeque};

use keyward_core::gen::generate_seeded;
use keyward_core::instrument::{assign_sections, emit_layout, instrument, parse_layout, RegionKind};
use keyward_core::lang::analysis::{
    dominates, find_address_taken, immediate_dominators, resolve_allocation_partition, ResolveError,
};
use keyward_core::lang::ir::*;
use keyward_core::lang::lower::lower_to_ir;
use keyward_core::lang::parser::parse_program;
use keyward_core::pipeline::compile;
use keyward_core::policy::{map_partitions_to_keys, PartitionLabel, Policy, RightsVector, StatementId};
use proptest::prelude::*;

fn lower(src: &str) -> (IRModule, Policy) {
    lower_to_ir(&parse_program(src).unwrap()).unwrap()
}

// ---- def-use path enumeration -------------------------------------------

fn def_of(f: &IRFunction, v: ValueId) -> Option<&Op> {
    f.insts().find(|i| i.id == v).map(|i| &i.op)
}

fn bound_labels(f: &IRFunction, v: ValueId, out: &mut BTreeSet<PartitionLabel>) {
    for (value, local) in &f.bindings {
        let decl = f.local(*local);
        if *value == v && decl.annotated {
            out.insert(decl.partition);
        }
    }
}

fn global_label(ir: &IRModule, f: &IRFunction, addr: ValueId) -> Option<PartitionLabel> {
    match def_of(f, addr) {
        Some(Op::GlobalAddr(g)) => Some(ir.global(*g).meta.partition_label),
        _ => None,
    }
}

/// Walk every simple path along uses of `v`.
fn paths_forward(
    ir: &IRModule,
    f: &IRFunction,
    v: ValueId,
    path: &mut Vec<ValueId>,
    out: &mut BTreeSet<PartitionLabel>,
) {
    bound_labels(f, v, out);
    for inst in f.insts() {
        if !inst.op.operands().contains(&v) {
            continue;
        }
        match &inst.op {
            Op::Phi(_) | Op::Arith(..) if !path.contains(&inst.id) => {
                path.push(inst.id);
                paths_forward(ir, f, inst.id, path, out);
                path.pop();
            }
            Op::Store { addr, value, .. } if *value == v => out.extend(global_label(ir, f, *addr)),
            _ => {}
        }
    }
}

/// Walk every simple path back along definitions of `v`.
fn paths_backward(
    ir: &IRModule,
    f: &IRFunction,
    v: ValueId,
    path: &mut Vec<ValueId>,
    out: &mut BTreeSet<PartitionLabel>,
) {
    bound_labels(f, v, out);
    let sources: Vec<ValueId> = match def_of(f, v) {
        Some(Op::Phi(incoming)) => incoming.iter().map(|(x, _)| *x).collect(),
        Some(Op::Arith(_, a, b)) => vec![*a, *b],
        Some(Op::Load { addr, .. }) => {
            out.extend(global_label(ir, f, *addr));
            Vec::new()
        }
        Some(Op::HeapAlloc { .. }) => {
            paths_forward(ir, f, v, &mut vec![v], out);
            Vec::new()
        }
        Some(Op::AllocStack { partition, .. }) => {
            out.insert(*partition);
            Vec::new()
        }
        _ => Vec::new(),
    };
    for s in sources {
        if !path.contains(&s) {
            path.push(s);
            paths_backward(ir, f, s, path, out);
            path.pop();
        }
    }
}

fn oracle_partitions(ir: &IRModule, site: InstRef) -> BTreeSet<PartitionLabel> {
    let f = ir.function(site.function);
    let mut out = BTreeSet::new();
    match def_of(f, site.value) {
        Some(Op::HeapAlloc { .. }) => paths_forward(ir, f, site.value, &mut vec![site.value], &mut out),
        Some(Op::HeapFree { ptr }) => paths_backward(ir, f, *ptr, &mut vec![*ptr], &mut out),
        other => panic!("not an allocation site: {other:?}"),
    }
    out
}

#[derive(Debug, Clone)]
enum PtrOp {
    Alloc(usize),
    Copy(usize, usize),
    Offset(usize),
    CondCopy(usize, usize),
    LoopCopy(usize, usize),
    StoreGlobal(usize, usize),
    LoadGlobal(usize, usize),
    Annotate(usize, usize),
    Free(usize),
}

fn ptr_op() -> impl Strategy<Value = PtrOp> {
    prop_oneof![
        (0..3usize).prop_map(PtrOp::Alloc),
        (0..3usize, 0..3usize).prop_map(|(a, b)| PtrOp::Copy(a, b)),
        (0..3usize).prop_map(PtrOp::Offset),
        (0..3usize, 0..3usize).prop_map(|(a, b)| PtrOp::CondCopy(a, b)),
        (0..3usize, 0..3usize).prop_map(|(a, b)| PtrOp::LoopCopy(a, b)),
        (0..3usize, 0..3usize).prop_map(|(g, a)| PtrOp::StoreGlobal(g, a)),
        (0..3usize, 0..3usize).prop_map(|(a, g)| PtrOp::LoadGlobal(a, g)),
        (0..3usize, 0..3usize).prop_map(|(p, a)| PtrOp::Annotate(p, a)),
        (0..3usize).prop_map(PtrOp::Free),
    ]
}

fn pointer_program(attrs: &[Option<usize>], ops: &[PtrOp]) -> String {
    let vars = ["a", "b", "c"];
    let mut body = String::new();
    for (v, attr) in vars.iter().zip(attrs) {
        if let Some(p) = attr {
            body.push_str(&format!("    [[partition({p}, rw)]] let {v} = alloc(8);\n"));
        } else {
            body.push_str(&format!("    let {v} = alloc(8);\n"));
        }
    }
    for (i, op) in ops.iter().enumerate() {
        body.push_str(&match op {
            PtrOp::Alloc(a) => format!("    {} = alloc(16);\n", vars[*a]),
            PtrOp::Copy(a, b) => format!("    {} = {};\n", vars[*a], vars[*b]),
            PtrOp::Offset(a) => format!("    {0} = {0} + 8;\n", vars[*a]),
            PtrOp::CondCopy(a, b) => format!("    if len > 1 {{\n      {} = {};\n    }}\n", vars[*a], vars[*b]),
            PtrOp::LoopCopy(a, b) => format!("    while len > 9 {{\n      {} = {};\n    }}\n", vars[*a], vars[*b]),
            PtrOp::StoreGlobal(g, a) => format!("    g{g} = {};\n", vars[*a]),
            PtrOp::LoadGlobal(a, g) => format!("    {} = g{g};\n", vars[*a]),
            PtrOp::Annotate(p, a) => format!("    [[partition({p}, rw)]] let t{i} = {};\n", vars[*a]),
            PtrOp::Free(a) => format!("    free({});\n", vars[*a]),
        });
    }
    format!(
        "module m0 {{\n  #pragma partition 0 rw\n  global g0: ptr;\n  fn main(input, len) {{\n{body}    return 0;\n  }}\n}}\n\
         module m1 {{\n  #pragma partition 1 rw\n  global g1: ptr;\n}}\n\
         module m2 {{\n  #pragma partition 2 rw\n  global g2: ptr;\n}}\n"
    )
}

fn allocation_sites(ir: &IRModule) -> Vec<InstRef> {
    let mut sites = Vec::new();
    for f in &ir.functions {
        for inst in f.insts() {
            if matches!(inst.op, Op::HeapAlloc { .. } | Op::HeapFree { .. }) {
                sites.push(InstRef { function: f.id, value: inst.id });
            }
        }
    }
    sites
}

fn check_resolution(ir: &IRModule) -> Result<usize, TestCaseError> {
    let sites = allocation_sites(ir);
    for site in &sites {
        let expected = oracle_partitions(ir, *site);
        match (resolve_allocation_partition(ir, *site), expected.len()) {
            (Ok(p), 1) => prop_assert_eq!(Some(&p), expected.iter().next()),
            (Err(ResolveError::Unresolved(_)), 0) => {}
            (Err(ResolveError::MultiplePartitions { partitions, .. }), n) if n > 1 => {
                prop_assert_eq!(partitions, expected.into_iter().collect::<Vec<_>>())
            }
            (got, _) => prop_assert!(false, "{got:?} but paths reach {expected:?}"),
        }
    }
    Ok(sites.len())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn resolution_matches_path_enumeration(
        attrs in prop::collection::vec(prop::option::of(0..3usize), 3),
        ops in prop::collection::vec(ptr_op(), 0..6),
    ) {
        let (ir, _) = lower(&pointer_program(&attrs, &ops));
        let f = ir.function_by_name("main").unwrap();
        prop_assume!(f.insts().count() <= 30);
        check_resolution(&ir)?;
    }

    #[test]
    fn layout_regions_are_disjoint_and_aligned(seed in any::<u64>()) {
        let (ir, policy) = lower(&generate_seeded(seed));
        let keys = map_partitions_to_keys(&policy.labels()).unwrap();
        let plan = assign_sections(&ir, &keys);
        for (i, a) in plan.regions.iter().enumerate() {
            prop_assert_eq!(a.base % 4096, 0);
            prop_assert_eq!(a.length % 4096, 0);
            prop_assert!(a.length > 0);
            for b in &plan.regions[i + 1..] {
                prop_assert!(a.base + a.length <= b.base || b.base + b.length <= a.base, "{a:?} overlaps {b:?}");
            }
        }
        for p in policy.labels() {
            for kind in [RegionKind::Globals, RegionKind::Heap] {
                let n = plan.regions.iter().filter(|r| r.partition == Some(p) && r.kind == kind).count();
                prop_assert_eq!(n, 1);
            }
        }
        for g in &ir.globals {
            let sym = plan.symbol(g.id).unwrap();
            let region = plan.region(g.meta.partition_label, RegionKind::Globals).unwrap();
            prop_assert!(sym.base >= region.base && sym.base + sym.size <= region.base + region.length);
        }
        let bytes = emit_layout(&plan);
        prop_assert_eq!(emit_layout(&parse_layout(&bytes).unwrap()), bytes);
    }
}

#[test]
fn resolution_matches_path_enumeration_on_generated_corpus() {
    let mut sites = 0;
    for seed in 0..300 {
        let (ir, _) = lower(&generate_seeded(seed));
        sites += check_resolution(&ir).unwrap();
    }
    assert!(sites > 100);
}

#[test]
fn phi_merge_of_two_partitions_is_ambiguous() {
    let src = pointer_program(&[Some(0), Some(2), None], &[PtrOp::CondCopy(0, 1), PtrOp::Free(0)]);
    let (ir, _) = lower(&src);
    let free = allocation_sites(&ir).into_iter().last().unwrap();
    match resolve_allocation_partition(&ir, free) {
        Err(ResolveError::MultiplePartitions { partitions, .. }) => {
            assert_eq!(partitions, vec![PartitionLabel(0), PartitionLabel(2)])
        }
        other => panic!("{other:?}"),
    }
}

// ---- dominance ------------------------------------------------------------

fn reachable_without(f: &IRFunction, removed: Option<BlockId>) -> BTreeSet<BlockId> {
    let mut seen = BTreeSet::new();
    if removed == Some(BlockId(0)) {
        return seen;
    }
    let mut work = VecDeque::from([BlockId(0)]);
    while let Some(b) = work.pop_front() {
        if !seen.insert(b) {
            continue;
        }
        for s in f.blocks[b.index()].successors() {
            if Some(s) != removed {
                work.push_back(s);
            }
        }
    }
    seen
}

/// `a` dominates `b` iff `b` is unreachable once `a` is deleted.
fn brute_dominates(f: &IRFunction, a: BlockId, b: BlockId) -> bool {
    a == b || !reachable_without(f, Some(a)).contains(&b)
}

#[test]
fn dominator_tree_matches_brute_force() {
    for seed in 0..200 {
        let (ir, _) = lower(&generate_seeded(seed));
        for f in &ir.functions {
            let idom = immediate_dominators(f);
            let live = reachable_without(f, None);
            for a in &live {
                for b in &live {
                    assert_eq!(
                        dominates(&idom, *a, *b),
                        brute_dominates(f, *a, *b),
                        "seed {seed} {} {a:?} {b:?}",
                        f.name
                    );
                }
            }
        }
    }
}

fn position(f: &IRFunction, v: ValueId) -> (BlockId, usize) {
    let (b, pos, _) = f.find(v).unwrap();
    (b, pos)
}

#[test]
fn registration_dominates_every_address_taking_site() {
    let looped = "module a { #pragma partition 0 rw\n fn main(input, len) {\n let i = 0;\n \
                  while i < 3 { let fp = &sign; fp(); i = i + 1; }\n return 0; } }\n\
                  module b { #pragma partition 1 rw\n fn sign() { return 1; } }";
    let mut sources: Vec<String> = (0..300).map(generate_seeded).collect();
    sources.push(looped.to_string());
    let mut checked = 0;
    for src in sources {
        let Ok(c) = compile(&src) else { continue };
        let Ok(build) = instrument(&c.ir, &c.policy) else { continue };
        let ir = &build.module.ir;
        for (site, target) in find_address_taken(ir) {
            let f = ir.function(site.function);
            let (block, pos) = position(f, site.value);
            let prev = &f.blocks[block.index()].insts[pos - 1];
            assert!(matches!(&prev.op, Op::RegisterAtFn { function, .. } if *function == target));
            let (rb, rpos) = position(f, prev.id);
            assert!(brute_dominates(f, rb, block) && (rb != block || rpos < pos));
            checked += 1;
        }
    }
    assert!(checked > 50);
}

// ---- rewrite completeness and accounting --------------------------------

fn vector(
    c: &keyward_core::pipeline::Compiled,
    keys: &keyward_core::policy::KeyAssignment,
    stmt: StatementId,
) -> RightsVector {
    keys.to_vector(&c.policy.privilege_row(stmt).unwrap())
}

#[test]
fn rewrite_is_complete_and_switch_sites_are_counted() {
    for seed in 0..300 {
        let src = generate_seeded(seed);
        let c = compile(&src).unwrap();
        let Ok(build) = instrument(&c.ir, &c.policy) else { continue };
        let keys = &build.module.keys;
        let mut expected = 0;
        for f in &c.ir.functions {
            for inst in f.insts() {
                if let Op::CallDirect { callee, .. } = inst.op {
                    let callee = c.ir.function(callee);
                    if vector(&c, keys, inst.stmt) != vector(&c, keys, callee.entry_stmt) {
                        expected += if callee.noreturn { 1 } else { 2 };
                    }
                }
            }
        }
        assert_eq!(build.module.switch_site_count, expected, "seed {seed}");
        for f in &build.module.ir.functions {
            for b in &f.blocks {
                for (i, inst) in b.insts.iter().enumerate() {
                    assert!(!matches!(inst.op, Op::HeapAlloc { .. } | Op::HeapFree { .. }), "seed {seed}");
                    if let Op::CallIndirect { callee, .. } = inst.op {
                        assert!(matches!(b.insts[i - 1].op, Op::SetPrivilegesDynamic { target } if target == callee));
                    }
                }
            }
        }
    }
}

/// Walk every path of every instrumented function tracking the image the
/// static switches leave behind; each `ret` must see the entry image.
#[test]
fn static_switches_bracket_every_path() {
    for seed in 0..300 {
        let c = compile(&generate_seeded(seed)).unwrap();
        let Ok(build) = instrument(&c.ir, &c.policy) else { continue };
        let ir = &build.module.ir;
        let keys = &build.module.keys;
        for f in &ir.functions {
            let entry = vector(&c, keys, f.entry_stmt);
            let mut seen = BTreeSet::new();
            let mut work = vec![(BlockId(0), entry.clone())];
            while let Some((b, mut image)) = work.pop() {
                if !seen.insert((b, image.to_string())) {
                    continue;
                }
                for inst in &f.blocks[b.index()].insts {
                    match &inst.op {
                        Op::SetPrivileges { vector, .. } | Op::RestorePrivilegesDynamic { vector } => {
                            image = vector.clone()
                        }
                        // The run halts once a noreturn callee returns.
                        Op::CallDirect { callee, .. } if ir.function(*callee).noreturn => break,
                        Op::Ret(_) => assert_eq!(image, entry, "seed {seed} {}", f.name),
                        Op::Branch { then_block, else_block, .. } => {
                            work.push((*then_block, image.clone()));
                            work.push((*else_block, image.clone()));
                        }
                        Op::Jump(t) => work.push((*t, image.clone())),
                        _ => {}
                    }
                }
            }
        }
    }
}
