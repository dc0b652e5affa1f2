//! Control-flow and def-use analyses over the IR.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use super::ir::*;
use crate::policy::PartitionLabel;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error("allocation at {function}:{value} (statement {statement}) reaches partitions {partitions:?}")]
    MultiplePartitions { function: String, value: ValueId, statement: u32, line: u32, partitions: Vec<PartitionLabel> },
    #[error("no partitioned declaration is reachable from {0:?}")]
    Unresolved(InstRef),
    #[error("{0:?} is not an allocation site")]
    NotAnAllocation(InstRef),
}

/// Predecessor lists, indexed by block.
pub fn predecessors(f: &IRFunction) -> Vec<Vec<BlockId>> {
    let mut preds = vec![Vec::new(); f.blocks.len()];
    for b in &f.blocks {
        for s in b.successors() {
            if !preds[s.index()].contains(&b.id) {
                preds[s.index()].push(b.id);
            }
        }
    }
    preds
}

/// Blocks reachable from the entry, in reverse postorder.
pub fn reverse_postorder(f: &IRFunction) -> Vec<BlockId> {
    let mut seen = vec![false; f.blocks.len()];
    let mut post = Vec::new();
    let mut stack = vec![(BlockId(0), 0usize)];
    seen[0] = true;
    while let Some((b, i)) = stack.pop() {
        let succs = f.blocks[b.index()].successors();
        if i < succs.len() {
            stack.push((b, i + 1));
            let s = succs[i];
            if !seen[s.index()] {
                seen[s.index()] = true;
                stack.push((s, 0));
            }
        } else {
            post.push(b);
        }
    }
    post.reverse();
    post
}

/// Immediate dominators (Cooper, Harvey, Kennedy). Unreachable blocks map
/// to `None`; the entry maps to itself.
pub fn immediate_dominators(f: &IRFunction) -> Vec<Option<BlockId>> {
    let rpo = reverse_postorder(f);
    let mut order = vec![usize::MAX; f.blocks.len()];
    for (i, b) in rpo.iter().enumerate() {
        order[b.index()] = i;
    }
    let preds = predecessors(f);
    let mut idom: Vec<Option<BlockId>> = vec![None; f.blocks.len()];
    idom[0] = Some(BlockId(0));
    let intersect = |idom: &[Option<BlockId>], mut a: BlockId, mut b: BlockId| {
        while a != b {
            while order[a.index()] > order[b.index()] {
                a = idom[a.index()].expect("processed");
            }
            while order[b.index()] > order[a.index()] {
                b = idom[b.index()].expect("processed");
            }
        }
        a
    };
    let mut changed = true;
    while changed {
        changed = false;
        for b in rpo.iter().skip(1) {
            let mut new_idom: Option<BlockId> = None;
            for p in &preds[b.index()] {
                if idom[p.index()].is_none() {
                    continue;
                }
                new_idom = Some(match new_idom {
                    None => *p,
                    Some(cur) => intersect(&idom, *p, cur),
                });
            }
            if new_idom != idom[b.index()] {
                idom[b.index()] = new_idom;
                changed = true;
            }
        }
    }
    idom
}

/// Whether block `a` dominates block `b`.
pub fn dominates(idom: &[Option<BlockId>], a: BlockId, b: BlockId) -> bool {
    let mut cur = b;
    loop {
        if cur == a {
            return true;
        }
        match idom[cur.index()] {
            Some(next) if next != cur => cur = next,
            _ => return false,
        }
    }
}

/// Whether instruction `a` dominates instruction `b` in `f`.
pub fn inst_dominates(f: &IRFunction, idom: &[Option<BlockId>], a: ValueId, b: ValueId) -> bool {
    let (Some((ba, pa, _)), Some((bb, pb, _))) = (f.find(a), f.find(b)) else {
        return false;
    };
    if ba == bb {
        pa <= pb
    } else {
        dominates(idom, ba, bb)
    }
}

/// Def-use edges of one function: for every value, the instructions using it.
pub fn users(f: &IRFunction) -> BTreeMap<ValueId, Vec<ValueId>> {
    let mut map: BTreeMap<ValueId, Vec<ValueId>> = BTreeMap::new();
    for inst in f.insts() {
        for operand in inst.op.operands() {
            map.entry(operand).or_default().push(inst.id);
        }
    }
    map
}

/// Partition labels of declarations a value flows into or out of directly.
struct DeclIndex<'a> {
    module: &'a IRModule,
    f: &'a IRFunction,
    bound: BTreeMap<ValueId, Vec<LocalId>>,
    users: BTreeMap<ValueId, Vec<ValueId>>,
}

impl<'a> DeclIndex<'a> {
    fn new(module: &'a IRModule, f: &'a IRFunction) -> Self {
        let mut bound: BTreeMap<ValueId, Vec<LocalId>> = BTreeMap::new();
        for (v, l) in &f.bindings {
            bound.entry(*v).or_default().push(*l);
        }
        DeclIndex { module, f, bound, users: users(f) }
    }

    fn op(&self, v: ValueId) -> Option<&'a Op> {
        self.f.find(v).map(|(_, _, i)| &i.op)
    }

    fn global_of(&self, addr: ValueId) -> Option<PartitionLabel> {
        match self.op(addr)? {
            Op::GlobalAddr(g) => Some(self.module.global(*g).meta.partition_label),
            _ => None,
        }
    }

    fn annotated_locals(&self, v: ValueId, out: &mut BTreeSet<PartitionLabel>) {
        for l in self.bound.get(&v).into_iter().flatten() {
            let decl = self.f.local(*l);
            if decl.annotated {
                out.insert(decl.partition);
            }
        }
    }

    /// Follow uses of an allocation result.
    fn forward(&self, start: ValueId, out: &mut BTreeSet<PartitionLabel>) {
        let mut seen = BTreeSet::new();
        let mut work = VecDeque::from([start]);
        while let Some(v) = work.pop_front() {
            if !seen.insert(v) {
                continue;
            }
            self.annotated_locals(v, out);
            for u in self.users.get(&v).into_iter().flatten() {
                match self.op(*u) {
                    Some(Op::Phi(_)) | Some(Op::Arith(..)) => work.push_back(*u),
                    Some(Op::Store { addr, value, .. }) if *value == v => {
                        if let Some(p) = self.global_of(*addr) {
                            out.insert(p);
                        }
                    }
                    _ => {}
                }
            }
        }
    }

    /// Follow definitions of a pointer operand.
    fn backward(&self, start: ValueId, out: &mut BTreeSet<PartitionLabel>) {
        let mut seen = BTreeSet::new();
        let mut work = VecDeque::from([start]);
        while let Some(v) = work.pop_front() {
            if !seen.insert(v) {
                continue;
            }
            self.annotated_locals(v, out);
            match self.op(v) {
                Some(Op::Phi(incoming)) => work.extend(incoming.iter().map(|(x, _)| *x)),
                Some(Op::Arith(_, a, b)) => work.extend([*a, *b]),
                Some(Op::Load { addr, .. }) => {
                    if let Some(p) = self.global_of(*addr) {
                        out.insert(p);
                    }
                }
                Some(Op::HeapAlloc { .. }) | Some(Op::PartitionAlloc { .. }) => self.forward(v, out),
                Some(Op::AllocStack { partition, .. }) => {
                    out.insert(*partition);
                }
                _ => {}
            }
        }
    }
}

/// Partitions reachable over def-use chains from an allocation site's
/// pointer result (allocations) or pointer argument (frees).
pub fn reachable_partitions(ir: &IRModule, site: InstRef) -> Result<BTreeSet<PartitionLabel>, ResolveError> {
    let f = ir.function(site.function);
    let index = DeclIndex::new(ir, f);
    let mut out = BTreeSet::new();
    match index.op(site.value) {
        Some(Op::HeapAlloc { .. }) | Some(Op::PartitionAlloc { .. }) => index.forward(site.value, &mut out),
        Some(Op::HeapFree { ptr }) | Some(Op::PartitionFree { ptr, .. }) => index.backward(*ptr, &mut out),
        _ => return Err(ResolveError::NotAnAllocation(site)),
    }
    Ok(out)
}

/// The unique partition an allocation or free site belongs to.
pub fn resolve_allocation_partition(ir: &IRModule, site: InstRef) -> Result<PartitionLabel, ResolveError> {
    let found = reachable_partitions(ir, site)?;
    match found.len() {
        0 => Err(ResolveError::Unresolved(site)),
        1 => Ok(*found.iter().next().expect("one element")),
        _ => {
            let f = ir.function(site.function);
            let stmt = f.find(site.value).map(|(_, _, i)| i.stmt).unwrap_or_default();
            Err(ResolveError::MultiplePartitions {
                function: f.name.clone(),
                value: site.value,
                statement: stmt.0,
                line: ir.statement(stmt).map_or(0, |s| s.line),
                partitions: found.into_iter().collect(),
            })
        }
    }
}

/// Like [`resolve_allocation_partition`], substituting the enclosing unit's
/// partition when no declaration is reachable.
pub fn allocation_partition(ir: &IRModule, site: InstRef) -> Result<PartitionLabel, ResolveError> {
    match resolve_allocation_partition(ir, site) {
        Err(ResolveError::Unresolved(_)) => Ok(ir.function(site.function).home),
        other => other,
    }
}

/// Every `take_fn_addr` site with its target.
pub fn find_address_taken(ir: &IRModule) -> BTreeSet<(InstRef, FuncId)> {
    let mut out = BTreeSet::new();
    for f in &ir.functions {
        for inst in f.insts() {
            if let Op::TakeFnAddr(target) = inst.op {
                out.insert((InstRef { function: f.id, value: inst.id }, target));
            }
        }
    }
    out
}

/// All heap allocation and free sites of the module.
pub fn allocation_sites(ir: &IRModule) -> Vec<InstRef> {
    let mut out = Vec::new();
    for f in &ir.functions {
        for inst in f.insts() {
            if matches!(inst.op, Op::HeapAlloc { .. } | Op::HeapFree { .. }) {
                out.push(InstRef { function: f.id, value: inst.id });
            }
        }
    }
    out
}
