//! Memory map planning and the layout file format.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::ir::{GlobalId, IRModule};
use crate::policy::{KeyAssignment, PartitionLabel, ProtectionKey, RUNTIME_KEY};

pub const PAGE_SIZE: u64 = 4096;
pub const RUNTIME_BASE: u64 = 0x1000;
pub const RUNTIME_LENGTH: u64 = PAGE_SIZE;
pub const HEAP_PAGES: u64 = 16;
pub const GLOBAL_ALIGN: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Runtime,
    Globals,
    Heap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    /// `None` for the runtime region.
    pub partition: Option<PartitionLabel>,
    pub key: ProtectionKey,
    pub kind: RegionKind,
    pub base: u64,
    pub length: u64,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.base + self.length
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Symbol {
    pub name: String,
    pub global: GlobalId,
    pub partition: PartitionLabel,
    pub base: u64,
    pub size: u64,
    pub immutable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutPlan {
    pub page_size: u64,
    pub regions: Vec<Region>,
    pub symbols: Vec<Symbol>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("regions {0:#x} and {1:#x} overlap")]
    Overlap(u64, u64),
    #[error("region at {0:#x} is not page aligned")]
    Misaligned(u64),
    #[error("malformed layout file: {0}")]
    Format(String),
}

fn round_up(n: u64, to: u64) -> u64 {
    n.div_ceil(to) * to
}

/// Place each partition's globals and heap. Partitions are laid out in label
/// order after the runtime region; immutable globals come first, on pages of
/// their own, so they can be mapped read-only.
pub fn assign_sections(ir: &IRModule, keys: &KeyAssignment) -> LayoutPlan {
    let mut regions = vec![Region {
        partition: None,
        key: RUNTIME_KEY,
        kind: RegionKind::Runtime,
        base: RUNTIME_BASE,
        length: RUNTIME_LENGTH,
    }];
    let mut symbols = Vec::new();
    let mut next = RUNTIME_BASE + RUNTIME_LENGTH;
    for (label, key) in keys.iter() {
        let base = next;
        let mut offset = 0;
        for immutable in [true, false] {
            for g in ir.globals.iter().filter(|g| g.meta.partition_label == label && g.immutable == immutable) {
                offset = round_up(offset, GLOBAL_ALIGN);
                symbols.push(Symbol {
                    name: g.name.clone(),
                    global: g.id,
                    partition: label,
                    base: base + offset,
                    size: g.ty.size(),
                    immutable,
                });
                offset += g.ty.size();
            }
            if immutable {
                offset = round_up(offset, PAGE_SIZE);
            }
        }
        let length = round_up(offset, PAGE_SIZE).max(PAGE_SIZE);
        regions.push(Region { partition: Some(label), key, kind: RegionKind::Globals, base, length });
        next = base + length;
        let heap = HEAP_PAGES * PAGE_SIZE;
        regions.push(Region { partition: Some(label), key, kind: RegionKind::Heap, base: next, length: heap });
        next += heap;
    }
    LayoutPlan { page_size: PAGE_SIZE, regions, symbols }
}

impl LayoutPlan {
    pub fn region_at(&self, addr: u64) -> Option<&Region> {
        self.regions.iter().find(|r| r.contains(addr))
    }

    pub fn region(&self, partition: PartitionLabel, kind: RegionKind) -> Option<&Region> {
        self.regions.iter().find(|r| r.partition == Some(partition) && r.kind == kind)
    }

    pub fn symbol(&self, global: GlobalId) -> Option<&Symbol> {
        self.symbols.iter().find(|s| s.global == global)
    }

    pub fn symbol_at(&self, addr: u64) -> Option<&Symbol> {
        self.symbols.iter().find(|s| addr >= s.base && addr < s.base + s.size)
    }

    /// Page indices holding immutable data.
    pub fn readonly_pages(&self) -> BTreeSet<u64> {
        let mut pages = BTreeSet::new();
        for s in self.symbols.iter().filter(|s| s.immutable) {
            for page in s.base / self.page_size..=(s.base + s.size - 1) / self.page_size {
                pages.insert(page);
            }
        }
        pages
    }

    /// Pairwise disjointness and page alignment.
    pub fn validate(&self) -> Result<(), LayoutError> {
        for r in &self.regions {
            if r.base % self.page_size != 0 || r.length % self.page_size != 0 {
                return Err(LayoutError::Misaligned(r.base));
            }
        }
        let mut sorted: Vec<&Region> = self.regions.iter().collect();
        sorted.sort_by_key(|r| r.base);
        for pair in sorted.windows(2) {
            if pair[0].end() > pair[1].base {
                return Err(LayoutError::Overlap(pair[0].base, pair[1].base));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RegionFile {
    partition: Option<u32>,
    key: u8,
    kind: RegionKind,
    base: String,
    length: String,
}

#[derive(Serialize, Deserialize)]
struct SymbolFile {
    name: String,
    global: u32,
    partition: u32,
    base: String,
    size: String,
    immutable: bool,
}

#[derive(Serialize, Deserialize)]
struct LayoutFile {
    page_size: u64,
    regions: Vec<RegionFile>,
    symbols: Vec<SymbolFile>,
}

fn hex(v: u64) -> String {
    format!("{v:#x}")
}

fn unhex(s: &str) -> Result<u64, LayoutError> {
    s.strip_prefix("0x")
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| LayoutError::Format(format!("`{s}` is not a hex number")))
}

/// Serialize a plan. Regions are written sorted by base address.
pub fn emit_layout(plan: &LayoutPlan) -> Vec<u8> {
    let mut regions = plan.regions.clone();
    regions.sort_by_key(|r| r.base);
    let mut symbols = plan.symbols.clone();
    symbols.sort_by_key(|s| s.base);
    let file = LayoutFile {
        page_size: plan.page_size,
        regions: regions
            .iter()
            .map(|r| RegionFile {
                partition: r.partition.map(|p| p.0),
                key: r.key.0,
                kind: r.kind,
                base: hex(r.base),
                length: hex(r.length),
            })
            .collect(),
        symbols: symbols
            .iter()
            .map(|s| SymbolFile {
                name: s.name.clone(),
                global: s.global.0,
                partition: s.partition.0,
                base: hex(s.base),
                size: hex(s.size),
                immutable: s.immutable,
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec_pretty(&file).expect("layout serializes");
    bytes.push(b'\n');
    bytes
}

pub fn parse_layout(bytes: &[u8]) -> Result<LayoutPlan, LayoutError> {
    let file: LayoutFile = serde_json::from_slice(bytes).map_err(|e| LayoutError::Format(e.to_string()))?;
    let mut regions = Vec::new();
    for r in file.regions {
        regions.push(Region {
            partition: r.partition.map(PartitionLabel),
            key: ProtectionKey(r.key),
            kind: r.kind,
            base: unhex(&r.base)?,
            length: unhex(&r.length)?,
        });
    }
    let mut symbols = Vec::new();
    for s in file.symbols {
        symbols.push(Symbol {
            name: s.name,
            global: GlobalId(s.global),
            partition: PartitionLabel(s.partition),
            base: unhex(&s.base)?,
            size: unhex(&s.size)?,
            immutable: s.immutable,
        });
    }
    let plan = LayoutPlan { page_size: file.page_size, regions, symbols };
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{lower::lower_to_ir, parser::parse_program};
    use crate::policy::map_partitions_to_keys;

    fn plan(src: &str) -> LayoutPlan {
        let (ir, policy) = lower_to_ir(&parse_program(src).unwrap()).unwrap();
        let keys = map_partitions_to_keys(&policy.labels()).unwrap();
        assign_sections(&ir, &keys)
    }

    #[test]
    fn empty_program_has_only_the_runtime_region() {
        let p = plan("");
        assert_eq!(p.regions.len(), 1);
        assert_eq!(p.regions[0].kind, RegionKind::Runtime);
    }

    #[test]
    fn partition_without_globals_still_gets_a_page() {
        let p = plan("module a { #pragma partition 0 rw }\nmodule b { #pragma partition 1 rw global x: int; }");
        let a = p.region(PartitionLabel(0), RegionKind::Globals).unwrap();
        assert_eq!(a.length, PAGE_SIZE);
        p.validate().unwrap();
    }

    #[test]
    fn immutable_globals_sit_on_their_own_pages() {
        let p = plan("#pragma partition 0 rw\nglobal a: int;\nconst global k: bytes[5];\nglobal b: int;");
        let k = p.symbols.iter().find(|s| s.name == "k").unwrap();
        let a = p.symbols.iter().find(|s| s.name == "a").unwrap();
        assert_eq!(k.base % PAGE_SIZE, 0);
        assert_eq!(a.base - k.base, PAGE_SIZE);
        assert_eq!(p.readonly_pages().len(), 1);
        assert_eq!(p.region(PartitionLabel(0), RegionKind::Globals).unwrap().length, 2 * PAGE_SIZE);
    }

    #[test]
    fn emit_sorts_and_round_trips() {
        let mut p = plan("module a { #pragma partition 0 rw global x: int; }\nmodule b { #pragma partition 1 rw }");
        p.regions.reverse();
        let bytes = emit_layout(&p);
        let back = parse_layout(&bytes).unwrap();
        assert!(back.regions.windows(2).all(|w| w[0].base < w[1].base));
        assert_eq!(emit_layout(&back), bytes);
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.contains("\"base\": \"0x1000\""));
    }
}
