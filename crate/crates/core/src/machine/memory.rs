//! Simulated address space: key-tagged pages plus the partition heaps.

use std::collections::BTreeMap;

use crate::instrument::layout::{LayoutPlan, RegionKind};
use crate::lang::ir::IRModule;
use crate::policy::{KeyAssignment, PartitionLabel, ProtectionKey};

use super::heap::{Block, HeapAllocator, HeapError};

#[derive(Debug, Clone)]
struct Page {
    key: ProtectionKey,
    readonly: bool,
    data: Box<[u8]>,
}

/// Page tags and contents. Accessors here never check privileges.
#[derive(Debug, Clone, Default)]
pub struct Memory {
    page_size: u64,
    pages: BTreeMap<u64, Page>,
}

impl Memory {
    pub fn new(page_size: u64) -> Self {
        Memory { page_size, pages: BTreeMap::new() }
    }

    /// Tag `[base, base+length)` with `key`. Fails if any page is already mapped.
    pub fn map(&mut self, base: u64, length: u64, key: ProtectionKey) -> Result<(), u64> {
        let first = base / self.page_size;
        let last = (base + length).div_ceil(self.page_size);
        if let Some((&p, _)) = self.pages.range(first..last).next() {
            return Err(p * self.page_size);
        }
        for p in first..last {
            let data = vec![0u8; self.page_size as usize].into_boxed_slice();
            self.pages.insert(p, Page { key, readonly: false, data });
        }
        Ok(())
    }

    pub fn set_readonly(&mut self, page: u64) {
        if let Some(p) = self.pages.get_mut(&page) {
            p.readonly = true;
        }
    }

    /// Key and read-only flag of the page holding `addr`.
    pub fn tag(&self, addr: u64) -> Option<(ProtectionKey, bool)> {
        self.pages.get(&(addr / self.page_size)).map(|p| (p.key, p.readonly))
    }

    pub fn read(&self, addr: u64) -> Option<u8> {
        let page = self.pages.get(&(addr / self.page_size))?;
        Some(page.data[(addr % self.page_size) as usize])
    }

    pub fn write(&mut self, addr: u64, byte: u8) -> bool {
        match self.pages.get_mut(&(addr / self.page_size)) {
            Some(page) => {
                page.data[(addr % self.page_size) as usize] = byte;
                true
            }
            None => false,
        }
    }

    pub fn fill(&mut self, addr: u64, len: u64, byte: u8) {
        for a in addr..addr + len {
            self.write(a, byte);
        }
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn page_tags(&self) -> impl Iterator<Item = (u64, ProtectionKey)> + '_ {
        self.pages.iter().map(|(p, page)| (*p, page.key))
    }
}

/// One simulated process: layout, memory and heaps.
#[derive(Debug, Clone)]
pub struct Process {
    pub layout: LayoutPlan,
    pub keys: KeyAssignment,
    pub memory: Memory,
    pub heaps: BTreeMap<ProtectionKey, HeapAllocator>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocError {
    UnknownKey,
    Heap(HeapError),
}

impl Process {
    /// Map every region and set up heaps. Errors with the first overlapping address.
    pub fn new(layout: &LayoutPlan, keys: &KeyAssignment) -> Result<Self, u64> {
        let mut memory = Memory::new(layout.page_size);
        let mut heaps = BTreeMap::new();
        for r in &layout.regions {
            memory.map(r.base, r.length, r.key)?;
            if r.kind == RegionKind::Heap {
                heaps.insert(r.key, HeapAllocator::new(r.base, r.length));
            }
        }
        for page in layout.readonly_pages() {
            memory.set_readonly(page);
        }
        Ok(Process { layout: layout.clone(), keys: keys.clone(), memory, heaps })
    }

    /// Write initial values of globals.
    pub fn load_image(&mut self, ir: &IRModule) {
        for g in &ir.globals {
            if let (Some(init), Some(sym)) = (g.init, self.layout.symbol(g.id)) {
                for (i, b) in init.to_le_bytes().iter().enumerate() {
                    self.memory.write(sym.base + i as u64, *b);
                }
            }
        }
    }

    pub fn alloc(&mut self, key: ProtectionKey, size: i64) -> Result<Block, AllocError> {
        let heap = self.heaps.get_mut(&key).ok_or(AllocError::UnknownKey)?;
        heap.alloc(size).map_err(AllocError::Heap)
    }

    /// Free the block at `addr` in whichever heap holds it, scrubbing it to zero.
    pub fn free(&mut self, addr: u64) -> Result<(ProtectionKey, Block), HeapError> {
        let (key, heap) = self.heaps.iter_mut().find(|(_, h)| h.contains(addr)).ok_or(HeapError::InvalidFree)?;
        let block = heap.free(addr)?;
        let key = *key;
        self.memory.fill(block.addr, block.span, 0);
        Ok((key, block))
    }

    /// Partition of the live heap block covering `addr`.
    pub fn heap_object(&self, addr: u64) -> Option<(PartitionLabel, Block)> {
        self.heaps.iter().find_map(|(key, h)| {
            let block = h.live_block(addr)?;
            Some((self.keys.partition_of(*key)?, *block))
        })
    }

    /// Copy `input` into a fresh block of `key`'s heap.
    pub fn place_input(&mut self, key: ProtectionKey, input: &[u8]) -> Result<(u64, u64), AllocError> {
        if input.is_empty() {
            return Ok((0, 0));
        }
        let block = self.alloc(key, input.len() as i64)?;
        for (i, b) in input.iter().enumerate() {
            self.memory.write(block.addr + i as u64, *b);
        }
        Ok((block.addr, input.len() as u64))
    }
}
