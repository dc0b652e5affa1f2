//! First-fit allocator over one partition's heap region.
//!
//! Block headers live in this table rather than in simulated memory, which
//! keeps them out of reach of application partitions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub const BLOCK_ALIGN: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeapError {
    InvalidSize,
    OutOfMemory,
    DoubleFree,
    InvalidFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub addr: u64,
    /// Bytes requested.
    pub size: u64,
    /// Bytes reserved, a multiple of the alignment.
    pub span: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeapAllocator {
    base: u64,
    end: u64,
    live: BTreeMap<u64, Block>,
    /// Free extents, start to length, coalesced.
    free: BTreeMap<u64, u64>,
    /// Addresses freed and not handed out again.
    released: BTreeSet<u64>,
}

impl HeapAllocator {
    pub fn new(base: u64, length: u64) -> Self {
        let mut free = BTreeMap::new();
        if length > 0 {
            free.insert(base, length);
        }
        HeapAllocator { base, end: base + length, live: BTreeMap::new(), free, released: BTreeSet::new() }
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end
    }

    pub fn alloc(&mut self, size: i64) -> Result<Block, HeapError> {
        if size <= 0 {
            return Err(HeapError::InvalidSize);
        }
        let span = (size as u64).checked_next_multiple_of(BLOCK_ALIGN).ok_or(HeapError::OutOfMemory)?;
        let (&start, &len) = self.free.iter().find(|(_, len)| **len >= span).ok_or(HeapError::OutOfMemory)?;
        self.free.remove(&start);
        if len > span {
            self.free.insert(start + span, len - span);
        }
        let block = Block { addr: start, size: size as u64, span };
        self.live.insert(start, block);
        self.released.remove(&start);
        Ok(block)
    }

    /// Release a block. The caller scrubs `block.span` bytes.
    pub fn free(&mut self, addr: u64) -> Result<Block, HeapError> {
        let Some(block) = self.live.remove(&addr) else {
            return Err(if self.released.contains(&addr) { HeapError::DoubleFree } else { HeapError::InvalidFree });
        };
        self.released.insert(addr);
        let mut start = block.addr;
        let mut len = block.span;
        if let Some((&prev, &plen)) = self.free.range(..start).next_back() {
            if prev + plen == start {
                self.free.remove(&prev);
                start = prev;
                len += plen;
            }
        }
        if let Some(&nlen) = self.free.get(&(block.addr + block.span)) {
            self.free.remove(&(block.addr + block.span));
            len += nlen;
        }
        self.free.insert(start, len);
        Ok(block)
    }

    pub fn live_block(&self, addr: u64) -> Option<&Block> {
        self.live.range(..=addr).next_back().map(|(_, b)| b).filter(|b| addr < b.addr + b.span)
    }

    pub fn live_blocks(&self) -> impl Iterator<Item = &Block> {
        self.live.values()
    }

    pub fn free_bytes(&self) -> u64 {
        self.free.values().sum()
    }
}
