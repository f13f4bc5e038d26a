//! Paged KV block manager with hash-indexed prefix caching.
//!
//! Free blocks sit in an LRU queue. A block released by its last holder goes
//! to the tail of the queue but keeps its content hash in the prefix index
//! until an allocation pops it from the head and evicts it. Blocks with a
//! non-zero reference count are pinned and never leave the held set.

use std::collections::{BTreeMap, HashMap};

use crate::report::{KvEvent, KvEventKind};

pub type BlockId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvBlock {
    pub block_id: BlockId,
    pub content_hash: u64,
    /// Registered in the prefix index (full prompt blocks only).
    pub cached: bool,
    pub owner_request_id: String,
    pub adapter: String,
    pub ref_count: u32,
    free_seq: Option<u64>,
}

impl KvBlock {
    pub fn pinned(&self) -> bool {
        self.ref_count > 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockCounters {
    pub allocs: u64,
    pub frees: u64,
    pub evicts: u64,
    pub reuses: u64,
    pub prefix_hits: u64,
}

#[derive(Debug, Clone)]
pub struct BlockManager {
    blocks: Vec<KvBlock>,
    free_queue: BTreeMap<u64, BlockId>,
    next_seq: u64,
    index: HashMap<u64, BlockId>,
    events: Vec<KvEvent>,
    counters: BlockCounters,
}

impl BlockManager {
    pub fn new(total_blocks: u32) -> Self {
        let blocks = (0..total_blocks)
            .map(|id| KvBlock {
                block_id: id,
                content_hash: 0,
                cached: false,
                owner_request_id: String::new(),
                adapter: String::new(),
                ref_count: 0,
                free_seq: Some(u64::from(id)),
            })
            .collect();
        let free_queue = (0..total_blocks).map(|id| (u64::from(id), id)).collect();
        Self {
            blocks,
            free_queue,
            next_seq: u64::from(total_blocks),
            index: HashMap::new(),
            events: Vec::new(),
            counters: BlockCounters::default(),
        }
    }

    pub fn total(&self) -> u32 {
        self.blocks.len() as u32
    }

    pub fn free_count(&self) -> u32 {
        self.free_queue.len() as u32
    }

    pub fn held(&self) -> u32 {
        self.total() - self.free_count()
    }

    pub fn occupancy(&self) -> f64 {
        f64::from(self.held()) / f64::from(self.total())
    }

    pub fn counters(&self) -> BlockCounters {
        self.counters
    }

    pub fn block(&self, id: BlockId) -> &KvBlock {
        &self.blocks[id as usize]
    }

    pub fn lookup(&self, hash: u64) -> Option<BlockId> {
        self.index.get(&hash).copied()
    }

    /// True when the block sits in the free queue (cached or never used).
    pub fn is_free(&self, id: BlockId) -> bool {
        self.blocks[id as usize].free_seq.is_some()
    }

    pub fn drain_events(&mut self) -> Vec<KvEvent> {
        std::mem::take(&mut self.events)
    }

    /// Takes the LRU free block for new content, evicting any cached hash.
    pub fn allocate(
        &mut self,
        owner: &str,
        adapter: &str,
        hash: u64,
        cacheable: bool,
        ts: u64,
    ) -> Option<BlockId> {
        let (_, id) = self.free_queue.pop_first()?;
        let block = &mut self.blocks[id as usize];
        block.free_seq = None;
        if block.cached {
            if self.index.get(&block.content_hash) == Some(&id) {
                self.index.remove(&block.content_hash);
            }
            block.cached = false;
            self.counters.evicts += 1;
            self.events.push(KvEvent {
                ts,
                kind: KvEventKind::Evict,
                block_id: id,
                block_hash: block.content_hash,
                owner_request_id: block.owner_request_id.clone(),
                adapter: block.adapter.clone(),
            });
        }
        block.content_hash = hash;
        block.owner_request_id = owner.to_string();
        block.adapter = adapter.to_string();
        block.ref_count = 1;
        if cacheable && !self.index.contains_key(&hash) {
            self.index.insert(hash, id);
            block.cached = true;
        }
        self.counters.allocs += 1;
        self.events.push(KvEvent {
            ts,
            kind: KvEventKind::Alloc,
            block_id: id,
            block_hash: hash,
            owner_request_id: owner.to_string(),
            adapter: adapter.to_string(),
        });
        Some(id)
    }

    /// Attaches `owner` to a block found through the prefix index.
    ///
    /// `expected_hash` is what the caller looked up; it is reported as-is, so a
    /// block whose content changed since the lookup shows up in the stream as
    /// a hit whose hash disagrees with the block's latest alloc.
    pub fn attach(&mut self, id: BlockId, owner: &str, adapter: &str, expected_hash: u64, ts: u64) {
        let block = &mut self.blocks[id as usize];
        let kind = if let Some(seq) = block.free_seq.take() {
            self.free_queue.remove(&seq);
            self.counters.reuses += 1;
            KvEventKind::Reuse
        } else {
            self.counters.prefix_hits += 1;
            KvEventKind::PrefixHit
        };
        block.ref_count += 1;
        self.events.push(KvEvent {
            ts,
            kind,
            block_id: id,
            block_hash: expected_hash,
            owner_request_id: owner.to_string(),
            adapter: adapter.to_string(),
        });
    }

    /// Drops one reference; the last release returns the block to the pool.
    pub fn release(&mut self, id: BlockId, releaser: &str, ts: u64) {
        let block = &mut self.blocks[id as usize];
        debug_assert!(block.ref_count > 0, "release of unpinned block {id}");
        block.ref_count = block.ref_count.saturating_sub(1);
        if block.ref_count == 0 && block.free_seq.is_none() {
            let seq = self.next_seq;
            self.next_seq += 1;
            block.free_seq = Some(seq);
            self.free_queue.insert(seq, id);
            self.counters.frees += 1;
            self.events.push(KvEvent {
                ts,
                kind: KvEventKind::Free,
                block_id: id,
                block_hash: block.content_hash,
                owner_request_id: releaser.to_string(),
                adapter: block.adapter.clone(),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_free_accounting() {
        let mut bm = BlockManager::new(4);
        let a = bm.allocate("r1", "BASE", 11, true, 0).unwrap();
        let b = bm.allocate("r1", "BASE", 12, false, 0).unwrap();
        assert_eq!(bm.held(), 2);
        bm.release(a, "r1", 1);
        bm.release(b, "r1", 1);
        assert_eq!(bm.held(), 0);
        let c = bm.counters();
        assert_eq!(c.allocs + c.reuses - c.frees, u64::from(bm.held()));
    }

    #[test]
    fn cached_block_is_reused_then_hit() {
        let mut bm = BlockManager::new(4);
        let a = bm.allocate("r1", "BASE", 11, true, 0).unwrap();
        bm.release(a, "r1", 1);
        assert_eq!(bm.lookup(11), Some(a));
        bm.attach(a, "r2", "BASE", 11, 2);
        bm.attach(a, "r3", "BASE", 11, 2);
        let kinds: Vec<_> = bm.drain_events().into_iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![
                KvEventKind::Alloc,
                KvEventKind::Free,
                KvEventKind::Reuse,
                KvEventKind::PrefixHit
            ]
        );
        assert_eq!(bm.block(a).ref_count, 2);
    }

    #[test]
    fn full_pool_evicts_lru_cached_block_before_alloc() {
        let mut bm = BlockManager::new(2);
        let a = bm.allocate("r1", "BASE", 1, true, 0).unwrap();
        let b = bm.allocate("r1", "BASE", 2, true, 0).unwrap();
        bm.release(a, "r1", 1);
        bm.release(b, "r1", 1);
        bm.drain_events();
        let c = bm.allocate("r2", "BASE", 3, true, 2).unwrap();
        assert_eq!(c, a, "LRU block is taken first");
        let events = bm.drain_events();
        assert_eq!(events[0].kind, KvEventKind::Evict);
        assert_eq!(events[0].block_hash, 1);
        assert_eq!(events[1].kind, KvEventKind::Alloc);
        assert_eq!(bm.lookup(1), None);
        assert_eq!(bm.lookup(2), Some(b));
    }

    #[test]
    fn pinned_blocks_are_never_allocated() {
        let mut bm = BlockManager::new(1);
        bm.allocate("r1", "BASE", 1, true, 0).unwrap();
        assert!(bm.allocate("r2", "BASE", 2, true, 0).is_none());
    }
}
