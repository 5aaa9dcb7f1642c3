//! Block-paged K/V storage with radix-tree prefix reuse.
//!
//! Every token owns one K row and one V row of `kv_width` floats (all layers
//! and KV heads concatenated). Rows live in fixed-size blocks drawn from a
//! pool. Completed blocks are published into a radix tree whose nodes each
//! hold exactly one block, so later requests can reuse any cached prefix down
//! to a single token: a query that diverges in the middle of a block still
//! reuses the matching head of that block, and the first write past the
//! divergence point copies the block (copy-on-write) instead of touching the
//! cached original.
//!
//! Reference counting has two parts. `ref_count` on a block counts the
//! sequences ([`BlockTable`]s) holding it; a block is additionally held by
//! the tree while it is published. Blocks that are only held by the tree are
//! "cached" and may be evicted, leaf first, in least-recently-used order.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::TokenId;

pub type BlockId = usize;
type NodeId = usize;

const ROOT: NodeId = 0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KvCacheError {
    #[error("K/V pool exhausted: no free block after eviction")]
    PoolExhausted,
    #[error("K/V rows have {got} floats, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid cache configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvCacheConfig {
    /// Tokens per block.
    pub block_size: usize,
    /// Physical blocks in the pool.
    pub pool_blocks: usize,
    /// Upper bound on blocks published in the radix tree.
    pub cache_cap_blocks: usize,
    /// Floats per token per K (and per V) row.
    pub kv_width: usize,
}

impl Default for KvCacheConfig {
    fn default() -> Self {
        Self {
            block_size: 128,
            pool_blocks: 4096,
            cache_cap_blocks: 4096,
            kv_width: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct KvBlock {
    token_count: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    ref_count: usize,
    node: Option<NodeId>,
}

#[derive(Debug, Clone)]
struct RadixNode {
    key: Vec<TokenId>,
    block: Option<BlockId>,
    parent: Option<NodeId>,
    /// Keyed by the child's full token key; all keys of one node are distinct.
    children: BTreeMap<Vec<TokenId>, NodeId>,
    last_used: u64,
}

/// One sequence's view of the cache: its tokens and the blocks holding them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockTable {
    seq_id: u64,
    blocks: Vec<BlockId>,
    /// Tree node for each block, when the block is published in the tree.
    nodes: Vec<Option<NodeId>>,
    tokens: Vec<TokenId>,
}

impl BlockTable {
    pub fn seq_id(&self) -> u64 {
        self.seq_id
    }

    pub fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Number of valid tokens (the sequence's kvLen).
    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Valid tokens in the last block as seen by this sequence.
    pub fn last_block_tokens(&self, block_size: usize) -> usize {
        match self.tokens.len() {
            0 => 0,
            n => n - block_size * (self.blocks.len() - 1),
        }
    }
}

/// Result of [`RadixKvCache::match_prefix`]. The caller owns one reference on
/// every returned block and must hand the match to
/// [`RadixKvCache::start_sequence`] or [`RadixKvCache::release_match`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixMatch {
    pub matched_len: usize,
    pub blocks: Vec<BlockId>,
    nodes: Vec<NodeId>,
    tokens: Vec<TokenId>,
}

/// Block accounting; the three counts always sum to the pool size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub free: usize,
    /// Held by at least one sequence.
    pub referenced: usize,
    /// Held only by the radix tree.
    pub cached: usize,
}

#[derive(Debug, Clone)]
pub struct RadixKvCache {
    config: KvCacheConfig,
    blocks: Vec<KvBlock>,
    free: Vec<BlockId>,
    nodes: Vec<Option<RadixNode>>,
    free_nodes: Vec<NodeId>,
    tree_blocks: usize,
    clock: u64,
}

impl RadixKvCache {
    pub fn new(config: KvCacheConfig) -> Result<Self, KvCacheError> {
        if config.block_size == 0 {
            return Err(KvCacheError::InvalidConfig("block_size must be >= 1"));
        }
        if config.pool_blocks == 0 {
            return Err(KvCacheError::InvalidConfig("pool_blocks must be >= 1"));
        }
        let blocks = (0..config.pool_blocks)
            .map(|_| KvBlock {
                token_count: 0,
                keys: Vec::new(),
                values: Vec::new(),
                ref_count: 0,
                node: None,
            })
            .collect();
        // Pop from the back hands out the lowest ids first.
        let free = (0..config.pool_blocks).rev().collect();
        let root = RadixNode {
            key: Vec::new(),
            block: None,
            parent: None,
            children: BTreeMap::new(),
            last_used: 0,
        };
        Ok(Self {
            config,
            blocks,
            free,
            nodes: vec![Some(root)],
            free_nodes: Vec::new(),
            tree_blocks: 0,
            clock: 0,
        })
    }

    pub fn config(&self) -> &KvCacheConfig {
        &self.config
    }

    pub fn block_size(&self) -> usize {
        self.config.block_size
    }

    pub fn kv_width(&self) -> usize {
        self.config.kv_width
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn node(&self, id: NodeId) -> &RadixNode {
        self.nodes[id].as_ref().expect("dangling radix node")
    }

    fn node_mut(&mut self, id: NodeId) -> &mut RadixNode {
        self.nodes[id].as_mut().expect("dangling radix node")
    }

    /// Longest cached prefix of `tokens`, descending only through fully
    /// matching blocks. A block that matches only partially ends the walk
    /// and is returned with the matched head valid.
    pub fn match_prefix(&mut self, tokens: &[TokenId]) -> PrefixMatch {
        let now = self.tick();
        let mut node = ROOT;
        let mut pos = 0;
        let mut blocks = Vec::new();
        let mut nodes = Vec::new();
        while pos < tokens.len() {
            let rest = &tokens[pos..];
            let Some((child, common)) = self.best_child(node, rest) else {
                break;
            };
            let block = self.node(child).block.expect("non-root node without block");
            self.node_mut(child).last_used = now;
            self.blocks[block].ref_count += 1;
            blocks.push(block);
            nodes.push(child);
            pos += common;
            if common < self.node(child).key.len() {
                break;
            }
            node = child;
        }
        PrefixMatch {
            matched_len: pos,
            blocks,
            nodes,
            tokens: tokens[..pos].to_vec(),
        }
    }

    /// Child of `node` sharing the longest non-empty common prefix with `rest`.
    fn best_child(&self, node: NodeId, rest: &[TokenId]) -> Option<(NodeId, usize)> {
        let first = rest[0];
        let lo = vec![first];
        let mut best: Option<(NodeId, usize)> = None;
        for (key, &child) in self.node(node).children.range(lo..) {
            if key[0] != first {
                break;
            }
            let common = key.iter().zip(rest).take_while(|(a, b)| a == b).count();
            if best.is_none_or(|(_, c)| common > c) {
                best = Some((child, common));
            }
        }
        best
    }

    /// Drops the references taken by a match that will not be used.
    pub fn release_match(&mut self, m: PrefixMatch) {
        for b in m.blocks {
            self.decref(b);
        }
    }

    /// Starts a sequence on top of a prefix match.
    pub fn start_sequence(&mut self, seq_id: u64, m: PrefixMatch) -> BlockTable {
        let bs = self.config.block_size;
        let n = m.blocks.len();
        let nodes = m
            .nodes
            .iter()
            .enumerate()
            .map(|(i, &node)| {
                // A partially matched last block is not this sequence's node.
                let full = i + 1 < n || m.matched_len == n * bs;
                full.then_some(node)
            })
            .collect();
        BlockTable {
            seq_id,
            blocks: m.blocks,
            nodes,
            tokens: m.tokens,
        }
    }

    pub fn empty_sequence(&self, seq_id: u64) -> BlockTable {
        BlockTable {
            seq_id,
            blocks: Vec::new(),
            nodes: Vec::new(),
            tokens: Vec::new(),
        }
    }

    /// Shares every block of `table` with a new sequence.
    pub fn fork(&mut self, table: &BlockTable, seq_id: u64) -> BlockTable {
        for &b in &table.blocks {
            self.blocks[b].ref_count += 1;
        }
        BlockTable {
            seq_id,
            ..table.clone()
        }
    }

    /// Appends tokens with their K/V rows (`kv_width` floats per token each).
    ///
    /// A write into a last block that is shared or published first copies it.
    /// Blocks that become full are published in the radix tree. On
    /// `PoolExhausted` the tokens before the failing one stay committed.
    pub fn commit_tokens(
        &mut self,
        table: &mut BlockTable,
        new_tokens: &[TokenId],
        new_k: &[f32],
        new_v: &[f32],
    ) -> Result<(), KvCacheError> {
        let width = self.config.kv_width;
        let expected = new_tokens.len() * width;
        for got in [new_k.len(), new_v.len()] {
            if got != expected {
                return Err(KvCacheError::ShapeMismatch { expected, got });
            }
        }
        if new_tokens.is_empty() {
            return Ok(());
        }
        let now = self.tick();
        let bs = self.config.block_size;
        for (i, &token) in new_tokens.iter().enumerate() {
            let slot = table.tokens.len() % bs;
            if slot == 0 {
                let b = self.allocate()?;
                table.blocks.push(b);
                table.nodes.push(None);
            } else {
                let idx = table.blocks.len() - 1;
                let last = table.blocks[idx];
                if self.blocks[last].ref_count > 1 || self.blocks[last].node.is_some() {
                    let copy = self.allocate()?;
                    self.copy_rows(last, copy, slot);
                    self.decref(last);
                    table.blocks[idx] = copy;
                    table.nodes[idx] = None;
                }
            }
            let b = *table.blocks.last().expect("block allocated above");
            let block = &mut self.blocks[b];
            block.keys[slot * width..(slot + 1) * width].copy_from_slice(&new_k[i * width..(i + 1) * width]);
            block.values[slot * width..(slot + 1) * width].copy_from_slice(&new_v[i * width..(i + 1) * width]);
            block.token_count = slot + 1;
            table.tokens.push(token);
            if slot + 1 == bs {
                self.publish(table, table.blocks.len() - 1, now);
            }
        }
        Ok(())
    }

    /// Shrinks a sequence to its first `len` tokens.
    pub fn truncate(&mut self, table: &mut BlockTable, len: usize) {
        if len >= table.tokens.len() {
            return;
        }
        let keep = len.div_ceil(self.config.block_size);
        for b in table.blocks.drain(keep..) {
            self.decref(b);
        }
        table.nodes.truncate(keep);
        table.tokens.truncate(len);
    }

    /// Ends a sequence. Published blocks stay cached; private ones are freed.
    pub fn release(&mut self, table: BlockTable) {
        for b in table.blocks {
            self.decref(b);
        }
    }

    /// Evicts up to `needed` cached leaf blocks in ascending `last_used`
    /// order. Nodes whose block is held by a sequence are never evicted; a
    /// parent becomes a candidate once its last child is gone.
    pub fn evict(&mut self, needed: usize) -> usize {
        let mut freed = 0;
        while freed < needed {
            let victim = self
                .nodes
                .iter()
                .enumerate()
                .skip(1)
                .filter_map(|(id, n)| n.as_ref().map(|n| (id, n)))
                .filter(|(_, n)| n.children.is_empty() && n.block.is_some_and(|b| self.blocks[b].ref_count == 0))
                .min_by_key(|(id, n)| (n.last_used, *id))
                .map(|(id, _)| id);
            let Some(id) = victim else { break };
            self.remove_leaf(id);
            freed += 1;
        }
        freed
    }

    fn remove_leaf(&mut self, id: NodeId) {
        let node = self.nodes[id].take().expect("evicting dangling node");
        let parent = node.parent.expect("evicting root");
        self.node_mut(parent).children.remove(&node.key);
        self.free_nodes.push(id);
        self.tree_blocks -= 1;
        let b = node.block.expect("leaf without block");
        self.blocks[b].node = None;
        self.free_block(b);
    }

    fn allocate(&mut self) -> Result<BlockId, KvCacheError> {
        if self.free.is_empty() {
            self.evict(1);
        }
        let b = self.free.pop().ok_or(KvCacheError::PoolExhausted)?;
        let len = self.config.block_size * self.config.kv_width;
        let block = &mut self.blocks[b];
        block.keys.resize(len, 0.0);
        block.values.resize(len, 0.0);
        block.token_count = 0;
        block.ref_count = 1;
        block.node = None;
        Ok(b)
    }

    fn copy_rows(&mut self, from: BlockId, to: BlockId, rows: usize) {
        let n = rows * self.config.kv_width;
        let (keys, values) = {
            let src = &self.blocks[from];
            (src.keys[..n].to_vec(), src.values[..n].to_vec())
        };
        let dst = &mut self.blocks[to];
        dst.keys[..n].copy_from_slice(&keys);
        dst.values[..n].copy_from_slice(&values);
        dst.token_count = rows;
    }

    fn decref(&mut self, b: BlockId) {
        let block = &mut self.blocks[b];
        debug_assert!(block.ref_count > 0, "decref of unreferenced block {b}");
        block.ref_count -= 1;
        if block.ref_count == 0 && block.node.is_none() {
            self.free_block(b);
        }
    }

    fn free_block(&mut self, b: BlockId) {
        self.blocks[b].token_count = 0;
        self.free.push(b);
    }

    /// Publishes the full block `idx` of `table` under its predecessor's node.
    fn publish(&mut self, table: &mut BlockTable, idx: usize, now: u64) {
        let parent = if idx == 0 { Some(ROOT) } else { table.nodes[idx - 1] };
        let Some(parent) = parent else { return };
        let bs = self.config.block_size;
        let key = table.tokens[idx * bs..(idx + 1) * bs].to_vec();
        if self.node(parent).children.contains_key(&key) {
            // An identical block is already cached; keep ours private.
            return;
        }
        if self.tree_blocks >= self.config.cache_cap_blocks {
            self.evict(1);
            if self.tree_blocks >= self.config.cache_cap_blocks {
                return;
            }
        }
        let block = table.blocks[idx];
        let node = RadixNode {
            key: key.clone(),
            block: Some(block),
            parent: Some(parent),
            children: BTreeMap::new(),
            last_used: now,
        };
        let id = match self.free_nodes.pop() {
            Some(id) => {
                self.nodes[id] = Some(node);
                id
            }
            None => {
                self.nodes.push(Some(node));
                self.nodes.len() - 1
            }
        };
        self.node_mut(parent).children.insert(key, id);
        self.blocks[block].node = Some(id);
        self.tree_blocks += 1;
        table.nodes[idx] = Some(id);
    }

    /// K row of token `pos` of `table`.
    #[inline]
    pub fn key_row(&self, table: &BlockTable, pos: usize) -> &[f32] {
        let (b, slot) = self.locate(table, pos);
        let w = self.config.kv_width;
        &self.blocks[b].keys[slot * w..(slot + 1) * w]
    }

    /// V row of token `pos` of `table`.
    #[inline]
    pub fn value_row(&self, table: &BlockTable, pos: usize) -> &[f32] {
        let (b, slot) = self.locate(table, pos);
        let w = self.config.kv_width;
        &self.blocks[b].values[slot * w..(slot + 1) * w]
    }

    #[inline]
    fn locate(&self, table: &BlockTable, pos: usize) -> (BlockId, usize) {
        assert!(pos < table.tokens.len(), "position {pos} beyond sequence");
        let bs = self.config.block_size;
        (table.blocks[pos / bs], pos % bs)
    }

    pub fn ref_count(&self, b: BlockId) -> usize {
        self.blocks[b].ref_count
    }

    /// Tokens physically stored in block `b`.
    pub fn block_token_count(&self, b: BlockId) -> usize {
        self.blocks[b].token_count
    }

    pub fn is_cached(&self, b: BlockId) -> bool {
        self.blocks[b].node.is_some()
    }

    pub fn tree_block_count(&self) -> usize {
        self.tree_blocks
    }

    pub fn stats(&self) -> CacheStats {
        let mut stats = CacheStats {
            free: self.free.len(),
            ..CacheStats::default()
        };
        for b in &self.blocks {
            if b.ref_count > 0 {
                stats.referenced += 1;
            } else if b.node.is_some() {
                stats.cached += 1;
            }
        }
        stats
    }

    /// Every cached root path as its token sequence, in tree order.
    pub fn cached_paths(&self) -> Vec<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut stack = vec![(ROOT, Vec::new())];
        while let Some((id, prefix)) = stack.pop() {
            let node = self.node(id);
            if node.children.is_empty() && id != ROOT {
                out.push(prefix.clone());
            }
            for (key, &child) in node.children.iter().rev() {
                let mut p = prefix.clone();
                p.extend_from_slice(key);
                stack.push((child, p));
            }
        }
        out
    }

    /// Checks structural invariants; returns a description of the first
    /// violation found.
    pub fn validate(&self) -> Result<(), String> {
        let stats = self.stats();
        if stats.free + stats.referenced + stats.cached != self.config.pool_blocks {
            return Err(format!("block accounting {stats:?} does not sum to pool size"));
        }
        let mut reachable = 0;
        let mut stack = vec![ROOT];
        while let Some(id) = stack.pop() {
            let node = self.nodes[id].as_ref().ok_or(format!("dangling node {id}"))?;
            for (key, &child) in &node.children {
                let c = self.nodes[child]
                    .as_ref()
                    .ok_or(format!("node {id} links evicted child {child}"))?;
                if &c.key != key || c.parent != Some(id) {
                    return Err(format!("child {child} of {id} has inconsistent key/parent"));
                }
                if c.key.len() != self.config.block_size {
                    return Err(format!("node {child} holds a partial block"));
                }
                let b = c.block.ok_or(format!("node {child} without block"))?;
                if self.blocks[b].node != Some(child) {
                    return Err(format!("block {b} does not point back at node {child}"));
                }
                if self.free.contains(&b) {
                    return Err(format!("node {child} holds freed block {b}"));
                }
                reachable += 1;
                stack.push(child);
            }
        }
        if reachable != self.tree_blocks {
            return Err(format!(
                "{reachable} reachable nodes but {} published blocks",
                self.tree_blocks
            ));
        }
        Ok(())
    }
}
