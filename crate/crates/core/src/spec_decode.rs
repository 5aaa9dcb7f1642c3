//! Speculative token trees, their ancestor masks, and greedy verification.
//!
//! A tree is stored in topological order with the root at index 0. In the
//! serving loop the root is the pending token (sampled last step, K/V not
//! yet computed) and every other node is a draft continuation of its parent.
//! A linear chain is the sequence-based special case whose mask is plain
//! causal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::TokenId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("speculative tree is empty")]
    Empty,
    #[error("node {0} must name an earlier node as parent")]
    BadParent(usize),
    #[error("node 0 must be the only root")]
    MultipleRoots,
    #[error("target prediction count {got} does not match tree size {expected}")]
    TargetLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecNode {
    pub token: TokenId,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecTree {
    nodes: Vec<SpecNode>,
    depth: Vec<usize>,
}

impl SpecTree {
    pub fn new(nodes: Vec<SpecNode>) -> Result<Self, SpecError> {
        if nodes.is_empty() {
            return Err(SpecError::Empty);
        }
        if nodes[0].parent.is_some() {
            return Err(SpecError::BadParent(0));
        }
        let mut depth = Vec::with_capacity(nodes.len());
        depth.push(0);
        for (i, n) in nodes.iter().enumerate().skip(1) {
            match n.parent {
                None => return Err(SpecError::MultipleRoots),
                Some(p) if p >= i => return Err(SpecError::BadParent(i)),
                Some(p) => depth.push(depth[p] + 1),
            }
        }
        Ok(Self { nodes, depth })
    }

    /// Sequence-based speculation: each token follows the previous one.
    pub fn chain(tokens: &[TokenId]) -> Result<Self, SpecError> {
        Self::new(
            tokens
                .iter()
                .enumerate()
                .map(|(i, &token)| SpecNode {
                    token,
                    parent: i.checked_sub(1),
                })
                .collect(),
        )
    }

    /// Number of nodes (specLen).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[SpecNode] {
        &self.nodes
    }

    pub fn token(&self, i: usize) -> TokenId {
        self.nodes[i].token
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.nodes[i].parent
    }

    /// Distance from the root; node `i` sits at position `kvLen + depth(i)`.
    pub fn depth(&self, i: usize) -> usize {
        self.depth[i]
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.nodes.iter().map(|n| n.token).collect()
    }

    /// Node indices from the root down to `i`.
    pub fn path_to(&self, i: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut cur = i;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn children(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.parent == Some(i))
            .map(|(j, _)| j)
    }

    /// `mask[i][j]` is true iff node `j` is node `i` or one of its ancestors.
    pub fn tree_mask(&self) -> SpecMask {
        let n = self.nodes.len();
        let mut bits = vec![false; n * n];
        for i in 0..n {
            let mut cur = Some(i);
            while let Some(j) = cur {
                bits[i * n + j] = true;
                cur = self.nodes[j].parent;
            }
        }
        SpecMask { n, bits }
    }
}

/// Square boolean mask over the speculative positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecMask {
    n: usize,
    bits: Vec<bool>,
}

impl SpecMask {
    pub fn from_rows(rows: &[Vec<bool>]) -> Self {
        let n = rows.len();
        let mut bits = Vec::with_capacity(n * n);
        for r in rows {
            assert_eq!(r.len(), n, "speculative mask must be square");
            bits.extend_from_slice(r);
        }
        Self { n, bits }
    }

    /// Lower-triangular mask, identical to the causal rule.
    pub fn causal(n: usize) -> Self {
        Self {
            n,
            bits: (0..n * n).map(|k| k % n <= k / n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }
}

/// Longest accepted root path under greedy argmax equality.
///
/// The root is accepted iff its token equals `context_next`, the target's
/// prediction after the committed context; each further node is accepted iff
/// its token equals `target_next` of its parent. Among equal-length paths the
/// one ending at the lowest node index wins.
pub fn verify_accept(tree: &SpecTree, context_next: TokenId, target_next: &[TokenId]) -> Result<Vec<usize>, SpecError> {
    if target_next.len() != tree.len() {
        return Err(SpecError::TargetLength {
            expected: tree.len(),
            got: target_next.len(),
        });
    }
    if tree.token(0) != context_next {
        return Ok(Vec::new());
    }
    // Acceptance only depends on each node's parent, so the accepted set is
    // a subtree; pick its deepest node.
    let mut accepted = vec![false; tree.len()];
    accepted[0] = true;
    let mut best = 0;
    for i in 1..tree.len() {
        let p = tree.parent(i).expect("non-root node has a parent");
        if accepted[p] && tree.token(i) == target_next[p] {
            accepted[i] = true;
            if tree.depth(i) > tree.depth(best) {
                best = i;
            }
        }
    }
    Ok(tree.path_to(best))
}

/// Tokens that become part of the sequence after verification: the accepted
/// path plus the bonus prediction after its last node.
pub fn committed_tokens(
    tree: &SpecTree,
    path: &[usize],
    context_next: TokenId,
    target_next: &[TokenId],
) -> Vec<TokenId> {
    let mut out: Vec<TokenId> = path.iter().map(|&i| tree.token(i)).collect();
    out.push(match path.last() {
        Some(&last) => target_next[last],
        None => context_next,
    });
    out
}

/// Tree shape requested by a trace: a full `width`-ary tree with `depth`
/// draft levels below the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecShape {
    pub width: usize,
    pub depth: usize,
}

impl SpecShape {
    pub fn node_count(&self) -> usize {
        (0..=self.depth).map(|d| self.width.pow(d as u32)).sum()
    }
}

/// Proposes draft continuations of a context.
pub trait DraftProposer {
    /// Up to `width` candidate next tokens after `context`.
    fn propose(&self, context: &[TokenId], width: usize) -> Vec<TokenId>;
}

/// Deterministic proposer: candidates are a seeded hash of the context.
#[derive(Debug, Clone)]
pub struct HashProposer {
    pub seed: u64,
    pub vocab: u32,
}

impl HashProposer {
    pub fn new(seed: u64, vocab: u32) -> Self {
        Self { seed, vocab }
    }
}

/// FNV-1a over the context, mixed with a seed and a salt.
pub fn context_hash(seed: u64, context: &[TokenId], salt: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &t in context {
        h ^= t as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^= salt;
    h = h.wrapping_mul(0x0100_0000_01b3);
    h ^ (h >> 29)
}

impl DraftProposer for HashProposer {
    fn propose(&self, context: &[TokenId], width: usize) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = Vec::with_capacity(width);
        let mut salt = 0;
        while out.len() < width.min(self.vocab as usize) {
            let t = (context_hash(self.seed, context, salt) % self.vocab as u64) as TokenId;
            if !out.contains(&t) {
                out.push(t);
            }
            salt += 1;
        }
        out
    }
}

/// Expands `shape` below `root` breadth-first, asking `proposer` for the
/// children of every node given `context` plus the path to that node.
pub fn build_tree(root: TokenId, context: &[TokenId], shape: SpecShape, proposer: &dyn DraftProposer) -> SpecTree {
    let mut nodes = vec![SpecNode {
        token: root,
        parent: None,
    }];
    let mut frontier = vec![0usize];
    for _ in 0..shape.depth {
        let mut next = Vec::new();
        for &p in &frontier {
            let mut ctx = context.to_vec();
            ctx.extend(path_tokens(&nodes, p));
            for token in proposer.propose(&ctx, shape.width) {
                nodes.push(SpecNode { token, parent: Some(p) });
                next.push(nodes.len() - 1);
            }
        }
        frontier = next;
    }
    SpecTree::new(nodes).expect("breadth-first construction is topological")
}

fn path_tokens(nodes: &[SpecNode], i: usize) -> Vec<TokenId> {
    let mut out = vec![nodes[i].token];
    let mut cur = i;
    while let Some(p) = nodes[cur].parent {
        out.push(nodes[p].token);
        cur = p;
    }
    out.reverse();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(token: TokenId, parent: Option<usize>) -> SpecNode {
        SpecNode { token, parent }
    }

    #[test]
    fn chain_mask_is_causal() {
        let t = SpecTree::chain(&[7, 8, 9]).unwrap();
        assert_eq!(t.tree_mask(), SpecMask::causal(3));
    }

    #[test]
    fn two_children_mask() {
        let t = SpecTree::new(vec![node(1, None), node(2, Some(0)), node(3, Some(0))]).unwrap();
        let expected = SpecMask::from_rows(&[
            vec![true, false, false],
            vec![true, true, false],
            vec![true, false, true],
        ]);
        assert_eq!(t.tree_mask(), expected);
    }

    #[test]
    fn single_node_mask() {
        let t = SpecTree::chain(&[4]).unwrap();
        assert_eq!(t.tree_mask(), SpecMask::from_rows(&[vec![true]]));
    }

    #[test]
    fn rejects_malformed_trees() {
        assert_eq!(SpecTree::new(vec![]), Err(SpecError::Empty));
        assert_eq!(
            SpecTree::new(vec![node(1, None), node(2, Some(1))]),
            Err(SpecError::BadParent(1))
        );
        assert_eq!(
            SpecTree::new(vec![node(1, None), node(2, None)]),
            Err(SpecError::MultipleRoots)
        );
    }

    #[test]
    fn full_chain_accepted() {
        let t = SpecTree::chain(&[5, 6, 7]).unwrap();
        let path = verify_accept(&t, 5, &[6, 7, 9]).unwrap();
        assert_eq!(path, vec![0, 1, 2]);
        assert_eq!(committed_tokens(&t, &path, 5, &[6, 7, 9]), vec![5, 6, 7, 9]);
    }

    #[test]
    fn rejected_root_accepts_nothing() {
        let t = SpecTree::chain(&[5, 6]).unwrap();
        let path = verify_accept(&t, 4, &[6, 1]).unwrap();
        assert!(path.is_empty());
        assert_eq!(committed_tokens(&t, &path, 4, &[6, 1]), vec![4]);
    }

    #[test]
    fn matching_branch_wins() {
        // root(1) -> left 2 -> 4, root -> right 3
        let t = SpecTree::new(vec![
            node(1, None),
            node(2, Some(0)),
            node(3, Some(0)),
            node(4, Some(1)),
        ])
        .unwrap();
        let path = verify_accept(&t, 1, &[2, 4, 0, 0]).unwrap();
        assert_eq!(path, vec![0, 1, 3]);
    }

    #[test]
    fn full_tree_shape() {
        let shape = SpecShape { width: 2, depth: 2 };
        let p = HashProposer::new(3, 50);
        let t = build_tree(9, &[1, 2], shape, &p);
        assert_eq!(t.len(), shape.node_count());
        assert_eq!(t.len(), 7);
        assert_eq!(t.children(0).count(), 2);
        assert_eq!((0..t.len()).map(|i| t.depth(i)).max(), Some(2));
        // Deterministic.
        assert_eq!(t, build_tree(9, &[1, 2], shape, &p));
    }
}
