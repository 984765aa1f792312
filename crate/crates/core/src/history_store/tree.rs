//! Reward-weighted generalized suffix tree over one prompt's responses.
//!
//! Construction runs Ukkonen's algorithm over the concatenation
//! `r0 $0 r1 $1 ...` where every `$i` is a symbol outside the vocabulary, so
//! any path containing a terminator is unique and lives on a leaf edge. The
//! result is then frozen into an immutable arena whose edges are cut at the
//! first terminator. A node whose path is a suffix of some response carries
//! that response's reward as its `end_weight`; its `priority` is the end
//! weight plus the priorities of its children. Equivalently, the priority of
//! a path is the reward-weighted number of its occurrences in the corpus.

use rustc_hash::FxHashMap;
use serde::Serialize;

use super::{HistoryError, PromptId, Response};
use crate::TokenId;

const ROOT: u32 = 0;
const OPEN_END: usize = usize::MAX;
/// Placeholder written into the frozen token buffer at terminator slots.
const TERMINATOR_SLOT: TokenId = TokenId::MAX;

struct BuildNode {
    start: usize,
    end: usize,
    link: u32,
}

/// Linear-time (amortized) construction of the physical suffix tree.
struct Builder {
    text: Vec<u64>,
    nodes: Vec<BuildNode>,
    edges: FxHashMap<(u32, u64), u32>,
}

impl Builder {
    fn new(text: Vec<u64>) -> Self {
        let cap = 2 * text.len() + 1;
        let mut nodes = Vec::with_capacity(cap);
        nodes.push(BuildNode { start: 0, end: 0, link: ROOT });
        let mut edges = FxHashMap::default();
        edges.reserve(cap);
        Self { text, nodes, edges }
    }

    fn edge_len(&self, node: u32, pos: usize) -> usize {
        let n = &self.nodes[node as usize];
        let end = if n.end == OPEN_END { pos + 1 } else { n.end };
        end - n.start
    }

    fn push(&mut self, start: usize, end: usize) -> u32 {
        self.nodes.push(BuildNode { start, end, link: ROOT });
        (self.nodes.len() - 1) as u32
    }

    fn build(mut self) -> Self {
        let mut active_node = ROOT;
        let mut active_edge = 0usize;
        let mut active_len = 0usize;
        let mut remaining = 0usize;

        for i in 0..self.text.len() {
            remaining += 1;
            let mut last_internal: Option<u32> = None;
            while remaining > 0 {
                if active_len == 0 {
                    active_edge = i;
                }
                let c = self.text[active_edge];
                match self.edges.get(&(active_node, c)).copied() {
                    None => {
                        let leaf = self.push(i, OPEN_END);
                        self.edges.insert((active_node, c), leaf);
                        if let Some(prev) = last_internal.take() {
                            self.nodes[prev as usize].link = active_node;
                        }
                    }
                    Some(next) => {
                        let len = self.edge_len(next, i);
                        if active_len >= len {
                            active_edge += len;
                            active_len -= len;
                            active_node = next;
                            continue;
                        }
                        let next_start = self.nodes[next as usize].start;
                        if self.text[next_start + active_len] == self.text[i] {
                            if let Some(prev) = last_internal.take() {
                                if active_node != ROOT {
                                    self.nodes[prev as usize].link = active_node;
                                }
                            }
                            active_len += 1;
                            break;
                        }
                        let split = self.push(next_start, next_start + active_len);
                        self.edges.insert((active_node, c), split);
                        let leaf = self.push(i, OPEN_END);
                        self.edges.insert((split, self.text[i]), leaf);
                        self.nodes[next as usize].start += active_len;
                        let moved = self.text[self.nodes[next as usize].start];
                        self.edges.insert((split, moved), next);
                        if let Some(prev) = last_internal {
                            self.nodes[prev as usize].link = split;
                        }
                        last_internal = Some(split);
                    }
                }
                remaining -= 1;
                if active_node == ROOT && active_len > 0 {
                    active_len -= 1;
                    active_edge = i + 1 - remaining;
                } else if active_node != ROOT {
                    active_node = self.nodes[active_node as usize].link;
                }
            }
        }
        self
    }
}

#[derive(Debug, Clone)]
struct Node {
    label_start: u32,
    label_len: u32,
    first_child: u32,
    child_count: u32,
    priority: f64,
    end_weight: f64,
    suffix_end: bool,
}

/// A position in the tree: `offset` tokens into the edge leading to `node`.
///
/// `offset == label_len` means the position is exactly at `node`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchHandle {
    node: u32,
    offset: u32,
}

impl MatchHandle {
    /// True when the matched path ends exactly at a tree node.
    pub fn at_node(&self, tree: &SuffixTree) -> bool {
        self.offset == tree.nodes[self.node as usize].label_len
    }
}

/// Tokens drafted from the tree for one lookup.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DraftResult {
    pub tokens: Vec<TokenId>,
    pub matched_prefix_len: usize,
    /// Priority of the position the prefix matched (0 when unmatched).
    pub source_priority: f64,
}

impl DraftResult {
    fn empty() -> Self {
        Self { tokens: Vec::new(), matched_prefix_len: 0, source_priority: 0.0 }
    }
}

/// Immutable per-prompt suffix tree for one epoch of responses.
#[derive(Debug, Clone)]
pub struct SuffixTree {
    prompt_id: PromptId,
    epoch: u32,
    tokens: Vec<TokenId>,
    nodes: Vec<Node>,
    children: Vec<(TokenId, u32)>,
    total_tokens: usize,
    responses: usize,
}

/// Summary numbers of one tree, exported as JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeStats {
    pub prompt_id: PromptId,
    pub epoch: u32,
    pub responses: usize,
    pub total_tokens: usize,
    pub node_count: usize,
    pub root_priority: f64,
    pub approx_bytes: usize,
}

impl SuffixTree {
    /// Index `responses` (all from `prompt_id`) into a new tree.
    pub fn build(prompt_id: PromptId, epoch: u32, responses: &[Response]) -> Result<Self, HistoryError> {
        for (index, r) in responses.iter().enumerate() {
            if r.prompt_id != prompt_id {
                return Err(HistoryError::MixedPrompt { expected: prompt_id, found: r.prompt_id.clone() });
            }
            if !r.reward.is_finite() {
                return Err(HistoryError::NonFiniteReward { index });
            }
            if r.tokens.is_empty() {
                return Err(HistoryError::EmptyResponse { index });
            }
        }

        let total_tokens: usize = responses.iter().map(|r| r.tokens.len()).sum();
        let mut text = Vec::with_capacity(total_tokens + responses.len());
        // owner[p]: response owning text position p; term_at[r]: its terminator slot.
        let mut owner = Vec::with_capacity(total_tokens + responses.len());
        let mut term_at = Vec::with_capacity(responses.len());
        for (ri, r) in responses.iter().enumerate() {
            text.extend(r.tokens.iter().map(|&t| t as u64));
            owner.extend(std::iter::repeat_n(ri as u32, r.tokens.len() + 1));
            term_at.push(text.len());
            text.push((1u64 << 32) + ri as u64);
        }

        let built = Builder::new(text).build();
        let rewards: Vec<f64> = responses.iter().map(|r| r.reward).collect();
        Ok(Self::freeze(prompt_id, epoch, built, &owner, &term_at, &rewards, total_tokens))
    }

    fn freeze(
        prompt_id: PromptId,
        epoch: u32,
        built: Builder,
        owner: &[u32],
        term_at: &[usize],
        rewards: &[f64],
        total_tokens: usize,
    ) -> Self {
        let text_len = built.text.len();
        // Bucket edges by parent, then order each node's edges by symbol.
        let mut adjacency_start = vec![0usize; built.nodes.len() + 1];
        for &(p, _) in built.edges.keys() {
            adjacency_start[p as usize + 1] += 1;
        }
        for i in 1..adjacency_start.len() {
            adjacency_start[i] += adjacency_start[i - 1];
        }
        let mut fill = adjacency_start.clone();
        let mut edges = vec![(0u64, 0u32); built.edges.len()];
        for (&(p, sym), &c) in &built.edges {
            edges[fill[p as usize]] = (sym, c);
            fill[p as usize] += 1;
        }
        for w in adjacency_start.windows(2) {
            edges[w[0]..w[1]].sort_unstable_by_key(|&(sym, _)| sym);
        }

        let tokens: Vec<TokenId> =
            built.text.iter().map(|&s| if s >> 32 == 0 { s as TokenId } else { TERMINATOR_SLOT }).collect();

        let mut nodes = vec![Node {
            label_start: 0,
            label_len: 0,
            first_child: 0,
            child_count: 0,
            priority: 0.0,
            end_weight: 0.0,
            suffix_end: false,
        }];
        let mut children: Vec<(TokenId, u32)> = Vec::new();
        // (physical id, logical id) pairs whose children still need laying out.
        let mut stack = vec![(ROOT, 0u32)];
        while let Some((phys, logical)) = stack.pop() {
            let first_child = children.len() as u32;
            let mut end_weight = 0.0;
            let mut ends_here = false;
            let out = &edges[adjacency_start[phys as usize]..adjacency_start[phys as usize + 1]];
            for &(sym, child) in out {
                let cn = &built.nodes[child as usize];
                if sym >> 32 != 0 {
                    // Terminator edge: the parent path is a suffix of that response.
                    if phys != ROOT {
                        end_weight += rewards[(sym - (1u64 << 32)) as usize];
                        ends_here = true;
                    }
                    continue;
                }
                let end = if cn.end == OPEN_END { term_at[owner[cn.start] as usize] } else { cn.end };
                debug_assert!(end <= text_len && end > cn.start);
                let leaf_weight = if cn.end == OPEN_END { rewards[owner[cn.start] as usize] } else { 0.0 };
                let id = nodes.len() as u32;
                nodes.push(Node {
                    label_start: cn.start as u32,
                    label_len: (end - cn.start) as u32,
                    first_child: 0,
                    child_count: 0,
                    priority: 0.0,
                    end_weight: leaf_weight,
                    suffix_end: cn.end == OPEN_END,
                });
                children.push((sym as TokenId, id));
                stack.push((child, id));
            }
            let n = &mut nodes[logical as usize];
            n.first_child = first_child;
            n.child_count = children.len() as u32 - first_child;
            n.end_weight += end_weight;
            n.suffix_end |= ends_here;
        }

        // Children always have larger ids than their parent, so a reverse sweep is post-order.
        for id in (0..nodes.len()).rev() {
            let (first, count) = (nodes[id].first_child as usize, nodes[id].child_count as usize);
            let child_sum: f64 = children[first..first + count].iter().map(|&(_, c)| nodes[c as usize].priority).sum();
            nodes[id].priority = nodes[id].end_weight + child_sum;
        }

        Self { prompt_id, epoch, tokens, nodes, children, total_tokens, responses: rewards.len() }
    }

    pub fn prompt_id(&self) -> &PromptId {
        &self.prompt_id
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    pub fn response_count(&self) -> usize {
        self.responses
    }

    /// Logical node count, root included.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root_priority(&self) -> f64 {
        self.nodes[ROOT as usize].priority
    }

    pub fn approx_bytes(&self) -> usize {
        self.tokens.len() * std::mem::size_of::<TokenId>()
            + self.nodes.len() * std::mem::size_of::<Node>()
            + self.children.len() * std::mem::size_of::<(TokenId, u32)>()
    }

    pub fn stats(&self) -> TreeStats {
        TreeStats {
            prompt_id: self.prompt_id.clone(),
            epoch: self.epoch,
            responses: self.responses,
            total_tokens: self.total_tokens,
            node_count: self.node_count(),
            root_priority: self.root_priority(),
            approx_bytes: self.approx_bytes(),
        }
    }

    fn child_slice(&self, node: u32) -> &[(TokenId, u32)] {
        let n = &self.nodes[node as usize];
        &self.children[n.first_child as usize..(n.first_child + n.child_count) as usize]
    }

    fn child(&self, node: u32, token: TokenId) -> Option<u32> {
        let kids = self.child_slice(node);
        kids.binary_search_by_key(&token, |&(t, _)| t).ok().map(|i| kids[i].1)
    }

    fn label(&self, node: u32) -> &[TokenId] {
        let n = &self.nodes[node as usize];
        &self.tokens[n.label_start as usize..(n.label_start + n.label_len) as usize]
    }

    /// Walk `query` from the root as far as it matches. Returns the number of
    /// tokens matched and the handle of the final position (None if zero).
    fn walk(&self, query: &[TokenId]) -> (usize, Option<MatchHandle>) {
        let mut node = ROOT;
        let mut matched = 0;
        let mut handle = None;
        while matched < query.len() {
            let Some(next) = self.child(node, query[matched]) else { break };
            let label = self.label(next);
            let common = label.iter().zip(&query[matched..]).take_while(|(a, b)| a == b).count();
            matched += common;
            handle = Some(MatchHandle { node: next, offset: common as u32 });
            if common < label.len() {
                break;
            }
            node = next;
        }
        (matched, handle)
    }

    /// Locate `prefix` as a substring of some indexed response.
    pub fn match_prefix(&self, prefix: &[TokenId]) -> Option<MatchHandle> {
        if prefix.is_empty() {
            return None;
        }
        match self.walk(prefix) {
            (m, h) if m == prefix.len() => h,
            _ => None,
        }
    }

    /// Length of the longest prefix of `query` that occurs in the corpus.
    pub fn longest_match(&self, query: &[TokenId]) -> usize {
        self.walk(query).0
    }

    /// Priority of the path ending at `handle` (reward-weighted occurrence count).
    pub fn priority_at(&self, handle: MatchHandle) -> f64 {
        self.nodes[handle.node as usize].priority
    }

    /// Whether the path at `handle` is a complete suffix of some response.
    pub fn is_suffix_end(&self, handle: MatchHandle) -> bool {
        handle.at_node(self) && self.suffix_ends_at(handle.node)
    }

    fn suffix_ends_at(&self, node: u32) -> bool {
        self.nodes[node as usize].suffix_end
    }

    /// Greedy max-priority continuation after `handle`, at most `window` tokens.
    /// Ties between children go to the smallest first token.
    pub fn continuation(&self, handle: MatchHandle, window: usize) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(window.min(64));
        let mut node = handle.node;
        let rest = &self.label(node)[handle.offset as usize..];
        out.extend(rest.iter().take(window));
        while out.len() < window {
            let mut best: Option<(f64, u32)> = None;
            for &(_, c) in self.child_slice(node) {
                let p = self.nodes[c as usize].priority;
                if best.is_none_or(|(bp, _)| p > bp) {
                    best = Some((p, c));
                }
            }
            let Some((_, c)) = best else { break };
            let need = window - out.len();
            out.extend(self.label(c).iter().take(need));
            node = c;
        }
        out
    }

    /// Draft up to `window` tokens following `prefix`.
    pub fn extract_draft(&self, prefix: &[TokenId], window: usize) -> DraftResult {
        match self.match_prefix(prefix) {
            Some(h) if window > 0 => DraftResult {
                tokens: self.continuation(h, window),
                matched_prefix_len: prefix.len(),
                source_priority: self.priority_at(h),
            },
            _ => DraftResult::empty(),
        }
    }

    /// Check the structural invariants; returns a description of the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.node_count() > 2 * self.total_tokens + 1 {
            return Err(format!("{} nodes for {} tokens", self.node_count(), self.total_tokens));
        }
        for (id, n) in self.nodes.iter().enumerate() {
            let kids = self.child_slice(id as u32);
            for w in kids.windows(2) {
                if w[0].0 >= w[1].0 {
                    return Err(format!("node {id}: child tokens not strictly increasing"));
                }
            }
            for &(t, c) in kids {
                if self.label(c).first() != Some(&t) {
                    return Err(format!("node {c}: key does not match edge label"));
                }
                if self.label(c).contains(&TERMINATOR_SLOT) {
                    return Err(format!("node {c}: terminator inside label"));
                }
            }
            let sum: f64 = kids.iter().map(|&(_, c)| self.nodes[c as usize].priority).sum();
            if (n.priority - (n.end_weight + sum)).abs() > 1e-9 * (1.0 + n.priority.abs()) {
                return Err(format!("node {id}: priority {} != {} + {}", n.priority, n.end_weight, sum));
            }
            if id != 0 && n.child_count <= 1 && !n.suffix_end {
                return Err(format!("node {id}: non-branching node that is not a suffix end"));
            }
        }
        Ok(())
    }
}
