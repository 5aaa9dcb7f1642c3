//! Token-wise chunk scheduling over prefill, decode and verify queues.
//!
//! Each call to [`Scheduler::schedule_next`] packs at most `budget` tokens.
//! Decode tokens are admitted first, then verify trees, both FIFO. Prefill
//! tokens fill what is left, in arrival order, splitting the last prompt if
//! it does not fit. While decode or verify work is present, prefill may use
//! at most `budget - reserve` slots so that a minimum of slots stays with the
//! latency-sensitive stages from chunk to chunk.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spec_decode::{build_tree, DraftProposer, SpecShape, SpecTree};
use crate::{ReqId, TokenId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("request {0} is not in flight")]
    UnknownRequest(ReqId),
    #[error("request {0} already exists")]
    DuplicateRequest(ReqId),
    #[error("request {0} has an empty prompt")]
    EmptyPrompt(ReqId),
    #[error("request {id}: matched prefix {matched} must be shorter than the prompt ({len})")]
    PrefixTooLong { id: ReqId, matched: usize, len: usize },
    #[error("request {id}: speculative tree of {nodes} tokens exceeds budget {budget}")]
    SpecTooLarge { id: ReqId, nodes: usize, budget: usize },
    #[error("request {0}: missing model output for a finished stage")]
    MissingOutput(ReqId),
    #[error("invalid budget {budget} / reserve {reserve}")]
    InvalidBudget { budget: usize, reserve: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Prefill,
    Decode,
    Verify,
}

impl Stage {
    pub fn letter(self) -> char {
        match self {
            Stage::Prefill => 'P',
            Stage::Decode => 'D',
            Stage::Verify => 'V',
        }
    }

    /// Prefill and decode rows see a causal window; verify rows use the
    /// speculative mask.
    pub fn is_causal(self) -> bool {
        !matches!(self, Stage::Verify)
    }
}

/// A request as submitted to the scheduler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: ReqId,
    pub arrival: u64,
    pub prompt: Vec<TokenId>,
    pub output_len: usize,
    pub spec: Option<SpecShape>,
}

/// One stage instance inside a chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkEntry {
    pub req_id: ReqId,
    pub stage: Stage,
    /// Offset of this entry's first token in the chunk's flat token tensor.
    pub start_pos: usize,
    pub token_num: usize,
    /// Tokens of this request whose K/V is already cached.
    pub kv_len: usize,
    pub tokens: Vec<TokenId>,
    /// Set for the prefill part that completes the prompt.
    pub last_part: bool,
    /// Present for verify entries.
    pub tree: Option<SpecTree>,
}

impl ChunkEntry {
    /// Absolute sequence position of the entry's `i`-th token.
    pub fn position(&self, i: usize) -> usize {
        match &self.tree {
            Some(tree) => self.kv_len + tree.depth(i),
            None => self.kv_len + i,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub entries: Vec<ChunkEntry>,
    pub total_tokens: usize,
}

impl Chunk {
    fn push(&mut self, mut entry: ChunkEntry) {
        entry.start_pos = self.total_tokens;
        self.total_tokens += entry.token_num;
        self.entries.push(entry);
    }

    /// Stage letters present, in P/D/V order (e.g. `"PD"`).
    pub fn composition(&self) -> String {
        [Stage::Prefill, Stage::Decode, Stage::Verify]
            .into_iter()
            .filter(|s| self.entries.iter().any(|e| e.stage == *s))
            .map(Stage::letter)
            .collect()
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.entries.iter().any(|e| e.stage == stage)
    }
}

/// Model result for one chunk entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutput {
    /// Non-final prefill part: nothing sampled.
    Nothing,
    /// Next token after a final prefill part or a decode step.
    Token(TokenId),
    /// Verify result: `accepted` tree nodes had their K/V committed and
    /// `tokens` are newly generated (accepted drafts plus the bonus token).
    Verified { accepted: usize, tokens: Vec<TokenId> },
}

/// What happened to a request when a chunk completed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestEvent {
    pub req_id: ReqId,
    pub new_tokens: Vec<TokenId>,
    pub finished: bool,
}

#[derive(Debug, Clone)]
struct ReqState {
    req: Request,
    stage: Stage,
    kv_len: usize,
    generated: Vec<TokenId>,
    tree: Option<SpecTree>,
    in_flight: bool,
}

impl ReqState {
    fn context(&self) -> Vec<TokenId> {
        let mut c = self.req.prompt.clone();
        c.extend_from_slice(&self.generated);
        c
    }
}

pub struct Scheduler {
    budget: usize,
    reserve: usize,
    prefill_q: VecDeque<ReqId>,
    decode_q: VecDeque<ReqId>,
    verify_q: VecDeque<ReqId>,
    states: BTreeMap<ReqId, ReqState>,
    proposer: Box<dyn DraftProposer>,
}

impl std::fmt::Debug for Scheduler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scheduler")
            .field("budget", &self.budget)
            .field("reserve", &self.reserve)
            .field("prefill_q", &self.prefill_q)
            .field("decode_q", &self.decode_q)
            .field("verify_q", &self.verify_q)
            .finish_non_exhaustive()
    }
}

impl Scheduler {
    pub fn new(budget: usize, reserve: usize, proposer: Box<dyn DraftProposer>) -> Result<Self, SchedulerError> {
        if budget == 0 || reserve >= budget {
            return Err(SchedulerError::InvalidBudget { budget, reserve });
        }
        Ok(Self {
            budget,
            reserve,
            prefill_q: VecDeque::new(),
            decode_q: VecDeque::new(),
            verify_q: VecDeque::new(),
            states: BTreeMap::new(),
            proposer,
        })
    }

    /// Default reserve for a budget.
    pub fn default_reserve(budget: usize) -> usize {
        budget / 4
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn reserve(&self) -> usize {
        self.reserve
    }

    /// Queues a request whose first `matched` prompt tokens are already in
    /// the K/V cache.
    pub fn add_request(&mut self, req: Request, matched: usize) -> Result<(), SchedulerError> {
        if req.prompt.is_empty() {
            return Err(SchedulerError::EmptyPrompt(req.id));
        }
        if matched >= req.prompt.len() {
            return Err(SchedulerError::PrefixTooLong {
                id: req.id,
                matched,
                len: req.prompt.len(),
            });
        }
        if let Some(shape) = req.spec {
            if shape.node_count() > self.budget {
                return Err(SchedulerError::SpecTooLarge {
                    id: req.id,
                    nodes: shape.node_count(),
                    budget: self.budget,
                });
            }
        }
        if self.states.contains_key(&req.id) {
            return Err(SchedulerError::DuplicateRequest(req.id));
        }
        let id = req.id;
        self.states.insert(
            id,
            ReqState {
                req,
                stage: Stage::Prefill,
                kv_len: matched,
                generated: Vec::new(),
                tree: None,
                in_flight: false,
            },
        );
        self.prefill_q.push_back(id);
        Ok(())
    }

    pub fn is_idle(&self) -> bool {
        self.states.is_empty()
    }

    pub fn active_requests(&self) -> usize {
        self.states.len()
    }

    /// Decode and verify tokens waiting to be scheduled.
    pub fn queued_dv_tokens(&self) -> usize {
        self.decode_q.len()
            + self
                .verify_q
                .iter()
                .map(|id| self.states[id].tree.as_ref().map_or(0, SpecTree::len))
                .sum::<usize>()
    }

    /// Uncached prompt tokens of queued requests that are not in flight.
    pub fn queued_prefill_tokens(&self) -> usize {
        self.prefill_q
            .iter()
            .filter(|id| !self.states[id].in_flight)
            .map(|id| {
                let s = &self.states[id];
                s.req.prompt.len() - s.kv_len
            })
            .sum()
    }

    /// Builds the next chunk, or `None` when nothing is schedulable.
    pub fn schedule_next(&mut self) -> Option<Chunk> {
        let mut chunk = Chunk {
            entries: Vec::new(),
            total_tokens: 0,
        };

        while chunk.total_tokens < self.budget {
            let Some(id) = self.decode_q.pop_front() else { break };
            let s = self.states.get_mut(&id).expect("queued request has state");
            s.in_flight = true;
            let token = *s.generated.last().expect("decode follows a sampled token");
            chunk.push(ChunkEntry {
                req_id: id,
                stage: Stage::Decode,
                start_pos: 0,
                token_num: 1,
                kv_len: s.kv_len,
                tokens: vec![token],
                last_part: false,
                tree: None,
            });
        }

        while let Some(&id) = self.verify_q.front() {
            let s = self.states.get_mut(&id).expect("queued request has state");
            let tree = s.tree.clone().expect("verify request carries a tree");
            if chunk.total_tokens + tree.len() > self.budget {
                break;
            }
            self.verify_q.pop_front();
            s.in_flight = true;
            chunk.push(ChunkEntry {
                req_id: id,
                stage: Stage::Verify,
                start_pos: 0,
                token_num: tree.len(),
                kv_len: s.kv_len,
                tokens: tree.tokens(),
                last_part: false,
                tree: Some(tree),
            });
        }

        let dv = chunk.total_tokens;
        let mut capacity = if dv == 0 {
            self.budget
        } else {
            (self.budget - dv).min(self.budget - self.reserve)
        };

        let mut finished_prefills = Vec::new();
        for &id in &self.prefill_q {
            if capacity == 0 {
                break;
            }
            let s = self.states.get_mut(&id).expect("queued request has state");
            if s.in_flight {
                continue;
            }
            let remaining = s.req.prompt.len() - s.kv_len;
            let take = remaining.min(capacity);
            capacity -= take;
            s.in_flight = true;
            let last_part = take == remaining;
            if last_part {
                finished_prefills.push(id);
            }
            chunk.push(ChunkEntry {
                req_id: id,
                stage: Stage::Prefill,
                start_pos: 0,
                token_num: take,
                kv_len: s.kv_len,
                tokens: s.req.prompt[s.kv_len..s.kv_len + take].to_vec(),
                last_part,
                tree: None,
            });
        }
        self.prefill_q.retain(|id| !finished_prefills.contains(id));

        (chunk.total_tokens > 0).then_some(chunk)
    }

    /// Applies a completed chunk's results and re-queues continuations.
    pub fn complete_chunk(
        &mut self,
        chunk: &Chunk,
        outputs: &BTreeMap<ReqId, StepOutput>,
    ) -> Result<Vec<RequestEvent>, SchedulerError> {
        for e in &chunk.entries {
            match self.states.get(&e.req_id) {
                Some(s) if s.in_flight => {}
                _ => return Err(SchedulerError::UnknownRequest(e.req_id)),
            }
        }
        let mut events = Vec::new();
        for e in &chunk.entries {
            let id = e.req_id;
            let s = self.states.get_mut(&id).expect("checked above");
            s.in_flight = false;
            let new_tokens = match (e.stage, outputs.get(&id)) {
                (Stage::Prefill, out) => {
                    s.kv_len += e.token_num;
                    if !e.last_part {
                        continue;
                    }
                    match out {
                        Some(StepOutput::Token(t)) => vec![*t],
                        _ => return Err(SchedulerError::MissingOutput(id)),
                    }
                }
                (Stage::Decode, Some(StepOutput::Token(t))) => {
                    s.kv_len += 1;
                    vec![*t]
                }
                (Stage::Verify, Some(StepOutput::Verified { accepted, tokens })) => {
                    s.kv_len += accepted;
                    tokens.clone()
                }
                _ => return Err(SchedulerError::MissingOutput(id)),
            };
            s.generated.extend_from_slice(&new_tokens);
            let finished = s.generated.len() >= s.req.output_len;
            if finished {
                self.states.remove(&id);
            } else {
                self.requeue(id);
            }
            events.push(RequestEvent {
                req_id: id,
                new_tokens,
                finished,
            });
        }
        Ok(events)
    }

    fn requeue(&mut self, id: ReqId) {
        let s = self.states.get_mut(&id).expect("requeued request has state");
        match s.req.spec {
            Some(shape) => {
                let pending = *s.generated.last().expect("continuation follows a token");
                let mut context = s.context();
                context.pop();
                s.tree = Some(build_tree(pending, &context, shape, self.proposer.as_ref()));
                s.stage = Stage::Verify;
                self.verify_q.push_back(id);
            }
            None => {
                s.stage = Stage::Decode;
                self.decode_q.push_back(id);
            }
        }
    }

    /// Current K/V length of an active request.
    pub fn kv_len(&self, id: ReqId) -> Option<usize> {
        self.states.get(&id).map(|s| s.kv_len)
    }

    /// Committed tokens (prompt and generated) of an active request.
    pub fn context(&self, id: ReqId) -> Option<Vec<TokenId>> {
        self.states.get(&id).map(ReqState::context)
    }

    pub fn stage(&self, id: ReqId) -> Option<Stage> {
        self.states.get(&id).map(|s| s.stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec_decode::HashProposer;

    fn sched(budget: usize, reserve: usize) -> Scheduler {
        Scheduler::new(budget, reserve, Box::new(HashProposer::new(0, 100))).unwrap()
    }

    fn req(id: ReqId, len: usize, out: usize) -> Request {
        Request {
            id,
            arrival: id,
            prompt: (0..len as TokenId).collect(),
            output_len: out,
            spec: None,
        }
    }

    fn finish_prefill(s: &mut Scheduler, id: ReqId, len: usize) {
        s.add_request(req(id, len, 10), 0).unwrap();
        let c = s.schedule_next().unwrap();
        let out = c.entries.iter().map(|e| (e.req_id, StepOutput::Token(99))).collect();
        s.complete_chunk(&c, &out).unwrap();
        assert_eq!(s.stage(id), Some(Stage::Decode));
    }

    #[test]
    fn decode_first_then_split_prefill() {
        let mut s = sched(8, 2);
        finish_prefill(&mut s, 1, 2);
        finish_prefill(&mut s, 2, 2);
        s.add_request(req(3, 10, 4), 0).unwrap();
        let c = s.schedule_next().unwrap();
        let shape: Vec<_> = c.entries.iter().map(|e| (e.stage, e.token_num)).collect();
        assert_eq!(shape, vec![(Stage::Decode, 1), (Stage::Decode, 1), (Stage::Prefill, 6)]);
        assert_eq!(c.total_tokens, 8);
        assert_eq!(c.entries[2].start_pos, 2);
        assert!(!c.entries[2].last_part);
        assert_eq!(s.queued_prefill_tokens(), 0);
        let out = c.entries.iter().map(|e| (e.req_id, StepOutput::Token(7))).collect();
        s.complete_chunk(&c, &out).unwrap();
        assert_eq!(s.queued_prefill_tokens(), 4);
        assert_eq!(s.kv_len(3), Some(6));
    }

    #[test]
    fn lone_decode_gives_underfull_chunk() {
        let mut s = sched(8, 2);
        finish_prefill(&mut s, 1, 3);
        let c = s.schedule_next().unwrap();
        assert_eq!(c.total_tokens, 1);
        assert_eq!(c.composition(), "D");
    }

    #[test]
    fn exact_fit_prefill_only() {
        let mut s = sched(4, 1);
        s.add_request(req(1, 4, 1), 0).unwrap();
        let c = s.schedule_next().unwrap();
        assert_eq!(c.total_tokens, 4);
        assert_eq!(c.composition(), "P");
        assert!(c.entries[0].last_part);
    }

    #[test]
    fn empty_queues_schedule_nothing() {
        let mut s = sched(4, 1);
        assert!(s.schedule_next().is_none());
    }

    #[test]
    fn split_prefill_continues_then_decodes() {
        let mut s = sched(4, 1);
        s.add_request(req(1, 6, 3), 0).unwrap();
        let c1 = s.schedule_next().unwrap();
        let ev = s
            .complete_chunk(&c1, &BTreeMap::from([(1, StepOutput::Nothing)]))
            .unwrap();
        assert!(ev.is_empty());
        assert_eq!(s.kv_len(1), Some(4));
        assert_eq!(s.stage(1), Some(Stage::Prefill));

        let c2 = s.schedule_next().unwrap();
        assert_eq!(c2.entries[0].kv_len, 4);
        assert_eq!(c2.entries[0].tokens, vec![4, 5]);
        s.complete_chunk(&c2, &BTreeMap::from([(1, StepOutput::Token(7))]))
            .unwrap();
        assert_eq!(s.stage(1), Some(Stage::Decode));
        assert_eq!(s.kv_len(1), Some(6));

        let c3 = s.schedule_next().unwrap();
        assert_eq!(c3.entries[0].tokens, vec![7]);
        assert_eq!(c3.entries[0].kv_len, 6);
    }

    #[test]
    fn retires_at_output_limit() {
        let mut s = sched(4, 1);
        s.add_request(req(1, 2, 1), 0).unwrap();
        let c = s.schedule_next().unwrap();
        let ev = s
            .complete_chunk(&c, &BTreeMap::from([(1, StepOutput::Token(3))]))
            .unwrap();
        assert!(ev[0].finished);
        assert!(s.is_idle());
    }

    #[test]
    fn unknown_request_rejected() {
        let mut s = sched(4, 1);
        s.add_request(req(1, 2, 1), 0).unwrap();
        let c = s.schedule_next().unwrap();
        s.complete_chunk(&c, &BTreeMap::from([(1, StepOutput::Token(3))]))
            .unwrap();
        let err = s
            .complete_chunk(&c, &BTreeMap::from([(1, StepOutput::Token(3))]))
            .unwrap_err();
        assert_eq!(err, SchedulerError::UnknownRequest(1));
    }

    #[test]
    fn reserve_caps_prefill_next_to_decode() {
        let mut s = sched(8, 3);
        finish_prefill(&mut s, 1, 2);
        s.add_request(req(2, 20, 4), 0).unwrap();
        let c = s.schedule_next().unwrap();
        assert_eq!(c.total_tokens, 1 + 5);
    }

    #[test]
    fn verify_requests_carry_trees() {
        let mut s = sched(16, 4);
        let mut r = req(1, 3, 5);
        r.spec = Some(SpecShape { width: 2, depth: 2 });
        s.add_request(r, 0).unwrap();
        let c = s.schedule_next().unwrap();
        s.complete_chunk(&c, &BTreeMap::from([(1, StepOutput::Token(9))]))
            .unwrap();
        let c = s.schedule_next().unwrap();
        let e = &c.entries[0];
        assert_eq!(e.stage, Stage::Verify);
        assert_eq!(e.token_num, 7);
        assert_eq!(e.tokens[0], 9);
        assert_eq!(e.position(0), 3);
        s.complete_chunk(
            &c,
            &BTreeMap::from([(
                1,
                StepOutput::Verified {
                    accepted: 2,
                    tokens: vec![e.tokens[1], 11],
                },
            )]),
        )
        .unwrap();
        assert_eq!(s.kv_len(1), Some(5));
        assert_eq!(s.context(1).unwrap(), vec![0, 1, 2, 9, e.tokens[1], 11]);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Scheduler::new(4, 4, Box::new(HashProposer::new(0, 4))).is_err());
        let mut s = sched(4, 1);
        let mut r = req(1, 2, 1);
        r.spec = Some(SpecShape { width: 2, depth: 2 });
        assert!(matches!(s.add_request(r, 0), Err(SchedulerError::SpecTooLarge { .. })));
        assert_eq!(
            s.add_request(req(2, 2, 1), 2),
            Err(SchedulerError::PrefixTooLong {
                id: 2,
                matched: 2,
                len: 2
            })
        );
    }
}
