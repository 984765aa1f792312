//! Per-prompt history of last-epoch responses, indexed for draft retrieval.
//!
//! [`HistoryStore`] keeps exactly one immutable [`SuffixTree`] per prompt.
//! New epochs are indexed on background history workers; readers keep seeing
//! the previous tree until the new one is swapped in.

mod tree;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use tree::{DraftResult, MatchHandle, SuffixTree, TreeStats};

use crate::TokenId;

/// Opaque prompt identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptId(pub String);

impl From<&str> for PromptId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for PromptId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One rollout sample. Serialized as one JSONL line of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Response {
    pub prompt_id: PromptId,
    pub epoch: u32,
    pub tokens: Vec<TokenId>,
    pub reward: f64,
}

impl Response {
    pub fn new(prompt_id: impl Into<PromptId>, epoch: u32, tokens: Vec<TokenId>, reward: f64) -> Self {
        Self { prompt_id: prompt_id.into(), epoch, tokens, reward }
    }

    pub fn generated_len(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("response {index} has a non-finite reward")]
    NonFiniteReward { index: usize },
    #[error("response {index} has no tokens")]
    EmptyResponse { index: usize },
    #[error("response for prompt {found} passed to the tree of prompt {expected}")]
    MixedPrompt { expected: PromptId, found: PromptId },
    #[error("stale epoch {got} for prompt {prompt}: epoch {stored} already accepted")]
    StaleEpoch { prompt: PromptId, stored: u32, got: u32 },
    #[error("history workers have shut down")]
    Closed,
}

/// Aggregate accounting over all live trees.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MemoryStats {
    pub prompts: usize,
    pub total_nodes: usize,
    pub total_tokens: usize,
    pub approx_bytes: usize,
}

type Job = Box<dyn FnOnce() + Send + 'static>;

#[derive(Default)]
struct Shared {
    trees: RwLock<BTreeMap<PromptId, Arc<SuffixTree>>>,
    /// Highest epoch accepted for indexing per prompt, including queued ones.
    accepted: Mutex<HashMap<PromptId, u32>>,
}

/// Completion handle of one asynchronous ingest.
#[must_use = "dropping the ticket does not cancel the ingest"]
pub struct IngestTicket {
    done: Receiver<()>,
}

impl IngestTicket {
    /// Block until the tree is visible to readers.
    pub fn wait(self) {
        let _ = self.done.recv();
    }
}

/// Concurrent store of per-prompt suffix trees with background indexing.
pub struct HistoryStore {
    shared: Arc<Shared>,
    jobs: Option<Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
}

impl HistoryStore {
    /// A store with `workers` history worker threads (at least one).
    pub fn new(workers: usize) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        let rx = Arc::new(Mutex::new(rx));
        let workers = (0..workers.max(1))
            .map(|i| {
                let rx = Arc::clone(&rx);
                std::thread::Builder::new()
                    .name(format!("history-{i}"))
                    .spawn(move || loop {
                        let job = match rx.lock() {
                            Ok(guard) => guard.recv(),
                            Err(_) => return,
                        };
                        match job {
                            Ok(job) => job(),
                            Err(_) => return,
                        }
                    })
                    .expect("spawn history worker")
            })
            .collect();
        Self { shared: Arc::default(), jobs: Some(tx), workers }
    }

    fn admit(&self, prompt_id: &PromptId, epoch: u32, responses: &[Response]) -> Result<(), HistoryError> {
        for (index, r) in responses.iter().enumerate() {
            if &r.prompt_id != prompt_id {
                return Err(HistoryError::MixedPrompt { expected: prompt_id.clone(), found: r.prompt_id.clone() });
            }
            if !r.reward.is_finite() {
                return Err(HistoryError::NonFiniteReward { index });
            }
            if r.tokens.is_empty() {
                return Err(HistoryError::EmptyResponse { index });
            }
        }
        let mut accepted = self.shared.accepted.lock().expect("accepted map poisoned");
        if let Some(&stored) = accepted.get(prompt_id) {
            if epoch <= stored {
                return Err(HistoryError::StaleEpoch { prompt: prompt_id.clone(), stored, got: epoch });
            }
        }
        accepted.insert(prompt_id.clone(), epoch);
        Ok(())
    }

    /// Queue indexing of `responses` as the new history of `prompt_id`.
    ///
    /// Readers keep seeing the previous tree (or nothing) until the returned
    /// ticket completes.
    pub fn ingest_epoch(
        &self,
        prompt_id: PromptId,
        epoch: u32,
        responses: Vec<Response>,
    ) -> Result<IngestTicket, HistoryError> {
        self.admit(&prompt_id, epoch, &responses)?;
        let (done_tx, done) = mpsc::channel();
        let shared = Arc::clone(&self.shared);
        let job: Job = Box::new(move || {
            // Inputs were validated in `admit`, so construction cannot fail here.
            if let Ok(tree) = SuffixTree::build(prompt_id.clone(), epoch, &responses) {
                publish(&shared, Arc::new(tree));
            }
            let _ = done_tx.send(());
        });
        self.jobs.as_ref().ok_or(HistoryError::Closed)?.send(job).map_err(|_| HistoryError::Closed)?;
        Ok(IngestTicket { done })
    }

    /// Index synchronously on the calling thread.
    pub fn ingest_blocking(&self, prompt_id: PromptId, epoch: u32, responses: &[Response]) -> Result<(), HistoryError> {
        self.admit(&prompt_id, epoch, responses)?;
        let tree = SuffixTree::build(prompt_id, epoch, responses)?;
        publish(&self.shared, Arc::new(tree));
        Ok(())
    }

    /// Current visible tree of a prompt, if any history exists.
    pub fn snapshot(&self, prompt_id: &PromptId) -> Option<Arc<SuffixTree>> {
        self.shared.trees.read().expect("tree map poisoned").get(prompt_id).cloned()
    }

    pub fn extract_draft(&self, prompt_id: &PromptId, prefix: &[TokenId], window: usize) -> Option<DraftResult> {
        self.snapshot(prompt_id).map(|t| t.extract_draft(prefix, window))
    }

    pub fn memory_stats(&self) -> MemoryStats {
        let trees = self.shared.trees.read().expect("tree map poisoned");
        trees.values().fold(MemoryStats::default(), |acc, t| MemoryStats {
            prompts: acc.prompts + 1,
            total_nodes: acc.total_nodes + t.node_count(),
            total_tokens: acc.total_tokens + t.total_tokens(),
            approx_bytes: acc.approx_bytes + t.approx_bytes(),
        })
    }

    /// Per-tree statistics in prompt order.
    pub fn tree_stats(&self) -> Vec<TreeStats> {
        self.shared.trees.read().expect("tree map poisoned").values().map(|t| t.stats()).collect()
    }
}

fn publish(shared: &Shared, tree: Arc<SuffixTree>) {
    let mut trees = shared.trees.write().expect("tree map poisoned");
    match trees.get(tree.prompt_id()) {
        Some(current) if current.epoch() >= tree.epoch() => {}
        _ => {
            trees.insert(tree.prompt_id().clone(), tree);
        }
    }
}

impl Default for HistoryStore {
    fn default() -> Self {
        Self::new(2)
    }
}

impl Drop for HistoryStore {
    fn drop(&mut self) {
        self.jobs.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
