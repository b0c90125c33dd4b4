//! The context host ("library"): materializes a context once and runs every
//! later invocation against it.
//!
//! It lives inside the worker process but is only reachable through
//! [`HostRequest`]/[`HostResponse`], so it could be moved back out into a
//! forked process without touching the worker.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::model::{ContextId, ContextRecipe, InferenceItem, ItemId};
use crate::protocol::{ItemResult, Verdict};

#[derive(Debug, Clone)]
pub enum HostRequest {
    Materialize {
        recipe: ContextRecipe,
    },
    Invoke {
        context_id: ContextId,
        sandbox: PathBuf,
        items: Vec<InferenceItem>,
    },
    Release,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HostResponse {
    Ready { context_id: ContextId },
    Done { item_results: Vec<ItemResult> },
    Missing,
    Released,
}

/// Deterministic, content-free verdict: digest of the item id, mod 3.
pub fn verdict_for(item: ItemId) -> Verdict {
    let digest = Sha256::digest(item.0.to_le_bytes());
    let head = u64::from_le_bytes(digest[..8].try_into().unwrap());
    match head % 3 {
        0 => Verdict::Supported,
        1 => Verdict::Refuted,
        _ => Verdict::NotEnoughInfo,
    }
}

/// Holds at most one context (one GPU per worker).
#[derive(Debug, Default)]
pub struct ContextHost {
    hosted: Option<ContextRecipe>,
    invocations: u64,
    last_sandbox: Option<PathBuf>,
}

impl ContextHost {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hosted(&self) -> Option<&ContextRecipe> {
        self.hosted.as_ref()
    }

    pub fn holds(&self, id: &ContextId) -> bool {
        self.hosted.as_ref().is_some_and(|r| &r.context_id == id)
    }

    pub fn invocations(&self) -> u64 {
        self.invocations
    }

    /// Working directory of the most recent invocation.
    pub fn last_sandbox(&self) -> Option<&PathBuf> {
        self.last_sandbox.as_ref()
    }

    pub fn handle(&mut self, req: HostRequest) -> HostResponse {
        match req {
            HostRequest::Materialize { recipe } => {
                let context_id = recipe.context_id.clone();
                self.hosted = Some(recipe);
                HostResponse::Ready { context_id }
            }
            HostRequest::Invoke {
                context_id,
                sandbox,
                items,
            } => {
                if !self.holds(&context_id) {
                    return HostResponse::Missing;
                }
                self.last_sandbox = Some(sandbox);
                self.invocations += 1;
                HostResponse::Done {
                    item_results: run_items(&items),
                }
            }
            HostRequest::Release => {
                self.hosted = None;
                HostResponse::Released
            }
        }
    }
}

/// Inference for callers that bring their own model (no hosted context).
pub fn run_items(items: &[InferenceItem]) -> Vec<ItemResult> {
    items
        .iter()
        .map(|i| ItemResult {
            item_id: i.item_id,
            verdict_token: verdict_for(i.item_id),
        })
        .collect()
}
