//! The federated-learning round engine.
//!
//! Individual local models exist only inside [`run_training_round`]; what
//! leaves it is the aggregated candidate plus ground-truth bookkeeping that
//! the harness uses for scoring. The defense never sees either list of
//! local models.

use rand::seq::index;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::harness::RoundRecord;
use crate::ml::{train_local, LabeledDataset, Model, TrainParams};
use crate::seed::{self, Rng};
use crate::{ClientId, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlConfig {
    pub total_clients: usize,
    pub contributors_per_round: usize,
    /// Global learning rate applied to the summed client deltas.
    pub global_lr: f64,
    pub train_params: TrainParams,
    pub rounds: usize,
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_clients == 0 {
            return Err(Error::config("need at least one client"));
        }
        if self.contributors_per_round == 0 || self.contributors_per_round > self.total_clients {
            return Err(Error::config(format!("contributors per round must lie in 1..={}", self.total_clients)));
        }
        if !(self.global_lr.is_finite() && self.global_lr > 0.0) {
            return Err(Error::config("global learning rate must be positive"));
        }
        self.train_params.validate()
    }

    /// The global learning rate that turns aggregation into plain averaging
    /// of the contributors' models.
    pub fn averaging_lr(total_clients: usize, contributors: usize) -> f64 {
        total_clients as f64 / contributors as f64
    }
}

/// Server-side training state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalState {
    pub round: usize,
    current_model: Model,
    accepted_history: Vec<Model>,
    pub round_log: Vec<RoundRecord>,
}

impl GlobalState {
    pub fn new(initial: Model) -> Self {
        Self { round: 0, current_model: initial.clone(), accepted_history: vec![initial], round_log: Vec::new() }
    }

    pub fn current_model(&self) -> &Model {
        &self.current_model
    }

    /// Accepted models, oldest first; the last entry is the current model.
    pub fn accepted_history(&self) -> &[Model] {
        &self.accepted_history
    }

    /// The `len` most recently accepted models, oldest first.
    pub fn recent_history(&self, len: usize) -> Option<&[Model]> {
        let h = &self.accepted_history;
        (h.len() >= len).then(|| &h[h.len() - len..])
    }

    pub fn accept(&mut self, model: Model) {
        self.current_model = model.clone();
        self.accepted_history.push(model);
    }

    /// Drops history entries that can no longer be part of a look-back
    /// window of `keep` models.
    pub fn truncate_history(&mut self, keep: usize) {
        let len = self.accepted_history.len();
        if len > keep {
            self.accepted_history.drain(..len - keep);
        }
    }
}

/// `n` distinct ids drawn uniformly without replacement.
pub fn select_clients(client_ids: &[ClientId], n: usize, rng: &mut Rng) -> Result<Vec<ClientId>> {
    if n > client_ids.len() {
        return Err(Error::config(format!("cannot select {n} clients from a pool of {}", client_ids.len())));
    }
    Ok(index::sample(rng, client_ids.len(), n).into_iter().map(|i| client_ids[i]).collect())
}

/// `G' = G + (lambda / N) * sum_i (L_i - G)`.
pub fn aggregate(global: &Model, locals: &[Model], lambda: f64, total_clients: usize) -> Result<Model> {
    if locals.is_empty() {
        return Err(Error::input("aggregation needs at least one local model"));
    }
    if total_clients == 0 {
        return Err(Error::config("total client count must be positive"));
    }
    if locals.iter().any(|l| l.arch() != global.arch()) {
        return Err(Error::input("local model architecture differs from the global model"));
    }
    let g = global.params();
    let mut delta = vec![0.0; g.len()];
    for local in locals {
        delta.iter_mut().zip(local.params().iter().zip(g)).for_each(|(d, (l, g))| *d += l - g);
    }
    let factor = lambda / total_clients as f64;
    let params = g.iter().zip(&delta).map(|(g, d)| g + factor * d).collect();
    Model::from_params(global.arch().clone(), params)
}

/// Replaces the local model of selected clients. Returns `None` for clients
/// that behave honestly.
pub type MaliciousHook<'a> = dyn Fn(ClientId, &Model) -> Option<Result<Model>> + Sync + 'a;

/// Ground truth about a round's contributors. Only the harness reads it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContributionsMeta {
    pub contributors: Vec<ClientId>,
    pub malicious: Vec<ClientId>,
}

/// Trains every selected client from the current global model and returns
/// the aggregated candidate.
///
/// Client `i` in round `r` trains with the stream
/// `seed::derive(train_params.seed, "client-train", [r, i])`. Clients with
/// empty shards submit the global model unchanged.
pub fn run_training_round(
    state: &GlobalState,
    config: &FlConfig,
    client_shards: &[LabeledDataset],
    selected_ids: &[ClientId],
    malicious_hook: Option<&MaliciousHook<'_>>,
) -> Result<(Model, ContributionsMeta)> {
    if let Some(&bad) = selected_ids.iter().find(|&&id| id >= client_shards.len()) {
        return Err(Error::input(format!("client {bad} has no shard")));
    }
    let global = state.current_model();
    let round = state.round as u64;
    let local_for = |id: ClientId| -> Result<(Model, bool)> {
        if let Some(result) = malicious_hook.and_then(|hook| hook(id, global)) {
            return Ok((result?, true));
        }
        let shard = &client_shards[id];
        if shard.is_empty() {
            return Ok((global.clone(), false));
        }
        let params = TrainParams {
            seed: seed::derive(config.train_params.seed, "client-train", &[round, id as u64]),
            ..config.train_params.clone()
        };
        Ok((train_local(global, shard, &params)?, false))
    };

    #[cfg(feature = "parallel")]
    let results: Vec<Result<(Model, bool)>> = selected_ids.par_iter().map(|&id| local_for(id)).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(Model, bool)>> = selected_ids.iter().map(|&id| local_for(id)).collect();

    let mut locals = Vec::with_capacity(results.len());
    let mut meta = ContributionsMeta { contributors: selected_ids.to_vec(), malicious: Vec::new() };
    for (&id, r) in selected_ids.iter().zip(results) {
        let (local, malicious) = r?;
        if malicious {
            meta.malicious.push(id);
        }
        locals.push(local);
    }
    let candidate = aggregate(global, &locals, config.global_lr, config.total_clients)?;
    Ok((candidate, meta))
}
