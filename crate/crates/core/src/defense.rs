//! Feedback-loop defense.
//!
//! Each validator compares how the candidate model changes per-class error
//! rates on its own data with how the recently accepted models changed them.
//! The comparison is a LOF score against a threshold calibrated on the
//! history; the server rejects the candidate when enough validators flag it.

use std::collections::BTreeSet;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lof::{lof_score, VPoint};
use crate::ml::{error_profile_from_predictions, LabeledDataset, Model};
use crate::protocol::GlobalState;
use crate::{ClientId, Error, Result};

/// Per-class changes in source- and target-focused error between two models
/// on the same data. Positive entries mean the second model errs less.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationVector {
    pub source_deltas: Vec<f64>,
    pub target_deltas: Vec<f64>,
}

impl VariationVector {
    /// `[source_deltas, target_deltas]` as a single point.
    pub fn to_point(&self) -> VPoint {
        VPoint([self.source_deltas.as_slice(), self.target_deltas.as_slice()].concat())
    }

    fn between(prev: &[usize], curr: &[usize], data: &LabeledDataset) -> Self {
        let a = error_profile_from_predictions(prev, data.labels(), data.num_classes());
        let b = error_profile_from_predictions(curr, data.labels(), data.num_classes());
        let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, c)| p - c).collect();
        Self {
            source_deltas: diff(&a.source_errors, &b.source_errors),
            target_deltas: diff(&a.target_errors, &b.target_errors),
        }
    }
}

pub fn variation_vector(f_prev: &Model, f_curr: &Model, data: &LabeledDataset) -> Result<VariationVector> {
    if data.is_empty() {
        return Err(Error::input("variation vector of an empty dataset is undefined"));
    }
    let prev = f_prev.predict_all(data)?;
    let curr = f_curr.predict_all(data)?;
    Ok(VariationVector::between(&prev, &curr, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    ServerOnly,
    ClientsOnly,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    /// Look-back window; validation uses the last `lookback + 1` accepted models.
    pub lookback: usize,
    /// Minimum number of reject votes that discards a candidate.
    pub quorum: usize,
    pub validators_per_round: usize,
    pub mode: DefenseMode,
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback < 4 {
            return Err(Error::config("look-back window must be at least 4"));
        }
        let voters = self.voters();
        if self.mode != DefenseMode::ServerOnly && (self.quorum == 0 || self.quorum > voters) {
            return Err(Error::config(format!("quorum must lie in 1..={voters}")));
        }
        Ok(())
    }

    /// Number of votes cast per round.
    pub fn voters(&self) -> usize {
        match self.mode {
            DefenseMode::ServerOnly => 1,
            DefenseMode::ClientsOnly => self.validators_per_round,
            DefenseMode::Combined => self.validators_per_round + 1,
        }
    }

    /// History length required before the defense can run.
    pub fn history_len(&self) -> usize {
        self.lookback + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Accept,
    Reject,
}

impl Vote {
    pub fn flipped(self) -> Vote {
        match self {
            Vote::Accept => Vote::Reject,
            Vote::Reject => Vote::Accept,
        }
    }

    pub fn is_reject(self) -> bool {
        self == Vote::Reject
    }
}

/// Outcome of one validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub vote: Vote,
    /// LOF of the candidate's variation against the recent variations.
    pub lof_value: f64,
    /// Mean LOF of the trusted history variations.
    pub threshold: f64,
}

/// `(k, h)` for a look-back window: `k = ceil(l/2)`, `h = ceil(3l/4)`.
pub fn window_constants(lookback: usize) -> (usize, usize) {
    (lookback.div_ceil(2), (3 * lookback).div_ceil(4))
}

/// Validates `current` against `history` (`lookback + 1` accepted models,
/// oldest first) on `data`.
///
/// The variations `v_1..v_l` between consecutive history models are the
/// trusted observations. For `i = h..=l`, `v_i` is scored against its
/// `h - 1` predecessors; the mean of those scores is the threshold. The
/// candidate's variation is scored against the `h - 1` most recent trusted
/// variations and the vote is reject iff its score strictly exceeds the
/// threshold.
pub fn validate(current: &Model, history: &[Model], data: &LabeledDataset) -> Result<Verdict> {
    if history.len() < 5 {
        return Err(Error::config(format!("validation needs at least 5 history models, got {}", history.len())));
    }
    if data.is_empty() {
        return Err(Error::input("cannot validate on an empty dataset"));
    }
    let lookback = history.len() - 1;
    let (k, h) = window_constants(lookback);
    let k = k.min(h - 1);

    let preds: Vec<Vec<usize>> =
        history.iter().chain(std::iter::once(current)).map(|m| m.predict_all(data)).collect::<Result<_>>()?;
    // points[i - 1] holds v_i; points[lookback] is the candidate's variation
    let points: Vec<VPoint> =
        preds.windows(2).map(|w| VariationVector::between(&w[0], &w[1], data).to_point()).collect();

    let trusted: Vec<f64> = (h..=lookback)
        .map(|i| {
            // v_{i-1}, ..., v_{i-h+1}
            let refs = &points[i - h..i - 1];
            lof_score(&points[i - 1], refs, k)
        })
        .collect::<Result<_>>()?;
    let threshold = trusted.iter().sum::<f64>() / trusted.len() as f64;
    // v_l, ..., v_{l-h+2}
    let refs = &points[lookback + 1 - h..lookback];
    let lof_value = lof_score(&points[lookback], refs, k)?;
    let vote = if lof_value > threshold { Vote::Reject } else { Vote::Accept };
    Ok(Verdict { vote, lof_value, threshold })
}

/// Validation where a validator without data accepts by default.
pub fn validate_or_accept(current: &Model, history: &[Model], data: &LabeledDataset) -> Result<Option<Verdict>> {
    if data.is_empty() {
        return Ok(None);
    }
    validate(current, history, data).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuorumParams {
    /// Validators per round.
    pub n: usize,
    /// Malicious validators to tolerate; must be below `n / 2`.
    pub n_malicious: usize,
    pub rho: f64,
}

/// `q = ceil(rho * (n - n_M))`, clamped to `[1, n]`.
pub fn quorum_threshold(params: &QuorumParams) -> Result<usize> {
    if params.n == 0 {
        return Err(Error::config("quorum needs at least one validator"));
    }
    if 2 * params.n_malicious >= params.n {
        return Err(Error::config("tolerated malicious validators must be fewer than n / 2"));
    }
    if !(0.0..=1.0).contains(&params.rho) {
        return Err(Error::config("rho must lie in [0, 1]"));
    }
    let raw = params.rho * (params.n - params.n_malicious) as f64;
    // tolerance keeps products such as 0.7 * 10 from rounding up
    let q = (raw - 1e-9).ceil().max(0.0) as usize;
    Ok(q.clamp(1, params.n))
}

/// Largest `n_M` strictly below `(1 - rho) * n / (2 - rho)`, floored at 0.
pub fn max_tolerated_malicious(n: usize, rho: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config("rho must lie in [0, 1]"));
    }
    let bound = (1.0 - rho) * n as f64 / (2.0 - rho);
    if bound <= 0.0 {
        return Ok(0);
    }
    let mut m = bound.floor();
    if m >= bound - 1e-9 {
        m -= 1.0;
    }
    Ok(m.max(0.0) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
    DefenseInactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatorVote {
    pub client: ClientId,
    pub vote: Vote,
    /// `None` when the validator holds no data.
    pub verdict: Option<Verdict>,
    pub overridden: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub decision: Decision,
    pub validator_votes: Vec<ValidatorVote>,
    pub server_vote: Option<Vote>,
    /// Reject votes counted towards the quorum.
    pub reject_votes: usize,
}

/// Runs one accept/reject round on `candidate`.
///
/// Every validator validates against the last `lookback + 1` accepted
/// models. Validators listed in `vote_overrides` report the opposite of
/// their honest verdict. On accept the candidate is appended to the
/// history; on reject the state is left untouched.
pub fn feedback_round(
    candidate: &Model,
    state: &mut GlobalState,
    defense: &DefenseConfig,
    validators: &[(ClientId, &LabeledDataset)],
    server_set: &LabeledDataset,
    vote_overrides: &BTreeSet<ClientId>,
) -> Result<FeedbackOutcome> {
    defense.validate()?;
    let history = state.recent_history(defense.history_len()).ok_or_else(|| {
        Error::config(format!(
            "defense needs {} accepted models, have {}",
            defense.history_len(),
            state.accepted_history().len()
        ))
    })?;

    let client_votes = if defense.mode == DefenseMode::ServerOnly {
        Vec::new()
    } else {
        let vote_of = |&(client, data): &(ClientId, &LabeledDataset)| -> Result<ValidatorVote> {
            let verdict = validate_or_accept(candidate, history, data)?;
            let honest = verdict.map_or(Vote::Accept, |v| v.vote);
            let overridden = vote_overrides.contains(&client);
            Ok(ValidatorVote { client, vote: if overridden { honest.flipped() } else { honest }, verdict, overridden })
        };
        #[cfg(feature = "parallel")]
        let votes = validators.par_iter().map(vote_of).collect::<Result<Vec<_>>>()?;
        #[cfg(not(feature = "parallel"))]
        let votes = validators.iter().map(vote_of).collect::<Result<Vec<_>>>()?;
        votes
    };

    let server_vote = match defense.mode {
        DefenseMode::ClientsOnly => None,
        DefenseMode::ServerOnly | DefenseMode::Combined => {
            Some(validate_or_accept(candidate, history, server_set)?.map_or(Vote::Accept, |v| v.vote))
        }
    };

    let reject_votes =
        client_votes.iter().filter(|v| v.vote.is_reject()).count() + usize::from(server_vote == Some(Vote::Reject));
    let reject = match defense.mode {
        DefenseMode::ServerOnly => server_vote == Some(Vote::Reject),
        _ => reject_votes >= defense.quorum,
    };
    let decision = if reject {
        Decision::Reject
    } else {
        state.accept(candidate.clone());
        Decision::Accept
    };
    Ok(FeedbackOutcome { decision, validator_votes: client_votes, server_vote, reject_votes })
}
