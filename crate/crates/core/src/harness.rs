//! Experiment orchestration: configuration, scenario execution, metrics,
//! sweeps and report files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{
    adaptive_craft, craft_backdoor_model, model_replacement_update, AdaptiveError, AttackerState, BackdoorKind,
    BackdoorSpec, DefenseKnowledge,
};
use crate::data::{dirichlet_partition, make_synthetic, split_clients_server, PartitionConfig, SplitConfig};
use crate::defense::{feedback_round, validate_or_accept, Decision, DefenseConfig, DefenseMode, Vote};
use crate::ml::{empirical_accuracy, init_model, Architecture, LabeledDataset, Model, TrainParams};
use crate::protocol::{run_training_round, select_clients, FlConfig, GlobalState, MaliciousHook};
use crate::seed;
use crate::{attack, ClientId, Error, Result};

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    /// Width of the tanh hidden layer; 0 gives a linear softmax model.
    pub hidden_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlSection {
    pub total_clients: usize,
    pub contributors_per_round: usize,
    /// Defaults to `total_clients / contributors_per_round` (plain averaging).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_lr: Option<f64>,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl FlSection {
    pub fn global_lr(&self) -> f64 {
        self.global_lr.unwrap_or_else(|| FlConfig::averaging_lr(self.total_clients, self.contributors_per_round))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub dirichlet_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub client_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    /// Attacking client; defaults to the client with the largest shard.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<ClientId>,
    /// Pick the backdoor source class as the attacker's majority class and
    /// the target uniformly among the others.
    pub auto_classes: bool,
    /// Local epochs used to train the backdoored model.
    pub epochs: usize,
    pub adaptive: bool,
    pub max_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Train to a plateau first; round 1 is the stabilised model.
    Stable,
    /// Start from the freshly initialised model.
    Early,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
    pub poison_rounds: Vec<usize>,
    pub defense_start_round: usize,
    pub end_round: usize,
    /// Plateau detection for the stable scenario: stop warming up once the
    /// best accuracy of the last `plateau_window` rounds improves on the best
    /// before it by less than `plateau_tolerance`.
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    pub max_warmup_rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub repetitions: usize,
    pub data: DataSection,
    pub fl: FlSection,
    pub partition: PartitionSection,
    pub split: SplitSection,
    pub defense: DefenseConfig,
    pub backdoor: BackdoorSpec,
    pub attack: AttackSection,
    pub scenario: ScenarioSection,
    /// Validators that always report the opposite of their honest verdict.
    #[serde(default)]
    pub malicious_validators: Vec<ClientId>,
}

impl Default for ExperimentConfig {
    /// Desk-scale configuration: 100 clients, 10 contributors and 10
    /// validators per round, 10-class blobs in 20 dimensions, look-back 20,
    /// quorum 5, Dirichlet 0.9 and a 90/10 client/server split.
    fn default() -> Self {
        Self {
            master_seed: 1,
            repetitions: 5,
            data: DataSection {
                num_classes: 10,
                dim: 20,
                samples_per_class: 200,
                cluster_spread: 1.0,
                hidden_units: 0,
            },
            fl: FlSection {
                total_clients: 100,
                contributors_per_round: 10,
                global_lr: None,
                local_epochs: 2,
                learning_rate: 0.1,
                batch_size: 10,
            },
            partition: PartitionSection { dirichlet_alpha: 0.9 },
            split: SplitSection { client_share: 0.9 },
            defense: DefenseConfig { lookback: 20, quorum: 5, validators_per_round: 10, mode: DefenseMode::Combined },
            backdoor: BackdoorSpec::label_flip(1, 7, 0.5),
            attack: AttackSection { client_id: None, auto_classes: true, epochs: 20, adaptive: false, max_iters: 10 },
            scenario: ScenarioSection::stable(),
            malicious_validators: Vec::new(),
        }
    }
}

impl ScenarioSection {
    /// Stabilised model, 50 rounds, injections at 30/35/40, defense from 21.
    pub fn stable() -> Self {
        Self {
            kind: ScenarioKind::Stable,
            poison_rounds: vec![30, 35, 40],
            defense_start_round: 21,
            end_round: 50,
            plateau_window: 20,
            plateau_tolerance: 0.002,
            max_warmup_rounds: 1000,
        }
    }

    /// Training from scratch: two injections before the defense starts at
    /// round 50, then eight more every 15 rounds from round 80.
    pub fn early() -> Self {
        let mut poison_rounds = vec![10, 30];
        poison_rounds.extend((0..8).map(|j| 80 + 15 * j));
        Self { kind: ScenarioKind::Early, poison_rounds, defense_start_round: 50, end_round: 200, ..Self::stable() }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::config("repetitions must be at least 1"));
        }
        let arch = self.architecture();
        arch.validate()?;
        self.fl_config(0).validate()?;
        self.defense.validate()?;
        if self.defense.validators_per_round > self.fl.total_clients {
            return Err(Error::config("more validators per round than clients"));
        }
        if self.data.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if !(self.split.client_share > 0.0 && self.split.client_share <= 1.0) {
            return Err(Error::config("client share must lie in (0, 1]"));
        }
        if !(self.partition.dirichlet_alpha > 0.0 && self.partition.dirichlet_alpha.is_finite()) {
            return Err(Error::config("dirichlet alpha must be positive"));
        }
        self.backdoor
            .validate(self.data.num_classes, self.data.dim)
            .map_err(|e| Error::config(format!("backdoor: {e}")))?;
        let sc = &self.scenario;
        if sc.end_round == 0 {
            return Err(Error::config("end round must be at least 1"));
        }
        if let Some(r) = sc.poison_rounds.iter().find(|&&r| r == 0 || r > sc.end_round) {
            return Err(Error::config(format!("poison round {r} outside 1..={}", sc.end_round)));
        }
        if sc.kind == ScenarioKind::Stable && sc.plateau_window == 0 {
            return Err(Error::config("plateau window must be positive"));
        }
        if let Some(id) = self.attack.client_id {
            if id >= self.fl.total_clients {
                return Err(Error::config(format!("attacker client {id} out of range")));
            }
        }
        if let Some(id) = self.malicious_validators.iter().find(|&&id| id >= self.fl.total_clients) {
            return Err(Error::config(format!("malicious validator {id} out of range")));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        match self.data.hidden_units {
            0 => Architecture::linear(self.data.dim, self.data.num_classes),
            h => Architecture::with_hidden(self.data.dim, h, self.data.num_classes),
        }
    }

    pub fn fl_config(&self, seed: u64) -> FlConfig {
        FlConfig {
            total_clients: self.fl.total_clients,
            contributors_per_round: self.fl.contributors_per_round,
            global_lr: self.fl.global_lr(),
            train_params: TrainParams {
                epochs: self.fl.local_epochs,
                learning_rate: self.fl.learning_rate,
                batch_size: self.fl.batch_size,
                seed,
            },
            rounds: self.scenario.end_round,
        }
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..6])
    }

    /// Parses a TOML document with dotted keys layered over the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        ConfigBuilder::new().merge_toml(text)?.build()
    }
}

/// Layers defaults, a config file and `key=value` overrides.
#[derive(Debug, Clone)]
pub struct ConfigBuilder {
    root: toml::Table,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::from_config(&ExperimentConfig::default())
    }

    pub fn from_config(config: &ExperimentConfig) -> Self {
        let root = toml::Table::try_from(config).expect("config converts to a TOML table");
        Self { root }
    }

    pub fn merge_toml(mut self, text: &str) -> Result<Self> {
        let table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| Error::config(format!("invalid config document: {e}")))?;
        merge_tables(&mut self.root, table);
        Ok(self)
    }

    pub fn merge_file(self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_owned(), source })?;
        self.merge_toml(&text).map_err(|e| Error::Parse { path: path.to_owned(), message: e.to_string() })
    }

    /// Applies `dotted.key=value`. The value is read as a TOML literal and
    /// falls back to a plain string.
    pub fn set(mut self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config("empty override key"))?;
        let mut table = &mut self.root;
        for part in parts {
            table = table
                .entry(part.to_owned())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("`{part}` in `{key}` is not a section")))?;
        }
        table.insert(last.to_owned(), value);
        Ok(self)
    }

    pub fn build(self) -> Result<ExperimentConfig> {
        let config: ExperimentConfig =
            toml::Value::Table(self.root).try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

/// Deep merge; a table whose `mode` tag changes is replaced outright so
/// that fields of the old variant do not linger.
fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o))
                if o.get("mode").is_none_or(|m| b.get("mode") == Some(m)) =>
            {
                merge_tables(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// records and reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedVote {
    pub client: ClientId,
    pub reject: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lof_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Ground truth from the schedule: a malicious update entered this round.
    pub was_poisoned: bool,
    pub decision: Decision,
    pub reject_votes: usize,
    pub votes: Vec<RecordedVote>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_reject: Option<bool>,
    /// Accuracy of the global model after the decision.
    pub main_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backdoor_accuracy: Option<f64>,
    /// For adaptive injections, the verdict of re-running validation on the
    /// submitted candidate with the attacker's own clean data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacker_view: Option<Vote>,
}

impl RoundRecord {
    pub fn defense_active(&self) -> bool {
        self.decision != Decision::DefenseInactive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, count: values.len() })
    }
}

/// Ground-truth tallies over defense-active rounds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub clean_rounds: usize,
    pub rejected_clean: usize,
    pub poisoned_rounds: usize,
    pub accepted_poisoned: usize,
}

impl DetectionCounts {
    pub fn from_records(records: &[RoundRecord]) -> Self {
        Self::with_rule(records, |r| r.decision == Decision::Reject)
    }

    fn with_rule(records: &[RoundRecord], rejected: impl Fn(&RoundRecord) -> bool) -> Self {
        let mut c = DetectionCounts::default();
        for r in records.iter().filter(|r| r.defense_active()) {
            if r.was_poisoned {
                c.poisoned_rounds += 1;
                c.accepted_poisoned += usize::from(!rejected(r));
            } else {
                c.clean_rounds += 1;
                c.rejected_clean += usize::from(rejected(r));
            }
        }
        c
    }

    pub fn fp_rate(&self) -> Option<f64> {
        (self.clean_rounds > 0).then(|| self.rejected_clean as f64 / self.clean_rounds as f64)
    }

    pub fn fn_rate(&self) -> Option<f64> {
        (self.poisoned_rounds > 0).then(|| self.accepted_poisoned as f64 / self.poisoned_rounds as f64)
    }

    fn add(self, o: Self) -> Self {
        Self {
            clean_rounds: self.clean_rounds + o.clean_rounds,
            rejected_clean: self.rejected_clean + o.rejected_clean,
            poisoned_rounds: self.poisoned_rounds + o.poisoned_rounds,
            accepted_poisoned: self.accepted_poisoned + o.accepted_poisoned,
        }
    }
}

/// Detection counts if the recorded votes had been tallied against
/// `quorum` instead. Only meaningful for quorum-based modes, and only as a
/// what-if: later rounds are not replayed.
pub fn counts_at_quorum(records: &[RoundRecord], quorum: usize) -> DetectionCounts {
    DetectionCounts::with_rule(records, |r| r.reject_votes >= quorum)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub index: usize,
    /// Hex-encoded seed of this repetition.
    pub seed: String,
    pub warmup_rounds: usize,
    pub attacker: Option<ClientId>,
    pub backdoor: BackdoorSpec,
    pub counts: DetectionCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fn_rate: Option<f64>,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp_rate: Option<Stat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fn_rate: Option<Stat>,
    /// Tallies pooled over all repetitions.
    pub counts: DetectionCounts,
    /// Bytes each validator downloads per round (uncompressed history).
    pub comm_bytes_per_validator: f64,
    pub repetitions: Vec<RepetitionReport>,
}

/// `(lookback + 1) * model_bytes / compression_factor`.
pub fn comm_overhead(model_bytes: f64, lookback: usize, compression_factor: f64) -> Result<f64> {
    if !(model_bytes > 0.0 && compression_factor > 0.0) {
        return Err(Error::config("model size and compression factor must be positive"));
    }
    Ok((lookback as f64 + 1.0) * model_bytes / compression_factor)
}

// ---------------------------------------------------------------------------
// execution

struct World {
    shards: Vec<LabeledDataset>,
    server_set: LabeledDataset,
    test_set: LabeledDataset,
    backdoor_test: LabeledDataset,
    attacker: Option<AttackerState>,
}

fn majority_class(data: &LabeledDataset) -> usize {
    let counts = data.class_counts();
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

fn build_world(config: &ExperimentConfig, rep_seed: u64) -> Result<World> {
    let d = &config.data;
    let (train, test_set) = make_synthetic(
        d.num_classes,
        d.dim,
        d.samples_per_class,
        d.cluster_spread,
        seed::derive(rep_seed, "data", &[]),
    )?;
    let (pool, server_set) = split_clients_server(
        &train,
        &SplitConfig { client_share: config.split.client_share, seed: seed::derive(rep_seed, "split", &[]) },
    )?;
    let shards = if pool.is_empty() {
        vec![LabeledDataset::empty(d.dim, d.num_classes); config.fl.total_clients]
    } else {
        dirichlet_partition(
            &pool,
            &PartitionConfig {
                num_clients: config.fl.total_clients,
                dirichlet_alpha: config.partition.dirichlet_alpha,
                seed: seed::derive(rep_seed, "partition", &[]),
            },
        )?
    };

    let mut spec = config.backdoor.clone();
    let attacker = if config.scenario.poison_rounds.is_empty() {
        None
    } else {
        let id = config.attack.client_id.unwrap_or_else(|| {
            // largest shard, lowest id on ties
            (0..shards.len()).fold(0, |best, i| if shards[i].len() > shards[best].len() { i } else { best })
        });
        let data = shards[id].clone();
        if data.is_empty() {
            return Err(Error::config(format!("attacker client {id} holds no data")));
        }
        if config.attack.auto_classes {
            let source = majority_class(&data);
            let mut rng = seed::stream(rep_seed, "backdoor-target", &[]);
            let others: Vec<usize> = (0..d.num_classes).filter(|&c| c != source).collect();
            spec.target = others[rand::Rng::random_range(&mut rng, 0..others.len())];
            match &mut spec.kind {
                BackdoorKind::LabelFlip { source: s } => *s = source,
                BackdoorKind::SemanticTrigger { class, .. } => *class = source,
            }
        }
        Some(AttackerState::new(id, data, spec.clone())?)
    };
    let backdoor_test = spec.backdoor_set(&test_set);
    Ok(World { shards, server_set, test_set, backdoor_test, attacker })
}

fn backdoor_acc(world: &World, model: &Model) -> Result<Option<f64>> {
    match &world.attacker {
        Some(a) if !world.backdoor_test.is_empty() => {
            attack::backdoor_accuracy(model, &world.backdoor_test, a.spec.target).map(Some)
        }
        _ => Ok(None),
    }
}

/// Trains without attack or defense until test accuracy plateaus. Returns
/// the number of warm-up rounds.
fn warm_up(config: &ExperimentConfig, world: &World, state: &mut GlobalState, rep_seed: u64) -> Result<usize> {
    let fl = config.fl_config(seed::derive(rep_seed, "warmup-train", &[]));
    let ids: Vec<ClientId> = (0..fl.total_clients).collect();
    let sc = &config.scenario;
    let mut acc = Vec::new();
    for t in 1..=sc.max_warmup_rounds {
        state.round = t;
        let selected =
            select_clients(&ids, fl.contributors_per_round, &mut seed::stream(rep_seed, "warmup-select", &[t as u64]))?;
        let (candidate, _) = run_training_round(state, &fl, &world.shards, &selected, None)?;
        state.accept(candidate);
        state.truncate_history(config.defense.history_len());
        acc.push(empirical_accuracy(state.current_model(), &world.test_set)?);
        let w = sc.plateau_window;
        if acc.len() >= 2 * w {
            let split = acc.len() - w;
            let best = |s: &[f64]| s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if best(&acc[split..]) - best(&acc[..split]) < sc.plateau_tolerance {
                return Ok(t);
            }
        }
    }
    Ok(sc.max_warmup_rounds)
}

/// The malicious update for this round, or `None` if the adaptive attacker
/// gives up. Adaptive updates come with the attacker-side verdict on the
/// candidate they produce.
fn malicious_update(
    config: &ExperimentConfig,
    attacker: &AttackerState,
    state: &GlobalState,
    fl: &FlConfig,
    round_seed: u64,
) -> Result<Option<(Model, Option<Vote>)>> {
    let params = TrainParams { epochs: config.attack.epochs, seed: round_seed, ..fl.train_params.clone() };
    let global = state.current_model();
    if config.attack.adaptive {
        let knowledge = DefenseKnowledge {
            lookback: config.defense.lookback,
            quorum: config.defense.quorum,
            global_lr: fl.global_lr,
            total_clients: fl.total_clients,
        };
        let history = state.accepted_history();
        match adaptive_craft(global, history, attacker, &knowledge, &params, config.attack.max_iters) {
            Ok(outcome) => {
                let recent = &history[history.len().saturating_sub(knowledge.lookback + 1)..];
                let view = if recent.len() > knowledge.lookback {
                    let clean = attacker.spec.clean_set(&attacker.dataset);
                    Some(validate_or_accept(&outcome.candidate, recent, &clean)?.map_or(Vote::Accept, |v| v.vote))
                } else {
                    None
                };
                Ok(Some((outcome.update, view)))
            }
            Err(AdaptiveError::GaveUp(_)) => Ok(None),
            Err(AdaptiveError::Sim(e)) => Err(e),
        }
    } else {
        let target = craft_backdoor_model(global, attacker, &params)?;
        Ok(Some((model_replacement_update(global, &target, fl.global_lr, fl.total_clients)?, None)))
    }
}

/// Runs one repetition.
pub fn run_repetition(config: &ExperimentConfig, index: usize) -> Result<RepetitionReport> {
    config.validate()?;
    let rep_seed = seed::repetition_seed(config.master_seed, index);
    let world = build_world(config, rep_seed)?;
    let arch = config.architecture();
    let mut state = GlobalState::new(init_model(&arch, seed::derive(rep_seed, "init", &[]))?);
    let warmup_rounds = match config.scenario.kind {
        ScenarioKind::Stable => warm_up(config, &world, &mut state, rep_seed)?,
        ScenarioKind::Early => 0,
    };

    let fl = config.fl_config(seed::derive(rep_seed, "train", &[]));
    let ids: Vec<ClientId> = (0..fl.total_clients).collect();
    let poison: BTreeSet<usize> = config.scenario.poison_rounds.iter().copied().collect();
    let overrides: BTreeSet<ClientId> = config.malicious_validators.iter().copied().collect();
    let defense = &config.defense;
    let mut records = Vec::with_capacity(config.scenario.end_round);

    for round in 1..=config.scenario.end_round {
        state.round = warmup_rounds + round;
        let t = state.round as u64;
        let mut selected =
            select_clients(&ids, fl.contributors_per_round, &mut seed::stream(rep_seed, "contributors", &[t]))?;

        let mut update = None;
        let mut attacker_view = None;
        if let (true, Some(attacker)) = (poison.contains(&round), &world.attacker) {
            if let Some((m, view)) =
                malicious_update(config, attacker, &state, &fl, seed::derive(rep_seed, "attack", &[t]))?
            {
                update = Some(m);
                attacker_view = view;
            }
            if update.is_some() && !selected.contains(&attacker.client_id) {
                *selected.last_mut().expect("at least one contributor") = attacker.client_id;
            }
        }
        let attacker_id = world.attacker.as_ref().map(|a| a.client_id);
        let hook = |id: ClientId, _: &Model| -> Option<Result<Model>> {
            match &update {
                Some(m) if Some(id) == attacker_id => Some(Ok(m.clone())),
                _ => None,
            }
        };
        let hook_ref: &MaliciousHook<'_> = &hook;
        let (candidate, meta) = run_training_round(&state, &fl, &world.shards, &selected, Some(hook_ref))?;
        let was_poisoned = !meta.malicious.is_empty();

        let active =
            round >= config.scenario.defense_start_round && state.accepted_history().len() >= defense.history_len();
        let (decision, reject_votes, votes, server_reject) = if active {
            let validator_ids =
                select_clients(&ids, defense.validators_per_round, &mut seed::stream(rep_seed, "validators", &[t]))?;
            let validators: Vec<(ClientId, &LabeledDataset)> =
                validator_ids.iter().map(|&id| (id, &world.shards[id])).collect();
            let out = feedback_round(&candidate, &mut state, defense, &validators, &world.server_set, &overrides)?;
            let votes = out
                .validator_votes
                .iter()
                .map(|v| RecordedVote {
                    client: v.client,
                    reject: v.vote.is_reject(),
                    lof_value: v.verdict.map(|x| x.lof_value),
                    threshold: v.verdict.map(|x| x.threshold),
                })
                .collect();
            (out.decision, out.reject_votes, votes, out.server_vote.map(Vote::is_reject))
        } else {
            state.accept(candidate);
            (Decision::DefenseInactive, 0, Vec::new(), None)
        };
        state.truncate_history(defense.history_len());

        records.push(RoundRecord {
            round,
            was_poisoned,
            decision,
            reject_votes,
            votes,
            server_reject,
            main_accuracy: empirical_accuracy(state.current_model(), &world.test_set)?,
            backdoor_accuracy: backdoor_acc(&world, state.current_model())?,
            attacker_view,
        });
    }

    let counts = DetectionCounts::from_records(&records);
    let (attacker, backdoor) = match &world.attacker {
        Some(a) => (Some(a.client_id), a.spec.clone()),
        None => (None, config.backdoor.clone()),
    };
    Ok(RepetitionReport {
        index,
        seed: format!("{rep_seed:016x}"),
        warmup_rounds,
        attacker,
        backdoor,
        counts,
        fp_rate: counts.fp_rate(),
        fn_rate: counts.fn_rate(),
        rounds: records,
    })
}

/// Runs every repetition and aggregates the detection rates.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let indices: Vec<usize> = (0..config.repetitions).collect();
    #[cfg(feature = "parallel")]
    let reps = indices.par_iter().map(|&i| run_repetition(config, i)).collect::<Result<Vec<_>>>()?;
    #[cfg(not(feature = "parallel"))]
    let reps = indices.iter().map(|&i| run_repetition(config, i)).collect::<Result<Vec<_>>>()?;
    Ok(assemble_report(config, reps))
}

fn assemble_report(config: &ExperimentConfig, repetitions: Vec<RepetitionReport>) -> Report {
    let fps: Vec<f64> = repetitions.iter().filter_map(|r| r.fp_rate).collect();
    let fns: Vec<f64> = repetitions.iter().filter_map(|r| r.fn_rate).collect();
    let counts = repetitions.iter().fold(DetectionCounts::default(), |acc, r| acc.add(r.counts));
    let model_bytes = (config.architecture().param_count() * std::mem::size_of::<f64>()) as f64;
    Report {
        config: config.clone(),
        config_hash: config.hash(),
        fp_rate: Stat::of(&fps),
        fn_rate: Stat::of(&fns),
        counts,
        comm_bytes_per_validator: comm_overhead(model_bytes, config.defense.lookback, 1.0).unwrap_or(0.0),
        repetitions,
    }
}

/// Values to sweep; an empty list keeps the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub lookbacks: Vec<usize>,
    pub quorums: Vec<usize>,
    pub client_shares: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lookback: usize,
    pub quorum: usize,
    pub client_share: f64,
}

impl ParamGrid {
    pub fn points(&self, base: &ExperimentConfig) -> Result<Vec<GridPoint>> {
        if self.lookbacks.is_empty() && self.quorums.is_empty() && self.client_shares.is_empty() {
            return Err(Error::config("parameter grid is empty"));
        }
        let or_base = |v: &[usize], b: usize| if v.is_empty() { vec![b] } else { v.to_vec() };
        let shares =
            if self.client_shares.is_empty() { vec![base.split.client_share] } else { self.client_shares.clone() };
        let mut out = Vec::new();
        for &lookback in &or_base(&self.lookbacks, base.defense.lookback) {
            for &quorum in &or_base(&self.quorums, base.defense.quorum) {
                for &client_share in &shares {
                    out.push(GridPoint { lookback, quorum, client_share });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub point: GridPoint,
    pub report: Report,
}

/// One report per grid point, all sharing the base seed.
pub fn sweep(base: &ExperimentConfig, grid: &ParamGrid) -> Result<Vec<SweepEntry>> {
    let configs: Vec<(GridPoint, ExperimentConfig)> = grid
        .points(base)?
        .into_iter()
        .map(|p| {
            let mut c = base.clone();
            c.defense.lookback = p.lookback;
            c.defense.quorum = p.quorum;
            c.split.client_share = p.client_share;
            c.validate().map(|_| (p, c))
        })
        .collect::<Result<_>>()?;
    configs.into_iter().map(|(point, c)| run_experiment(&c).map(|report| SweepEntry { point, report })).collect()
}

// ---------------------------------------------------------------------------
// persistence

/// Delimiter of the per-round tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    Tsv,
}

impl TableFormat {
    fn delimiter(self) -> u8 {
        match self {
            TableFormat::Csv => b',',
            TableFormat::Tsv => b'\t',
        }
    }

    fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::Tsv => "tsv",
        }
    }
}

/// One row of the per-round table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub poisoned: bool,
    pub decision: Decision,
    pub reject_votes: usize,
    pub main_acc: f64,
    pub backdoor_acc: Option<f64>,
}

impl From<&RoundRecord> for RoundRow {
    fn from(r: &RoundRecord) -> Self {
        Self {
            round: r.round,
            poisoned: r.was_poisoned,
            decision: r.decision,
            reject_votes: r.reject_votes,
            main_acc: r.main_accuracy,
            backdoor_acc: r.backdoor_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmittedFiles {
    pub summary: PathBuf,
    pub tables: Vec<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_owned(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |e| Error::Parse { path: path.to_owned(), message: e.to_string() }
}

pub fn write_round_table(rows: &[RoundRow], format: TableFormat, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(format.delimiter()).from_path(path).map_err(csv_err(path))?;
    if rows.is_empty() {
        w.write_record(["round", "poisoned", "decision", "reject_votes", "main_acc", "backdoor_acc"])
            .map_err(csv_err(path))?;
    }
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_round_table(path: &Path, format: TableFormat) -> Result<Vec<RoundRow>> {
    let mut r = csv::ReaderBuilder::new().delimiter(format.delimiter()).from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err(path))
}

/// Writes `summary-<hash>.json` and one `rounds-<hash>-rep<i>` table per
/// repetition into `dir`.
pub fn emit_report(report: &Report, format: TableFormat, dir: &Path) -> Result<EmittedFiles> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let summary = dir.join(format!("summary-{}.json", report.config_hash));
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&summary, json).map_err(io_err(&summary))?;
    let mut tables = Vec::with_capacity(report.repetitions.len());
    for rep in &report.repetitions {
        let path = dir.join(format!("rounds-{}-rep{}.{}", report.config_hash, rep.index, format.extension()));
        let rows: Vec<RoundRow> = rep.rounds.iter().map(RoundRow::from).collect();
        write_round_table(&rows, format, &path)?;
        tables.push(path);
    }
    Ok(EmittedFiles { summary, tables })
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_owned(), message: e.to_string() })
}

/// Summary row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lookback: usize,
    pub quorum: usize,
    pub client_share: f64,
    pub config_hash: String,
    pub fp_mean: Option<f64>,
    pub fp_std: Option<f64>,
    pub fn_mean: Option<f64>,
    pub fn_std: Option<f64>,
}

impl From<&SweepEntry> for SweepRow {
    fn from(e: &SweepEntry) -> Self {
        Self {
            lookback: e.point.lookback,
            quorum: e.point.quorum,
            client_share: e.point.client_share,
            config_hash: e.report.config_hash.clone(),
            fp_mean: e.report.fp_rate.map(|s| s.mean),
            fp_std: e.report.fp_rate.map(|s| s.std),
            fn_mean: e.report.fn_rate.map(|s| s.mean),
            fn_std: e.report.fn_rate.map(|s| s.std),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub base_config_hash: String,
    pub grid: ParamGrid,
    pub rows: Vec<SweepRow>,
}

/// Emits every grid point's report plus `sweep-<hash>.json`.
pub fn emit_sweep(
    base: &ExperimentConfig,
    grid: &ParamGrid,
    entries: &[SweepEntry],
    format: TableFormat,
    dir: &Path,
) -> Result<PathBuf> {
    for e in entries {
        emit_report(&e.report, format, dir)?;
    }
    let summary = SweepSummary {
        base_config_hash: base.hash(),
        grid: grid.clone(),
        rows: entries.iter().map(SweepRow::from).collect(),
    };
    let path = dir.join(format!("sweep-{}.json", summary.base_config_hash));
    let json = serde_json::to_string_pretty(&summary).expect("sweep summary serializes");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(path)
}

/// Human-readable rendering of a report.
pub fn render_text(report: &Report) -> String {
    let fmt = |s: Option<Stat>| s.map_or("n/a".to_owned(), |s| format!("{:.3} ± {:.3}", s.mean, s.std));
    let mut out = format!(
        "config {}  scenario {:?}  lookback {}  quorum {}  mode {:?}\n",
        report.config_hash,
        report.config.scenario.kind,
        report.config.defense.lookback,
        report.config.defense.quorum,
        report.config.defense.mode,
    );
    out += &format!("FP rate {}   FN rate {}\n", fmt(report.fp_rate), fmt(report.fn_rate));
    let c = report.counts;
    out += &format!(
        "clean rounds {} (rejected {})   poisoned rounds {} (accepted {})\n",
        c.clean_rounds, c.rejected_clean, c.poisoned_rounds, c.accepted_poisoned
    );
    for rep in &report.repetitions {
        out += &format!(
            "rep {} seed {} warm-up {} fp {} fn {}\n",
            rep.index,
            rep.seed,
            rep.warmup_rounds,
            rep.fp_rate.map_or("n/a".into(), |v| format!("{v:.3}")),
            rep.fn_rate.map_or("n/a".into(), |v| format!("{v:.3}")),
        );
    }
    out
}
