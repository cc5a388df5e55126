//! Backdoor adversary.
//!
//! The attacker trains a backdoored model `X` from the current global model
//! and submits `L_m = G + (N / lambda) (X - G)`, which makes the aggregate
//! land on `X` when every other contributor's delta is zero.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::poison_dataset;
use crate::defense::{validate_or_accept, Vote};
use crate::ml::{empirical_accuracy, train_local, LabeledDataset, Model, TrainParams};
use crate::seed;
use crate::{ClientId, Error, Result};

/// Which inputs carry the backdoor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BackdoorKind {
    /// Every sample of `source` is a backdoor instance.
    LabelFlip { source: usize },
    /// Samples of `class` whose coordinate `feature` exceeds `threshold`.
    SemanticTrigger { class: usize, feature: usize, threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackdoorSpec {
    #[serde(flatten)]
    pub kind: BackdoorKind,
    /// Label the backdoor instances should receive.
    pub target: usize,
    /// Fraction of the attacker's training mixture that is poisoned, in `(0, 1]`.
    pub blend_ratio: f64,
}

impl BackdoorSpec {
    pub fn label_flip(source: usize, target: usize, blend_ratio: f64) -> Self {
        Self { kind: BackdoorKind::LabelFlip { source }, target, blend_ratio }
    }

    pub fn validate(&self, num_classes: usize, dim: usize) -> Result<()> {
        if self.target >= num_classes {
            return Err(Error::input(format!("target class {} out of range", self.target)));
        }
        match self.kind {
            BackdoorKind::LabelFlip { source } => {
                if source >= num_classes {
                    return Err(Error::input(format!("source class {source} out of range")));
                }
                if source == self.target {
                    return Err(Error::input("source and target class must differ"));
                }
            }
            BackdoorKind::SemanticTrigger { class, feature, threshold } => {
                if class >= num_classes {
                    return Err(Error::input(format!("trigger class {class} out of range")));
                }
                if class == self.target {
                    return Err(Error::input("trigger class and target class must differ"));
                }
                if feature >= dim {
                    return Err(Error::input(format!("trigger feature {feature} out of range")));
                }
                if !threshold.is_finite() {
                    return Err(Error::input("trigger threshold must be finite"));
                }
            }
        }
        if !(self.blend_ratio > 0.0 && self.blend_ratio <= 1.0) {
            return Err(Error::input("blend ratio must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Whether `(x, y)` is a backdoor instance.
    pub fn matches(&self, x: &[f64], y: usize) -> bool {
        match self.kind {
            BackdoorKind::LabelFlip { source } => y == source,
            BackdoorKind::SemanticTrigger { class, feature, threshold } => y == class && x[feature] > threshold,
        }
    }

    /// The backdoor instances of `data`, with their original labels.
    pub fn backdoor_set(&self, data: &LabeledDataset) -> LabeledDataset {
        data.filter(|x, y| self.matches(x, y))
    }

    /// Everything in `data` that is not a backdoor instance.
    pub fn clean_set(&self, data: &LabeledDataset) -> LabeledDataset {
        data.filter(|x, y| !self.matches(x, y))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerState {
    pub client_id: ClientId,
    pub dataset: LabeledDataset,
    pub spec: BackdoorSpec,
}

impl AttackerState {
    pub fn new(client_id: ClientId, dataset: LabeledDataset, spec: BackdoorSpec) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::input("attacker dataset must not be empty"));
        }
        spec.validate(dataset.num_classes(), dataset.dim())?;
        Ok(Self { client_id, dataset, spec })
    }
}

/// Fraction of `backdoor_set` that `model` assigns to `target`.
pub fn backdoor_accuracy(model: &Model, backdoor_set: &LabeledDataset, target: usize) -> Result<f64> {
    if backdoor_set.is_empty() {
        return Err(Error::input("backdoor set is empty"));
    }
    let hits = model.predict_all(backdoor_set)?.iter().filter(|&&p| p == target).count();
    Ok(hits as f64 / backdoor_set.len() as f64)
}

/// Training mixture: every clean attacker sample plus poisoned samples,
/// oversampled so that they make up `blend_ratio` of the mixture. With
/// `blend_ratio = 1` only poisoned samples are used; without any backdoor
/// instances the mixture is the clean data.
pub fn blended_dataset(attacker: &AttackerState, seed: u64) -> Result<LabeledDataset> {
    let spec = &attacker.spec;
    let poisoned = poison_dataset(&spec.backdoor_set(&attacker.dataset), spec)?;
    blend(&spec.clean_set(&attacker.dataset), &poisoned, spec.blend_ratio, seed)
}

fn blend(clean: &LabeledDataset, poisoned: &LabeledDataset, ratio: f64, seed: u64) -> Result<LabeledDataset> {
    if poisoned.is_empty() {
        return Ok(clean.clone());
    }
    if ratio >= 1.0 || clean.is_empty() {
        return Ok(poisoned.clone());
    }
    let wanted = (clean.len() as f64 * ratio / (1.0 - ratio)).round().max(1.0) as usize;
    // whole copies first, then a seeded sample for the remainder
    let mut idx: Vec<usize> = (0..wanted / poisoned.len()).flat_map(|_| 0..poisoned.len()).collect();
    let mut rng = seed::stream(seed, "blend", &[]);
    idx.extend((0..wanted % poisoned.len()).map(|_| rng.random_range(0..poisoned.len())));
    clean.concat(&poisoned.subset(&idx))
}

/// Like [`blended_dataset`], but the clean samples carry the labels `global`
/// predicts for them, so training on it preserves the current per-class
/// errors outside the backdoor.
pub fn mimic_dataset(global: &Model, attacker: &AttackerState, seed: u64) -> Result<LabeledDataset> {
    let spec = &attacker.spec;
    let clean = spec.clean_set(&attacker.dataset);
    let predicted = global.predict_all(&clean)?;
    let mut i = 0;
    let mimic = clean.relabel(|_, _| {
        i += 1;
        predicted[i - 1]
    });
    let poisoned = poison_dataset(&spec.backdoor_set(&attacker.dataset), spec)?;
    blend(&mimic, &poisoned, spec.blend_ratio, seed)
}

/// Trains the attacker's desired model `X` from `global` on the blended
/// mixture.
pub fn craft_backdoor_model(global: &Model, attacker: &AttackerState, params: &TrainParams) -> Result<Model> {
    let mixture = blended_dataset(attacker, params.seed)?;
    if mixture.is_empty() {
        return Ok(global.clone());
    }
    train_local(global, &mixture, params)
}

/// `L_m = G + (N / lambda) (X - G)`.
pub fn model_replacement_update(global: &Model, target: &Model, lambda: f64, total_clients: usize) -> Result<Model> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::config("global learning rate must be positive"));
    }
    if target.arch() != global.arch() {
        return Err(Error::input("target model architecture differs from the global model"));
    }
    let boost = total_clients as f64 / lambda;
    let params = global.params().iter().zip(target.params()).map(|(g, x)| g + boost * (x - g)).collect();
    Model::from_params(global.arch().clone(), params)
}

/// What the adaptive attacker knows about the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseKnowledge {
    pub lookback: usize,
    pub quorum: usize,
    pub global_lr: f64,
    pub total_clients: usize,
}

/// Fine-tuning epochs added after every failed attempt.
pub const ADAPTIVE_FINE_TUNE_EPOCHS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveOutcome {
    /// The update the attacker submits.
    pub update: Model,
    /// The model the aggregate lands on when honest deltas are zero.
    pub candidate: Model,
    pub iterations: usize,
    /// Interpolation factor applied to `X - G`.
    pub scale: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum AdaptiveError {
    #[error("no candidate passed the attacker-side check within {0} iterations")]
    GaveUp(usize),
    #[error(transparent)]
    Sim(#[from] Error),
}

/// Defense-aware model replacement.
///
/// The attacker runs the validation procedure on its own clean data against
/// the accepted history. While the candidate is flagged, `X` is fine-tuned on
/// [`mimic_dataset`] so that only the backdoor samples change their
/// prediction, and every second failure also shrinks the replacement to
/// `G + gamma (X - G)` with `gamma` halving. The first passing candidate is
/// returned, so its attacker-side verdict is always accept. A history shorter
/// than `lookback + 1` models means no defense is running and the plain
/// replacement update is returned after one iteration.
pub fn adaptive_craft(
    global: &Model,
    history: &[Model],
    attacker: &AttackerState,
    knowledge: &DefenseKnowledge,
    params: &TrainParams,
    max_iters: usize,
) -> Result<AdaptiveOutcome, AdaptiveError> {
    if max_iters == 0 {
        return Err(AdaptiveError::GaveUp(0));
    }
    let mut backdoored = craft_backdoor_model(global, attacker, params)?;
    let window = knowledge.lookback + 1;
    let active = history.len() >= window;
    let history = if active { &history[history.len() - window..] } else { history };
    let clean = attacker.spec.clean_set(&attacker.dataset);
    let mimic = mimic_dataset(global, attacker, params.seed)?;
    let mut scale = 1.0;
    for iteration in 1..=max_iters {
        let candidate = global.lerp(&backdoored, scale)?;
        let passes = !active || validate_or_accept(&candidate, history, &clean)?.is_none_or(|v| v.vote == Vote::Accept);
        if passes {
            let update = model_replacement_update(global, &candidate, knowledge.global_lr, knowledge.total_clients)?;
            return Ok(AdaptiveOutcome { update, candidate, iterations: iteration, scale });
        }
        let tune = TrainParams {
            epochs: ADAPTIVE_FINE_TUNE_EPOCHS,
            seed: seed::derive(params.seed, "adaptive-tune", &[iteration as u64]),
            ..params.clone()
        };
        backdoored = train_local(&backdoored, &mimic, &tune)?;
        if iteration % 2 == 0 {
            scale *= 0.5;
        }
    }
    Err(AdaptiveError::GaveUp(max_iters))
}

/// Main-task accuracy of the attacker's model on its own clean data, used
/// to check that the backdoor does not wreck the main task.
pub fn clean_accuracy(model: &Model, attacker: &AttackerState) -> Result<f64> {
    empirical_accuracy(model, &attacker.spec.clean_set(&attacker.dataset))
}
