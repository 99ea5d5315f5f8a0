//! Black-box trigger search by simulated annealing.
//!
//! Candidates are full resamples of the trigger (fresh bands, fresh
//! deltas). Each one is scored by poisoning a designated subset, briefly
//! retraining a frozen surrogate snapshot, and reading off the combined
//! objective. Because every candidate starts from the same snapshot with
//! the same retrain seed, scores do not depend on evaluation order and the
//! whole search is reproducible from one seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{train, Descriptor, EvalClassifier, TrainConfig};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::objective::{total_objective, ObjectiveValue};
use crate::trigger::{poison_dataset, random_trigger, resample_trigger, FrequencyRegion, FrequencyTrigger};

/// How a candidate with a worse objective is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcceptanceMode {
    /// Only improvements are adopted.
    Greedy,
    /// Worse candidates are adopted with probability exp(-delta / T).
    Metropolis,
}

/// Annealing schedule and proposal bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealConfig {
    pub initial_temperature: f64,
    pub final_temperature: f64,
    /// Per-block cooling: `T <- T - cooling_rate * T`.
    pub cooling_rate: f64,
    pub iters_per_temperature: usize,
    pub acceptance: AcceptanceMode,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> AnnealConfig {
        AnnealConfig {
            initial_temperature: 1.0,
            final_temperature: 0.1,
            cooling_rate: 0.3,
            iters_per_temperature: 4,
            acceptance: AcceptanceMode::Metropolis,
            seed: 0,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("initial temperature", self.initial_temperature),
            ("final temperature", self.final_temperature),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!("{name} {v} must be positive")));
            }
        }
        if !(self.cooling_rate > 0.0 && self.cooling_rate < 1.0) {
            return Err(Error::Argument(format!(
                "cooling rate {} outside (0, 1)",
                self.cooling_rate
            )));
        }
        Ok(())
    }
}

/// Number of temperature blocks the loop will run: the count of k >= 0
/// with `T0 * (1 - alpha)^k >= Tf`, which is `ceil(ln(Tf/T0) / ln(1-alpha))`
/// away from exact-power boundaries.
pub fn temperature_block_count(config: &AnnealConfig) -> usize {
    if config.final_temperature > config.initial_temperature {
        return 0;
    }
    let ratio = (config.final_temperature / config.initial_temperature).ln()
        / (1.0 - config.cooling_rate).ln();
    (ratio.floor() as usize) + 1
}

/// One scored candidate in the search history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub temperature: f64,
    /// 1-based within a temperature block; 0 marks the initial trigger.
    pub iteration: usize,
    pub objective: ObjectiveValue,
    pub accepted: bool,
}

/// Search output: the incumbent-independent best trigger, its score, the
/// full candidate history and the number of objective evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealResult {
    pub best_trigger: FrequencyTrigger,
    pub best_objective: ObjectiveValue,
    pub trace: Vec<TraceEntry>,
    pub evaluations: usize,
}

/// Core loop, generic over the candidate evaluator so tests can run it
/// against stubs. `n_bands` and `epsilon` shape every proposal.
pub fn optimize_trigger_with<E>(
    config: &AnnealConfig,
    region: &FrequencyRegion,
    channels: usize,
    n_bands: usize,
    epsilon: f64,
    mut evaluate: E,
) -> Result<AnnealResult>
where
    E: FnMut(&FrequencyTrigger) -> Result<ObjectiveValue>,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut current = random_trigger(region, channels, n_bands, epsilon, &mut rng)?;
    let mut current_val = evaluate(&current)?;
    let mut evaluations = 1;
    let mut trace = vec![TraceEntry {
        temperature: config.initial_temperature,
        iteration: 0,
        objective: current_val,
        accepted: true,
    }];
    let mut best = current.clone();
    let mut best_val = current_val;

    let mut temperature = config.initial_temperature;
    while temperature >= config.final_temperature {
        for iteration in 1..=config.iters_per_temperature {
            let candidate = resample_trigger(&current, region, channels, &mut rng)?;
            let value = evaluate(&candidate)?;
            evaluations += 1;

            let delta = value.total - current_val.total;
            let accepted = if delta < 0.0 {
                true
            } else {
                match config.acceptance {
                    AcceptanceMode::Greedy => false,
                    AcceptanceMode::Metropolis => {
                        rng.random::<f64>() < (-delta / temperature).exp()
                    }
                }
            };
            trace.push(TraceEntry {
                temperature,
                iteration,
                objective: value,
                accepted,
            });
            if accepted {
                current = candidate;
                current_val = value;
                if value.total < best_val.total {
                    best = current.clone();
                    best_val = value;
                }
            }
        }
        temperature -= config.cooling_rate * temperature;
    }

    Ok(AnnealResult {
        best_trigger: best,
        best_objective: best_val,
        trace,
        evaluations,
    })
}

/// Everything a candidate evaluation needs, with the surrogate snapshot
/// frozen so evaluations never influence one another.
#[derive(Debug, Clone)]
pub struct SearchContext<'a> {
    snapshot: &'a EvalClassifier,
    dataset: &'a LabeledDataset,
    poison_indices: &'a [usize],
    clean_subset: Vec<Image>,
    target_label: usize,
    retrain: TrainConfig,
    lambda_penalty: f64,
}

impl<'a> SearchContext<'a> {
    /// Validates the pieces once so the hot loop can assume them. The
    /// retrain config's `epochs` field is the per-candidate budget; its
    /// seed is fixed here and shared by every candidate.
    pub fn new(
        snapshot: &'a EvalClassifier,
        dataset: &'a LabeledDataset,
        poison_indices: &'a [usize],
        target_label: usize,
        retrain: TrainConfig,
        lambda_penalty: f64,
    ) -> Result<SearchContext<'a>> {
        if poison_indices.is_empty() {
            return Err(Error::Argument("search needs a non-empty poison subset".into()));
        }
        if let Some(&bad) = poison_indices.iter().find(|&&i| i >= dataset.len()) {
            return Err(Error::Argument(format!(
                "poison index {bad} outside dataset of {}",
                dataset.len()
            )));
        }
        if target_label >= snapshot.num_classes() {
            return Err(Error::Argument(format!(
                "target label {target_label} outside 0..{}",
                snapshot.num_classes()
            )));
        }
        let clean_subset = poison_indices.iter().map(|&i| dataset.image(i).clone()).collect();
        Ok(SearchContext {
            snapshot,
            dataset,
            poison_indices,
            clean_subset,
            target_label,
            retrain,
            lambda_penalty,
        })
    }

    pub fn target_label(&self) -> usize {
        self.target_label
    }
}

/// Scores one trigger: poison the subset, retrain a copy of the snapshot
/// for the configured number of epochs, and evaluate the objective on the
/// poisoned items. Pure in its inputs; the snapshot is never mutated.
pub fn evaluate_candidate(ctx: &SearchContext, trigger: &FrequencyTrigger) -> Result<ObjectiveValue> {
    let poisoned = poison_dataset(ctx.dataset, ctx.poison_indices, trigger, ctx.target_label)?;
    let retrained = train(ctx.snapshot, &poisoned, &ctx.retrain)?;
    total_objective(
        &retrained,
        &ctx.clean_subset,
        trigger,
        ctx.target_label,
        ctx.lambda_penalty,
    )
}

/// Initializes a fresh model and trains it briefly on clean data; the
/// result is the frozen snapshot the search retrains per candidate.
pub fn semi_train_surrogate(
    descriptor: &Descriptor,
    dataset: &LabeledDataset,
    init_seed: u64,
    warmup: &TrainConfig,
) -> Result<EvalClassifier> {
    let shape = dataset.image_shape()?;
    let model = EvalClassifier::init(descriptor, shape, init_seed)?;
    train(&model, dataset, warmup)
}

/// Full search against a real surrogate context.
pub fn optimize_trigger(
    config: &AnnealConfig,
    ctx: &SearchContext,
    region: &FrequencyRegion,
    n_bands: usize,
    epsilon: f64,
) -> Result<AnnealResult> {
    let (_, _, channels) = ctx.dataset.image_shape()?;
    optimize_trigger_with(config, region, channels, n_bands, epsilon, |t| {
        evaluate_candidate(ctx, t)
    })
}
