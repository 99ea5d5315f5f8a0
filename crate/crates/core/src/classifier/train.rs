//! Plain minibatch SGD on the flat parameter vector.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};

use super::EvalClassifier;

/// SGD hyperparameters. `lr_decay_every = 0` disables the decay schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.01,
            lr_decay_factor: 0.1,
            lr_decay_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Argument(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.lr_decay_factor > 0.0) || !self.lr_decay_factor.is_finite() {
            return Err(Error::Argument(format!(
                "lr decay factor {} must be positive",
                self.lr_decay_factor
            )));
        }
        Ok(())
    }
}

/// Trains a copy of the model and also reports the mean training loss per
/// epoch (measured on each batch before its update, as usual).
///
/// Epoch order is a full deterministic shuffle from the config seed; the
/// final short batch is kept. Per-sample gradients inside a batch may be
/// computed in parallel but are summed in sample order, so the result is
/// identical with or without the `parallel` feature.
pub fn train_traced(
    model: &EvalClassifier,
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(EvalClassifier, Vec<f64>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("training on an empty dataset".into()));
    }
    let (h, w, c) = dataset.image_shape()?;
    if (h, w, c) != model.input_shape() {
        return Err(Error::Dimension(format!(
            "dataset images are {h}x{w}x{c}, model expects {:?}",
            model.input_shape()
        )));
    }
    if let Some(&bad) = dataset.labels().iter().find(|&&l| l >= model.num_classes()) {
        return Err(Error::Consistency(format!(
            "label {bad} outside the model's {} classes",
            model.num_classes()
        )));
    }

    let mut trained = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut lr = config.learning_rate;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        if epoch > 0 && config.lr_decay_every > 0 && epoch % config.lr_decay_every == 0 {
            lr *= config.lr_decay_factor;
        }
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;

        for batch in order.chunks(config.batch_size) {
            let per_sample = crate::par::map_slice(batch, |&i| {
                trained
                    .loss_and_grad(dataset.image(i), dataset.label(i))
                    .expect("shapes and labels validated above")
            });
            let scale = 1.0 / batch.len() as f64;
            let params = trained.params_mut();
            for (loss, grad) in &per_sample {
                loss_sum += loss;
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * scale * g;
                }
            }
        }
        epoch_losses.push(loss_sum / dataset.len() as f64);
    }
    Ok((trained, epoch_losses))
}

/// [`train_traced`] without the loss trace.
pub fn train(
    model: &EvalClassifier,
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<EvalClassifier> {
    Ok(train_traced(model, dataset, config)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{accuracy, Descriptor, LayerSpec};
    use crate::image::Image;

    /// Two linearly separable classes: dark vs bright constant tiles with a
    /// deterministic per-sample wobble.
    fn separable_toy(n: usize) -> LabeledDataset {
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let base = if class == 0 { 0.2 } else { 0.8 };
            let wobble = (i / 2) as f64 * 0.002;
            images.push(Image::constant(2, 2, 1, base + wobble).unwrap());
            labels.push(class);
        }
        LabeledDataset::new(images, labels, 2).unwrap()
    }

    fn linear_descriptor() -> Descriptor {
        Descriptor::new(vec![LayerSpec::Dense { out_features: 2 }, LayerSpec::Softmax])
    }

    #[test]
    fn separable_toy_set_reaches_full_accuracy() {
        let ds = separable_toy(100);
        let model = EvalClassifier::init(&linear_descriptor(), (2, 2, 1), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 10,
            learning_rate: 0.5,
            seed: 3,
            ..TrainConfig::default()
        };
        let trained = train(&model, &ds, &cfg).unwrap();
        assert_eq!(accuracy(&trained, &ds).unwrap(), 1.0);
    }

    #[test]
    fn loss_decreases_on_learnable_data() {
        let ds = separable_toy(64);
        let model = EvalClassifier::init(&linear_descriptor(), (2, 2, 1), 5).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.2,
            seed: 1,
            ..TrainConfig::default()
        };
        let (_, losses) = train_traced(&model, &ds, &cfg).unwrap();
        assert_eq!(losses.len(), 2);
        assert!(losses[0] > losses[1], "epoch losses {losses:?} should fall");
    }

    #[test]
    fn single_sgd_step_matches_hand_computed_update() {
        // One sample, one batch, linear softmax model: the update must be
        // exactly p - onehot pushed through the dense layer.
        let image = Image::new(1, 2, 1, vec![0.3, 0.9]).unwrap();
        let ds = LabeledDataset::new(vec![image.clone()], vec![1], 2).unwrap();
        let d = Descriptor::new(vec![LayerSpec::Dense { out_features: 2 }, LayerSpec::Softmax]);
        let mut model = EvalClassifier::init(&d, (1, 2, 1), 0).unwrap();
        // Fixed weights W = [[0.5, -0.2], [0.1, 0.4]], b = [0.05, -0.05].
        let w = [0.5, -0.2, 0.1, 0.4, 0.05, -0.05];
        model.params_mut().copy_from_slice(&w);

        let x = [0.3, 0.9];
        let z = [
            w[0] * x[0] + w[1] * x[1] + w[4],
            w[2] * x[0] + w[3] * x[1] + w[5],
        ];
        let m = z[0].max(z[1]);
        let e = [(z[0] - m).exp(), (z[1] - m).exp()];
        let sum = e[0] + e[1];
        let p = [e[0] / sum, e[1] / sum];
        let dz = [p[0], p[1] - 1.0];
        let lr = 0.1;
        let expect = [
            w[0] - lr * dz[0] * x[0],
            w[1] - lr * dz[0] * x[1],
            w[2] - lr * dz[1] * x[0],
            w[3] - lr * dz[1] * x[1],
            w[4] - lr * dz[0],
            w[5] - lr * dz[1],
        ];

        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            learning_rate: lr,
            seed: 9,
            ..TrainConfig::default()
        };
        let trained = train(&model, &ds, &cfg).unwrap();
        for (got, want) in trained.params().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let ds = separable_toy(40);
        let model = EvalClassifier::init(&linear_descriptor(), (2, 2, 1), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 7,
            learning_rate: 0.1,
            seed: 42,
            ..TrainConfig::default()
        };
        let a = train(&model, &ds, &cfg).unwrap();
        let b = train(&model, &ds, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        let other = train(&model, &ds, &TrainConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.params(), other.params());
    }

    #[test]
    fn zero_epochs_returns_clone() {
        let ds = separable_toy(10);
        let model = EvalClassifier::init(&linear_descriptor(), (2, 2, 1), 2).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (out, losses) = train_traced(&model, &ds, &cfg).unwrap();
        assert_eq!(out.params(), model.params());
        assert!(losses.is_empty());
    }

    #[test]
    fn learning_rate_decay_changes_later_epochs() {
        let ds = separable_toy(30);
        let model = EvalClassifier::init(&linear_descriptor(), (2, 2, 1), 2).unwrap();
        let base = TrainConfig {
            epochs: 4,
            batch_size: 5,
            learning_rate: 0.1,
            lr_decay_factor: 0.1,
            lr_decay_every: 2,
            seed: 7,
        };
        let with_decay = train(&model, &ds, &base).unwrap();
        let without = train(&model, &ds, &TrainConfig { lr_decay_every: 0, ..base.clone() }).unwrap();
        assert_ne!(with_decay.params(), without.params());
    }

    #[test]
    fn invalid_configs_rejected() {
        let ds = separable_toy(10);
        let model = EvalClassifier::init(&linear_descriptor(), (2, 2, 1), 2).unwrap();
        let bad_batch = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(train(&model, &ds, &bad_batch).is_err());
        let bad_lr = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(train(&model, &ds, &bad_lr).is_err());
        let empty = LabeledDataset::new(vec![], vec![], 2).unwrap();
        assert!(train(&model, &empty, &TrainConfig::default()).is_err());
    }
}
