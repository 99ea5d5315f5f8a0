//! Throwaway calibration probe; never committed.

use freqdoor::annealing::{evaluate_candidate, SearchContext};
use freqdoor::classifier::{Descriptor, EvalClassifier, TrainConfig};
use freqdoor::dataset::select_poison_indices;
use freqdoor::experiment::stage_seed;
use freqdoor::experiment::{prepare_data, ExperimentConfig};
use freqdoor::trigger::FrequencyTrigger;

#[test]
fn probe_objective_ranking() {
    let config = ExperimentConfig::default();
    let (train_set, _test_set) = prepare_data(&config).unwrap();
    let master = 42u64;
    let descriptor = Descriptor::small_cnn(10);
    let indices =
        select_poison_indices(&train_set, 0.05, stage_seed(master, "poison-select")).unwrap();

    let strong = FrequencyTrigger::new(
        0.1,
        vec![[0, 0, 1], [0, 1, 0], [0, 1, 1]],
        vec![0.1, 0.1, 0.1],
    )
    .unwrap();
    let t1 = FrequencyTrigger::new(
        0.1,
        vec![[0, 0, 1], [0, 1, 0], [0, 1, 1]],
        vec![0.0803, 0.0803, 0.0803],
    )
    .unwrap();

    for (name, init_stage, train_stage) in [
        ("cross-a", "surrogate-init", "victim-low-train"),
        ("cross-b", "victim-low-init", "retrain"),
        ("cross-c", "surrogate-init", "probe-train"),
        ("cross-d", "probe-init", "retrain"),
    ] {
        let init = EvalClassifier::init(
            &descriptor,
            train_set.image_shape().unwrap(),
            stage_seed(master, init_stage),
        )
        .unwrap();
        let retrain = TrainConfig {
            epochs: 10,
            batch_size: 1,
            learning_rate: 0.04,
            lr_decay_every: 3,
            lr_decay_factor: 0.5,
            seed: stage_seed(master, train_stage),
        };
        let ctx = SearchContext::new(&init, &train_set, &indices, 7, retrain, 1.0).unwrap();
        for (tname, trig) in [("strong", &strong), ("t1", &t1)] {
            let v = evaluate_candidate(&ctx, trig).unwrap();
            println!("{name} {tname}: loss={:.4} pen={:.4}", v.backdoor_loss, v.penalty);
        }
    }
}
