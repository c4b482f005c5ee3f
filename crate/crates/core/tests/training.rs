use mvfn_core::data::{chronological_split, PreparedWindows};
use mvfn_core::model::MvfnConfig;
use mvfn_core::synth::{generate, SynthConfig};
use mvfn_core::train::{initial_checkpoint, train, TrainConfig, TrainingData};

/// Capacity check: on clean sinusoidal demand the training loss must fall tenfold.
#[test]
fn overfits_a_sinusoidal_dataset() {
    let data = generate(&SynthConfig {
        noise_std: 0.0,
        ar_std: 0.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let split = chronological_split(&data.tensor, 1, 1, 12, 12).unwrap();
    let windows = PreparedWindows::from_split(&split, 12, 12, 4).unwrap();
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 32,
        seed: 2,
        ..TrainConfig::default()
    };
    let state = initial_checkpoint(MvfnConfig::new(8), tc, data.adjacency, windows.scaler.clone()).unwrap();
    let input = TrainingData {
        train: &windows.train,
        validation: &windows.validation,
        scaler: &windows.scaler,
    };
    let outcome = train(state, &input, |_| {}).unwrap();
    assert!(outcome.aborted.is_none());
    let first = outcome.reports[0].train_loss;
    let best = outcome
        .reports
        .iter()
        .map(|r| r.train_loss)
        .fold(f64::INFINITY, f64::min);
    assert!(first / best >= 10.0, "epoch 1 {first:.4}, best {best:.4}");
}
