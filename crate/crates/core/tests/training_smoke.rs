use r2au_core::data::{synth_blobs, SamplePair, SynthConfig};
use r2au_core::losses::LossConfig;
use r2au_core::training::{log_csv, train, TrainConfig};
use r2au_core::{ModelConfig, R2AUNet};

fn data(n: usize, seed: u64) -> Vec<SamplePair> {
    synth_blobs(&SynthConfig {
        n_samples: n,
        image_size: 32,
        blob_count: (1, 2),
        blob_radius: (3.0, 6.0),
        noise_level: 0.0,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_model(seed: u64) -> R2AUNet<f32> {
    let cfg = ModelConfig {
        depth: 2,
        base_channels: 4,
        ..ModelConfig::default()
    }
    .with_size(32, 32);
    R2AUNet::build(&cfg, seed).unwrap()
}

fn config(loss: LossConfig, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        batch_size: 4,
        loss,
        ..TrainConfig::default()
    };
    cfg.optimizer.lr = 2e-3;
    cfg
}

#[test]
fn every_loss_decreases_on_clean_data() {
    let all = data(20, 3);
    let (train_set, val_set) = all.split_at(16);
    let losses = [
        LossConfig::wbce(0.3),
        LossConfig::dice(),
        LossConfig::bce_dice(),
        LossConfig::tversky(0.3, 0.7),
        LossConfig::focal_tversky(0.3, 0.7, 0.75),
    ];
    for loss in losses {
        for seed in 0..3 {
            let out = train(
                small_model(seed),
                train_set,
                val_set,
                &config(loss.clone(), 6),
                seed,
                None,
                |_| {},
            )
            .unwrap();
            let first = out.log.first().unwrap().train_loss;
            let last = out.log.last().unwrap().train_loss;
            assert!(
                last < first,
                "{:?} seed {seed}: loss went from {first} to {last}",
                loss.kind
            );
        }
    }
}

#[test]
fn metric_log_is_reproducible() {
    let all = data(12, 8);
    let (train_set, val_set) = all.split_at(8);
    let run = || {
        let out = train(
            small_model(4),
            train_set,
            val_set,
            &config(LossConfig::default(), 2),
            4,
            None,
            |_| {},
        )
        .unwrap();
        (log_csv(&out.log), out.model)
    };
    let (log_a, model_a) = run();
    let (log_b, model_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(model_a, model_b);
}

#[test]
fn restored_model_is_the_best_validation_epoch() {
    let all = data(12, 2);
    let (train_set, val_set) = all.split_at(8);
    let out = train(
        small_model(1),
        train_set,
        val_set,
        &config(LossConfig::default(), 4),
        1,
        None,
        |_| {},
    )
    .unwrap();
    let best = out
        .log
        .iter()
        .map(|l| l.val.dice)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.registry.best().unwrap().val_dice, best);
    assert_eq!(out.best_metrics().unwrap().dice, best);
    assert_eq!(out.registry.best_model(), Some(&out.model));
}

#[test]
fn step_count_follows_batching() {
    let all = data(12, 5);
    let (train_set, val_set) = all.split_at(8);
    let out = train(
        small_model(0),
        train_set,
        val_set,
        &config(LossConfig::default(), 1),
        0,
        None,
        |_| {},
    )
    .unwrap();
    assert_eq!(out.steps, 2);
    let mut cfg = config(LossConfig::default(), 2);
    cfg.batch_size = 3;
    let out = train(small_model(0), train_set, val_set, &cfg, 0, None, |_| {}).unwrap();
    assert_eq!(out.steps, 6);
}

#[test]
fn overlapping_sets_are_rejected() {
    let all = data(6, 1);
    let err = train(
        small_model(0),
        &all[..4],
        &all[3..],
        &config(LossConfig::default(), 1),
        0,
        None,
        |_| {},
    );
    assert!(err.is_err());
}
