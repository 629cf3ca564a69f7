use arnn::data::{synth_generate, SynthConfig};
use arnn::model::{ArnnModel, ModelConfig, Segment};
use arnn::training::{lr_at, split_train_test, train, Metrics, TrainConfig};
use proptest::prelude::*;

fn small_task(seed: u64) -> (Vec<Segment>, Vec<Segment>) {
    let cfg = SynthConfig { c: 4, n: 128, count_per_class: 20, seed, ..SynthConfig::default() };
    let split = split_train_test(&synth_generate(&cfg).unwrap().segments, 0.75, seed).unwrap();
    (split.train, split.test)
}

#[test]
fn training_is_bit_reproducible() {
    let (tr, te) = small_task(3);
    let config = TrainConfig { epochs: 3, batch_size: 8, seed: 3, ..TrainConfig::default() };
    let run = || {
        let mut model = ArnnModel::new(ModelConfig::new(4, 128, 8, 4, 0.3).unwrap(), 3);
        let log = train(&mut model, &tr, &te, &config).unwrap();
        (model.to_bytes(), log.to_csv())
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_is_finite_across_window_and_state_grid() {
    let (tr, te) = small_task(1);
    let config = TrainConfig { epochs: 2, batch_size: 10, seed: 1, ..TrainConfig::default() };
    for (l, s) in [(2, 8), (4, 8), (8, 8), (16, 8), (32, 8), (8, 2), (8, 4), (8, 16)] {
        let mut model = ArnnModel::new(ModelConfig::new(4, 128, l, s, 0.3).unwrap(), 1);
        let log = train(&mut model, &tr, &te, &config).unwrap();
        assert!(log.epochs.iter().all(|r| r.train_loss.is_finite()), "l={l} s={s}");
        assert!(model.params().all(|p| p.value.is_finite()), "l={l} s={s}");
    }
}

proptest! {
    #[test]
    fn lr_is_piecewise_constant_and_non_increasing(
        lr0 in 1e-5f64..1.0, decay in 0.01f64..1.0, every in 1usize..12, epoch in 0usize..200,
    ) {
        let cfg = TrainConfig { lr0, decay_factor: decay, decay_every: every, ..TrainConfig::default() };
        prop_assert!(lr_at(epoch + 1, &cfg) <= lr_at(epoch, &cfg));
        if (epoch + 1) % every != 0 {
            prop_assert_eq!(lr_at(epoch + 1, &cfg), lr_at(epoch, &cfg));
        }
    }

    #[test]
    fn metric_identities(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..200)) {
        let m = Metrics::from_pairs(pairs.iter().copied());
        prop_assert_eq!(m.total(), pairs.len());
        let correct = pairs.iter().filter(|(y, p)| y == p).count();
        prop_assert_eq!(m.accuracy, correct as f64 / pairs.len() as f64);
        if m.precision + m.recall > 0.0 {
            let harmonic = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            prop_assert!((m.f1 - harmonic).abs() <= 1e-15);
        }
        let predicted = m.tp + m.fp;
        if predicted > 0 {
            prop_assert_eq!(m.precision, m.tp as f64 / predicted as f64);
        }
    }
}
