//! Training-loop behavior on the synthetic corpus: determinism, the zero
//! learning-rate identity, and the empirical loss-descent run.

use adaact::data::{generate_corpus, SynthConfig};
use adaact::train::{prepare_samples, Model, ModelMeta, Trainer, TrainConfig};

fn small_corpus(seed: u64) -> (SynthConfig, adaact::data::SynthCorpus) {
    let cfg = SynthConfig {
        videos_per_activity: 3,
        t_min: 40,
        t_max: 80,
        seed,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    (cfg, corpus)
}

fn small_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-4,
        epochs: 2,
        d: 16,
        m: 2,
        c_out: 8,
        w: 5,
        d_hidden: 24,
        n_layers: 1,
        n_heads: 2,
        seed,
        ..TrainConfig::default()
    }
}

fn build_trainer(synth: &SynthConfig, corpus: &adaact::data::SynthCorpus, cfg: TrainConfig) -> Trainer {
    let videos = corpus.loaded_videos(&corpus.train_ids);
    let meta = ModelMeta {
        e_dim: synth.hoi_dim,
        f_dim: synth.feat_dim,
        action_names: corpus.actions.names.clone(),
    };
    let model = Model::new(cfg, meta).unwrap();
    let samples = prepare_samples(&videos, &corpus.actions, &model.cfg).unwrap();
    Trainer::new(model, samples).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let (synth, corpus) = small_corpus(3);
    let cfg = TrainConfig {
        lr: 0.0,
        ..small_train_config(3)
    };
    let mut trainer = build_trainer(&synth, &corpus, cfg);
    let before: Vec<Vec<f64>> = trainer.model.params().iter().map(|p| p.values()).collect();
    trainer.train_epoch().unwrap();
    let after: Vec<Vec<f64>> = trainer.model.params().iter().map(|p| p.values()).collect();
    assert_eq!(before, after);
}

#[test]
fn fixed_seed_reproduces_the_loss_trace() {
    let (synth, corpus) = small_corpus(4);
    let run = || {
        let mut trainer = build_trainer(&synth, &corpus, small_train_config(4));
        let mut losses = Vec::new();
        for _ in 0..3 {
            losses.push(trainer.train_epoch().unwrap().mean_loss);
        }
        losses
    };
    let a = run();
    let b = run();
    assert_eq!(
        a.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn pseudo_label_mode_trains_without_error() {
    let (synth, corpus) = small_corpus(5);
    let cfg = TrainConfig {
        loss_mode: adaact::train::LossMode::PseudoLabel,
        ..small_train_config(5)
    };
    let mut trainer = build_trainer(&synth, &corpus, cfg);
    for _ in 0..2 {
        let report = trainer.train_epoch().unwrap();
        assert!(report.mean_loss.is_finite());
        assert_eq!(report.skipped, 0);
    }
}

/// Empirical descent: on the default corpus the mean discriminative loss
/// strictly decreases over the first 50 epochs, for seeds 0, 1, and 2.
/// Re-estimation is scheduled after the probed window; refreshed statistics
/// legitimately bump the loss when they land inside it.
#[test]
fn mean_loss_strictly_decreases_over_first_fifty_epochs() {
    for seed in [0u64, 1, 2] {
        let synth = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&synth).unwrap();
        let cfg = TrainConfig {
            lr: 1e-4,
            epochs: 50,
            w: 5,
            reestimate_every: 60,
            seed,
            ..TrainConfig::default()
        };
        let mut trainer = build_trainer(&synth, &corpus, cfg);
        let mut losses = Vec::with_capacity(50);
        for _ in 0..50 {
            losses.push(trainer.train_epoch().unwrap().mean_loss);
        }
        for (i, w) in losses.windows(2).enumerate() {
            assert!(
                w[1] < w[0],
                "seed {seed}: loss rose at epoch {} -> {}: {} -> {}",
                i,
                i + 1,
                w[0],
                w[1]
            );
        }
    }
}
