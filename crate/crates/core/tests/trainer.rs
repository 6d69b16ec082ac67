use gbuf_enhance::labels::GroundTruthLabels;
use gbuf_enhance::scenegen::{generate_dataset, LayoutConfig, StyleTag};
use gbuf_enhance::trainer::{Condition, ModelConfig, ThrottleConfig, TrainConfig, TrainData, Trainer};
use gbuf_enhance::Exec;

fn data(n: usize) -> TrainData {
    let cfg = LayoutConfig::default();
    let src = generate_dataset(&cfg, n, 1, StyleTag::Source, Exec::Parallel).unwrap();
    let tgt = generate_dataset(&cfg, n, 2, StyleTag::Target, Exec::Parallel).unwrap();
    TrainData::new(src, tgt, &GroundTruthLabels).unwrap()
}

fn trainer(cfg: TrainConfig, condition: Condition) -> Trainer {
    Trainer::new(cfg, ModelConfig::toy(), condition, data(8), 3, Exec::Parallel).unwrap()
}

fn disc_weights(t: &Trainer) -> Vec<Vec<(String, gbuf_autodiff::Tensor)>> {
    t.critic.stores.iter().map(|s| s.named_tensors()).collect()
}

#[test]
fn smoke_run_and_checkpoint_round_trip() {
    let mut t = trainer(TrainConfig::toy(), Condition::Ours);
    for _ in 0..200 {
        let log = t.step().unwrap();
        assert!(log.g_total.is_finite() && log.g_adv.is_finite() && log.g_perceptual.is_finite());
        for lv in &log.levels {
            assert!((0.0..=1.0).contains(&lv.accuracy));
            assert!((0.0..=0.9).contains(&lv.p_skip));
            assert!(lv.d_loss.is_none_or(f64::is_finite));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.gbck");
    t.save_checkpoint(&path).unwrap();
    let mut back = trainer(TrainConfig::toy(), Condition::Ours);
    back.load_checkpoint(&path).unwrap();
    assert_eq!(back.iteration, 200);
    assert_eq!(back.checkpoint_bytes(), t.checkpoint_bytes());

    let mut other = trainer(TrainConfig::toy(), Condition::Spade);
    assert!(other.load_checkpoint(&path).is_err());
}

#[test]
fn certain_skip_leaves_discriminators_untouched() {
    let cfg = TrainConfig {
        throttle: ThrottleConfig { enabled: true, r_target: 0.0, gain: 100.0, p_max: 1.0, ..Default::default() },
        ..TrainConfig::toy()
    };
    let mut t = trainer(cfg, Condition::Ours);
    let before = disc_weights(&t);
    let gen_before = t.gen_store.named_tensors();
    for _ in 0..10 {
        let log = t.step().unwrap();
        assert!(log.levels.iter().all(|l| l.p_skip == 1.0 && l.d_loss.is_none()));
    }
    assert_eq!(disc_weights(&t), before);
    assert!(t.disc_opts.iter().all(|o| o.step == 0));
    assert_ne!(t.gen_store.named_tensors(), gen_before);
}

#[test]
fn no_adaptive_backprop_never_skips() {
    let mut t = trainer(TrainConfig::toy(), Condition::NoAdaptiveBackprop);
    for _ in 0..30 {
        let log = t.step().unwrap();
        assert!(log.levels.iter().all(|l| l.p_skip == 0.0 && l.d_loss.is_some()));
    }
}

#[test]
fn every_condition_trains() {
    for (condition, iters) in [
        (Condition::Concat, 200),
        (Condition::PatchGan, 60),
        (Condition::NoGbuffer, 20),
        (Condition::Spade, 20),
        (Condition::NoProjection, 20),
        (Condition::UniformCrop(48), 20),
    ] {
        let mut t = trainer(TrainConfig::toy(), condition);
        for _ in 0..iters {
            let log = t.step().unwrap();
            assert!(log.g_total.is_finite(), "{condition}");
        }
        let s = &t.data.source[0];
        let y = t.enhance(s).unwrap();
        assert_eq!(y.shape(), s.image.shape());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)), "{condition}");
    }
}
