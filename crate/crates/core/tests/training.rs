mod common;

use common::{tiny_utterances, truncate};
use moa_tts::data::{RenderConfig, Utterance};
use moa_tts::model::{ModelConfig, MoaConfig, TtsModel, DESK_BOTTLENECK};
use moa_tts::train::{evaluate_losses, metrics_csv, resume, train_two_phase, CheckpointSink, TrainConfig, Trainer};
use moa_tts::Error;

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        phase1_steps: 6,
        phase2_steps: 6,
        batch_size: 4,
        warmup_steps: 20,
        seed,
        ..TrainConfig::default()
    }
}

fn pool(n: usize, seed: u64) -> Vec<Utterance> {
    tiny_utterances(n, seed, RenderConfig::default()).iter().map(|u| truncate(u, 12)).collect()
}

fn moa_cfg() -> ModelConfig {
    ModelConfig::small().with_moa(MoaConfig::sparse(DESK_BOTTLENECK))
}

#[test]
fn zero_lambda_total_is_sum_of_mse_terms() {
    let utts = pool(3, 1);
    let batch: Vec<_> = utts.iter().collect();
    let mut m = TtsModel::new(moa_cfg(), 0).unwrap();
    common::randomize_moa(&mut m, 3);
    let l = evaluate_losses(&m, &batch, 0.0).unwrap();
    assert_eq!(l.total, l.mel + l.duration + l.pitch + l.energy);
    assert!(l.importance > 0.0);
    let weighted = evaluate_losses(&m, &batch, 0.1).unwrap();
    assert!((weighted.total - (l.task() + 0.1 * l.importance)).abs() < 1e-12);
}

#[test]
fn mse_terms_vanish_on_own_outputs() {
    let utts = pool(1, 2);
    let m = TtsModel::new(ModelConfig::small(), 0).unwrap();
    let u = &utts[0];
    let s = m.synthesize(&u.phonemes, &u.reference, Some(&u.durations)).unwrap();
    // Predicted durations replace the targets; pitch/energy targets are the
    // model's own predictions, which also become its teacher-forced inputs.
    let durations = s.predicted_durations.clone();
    if durations.iter().sum::<usize>() == 0 {
        return;
    }
    let own = m.synthesize(&u.phonemes, &u.reference, Some(&durations)).unwrap();
    let mut v = u.clone();
    v.durations = durations;
    v.pitch = own.pitch.clone();
    v.energy = own.energy.clone();
    v.mel = own.mel.clone();
    let l = evaluate_losses(&m, &[&v], 0.0).unwrap();
    assert!(l.pitch < 1e-20 && l.energy < 1e-20 && l.mel < 1e-20, "{l:?}");
}

#[test]
fn identity_at_insertion_through_training() {
    let utts = pool(8, 3);
    let refs: Vec<_> = utts.iter().collect();
    let out = train_two_phase(&moa_cfg(), &quick_cfg(4), &refs, &refs[..4], None).unwrap();
    let (before, after) = out.insertion_check.unwrap();
    assert_eq!(before, after);
    assert_eq!(out.log.len(), 12);
    assert!(out.log.iter().take(6).all(|r| r.phase == 1));
    assert!(out.log.iter().skip(6).all(|r| r.phase == 2));
    assert_eq!(out.backbone.count_parameters().moa_added, 0);
}

#[test]
fn baseline_uses_same_total_budget() {
    let utts = pool(8, 3);
    let refs: Vec<_> = utts.iter().collect();
    let cfg = quick_cfg(4);
    let moa = train_two_phase(&moa_cfg(), &cfg, &refs, &refs[..2], None).unwrap();
    let base = train_two_phase(&ModelConfig::small(), &cfg, &refs, &refs[..2], None).unwrap();
    assert_eq!(moa.log.len(), base.log.len());
    assert_eq!(moa.log.last().unwrap().step, base.log.last().unwrap().step);
    // Phase 1 is shared exactly.
    assert_eq!(moa.log[..6], base.log[..6]);
}

#[test]
fn training_is_deterministic() {
    let utts = pool(6, 5);
    let refs: Vec<_> = utts.iter().collect();
    let a = train_two_phase(&moa_cfg(), &quick_cfg(7), &refs, &refs[..2], None).unwrap();
    let b = train_two_phase(&moa_cfg(), &quick_cfg(7), &refs, &refs[..2], None).unwrap();
    let p = serde_json::json!({"seed": 7});
    assert_eq!(metrics_csv(&a.log, &p), metrics_csv(&b.log, &p));
}

#[test]
fn one_step_updates_embedding_module() {
    let utts = pool(4, 6);
    let refs: Vec<_> = utts.iter().collect();
    let m = TtsModel::new(ModelConfig::small(), 1).unwrap();
    let before = m.params.clone();
    let mut t = Trainer::new(m, quick_cfg(1)).unwrap();
    t.train_step(&refs, 1).unwrap();
    let changed = before
        .iter()
        .filter(|(_, n, _)| n.starts_with("speaker."))
        .any(|(id, _, v)| t.model.params.get(id) != v);
    assert!(changed);
}

#[test]
fn checkpoints_written_and_resume_checks_config() {
    let dir = tempfile::tempdir().unwrap();
    let utts = pool(6, 8);
    let refs: Vec<_> = utts.iter().collect();
    let sink = CheckpointSink {
        dir: dir.path().to_path_buf(),
        provenance: serde_json::json!({"seed": 2}),
    };
    let cfg = TrainConfig {
        checkpoint_every: 4,
        ..quick_cfg(2)
    };
    let out = train_two_phase(&moa_cfg(), &cfg, &refs, &refs[..2], Some(&sink)).unwrap();
    for f in ["backbone.ckpt", "moa.ckpt", "step000004.ckpt", "step000008.ckpt", "step000012.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let (m, step) = resume(&dir.path().join("moa.ckpt"), &moa_cfg()).unwrap();
    assert_eq!(step, 12);
    let a = evaluate_losses(&out.model, &refs, 0.1).unwrap();
    let b = evaluate_losses(&m, &refs, 0.1).unwrap();
    assert_eq!(a.total.to_bits(), b.total.to_bits());
    assert!(matches!(resume(&dir.path().join("moa.ckpt"), &ModelConfig::small()), Err(Error::Load(_))));
}

#[test]
fn non_finite_input_is_reported() {
    let mut utts = pool(1, 9);
    utts[0].mel.data_mut()[0] = f64::NAN;
    let refs: Vec<_> = utts.iter().collect();
    let mut t = Trainer::new(TtsModel::new(ModelConfig::small(), 0).unwrap(), quick_cfg(0)).unwrap();
    let err = t.train_step(&refs, 1).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn loss_decreases_over_first_two_hundred_steps() {
    let mut drops = vec![];
    for seed in 0..3u64 {
        let utts = pool(24, 20 + seed);
        let refs: Vec<_> = utts.iter().collect();
        let cfg = TrainConfig {
            batch_size: 4,
            warmup_steps: 50,
            seed,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(TtsModel::new(ModelConfig::small(), seed).unwrap(), cfg).unwrap();
        t.run(&refs, 200, 1, None).unwrap();
        let head: f64 = t.log[..20].iter().map(|r| r.losses.total).sum::<f64>() / 20.0;
        let tail: f64 = t.log[180..].iter().map(|r| r.losses.total).sum::<f64>() / 20.0;
        drops.push(head - tail);
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] > 0.0, "{drops:?}");
}
