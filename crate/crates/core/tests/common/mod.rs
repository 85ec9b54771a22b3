//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeSet;

use moa_tts::data::{make_speakers, RenderConfig, Renderer, Utterance};
use moa_tts::model::{ModelConfig, TtsModel};
use moa_tts::tensor::{compare_gradients, GradCheckReport, ABS_FLOOR};
use moa_tts::train::{batch_objective, evaluate_losses};
use moa_tts::params::Session;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

fn norm(d: usize) -> usize {
    2 * d
}

fn conv(k: usize, i: usize, o: usize) -> usize {
    k * i * o + o
}

/// Closed-form parameter counts derived from the layer shapes alone.
#[derive(Debug, PartialEq, Eq)]
pub struct AnalyticCount {
    pub backbone: usize,
    pub moa: usize,
}

pub fn adapter_count(d: usize, b: usize) -> usize {
    norm(d) + linear(d, b) + linear(b, d)
}

pub fn analytic_count(cfg: &ModelConfig) -> AnalyticCount {
    let d = cfg.d_model;
    let fft = linear(d, 3 * d) + linear(d, d) + 2 * norm(d) + conv(cfg.ffn_kernel, d, cfg.d_filter) + conv(1, cfg.d_filter, d);
    let pf = cfg.pred_filter;
    let predictor = conv(cfg.pred_kernel, d, pf) + norm(pf) + conv(cfg.pred_kernel, pf, pf) + norm(pf) + linear(pf, 1);
    let h = d / 2;
    let gru = linear(cfg.ref_width, 3 * h) + h * 3 * h + 3 * h;
    let speaker = cfg.ref_layers + 2 * gru + d + linear(d, d);
    let backbone = speaker
        + cfg.vocab_size * d
        + (cfg.enc_layers + cfg.dec_layers) * fft
        + 3 * predictor
        + 2 * linear(1, d)
        + linear(d, cfg.n_mels);
    let moa = match cfg.moa {
        None => 0,
        Some(m) => {
            let site = |dim: usize| linear(d, m.n_adapters) + m.n_adapters * adapter_count(dim, m.bottleneck);
            let mut total = 0;
            if m.sites.decoder() {
                total += cfg.dec_layers * site(d);
            }
            if m.sites.predictors() {
                total += 3 * site(pf);
            }
            total
        }
    };
    AnalyticCount { backbone, moa }
}

/// Short utterances rendered for a handful of speakers.
pub fn tiny_utterances(n: usize, seed: u64, render: RenderConfig) -> Vec<Utterance> {
    let speakers = make_speakers(2, seed).unwrap();
    let r = Renderer::new(render).unwrap();
    (0..n)
        .map(|i| {
            let s = &speakers[i % speakers.len()];
            r.render(s, &format!("u{i}"), seed.wrapping_mul(1000) + i as u64).unwrap()
        })
        .collect()
}

/// Cuts an utterance down to its first `p` phonemes.
pub fn truncate(u: &Utterance, p: usize) -> Utterance {
    let p = p.min(u.phonemes.len());
    let t: usize = u.durations[..p].iter().sum();
    let mut v = u.clone();
    v.phonemes.truncate(p);
    v.durations.truncate(p);
    v.pitch.truncate(t);
    v.energy.truncate(t);
    let cols = u.mel.cols();
    v.mel = moa_tts::Tensor::matrix(t, cols, u.mel.data()[..t * cols].to_vec()).unwrap();
    v
}

/// Sets every mixture up-projection to small random values so that adapter
/// paths carry gradient.
pub fn randomize_moa(model: &mut TtsModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.name(id).contains(".moa.") {
            for v in model.params.get_mut(id).data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
}

pub struct ModelGradCheck {
    pub report: GradCheckReport,
    /// Components with at least one sampled coordinate of nonzero gradient.
    pub components: BTreeSet<String>,
    pub sampled: Vec<(String, usize)>,
}

/// Compares tape gradients of the full objective with central differences
/// on `per_tensor` sampled coordinates of every parameter tensor.
pub fn model_gradcheck(model: &TtsModel, batch: &[&Utterance], lambda: f64, per_tensor: usize, seed: u64) -> ModelGradCheck {
    let grads = {
        let mut s = Session::inference(&model.params);
        let v = batch_objective(model, &mut s, batch, lambda).unwrap();
        s.graph.backward(v.total).unwrap();
        s.param_grads()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = model.clone();
    let h = 1e-5;
    let (mut analytic, mut numeric, mut sampled) = (vec![], vec![], vec![]);
    let mut components = BTreeSet::new();
    let ids: Vec<_> = model.params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let name = model.params.name(id).to_string();
        let n = model.params.get(id).numel();
        for _ in 0..per_tensor.min(n) {
            let i = rng.random_range(0..n);
            let orig = work.params.get(id).data()[i];
            work.params.get_mut(id).data_mut()[i] = orig + h;
            let plus = evaluate_losses(&work, batch, lambda).unwrap().total;
            work.params.get_mut(id).data_mut()[i] = orig - h;
            let minus = evaluate_losses(&work, batch, lambda).unwrap().total;
            work.params.get_mut(id).data_mut()[i] = orig;
            let numeric_grad = (plus - minus) / (2.0 * h);
            if grads[k][i].abs().max(numeric_grad.abs()) > ABS_FLOOR {
                components.insert(component(&name));
            }
            analytic.push(grads[k][i]);
            numeric.push(numeric_grad);
            sampled.push((name.clone(), i));
        }
    }
    ModelGradCheck {
        report: compare_gradients(&analytic, &numeric, 1e-4),
        components,
        sampled,
    }
}

pub fn component(name: &str) -> String {
    if name.contains(".moa.gate") {
        return "gate".into();
    }
    if name.contains(".moa.adapter") {
        return "adapter".into();
    }
    let first = name.split('.').next().unwrap();
    match first {
        "predictor" | "variance" => "predictor".into(),
        "embed" => "encoder".into(),
        "mel_out" => "decoder".into(),
        other => other.into(),
    }
}
