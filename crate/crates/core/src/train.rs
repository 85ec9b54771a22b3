//! Two-phase training: backbone pretraining, then mixture insertion and
//! joint training with MSE losses plus the importance loss.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{mix, Utterance};
use crate::error::{Error, Result};
use crate::format::{provenance_header, write_atomic};
use crate::model::{log_duration, normalize_pitch, Conditioning, ModelConfig, TtsModel};
use crate::moa::importance_loss;
use crate::params::{ParamStore, Session};
use crate::tensor::{Tensor, Var};

fn default_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_importance: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; `0` disables.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1_steps: 2000,
            phase2_steps: 2000,
            batch_size: 16,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            lambda_importance: 0.1,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("phase1_steps", self.phase1_steps),
            ("batch_size", self.batch_size),
            ("warmup_steps", self.warmup_steps),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lambda_importance >= 0.0 && self.lambda_importance.is_finite()) {
            return Err(Error::Config("lambda_importance must be a finite value >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("eps must be positive and clip_norm non-negative".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.phase1_steps + self.phase2_steps
    }
}

/// `d^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: usize, d_model: usize, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("learning-rate step counts from 1".into()));
    }
    if warmup == 0 || d_model == 0 {
        return Err(Error::Config("warmup and d_model must be positive".into()));
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// Adam moments keyed by parameter name, so state survives the change of
/// parameter set at mixture insertion.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>, u64)>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops state for parameters that no longer exist.
    pub fn retain(&mut self, store: &ParamStore) {
        self.moments.retain(|k, _| store.id(k).is_some());
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let name = store.name(id).to_string();
            let p = store.get_mut(id);
            let (m, v, t) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()], 0));
            *t += 1;
            let c1 = 1.0 - cfg.beta1.powi(*t as i32);
            let c2 = 1.0 - cfg.beta2.powi(*t as i32);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Scales `grads` in place to global norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub mel: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
    pub importance: f64,
}

impl StepLosses {
    /// Sum of the four MSE terms.
    pub fn task(&self) -> f64 {
        self.mel + self.duration + self.pitch + self.energy
    }
}

/// Graph handles of one batch objective.
pub struct LossVars {
    pub total: Var,
    pub mel: Var,
    pub duration: Var,
    pub pitch: Var,
    pub energy: Var,
    pub importance: Option<Var>,
}

fn mean_of(s: &mut Session<'_>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = s.graph.add(acc, v)?;
    }
    Ok(s.graph.scale(acc, 1.0 / vars.len() as f64))
}

/// Teacher-forced batch objective: per-utterance MSEs averaged over the
/// batch, plus `lambda` times the importance loss averaged over sites.
pub fn batch_objective(
    model: &TtsModel,
    s: &mut Session<'_>,
    batch: &[&Utterance],
    lambda: f64,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::Empty("batch has no utterances".into()));
    }
    let (mut mel, mut dur, mut pitch, mut energy) = (vec![], vec![], vec![], vec![]);
    let mut site_rows: Vec<Vec<Var>> = Vec::new();
    for u in batch {
        let out = model.forward(
            s,
            &u.phonemes,
            &u.reference,
            Conditioning::Teacher {
                durations: &u.durations,
                pitch: &u.pitch,
                energy: &u.energy,
            },
        )?;
        let t = u.frames();
        mel.push(s.graph.mse(out.mel, &u.mel)?);
        let dt = Tensor::matrix(u.durations.len(), 1, u.durations.iter().map(|&d| log_duration(d)).collect())?;
        dur.push(s.graph.mse(out.variance.log_duration, &dt)?);
        let pt = Tensor::matrix(t, 1, u.pitch.iter().map(|&p| normalize_pitch(p)).collect())?;
        pitch.push(s.graph.mse(out.variance.pitch, &pt)?);
        let et = Tensor::matrix(t, 1, u.energy.clone())?;
        energy.push(s.graph.mse(out.variance.energy, &et)?);
        if site_rows.is_empty() {
            site_rows = vec![Vec::with_capacity(batch.len()); out.gates.len()];
        }
        for (rows, g) in site_rows.iter_mut().zip(&out.gates) {
            rows.push(g.gate.weights);
        }
    }
    let mel = mean_of(s, &mel)?;
    let duration = mean_of(s, &dur)?;
    let pitch = mean_of(s, &pitch)?;
    let energy = mean_of(s, &energy)?;
    let mut total = s.graph.add(mel, duration)?;
    total = s.graph.add(total, pitch)?;
    total = s.graph.add(total, energy)?;
    let importance = if site_rows.is_empty() {
        None
    } else {
        let per_site = site_rows
            .iter()
            .map(|rows| importance_loss(&mut s.graph, rows))
            .collect::<Result<Vec<_>>>()?;
        let imp = mean_of(s, &per_site)?;
        let weighted = s.graph.scale(imp, lambda);
        total = s.graph.add(total, weighted)?;
        Some(imp)
    };
    Ok(LossVars {
        total,
        mel,
        duration,
        pitch,
        energy,
        importance,
    })
}

fn read_losses(s: &Session<'_>, v: &LossVars) -> Result<StepLosses> {
    let g = &s.graph;
    Ok(StepLosses {
        total: g.value(v.total).item()?,
        mel: g.value(v.mel).item()?,
        duration: g.value(v.duration).item()?,
        pitch: g.value(v.pitch).item()?,
        energy: g.value(v.energy).item()?,
        importance: match v.importance {
            Some(i) => g.value(i).item()?,
            None => 0.0,
        },
    })
}

/// Batch losses without dropout or parameter updates.
pub fn evaluate_losses(model: &TtsModel, batch: &[&Utterance], lambda: f64) -> Result<StepLosses> {
    let mut s = Session::inference(&model.params);
    let vars = batch_objective(model, &mut s, batch, lambda)?;
    read_losses(&s, &vars)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub phase: u8,
    pub lr: f64,
    pub losses: StepLosses,
}

pub const METRICS_HEADER: &str =
    "step,phase,lr,loss_total,loss_mel,loss_dur,loss_pitch,loss_energy,loss_importance";

pub fn metrics_csv(rows: &[LogRow], provenance: &Value) -> String {
    let mut out = provenance_header(provenance);
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.losses;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.step, r.phase, r.lr, l.total, l.mel, l.duration, l.pitch, l.energy, l.importance
        ));
    }
    out
}

/// Optimizer state plus a model; `step` counts updates across both phases.
pub struct Trainer {
    pub model: TtsModel,
    pub cfg: TrainConfig,
    pub step: usize,
    pub log: Vec<LogRow>,
    adam: Adam,
}

impl Trainer {
    pub fn new(model: TtsModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            cfg,
            step: 0,
            log: Vec::new(),
            adam: Adam::new(),
        })
    }

    /// Swaps in a model with a superset of parameters (mixture insertion);
    /// optimizer state of shared parameters is kept.
    pub fn replace_model(&mut self, model: TtsModel) {
        self.adam.retain(&model.params);
        self.model = model;
    }

    pub fn sample_batch<'c>(&self, pool: &[&'c Utterance]) -> Result<Vec<&'c Utterance>> {
        if pool.is_empty() {
            return Err(Error::Empty("no training utterances".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, 0xba7c_0000 + self.step as u64));
        Ok((0..self.cfg.batch_size)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect())
    }

    /// One Adam update on `batch`; a non-finite loss or gradient aborts with
    /// the first offending graph node.
    pub fn train_step(&mut self, batch: &[&Utterance], phase: u8) -> Result<StepLosses> {
        let step = self.step + 1;
        let lr = noam_lr(step, self.model.cfg.d_model, self.cfg.warmup_steps)?;
        let dropout_seed = mix(self.cfg.seed, 0xd40f_0000 + step as u64);
        let (losses, mut grads) = {
            let mut s = Session::new(&self.model.params, true, dropout_seed);
            let vars = batch_objective(&self.model, &mut s, batch, self.cfg.lambda_importance)?;
            if let Some((v, op)) = s.graph.first_non_finite() {
                return Err(Error::NonFinite(format!(
                    "step {step}: node {} ({op:?}) in the forward pass",
                    v.index()
                )));
            }
            let losses = read_losses(&s, &vars)?;
            s.graph.backward(vars.total)?;
            (losses, s.param_grads())
        };
        if let Some((i, _)) = grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.iter().any(|x| !x.is_finite()))
        {
            let id = self.model.params.ids().nth(i).expect("gradient per parameter");
            return Err(Error::NonFinite(format!(
                "step {step}: gradient of {}",
                self.model.params.name(id)
            )));
        }
        clip_global_norm(&mut grads, self.cfg.clip_norm);
        self.adam.update(&mut self.model.params, &grads, lr, &self.cfg);
        self.step = step;
        self.log.push(LogRow {
            step,
            phase,
            lr,
            losses,
        });
        Ok(losses)
    }

    pub fn run(&mut self, pool: &[&Utterance], steps: usize, phase: u8, ckpt: Option<&CheckpointSink>) -> Result<()> {
        for _ in 0..steps {
            let batch = self.sample_batch(pool)?;
            let l = self.train_step(&batch, phase)?;
            if self.step.is_multiple_of(50) {
                log::info!("step {} phase {phase} loss {:.5}", self.step, l.total);
            }
            if let Some(sink) = ckpt {
                if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                    sink.save(&self.model, &format!("step{:06}.ckpt", self.step), self.step, &self.cfg)?;
                }
            }
        }
        Ok(())
    }
}

/// Directory receiving checkpoints, tagged with run provenance.
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub provenance: Value,
}

impl CheckpointSink {
    pub fn save(&self, model: &TtsModel, file: &str, step: usize, cfg: &TrainConfig) -> Result<PathBuf> {
        let path = self.dir.join(file);
        model.save(
            &path,
            json!({ "step": step, "train_config": cfg, "provenance": self.provenance }),
        )?;
        Ok(path)
    }
}

/// Loads a checkpoint for resumption; the stored model config must match.
pub fn resume(path: &Path, expected: &ModelConfig) -> Result<(TtsModel, usize)> {
    let c = crate::format::Container::read(path)?;
    let model = TtsModel::from_container(&c)?;
    if &model.cfg != expected {
        return Err(Error::Load(format!(
            "checkpoint {} was trained with a different model config",
            path.display()
        )));
    }
    let step = c.meta.get("step").and_then(Value::as_u64).unwrap_or(0) as usize;
    Ok((model, step))
}

#[derive(Clone, Debug)]
pub struct TwoPhaseOutcome {
    /// Phase-1 result, or the loaded model when resuming inside phase 2.
    pub backbone: TtsModel,
    pub model: TtsModel,
    pub log: Vec<LogRow>,
    /// Task loss of the final phase-1 model and of the freshly inserted
    /// model on the same probe batch, when mixture sites were configured.
    pub insertion_check: Option<(f64, f64)>,
    /// Importance loss on the probe batch right after insertion and at the end.
    pub importance_check: Option<(f64, f64)>,
}

/// Phase 1 trains `cfg` without mixture sites; phase 2 inserts them (when
/// configured) and trains all weights. A baseline without mixture sites
/// trains for the same total number of steps.
pub fn train_two_phase(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    pool: &[&Utterance],
    probe: &[&Utterance],
    sink: Option<&CheckpointSink>,
) -> Result<TwoPhaseOutcome> {
    tcfg.validate()?;
    let model = TtsModel::new(cfg.clone().without_moa(), tcfg.seed)?;
    resume_two_phase(cfg, tcfg, model, 0, pool, probe, sink)
}

/// Continues [`train_two_phase`] from `model` after `start_step` updates.
/// Adam moments restart from zero; learning rate and batch sampling follow
/// the global step, so only the optimizer state differs from an
/// uninterrupted run.
pub fn resume_two_phase(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    model: TtsModel,
    start_step: usize,
    pool: &[&Utterance],
    probe: &[&Utterance],
    sink: Option<&CheckpointSink>,
) -> Result<TwoPhaseOutcome> {
    tcfg.validate()?;
    let has_moa = model.cfg.moa.is_some();
    if (has_moa && model.cfg != *cfg) || (!has_moa && model.cfg != cfg.clone().without_moa()) {
        return Err(Error::Load("checkpoint was trained with a different model config".into()));
    }
    if start_step > tcfg.total_steps() {
        return Err(Error::Load(format!(
            "checkpoint step {start_step} is past the {} configured steps",
            tcfg.total_steps()
        )));
    }
    let phase_ok = match (cfg.moa.is_some(), has_moa) {
        (true, true) => start_step >= tcfg.phase1_steps,
        (true, false) => start_step <= tcfg.phase1_steps,
        _ => true,
    };
    if !phase_ok {
        return Err(Error::Load(format!(
            "step {start_step} does not match the phase of the checkpoint"
        )));
    }
    let mut trainer = Trainer::new(model, tcfg.clone())?;
    trainer.step = start_step;
    if !has_moa {
        trainer.run(pool, tcfg.phase1_steps.saturating_sub(start_step), 1, sink)?;
    }
    let backbone = trainer.model.clone();
    if !has_moa {
        if let Some(s) = sink {
            s.save(&backbone, "backbone.ckpt", trainer.step, tcfg)?;
        }
    }
    let remaining = tcfg.total_steps() - trainer.step;
    let mut insertion_check = None;
    let mut importance_check = None;
    match cfg.moa {
        Some(moa) => {
            if !has_moa {
                let inserted = backbone.insert_moa(moa, tcfg.seed)?;
                let before = evaluate_losses(&backbone, probe, tcfg.lambda_importance)?;
                let after = evaluate_losses(&inserted, probe, tcfg.lambda_importance)?;
                insertion_check = Some((before.task(), after.task()));
                trainer.replace_model(inserted);
            }
            let start = evaluate_losses(&trainer.model, probe, tcfg.lambda_importance)?;
            trainer.run(pool, remaining, 2, sink)?;
            let end = evaluate_losses(&trainer.model, probe, tcfg.lambda_importance)?;
            importance_check = Some((start.importance, end.importance));
            if let Some(s) = sink {
                s.save(&trainer.model, "moa.ckpt", trainer.step, tcfg)?;
            }
        }
        None => {
            trainer.run(pool, remaining, 2, sink)?;
            if let Some(s) = sink {
                s.save(&trainer.model, "baseline.ckpt", trainer.step, tcfg)?;
            }
        }
    }
    Ok(TwoPhaseOutcome {
        backbone,
        model: trainer.model,
        log: trainer.log,
        insertion_check,
        importance_check,
    })
}

pub fn write_metrics(path: &Path, rows: &[LogRow], provenance: &Value) -> Result<()> {
    write_atomic(path, metrics_csv(rows, provenance).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noam_knee_and_reference_value() {
        let knee = noam_lr(400, 32, 400).unwrap();
        assert!((knee - 32f64.powf(-0.5) * 400f64.powf(-0.5)).abs() < 1e-15);
        let v = noam_lr(4000, 128, 4000).unwrap();
        assert!((v - 0.0013975).abs() < 1e-6);
        assert!(noam_lr(0, 32, 400).is_err());
    }

    #[test]
    fn noam_monotone_branches() {
        let lrs: Vec<f64> = (1..=800).map(|s| noam_lr(s, 32, 400).unwrap()).collect();
        assert!(lrs[..400].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[399..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            lambda_importance: -0.1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -1.0]).unwrap()).unwrap();
        let mut adam = Adam::new();
        adam.update(&mut store, &[vec![0.5, -2.0]], 0.01, &TrainConfig::default());
        let w = store.get(store.id("w").unwrap()).data();
        assert!((w[0] - 0.99).abs() < 1e-8 && (w[1] + 0.99).abs() < 1e-8);
    }
}
