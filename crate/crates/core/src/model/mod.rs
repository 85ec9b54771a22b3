//! FastSpeech2-style acoustic model with optional mixture-of-adapters sites
//! in the decoder blocks and the duration/pitch/energy predictors.

mod config;

pub use config::{ConfigFile, ModelConfig, MoaConfig, Sites, DESK_BOTTLENECK};

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::format::Container;
use crate::layers::{sinusoid_table, Builder, Conv1d, FeedForward, LayerNorm, Linear, SelfAttention, WeightInit};
use crate::moa::{GateOutput, MoaModule};
use crate::params::{Init, ParamStore, Session};
use crate::speaker::{Embedding, LayeredFeatures, SpeakerEncoder};
use crate::tensor::{Graph, Tensor, Var};

/// Log-F0 is modelled as `(log_f0 - PITCH_CENTER) / PITCH_SCALE`.
pub const PITCH_CENTER: f64 = 5.043_425_116_919_247; // ln 155 Hz
pub const PITCH_SCALE: f64 = 0.5;

pub fn normalize_pitch(log_f0: f64) -> f64 {
    (log_f0 - PITCH_CENTER) / PITCH_SCALE
}

pub fn denormalize_pitch(norm: f64) -> f64 {
    norm * PITCH_SCALE + PITCH_CENTER
}

/// Duration targets are `ln(d + 1)`.
pub fn log_duration(d: usize) -> f64 {
    (d as f64 + 1.0).ln()
}

/// Inverse of [`log_duration`] with rounding; guarantees at least one frame.
pub fn durations_from_log(pred: &[f64]) -> Vec<usize> {
    let mut d: Vec<usize> = pred
        .iter()
        .map(|p| (p.exp() - 1.0).round().max(0.0) as usize)
        .collect();
    if !d.is_empty() && d.iter().all(|&v| v == 0) {
        let best = pred
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        d[best] = 1;
    }
    d
}

/// Repeats row `p` of `h` `durations[p]` times.
pub fn length_regulate(g: &mut Graph, h: Var, durations: &[usize]) -> Result<Var> {
    let rows = g.value(h).rows();
    if durations.len() != rows {
        return Err(Error::dim("length_regulate", g.shape(h), &[durations.len()]));
    }
    let idx: Vec<Option<usize>> = durations
        .iter()
        .enumerate()
        .flat_map(|(p, &d)| std::iter::repeat_n(Some(p), d))
        .collect();
    if idx.is_empty() {
        return Err(Error::Empty("all durations are zero".into()));
    }
    g.gather_rows(h, &idx)
}

/// Gate weights applied at one site during a forward pass.
#[derive(Clone, Debug)]
pub struct SiteGate {
    pub site_id: String,
    pub layer_index: usize,
    pub gate: GateOutput,
}

#[derive(Clone, Debug)]
pub struct FftBlock {
    pub attn: SelfAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    pub moa: Option<MoaModule>,
}

impl FftBlock {
    fn new(b: &mut Builder<'_>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            attn: SelfAttention::new(b, &format!("{name}.attn"), cfg.d_model, cfg.n_heads)?,
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), cfg.d_model)?,
            ffn: FeedForward::new(b, &format!("{name}.ffn"), cfg.d_model, cfg.d_filter, cfg.ffn_kernel)?,
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), cfg.d_model)?,
            moa: None,
        })
    }

    fn forward(&self, s: &mut Session<'_>, x: Var, dropout: f64) -> Result<Var> {
        let a = self.attn.forward(s, x)?;
        let a = s.dropout(a, dropout)?;
        let x = s.graph.add(x, a)?;
        let x = self.norm1.forward(s, x)?;
        let f = self.ffn.forward(s, x)?;
        let f = s.dropout(f, dropout)?;
        let x = s.graph.add(x, f)?;
        self.norm2.forward(s, x)
    }
}

/// Two same-padded convolutions with ReLU, norm and dropout, an optional
/// mixture site, then a scalar projection per row.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub conv1: Conv1d,
    pub norm1: LayerNorm,
    pub conv2: Conv1d,
    pub norm2: LayerNorm,
    pub out: Linear,
    pub moa: Option<MoaModule>,
}

impl Predictor {
    fn new(b: &mut Builder<'_>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let f = cfg.pred_filter;
        Ok(Self {
            conv1: Conv1d::new(b, &format!("{name}.conv1"), cfg.d_model, f, cfg.pred_kernel)?,
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), f)?,
            conv2: Conv1d::new(b, &format!("{name}.conv2"), f, f, cfg.pred_kernel)?,
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), f)?,
            out: Linear::new(b, &format!("{name}.out"), f, 1, WeightInit::FanIn)?,
            moa: None,
        })
    }

    fn forward(
        &self,
        s: &mut Session<'_>,
        x: Var,
        x_e: Var,
        dropout: f64,
        gates: &mut Vec<SiteGate>,
    ) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = s.graph.relu(h);
        let h = self.norm1.forward(s, h)?;
        let h = s.dropout(h, dropout)?;
        let h = self.conv2.forward(s, h)?;
        let h = s.graph.relu(h);
        let h = self.norm2.forward(s, h)?;
        let mut h = s.dropout(h, dropout)?;
        if let Some(m) = &self.moa {
            let (y, gate) = m.forward(s, h, x_e)?;
            gates.push(SiteGate {
                site_id: m.site_id.clone(),
                layer_index: 0,
                gate,
            });
            h = y;
        }
        self.out.forward(s, h)
    }
}

#[derive(Clone, Debug)]
struct Network {
    speaker: SpeakerEncoder,
    phoneme_embed: crate::params::ParamId,
    encoder: Vec<FftBlock>,
    duration: Predictor,
    pitch: Predictor,
    energy: Predictor,
    pitch_embed: Linear,
    energy_embed: Linear,
    decoder: Vec<FftBlock>,
    mel_out: Linear,
}

/// How the variance adapter obtains durations, pitch and energy.
#[derive(Clone, Copy, Debug)]
pub enum Conditioning<'a> {
    /// Teacher forcing; `pitch` is log-F0 per frame.
    Teacher {
        durations: &'a [usize],
        pitch: &'a [f64],
        energy: &'a [f64],
    },
    /// Ground-truth durations; pitch and energy come from the predictors.
    Durations(&'a [usize]),
    /// Everything predicted.
    Free,
}

impl Conditioning<'_> {
    fn durations(&self) -> Option<&[usize]> {
        match self {
            Conditioning::Teacher { durations, .. } | Conditioning::Durations(durations) => {
                Some(durations)
            }
            Conditioning::Free => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VarianceOutput {
    /// `[P, 1]`, log domain.
    pub log_duration: Var,
    /// `[T, 1]`, normalized log-F0.
    pub pitch: Var,
    /// `[T, 1]`.
    pub energy: Var,
    /// `[T, d_model]` frame-level hidden states.
    pub hidden: Var,
    pub durations: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub embedding: Embedding,
    pub encoded: Var,
    pub variance: VarianceOutput,
    /// `[T, n_mels]`.
    pub mel: Var,
    pub gates: Vec<SiteGate>,
}

/// Values of one site's gate for export.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTrace {
    pub site_id: String,
    pub layer_index: usize,
    pub weights: Vec<f64>,
}

/// Inference result.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    /// `[T, n_mels]` log-mel.
    pub mel: Tensor,
    /// Raw duration predictions, log domain.
    pub log_duration: Vec<f64>,
    /// Rounded predicted durations in frames.
    pub predicted_durations: Vec<usize>,
    /// Durations actually used for length regulation.
    pub durations: Vec<usize>,
    /// Predicted log-F0 per frame.
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub embedding: Vec<f64>,
    pub gates: Vec<GateTrace>,
}

/// Trainable-parameter totals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub backbone: usize,
    pub moa_added: usize,
    pub per_component: BTreeMap<String, usize>,
}

fn component_of(name: &str) -> String {
    if name.contains(".moa.") {
        return "moa".into();
    }
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or("");
    if first == "predictor" {
        if let Some(second) = parts.next() {
            return format!("predictor.{second}");
        }
    }
    first.to_string()
}

#[derive(Clone, Debug)]
pub struct TtsModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    net: Network,
}

impl TtsModel {
    /// Backbone parameters depend only on `seed` and the backbone fields of
    /// `cfg`; mixture parameters come from a separate stream, so models that
    /// differ only in `cfg.moa` share identical backbone weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let mut net = {
            let mut b = Builder {
                store: &mut params,
                init: &mut init,
            };
            let speaker = SpeakerEncoder::new(&mut b, cfg.ref_layers, cfg.ref_width, cfg.d_model)?;
            let table = b.init.normal(&[cfg.vocab_size, cfg.d_model], 0.3);
            let phoneme_embed = b.param("embed.phoneme", table)?;
            let encoder = (0..cfg.enc_layers)
                .map(|i| FftBlock::new(&mut b, &format!("encoder.{i}"), &cfg))
                .collect::<Result<Vec<_>>>()?;
            let duration = Predictor::new(&mut b, "predictor.duration", &cfg)?;
            let pitch = Predictor::new(&mut b, "predictor.pitch", &cfg)?;
            let energy = Predictor::new(&mut b, "predictor.energy", &cfg)?;
            let pitch_embed = Linear::new(&mut b, "variance.pitch_embed", 1, cfg.d_model, WeightInit::FanIn)?;
            let energy_embed = Linear::new(&mut b, "variance.energy_embed", 1, cfg.d_model, WeightInit::FanIn)?;
            let decoder = (0..cfg.dec_layers)
                .map(|i| FftBlock::new(&mut b, &format!("decoder.{i}"), &cfg))
                .collect::<Result<Vec<_>>>()?;
            let mel_out = Linear::new(&mut b, "mel_out", cfg.d_model, cfg.n_mels, WeightInit::FanIn)?;
            Network {
                speaker,
                phoneme_embed,
                encoder,
                duration,
                pitch,
                energy,
                pitch_embed,
                energy_embed,
                decoder,
                mel_out,
            }
        };
        if let Some(m) = cfg.moa {
            let mut init = Init::new(seed ^ 0x9e37_79b9_7f4a_7c15);
            let mut b = Builder {
                store: &mut params,
                init: &mut init,
            };
            let routing = m.routing();
            let d = cfg.d_model;
            if m.sites.decoder() {
                for (i, block) in net.decoder.iter_mut().enumerate() {
                    block.moa = Some(MoaModule::new(
                        &mut b,
                        &format!("decoder.{i}"),
                        d,
                        d,
                        m.n_adapters,
                        m.bottleneck,
                        routing,
                    )?);
                }
            }
            if m.sites.predictors() {
                for (name, p) in [
                    ("duration", &mut net.duration),
                    ("pitch", &mut net.pitch),
                    ("energy", &mut net.energy),
                ] {
                    p.moa = Some(MoaModule::new(
                        &mut b,
                        &format!("predictor.{name}"),
                        cfg.pred_filter,
                        d,
                        m.n_adapters,
                        m.bottleneck,
                        routing,
                    )?);
                }
            }
        }
        Ok(Self { cfg, params, net })
    }

    /// Rebuilds the network for `cfg` and adopts `params`, which must match
    /// its parameter names and shapes exactly.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(cfg, 0).map_err(|e| Error::Load(e.to_string()))?;
        if model.params.len() != params.len() {
            return Err(Error::Load(format!(
                "checkpoint has {} tensors, config expects {}",
                params.len(),
                model.params.len()
            )));
        }
        for (id, name, value) in model.params.iter() {
            let theirs = params
                .id(name)
                .ok_or_else(|| Error::Load(format!("checkpoint lacks {name}")))?;
            if params.get(theirs).shape() != value.shape() || theirs != id {
                return Err(Error::Load(format!("tensor {name} does not match config")));
            }
        }
        model.params = params;
        Ok(model)
    }

    /// Copy of this model with mixture sites inserted. Backbone weights are
    /// carried over; adapters start with zero up-projections.
    pub fn insert_moa(&self, moa: MoaConfig, seed: u64) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.moa = Some(moa);
        let mut model = Self::new(cfg, seed)?;
        for (_, name, value) in self.params.iter() {
            if name.contains(".moa.") {
                continue;
            }
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::Config(format!("{name} missing after insertion")))?;
            *model.params.get_mut(id) = value.clone();
        }
        Ok(model)
    }

    pub fn moa_sites(&self) -> Vec<&MoaModule> {
        let mut out: Vec<&MoaModule> = self.net.decoder.iter().filter_map(|b| b.moa.as_ref()).collect();
        for p in [&self.net.duration, &self.net.pitch, &self.net.energy] {
            if let Some(m) = &p.moa {
                out.push(m);
            }
        }
        out
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut per_component = BTreeMap::new();
        for (_, name, value) in self.params.iter() {
            *per_component.entry(component_of(name)).or_insert(0) += value.numel();
        }
        let total = self.params.num_scalars();
        let moa_added = per_component.get("moa").copied().unwrap_or(0);
        ParamCount {
            total,
            backbone: total - moa_added,
            moa_added,
            per_component,
        }
    }

    pub fn embed(&self, s: &mut Session<'_>, reference: &LayeredFeatures) -> Result<Embedding> {
        self.net.speaker.embed(s, reference)
    }

    /// Phoneme encoder; the speaker embedding `x_e` (`[1, d]`) is added to
    /// every output row.
    pub fn encode(&self, s: &mut Session<'_>, phonemes: &[usize], x_e: Var) -> Result<Var> {
        if phonemes.is_empty() {
            return Err(Error::Empty("phoneme sequence is empty".into()));
        }
        if let Some(bad) = phonemes.iter().find(|&&p| p >= self.cfg.vocab_size) {
            return Err(Error::Input(format!(
                "phoneme id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let table = s.param(self.net.phoneme_embed);
        let idx: Vec<Option<usize>> = phonemes.iter().map(|&p| Some(p)).collect();
        let x = s.graph.gather_rows(table, &idx)?;
        let pos = s.constant(sinusoid_table(phonemes.len(), self.cfg.d_model));
        let mut x = s.graph.add(x, pos)?;
        for block in &self.net.encoder {
            x = block.forward(s, x, self.cfg.dropout)?;
        }
        s.graph.add_row(x, x_e)
    }

    pub fn variance_adapter(
        &self,
        s: &mut Session<'_>,
        h: Var,
        x_e: Var,
        cond: Conditioning<'_>,
        gates: &mut Vec<SiteGate>,
    ) -> Result<VarianceOutput> {
        if s.training() && !matches!(cond, Conditioning::Teacher { .. }) {
            return Err(Error::Contract("training requires teacher-forcing targets".into()));
        }
        let p = s.graph.value(h).rows();
        let drop = self.cfg.dropout;
        let log_duration = self.net.duration.forward(s, h, x_e, drop, gates)?;
        let durations = match cond.durations() {
            Some(d) => {
                if d.len() != p {
                    return Err(Error::dim("durations", &[d.len()], &[p]));
                }
                d.to_vec()
            }
            None => durations_from_log(s.graph.value(log_duration).data()),
        };
        let mut hidden = length_regulate(&mut s.graph, h, &durations)?;
        let frames = s.graph.value(hidden).rows();

        let pitch = self.net.pitch.forward(s, hidden, x_e, drop, gates)?;
        let pitch_in = match cond {
            Conditioning::Teacher { pitch: target, .. } => {
                if target.len() != frames {
                    return Err(Error::dim("pitch target", &[target.len()], &[frames]));
                }
                let norm = target.iter().map(|&v| normalize_pitch(v)).collect();
                s.constant(Tensor::matrix(frames, 1, norm)?)
            }
            _ => pitch,
        };
        let pe = self.net.pitch_embed.forward(s, pitch_in)?;
        hidden = s.graph.add(hidden, pe)?;

        let energy = self.net.energy.forward(s, hidden, x_e, drop, gates)?;
        let energy_in = match cond {
            Conditioning::Teacher { energy: target, .. } => {
                if target.len() != frames {
                    return Err(Error::dim("energy target", &[target.len()], &[frames]));
                }
                s.constant(Tensor::matrix(frames, 1, target.to_vec())?)
            }
            _ => energy,
        };
        let ee = self.net.energy_embed.forward(s, energy_in)?;
        hidden = s.graph.add(hidden, ee)?;

        Ok(VarianceOutput {
            log_duration,
            pitch,
            energy,
            hidden,
            durations,
        })
    }

    /// Decoder stack; each block's mixture site (if any) follows its
    /// feed-forward sub-layer.
    pub fn decode(&self, s: &mut Session<'_>, h: Var, x_e: Var, gates: &mut Vec<SiteGate>) -> Result<Var> {
        let frames = s.graph.value(h).rows();
        let pos = s.constant(sinusoid_table(frames, self.cfg.d_model));
        let mut x = s.graph.add(h, pos)?;
        for (i, block) in self.net.decoder.iter().enumerate() {
            x = block.forward(s, x, self.cfg.dropout)?;
            if let Some(m) = &block.moa {
                let (y, gate) = m.forward(s, x, x_e)?;
                gates.push(SiteGate {
                    site_id: m.site_id.clone(),
                    layer_index: i,
                    gate,
                });
                x = y;
            }
        }
        self.net.mel_out.forward(s, x)
    }

    pub fn forward(
        &self,
        s: &mut Session<'_>,
        phonemes: &[usize],
        reference: &LayeredFeatures,
        cond: Conditioning<'_>,
    ) -> Result<ForwardOutput> {
        let embedding = self.embed(s, reference)?;
        self.forward_with_embedding(s, phonemes, embedding, cond)
    }

    pub fn forward_with_embedding(
        &self,
        s: &mut Session<'_>,
        phonemes: &[usize],
        embedding: Embedding,
        cond: Conditioning<'_>,
    ) -> Result<ForwardOutput> {
        let x_e = embedding.vector;
        let encoded = self.encode(s, phonemes, x_e)?;
        let mut gates = Vec::new();
        let variance = self.variance_adapter(s, encoded, x_e, cond, &mut gates)?;
        let mel = self.decode(s, variance.hidden, x_e, &mut gates)?;
        Ok(ForwardOutput {
            embedding,
            encoded,
            variance,
            mel,
            gates,
        })
    }

    /// Inference; with `durations` the output is aligned to them exactly.
    pub fn synthesize(
        &self,
        phonemes: &[usize],
        reference: &LayeredFeatures,
        durations: Option<&[usize]>,
    ) -> Result<Synthesis> {
        let mut s = Session::inference(&self.params);
        let embedding = self.embed(&mut s, reference)?;
        self.run_inference(s, phonemes, embedding, durations)
    }

    /// Inference from a precomputed speaker embedding.
    pub fn synthesize_with_embedding(
        &self,
        phonemes: &[usize],
        embedding: &[f64],
        durations: Option<&[usize]>,
    ) -> Result<Synthesis> {
        if embedding.len() != self.cfg.d_model {
            return Err(Error::dim("embedding", &[embedding.len()], &[self.cfg.d_model]));
        }
        let mut s = Session::inference(&self.params);
        let vector = s.constant(Tensor::matrix(1, embedding.len(), embedding.to_vec())?);
        let attention = s.constant(Tensor::scalar(1.0));
        self.run_inference(s, phonemes, Embedding { vector, attention }, durations)
    }

    fn run_inference(
        &self,
        mut s: Session<'_>,
        phonemes: &[usize],
        embedding: Embedding,
        durations: Option<&[usize]>,
    ) -> Result<Synthesis> {
        let cond = match durations {
            Some(d) => Conditioning::Durations(d),
            None => Conditioning::Free,
        };
        let out = self.forward_with_embedding(&mut s, phonemes, embedding, cond)?;
        let g = &s.graph;
        let log_duration = g.value(out.variance.log_duration).data().to_vec();
        Ok(Synthesis {
            mel: g.value(out.mel).clone(),
            predicted_durations: durations_from_log(&log_duration),
            log_duration,
            durations: out.variance.durations.clone(),
            pitch: g
                .value(out.variance.pitch)
                .data()
                .iter()
                .map(|&v| denormalize_pitch(v))
                .collect(),
            energy: g.value(out.variance.energy).data().to_vec(),
            embedding: g.value(out.embedding.vector).data().to_vec(),
            gates: out
                .gates
                .iter()
                .map(|sg| GateTrace {
                    site_id: sg.site_id.clone(),
                    layer_index: sg.layer_index,
                    weights: g.value(sg.gate.weights).data().to_vec(),
                })
                .collect(),
        })
    }

    /// Speaker embedding for `reference` as plain values.
    pub fn embedding_of(&self, reference: &LayeredFeatures) -> Result<Vec<f64>> {
        let mut s = Session::inference(&self.params);
        let e = self.embed(&mut s, reference)?;
        Ok(s.graph.value(e.vector).data().to_vec())
    }

    /// Checkpoint with the model config under `meta.model_config`; `extra`
    /// entries are merged into `meta`.
    pub fn to_container(&self, extra: Value) -> Result<Container> {
        let mut meta = json!({ "model_config": serde_json::to_value(&self.cfg)? });
        if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
            m.extend(e);
        }
        Ok(self.params.to_container(meta))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("checkpoint")?;
        let cfg_value = c
            .meta
            .get("model_config")
            .ok_or_else(|| Error::Load("checkpoint has no model_config".into()))?;
        let cfg: ModelConfig =
            serde_json::from_value(cfg_value.clone()).map_err(|e| Error::Load(e.to_string()))?;
        let params = ParamStore::from_container(c)?;
        Self::from_parts(cfg, params)
    }

    pub fn save(&self, path: &Path, extra: Value) -> Result<()> {
        self.to_container(extra)?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

#[cfg(test)]
mod tests;
