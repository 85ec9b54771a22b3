//! Objective metrics, per-speaker aggregation, RTF benchmarking and gate
//! correlation analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{Group, Utterance, FRAME_SHIFT_MS, VOICED_ENERGY};
use crate::error::{Error, Result};
use crate::format::{provenance_header, split_provenance, Container};
use crate::model::{GateTrace, Synthesis, TtsModel};
use crate::moa::MoaFlops;
use crate::tensor::Tensor;

pub const MCD_COEFFS: usize = 12;
/// `10 * sqrt(2) / ln 10`.
pub const MCD_CONST: f64 = 6.141_851_463_713_754;

/// Orthonormal DCT-II of `x`, first `n` coefficients.
pub fn dct_ii(x: &[f64], n: usize) -> Vec<f64> {
    let len = x.len() as f64;
    (0..n)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / len).cos())
                .sum();
            let w = if k == 0 { (1.0 / len).sqrt() } else { (2.0 / len).sqrt() };
            w * s
        })
        .collect()
}

/// MCD in dB from per-frame cepstra; coefficient 0 is excluded.
pub fn mcd_from_cepstra(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Alignment(format!("{} vs {} frames", a.len(), b.len())));
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() || x.len() < 2 {
            return Err(Error::dim("mcd", &[x.len()], &[y.len()]));
        }
        let d: f64 = x[1..].iter().zip(&y[1..]).map(|(p, q)| (p - q).powi(2)).sum();
        acc += d.sqrt();
    }
    Ok(MCD_CONST * acc / a.len() as f64)
}

/// Log-mel `[T, n_mels]` to cepstra `c_0..c_12` per frame.
pub fn cepstra(mel: &Tensor) -> Result<Vec<Vec<f64>>> {
    if mel.shape().len() != 2 || mel.cols() <= MCD_COEFFS {
        return Err(Error::Input(format!(
            "mcd needs more than {MCD_COEFFS} mel bins, got shape {:?}",
            mel.shape()
        )));
    }
    Ok((0..mel.rows()).map(|t| dct_ii(mel.row(t), MCD_COEFFS + 1)).collect())
}

/// Frame-aligned MCD; no time warping.
pub fn mcd(pred: &Tensor, reference: &Tensor) -> Result<f64> {
    if pred.shape() != reference.shape() {
        return Err(Error::Alignment(format!(
            "mel shapes {:?} and {:?} differ",
            pred.shape(),
            reference.shape()
        )));
    }
    mcd_from_cepstra(&cepstra(pred)?, &cepstra(reference)?)
}

/// Log-F0 RMSE over frames where `voiced` is set.
pub fn f0_rmse(pred: &[f64], reference: &[f64], voiced: &[bool]) -> Result<f64> {
    if pred.len() != reference.len() || pred.len() != voiced.len() {
        return Err(Error::Alignment(format!(
            "pitch lengths {} / {} / mask {}",
            pred.len(),
            reference.len(),
            voiced.len()
        )));
    }
    let (sum, n) = pred
        .iter()
        .zip(reference)
        .zip(voiced)
        .filter(|(_, &v)| v)
        .fold((0.0, 0usize), |(s, n), ((p, r), _)| (s + (p - r).powi(2), n + 1));
    if n == 0 {
        return Err(Error::UndefinedMetric("no voiced frames".into()));
    }
    Ok((sum / n as f64).sqrt())
}

/// RMSE in frames between rounded predicted and reference durations.
pub fn duration_rmse(pred: &[usize], reference: &[usize]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::Input(format!(
            "duration lengths {} and {} differ",
            pred.len(),
            reference.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("no phonemes".into()));
    }
    let s: f64 = pred
        .iter()
        .zip(reference)
        .map(|(&p, &r)| (p as f64 - r as f64).powi(2))
        .sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// Linear-interpolation quantile (type 7) of unsorted `values`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile of no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Result<Self> {
        Ok(Self {
            q1: quantile(values, 0.25)?,
            median: quantile(values, 0.5)?,
            q3: quantile(values, 0.75)?,
        })
    }
}

pub fn median(values: &[f64]) -> Result<f64> {
    quantile(values, 0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub utterance_id: String,
    pub speaker_id: String,
    pub group: Option<Group>,
    pub mcd: f64,
    pub f0_rmse: f64,
    pub dur_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerReport {
    pub speaker_id: String,
    pub group: Option<Group>,
    pub mcd_mean: f64,
    pub f0_rmse_mean: f64,
    pub dur_rmse_mean: f64,
    pub n_utts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricQuartiles {
    pub n_speakers: usize,
    pub mcd: Quartiles,
    pub f0_rmse: Quartiles,
    pub dur_rmse: Quartiles,
}

impl MetricQuartiles {
    fn of(reports: &[&SpeakerReport]) -> Result<Self> {
        let col = |f: fn(&SpeakerReport) -> f64| reports.iter().map(|r| f(r)).collect::<Vec<_>>();
        Ok(Self {
            n_speakers: reports.len(),
            mcd: Quartiles::of(&col(|r| r.mcd_mean))?,
            f0_rmse: Quartiles::of(&col(|r| r.f0_rmse_mean))?,
            dur_rmse: Quartiles::of(&col(|r| r.dur_rmse_mean))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub speakers: Vec<SpeakerReport>,
    pub overall: MetricQuartiles,
    /// Keyed by `"pro"` and `"non-pro"`; speakers without a group are only
    /// in `overall`.
    pub by_style: BTreeMap<String, MetricQuartiles>,
}

impl Aggregate {
    pub fn mean_over_speakers(&self, f: fn(&SpeakerReport) -> f64) -> f64 {
        self.speakers.iter().map(f).sum::<f64>() / self.speakers.len() as f64
    }
}

/// Per-speaker means, then quartiles across speakers. Order of `metrics`
/// does not matter.
pub fn aggregate(metrics: &[UtteranceMetrics]) -> Result<Aggregate> {
    if metrics.is_empty() {
        return Err(Error::Empty("no utterance metrics".into()));
    }
    let mut by_speaker: BTreeMap<&str, Vec<&UtteranceMetrics>> = BTreeMap::new();
    for m in metrics {
        by_speaker.entry(&m.speaker_id).or_default().push(m);
    }
    let speakers: Vec<SpeakerReport> = by_speaker
        .into_iter()
        .map(|(id, ms)| {
            let n = ms.len() as f64;
            // Sum in a fixed order so the result is independent of input order.
            let mut sorted = ms.clone();
            sorted.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
            SpeakerReport {
                speaker_id: id.to_string(),
                group: sorted[0].group,
                mcd_mean: sorted.iter().map(|m| m.mcd).sum::<f64>() / n,
                f0_rmse_mean: sorted.iter().map(|m| m.f0_rmse).sum::<f64>() / n,
                dur_rmse_mean: sorted.iter().map(|m| m.dur_rmse).sum::<f64>() / n,
                n_utts: ms.len(),
            }
        })
        .collect();
    let all: Vec<&SpeakerReport> = speakers.iter().collect();
    let overall = MetricQuartiles::of(&all)?;
    let mut by_style = BTreeMap::new();
    for (label, pro) in [("pro", true), ("non-pro", false)] {
        let part: Vec<&SpeakerReport> = speakers
            .iter()
            .filter(|r| r.group.map(|g| g.is_pro()) == Some(pro))
            .collect();
        if !part.is_empty() {
            by_style.insert(label.to_string(), MetricQuartiles::of(&part)?);
        }
    }
    Ok(Aggregate {
        speakers,
        overall,
        by_style,
    })
}

/// Ground-truth-duration synthesis of `u` scored against it.
pub fn score_utterance(model: &TtsModel, u: &Utterance, group: Option<Group>) -> Result<(UtteranceMetrics, Synthesis)> {
    let syn = model.synthesize(&u.phonemes, &u.reference, Some(&u.durations))?;
    Ok((score_synthesis(&syn, &u.as_record(group))?, syn))
}

pub fn score_synthesis(syn: &Synthesis, reference: &MelRecord) -> Result<UtteranceMetrics> {
    Ok(UtteranceMetrics {
        utterance_id: reference.utterance_id.clone(),
        speaker_id: reference.speaker_id.clone(),
        group: reference.group,
        mcd: mcd(&syn.mel, &reference.mel)?,
        f0_rmse: f0_rmse(&syn.pitch, &reference.pitch, &reference.voiced())?,
        dur_rmse: duration_rmse(&syn.predicted_durations, &reference.durations)?,
    })
}

pub fn evaluate(model: &TtsModel, utterances: &[(&Utterance, Option<Group>)]) -> Result<Vec<UtteranceMetrics>> {
    utterances
        .iter()
        .map(|(u, g)| score_utterance(model, u, *g).map(|(m, _)| m))
        .collect()
}

/// A mel output or reference with the side information the metrics need.
#[derive(Clone, Debug, PartialEq)]
pub struct MelRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub group: Option<Group>,
    pub mel: Tensor,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    /// Predicted (for outputs) or reference durations.
    pub durations: Vec<usize>,
}

impl MelRecord {
    pub fn voiced(&self) -> Vec<bool> {
        self.energy.iter().map(|&e| e > VOICED_ENERGY).collect()
    }

    pub fn from_synthesis(utterance_id: &str, speaker_id: &str, group: Option<Group>, syn: &Synthesis) -> Self {
        Self {
            utterance_id: utterance_id.to_string(),
            speaker_id: speaker_id.to_string(),
            group,
            mel: syn.mel.clone(),
            pitch: syn.pitch.clone(),
            energy: syn.energy.clone(),
            durations: syn.predicted_durations.clone(),
        }
    }

    pub fn to_container(&self, provenance: &Value) -> Result<Container> {
        let mut c = Container::new(
            "mel",
            json!({
                "utterance_id": self.utterance_id,
                "speaker_id": self.speaker_id,
                "group": self.group,
                "durations": self.durations,
                "provenance": provenance,
            }),
        );
        c.push("mel", self.mel.clone());
        c.push("pitch", Tensor::vector(self.pitch.clone())?);
        c.push("energy", Tensor::vector(self.energy.clone())?);
        Ok(c)
    }

    /// Accepts `mel` outputs and corpus `utterance` files.
    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind == "utterance" {
            let u = Utterance::from_container(c)?;
            let group = c.meta.get("group").and_then(|g| serde_json::from_value(g.clone()).ok());
            return Ok(u.as_record(group));
        }
        c.expect_kind("mel")?;
        let get = |k: &str| {
            c.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("mel meta lacks {k}")))
        };
        let rec = Self {
            utterance_id: serde_json::from_value(get("utterance_id")?)?,
            speaker_id: serde_json::from_value(get("speaker_id")?)?,
            group: serde_json::from_value(c.meta.get("group").cloned().unwrap_or(Value::Null))?,
            durations: serde_json::from_value(get("durations")?)?,
            mel: c.section("mel")?.clone(),
            pitch: c.section("pitch")?.data().to_vec(),
            energy: c.section("energy")?.data().to_vec(),
        };
        if rec.mel.shape().len() != 2 || rec.mel.rows() != rec.pitch.len() || rec.pitch.len() != rec.energy.len() {
            return Err(Error::Format("mel, pitch and energy frame counts differ".into()));
        }
        Ok(rec)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::decode(bytes)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

impl Utterance {
    pub fn as_record(&self, group: Option<Group>) -> MelRecord {
        MelRecord {
            utterance_id: self.utterance_id.clone(),
            speaker_id: self.speaker_id.clone(),
            group,
            mel: self.mel.clone(),
            pitch: self.pitch.clone(),
            energy: self.energy.clone(),
            durations: self.durations.clone(),
        }
    }
}

/// Scores every prediction against the reference with the same id.
pub fn compare_records(pred: &[MelRecord], reference: &[MelRecord]) -> Result<Vec<UtteranceMetrics>> {
    let by_id: BTreeMap<&str, &MelRecord> = reference.iter().map(|r| (r.utterance_id.as_str(), r)).collect();
    pred.iter()
        .map(|p| {
            let r = by_id
                .get(p.utterance_id.as_str())
                .ok_or_else(|| Error::Input(format!("no reference for {}", p.utterance_id)))?;
            Ok(UtteranceMetrics {
                utterance_id: p.utterance_id.clone(),
                speaker_id: r.speaker_id.clone(),
                group: r.group.or(p.group),
                mcd: mcd(&p.mel, &r.mel)?,
                f0_rmse: f0_rmse(&p.pitch, &r.pitch, &r.voiced())?,
                dur_rmse: duration_rmse(&p.durations, &r.durations)?,
            })
        })
        .collect()
}

pub fn speaker_reports_csv(agg: &Aggregate, provenance: &Value) -> String {
    let mut out = provenance_header(provenance);
    out.push_str("speaker_id,group,mcd_mean,f0_rmse_mean,dur_rmse_mean,n_utts\n");
    for r in &agg.speakers {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.speaker_id,
            r.group.map(|g| g.label()).unwrap_or(""),
            r.mcd_mean,
            r.f0_rmse_mean,
            r.dur_rmse_mean,
            r.n_utts
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub rtf_median: f64,
    pub rtf_iqr: f64,
    pub samples: Vec<f64>,
    pub audio_seconds: f64,
}

pub const RTF_WARMUP: usize = 2;

/// Real-time factor of ground-truth-duration synthesis over `utterances`:
/// wall time divided by `frames * 10 ms`, median over `repeats` timed runs
/// after two warmup runs. Runs on the calling thread only.
pub fn rtf_bench(model: &TtsModel, utterances: &[&Utterance], repeats: usize) -> Result<RtfReport> {
    if utterances.is_empty() || repeats == 0 {
        return Err(Error::Empty("rtf bench needs utterances and repeats".into()));
    }
    let frames: usize = utterances.iter().map(|u| u.frames()).sum();
    let audio_seconds = frames as f64 * FRAME_SHIFT_MS / 1000.0;
    let run = || -> Result<Duration> {
        let start = Instant::now();
        for u in utterances {
            std::hint::black_box(model.synthesize(&u.phonemes, &u.reference, Some(&u.durations))?);
        }
        Ok(start.elapsed())
    };
    for _ in 0..RTF_WARMUP {
        run()?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = run()?;
        if t < Duration::from_micros(100) {
            log::warn!("timed run took {t:?}; use longer utterances for a stable RTF");
        }
        samples.push(t.as_secs_f64() / audio_seconds);
    }
    let q = Quartiles::of(&samples)?;
    Ok(RtfReport {
        rtf_median: q.median,
        rtf_iqr: q.q3 - q.q1,
        samples,
        audio_seconds,
    })
}

/// Mixture operation counts summed over `utterances` and every site of
/// `model`. The duration predictor runs per phoneme, the other sites per frame.
pub fn moa_flops_total(model: &TtsModel, utterances: &[&Utterance]) -> MoaFlops {
    let mut total = MoaFlops {
        adapter_macs: 0,
        adapter_elementwise: 0,
        gate_macs: 0,
        infer_flops: 0,
        train_flops: 0,
    };
    for u in utterances {
        for site in model.moa_sites() {
            let len = if site.site_id == "predictor.duration" {
                u.phonemes.len()
            } else {
                u.frames()
            };
            let f = site.flops(len);
            total.adapter_macs += f.adapter_macs;
            total.adapter_elementwise += f.adapter_elementwise;
            total.gate_macs += f.gate_macs;
            total.infer_flops += f.infer_flops;
            total.train_flops += f.train_flops;
        }
    }
    total
}

/// Pearson correlation; `None` if either vector has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// One row of a gate-trace export.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTraceRow {
    pub utterance_id: String,
    pub speaker_id: String,
    pub site_id: String,
    pub layer_index: usize,
    pub weights: Vec<f64>,
}

impl GateTraceRow {
    pub fn from_traces(utterance_id: &str, speaker_id: &str, traces: &[GateTrace]) -> Vec<Self> {
        traces
            .iter()
            .map(|t| Self {
                utterance_id: utterance_id.to_string(),
                speaker_id: speaker_id.to_string(),
                site_id: t.site_id.clone(),
                layer_index: t.layer_index,
                weights: t.weights.clone(),
            })
            .collect()
    }
}

pub fn gate_traces_csv(rows: &[GateTraceRow], provenance: &Value) -> String {
    let n = rows.iter().map(|r| r.weights.len()).max().unwrap_or(0);
    let mut out = provenance_header(provenance);
    out.push_str("utterance_id,speaker_id,site_id,layer_index");
    for i in 1..=n {
        out.push_str(&format!(",w_{i}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}", r.utterance_id, r.speaker_id, r.site_id, r.layer_index));
        for w in &r.weights {
            out.push_str(&format!(",{w}"));
        }
        out.push('\n');
    }
    out
}

/// Parses [`gate_traces_csv`] output; each weight row must sum to 1 within 1e-9.
pub fn parse_gate_traces(text: &str) -> Result<Vec<GateTraceRow>> {
    let (_, body) = split_provenance(text)?;
    let mut lines = body.lines();
    let header = lines.next().ok_or_else(|| Error::Format("gate trace has no header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 5 || cols[..4] != ["utterance_id", "speaker_id", "site_id", "layer_index"] {
        return Err(Error::Format("unexpected gate trace header".into()));
    }
    let n = cols.len() - 4;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = |m: &str| Error::Format(format!("gate trace line {}: {m}", i + 2));
        if f.len() != 4 + n {
            return Err(bad("wrong field count"));
        }
        let weights = f[4..]
            .iter()
            .map(|w| w.trim().parse::<f64>().map_err(|_| bad("weight is not a number")))
            .collect::<Result<Vec<_>>>()?;
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(bad("weights must be non-negative and sum to 1"));
        }
        rows.push(GateTraceRow {
            utterance_id: f[0].to_string(),
            speaker_id: f[1].to_string(),
            site_id: f[2].to_string(),
            layer_index: f[3].parse().map_err(|_| bad("layer_index is not an integer"))?,
            weights,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub speakers: Vec<String>,
    pub groups: Vec<Option<Group>>,
    pub values: Vec<Vec<Option<f64>>>,
}

/// Speaker-by-speaker Pearson correlation of gate weights at `site_id`;
/// uses the first trace row per speaker. Zero-variance vectors give `None`.
pub fn gating_correlation(
    rows: &[GateTraceRow],
    site_id: &str,
    groups: &BTreeMap<String, Group>,
) -> Result<CorrelationMatrix> {
    let mut picked: BTreeMap<&str, &GateTraceRow> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.site_id == site_id) {
        picked.entry(&r.speaker_id).or_insert(r);
    }
    if picked.is_empty() {
        return Err(Error::Input(format!("no gate traces for site {site_id}")));
    }
    let speakers: Vec<String> = picked.keys().map(|s| s.to_string()).collect();
    let vecs: Vec<&[f64]> = picked.values().map(|r| r.weights.as_slice()).collect();
    let mut warned = BTreeSet::new();
    let values = (0..vecs.len())
        .map(|i| {
            (0..vecs.len())
                .map(|j| {
                    let r = if i == j && pearson(vecs[i], vecs[i]).is_some() {
                        Some(1.0)
                    } else {
                        pearson(vecs[i], vecs[j])
                    };
                    if r.is_none() && warned.insert((i.min(j), i.max(j))) {
                        log::warn!(
                            "correlation of {} and {} undefined (zero variance)",
                            speakers[i],
                            speakers[j]
                        );
                    }
                    r
                })
                .collect()
        })
        .collect();
    Ok(CorrelationMatrix {
        groups: speakers.iter().map(|s| groups.get(s).copied()).collect(),
        speakers,
        values,
    })
}

impl CorrelationMatrix {
    /// Mean off-diagonal correlation for pairs in the same group and in
    /// different groups; undefined pairs are skipped.
    pub fn within_between(&self) -> (Option<f64>, Option<f64>) {
        let (mut w, mut nw, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..self.speakers.len() {
            for j in i + 1..self.speakers.len() {
                let (Some(gi), Some(gj), Some(r)) = (self.groups[i], self.groups[j], self.values[i][j]) else {
                    continue;
                };
                if gi == gj {
                    w += r;
                    nw += 1;
                } else {
                    b += r;
                    nb += 1;
                }
            }
        }
        ((nw > 0).then(|| w / nw as f64), (nb > 0).then(|| b / nb as f64))
    }

    /// Header row of speaker ids, then one row per speaker (empty cell for
    /// undefined), then a `group` row.
    pub fn to_csv(&self, provenance: &Value) -> String {
        let mut out = provenance_header(provenance);
        out.push_str("speaker_id");
        for s in &self.speakers {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
        for (s, row) in self.speakers.iter().zip(&self.values) {
            out.push_str(s);
            for v in row {
                match v {
                    Some(r) => out.push_str(&format!(",{r}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out.push_str("group");
        for g in &self.groups {
            out.push_str(&format!(",{}", g.map(|g| g.label()).unwrap_or("")));
        }
        out.push('\n');
        out
    }

    /// Whitespace-separated `i j r` triples for gnuplot `with image`.
    pub fn to_heatmap_data(&self) -> String {
        let mut out = String::new();
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out.push_str(&format!("{i} {j} {}\n", v.map(|r| r.to_string()).unwrap_or_else(|| "NaN".into())));
            }
            out.push('\n');
        }
        out
    }
}
