//! Seeded synthetic multi-speaker corpus: parametric speakers in four groups,
//! phoneme sequences with durations, frame-level log-F0/energy, log-mel
//! targets and layered reference features.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::{split_provenance, write_atomic, Container};
use crate::speaker::LayeredFeatures;
use crate::tensor::Tensor;

/// Frames with energy above this are treated as voiced.
pub const VOICED_ENERGY: f64 = 0.15;
pub const FRAME_SHIFT_MS: f64 = 10.0;
pub const MIN_PHONEMES: usize = 8;
pub const MAX_PHONEMES: usize = 30;

/// Per-frame statistics fed to the reference-view projections.
const STAT_DIM: usize = 10;
const LEXICON_SEED: u64 = 0x1e71_c0de;
const VIEW_SEED: u64 = 0x0f1e_a7e5;

pub fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "F-pro")]
    FPro,
    #[serde(rename = "F-non")]
    FNon,
    #[serde(rename = "M-pro")]
    MPro,
    #[serde(rename = "M-non")]
    MNon,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::FPro, Group::FNon, Group::MPro, Group::MNon];

    pub fn is_female(self) -> bool {
        matches!(self, Group::FPro | Group::FNon)
    }

    pub fn is_pro(self) -> bool {
        matches!(self, Group::FPro | Group::MPro)
    }

    pub fn label(self) -> &'static str {
        match self {
            Group::FPro => "F-pro",
            Group::FNon => "F-non",
            Group::MPro => "M-pro",
            Group::MNon => "M-non",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.label() == s)
            .ok_or_else(|| Error::Input(format!("unknown speaker group {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Input(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub speaker_id: String,
    pub group: Group,
    pub split: Split,
    pub base_log_f0: f64,
    pub f0_range: f64,
    pub tempo: f64,
    pub spectral_tilt: f64,
    pub style_dynamics: f64,
}

/// Speakers per split within one group of `n` speakers: roughly 6/1/1 of 8.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    match n {
        0 => (0, 0, 0),
        1 => (1, 0, 0),
        2 => (1, 0, 1),
        _ => {
            let held = (n / 8).max(1);
            (n - 2 * held, held, held)
        }
    }
}

fn split_of(index_in_group: usize, n: usize) -> Split {
    let (train, val, _) = split_counts(n);
    if index_in_group < train {
        Split::Train
    } else if index_in_group < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

/// `4 * n_per_group` speakers, group-major, with disjoint stratified splits.
pub fn make_speakers(n_per_group: usize, seed: u64) -> Result<Vec<SpeakerSpec>> {
    if n_per_group == 0 {
        return Err(Error::Config("n_per_group must be at least 1".into()));
    }
    let jitter = Normal::new(0.0, 0.08).expect("valid normal");
    let mut out = Vec::with_capacity(4 * n_per_group);
    for (gi, group) in Group::ALL.into_iter().enumerate() {
        for i in 0..n_per_group {
            let index = gi * n_per_group + i;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5eed_0000 + index as u64));
            let centre: f64 = if group.is_female() { 220.0 } else { 110.0 };
            let style_dynamics = if group.is_pro() {
                rng.random_range(0.65..1.0)
            } else {
                rng.random_range(0.1..0.4)
            };
            let tilt_base = if group.is_female() { -0.8 } else { -1.6 };
            out.push(SpeakerSpec {
                speaker_id: format!("spk{index:03}"),
                group,
                split: split_of(i, n_per_group),
                base_log_f0: centre.ln() + jitter.sample(&mut rng),
                f0_range: rng.random_range(0.08..0.16),
                tempo: rng.random_range(0.8..1.25),
                spectral_tilt: tilt_base + rng.random_range(-0.4..0.4),
                style_dynamics,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_id: String,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    /// Log-F0 per frame.
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    /// `[T, n_mels]` log-mel.
    pub mel: Tensor,
    pub reference: LayeredFeatures,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.pitch.len()
    }

    pub fn voiced_mask(&self) -> Vec<bool> {
        self.energy.iter().map(|&e| e > VOICED_ENERGY).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let t: usize = self.durations.iter().sum();
        if self.phonemes.is_empty() || self.phonemes.len() != self.durations.len() {
            return Err(Error::Format("phoneme and duration counts differ".into()));
        }
        if t == 0 || self.pitch.len() != t || self.energy.len() != t || self.mel.rows() != t {
            return Err(Error::Format(format!(
                "frame counts disagree: durations {t}, pitch {}, energy {}, mel {}",
                self.pitch.len(),
                self.energy.len(),
                self.mel.rows()
            )));
        }
        if self.mel.shape().len() != 2 {
            return Err(Error::Format("mel must be two-dimensional".into()));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        self.to_container_with(None)
    }

    /// Container with an optional `provenance` meta entry.
    pub fn to_container_with(&self, provenance: Option<&serde_json::Value>) -> Result<Container> {
        let t = self.frames();
        let mut meta = json!({
            "utterance_id": self.utterance_id,
            "speaker_id": self.speaker_id,
            "phonemes": self.phonemes,
            "durations": self.durations,
        });
        if let Some(p) = provenance {
            meta["provenance"] = p.clone();
        }
        let mut c = Container::new("utterance", meta);
        c.push("pitch", Tensor::vector(self.pitch.clone())?);
        c.push("energy", Tensor::vector(self.energy.clone())?);
        c.push("mel", self.mel.clone());
        c.push("reference", self.reference.tensor().clone());
        debug_assert_eq!(t, self.mel.rows());
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("utterance")?;
        let field = |k: &str| {
            c.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("utterance meta lacks {k}")))
        };
        let utt = Utterance {
            utterance_id: serde_json::from_value(field("utterance_id")?)?,
            speaker_id: serde_json::from_value(field("speaker_id")?)?,
            phonemes: serde_json::from_value(field("phonemes")?)?,
            durations: serde_json::from_value(field("durations")?)?,
            pitch: c.section("pitch")?.data().to_vec(),
            energy: c.section("energy")?.data().to_vec(),
            mel: c.section("mel")?.clone(),
            reference: LayeredFeatures::new(c.section("reference")?.clone())
                .map_err(|e| Error::Format(e.to_string()))?,
        };
        utt.validate()?;
        Ok(utt)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::decode(bytes)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Fixed per-phoneme-class properties shared by all speakers.
#[derive(Clone, Debug)]
struct Lexicon {
    base_duration: Vec<f64>,
    accent: Vec<f64>,
    loudness: Vec<f64>,
    voiced: Vec<bool>,
    formants: Vec<[f64; 2]>,
}

impl Lexicon {
    fn new(vocab: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(LEXICON_SEED);
        let mut lex = Lexicon {
            base_duration: Vec::with_capacity(vocab),
            accent: Vec::with_capacity(vocab),
            loudness: Vec::with_capacity(vocab),
            voiced: Vec::with_capacity(vocab),
            formants: Vec::with_capacity(vocab),
        };
        for c in 0..vocab {
            lex.base_duration.push(rng.random_range(2.0..6.0));
            lex.accent.push(rng.random_range(-1.0..1.0));
            lex.loudness.push(rng.random_range(-1.0..1.0));
            lex.voiced.push(c % 5 != 0);
            lex.formants.push([rng.random_range(0.15..0.45), rng.random_range(0.5..0.9)]);
        }
        lex
    }
}

/// Shapes of the rendered targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub vocab_size: usize,
    pub n_mels: usize,
    pub ref_layers: usize,
    pub ref_width: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 40,
            n_mels: 20,
            ref_layers: 4,
            ref_width: 16,
        }
    }
}

/// Renders utterances for one [`RenderConfig`].
#[derive(Clone, Debug)]
pub struct Renderer {
    cfg: RenderConfig,
    lexicon: Lexicon,
    /// Per layer `[ref_width, STAT_DIM]` projection and noise level.
    views: Vec<(Vec<f64>, f64)>,
}

impl Renderer {
    pub fn new(cfg: RenderConfig) -> Result<Self> {
        if cfg.vocab_size == 0 || cfg.n_mels < 2 || cfg.ref_layers == 0 || cfg.ref_width == 0 {
            return Err(Error::Config(format!("invalid render config {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(VIEW_SEED);
        let bound = (3.0 / STAT_DIM as f64).sqrt();
        let views = (0..cfg.ref_layers)
            .map(|l| {
                let w = (0..cfg.ref_width * STAT_DIM)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                (w, 0.05 + 0.1 * l as f64)
            })
            .collect();
        Ok(Self {
            cfg,
            lexicon: Lexicon::new(cfg.vocab_size),
            views,
        })
    }

    pub fn config(&self) -> RenderConfig {
        self.cfg
    }

    /// Deterministic in `(spec, text_seed)`.
    pub fn render(&self, spec: &SpeakerSpec, utterance_id: &str, text_seed: u64) -> Result<Utterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(text_seed);
        let noise = Normal::new(0.0, 1.0).expect("valid normal");
        let lex = &self.lexicon;
        let p = rng.random_range(MIN_PHONEMES..=MAX_PHONEMES);
        let phonemes: Vec<usize> = (0..p).map(|_| rng.random_range(0..self.cfg.vocab_size)).collect();
        let durations: Vec<usize> = phonemes
            .iter()
            .map(|&c| {
                ((lex.base_duration[c] * spec.tempo).round() as usize).max(1)
            })
            .collect();
        let frames: usize = durations.iter().sum();
        let owner: Vec<usize> = durations
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
            .collect();

        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let style = spec.style_dynamics;
        let mut pitch = Vec::with_capacity(frames);
        let mut energy = Vec::with_capacity(frames);
        for (t, &i) in owner.iter().enumerate() {
            let c = phonemes[i];
            let wave = (std::f64::consts::TAU * t as f64 / 40.0 + phase).sin();
            let contour = lex.accent[c] * (0.3 + style) + 0.6 * style * wave - 0.004 * t as f64;
            let lf0 = spec.base_log_f0 + spec.f0_range * contour + 0.004 * noise.sample(&mut rng);
            pitch.push(lf0);
            let e = if lex.voiced[c] {
                (0.6 + 0.15 * lex.loudness[c] + 0.25 * style * contour.clamp(-1.5, 1.5)).max(0.3)
            } else {
                0.05 + 0.02 * lex.loudness[c]
            };
            energy.push(e + 0.01 * noise.sample(&mut rng));
        }

        let n_mels = self.cfg.n_mels;
        // Formant positions shift with the speaker's register.
        let warp = (spec.base_log_f0 - 155f64.ln()) * 0.35;
        let mut mel = vec![0.0; frames * n_mels];
        for (t, &i) in owner.iter().enumerate() {
            let c = phonemes[i];
            let pitch_pos = ((pitch[t] - 80f64.ln()) / (400f64.ln() - 80f64.ln())).clamp(0.0, 1.0) * 0.3;
            for m in 0..n_mels {
                let f = m as f64 / (n_mels - 1) as f64;
                let mut v = spec.spectral_tilt * f + 2.0 * energy[t] - 1.0;
                if lex.voiced[c] {
                    for (k, &centre) in lex.formants[c].iter().enumerate() {
                        let mu = centre * (1.0 + warp);
                        let amp = if k == 0 { 1.2 } else { 0.7 };
                        v += amp * (-(f - mu).powi(2) / (2.0 * 0.06f64.powi(2))).exp();
                    }
                    v += 0.8 * energy[t] * (-(f - pitch_pos).powi(2) / (2.0 * 0.05f64.powi(2))).exp();
                } else {
                    v += 0.4 * (f - 0.7).max(0.0);
                }
                mel[t * n_mels + m] = v + 0.02 * noise.sample(&mut rng);
            }
        }

        let mut lf = vec![0.0; self.cfg.ref_layers * frames * self.cfg.ref_width];
        let coarse = 8usize;
        for t in 0..frames {
            let row = &mel[t * n_mels..(t + 1) * n_mels];
            let mut stats = [0.0; STAT_DIM];
            for (b, s) in stats.iter_mut().take(coarse).enumerate() {
                let lo = b * n_mels / coarse;
                let hi = ((b + 1) * n_mels / coarse).max(lo + 1).min(n_mels);
                *s = row[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            }
            stats[coarse] = (pitch[t] - PITCH_REF) / 0.35;
            stats[coarse + 1] = energy[t];
            for (l, (w, sigma)) in self.views.iter().enumerate() {
                for j in 0..self.cfg.ref_width {
                    let proj: f64 = (0..STAT_DIM).map(|k| w[j * STAT_DIM + k] * stats[k]).sum();
                    lf[(l * frames + t) * self.cfg.ref_width + j] = proj + sigma * noise.sample(&mut rng);
                }
            }
        }

        let utt = Utterance {
            utterance_id: utterance_id.to_string(),
            speaker_id: spec.speaker_id.clone(),
            phonemes,
            durations,
            pitch,
            energy,
            mel: Tensor::matrix(frames, n_mels, mel)?,
            reference: LayeredFeatures::new(Tensor::new(
                vec![self.cfg.ref_layers, frames, self.cfg.ref_width],
                lf,
            )?)?,
        };
        utt.validate()?;
        Ok(utt)
    }
}

const PITCH_REF: f64 = 5.043_425_116_919_247;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_per_group: usize,
    pub utts_per_speaker: usize,
    #[serde(default)]
    pub render: RenderConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_per_group: 8,
            utts_per_speaker: 50,
            render: RenderConfig::default(),
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub group: Group,
    pub split: Split,
    pub path: String,
    pub frames: usize,
    pub phonemes: usize,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn parse_line(line: &str) -> Result<Self> {
        let e: ManifestEntry = serde_json::from_str(line)?;
        if e.utterance_id.is_empty() || e.speaker_id.is_empty() {
            return Err(Error::Format("manifest ids must be non-empty".into()));
        }
        let p = Path::new(&e.path);
        if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(Error::Format(format!("manifest path {:?} escapes the corpus", e.path)));
        }
        Ok(e)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("manifest entry serializes")
    }
}

/// Parses manifest lines, skipping a leading provenance line.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let (_, body) = split_provenance(text)?;
    let offset = usize::from(body.len() != text.len());
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            ManifestEntry::parse_line(l)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1 + offset)))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub speakers: Vec<SpeakerSpec>,
    pub entries: Vec<ManifestEntry>,
    pub utterances: Vec<Utterance>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CORPUS_FILE: &str = "corpus.json";

impl Corpus {
    pub fn build(config: &CorpusConfig) -> Result<Self> {
        if config.utts_per_speaker == 0 {
            return Err(Error::Config("utts_per_speaker must be at least 1".into()));
        }
        let speakers = make_speakers(config.n_per_group, config.seed)?;
        let renderer = Renderer::new(config.render)?;
        let mut entries = Vec::new();
        let mut utterances = Vec::new();
        for (si, spec) in speakers.iter().enumerate() {
            for u in 0..config.utts_per_speaker {
                let id = format!("{}_{u:03}", spec.speaker_id);
                let seed = mix(config.seed, ((si as u64) << 20) | u as u64);
                let utt = renderer.render(spec, &id, seed)?;
                entries.push(ManifestEntry {
                    path: format!("utterances/{id}.utt"),
                    utterance_id: id,
                    speaker_id: spec.speaker_id.clone(),
                    group: spec.group,
                    split: spec.split,
                    frames: utt.frames(),
                    phonemes: utt.phonemes.len(),
                    seed,
                });
                utterances.push(utt);
            }
        }
        let corpus = Self {
            config: config.clone(),
            speakers,
            entries,
            utterances,
        };
        corpus.check_splits()?;
        Ok(corpus)
    }

    /// Speaker sets of the three splits are pairwise disjoint.
    pub fn check_splits(&self) -> Result<()> {
        let sets: Vec<BTreeSet<&str>> = [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .map(|s| {
                self.entries
                    .iter()
                    .filter(|e| e.split == s)
                    .map(|e| e.speaker_id.as_str())
                    .collect()
            })
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                if let Some(shared) = sets[i].intersection(&sets[j]).next() {
                    return Err(Error::Contract(format!("speaker {shared} appears in two splits")));
                }
            }
        }
        Ok(())
    }

    /// Corpus config and seed recorded in every written artifact.
    pub fn provenance(&self) -> serde_json::Value {
        json!({ "corpus": self.config, "seed": self.config.seed })
    }

    /// One JSON line per utterance. Provenance lives in `corpus.json` and
    /// in each utterance file, keeping the manifest one line per entry.
    pub fn manifest_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&e.to_line());
            s.push('\n');
        }
        s
    }

    pub fn manifest_hash(&self) -> String {
        sha256_hex(self.manifest_text().as_bytes())
    }

    pub fn speaker(&self, id: &str) -> Option<&SpeakerSpec> {
        self.speakers.iter().find(|s| s.speaker_id == id)
    }

    /// Indices of utterances in `split`.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Writes utterance files, `corpus.json`, then the manifest last.
    /// Refuses an existing directory unless `force`.
    pub fn write(&self, dir: &Path, force: bool) -> Result<()> {
        prepare_output_dir(dir, force)?;
        std::fs::create_dir_all(dir.join("utterances"))?;
        for (e, u) in self.entries.iter().zip(&self.utterances) {
            let mut c = u.to_container_with(Some(&self.provenance()))?;
            c.meta["group"] = serde_json::to_value(e.group)?;
            c.write(&dir.join(&e.path))?;
        }
        let meta = json!({
            "provenance": self.provenance(),
            "config": self.config,
            "speakers": self.speakers,
            "manifest_sha256": self.manifest_hash(),
        });
        write_atomic(&dir.join(CORPUS_FILE), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        write_atomic(&dir.join(MANIFEST_FILE), self.manifest_text().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join(CORPUS_FILE))?)?;
        let config: CorpusConfig = serde_json::from_value(meta["config"].clone())?;
        let speakers: Vec<SpeakerSpec> = serde_json::from_value(meta["speakers"].clone())?;
        let entries = parse_manifest(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let utterances = entries
            .iter()
            .map(|e| {
                let u = Utterance::read(&dir.join(&e.path))?;
                if u.utterance_id != e.utterance_id || u.speaker_id != e.speaker_id {
                    return Err(Error::Format(format!("{} does not match its manifest line", e.path)));
                }
                Ok(u)
            })
            .collect::<Result<Vec<_>>>()?;
        let corpus = Self {
            config,
            speakers,
            entries,
            utterances,
        };
        corpus.check_splits()?;
        Ok(corpus)
    }
}

/// Creates `dir`, or fails if it exists and is non-empty without `force`.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Exists(PathBuf::from(dir)));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_corpus(seed: u64) -> Corpus {
        Corpus::build(&CorpusConfig {
            seed,
            n_per_group: 2,
            utts_per_speaker: 3,
            render: RenderConfig::default(),
        })
        .unwrap()
    }

    #[test]
    fn speakers_per_group_and_determinism() {
        let a = make_speakers(8, 11).unwrap();
        assert_eq!(a.len(), 32);
        for g in Group::ALL {
            assert_eq!(a.iter().filter(|s| s.group == g).count(), 8);
        }
        assert_eq!(a, make_speakers(8, 11).unwrap());
    }

    #[test]
    fn female_register_above_male_on_many_seeds() {
        for seed in 0..20 {
            let s = make_speakers(8, seed).unwrap();
            let mean = |f: bool| {
                let v: Vec<f64> = s.iter().filter(|x| x.group.is_female() == f).map(|x| x.base_log_f0).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            assert!(mean(true) > mean(false));
        }
    }

    #[test]
    fn pro_dynamics_exceed_non_pro() {
        let s = make_speakers(8, 3).unwrap();
        let min_pro = s.iter().filter(|x| x.group.is_pro()).map(|x| x.style_dynamics).fold(f64::INFINITY, f64::min);
        let max_non = s.iter().filter(|x| !x.group.is_pro()).map(|x| x.style_dynamics).fold(0.0, f64::max);
        assert!(min_pro > max_non);
    }

    #[test]
    fn default_split_is_24_4_4() {
        let s = make_speakers(8, 0).unwrap();
        let count = |sp| s.iter().filter(|x| x.split == sp).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (24, 4, 4));
        assert_eq!(split_counts(8), (6, 1, 1));
    }

    #[test]
    fn frames_match_durations_and_render_is_deterministic() {
        let r = Renderer::new(RenderConfig::default()).unwrap();
        let spec = &make_speakers(1, 5).unwrap()[0];
        let a = r.render(spec, "u", 42).unwrap();
        assert_eq!(a.frames(), a.durations.iter().sum::<usize>());
        assert_eq!(a.mel.rows(), a.frames());
        assert!((MIN_PHONEMES..=MAX_PHONEMES).contains(&a.phonemes.len()));
        assert_eq!(a, r.render(spec, "u", 42).unwrap());
        assert_ne!(a, r.render(spec, "u", 43).unwrap());
    }

    #[test]
    fn utterance_container_round_trip() {
        let c = small_corpus(1);
        let u = &c.utterances[0];
        let bytes = u.to_container().unwrap().encode().unwrap();
        assert_eq!(&Utterance::decode(&bytes).unwrap(), u);
    }

    #[test]
    fn manifest_line_rejects_escaping_paths() {
        let c = small_corpus(1);
        let mut e = c.entries[0].clone();
        assert_eq!(ManifestEntry::parse_line(&e.to_line()).unwrap(), e);
        e.path = "../x.utt".into();
        assert!(ManifestEntry::parse_line(&e.to_line()).is_err());
        assert!(ManifestEntry::parse_line("{}").is_err());
    }

    #[test]
    fn write_refuses_existing_dir_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_corpus(2);
        c.write(dir.path(), false).unwrap();
        assert!(matches!(c.write(dir.path(), false), Err(Error::Exists(_))));
        c.write(dir.path(), true).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.entries, c.entries);
        assert_eq!(back.utterances, c.utterances);
        assert_eq!(back.manifest_hash(), c.manifest_hash());
    }

    fn entry() -> impl proptest::strategy::Strategy<Value = ManifestEntry> {
        use proptest::prelude::*;
        (
            "\\PC{1,12}",
            "[a-z0-9_\"\\\\ ]{1,8}",
            0usize..4,
            0usize..3,
            proptest::collection::vec("[a-zA-Z0-9_.-]{1,6}", 1..4),
            (any::<usize>(), any::<usize>(), any::<u64>()),
        )
            .prop_filter("no parent components", |(_, _, _, _, segs, _)| segs.iter().all(|s| s != ".."))
            .prop_map(|(utterance_id, speaker_id, g, sp, segs, (frames, phonemes, seed))| ManifestEntry {
                utterance_id,
                speaker_id,
                group: Group::ALL[g],
                split: [Split::Train, Split::Val, Split::Test][sp],
                path: segs.join("/"),
                frames,
                phonemes,
                seed,
            })
    }

    proptest::proptest! {
        #[test]
        fn manifest_lines_round_trip(entries in proptest::collection::vec(entry(), 1..6), seed in 0u64..100) {
            for e in &entries {
                let line = e.to_line();
                proptest::prop_assert!(!line.contains('\n'));
                proptest::prop_assert_eq!(&ManifestEntry::parse_line(&line).unwrap(), e);
            }
            let mut text = crate::format::provenance_header(&json!({"seed": seed}));
            for e in &entries {
                text.push_str(&e.to_line());
                text.push('\n');
            }
            proptest::prop_assert_eq!(parse_manifest(&text).unwrap(), entries);
        }
    }
}
