use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};
use moa_tts::cache::{reference_hash, EmbeddingCache};
use moa_tts::data::{parse_manifest, sha256_hex, Corpus, CorpusConfig, Group, Split, Utterance, MANIFEST_FILE};
use moa_tts::eval::{
    aggregate, compare_records, gate_traces_csv, gating_correlation, moa_flops_total, parse_gate_traces, rtf_bench,
    speaker_reports_csv, GateTraceRow, MelRecord,
};
use moa_tts::format::{provenance_header, write_atomic, Container};
use moa_tts::model::ConfigFile;
use moa_tts::train::{metrics_csv, resume_two_phase, train_two_phase, CheckpointSink, TrainConfig};
use moa_tts::{Error, Result, TtsModel};
use serde_json::{json, Value};

use crate::run::{require, RunDir};
use crate::OutArgs;

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Speakers in each of the four groups.
    #[arg(long, default_value_t = 8)]
    speakers_per_group: usize,
    #[arg(long, default_value_t = 50)]
    utts_per_speaker: usize,
    #[command(flatten)]
    out: OutArgs,
}

pub fn gen_data(runs_root: &Path, a: GenData) -> Result<()> {
    let cfg = CorpusConfig {
        seed: a.seed,
        n_per_group: a.speakers_per_group,
        utts_per_speaker: a.utts_per_speaker,
        ..CorpusConfig::default()
    };
    let corpus = Corpus::build(&cfg)?;
    let run = RunDir::create(runs_root, &a.out, "gen-data", a.seed, serde_json::to_value(&cfg)?)?;
    // The run directory was vetted above and holds only run.json.
    corpus.write(&run.dir, true)?;
    println!(
        "{}",
        json!({
            "run_dir": run.dir,
            "speakers": corpus.speakers.len(),
            "utterances": corpus.utterances.len(),
            "manifest_sha256": corpus.manifest_hash(),
        })
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct Train {
    /// TOML file with `[model]` and optional `[train]` tables.
    #[arg(long)]
    config: PathBuf,
    /// Corpus directory written by gen-data.
    #[arg(long)]
    corpus: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    phase1_steps: Option<usize>,
    #[arg(long)]
    phase2_steps: Option<usize>,
    /// Continue from a checkpoint written by an earlier run of this config.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

pub fn train(runs_root: &Path, a: Train) -> Result<()> {
    require(&a.config, "config")?;
    require(&a.corpus.join(MANIFEST_FILE), "corpus manifest")?;
    if let Some(r) = &a.resume {
        require(r, "checkpoint")?;
    }
    let file = ConfigFile::load(&a.config)?;
    let mut tcfg = file.train.clone().unwrap_or_default();
    if let Some(s) = a.seed {
        tcfg.seed = s;
    }
    if let Some(n) = a.phase1_steps {
        tcfg.phase1_steps = n;
    }
    if let Some(n) = a.phase2_steps {
        tcfg.phase2_steps = n;
    }
    tcfg.validate()?;
    let used = ConfigFile {
        model: file.model.clone(),
        train: Some(tcfg.clone()),
    };
    let resumed = match &a.resume {
        Some(p) => {
            let c = Container::read(p)?;
            let step = c.meta.get("step").and_then(Value::as_u64).unwrap_or(0) as usize;
            Some((TtsModel::from_container(&c)?, step, sha256_hex(&std::fs::read(p)?)))
        }
        None => None,
    };
    let corpus = Corpus::load(&a.corpus)?;
    let run = RunDir::create(
        runs_root,
        &a.out,
        "train",
        tcfg.seed,
        json!({
            "model": used.model,
            "train": tcfg,
            "corpus_manifest_sha256": corpus.manifest_hash(),
            "resume_sha256": resumed.as_ref().map(|r| r.2.clone()),
        }),
    )?;
    run.write_text("config.toml", &format!("{}{}", provenance_header(&run.provenance), used.to_toml()?))?;
    let pool: Vec<&Utterance> = corpus
        .split_indices(Split::Train)
        .into_iter()
        .map(|i| &corpus.utterances[i])
        .collect();
    let probe: Vec<&Utterance> = pool.iter().take(tcfg.batch_size).copied().collect();
    let sink = CheckpointSink {
        dir: run.dir.clone(),
        provenance: run.provenance.clone(),
    };
    info!("training on {} utterances", pool.len());
    let out = match resumed {
        Some((model, step, _)) => resume_two_phase(&used.model, &tcfg, model, step, &pool, &probe, Some(&sink))?,
        None => train_two_phase(&used.model, &tcfg, &pool, &probe, Some(&sink))?,
    };
    write_atomic(&run.path("metrics.csv"), metrics_csv(&out.log, &run.provenance).as_bytes())?;
    let last = out.log.last().map(|r| r.losses);
    let summary = json!({
        "steps": out.log.last().map(|r| r.step),
        "final_losses": last,
        "insertion_check": out.insertion_check,
        "importance_check": out.importance_check,
        "params": out.model.count_parameters().total,
    });
    run.write_json("summary.json", summary.clone())?;
    println!("{}", json!({ "run_dir": run.dir, "summary": summary }));
    Ok(())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}; expected train, val or test")),
    }
}

/// Corpus utterances of `split`, optionally restricted to `ids`, in manifest
/// order.
fn select(corpus: &Corpus, split: Split, ids: &[String], limit: Option<usize>) -> Result<Vec<usize>> {
    let mut picked: Vec<usize> = if ids.is_empty() {
        corpus.split_indices(split)
    } else {
        let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        let found: Vec<usize> = (0..corpus.entries.len())
            .filter(|&i| wanted.contains(corpus.entries[i].utterance_id.as_str()))
            .collect();
        if found.len() != wanted.len() {
            let have: BTreeSet<&str> = found.iter().map(|&i| corpus.entries[i].utterance_id.as_str()).collect();
            let missing: Vec<&&str> = wanted.difference(&have).collect();
            return Err(Error::Input(format!("utterances not in corpus: {missing:?}")));
        }
        found
    };
    if let Some(n) = limit {
        picked.truncate(n);
    }
    if picked.is_empty() {
        return Err(Error::Empty("no utterances selected".into()));
    }
    Ok(picked)
}

#[derive(Args, Debug)]
pub struct Synth {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Comma-separated utterance ids; overrides --split.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    #[arg(long)]
    limit: Option<usize>,
    /// Take the reference features of this utterance for every synthesis
    /// instead of each utterance's own.
    #[arg(long)]
    reference: Option<String>,
    /// Length-regulate with predicted instead of ground-truth durations.
    #[arg(long)]
    predicted_durations: bool,
    /// Embedding cache from an earlier run of the same checkpoint.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

pub fn synth(runs_root: &Path, a: Synth) -> Result<()> {
    require(&a.checkpoint, "checkpoint")?;
    require(&a.corpus.join(MANIFEST_FILE), "corpus manifest")?;
    if let Some(c) = &a.cache {
        require(c, "embedding cache")?;
    }
    let ckpt_bytes = std::fs::read(&a.checkpoint)?;
    let model_sha = sha256_hex(&ckpt_bytes);
    let container = Container::decode(&ckpt_bytes)?;
    let model = TtsModel::from_container(&container)?;
    let seed = container
        .meta
        .pointer("/train_config/seed")
        .and_then(Value::as_u64)
        .unwrap_or(0);
    let corpus = Corpus::load(&a.corpus)?;
    let picked = select(&corpus, a.split, &a.ids, a.limit)?;
    let reference_idx = match &a.reference {
        Some(id) => Some(
            corpus
                .entries
                .iter()
                .position(|e| &e.utterance_id == id)
                .ok_or_else(|| Error::Input(format!("reference utterance {id} not in corpus")))?,
        ),
        None => None,
    };
    let mut cache = match &a.cache {
        Some(p) => {
            let c = EmbeddingCache::read(p)?;
            if c.model_sha256 == model_sha && c.d_emb == model.cfg.d_model {
                c
            } else {
                warn!("cache {} belongs to another checkpoint; ignoring it", p.display());
                EmbeddingCache::new(model_sha.clone(), model.cfg.d_model)
            }
        }
        None => EmbeddingCache::new(model_sha.clone(), model.cfg.d_model),
    };
    let run = RunDir::create(
        runs_root,
        &a.out,
        "synth",
        seed,
        json!({
            "model": model.cfg,
            "checkpoint_sha256": model_sha,
            "corpus_manifest_sha256": corpus.manifest_hash(),
            "reference": a.reference,
            "predicted_durations": a.predicted_durations,
        }),
    )?;
    std::fs::create_dir_all(run.path("mels"))?;
    let (mut hits, mut rows) = (0usize, Vec::new());
    for &i in &picked {
        let e = &corpus.entries[i];
        let u = &corpus.utterances[i];
        let r = reference_idx.unwrap_or(i);
        let ref_id = &corpus.entries[r].utterance_id;
        let ref_feats = &corpus.utterances[r].reference;
        let hash = reference_hash(ref_feats);
        let embedding = match cache.get(ref_id, &hash) {
            Some(v) => {
                hits += 1;
                v.to_vec()
            }
            None => {
                let v = model.embedding_of(ref_feats)?;
                cache.insert(ref_id.clone(), hash, v.clone())?;
                v
            }
        };
        let durations = (!a.predicted_durations).then_some(u.durations.as_slice());
        let syn = model.synthesize_with_embedding(&u.phonemes, &embedding, durations)?;
        let rec = MelRecord::from_synthesis(&e.utterance_id, &e.speaker_id, Some(e.group), &syn);
        rec.to_container(&run.provenance)?
            .write(&run.path(&format!("mels/{}.mel", e.utterance_id)))?;
        rows.extend(GateTraceRow::from_traces(&e.utterance_id, &e.speaker_id, &syn.gates));
    }
    cache.write(&run.path("embeddings.cache"), &run.provenance)?;
    if !rows.is_empty() {
        write_atomic(&run.path("gates.csv"), gate_traces_csv(&rows, &run.provenance).as_bytes())?;
    }
    println!(
        "{}",
        json!({ "run_dir": run.dir, "synthesized": picked.len(), "cache_hits": hits, "gate_rows": rows.len() })
    );
    Ok(())
}

/// Mel records in `dir`: the corpus utterances when it holds a manifest,
/// otherwise every `.mel` and `.utt` file below it.
fn load_records(dir: &Path) -> Result<Vec<MelRecord>> {
    require(dir, "directory")?;
    let records = if dir.join(MANIFEST_FILE).exists() {
        let corpus = Corpus::load(dir)?;
        corpus
            .entries
            .iter()
            .zip(&corpus.utterances)
            .map(|(e, u)| u.as_record(Some(e.group)))
            .collect()
    } else {
        let mut files = Vec::new();
        collect_files(dir, &mut files)?;
        files.sort();
        files.iter().map(|p| MelRecord::read(p)).collect::<Result<Vec<_>>>()?
    };
    let mut seen = BTreeSet::new();
    for r in &records {
        if !seen.insert(r.utterance_id.as_str()) {
            return Err(Error::Input(format!("{} appears twice in {}", r.utterance_id, dir.display())));
        }
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("no mel records in {}", dir.display())));
    }
    Ok(records)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if matches!(p.extension().and_then(|e| e.to_str()), Some("mel" | "utt")) {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct Eval {
    /// Directory of predicted mel records (e.g. a synth run).
    #[arg(long)]
    pred: PathBuf,
    /// Reference records: a corpus directory or another record directory.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

pub fn eval(runs_root: &Path, a: Eval) -> Result<()> {
    let pred = load_records(&a.pred)?;
    let reference = load_records(&a.reference)?;
    let metrics = compare_records(&pred, &reference)?;
    let agg = aggregate(&metrics)?;
    let run = RunDir::create(
        runs_root,
        &a.out,
        "eval",
        0,
        json!({ "pred": a.pred, "ref": a.reference }),
    )?;
    write_atomic(&run.path("speakers.csv"), speaker_reports_csv(&agg, &run.provenance).as_bytes())?;
    let mut utt_csv = provenance_header(&run.provenance);
    utt_csv.push_str("utterance_id,speaker_id,group,mcd,f0_rmse,dur_rmse\n");
    for m in &metrics {
        utt_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.utterance_id,
            m.speaker_id,
            m.group.map(|g| g.label()).unwrap_or(""),
            m.mcd,
            m.f0_rmse,
            m.dur_rmse
        ));
    }
    run.write_text("utterances.csv", &utt_csv)?;
    let summary = json!({
        "utterances": metrics.len(),
        "mcd_mean_over_speakers": agg.mean_over_speakers(|r| r.mcd_mean),
        "f0_rmse_mean_over_speakers": agg.mean_over_speakers(|r| r.f0_rmse_mean),
        "dur_rmse_mean_over_speakers": agg.mean_over_speakers(|r| r.dur_rmse_mean),
        "overall": agg.overall,
        "by_style": agg.by_style,
    });
    run.write_json("summary.json", summary.clone())?;
    println!("{}", json!({ "run_dir": run.dir, "summary": summary }));
    Ok(())
}

#[derive(Args, Debug)]
pub struct Bench {
    /// One or more checkpoints to time.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value_t = 8)]
    utterances: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[command(flatten)]
    out: OutArgs,
}

pub fn bench(runs_root: &Path, a: Bench) -> Result<()> {
    for c in &a.checkpoint {
        require(c, "checkpoint")?;
    }
    require(&a.corpus.join(MANIFEST_FILE), "corpus manifest")?;
    let corpus = Corpus::load(&a.corpus)?;
    let picked = select(&corpus, a.split, &[], Some(a.utterances))?;
    let utts: Vec<&Utterance> = picked.iter().map(|&i| &corpus.utterances[i]).collect();
    let hashes = a
        .checkpoint
        .iter()
        .map(|p| Ok(sha256_hex(&std::fs::read(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let run = RunDir::create(
        runs_root,
        &a.out,
        "bench",
        0,
        json!({
            "checkpoints": a.checkpoint,
            "checkpoint_sha256": hashes,
            "corpus_manifest_sha256": corpus.manifest_hash(),
            "utterances": a.utterances,
            "repeats": a.repeats,
        }),
    )?;
    let mut results = Vec::new();
    for path in &a.checkpoint {
        let model = TtsModel::load(path)?;
        let report = rtf_bench(&model, &utts, a.repeats)?;
        let flops = moa_flops_total(&model, &utts);
        let counts = model.count_parameters();
        results.push(json!({
            "checkpoint": path,
            "model": model.cfg,
            "rtf": report,
            "params_total": counts.total,
            "params_moa_added": counts.moa_added,
            "moa_adapter_macs": flops.adapter_macs,
            "moa_infer_flops": flops.infer_flops,
        }));
    }
    run.write_json("bench.json", Value::Array(results.clone()))?;
    println!("{}", json!({ "run_dir": run.dir, "results": results }));
    Ok(())
}

#[derive(Args, Debug)]
pub struct AnalyzeGates {
    /// Gate traces written by synth (`gates.csv`).
    #[arg(long)]
    traces: PathBuf,
    /// Corpus whose manifest supplies speaker groups.
    #[arg(long)]
    corpus: PathBuf,
    /// Restrict to one site, e.g. `decoder.2`.
    #[arg(long)]
    site: Option<String>,
    #[command(flatten)]
    out: OutArgs,
}

pub fn analyze_gates(runs_root: &Path, a: AnalyzeGates) -> Result<()> {
    require(&a.traces, "gate traces")?;
    let manifest = a.corpus.join(MANIFEST_FILE);
    require(&manifest, "corpus manifest")?;
    let rows = parse_gate_traces(&std::fs::read_to_string(&a.traces)?)?;
    let groups: BTreeMap<String, Group> = parse_manifest(&std::fs::read_to_string(&manifest)?)?
        .into_iter()
        .map(|e| (e.speaker_id, e.group))
        .collect();
    let mut sites: Vec<String> = rows.iter().map(|r| r.site_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if let Some(s) = &a.site {
        if !sites.contains(s) {
            return Err(Error::Input(format!("site {s} not in traces; found {sites:?}")));
        }
        sites = vec![s.clone()];
    }
    if sites.is_empty() {
        return Err(Error::Empty("gate traces hold no rows".into()));
    }
    let run = RunDir::create(
        runs_root,
        &a.out,
        "analyze-gates",
        0,
        json!({ "traces": a.traces, "corpus": a.corpus, "sites": sites }),
    )?;
    let mut summary = serde_json::Map::new();
    for site in &sites {
        let cm = gating_correlation(&rows, site, &groups)?;
        run.write_text(&format!("correlation_{site}.csv"), &cm.to_csv(&run.provenance))?;
        run.write_text(
            &format!("heatmap_{site}.dat"),
            &format!("{}{}", provenance_header(&run.provenance), cm.to_heatmap_data()),
        )?;
        let (within, between) = cm.within_between();
        summary.insert(
            site.clone(),
            json!({ "speakers": cm.speakers.len(), "within_group": within, "between_group": between }),
        );
    }
    run.write_json("summary.json", Value::Object(summary.clone()))?;
    println!("{}", json!({ "run_dir": run.dir, "sites": summary }));
    Ok(())
}

#[derive(Args, Debug)]
pub struct CountParams {
    #[arg(long)]
    config: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

pub fn count_params(a: CountParams) -> Result<()> {
    require(&a.config, "config")?;
    let file = ConfigFile::load(&a.config)?;
    let seed = file.train.as_ref().map(|t| t.seed).unwrap_or(TrainConfig::default().seed);
    let counts = TtsModel::new(file.model.clone(), seed)?.count_parameters();
    let provenance = json!({
        "tool": concat!("moa-tts ", env!("CARGO_PKG_VERSION")),
        "command": "count-params",
        "seed": seed,
        "config": file.model,
    });
    if a.json {
        println!(
            "{}",
            json!({
                "provenance": provenance,
                "total": counts.total,
                "backbone": counts.backbone,
                "moa_added": counts.moa_added,
                "per_component": counts.per_component,
            })
        );
        return Ok(());
    }
    print!("{}", provenance_header(&provenance));
    println!("{:<24} {:>12}", "component", "params");
    for (name, n) in &counts.per_component {
        println!("{name:<24} {n:>12}");
    }
    println!("{:<24} {:>12}", "backbone", counts.backbone);
    println!("{:<24} {:>12}", "moa_added", counts.moa_added);
    println!("{:<24} {:>12}", "total", counts.total);
    Ok(())
}
