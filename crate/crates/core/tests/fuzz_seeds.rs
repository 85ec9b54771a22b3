//! Replays the checked-in fuzz seeds, and cheap mutations of them, through
//! every untrusted-input decoder. Decoders must return errors, never panic.

use std::path::{Path, PathBuf};

use moa_tts::cache::EmbeddingCache;
use moa_tts::data::{parse_manifest, ManifestEntry, Utterance};
use moa_tts::eval::{parse_gate_traces, MelRecord};
use moa_tts::format::Container;
use moa_tts::model::ConfigFile;
use moa_tts::TtsModel;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let b = std::fs::read(&p).unwrap();
            (p, b)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// The seed itself, prefixes, and single-byte flips at a spread of offsets.
fn variants(bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut out = vec![bytes.to_vec()];
    let n = bytes.len();
    for cut in [0, 1, 4, 12, 20, n / 3, n / 2, n.saturating_sub(1), n.saturating_sub(8)] {
        out.push(bytes[..cut.min(n)].to_vec());
    }
    let stride = (n / 64).max(1);
    for i in (0..n).step_by(stride) {
        for mask in [0x01u8, 0x80, 0xff] {
            let mut b = bytes.to_vec();
            b[i] ^= mask;
            out.push(b);
        }
    }
    out
}

fn each(target: &str, f: impl Fn(&[u8])) -> usize {
    let mut decoded = 0;
    for (path, bytes) in seeds(target) {
        for v in variants(&bytes) {
            let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&v)));
            assert!(r.is_ok(), "{} panicked on a variant of {}", target, path.display());
        }
        decoded += 1;
    }
    decoded
}

#[test]
fn container_seeds() {
    each("container", |b| {
        if let Ok(c) = Container::decode(b) {
            let bytes = c.encode().unwrap();
            assert_eq!(Container::decode(&bytes).unwrap().encode().unwrap(), bytes);
        }
    });
    for (_, b) in seeds("container") {
        assert!(Container::decode(&b).is_ok());
    }
}

#[test]
fn checkpoint_seeds() {
    each("checkpoint", |b| {
        if let Ok(c) = Container::decode(b) {
            let _ = TtsModel::from_container(&c);
        }
    });
    for (_, b) in seeds("checkpoint") {
        TtsModel::from_container(&Container::decode(&b).unwrap()).unwrap();
    }
}

#[test]
fn utterance_seeds() {
    each("utterance", |b| {
        if let Ok(u) = Utterance::decode(b) {
            assert_eq!(u.frames(), u.durations.iter().sum::<usize>());
        }
    });
    for (_, b) in seeds("utterance") {
        Utterance::decode(&b).unwrap();
    }
}

#[test]
fn mel_seeds() {
    each("mel", |b| {
        if let Ok(r) = MelRecord::decode(b) {
            assert_eq!(r.mel.rows(), r.pitch.len());
        }
    });
    for (_, b) in seeds("mel") {
        MelRecord::decode(&b).unwrap();
    }
}

#[test]
fn embedding_cache_seeds() {
    each("embedding_cache", |b| {
        let _ = EmbeddingCache::decode(b);
    });
    for (_, b) in seeds("embedding_cache") {
        EmbeddingCache::decode(&b).unwrap();
    }
}

#[test]
fn manifest_seeds() {
    each("manifest_line", |b| {
        if let Ok(t) = std::str::from_utf8(b) {
            if let Ok(e) = ManifestEntry::parse_line(t) {
                assert_eq!(ManifestEntry::parse_line(&e.to_line()).unwrap(), e);
            }
            let _ = parse_manifest(t);
        }
    });
    let all = seeds("manifest_line");
    let text = |name: &str| {
        let (_, b) = all.iter().find(|(p, _)| p.ends_with(name)).unwrap();
        String::from_utf8(b.clone()).unwrap()
    };
    assert!(ManifestEntry::parse_line(&text("line")).is_ok());
    assert!(ManifestEntry::parse_line(&text("escape")).is_err());
    assert!(parse_manifest(&text("with_provenance")).unwrap().len() >= 4);
}

#[test]
fn config_seeds() {
    each("config_toml", |b| {
        if let Ok(t) = std::str::from_utf8(b) {
            if let Ok(c) = ConfigFile::parse(t) {
                assert_eq!(ConfigFile::parse(&c.to_toml().unwrap()).unwrap(), c);
            }
        }
    });
    for (p, b) in seeds("config_toml") {
        ConfigFile::parse(std::str::from_utf8(&b).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn gate_trace_seeds() {
    each("gate_trace_csv", |b| {
        if let Ok(t) = std::str::from_utf8(b) {
            if let Ok(rows) = parse_gate_traces(t) {
                assert!(rows.iter().all(|r| (r.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9));
            }
        }
    });
    let (_, b) = &seeds("gate_trace_csv")[1];
    assert!(!parse_gate_traces(std::str::from_utf8(b).unwrap()).unwrap().is_empty());
}
