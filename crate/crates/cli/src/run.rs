use std::path::{Path, PathBuf};

use chrono::Utc;
use moa_tts::data::prepare_output_dir;
use moa_tts::format::write_atomic;
use moa_tts::{Error, Result};
use serde_json::{json, Value};

use crate::OutArgs;

pub const RUN_FILE: &str = "run.json";

/// Output directory of one invocation plus the provenance every artifact
/// in it carries.
pub struct RunDir {
    pub dir: PathBuf,
    pub provenance: Value,
}

impl RunDir {
    /// `config` is the exact configuration the command runs with.
    pub fn create(runs_root: &Path, out: &OutArgs, command: &str, seed: u64, config: Value) -> Result<Self> {
        let created = Utc::now();
        let dir = match &out.out {
            Some(p) => p.clone(),
            None => runs_root.join(format!("{}-seed{seed}", created.format("%Y%m%dT%H%M%S%.3fZ"))),
        };
        prepare_output_dir(&dir, out.force)?;
        let provenance = json!({
            "tool": concat!("moa-tts ", env!("CARGO_PKG_VERSION")),
            "command": command,
            "seed": seed,
            "config": config,
        });
        let run = json!({ "provenance": provenance, "created": created.to_rfc3339() });
        write_atomic(&dir.join(RUN_FILE), serde_json::to_string_pretty(&run)?.as_bytes())?;
        Ok(Self { dir, provenance })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn write_json(&self, file: &str, body: Value) -> Result<()> {
        let doc = json!({ "provenance": self.provenance, "result": body });
        write_atomic(&self.path(file), serde_json::to_string_pretty(&doc)?.as_bytes())
    }

    pub fn write_text(&self, file: &str, text: &str) -> Result<()> {
        write_atomic(&self.path(file), text.as_bytes())
    }
}

/// Fails before any work if an input path is missing.
pub fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Input(format!("{what} {} does not exist", path.display())))
    }
}
