//! Per-run provenance: every command writes the effective config next to a
//! JSON manifest so any output directory can be reproduced from its own
//! contents alone.

use std::path::Path;
use std::time::Instant;

use factordiff::{Error, Result};
use serde_json::{json, Value};

use crate::config::RunConfig;

pub struct RunManifest {
    command: String,
    seed: u64,
    started: Instant,
    outputs: Vec<String>,
    extra: serde_json::Map<String, Value>,
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            seed,
            started: Instant::now(),
            outputs: Vec::new(),
            extra: serde_json::Map::new(),
        }
    }

    /// Record an output path relative to the run directory.
    pub fn output(&mut self, rel: impl Into<String>) {
        self.outputs.push(rel.into());
    }

    /// Attach a command-specific field (model fingerprint, plan, metrics).
    pub fn field(&mut self, key: &str, value: Value) {
        self.extra.insert(key.into(), value);
    }

    /// Write `config.toml` (effective config echo) and `manifest.json`.
    pub fn finish(mut self, out_dir: &Path, cfg: &RunConfig) -> Result<()> {
        let config_echo = cfg.effective();
        write_text(&out_dir.join("config.toml"), &config_echo.to_toml())?;
        self.outputs.push("config.toml".into());
        self.outputs.push("manifest.json".into());

        let mut doc = json!({
            "command": self.command,
            "seed": self.seed,
            "versions": {
                "cli": env!("CARGO_PKG_VERSION"),
                "checkpoint_format": factordiff::networks::CHECKPOINT_VERSION,
            },
            "wall_time_seconds": round3(self.started.elapsed().as_secs_f64()),
            "config": toml_to_json(&config_echo),
            "outputs": self.outputs,
        });
        let map = doc.as_object_mut().expect("object literal");
        for (k, v) in self.extra {
            map.insert(k, v);
        }
        let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
        write_text(&out_dir.join("manifest.json"), &(text + "\n"))
    }
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn toml_to_json(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Create the run directory; refuse to reuse a nonempty one unless forced.
pub fn prepare_out_dir(path: &Path, force: bool) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let occupied = std::fs::read_dir(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?
        .next()
        .is_some();
    if occupied && !force {
        return Err(Error::Argument(format!(
            "output directory {} is not empty (pass --force to write anyway)",
            path.display()
        )));
    }
    Ok(())
}
