use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const FILE_NAME: &str = "run.manifest";

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Record of one command invocation, written once the command finishes.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config_text: String,
    pub config_hash: String,
    pub seed: u64,
    pub started: f64,
    pub checkpoints: Vec<(String, PathBuf)>,
    pub metrics: BTreeMap<String, f64>,
    pub fields: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn start(command: &str, config_text: &str, config_hash: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_text: config_text.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            started: unix_now(),
            checkpoints: Vec::new(),
            metrics: BTreeMap::new(),
            fields: BTreeMap::new(),
        }
    }

    pub fn field(&mut self, key: &str, value: impl ToString) {
        self.fields.insert(key.to_string(), value.to_string());
    }

    pub fn to_text(&self, finished: f64) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "config_hash={}", self.config_hash);
        let _ = writeln!(s, "started={:.3}", self.started);
        let _ = writeln!(s, "finished={finished:.3}");
        for (k, p) in &self.checkpoints {
            let _ = writeln!(s, "checkpoint.{k}={}", p.display());
        }
        for (k, v) in &self.fields {
            let _ = writeln!(s, "{k}={v}");
        }
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "metric.{k}={v}");
        }
        for line in self.config_text.lines() {
            let _ = writeln!(s, "config:{line}");
        }
        s
    }

    /// Stamps the end time and writes `dir/run.manifest` via a temporary file.
    pub fn finish(&self, dir: &Path) -> std::io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(FILE_NAME);
        let tmp = dir.join(format!("{FILE_NAME}.partial"));
        fs::write(&tmp, self.to_text(unix_now()))?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}
