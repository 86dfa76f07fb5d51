use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Record of one CLI invocation: what ran, with which resolved settings,
/// and the hash of everything it wrote.
#[derive(Debug)]
pub struct RunManifest {
    command: String,
    started: Instant,
    outputs: Vec<(String, String)>,
    seeds: Vec<u64>,
}

impl RunManifest {
    pub fn start() -> Self {
        RunManifest {
            command: std::env::args().collect::<Vec<_>>().join(" "),
            started: Instant::now(),
            outputs: Vec::new(),
            seeds: Vec::new(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seeds.push(seed);
    }

    /// Writes `bytes` to `path` and records its hash.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push((path.display().to_string(), sha256_hex(bytes)));
        Ok(())
    }

    /// Prints `text` to stdout and records its hash under `stdout`.
    pub fn print(&mut self, text: &str) {
        print!("{text}");
        self.outputs.push(("stdout".into(), sha256_hex(text.as_bytes())));
    }

    pub fn render(&self, config: &Table) -> String {
        let mut top = Table::new();
        top.insert("command".into(), Value::String(self.command.clone()));
        top.insert("version".into(), Value::String(fairprice::VERSION.into()));
        let seeds = self.seeds.iter().map(|&s| Value::String(s.to_string())).collect();
        top.insert("seeds".into(), Value::Array(seeds));
        top.insert("wall_clock_seconds".into(), Value::Float(self.started.elapsed().as_secs_f64()));
        let finished = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        top.insert("finished_unix".into(), Value::String(finished.to_string()));
        top.insert("config".into(), Value::Table(config.clone()));
        let outputs = self
            .outputs
            .iter()
            .map(|(p, h)| (p.clone(), Value::String(format!("sha256:{h}"))))
            .collect();
        top.insert("outputs".into(), Value::Table(outputs));
        toml::to_string(&top).expect("manifest tables always serialize")
    }

    pub fn finish(self, path: &Path, config: &Table) -> Result<()> {
        let text = self.render(config);
        std::fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// Default manifest location next to the primary output.
pub fn manifest_path(explicit: Option<PathBuf>, primary: Option<&Path>, command: &str) -> PathBuf {
    explicit.unwrap_or_else(|| match primary {
        Some(p) => {
            let mut s = p.as_os_str().to_owned();
            s.push(".manifest.toml");
            PathBuf::from(s)
        }
        None => PathBuf::from(format!("fairprice-{command}.manifest.toml")),
    })
}
