use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

/// Provenance record written beside every artifact as `<artifact>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub versions: BTreeMap<String, String>,
    pub jobs: usize,
    pub wall_clock_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<Value>,
}

pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &impl Serialize, jobs: usize) -> Result<Self> {
        Ok(Self {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_owned(),
                config: serde_json::to_value(config)?,
                seeds: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                versions: BTreeMap::from([
                    ("resim".to_owned(), env!("CARGO_PKG_VERSION").to_owned()),
                    ("index_format".to_owned(), resim::index::FORMAT_VERSION.to_string()),
                ]),
                jobs,
                wall_clock_secs: 0.0,
                summary: None,
            },
        })
    }

    pub fn seed(mut self, name: &str, seed: u64) -> Self {
        self.manifest.seeds.insert(name.to_owned(), seed);
        self
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.manifest.inputs.push(path.to_owned());
        self
    }

    pub fn inputs<'a>(mut self, paths: impl IntoIterator<Item = &'a PathBuf>) -> Self {
        self.manifest.inputs.extend(paths.into_iter().cloned());
        self
    }

    pub fn summary(mut self, summary: Value) -> Self {
        self.manifest.summary = Some(summary);
        self
    }

    /// Writes the manifest beside `artifact`, listing `outputs`.
    pub fn write(mut self, artifact: &Path, outputs: &[&Path]) -> Result<()> {
        self.manifest.outputs = outputs.iter().map(|p| p.to_path_buf()).collect();
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let path = manifest_path(artifact);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}
