//! Artifact files. Every file starts with the command's metadata.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use batchless::checkpoint::save_checkpoint;
use batchless::experiments::write_metadata;
use batchless::network::Model;

use crate::svg::Chart;
use crate::CliError;

pub struct Artifacts {
    pub dir: PathBuf,
    pub metadata: Vec<(String, String)>,
}

impl Artifacts {
    pub fn new(dir: &Path, metadata: Vec<(String, String)>) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metadata,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Text file with `#` metadata lines followed by `body`.
    pub fn write_text(&self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let mut f = BufWriter::new(File::create(&path)?);
        write_metadata(&mut f, &self.metadata)?;
        f.write_all(body.as_bytes())?;
        f.flush()?;
        Ok(path)
    }

    pub fn write_svg(&self, name: &str, chart: &Chart) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        std::fs::write(&path, chart.render(&self.metadata))?;
        Ok(path)
    }

    pub fn write_model(
        &self,
        name: &str,
        model: &Model,
        extra: &[(&str, String)],
    ) -> Result<PathBuf, CliError> {
        let dir = self.path("models");
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(name);
        let mut meta: BTreeMap<String, String> = self.metadata.iter().cloned().collect();
        for (k, v) in extra {
            meta.insert(k.to_string(), v.clone());
        }
        save_checkpoint(&path, model, &meta)?;
        Ok(path)
    }
}

/// Metadata common to every command.
pub fn base_metadata(command: &str, seed: Option<u64>, config: String) -> Vec<(String, String)> {
    let mut md = vec![
        ("command".to_string(), command.to_string()),
        ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
    ];
    if let Some(s) = seed {
        md.push(("seed".into(), s.to_string()));
    }
    md.push(("config".into(), config));
    md
}
