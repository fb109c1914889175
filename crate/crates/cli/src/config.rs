//! Config resolution: file section, then flag overrides, then defaults.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::CliError;

pub const OUT_DIR_ENV: &str = "BATCHLESS_OUT_DIR";
const SECTIONS: [&str; 5] = ["spiral", "cifar", "init-stats", "migrate", "report"];

pub struct Settings {
    file: Table,
    pub out_dir: PathBuf,
}

impl Settings {
    /// Output directory precedence: flag, environment, file `out_dir`,
    /// then `results`.
    pub fn load(path: Option<&Path>, out_dir: Option<PathBuf>) -> Result<Self, CliError> {
        let file = match path {
            None => Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
        };
        for (k, v) in &file {
            let ok = match k.as_str() {
                "out_dir" => v.is_str(),
                s if SECTIONS.contains(&s) => v.is_table(),
                _ => false,
            };
            if !ok {
                return Err(CliError::Usage(format!("unexpected config entry {k:?}")));
            }
        }
        let out_dir = out_dir
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .or_else(|| {
                file.get("out_dir")
                    .and_then(Value::as_str)
                    .map(PathBuf::from)
            })
            .unwrap_or_else(|| PathBuf::from("results"));
        Ok(Self { file, out_dir })
    }

    pub fn section(&self, name: &str) -> Table {
        self.file
            .get(name)
            .and_then(Value::as_table)
            .cloned()
            .unwrap_or_default()
    }
}

/// Sets `key` when the flag was given.
pub fn set<T: Serialize>(table: &mut Table, key: &str, value: Option<T>) -> Result<(), CliError> {
    if let Some(v) = value {
        let v = Value::try_from(v).map_err(|e| CliError::Usage(format!("{key}: {e}")))?;
        table.insert(key.into(), v);
    }
    Ok(())
}

/// Sets `key` when the list flag was given at least once.
pub fn set_list<T: Serialize>(
    table: &mut Table,
    key: &str,
    values: Vec<T>,
) -> Result<(), CliError> {
    set(table, key, (!values.is_empty()).then_some(values))
}

/// Fills in a seed drawn from entropy when none was configured.
pub fn ensure_seed(table: &mut Table) -> u64 {
    match table.get("seed").and_then(Value::as_integer) {
        Some(s) => s as u64,
        None => {
            let seed = rand::random::<u64>() >> 1;
            println!("seed: {seed} (drawn from entropy; pass --seed {seed} to replay)");
            table.insert("seed".into(), Value::Integer(seed as i64));
            seed
        }
    }
}

pub fn resolve<T: DeserializeOwned>(section: &str, table: Table) -> Result<T, CliError> {
    table
        .try_into()
        .map_err(|e| CliError::Usage(format!("[{section}] {e}")))
}

/// Canonical text of a resolved config, echoed into artifact metadata.
pub fn echo<T: Serialize>(cfg: &T) -> String {
    toml::to_string(cfg).expect("resolved configs serialize")
}
