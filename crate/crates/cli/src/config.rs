//! Config-file overlay.
//!
//! Every subcommand's options struct is both a clap `Args` and a serde type
//! with all-optional fields. Clap fills flags and `TOKENROUTE_*` variables;
//! whatever is still unset is taken from the matching TOML table. Defaults
//! are applied last by the caller.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CliError;

/// Parsed config file: one table per subcommand.
#[derive(Debug, Default)]
pub struct ConfigFile {
    root: toml::Table,
}

pub const SECTIONS: [&str; 4] = ["serve", "generate", "bench_sweep", "train_router"];

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let root: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        if let Some(k) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(CliError::Config(format!("unknown section [{k}], expected one of {}", SECTIONS.join(", "))));
        }
        Ok(ConfigFile { root })
    }

    /// Fills the unset fields of `flags` from table `section`.
    pub fn overlay<T: Serialize + DeserializeOwned>(&self, section: &str, flags: T) -> Result<T, CliError> {
        let Some(table) = self.root.get(section) else { return Ok(flags) };
        let from_file: T = table
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("[{section}] {}", e.message())))?;
        let mut merged = serde_json::to_value(&flags).map_err(|e| CliError::Internal(e.to_string()))?;
        let file_value = serde_json::to_value(&from_file).map_err(|e| CliError::Internal(e.to_string()))?;
        if let (Some(m), Some(f)) = (merged.as_object_mut(), file_value.as_object()) {
            for (k, v) in f {
                if m.get(k).is_none_or(|x| x.is_null()) {
                    m.insert(k.clone(), v.clone());
                }
            }
        }
        serde_json::from_value(merged).map_err(|e| CliError::Internal(e.to_string()))
    }
}
