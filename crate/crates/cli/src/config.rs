//! Optional JSON config file for run settings. Command-line flags override
//! it, and it overrides built-in defaults.

use std::path::{Path, PathBuf};

use attrib_core::{Method, Scheme, Target};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub baseline: Option<String>,
    pub feature_baseline: Option<String>,
    pub split: Option<usize>,
    pub method: Option<Method>,
    pub scheme: Option<Scheme>,
    pub steps: Option<usize>,
    pub target: Option<Target>,
    pub report: Option<PathBuf>,
    pub map: Option<PathBuf>,
    pub heatmap: Option<PathBuf>,
    pub refine: Option<bool>,
    pub workers: Option<usize>,
}

impl ConfigFile {
    /// Loads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg: ConfigFile =
            serde_json::from_str(&text).map_err(|e| format!("{}: parse error: {e}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.model, &mut cfg.input, &mut cfg.report, &mut cfg.map, &mut cfg.heatmap]
            .into_iter()
            .flatten()
        {
            *p = dir.join(&*p);
        }
        for b in [&mut cfg.baseline, &mut cfg.feature_baseline].into_iter().flatten() {
            if !matches!(b.as_str(), "zeros" | "feature-zeros") {
                *b = dir.join(&*b).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self, String> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
