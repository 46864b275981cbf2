//! Pipeline configuration: one JSON document with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{GridSpec, DEFAULT_EPS_LOG};
use crate::ensemble::{CvSpace, DEFAULT_CV_EPS};
use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::gnn::Hyperparams;
use crate::lpdm::{ReleaseConfig, SimConfig};
use crate::molefrac::FluxConfig;
use crate::postprocess::DEFAULT_QUANTILES;
use crate::synthmet::MetConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Node spacing in patch cells.
    pub spacing: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig { spacing: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub seeds: Vec<u64>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { seeds: vec![1, 2, 3, 4] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub eps_log: f64,
    /// Linear threshold; `null` selects the 5th percentile of the nonzero
    /// training truth.
    pub tau: Option<f64>,
    pub n_q: usize,
    pub cv_eps: f64,
    /// Space of the footprint CV maps; mole-fraction CVs are always linear.
    pub cv_space: CvSpace,
    pub quantile_map: bool,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            eps_log: DEFAULT_EPS_LOG,
            tau: None,
            n_q: DEFAULT_QUANTILES,
            cv_eps: DEFAULT_CV_EPS,
            cv_space: CvSpace::Linear,
            quantile_map: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Parent cells per coarse cell (each direction) for mole-fraction maps.
    pub coarse_factor: usize,
    pub bench_runs: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            coarse_factor: 4,
            bench_runs: 10,
        }
    }
}

/// Directory names under the run output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub met: String,
    pub data: String,
    pub models: String,
    pub ensemble: String,
    pub molefrac: String,
    pub analysis: String,
    pub report: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            met: "met".into(),
            data: "data".into(),
            models: "models".into(),
            ensemble: "ensemble".into(),
            molefrac: "molefrac".into(),
            analysis: "analysis".into(),
            report: "report".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub met: MetConfig,
    pub sim: SimConfig,
    pub releases: ReleaseConfig,
    pub features: FeatureSpec,
    pub mesh: MeshConfig,
    pub model: Hyperparams,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub postprocess: PostprocessConfig,
    pub flux: FluxConfig,
    pub analysis: AnalysisConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let features = FeatureSpec::default();
        PipelineConfig {
            grid: GridSpec::default(),
            met: MetConfig::default(),
            sim: SimConfig::default(),
            releases: ReleaseConfig::default(),
            model: Hyperparams {
                input_channels: features.channels(),
                ..Hyperparams::default()
            },
            features,
            mesh: MeshConfig::default(),
            train: TrainConfig::default(),
            ensemble: EnsembleConfig::default(),
            postprocess: PostprocessConfig::default(),
            flux: FluxConfig::default(),
            analysis: AnalysisConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Validation failure tied to a key of the config document.
#[derive(Debug)]
struct KeyError {
    section: &'static str,
    key: Option<&'static str>,
    message: String,
}

fn key_err(section: &'static str, key: Option<&'static str>, e: impl ToString) -> KeyError {
    KeyError {
        section,
        key,
        message: e.to_string(),
    }
}

/// 1-based line of `"key":` inside `"section":`, or of the section itself.
fn locate(text: &str, section: &str, key: Option<&str>) -> Option<usize> {
    let find = |from: usize, name: &str| -> Option<usize> {
        let pat = format!("\"{name}\"");
        text[from..].find(&pat).map(|p| p + from)
    };
    let s = find(0, section)?;
    let pos = match key {
        Some(k) => find(s, k).unwrap_or(s),
        None => s,
    };
    Some(text[..pos].matches('\n').count() + 1)
}

impl PipelineConfig {
    fn check(&self) -> std::result::Result<(), KeyError> {
        self.grid.validate().map_err(|e| key_err("grid", None, e))?;
        self.met.validate().map_err(|e| key_err("met", None, e))?;
        self.sim.validate().map_err(|e| key_err("sim", None, e))?;
        self.features.validate().map_err(|e| key_err("features", None, e))?;
        self.model.validate().map_err(|e| key_err("model", None, e))?;
        self.train.validate().map_err(|e| key_err("train", None, e))?;
        self.flux.validate().map_err(|e| key_err("flux", None, e))?;
        if self.model.input_channels != self.features.channels() {
            return Err(key_err(
                "model",
                Some("input_channels"),
                format!(
                    "input_channels is {} but the feature spec yields {} channels",
                    self.model.input_channels,
                    self.features.channels()
                ),
            ));
        }
        if self.mesh.spacing == 0 || self.mesh.spacing > self.features.side {
            return Err(key_err("mesh", Some("spacing"), "mesh spacing must lie in [1, features.side]"));
        }
        if self.ensemble.seeds.len() < 2 {
            return Err(key_err("ensemble", Some("seeds"), "an ensemble needs at least 2 seeds"));
        }
        let mut seeds = self.ensemble.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.ensemble.seeds.len() {
            return Err(key_err("ensemble", Some("seeds"), "ensemble seeds must be distinct"));
        }
        let p = &self.postprocess;
        if !(p.eps_log > 0.0) {
            return Err(key_err("postprocess", Some("eps_log"), "eps_log must be > 0"));
        }
        if let Some(t) = p.tau {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(key_err("postprocess", Some("tau"), "tau must be finite and >= 0"));
            }
        }
        if p.n_q < 2 {
            return Err(key_err("postprocess", Some("n_q"), "n_q must be >= 2"));
        }
        if !(p.cv_eps > 0.0) {
            return Err(key_err("postprocess", Some("cv_eps"), "cv_eps must be > 0"));
        }
        if self.releases.n_train == 0 || self.releases.n_val == 0 || self.releases.n_test == 0 {
            return Err(key_err("releases", None, "every split needs at least one release"));
        }
        if !self.releases.n_train.is_multiple_of(self.releases.per_overpass) || !self.releases.n_val.is_multiple_of(self.releases.per_overpass) {
            return Err(key_err(
                "releases",
                Some("per_overpass"),
                "n_train and n_val must be multiples of per_overpass so no overpass straddles a split",
            ));
        }
        if self.analysis.coarse_factor == 0 {
            return Err(key_err("analysis", Some("coarse_factor"), "coarse_factor must be >= 1"));
        }
        if self.analysis.bench_runs < 10 {
            return Err(key_err("analysis", Some("bench_runs"), "bench_runs must be >= 10"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| {
            let path = match e.key {
                Some(k) => format!("{}.{k}", e.section),
                None => e.section.to_string(),
            };
            Error::invalid(format!("{path}: {}", e.message))
        })
    }

    /// Parses and validates a config document; errors name the line of the
    /// offending key.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| {
            Error::invalid(format!("{}:{}:{}: {e}", origin.display(), e.line(), e.column()))
        })?;
        cfg.check().map_err(|e| {
            let path = match e.key {
                Some(k) => format!("{}.{k}", e.section),
                None => e.section.to_string(),
            };
            let line = locate(text, e.section, e.key).map_or_else(|| "default".to_string(), |l| l.to_string());
            Error::invalid(format!("{}:{line}: {path}: {}", origin.display(), e.message))
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First 8 bytes of [`Self::hash_hex`], as stamped in binary headers.
    pub fn hash(&self) -> u64 {
        u64::from_str_radix(&self.hash_hex()[..16], 16).expect("hex digest")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let back = PipelineConfig::from_json(&cfg.to_json(), Path::new("d.json")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.model.input_channels, 47);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(PipelineConfig::from_json("{}", Path::new("x")).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn cv_space_flag_parses() {
        let cfg = PipelineConfig::from_json(r#"{"postprocess": {"cv_space": "log"}}"#, Path::new("x")).unwrap();
        assert_eq!(cfg.postprocess.cv_space, CvSpace::Log);
        assert!(PipelineConfig::from_json(r#"{"postprocess": {"cv_space": "ln"}}"#, Path::new("x")).is_err());
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let text = "{\n  \"train\": {\n    \"epochs\": 3,\n    \"epoch\": 4\n  }\n}";
        let err = PipelineConfig::from_json(text, Path::new("c.json")).unwrap_err().to_string();
        assert!(err.contains("c.json:4:"), "{err}");
        assert!(err.contains("epoch"), "{err}");
    }

    #[test]
    fn semantic_error_names_line_and_key() {
        let text = "{\n  \"grid\": {},\n  \"train\": {\n    \"epochs\": 3,\n    \"learning_rate\": -1.0\n  }\n}";
        let err = PipelineConfig::from_json(text, Path::new("c.json")).unwrap_err().to_string();
        assert!(err.contains("c.json:3: train"), "{err}");
        let text = "{\n  \"ensemble\": {\n\n    \"seeds\": [1]\n  }\n}";
        let err = PipelineConfig::from_json(text, Path::new("c.json")).unwrap_err().to_string();
        assert!(err.contains("c.json:4: ensemble.seeds"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.train.epochs = 2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash_hex().len(), 64);
    }
}
