//! Run configuration. Layered as defaults, then a TOML file, then CLI flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{RavError, Result};
use crate::model::{EntityType, UrlPattern, DEFAULT_URL_PATTERN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub table: f64,
    pub image: f64,
    pub text: f64,
    pub formula: f64,
    pub url: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            table: 0.75,
            image: 0.70,
            text: 0.85,
            formula: 0.85,
            url: 0.85,
        }
    }
}

impl Thresholds {
    pub fn get(&self, t: EntityType) -> f64 {
        match t {
            EntityType::Table => self.table,
            EntityType::Image => self.image,
            EntityType::Text => self.text,
            EntityType::Formula => self.formula,
            EntityType::Url => self.url,
        }
    }

    /// Same value for every entity type.
    pub fn uniform(v: f64) -> Self {
        Thresholds {
            table: v,
            image: v,
            text: v,
            formula: v,
            url: v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableWeights {
    pub ssim: f64,
    pub structure: f64,
}

impl Default for TableWeights {
    fn default() -> Self {
        TableWeights {
            ssim: 0.4,
            structure: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureWeights {
    pub row_col: f64,
    pub cells: f64,
}

impl Default for StructureWeights {
    fn default() -> Self {
        StructureWeights {
            row_col: 0.2,
            cells: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageWeights {
    pub phash: f64,
    pub sharpness: f64,
    pub caption: f64,
}

impl Default for ImageWeights {
    fn default() -> Self {
        ImageWeights {
            phash: 0.6,
            sharpness: 0.3,
            caption: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Weights {
    pub table: TableWeights,
    pub table_structure: StructureWeights,
    pub image: ImageWeights,
}

/// Caption proximity: vertical gap as a fraction of page height, and the
/// minimum horizontal overlap relative to the narrower box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionRule {
    pub max_gap_fraction: f64,
    pub min_horizontal_overlap: f64,
}

impl Default for CaptionRule {
    fn default() -> Self {
        CaptionRule {
            max_gap_fraction: 0.05,
            min_horizontal_overlap: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EndpointConfig {
    /// Replays canned payloads keyed by region id.
    Scripted {
        script: PathBuf,
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        requires_api_key: bool,
    },
    /// Seeded corruption of ground-truth entities.
    Mock {
        ground_truth: PathBuf,
        #[serde(default)]
        epsilon: f64,
        #[serde(default)]
        p_row_merge: f64,
        #[serde(default)]
        p_col_merge: f64,
        #[serde(default)]
        p_row_drop: f64,
        #[serde(default)]
        crop_jitter_px: u32,
        #[serde(default)]
        requires_api_key: bool,
    },
    /// Seeded fallback that recovers ground truth with a fixed probability.
    MockFallback {
        ground_truth: PathBuf,
        recovery_quality: f64,
        #[serde(default)]
        requires_api_key: bool,
    },
    Subprocess {
        command: String,
        #[serde(default)]
        args: Vec<String>,
        #[serde(default)]
        requires_api_key: bool,
    },
    Http {
        url: String,
        #[serde(default)]
        requires_api_key: bool,
    },
}

impl EndpointConfig {
    pub fn requires_api_key(&self) -> bool {
        match self {
            EndpointConfig::Scripted { requires_api_key, .. }
            | EndpointConfig::Mock { requires_api_key, .. }
            | EndpointConfig::MockFallback { requires_api_key, .. }
            | EndpointConfig::Subprocess { requires_api_key, .. }
            | EndpointConfig::Http { requires_api_key, .. } => *requires_api_key,
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            EndpointConfig::Scripted { script, .. } => fix(script),
            EndpointConfig::Mock { ground_truth, .. } => fix(ground_truth),
            EndpointConfig::MockFallback { ground_truth, .. } => fix(ground_truth),
            EndpointConfig::Subprocess { .. } | EndpointConfig::Http { .. } => {}
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PluginsConfig {
    pub primary: Option<EndpointConfig>,
    pub fallback: Option<EndpointConfig>,
    pub ocr_reference: Option<EndpointConfig>,
    pub enricher: Option<EndpointConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RavConfig {
    pub seed: u64,
    pub thresholds: Thresholds,
    pub weights: Weights,
    pub containment_threshold: f64,
    pub caption: CaptionRule,
    pub context_neighbors: usize,
    pub cost_per_fallback_call: f64,
    /// Drop the SSIM term from table fidelity (standalone-crop evaluation).
    pub table_skip_visual: bool,
    /// Worker count for region-level parallelism; 0 means all cores.
    pub jobs: usize,
    /// Capture plugin wall times in traces. Off keeps traces byte-stable.
    pub record_timings: bool,
    pub url_pattern: String,
    pub api_key_env: String,
    pub plugin_timeout_ms: u64,
    pub unanswerable_marker: String,
    pub plugins: PluginsConfig,
}

impl Default for RavConfig {
    fn default() -> Self {
        RavConfig {
            seed: 0,
            thresholds: Thresholds::default(),
            weights: Weights::default(),
            containment_threshold: 0.85,
            caption: CaptionRule::default(),
            context_neighbors: 3,
            cost_per_fallback_call: 0.02,
            table_skip_visual: false,
            jobs: 0,
            record_timings: false,
            url_pattern: DEFAULT_URL_PATTERN.to_string(),
            api_key_env: "RAV_API_KEY".to_string(),
            plugin_timeout_ms: 30_000,
            unanswerable_marker: "unanswerable".to_string(),
            plugins: PluginsConfig::default(),
        }
    }
}

const WEIGHT_TOLERANCE: f64 = 1e-9;

impl RavConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RavConfig =
            toml::from_str(text).map_err(|e| RavError::Config(e.to_string()))?;
        for ep in [
            &mut cfg.plugins.primary,
            &mut cfg.plugins.fallback,
            &mut cfg.plugins.ocr_reference,
            &mut cfg.plugins.enricher,
        ]
        .into_iter()
        .flatten()
        {
            ep.resolve_paths(base_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RavError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        RavConfig::from_toml_str(&text, base)
    }

    pub fn threshold(&self, t: EntityType) -> f64 {
        self.thresholds.get(t)
    }

    pub fn url_matcher(&self) -> Result<UrlPattern> {
        UrlPattern::new(&self.url_pattern)
    }

    /// Checks weight sums and value ranges.
    ///
    /// Thresholds above 1 are accepted: they force the fallback on every
    /// entity, which is how always-on fallback runs are configured.
    pub fn validate(&self) -> Result<()> {
        let sums = [
            ("weights.table", self.weights.table.ssim + self.weights.table.structure),
            (
                "weights.table_structure",
                self.weights.table_structure.row_col + self.weights.table_structure.cells,
            ),
            (
                "weights.image",
                self.weights.image.phash + self.weights.image.sharpness + self.weights.image.caption,
            ),
        ];
        for (name, sum) in sums {
            if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
                return Err(RavError::Config(format!("{name} sums to {sum}, expected 1")));
            }
        }
        let all_weights = [
            self.weights.table.ssim,
            self.weights.table.structure,
            self.weights.table_structure.row_col,
            self.weights.table_structure.cells,
            self.weights.image.phash,
            self.weights.image.sharpness,
            self.weights.image.caption,
        ];
        if all_weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(RavError::Config("weights must lie in [0, 1]".into()));
        }
        for t in EntityType::ALL {
            let v = self.threshold(t);
            if !v.is_finite() || v < 0.0 {
                return Err(RavError::Config(format!("threshold for {t} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.containment_threshold) {
            return Err(RavError::Config("containment_threshold must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.caption.max_gap_fraction)
            || !(0.0..=1.0).contains(&self.caption.min_horizontal_overlap)
        {
            return Err(RavError::Config("caption parameters must lie in [0, 1]".into()));
        }
        if !self.cost_per_fallback_call.is_finite() || self.cost_per_fallback_call < 0.0 {
            return Err(RavError::Config("cost_per_fallback_call must be >= 0".into()));
        }
        self.url_matcher()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RavConfig::default().validate().unwrap();
        assert_eq!(RavConfig::default().threshold(EntityType::Url), 0.85);
    }

    #[test]
    fn bad_weights_rejected() {
        let text = "[weights.image]\nphash = 0.5\nsharpness = 0.3\ncaption = 0.1\n";
        let err = RavConfig::from_toml_str(text, Path::new(".")).unwrap_err();
        assert!(matches!(err, RavError::Config(_)));
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RavConfig::from_toml_str("treshold = 1", Path::new(".")).is_err());
    }

    #[test]
    fn file_overrides_and_relative_paths() {
        let text = r#"
seed = 9
[thresholds]
table = 1.01
[plugins.primary]
kind = "scripted"
script = "primary.json"
"#;
        let cfg = RavConfig::from_toml_str(text, Path::new("/fixtures")).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.threshold(EntityType::Table), 1.01);
        assert_eq!(cfg.threshold(EntityType::Image), 0.70);
        match cfg.plugins.primary.unwrap() {
            EndpointConfig::Scripted { script, .. } => {
                assert_eq!(script, PathBuf::from("/fixtures/primary.json"))
            }
            other => panic!("{other:?}"),
        }
    }
}
