//! Run configuration: every knob of the cascade, serialized with each run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bow::{LlcConfig, PyramidConfig, SamplingConfig};
use crate::eval::MatchOptions;
use crate::rescore::DEFAULT_SCORE_THRESHOLD;
use crate::support::{Orientation, SupportConfig};
use crate::svm::SmoParams;

use super::simulate::SceneParams;
use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Simple,
    Rescore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Which side of the ranking claims contested pixels.
    pub orientation: Orientation,
    /// Union the image background into every supporting region.
    pub include_background: bool,
    /// Margin of the local-background ring, fraction of box size.
    pub margin_frac: f64,
    pub codebook_size: usize,
    pub neighbors: usize,
    pub lambda: f64,
    pub pyramid: PyramidConfig,
    pub patch_sizes: Vec<u32>,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    /// Cap on descriptors fed to codebook training (seeded subsample).
    pub kmeans_sample_cap: usize,
    pub svm_c: f64,
    pub svm_tol: f64,
    pub svm_max_passes: usize,
    /// RBF bandwidth for the rescorer; `None` means 1 / feature dimension.
    pub rbf_gamma: Option<f64>,
    /// Candidate-score cutoff applied before support-set construction.
    pub score_threshold: f64,
    pub fusion: FusionMode,
    pub fusion_weight: f64,
    pub iou_threshold: f64,
    /// `true` demands overlap strictly above the threshold.
    pub strict_iou: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            orientation: Orientation::Higher,
            include_background: true,
            margin_frac: 0.5,
            codebook_size: 256,
            neighbors: 5,
            lambda: 1e-4,
            pyramid: PyramidConfig::default(),
            patch_sizes: vec![12, 16, 20, 24],
            kmeans_max_iters: 25,
            kmeans_tol: 1e-4,
            kmeans_sample_cap: 20_000,
            svm_c: 1.0,
            svm_tol: 1e-3,
            svm_max_passes: 10,
            rbf_gamma: None,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            fusion: FusionMode::Simple,
            fusion_weight: 1.0,
            iou_threshold: 0.5,
            strict_iou: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: &str| Err(PipelineError::InvalidConfig { message: msg.to_string() });
        if !self.margin_frac.is_finite() || self.margin_frac < 0.0 {
            return bad("margin_frac must be finite and >= 0");
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be at least 2");
        }
        if self.neighbors == 0 || self.neighbors > self.codebook_size {
            return bad("neighbors must be in 1..=codebook_size");
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad("lambda must be finite and >= 0");
        }
        if !self.pyramid.is_valid() {
            return bad("pyramid must list non-empty levels");
        }
        if self.patch_sizes.is_empty() || self.patch_sizes.iter().any(|&p| p < 3) {
            return bad("patch_sizes must be non-empty with entries >= 3");
        }
        if self.kmeans_max_iters == 0 || self.kmeans_sample_cap == 0 {
            return bad("kmeans_max_iters and kmeans_sample_cap must be positive");
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.svm_c) || !positive(self.svm_tol) || self.svm_max_passes == 0 {
            return bad("svm_c, svm_tol and svm_max_passes must be positive");
        }
        if let Some(g) = self.rbf_gamma {
            if !positive(g) {
                return bad("rbf_gamma must be finite and positive");
            }
        }
        if !self.score_threshold.is_finite() {
            // JSON carries the config inside model files; keep it finite and
            // use a very low threshold to disable filtering.
            return bad("score_threshold must be finite (use a very low value to keep everything)");
        }
        if !self.fusion_weight.is_finite() {
            return bad("fusion_weight must be finite");
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return bad("iou_threshold must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn support_config(&self) -> SupportConfig {
        SupportConfig {
            orientation: self.orientation,
            include_background: self.include_background,
            margin_frac: self.margin_frac,
        }
    }

    pub fn sampling_config(&self) -> SamplingConfig {
        SamplingConfig { patch_sizes: self.patch_sizes.clone() }
    }

    pub fn llc_config(&self) -> LlcConfig<f64> {
        LlcConfig { neighbors: self.neighbors, lambda: self.lambda }
    }

    pub fn smo_params(&self) -> SmoParams<f64> {
        SmoParams {
            c: self.svm_c,
            tol: self.svm_tol,
            max_passes: self.svm_max_passes,
            seed: self.seed,
            ..SmoParams::default()
        }
    }

    pub fn match_options(&self) -> MatchOptions {
        MatchOptions { iou_threshold: self.iou_threshold, strict: self.strict_iou }
    }
}

/// On-disk config file: a `[run]` table and a `[simulate]` table, both
/// optional and defaulted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub run: RunConfig,
    pub simulate: SceneParams,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: ConfigFile =
            toml::from_str(&text).map_err(|e| PipelineError::InvalidConfig {
                message: format!("{}: {e}", path.display()),
            })?;
        cfg.run.validate()?;
        cfg.simulate.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = toml::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        SceneParams::default().validate().unwrap();
        assert_eq!(RunConfig::default().score_threshold, -0.95);
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        let mut cfg = ConfigFile::default();
        cfg.run.fusion = FusionMode::Rescore;
        cfg.run.margin_frac = 0.25;
        cfg.run.seed = 42;
        cfg.save(&path).unwrap();
        let loaded = ConfigFile::load(&path).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn partial_file_fills_defaults_and_rejects_junk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.toml");
        std::fs::write(&path, "[run]\norientation = \"lower\"\nfusion = \"rescore\"\n").unwrap();
        let cfg = ConfigFile::load(&path).unwrap();
        assert_eq!(cfg.run.orientation, Orientation::Lower);
        assert_eq!(cfg.run.fusion, FusionMode::Rescore);
        assert_eq!(cfg.run.codebook_size, 256);

        std::fs::write(&path, "[run]\nnot_a_knob = 3\n").unwrap();
        assert!(ConfigFile::load(&path).is_err());

        std::fs::write(&path, "[run]\nmargin_frac = -0.5\n").unwrap();
        assert!(matches!(
            ConfigFile::load(&path),
            Err(PipelineError::InvalidConfig { .. })
        ));
    }
}
