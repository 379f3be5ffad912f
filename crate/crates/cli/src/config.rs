//! Experiment configuration: versioned JSON with unknown keys rejected.

use std::path::Path;

use genq_core::filter::{EnergyForm, FilterCfg};
use genq_core::nnkit::model::Arch;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitsCfg {
    pub w: u8,
    pub a: u8,
}

impl Default for BitsCfg {
    fn default() -> Self {
        BitsCfg { w: 4, a: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolCfg {
    /// Total candidate pool size (split evenly over the 10 classes).
    pub n_gen: usize,
    /// Images kept for calibration / QAT after filtering.
    pub n_keep: usize,
    /// Fraction of each class's candidates that get corrupted.
    pub corrupt_fraction: f64,
    pub corrupt_severity: u8,
}

impl Default for PoolCfg {
    fn default() -> Self {
        PoolCfg {
            n_gen: 400,
            n_keep: 100,
            corrupt_fraction: 0.0,
            corrupt_severity: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioCfg {
    pub r1: f64,
    pub r2: f64,
    pub bn_batch: usize,
}

impl Default for RatioCfg {
    fn default() -> Self {
        RatioCfg {
            r1: 0.5,
            r2: 0.5,
            bn_batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyCfg {
    pub alpha: f64,
    pub form: String,
}

impl Default for EnergyCfg {
    fn default() -> Self {
        EnergyCfg {
            alpha: 1.0,
            form: "paper".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch: usize,
    pub images_per_class: usize,
    pub eval_per_class: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 8,
            lr: 0.05,
            momentum: 0.9,
            batch: 64,
            images_per_class: 150,
            eval_per_class: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PtqSection {
    pub recon_iters: usize,
    pub recon_batch: usize,
    pub recon_lr: f32,
    /// When set, sweep PTQ over these calibration-set sizes.
    pub calib_sizes: Option<Vec<usize>>,
}

impl Default for PtqSection {
    fn default() -> Self {
        PtqSection {
            recon_iters: 250,
            recon_batch: 32,
            recon_lr: 0.01,
            calib_sizes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QatSection {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch: usize,
}

impl Default for QatSection {
    fn default() -> Self {
        QatSection {
            epochs: 20,
            lr: 0.001,
            momentum: 0.9,
            batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    /// Explicit model file; overrides the per-seed naming scheme.
    pub model: Option<String>,
    /// Models for cross-model transfer.
    pub model_cnn: Option<String>,
    pub model_vit: Option<String>,
}

fn default_out_dir() -> String {
    "runs".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    /// External generation endpoint; `GENQ_ENDPOINT` overrides.
    pub endpoint: Option<String>,
    pub guidance_scale: f64,
    pub steps: u32,
    pub parallel: usize,
}

impl Default for GenSection {
    fn default() -> Self {
        GenSection {
            endpoint: None,
            guidance_scale: 3.5,
            steps: 20,
            parallel: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub arch: String,
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub bits: BitsCfg,
    #[serde(default)]
    pub pool: PoolCfg,
    #[serde(default)]
    pub ratios: RatioCfg,
    #[serde(default)]
    pub energy: EnergyCfg,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ptq: PtqSection,
    #[serde(default)]
    pub qat: QatSection,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default, rename = "gen")]
    pub generation: GenSection,
    #[serde(default = "default_budget")]
    pub budget_seconds: f64,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_budget() -> f64 {
    600.0
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.as_ref().display())))?;
        ExperimentConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError(msg));
        if self.version != 1 {
            return fail(format!("unsupported config version {}", self.version));
        }
        if Arch::parse(&self.arch).is_err() {
            return fail(format!(
                "unknown arch {:?} (tiny-cnn | tiny-vit)",
                self.arch
            ));
        }
        if let Some(mode) = &self.mode {
            if mode != "ptq" && mode != "qat" {
                return fail(format!("unknown mode {mode:?} (ptq | qat)"));
            }
        }
        for (name, b) in [("bits.w", self.bits.w), ("bits.a", self.bits.a)] {
            if ![2, 3, 4, 8].contains(&b) {
                return fail(format!("{name} must be one of 2, 3, 4, 8; got {b}"));
            }
        }
        for (name, r) in [("ratios.r1", self.ratios.r1), ("ratios.r2", self.ratios.r2)] {
            if !(0.0..1.0).contains(&r) {
                return fail(format!("{name} must be in [0, 1); got {r}"));
            }
        }
        if self.ratios.bn_batch < 2 {
            return fail("ratios.bn_batch must be at least 2".into());
        }
        if !(self.energy.alpha > 0.0) {
            return fail(format!(
                "energy.alpha must be positive; got {}",
                self.energy.alpha
            ));
        }
        if EnergyForm::parse(&self.energy.form).is_err() {
            return fail(format!(
                "energy.form must be paper or logsumexp; got {:?}",
                self.energy.form
            ));
        }
        if self.pool.n_gen == 0 || self.pool.n_gen % 10 != 0 {
            return fail(format!(
                "pool.n_gen must be a positive multiple of 10; got {}",
                self.pool.n_gen
            ));
        }
        if self.pool.n_keep == 0 {
            return fail("pool.n_keep must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.pool.corrupt_fraction) {
            return fail(format!(
                "pool.corrupt_fraction must be in [0, 1]; got {}",
                self.pool.corrupt_fraction
            ));
        }
        if !(1..=5).contains(&self.pool.corrupt_severity) {
            return fail(format!(
                "pool.corrupt_severity must be 1..=5; got {}",
                self.pool.corrupt_severity
            ));
        }
        let expected_kept =
            self.pool.n_gen as f64 * (1.0 - self.ratios.r1) * (1.0 - self.ratios.r2) + 1.0;
        if self.pool.n_keep as f64 > expected_kept {
            return fail(format!(
                "pool.n_keep = {} exceeds the expected filtered pool {:.0} (n_gen*(1-r1)*(1-r2)+1)",
                self.pool.n_keep, expected_kept
            ));
        }
        if let Some(sizes) = &self.ptq.calib_sizes {
            if sizes.is_empty() {
                return fail("ptq.calib_sizes must not be empty when present".into());
            }
            for &s in sizes {
                if s == 0 || s as f64 > expected_kept {
                    return fail(format!(
                        "ptq.calib_sizes entry {s} exceeds the expected filtered pool {expected_kept:.0}"
                    ));
                }
            }
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if self.train.images_per_class == 0 || self.train.eval_per_class == 0 {
            return fail("train.images_per_class and train.eval_per_class must be positive".into());
        }
        if self.train.batch < 2 {
            return fail("train.batch must be at least 2 (BatchNorm needs it)".into());
        }
        if !(self.budget_seconds > 0.0) {
            return fail(format!(
                "budget_seconds must be positive; got {}",
                self.budget_seconds
            ));
        }
        if !(self.generation.guidance_scale > 0.0) {
            return fail("gen.guidance_scale must be positive".into());
        }
        if self.generation.steps == 0 || self.generation.parallel == 0 {
            return fail("gen.steps and gen.parallel must be positive".into());
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        Arch::parse(&self.arch).expect("validated")
    }

    pub fn energy_form(&self) -> EnergyForm {
        EnergyForm::parse(&self.energy.form).expect("validated")
    }

    pub fn filter_cfg(&self) -> FilterCfg {
        FilterCfg {
            r1: self.ratios.r1,
            r2: self.ratios.r2,
            alpha: self.energy.alpha,
            form: self.energy_form(),
            bn_batch: self.ratios.bn_batch,
        }
    }

    /// Endpoint resolution: env `GENQ_ENDPOINT` wins over the config.
    pub fn endpoint(&self) -> Option<String> {
        std::env::var("GENQ_ENDPOINT")
            .ok()
            .or_else(|| self.generation.endpoint.clone())
    }

    /// Model file for `arch` under `seed` unless an explicit path is set.
    pub fn model_path(&self, arch: Arch, seed: u64) -> String {
        match &self.paths.model {
            Some(p) => p.clone(),
            None => format!(
                "{}/model-{}-seed{}.gqm",
                self.paths.out_dir,
                arch.name(),
                seed
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{"version":1,"arch":"tiny-cnn"}"#.to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::parse(&minimal()).unwrap();
        assert_eq!(cfg.bits, BitsCfg { w: 4, a: 4 });
        assert_eq!(cfg.seeds, vec![1]);
        assert_eq!(cfg.ratios.r1, 0.5);
        assert_eq!(cfg.generation.guidance_scale, 3.5);
        assert_eq!(cfg.budget_seconds, 600.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"version":1,"arch":"tiny-cnn","typo_key":3}"#;
        assert!(ExperimentConfig::parse(text).is_err());
        let nested = r#"{"version":1,"arch":"tiny-cnn","bits":{"w":4,"a":4,"x":1}}"#;
        assert!(ExperimentConfig::parse(nested).is_err());
    }

    #[test]
    fn round_trip_preserves_config() {
        let text = r#"{
            "version": 1, "arch": "tiny-vit", "mode": "qat",
            "bits": {"w": 3, "a": 3},
            "pool": {"n_gen": 800, "n_keep": 200, "corrupt_fraction": 0.5, "corrupt_severity": 4},
            "seeds": [3, 4, 5]
        }"#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        let serialized = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::parse(&serialized).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invariants_enforced() {
        let bad_bits = r#"{"version":1,"arch":"tiny-cnn","bits":{"w":5,"a":4}}"#;
        assert!(ExperimentConfig::parse(bad_bits).is_err());
        let bad_version = r#"{"version":2,"arch":"tiny-cnn"}"#;
        assert!(ExperimentConfig::parse(bad_version).is_err());
        let bad_keep = r#"{"version":1,"arch":"tiny-cnn","pool":{"n_gen":100,"n_keep":90,"corrupt_fraction":0,"corrupt_severity":5}}"#;
        assert!(ExperimentConfig::parse(bad_keep).is_err());
        let bad_arch = r#"{"version":1,"arch":"resnet50"}"#;
        assert!(ExperimentConfig::parse(bad_arch).is_err());
        let bad_ratio =
            r#"{"version":1,"arch":"tiny-cnn","ratios":{"r1":1.0,"r2":0.5,"bn_batch":64}}"#;
        assert!(ExperimentConfig::parse(bad_ratio).is_err());
    }
}
