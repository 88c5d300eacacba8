//! Experiment configuration file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vlpl_core::probe::AdamConfig;
use vlpl_core::sweep::{DEFAULT_TAUS, DEFAULT_THETAS};
use vlpl_core::{LossConfig, PseudoLabelConfig, SweepSpec, TrainConfig};

/// Bad flags, unreadable config or out-of-range values. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Input and output locations. Unset inputs default to the file names
/// `synth` writes inside `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_ground_truth: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            images: None,
            labels: None,
            ground_truth: None,
            test_images: None,
            test_ground_truth: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

pub const IMAGES_FILE: &str = "images.vlemb";
pub const LABELS_FILE: &str = "labels.vlemb";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const TEST_IMAGES_FILE: &str = "test_images.vlemb";
pub const TEST_GROUND_TRUTH_FILE: &str = "test_ground_truth.jsonl";

impl Paths {
    fn or_out(&self, p: &Option<PathBuf>, name: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out_dir.join(name))
    }

    pub fn images(&self) -> PathBuf {
        self.or_out(&self.images, IMAGES_FILE)
    }

    pub fn labels(&self) -> PathBuf {
        self.or_out(&self.labels, LABELS_FILE)
    }

    pub fn ground_truth(&self) -> PathBuf {
        self.or_out(&self.ground_truth, GROUND_TRUTH_FILE)
    }

    /// Test split, if configured or present in `out_dir`.
    pub fn test(&self) -> Option<(PathBuf, PathBuf)> {
        match (&self.test_images, &self.test_ground_truth) {
            (Some(i), Some(g)) => Some((i.clone(), g.clone())),
            (None, None) => {
                let (i, g) = (self.out_dir.join(TEST_IMAGES_FILE), self.out_dir.join(TEST_GROUND_TRUTH_FILE));
                (i.exists() && g.exists()).then_some((i, g))
            }
            _ => None,
        }
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.images,
            &mut self.labels,
            &mut self.ground_truth,
            &mut self.test_images,
            &mut self.test_ground_truth,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.out_dir);
    }
}

/// Validation hold-out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Fraction of training rows kept fully labeled for model selection.
    pub fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { fraction: 0.2, seed: 0 }
    }
}

/// Optimizer settings; the loss lives in its own section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub shuffle: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: t.seed,
            shuffle: t.shuffle,
            hidden: t.hidden,
            adam: t.adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub taus: Vec<f64>,
    pub thetas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub smoothing: Vec<bool>,
    pub repeats: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            taus: DEFAULT_TAUS.to_vec(),
            thetas: DEFAULT_THETAS.to_vec(),
            deltas: vec![0.0],
            smoothing: vec![true],
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: Paths,
    pub dataset: DatasetSection,
    pub pseudo: PseudoLabelConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let d = &self.dataset;
        if !(d.fraction > 0.0 && d.fraction < 1.0) {
            return Err(invalid(format!("dataset.fraction {} not in (0,1)", d.fraction)));
        }
        self.pseudo.validate().map_err(|e| invalid(format!("pseudo: {e}")))?;
        self.train_config().validate().map_err(|e| invalid(format!("train: {e}")))?;
        if let Some(spec) = self.sweep_spec() {
            spec.validate().map_err(|e| invalid(format!("sweep: {e}")))?;
            for &tau in &spec.taus {
                if !(tau > 0.0 && tau.is_finite()) {
                    return Err(invalid(format!("sweep: tau {tau} must be positive")));
                }
            }
            if let Some(t) = spec.thetas.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
                return Err(invalid(format!("sweep: theta {t} not in (0,1)")));
            }
            if let Some(d) = spec.deltas.iter().find(|d| !(**d >= 0.0 && **d < 100.0)) {
                return Err(invalid(format!("sweep: delta {d} not in [0,100)")));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: t.seed,
            loss: self.loss,
            shuffle: t.shuffle,
            hidden: t.hidden,
            adam: t.adam,
        }
    }

    pub fn sweep_spec(&self) -> Option<SweepSpec> {
        self.sweep.as_ref().map(|s| SweepSpec {
            taus: s.taus.clone(),
            thetas: s.thetas.clone(),
            deltas: s.deltas.clone(),
            smoothing: s.smoothing.clone(),
            repeats: s.repeats,
            base: self.train_config(),
        })
    }

    /// Replaces every seed in the config.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vlpl_core::LossVariant;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.train_config(), TrainConfig::default());
    }

    #[test]
    fn zero_epochs_rejected_at_parse() {
        let err = ExperimentConfig::from_toml("[train]\nepochs = 0\n").unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
    }

    #[test]
    fn empty_grid_list_rejected() {
        let err = ExperimentConfig::from_toml("[sweep]\ntaus = []\n").unwrap_err();
        assert!(err.to_string().contains("taus"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(ExperimentConfig::from_toml("[loss]\nalpah = 1.0\n").is_err());
    }

    #[test]
    fn dump_round_trips() {
        let text = r#"
[paths]
images = "/data/img.vlemb"
out_dir = "/tmp/run"
[pseudo]
tau = 0.01
theta = 0.2
delta_pct = 10.0
use_negatives = true
[loss]
variant = "vlpl_full"
rho = 0.8
[train]
hidden = 32
[sweep]
taus = [0.01, 0.05]
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.loss.variant, LossVariant::VlplFull);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml(&ExperimentConfig::default().to_toml()).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        fs::write(&path, "[paths]\nlabels = \"emb/labels.vlemb\"\nout_dir = \"run\"\n").unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.labels(), dir.path().join("emb/labels.vlemb"));
        assert_eq!(cfg.paths.images(), dir.path().join("run").join(IMAGES_FILE));
    }
}
