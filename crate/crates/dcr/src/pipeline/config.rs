use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ada::{ActionSpace, AdaConfig, RewardKind};
use crate::afd::{AfdConfig, FusionKind};
use crate::datagen::{ConflictMix, DatasetManifest};
use crate::encoders::{PretrainConfig, Provenance};
use crate::error::{Error, Result};

/// Synthetic data settings used when no dataset file is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// 3 (polarity) or 7 (emotion categories).
    pub classes: usize,
    pub samples: usize,
    pub seed: u64,
    pub mix: ConflictMix,
    pub snr: f64,
    pub severe_gain: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 3,
            samples: 3000,
            seed: 7,
            mix: ConflictMix::new(0.5, 0.3, 0.2),
            snr: 1.0,
            severe_gain: 2.5,
        }
    }
}

impl DataConfig {
    pub fn manifest(&self) -> Result<DatasetManifest> {
        let mut m = match self.classes {
            3 => DatasetManifest::standard(self.seed),
            7 => DatasetManifest::seven_class(self.seed),
            c => {
                return Err(Error::Config(format!(
                    "data.classes must be 3 or 7, got {c}"
                )))
            }
        };
        m.mix = self.mix;
        m.severe_gain = self.severe_gain;
        for spec in m.modalities.iter_mut() {
            spec.snr = self.snr;
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralConfig {
    pub provenance: Provenance,
    pub pretrain: PretrainConfig,
}

impl Default for GeneralConfig {
    fn default() -> Self {
        GeneralConfig {
            provenance: Provenance::Reconstruction,
            pretrain: PretrainConfig::default(),
        }
    }
}

/// Everything a two-stage run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Dataset file; synthesized from `data` when absent.
    pub dataset: Option<PathBuf>,
    pub data: DataConfig,
    pub afd: AfdConfig,
    pub ada: AdaConfig,
    pub general: GeneralConfig,
    pub seeds: Vec<u64>,
    /// Share of the training split held out from the experts and used to
    /// fit the agent. 0 fits both stages on the whole training split.
    pub stage2_fraction: f64,
    /// Also train the fusion-only baseline for comparison.
    pub fusion_baseline: bool,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            data: DataConfig::default(),
            afd: AfdConfig::default(),
            ada: AdaConfig::default(),
            general: GeneralConfig::default(),
            seeds: vec![41, 42, 43],
            stage2_fraction: 0.5,
            fusion_baseline: true,
            out: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}` expects true or false, got `{value}`"
        ))),
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Environment(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "seeds" => self.seeds = list(key, value)?,
            "stage2_fraction" => self.stage2_fraction = num(key, value)?,
            "fusion_baseline" => self.fusion_baseline = flag(key, value)?,

            "data.classes" => self.data.classes = num(key, value)?,
            "data.samples" => self.data.samples = num(key, value)?,
            "data.seed" => self.data.seed = num(key, value)?,
            "data.mix" => {
                let v: Vec<f64> = list(key, value)?;
                let [c, b, s] = v[..] else {
                    return Err(Error::Config(
                        "`data.mix` expects clean, benign, severe".into(),
                    ));
                };
                self.data.mix = ConflictMix::new(c, b, s);
            }
            "data.snr" => self.data.snr = num(key, value)?,
            "data.severe_gain" => self.data.severe_gain = num(key, value)?,

            "afd.gamma" => self.afd.gamma = num(key, value)?,
            "afd.lambda" => self.afd.lambda = num(key, value)?,
            "afd.epochs" => self.afd.epochs = num(key, value)?,
            "afd.lr" => self.afd.lr = num(key, value)?,
            "afd.batch_size" => self.afd.batch_size = num(key, value)?,
            "afd.patience" => self.afd.patience = num(key, value)?,
            "afd.d_model" => self.afd.d_model = num(key, value)?,
            "afd.aligned_len" => self.afd.aligned_len = num(key, value)?,
            "afd.fusion" => {
                self.afd.fusion = match value {
                    "cross_attention" => FusionKind::CrossAttention,
                    "concat" => FusionKind::Concat,
                    _ => return Err(Error::Config(format!("unknown fusion `{value}`"))),
                }
            }
            "afd.freeze_teachers" => self.afd.freeze_teachers = flag(key, value)?,

            "ada.alpha" => self.ada.alpha = num(key, value)?,
            "ada.beta" => self.ada.beta = num(key, value)?,
            "ada.p1" => self.ada.augmentation.p1 = num(key, value)?,
            "ada.p2" => self.ada.augmentation.p2 = num(key, value)?,
            "ada.sigma" => self.ada.augmentation.sigma = num(key, value)?,
            "ada.epochs" => self.ada.epochs = num(key, value)?,
            "ada.lr" => self.ada.lr = num(key, value)?,
            "ada.batch_size" => self.ada.batch_size = num(key, value)?,
            "ada.patience" => {
                self.ada.patience = match value {
                    "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "ada.dk" => self.ada.dk = num(key, value)?,
            "ada.hidden" => self.ada.hidden = num(key, value)?,
            "ada.action_space" => {
                self.ada.action_space = match value {
                    "atomic" => ActionSpace::Atomic,
                    "expanded" => ActionSpace::Expanded,
                    _ => return Err(Error::Config(format!("unknown action space `{value}`"))),
                }
            }
            "ada.use_general" => self.ada.use_general = flag(key, value)?,
            "ada.use_affective" => self.ada.use_affective = flag(key, value)?,
            "ada.value_head" => self.ada.value_head = flag(key, value)?,
            "ada.reward" => {
                self.ada.reward = match value {
                    "calibrated" => RewardKind::Calibrated,
                    "binary" => RewardKind::Binary,
                    _ => return Err(Error::Config(format!("unknown reward `{value}`"))),
                }
            }

            "general.provenance" => {
                self.general.provenance = match value {
                    "reconstruction" => Provenance::Reconstruction,
                    "seeded_random" => Provenance::SeededRandom,
                    _ => return Err(Error::Config(format!("unknown provenance `{value}`"))),
                }
            }
            "general.epochs" => self.general.pretrain.epochs = num(key, value)?,
            "general.lr" => self.general.pretrain.lr = num(key, value)?,
            "general.batch_size" => self.general.pretrain.batch_size = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let coefficients = [
            self.afd.gamma,
            self.afd.lambda,
            self.afd.lr,
            self.ada.alpha,
            self.ada.beta,
            self.ada.lr,
            self.data.snr,
            self.data.severe_gain,
        ];
        if coefficients.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Config(
                "coefficients must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.stage2_fraction) {
            return Err(Error::Config(format!(
                "stage2_fraction must lie in [0, 1), got {}",
                self.stage2_fraction
            )));
        }
        if self.afd.batch_size == 0 || self.afd.d_model == 0 || self.afd.aligned_len == 0 {
            return Err(Error::Config("afd sizes must be positive".into()));
        }
        self.ada.validate()
    }

    /// The stage configurations for one seed.
    pub fn for_seed(&self, seed: u64) -> (AfdConfig, AdaConfig) {
        (
            AfdConfig { seed, ..self.afd },
            AdaConfig { seed, ..self.ada },
        )
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
