//! Run manifests: a flat TOML file that fully determines one training run.
//!
//! ```toml
//! format_version = 1
//! dataset = "fashion"
//! objective = "mu"
//! clip_coeff = 3.0
//! seed = 1
//! epochs = 20
//! ```
//!
//! Omitted keys take the defaults of [`RunManifest::default`]. Optional keys
//! (`activation`, `z_dim`, `clip_coeff`, `prior_sigma`, `traversal_range`)
//! are filled from the preset and objective by [`RunManifest::effective`],
//! and that effective form is what gets written next to run outputs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use muvae_autodiff::{Activation, AdamConfig, ClipGradient, Precision};
use serde::{Deserialize, Serialize};

use crate::data::{BatchPlan, DatasetId};
use crate::error::{Error, Result};
use crate::model::{Architecture, ClipConfig, ModelPreset};
use crate::objectives::{ObjectiveConfig, ObjectiveKind, VarianceReg};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

macro_rules! display_via_as_str {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    )*};
}

display_via_as_str!(DatasetId, Architecture, ObjectiveKind, VarianceReg);

/// Serializes enums through their textual names.
mod text {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<T: fmt::Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> std::result::Result<T, D::Error>
    where
        T: FromStr,
        T::Err: fmt::Display,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }

    pub mod opt {
        use super::*;

        pub fn serialize<T: fmt::Display, S: Serializer>(
            v: &Option<T>,
            s: S,
        ) -> std::result::Result<S::Ok, S::Error> {
            match v {
                Some(v) => s.collect_str(v),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, T, D>(d: D) -> std::result::Result<Option<T>, D::Error>
        where
            T: FromStr,
            T::Err: fmt::Display,
            D: Deserializer<'de>,
        {
            let s = Option::<String>::deserialize(d)?;
            s.map(|s| s.parse().map_err(serde::de::Error::custom)).transpose()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    #[serde(with = "text")]
    pub dataset: DatasetId,
    /// Root holding `mnist/` and `fashion/` IDX directories.
    pub data_dir: String,
    #[serde(with = "text")]
    pub preset: Architecture,
    #[serde(with = "text::opt", skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_dim: Option<usize>,
    #[serde(with = "text")]
    pub objective: ObjectiveKind,
    pub beta: f64,
    /// Clipping coefficient `c`; absent disables clipping.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_coeff: Option<f64>,
    #[serde(with = "text")]
    pub clip_gradient: ClipGradient,
    #[serde(with = "text")]
    pub variance_reg: VarianceReg,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// First K training examples; 0 means all.
    pub train_subset: usize,
    /// First K test examples; 0 means all.
    pub test_subset: usize,
    #[serde(with = "text")]
    pub precision: Precision,
    pub probe: bool,
    pub probe_hidden: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_sigma: Option<f64>,
    /// Symmetric traversal half-width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub traversal_range: Option<f64>,
    pub traversal_steps: usize,
}

impl Default for RunManifest {
    fn default() -> Self {
        let adam = AdamConfig::default();
        RunManifest {
            format_version: FORMAT_VERSION,
            dataset: DatasetId::Fashion,
            data_dir: "data".into(),
            preset: Architecture::CnnMain,
            activation: None,
            z_dim: None,
            objective: ObjectiveKind::MuVae,
            beta: 4.0,
            clip_coeff: None,
            clip_gradient: ClipGradient::Exact,
            variance_reg: VarianceReg::LogVarRaw,
            seed: 1,
            epochs: 20,
            batch_size: 64,
            learning_rate: adam.learning_rate,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            train_subset: 10_000,
            test_subset: 2_000,
            precision: Precision::F32,
            probe: true,
            probe_hidden: crate::probe::DEFAULT_HIDDEN,
            prior_sigma: None,
            traversal_range: None,
            traversal_steps: 40,
        }
    }
}

/// Default clipping coefficient for μ-VAE runs.
pub const DEFAULT_MU_CLIP: f64 = 3.0;

impl RunManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: RunManifest = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "manifest format_version {} is not supported (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest fields are all TOML-representable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Copy with every optional key resolved and the result validated.
    pub fn effective(&self) -> Result<Self> {
        let mut m = self.clone();
        let base = ModelPreset::default_for(m.preset);
        m.activation.get_or_insert(base.activation);
        m.z_dim.get_or_insert(base.z_dim);
        if m.objective == ObjectiveKind::MuVae && m.clip_coeff.is_none() {
            m.clip_coeff = Some(DEFAULT_MU_CLIP);
        }
        m.prior_sigma.get_or_insert(match m.objective {
            ObjectiveKind::MuVae => 3.0,
            _ => 1.0,
        });
        if m.traversal_range.is_none() {
            m.traversal_range = Some(match (m.objective, m.clip_coeff) {
                (ObjectiveKind::MuVae, Some(c)) => 10.0 * c / DEFAULT_MU_CLIP,
                _ => 2.0,
            });
        }
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.probe_hidden == 0 {
            return Err(Error::Config("probe_hidden must be at least 1".into()));
        }
        if self.traversal_steps < 2 {
            return Err(Error::Config("traversal_steps must be at least 2".into()));
        }
        positive("learning_rate", self.learning_rate)?;
        positive("adam_epsilon", self.adam_epsilon)?;
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if let Some(s) = self.prior_sigma {
            positive("prior_sigma", s)?;
        }
        if let Some(r) = self.traversal_range {
            positive("traversal_range", r)?;
        }
        self.model_preset().validate()?;
        self.objective_config().validate()
    }

    pub fn model_preset(&self) -> ModelPreset {
        let mut p = ModelPreset::default_for(self.preset);
        if let Some(a) = self.activation {
            p.activation = a;
        }
        if let Some(d) = self.z_dim {
            p.z_dim = d;
        }
        p
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            kind: self.objective,
            beta: self.beta,
            clip: ClipConfig {
                coeff: self.clip_coeff,
                gradient: self.clip_gradient,
            },
            variance_reg: self.variance_reg,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn batch_plan(&self) -> BatchPlan {
        BatchPlan {
            batch_size: self.batch_size,
            shuffle_seed: Some(self.seed),
            drop_last: true,
        }
    }

    pub fn prior_sigma_or_default(&self) -> f64 {
        self.prior_sigma.unwrap_or(match self.objective {
            ObjectiveKind::MuVae => 3.0,
            _ => 1.0,
        })
    }
}
