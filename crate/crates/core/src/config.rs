//! JSON model configuration files.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "preset": "T",
//!   "plans": [{"pre_attention": [...4 aggregators], "non_attention": {...}}],
//!   "softmax_on_context": false,
//!   "num_classes": 1000,
//!   "drop_path_rate": 0.1,
//!   "seed": 0
//! }
//! ```
//!
//! Either `preset` or four explicit `stages` must be given. `plans` holds one
//! branch plan for every stage or four per-stage plans. The `GMX_SEED`
//! environment variable overrides `seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Downsample, ModelConfig, Preset, StageConfig};
use crate::error::{Error, Result};
use crate::gma::BranchPlan;

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "GMX_SEED";

/// JSON schema of [`ConfigFile`], published as `docs/config.schema.json`.
pub const SCHEMA: &str = include_str!("../../../docs/config.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<StageConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plans: Option<Vec<BranchPlan>>,
    #[serde(default)]
    pub softmax_on_context: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downsample: Option<Downsample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_path_rate: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ConfigFile {
    pub fn from_preset(preset: Preset) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            preset: Some(preset),
            stages: None,
            plans: None,
            softmax_on_context: false,
            downsample: None,
            num_classes: None,
            drop_path_rate: None,
            seed: 0,
        }
    }

    /// Fully explicit file for `config`.
    pub fn from_model(config: &ModelConfig, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            preset: None,
            stages: Some(config.stages.to_vec()),
            plans: Some(if config.plans.iter().all(|p| *p == config.plans[0]) {
                vec![config.plans[0]]
            } else {
                config.plans.to_vec()
            }),
            softmax_on_context: config.softmax_on_context,
            downsample: Some(config.downsample),
            num_classes: Some(config.num_classes),
            drop_path_rate: Some(config.drop_path_rate),
            seed,
        }
    }

    /// Parse and check a config. `origin` prefixes diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let (line, col) = (inner.line(), inner.column());
            if path == "." {
                Error::config(format!("{origin}:{line}:{col}: {inner}"))
            } else {
                Error::config(format!("{origin}:{line}:{col}: field `{path}`: {inner}"))
            }
        })?;
        let at = |field: &str, msg: String| {
            Error::config(format!("{origin}:{}: field `{field}`: {msg}", line_of(text, field)))
        };
        if file.schema_version != SCHEMA_VERSION {
            return Err(at(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", file.schema_version),
            ));
        }
        match (&file.preset, &file.stages) {
            (Some(_), Some(_)) => {
                return Err(at("stages", "`preset` and `stages` are mutually exclusive".into()))
            }
            (None, None) => {
                return Err(at("preset", "one of `preset` or `stages` is required".into()))
            }
            (None, Some(s)) if s.len() != 4 => {
                return Err(at("stages", format!("expected 4 stages, got {}", s.len())))
            }
            _ => {}
        }
        if let Some(p) = &file.plans {
            if p.len() != 1 && p.len() != 4 {
                return Err(at("plans", format!("expected 1 or 4 plans, got {}", p.len())));
            }
        }
        if let Some(r) = file.drop_path_rate {
            if !(0.0..1.0).contains(&r) {
                return Err(at("drop_path_rate", format!("{r} is outside [0, 1)")));
            }
        }
        if file.num_classes == Some(0) {
            return Err(at("num_classes", "must be positive".into()));
        }
        file.model_config()
            .and_then(|c| c.validate())
            .map_err(|e| Error::config(format!("{origin}: {e}")))?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut config = match (&self.preset, &self.stages) {
            (Some(p), _) => ModelConfig::preset(*p),
            (None, Some(s)) => {
                let stages: [StageConfig; 4] = s
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::config(format!("expected 4 stages, got {}", s.len())))?;
                ModelConfig::from_stages(stages, 1000, 0.0)
            }
            (None, None) => return Err(Error::config("one of `preset` or `stages` is required")),
        };
        match self.plans.as_deref() {
            None => {}
            Some([plan]) => config.plans = [*plan; 4],
            Some(p) => {
                config.plans = p
                    .try_into()
                    .map_err(|_| Error::config(format!("expected 1 or 4 plans, got {}", p.len())))?
            }
        }
        config.softmax_on_context = self.softmax_on_context;
        if let Some(d) = self.downsample {
            config.downsample = d;
        }
        if let Some(n) = self.num_classes {
            config.num_classes = n;
        }
        if let Some(r) = self.drop_path_rate {
            config.drop_path_rate = r;
        }
        Ok(config)
    }

    /// The file's seed unless `env` (the value of `GMX_SEED`) overrides it.
    pub fn seed_with(&self, env: Option<&str>) -> Result<u64> {
        Ok(parse_seed(env)?.unwrap_or(self.seed))
    }

    pub fn effective_seed(&self) -> Result<u64> {
        self.seed_with(std::env::var(SEED_ENV).ok().as_deref())
    }
}

/// The seed set through `GMX_SEED`, if any.
pub fn env_seed() -> Result<Option<u64>> {
    parse_seed(std::env::var(SEED_ENV).ok().as_deref())
}

fn parse_seed(env: Option<&str>) -> Result<Option<u64>> {
    env.map(|v| {
        v.trim()
            .parse()
            .map_err(|_| Error::config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))
    })
    .transpose()
}

/// 1-based line of the first `"key"` in `text`, or 1.
fn line_of(text: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    text.find(&needle)
        .map(|i| text[..i].matches('\n').count() + 1)
        .unwrap_or(1)
}
