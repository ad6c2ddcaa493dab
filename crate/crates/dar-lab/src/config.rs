//! Line-oriented `key = value` configuration: defaults, file loading, flag
//! overrides, typed resolution, and a manifest echo of the resolved state.
//! Unknown keys are rejected so typos fail loudly instead of silently
//! training the wrong thing.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::backbone::ModelConfig;
use crate::router::{Pooling, QueryVariant, RouteMode, RouterConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `key = value`, got `{text}`")]
    Syntax {
        path: String,
        line: usize,
        text: String,
    },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot parse `{value}` as {want}")]
    BadValue {
        key: String,
        value: String,
        want: &'static str,
    },
}

const DEFAULTS: &[(&str, &str)] = &[
    ("model.n_blocks", "6"),
    ("model.d", "64"),
    ("model.head_dim", "64"),
    ("model.mlp_ratio", "4"),
    ("router.mode", "standard"),
    ("router.query", "static"),
    ("router.chunk", "2"),
    ("router.pooling", "per_token"),
    ("train.steps", "2000"),
    ("train.batch", "16"),
    ("train.lr", "1e-4"),
    ("train.seed", "0"),
    ("train.null_drop", "0.1"),
    ("train.clip", "1.0"),
    ("train.eval_every", "100"),
    ("train.log_every", "1"),
    ("data.seed", "42"),
    ("data.train_n", "2048"),
    ("data.val_n", "256"),
    ("sample.steps", "32"),
    ("sample.n", "64"),
    ("sample.cfg", "1.0"),
    ("sample.seed", "7"),
    ("sample.class", "0"),
    ("diag.samples", "512"),
    ("diag.t", "1.0"),
    ("diag.t_points", "11"),
    ("probe.pairs", "128"),
    ("probe.lambda", "1e-3"),
    ("probe.train_frac", "0.7"),
    ("probe.seed", "9"),
    ("eval.gen_n", "512"),
    ("sweep.modes", ""),
];

/// Resolved key/value state. Values stay strings until `settings()` so the
/// manifest echoes exactly what was decided.
#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        cfg.read_file(path)?;
        Ok(cfg)
    }

    pub fn read_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: path.display().to_string(),
                line: idx + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !self.values.contains_key(key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key} missing from table"))
    }

    /// Every resolved (key, value) pair, sorted by key.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Pretty JSON of every resolved key, for the run manifest.
    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.values).expect("string map serializes")
    }

    /// The subset a checkpoint must echo: everything that shapes the
    /// parameter schema.
    pub fn schema_echo(&self) -> BTreeMap<String, String> {
        self.values
            .iter()
            .filter(|(k, _)| k.starts_with("model.") || k.starts_with("router."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Replace the schema keys from a checkpoint echo (used when loading a
    /// checkpoint without the original config file).
    pub fn adopt_schema(&mut self, echo: &BTreeMap<String, String>) -> Result<(), ConfigError> {
        for (k, v) in echo {
            self.set(k, v)?;
        }
        Ok(())
    }

    fn usize_of(&self, key: &str) -> Result<usize, ConfigError> {
        let v = self.get(key);
        v.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            want: "unsigned integer",
        })
    }

    fn u64_of(&self, key: &str) -> Result<u64, ConfigError> {
        let v = self.get(key);
        v.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            want: "unsigned integer",
        })
    }

    fn f64_of(&self, key: &str) -> Result<f64, ConfigError> {
        let v = self.get(key);
        v.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            want: "real number",
        })
    }

    pub fn settings(&self) -> Result<Settings, ConfigError> {
        let model = ModelConfig {
            n_blocks: self.usize_of("model.n_blocks")?,
            d: self.usize_of("model.d")?,
            tokens: crate::data::TOKENS,
            token_dim: crate::data::TOKEN_DIM,
            n_classes: crate::data::N_CLASSES,
            head_dim: self.usize_of("model.head_dim")?,
            mlp_ratio: self.usize_of("model.mlp_ratio")?,
        };
        let route = RouterConfig {
            mode: parse_mode(self.get("router.mode")).ok_or_else(|| ConfigError::BadValue {
                key: "router.mode".into(),
                value: self.get("router.mode").into(),
                want: "standard | unet_skip | dar",
            })?,
            query: parse_query(self.get("router.query")).ok_or_else(|| ConfigError::BadValue {
                key: "router.query".into(),
                value: self.get("router.query").into(),
                want: "static | explicit_t | dynamic",
            })?,
            chunk: parse_chunk(self.get("router.chunk")).ok_or_else(|| ConfigError::BadValue {
                key: "router.chunk".into(),
                value: self.get("router.chunk").into(),
                want: "positive integer or `dense`",
            })?,
            pooling: parse_pooling(self.get("router.pooling")).ok_or_else(|| {
                ConfigError::BadValue {
                    key: "router.pooling".into(),
                    value: self.get("router.pooling").into(),
                    want: "per_token | mean_pooled",
                }
            })?,
        };
        let sweep = parse_sweep(self.get("sweep.modes"), &route).map_err(|tok| {
            ConfigError::BadValue {
                key: "sweep.modes".into(),
                value: tok,
                want: "comma list of standard | unet_skip | dar-static | dar-explicit | dar-dynamic",
            }
        })?;
        Ok(Settings {
            model,
            route,
            train: TrainSettings {
                steps: self.usize_of("train.steps")?,
                batch: self.usize_of("train.batch")?,
                lr: self.f64_of("train.lr")?,
                seed: self.u64_of("train.seed")?,
                null_drop: self.f64_of("train.null_drop")?,
                clip: self.f64_of("train.clip")?,
                eval_every: self.usize_of("train.eval_every")?,
                log_every: self.usize_of("train.log_every")?,
            },
            data: DataSettings {
                seed: self.u64_of("data.seed")?,
                train_n: self.usize_of("data.train_n")?,
                val_n: self.usize_of("data.val_n")?,
            },
            sample: SampleSettings {
                steps: self.usize_of("sample.steps")?,
                n: self.usize_of("sample.n")?,
                cfg: self.f64_of("sample.cfg")?,
                seed: self.u64_of("sample.seed")?,
                class: self.usize_of("sample.class")?,
            },
            diag: DiagSettings {
                samples: self.usize_of("diag.samples")?,
                t: self.f64_of("diag.t")?,
                t_points: self.usize_of("diag.t_points")?,
            },
            probe: ProbeSettings {
                pairs: self.usize_of("probe.pairs")?,
                lambda: self.f64_of("probe.lambda")?,
                train_frac: self.f64_of("probe.train_frac")?,
                seed: self.u64_of("probe.seed")?,
            },
            eval_gen_n: self.usize_of("eval.gen_n")?,
            sweep,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub model: ModelConfig,
    pub route: RouterConfig,
    pub train: TrainSettings,
    pub data: DataSettings,
    pub sample: SampleSettings,
    pub diag: DiagSettings,
    pub probe: ProbeSettings,
    pub eval_gen_n: usize,
    pub sweep: Vec<SweepEntry>,
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub null_drop: f64,
    pub clip: f64,
    pub eval_every: usize,
    pub log_every: usize,
}

#[derive(Debug, Clone)]
pub struct DataSettings {
    pub seed: u64,
    pub train_n: usize,
    pub val_n: usize,
}

#[derive(Debug, Clone)]
pub struct SampleSettings {
    pub steps: usize,
    pub n: usize,
    pub cfg: f64,
    pub seed: u64,
    pub class: usize,
}

#[derive(Debug, Clone)]
pub struct DiagSettings {
    pub samples: usize,
    pub t: f64,
    pub t_points: usize,
}

#[derive(Debug, Clone)]
pub struct ProbeSettings {
    pub pairs: usize,
    pub lambda: f64,
    pub train_frac: f64,
    pub seed: u64,
}

/// One labeled routing variant in a convergence-comparison sweep.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub label: String,
    pub route: RouterConfig,
}

pub fn parse_mode(s: &str) -> Option<RouteMode> {
    match s {
        "standard" => Some(RouteMode::Standard),
        "unet_skip" => Some(RouteMode::UnetSkip),
        "dar" => Some(RouteMode::Dar),
        _ => None,
    }
}

pub fn parse_query(s: &str) -> Option<QueryVariant> {
    match s {
        "static" => Some(QueryVariant::Static),
        "explicit_t" => Some(QueryVariant::ExplicitT),
        "dynamic" => Some(QueryVariant::Dynamic),
        _ => None,
    }
}

pub fn parse_pooling(s: &str) -> Option<Pooling> {
    match s {
        "per_token" => Some(Pooling::PerToken),
        "mean_pooled" => Some(Pooling::MeanPooled),
        _ => None,
    }
}

pub fn parse_chunk(s: &str) -> Option<usize> {
    if s == "dense" {
        return Some(1);
    }
    s.parse().ok().filter(|&v: &usize| v >= 1)
}

/// Sweep tokens name whole variants; chunk and pooling come from the base
/// router config so the sweep varies exactly one axis.
fn parse_sweep(list: &str, base: &RouterConfig) -> Result<Vec<SweepEntry>, String> {
    let mut out = Vec::new();
    for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let route = match tok {
            "standard" => RouterConfig {
                mode: RouteMode::Standard,
                ..base.clone()
            },
            "unet_skip" => RouterConfig {
                mode: RouteMode::UnetSkip,
                ..base.clone()
            },
            "dar-static" => RouterConfig {
                mode: RouteMode::Dar,
                query: QueryVariant::Static,
                ..base.clone()
            },
            "dar-explicit" => RouterConfig {
                mode: RouteMode::Dar,
                query: QueryVariant::ExplicitT,
                ..base.clone()
            },
            "dar-dynamic" => RouterConfig {
                mode: RouteMode::Dar,
                query: QueryVariant::Dynamic,
                ..base.clone()
            },
            other => return Err(other.to_string()),
        };
        out.push(SweepEntry {
            label: tok.to_string(),
            route,
        });
    }
    Ok(out)
}
