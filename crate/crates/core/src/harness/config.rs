//! Experiment configuration: a JSON document whose keys are exactly
//! `mode`, `field.kind`, `field.d`, `field.c`, `field.lambda`, `field.K`,
//! `n_list`, `replicates`, `p`, `anchors`, `seed` and `output`. The `field.*`
//! keys may be written flat (`"field.kind": ...`) or nested
//! (`"field": {"kind": ...}`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::Value;
use thiserror::Error;

use crate::lattice::LatticeVector;
use crate::samplers::{FieldKind, FieldSpec, SamplerError};

pub const DEFAULT_UNIVARIATE_REPLICATES: usize = 10_000;
pub const DEFAULT_MULTIVARIATE_REPLICATES: usize = 2_000;

const KEYS: [&str; 12] = [
    "mode",
    "field.kind",
    "field.d",
    "field.c",
    "field.lambda",
    "field.K",
    "n_list",
    "replicates",
    "p",
    "anchors",
    "seed",
    "output",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("missing config key `{0}`")]
    MissingKey(&'static str),
    #[error("config key `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("anchors {q} and {s} are {distance} apart in max-norm, less than n = {n}")]
    Separation { q: usize, s: usize, distance: i64, n: usize },
    #[error(transparent)]
    Field(#[from] SamplerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Univariate,
    Multivariate,
    Rate,
}

/// Raw `field.*` parameters; vector kinds are instantiated per `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub kind: String,
    pub d: usize,
    pub c: f64,
    pub lambda: f64,
    pub k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub field: FieldParams,
    pub n_list: Vec<usize>,
    pub replicates: usize,
    pub p: usize,
    /// Block corners for multivariate runs; `None` means `((q-1) n, 0, ..., 0)`.
    pub anchors: Option<Vec<LatticeVector>>,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) -> Result<(), ConfigError> {
    match value {
        Value::Object(map) if prefix.is_empty() || prefix == "field" => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out)?;
            }
            Ok(())
        }
        _ => {
            if !KEYS.contains(&prefix) {
                return Err(ConfigError::UnknownKey(prefix.to_string()));
            }
            if out.insert(prefix.to_string(), value.clone()).is_some() {
                return Err(ConfigError::Invalid {
                    key: KEYS.iter().find(|k| **k == prefix).copied().unwrap_or("?"),
                    message: "given twice".into(),
                });
            }
            Ok(())
        }
    }
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

struct Keys(BTreeMap<String, Value>);

impl Keys {
    fn get(&self, key: &'static str) -> Option<&Value> {
        self.0.get(key).filter(|v| !v.is_null())
    }

    fn uint(&self, key: &'static str) -> Result<Option<u64>, ConfigError> {
        self.get(key)
            .map(|v| v.as_u64().ok_or_else(|| invalid(key, format!("expected a nonnegative integer, got {v}"))))
            .transpose()
    }

    fn float(&self, key: &'static str) -> Result<Option<f64>, ConfigError> {
        self.get(key)
            .map(|v| v.as_f64().ok_or_else(|| invalid(key, format!("expected a number, got {v}"))))
            .transpose()
    }

    fn string(&self, key: &'static str) -> Result<Option<&str>, ConfigError> {
        self.get(key)
            .map(|v| v.as_str().ok_or_else(|| invalid(key, format!("expected a string, got {v}"))))
            .transpose()
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text)?;
        if !value.is_object() {
            return Err(invalid("mode", "config must be a JSON object"));
        }
        let mut flat = BTreeMap::new();
        flatten("", &value, &mut flat)?;
        let keys = Keys(flat);

        let mode = match keys.string("mode")?.ok_or(ConfigError::MissingKey("mode"))? {
            "univariate" => Mode::Univariate,
            "multivariate" => Mode::Multivariate,
            "rate" => Mode::Rate,
            other => return Err(invalid("mode", format!("unknown mode `{other}`"))),
        };
        let kind = keys.string("field.kind")?.ok_or(ConfigError::MissingKey("field.kind"))?.to_string();
        let d = keys.uint("field.d")?.unwrap_or(1) as usize;
        let field = FieldParams {
            kind,
            d,
            c: keys.float("field.c")?.unwrap_or(0.0),
            lambda: keys.float("field.lambda")?.unwrap_or(1.0),
            k: keys.float("field.K")?,
        };

        let n_list: Vec<usize> = match keys.get("n_list") {
            None => return Err(ConfigError::MissingKey("n_list")),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| v.as_u64().filter(|&n| n > 0).map(|n| n as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| invalid("n_list", "entries must be positive integers"))?,
            Some(v) => return Err(invalid("n_list", format!("expected an array, got {v}"))),
        };
        if n_list.is_empty() {
            return Err(invalid("n_list", "must not be empty"));
        }
        if n_list.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("n_list", "must be strictly increasing"));
        }

        let p = keys.uint("p")?.map(|v| v as usize).unwrap_or(match mode {
            Mode::Multivariate => 2,
            _ => 1,
        });
        if p == 0 {
            return Err(invalid("p", "must be positive"));
        }
        let replicates = keys.uint("replicates")?.map(|v| v as usize).unwrap_or(match mode {
            Mode::Multivariate => DEFAULT_MULTIVARIATE_REPLICATES,
            _ => DEFAULT_UNIVARIATE_REPLICATES,
        });
        if replicates < 2 {
            return Err(invalid("replicates", "need at least 2 replicates"));
        }

        let anchors = match keys.get("anchors") {
            None => None,
            Some(Value::Array(rows)) => {
                let parsed: Option<Vec<LatticeVector>> = rows
                    .iter()
                    .map(|row| {
                        row.as_array()
                            .and_then(|r| r.iter().map(Value::as_i64).collect::<Option<Vec<i64>>>())
                            .map(LatticeVector)
                    })
                    .collect();
                let parsed = parsed.ok_or_else(|| invalid("anchors", "expected an array of integer arrays"))?;
                if parsed.len() != p {
                    return Err(invalid("anchors", format!("{} anchors given for p = {p}", parsed.len())));
                }
                if parsed.iter().any(|a| a.dim() != d) {
                    return Err(invalid("anchors", format!("every anchor needs {d} coordinates")));
                }
                Some(parsed)
            }
            Some(v) => return Err(invalid("anchors", format!("expected an array, got {v}"))),
        };

        let config = ExperimentConfig {
            mode,
            field,
            n_list,
            replicates,
            p,
            anchors,
            seed: keys.uint("seed")?.unwrap_or(0),
            output: keys.string("output")?.map(PathBuf::from),
        };
        if config.is_field_kind() {
            config.field_spec()?;
        } else if !matches!(config.field.kind.as_str(), "multinomial" | "srswor") {
            return Err(invalid("field.kind", format!("unknown kind `{}`", config.field.kind)));
        }
        if let Some(anchors) = &config.anchors {
            for &n in &config.n_list {
                check_separation(anchors, n)?;
            }
        }
        Ok(config)
    }

    pub fn is_field_kind(&self) -> bool {
        matches!(
            self.field.kind.as_str(),
            "iid_rademacher" | "gaussian_na" | "sign_gaussian_na"
        )
    }

    /// The field spec for lattice kinds.
    pub fn field_spec(&self) -> Result<FieldSpec, ConfigError> {
        let FieldParams { c, lambda, d, k, .. } = self.field;
        let kind = match self.field.kind.as_str() {
            "iid_rademacher" => FieldKind::IidRademacher,
            "gaussian_na" => FieldKind::GaussianNa { c, lambda },
            "sign_gaussian_na" => FieldKind::SignGaussianNa { c, lambda },
            other => return Err(invalid("field.kind", format!("`{other}` is not a lattice field kind"))),
        };
        Ok(FieldSpec::new(kind, d, k)?)
    }

    /// Vector kinds at size `n`: `n` balls into `p` equiprobable boxes, or
    /// `p` draws from the centered population `{0, ..., n-1} - (n-1)/2`.
    pub fn vector_spec(&self, n: usize) -> Result<FieldSpec, ConfigError> {
        let p = self.p.max(2);
        let kind = match self.field.kind.as_str() {
            "multinomial" => FieldKind::Multinomial {
                balls: n as u64,
                probs: vec![1.0 / p as f64; p],
            },
            "srswor" => {
                let shift = (n as f64 - 1.0) / 2.0;
                FieldKind::Srswor {
                    population: (0..n).map(|i| i as f64 - shift).collect(),
                    draws: p,
                }
            }
            other => return Err(invalid("field.kind", format!("`{other}` is not a vector kind"))),
        };
        Ok(FieldSpec::new(kind, 1, self.field.k)?)
    }

    /// Anchors used at block side `n`.
    pub fn anchors_for(&self, n: usize) -> Vec<LatticeVector> {
        match &self.anchors {
            Some(a) => a.clone(),
            None => default_anchors(self.p, self.field.d, n),
        }
    }
}

/// `k_q = ((q-1) n, 0, ..., 0)`, the tightest separated layout.
pub fn default_anchors(p: usize, d: usize, n: usize) -> Vec<LatticeVector> {
    (0..p)
        .map(|q| {
            let mut v = vec![0i64; d];
            v[0] = (q * n) as i64;
            LatticeVector(v)
        })
        .collect()
}

/// Requires `|k_q - k_s|_inf >= n` for all `q != s`, so the blocks are disjoint.
pub fn check_separation(anchors: &[LatticeVector], n: usize) -> Result<(), ConfigError> {
    for q in 0..anchors.len() {
        for s in q + 1..anchors.len() {
            let distance = (&anchors[q] - &anchors[s]).linf_norm();
            if distance < n as i64 {
                return Err(ConfigError::Separation { q, s, distance, n });
            }
        }
    }
    Ok(())
}
