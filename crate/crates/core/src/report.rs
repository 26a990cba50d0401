//! Attribution-error bookkeeping for a single run.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionMap, BaselineProvenance, Method, Scheme};
use crate::model::Target;

/// Below this `|y - y'|` the relative error is undefined.
pub const DELTA_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub method: Method,
    pub scheme: Option<Scheme>,
    pub steps: Option<usize>,
    pub split_index: usize,
    pub target: Target,
    pub baseline: BaselineProvenance,
    pub output_value: f64,
    pub baseline_output: f64,
    pub delta: f64,
    pub attribution_sum: f64,
    pub abs_error: f64,
    /// `None` (written as `"undefined"`) when `|delta| < 1e-12`.
    #[serde(with = "rel_error_repr")]
    pub rel_error: Option<f64>,
    pub runtime_ms: f64,
    #[serde(default)]
    pub refined: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// `(|Σ map - delta|, |abs / delta|)`, the latter undefined for a vanishing
/// delta.
pub fn attribution_error(map: &AttributionMap, delta: f64) -> (f64, Option<f64>) {
    errors_from_sum(map.attribution_sum(), delta)
}

pub fn errors_from_sum(attribution_sum: f64, delta: f64) -> (f64, Option<f64>) {
    let abs = (attribution_sum - delta).abs();
    let rel = (delta.abs() >= DELTA_EPSILON).then(|| (abs / delta).abs());
    (abs, rel)
}

impl AttributionReport {
    pub fn from_map(map: &AttributionMap, output_value: f64, baseline_output: f64, runtime: Duration) -> Self {
        let delta = output_value - baseline_output;
        let attribution_sum = map.attribution_sum();
        let (abs_error, rel_error) = errors_from_sum(attribution_sum, delta);
        Self {
            method: map.meta.method,
            scheme: map.meta.scheme,
            steps: map.meta.steps,
            split_index: map.meta.split_index,
            target: map.meta.target,
            baseline: map.meta.baseline,
            output_value,
            baseline_output,
            delta,
            attribution_sum,
            abs_error,
            rel_error,
            runtime_ms: runtime.as_secs_f64() * 1e3,
            refined: false,
            notes: map.meta.notes.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

mod rel_error_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    const UNDEFINED: &str = "undefined";

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str(UNDEFINED),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Word(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(v) => Ok(Some(v)),
            Repr::Word(w) if w == UNDEFINED => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("bad rel_error `{w}`"))),
        }
    }
}
