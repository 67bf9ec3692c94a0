//! Report plumbing: non-finite number encoding and seed aggregation.

use serde::{Deserialize, Serialize};

/// Serializes `f64` as a JSON number when finite and as `"inf"`, `"-inf"` or
/// `"nan"` otherwise.
pub mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::format_nonfinite(*v))
        }
    }

    #[derive(serde::Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

/// Same encoding for optional values.
pub mod nonfinite_opt {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct W(#[serde(with = "super::nonfinite")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(W).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
    }
}

pub(crate) fn format_nonfinite(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Formats a metric for tables.
pub fn format_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        format_nonfinite(v)
    }
}

/// Mean and sample standard deviation over seeds. `std` is absent for a
/// single seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "nonfinite")]
    pub mean: f64,
    #[serde(with = "nonfinite_opt", default)]
    pub std: Option<f64>,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: None,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| {
            if !mean.is_finite() {
                return f64::NAN;
            }
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        Self { mean, std }
    }

    /// `mean ± std`, or just the mean.
    pub fn cell(&self) -> String {
        match self.std {
            Some(s) => format!("{}±{}", format_value(self.mean), format_value(s)),
            None => format_value(self.mean),
        }
    }
}
