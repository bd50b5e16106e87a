//! Serialization helpers shared by the JSON reports.
//!
//! Report floats are rounded to 6 decimals so that diffs between runs stay
//! stable.

use std::collections::BTreeMap;

use serde::{Serialize, Serializer};

pub fn round6(x: f64) -> f64 {
    if x.is_finite() {
        (x * 1e6).round() / 1e6
    } else {
        x
    }
}

pub fn ser_f64<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round6(*x))
}

pub fn ser_opt_f64<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    x.map(round6).serialize(s)
}

pub fn ser_vec_f64<S: Serializer>(x: &[f64], s: S) -> Result<S::Ok, S::Error> {
    x.iter().copied().map(round6).collect::<Vec<_>>().serialize(s)
}

pub fn ser_map_f64<S: Serializer>(x: &BTreeMap<i64, f64>, s: S) -> Result<S::Ok, S::Error> {
    x.iter()
        .map(|(&k, &v)| (k, round6(v)))
        .collect::<BTreeMap<_, _>>()
        .serialize(s)
}

/// Formats a float with 6 significant decimals for text reports (CSV, TSV).
pub fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}
