//! Train/test resolution bookkeeping.
//!
//! A network with `n` stride-2 layers sees an odd input extent at some of
//! them, and "same" padding then downsamples asymmetrically. Where that
//! happens depends only on the resolution modulo `2ⁿ`, so train and test
//! resolutions are kept congruent modulo `2ⁿ`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stride-2 layers in every EfficientNet, stem included.
pub const EFFICIENTNET_DOWNSAMPLES: u32 = 5;

/// Native and half training resolutions of EfficientNet B0–B5.
pub const TRAINING_RESOLUTIONS: [(u32, u32); 6] = [
    (224, 160),
    (240, 176),
    (260, 192),
    (300, 204),
    (380, 252),
    (456, 328),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionPair {
    pub train_resolution: u32,
    pub test_resolution: u32,
    pub n_downsamples: u32,
}

impl ResolutionPair {
    pub fn new(train_resolution: u32, test_resolution: u32, n_downsamples: u32) -> Result<Self> {
        let min = 1u32
            .checked_shl(n_downsamples)
            .ok_or_else(|| Error::invalid(format!("{n_downsamples} downsamples is too many")))?;
        if train_resolution < min || test_resolution < min {
            return Err(Error::invalid(format!(
                "resolutions {train_resolution}/{test_resolution} must be at least {min}"
            )));
        }
        Ok(ResolutionPair {
            train_resolution,
            test_resolution,
            n_downsamples,
        })
    }
}

fn modulus(n: u32) -> u32 {
    1 << n
}

pub fn congruent(pair: &ResolutionPair) -> bool {
    let m = modulus(pair.n_downsamples);
    pair.train_resolution % m == pair.test_resolution % m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

impl fmt::Display for Parity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parity::Even => "even",
            Parity::Odd => "odd",
        })
    }
}

/// Parity of the input extent at every stride-2 layer, given the strides of
/// the network's spatial layers in order. Extents shrink as `ceil(f / s)`.
pub fn parity_profile(resolution: u32, strides: &[usize]) -> Result<Vec<Parity>> {
    if resolution < 32 {
        return Err(Error::invalid(format!("resolution {resolution} is below 32")));
    }
    let mut field = resolution as usize;
    let mut out = Vec::new();
    for &s in strides {
        if s == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        if s == 2 {
            out.push(if field.is_multiple_of(2) { Parity::Even } else { Parity::Odd });
        }
        field = field.div_ceil(s);
    }
    Ok(out)
}

/// Test resolutions from `train` up to `max` that are congruent to `train`
/// modulo `2ⁿ`.
pub fn valid_test_resolutions(train: u32, n: u32, max: u32) -> Vec<u32> {
    (train..=max).step_by(modulus(n) as usize).collect()
}

/// Every resolution in `[2ⁿ, max]` congruent to `r` modulo `2ⁿ`.
pub fn congruence_class(r: u32, n: u32, max: u32) -> Vec<u32> {
    let m = modulus(n);
    let first = m + (r % m);
    (first..=max).step_by(m as usize).collect()
}

/// Half-pixel training resolution for a native resolution: the tabulated
/// value for the six EfficientNet sizes, otherwise the congruent resolution
/// whose pixel count is closest to half the native count (smaller on ties).
pub fn half_resolution(native: u32, n: u32) -> u32 {
    if let Some(&(_, half)) = TRAINING_RESOLUTIONS.iter().find(|(r, _)| *r == native) {
        return half;
    }
    half_resolution_heuristic(native, n)
}

pub fn half_resolution_heuristic(native: u32, n: u32) -> u32 {
    let target = (native as f64).powi(2) / 2.0;
    congruence_class(native, n, native)
        .into_iter()
        .min_by(|a, b| {
            let da = ((*a as f64).powi(2) - target).abs();
            let db = ((*b as f64).powi(2) - target).abs();
            da.total_cmp(&db).then(a.cmp(b))
        })
        .unwrap_or(modulus(n))
}
