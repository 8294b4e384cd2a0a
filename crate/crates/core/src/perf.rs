//! Arithmetic intensity of grouped convolutions and a per-layer roofline
//! classification.
//!
//! For a convolution with group size `G`, `N` groups, kernel `k`, stride `s`,
//! field `f` and batch `B`, counting one FLOP per multiply-accumulate and one
//! transferred element per weight or input activation:
//!
//! ```text
//! FLOPs    = G²k²Bf²N / s
//! elements = k²G²N + Bf²GN
//! I        = Gk²Bf² / (s(Gk² + Bf²))
//! ```
//!
//! `I` grows with `G`, `k`, `B` and `f`, falls with `s`, and does not depend on
//! `N`. Output activations are not counted as transfers.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    /// FLOP/s.
    pub peak_flops: f64,
    /// Bytes/s.
    pub mem_bandwidth: f64,
    pub bytes_per_element: u32,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_flops > 0.0 && self.peak_flops.is_finite()) {
            return Err(Error::invalid("peak_flops must be positive"));
        }
        if !(self.mem_bandwidth > 0.0 && self.mem_bandwidth.is_finite()) {
            return Err(Error::invalid("mem_bandwidth must be positive"));
        }
        if !matches!(self.bytes_per_element, 2 | 4 | 8) {
            return Err(Error::invalid("bytes_per_element must be 2, 4 or 8"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let profile: HardwareProfile = serde_json::from_slice(&std::fs::read(path)?)?;
        profile.validate()?;
        Ok(profile)
    }

    /// Intensity, in FLOPs per element, at which the profile becomes compute bound.
    pub fn ridge_point(&self) -> f64 {
        self.peak_flops * self.bytes_per_element as f64 / self.mem_bandwidth
    }
}

fn terms(spec: &ConvSpec) -> (f64, f64, f64, f64, f64) {
    (
        spec.group_size as f64,
        (spec.kernel * spec.kernel) as f64,
        spec.batch as f64,
        (spec.field * spec.field) as f64,
        spec.stride as f64,
    )
}

pub fn flops(spec: &ConvSpec) -> f64 {
    let (g, k2, b, f2, s) = terms(spec);
    g * g * k2 * b * f2 * spec.groups as f64 / s
}

pub fn transferred_elements(spec: &ConvSpec) -> f64 {
    let (g, k2, b, f2, _) = terms(spec);
    let n = spec.groups as f64;
    k2 * g * g * n + b * f2 * g * n
}

pub fn intensity(spec: &ConvSpec) -> f64 {
    let (g, k2, b, f2, s) = terms(spec);
    g * k2 * b * f2 / (s * (g * k2 + b * f2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Field {
    GroupSize,
    Kernel,
    Batch,
    Field,
    Stride,
    Groups,
}

impl Field {
    pub const ALL: [Field; 6] = [
        Field::GroupSize,
        Field::Kernel,
        Field::Batch,
        Field::Field,
        Field::Stride,
        Field::Groups,
    ];

    /// Sign of the change in intensity when this field grows.
    pub fn expected_direction(self) -> std::cmp::Ordering {
        use std::cmp::Ordering::*;
        match self {
            Field::Stride => Less,
            Field::Groups => Equal,
            _ => Greater,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityWitness {
    pub field: Field,
    pub before: f64,
    pub after: f64,
    pub holds: bool,
}

/// `spec` with one field incremented; channel counts follow `G·N`.
pub fn increment(spec: &ConvSpec, field: Field) -> ConvSpec {
    let mut s = *spec;
    match field {
        Field::GroupSize => s.group_size += 1,
        Field::Kernel => s.kernel += 1,
        Field::Batch => s.batch += 1,
        Field::Field => s.field += 1,
        Field::Stride => s.stride += 1,
        Field::Groups => s.groups += 1,
    }
    s.in_channels = s.group_size * s.groups;
    s.out_channels = s.in_channels;
    s
}

/// Compares the intensity before and after incrementing `field`.
pub fn monotonicity_check(spec: &ConvSpec, field: Field) -> MonotonicityWitness {
    let before = intensity(spec);
    let after = intensity(&increment(spec, field));
    let holds = match field.expected_direction() {
        std::cmp::Ordering::Equal => before == after,
        dir => after.partial_cmp(&before) == Some(dir),
    };
    MonotonicityWitness {
        field,
        before,
        after,
        holds,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Compute,
    Memory,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntensityRow {
    pub layer: String,
    pub spec: ConvSpec,
    pub flops: f64,
    pub elements: f64,
    pub intensity: f64,
    pub bound: Bound,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntensityReport {
    pub ridge_point: f64,
    pub rows: Vec<IntensityRow>,
}

/// Classifies each named convolution against the profile's ridge point.
pub fn roofline(
    layers: impl IntoIterator<Item = (String, ConvSpec)>,
    hw: &HardwareProfile,
) -> Result<IntensityReport> {
    hw.validate()?;
    let ridge = hw.ridge_point();
    let rows = layers
        .into_iter()
        .map(|(layer, spec)| {
            let i = intensity(&spec);
            IntensityRow {
                layer,
                flops: flops(&spec),
                elements: transferred_elements(&spec),
                intensity: i,
                bound: if i >= ridge { Bound::Compute } else { Bound::Memory },
                spec,
            }
        })
        .collect();
    Ok(IntensityReport {
        ridge_point: ridge,
        rows,
    })
}

impl IntensityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,G,N,k,s,f,B,flops,elements,intensity,bound\n");
        for r in &self.rows {
            let s = &r.spec;
            let bound = match r.bound {
                Bound::Compute => "compute",
                Bound::Memory => "memory",
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.layer, s.group_size, s.groups, s.kernel, s.stride, s.field, s.batch, r.flops, r.elements, r.intensity, bound
            )
            .unwrap();
        }
        out
    }
}
