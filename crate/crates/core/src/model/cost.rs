use std::fmt::Write as _;

use serde::Serialize;

use crate::conv::ConvSpec;
use crate::error::Result;

use super::config::ModelConfig;
use super::plan::{plan, ModelPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Norm,
    Se,
    Pool,
    Dense,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Norm => "norm",
            LayerKind::Se => "se",
            LayerKind::Pool => "pool",
            LayerKind::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub layer: String,
    pub kind: LayerKind,
    pub params: u64,
    pub flops: u64,
}

/// Parameters and FLOPs of one forward pass on a single image. A FLOP is a
/// multiply-accumulate for convolutions and dense layers and one operation
/// per element for normalization, pooling and squeeze-excite scaling.
/// Activations and residual additions are not counted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub resolution: usize,
    pub params: u64,
    pub flops: u64,
    pub rows: Vec<CostRow>,
}

pub fn count_cost(config: &ModelConfig, resolution: usize) -> Result<CostReport> {
    let plan = plan(config)?;
    count_plan(&plan, resolution)
}

fn norm_row(rows: &mut Vec<CostRow>, layer: String, channels: usize, field: usize, proxy: bool) {
    let per_channel = if proxy { 4 } else { 2 };
    let elements = (channels * field * field) as u64;
    rows.push(CostRow {
        layer,
        kind: LayerKind::Norm,
        params: (per_channel * channels) as u64,
        flops: if proxy { 2 * elements } else { elements },
    });
}

fn conv_row(rows: &mut Vec<CostRow>, layer: String, spec: &ConvSpec) {
    rows.push(CostRow {
        layer,
        kind: LayerKind::Conv,
        params: spec.param_count() as u64,
        flops: spec.macs(),
    });
}

pub fn count_plan(plan: &ModelPlan, resolution: usize) -> Result<CostReport> {
    let convs = plan.convolutions(1, resolution)?;
    let proxy = plan.norm.proxy;
    let mut rows = Vec::new();
    let mut convs = convs.into_iter();
    let mut next_conv = |rows: &mut Vec<CostRow>| {
        let (name, spec) = convs.next().expect("conv listing matches the plan");
        conv_row(rows, name, &spec);
        spec
    };

    let stem = next_conv(&mut rows);
    let mut field = stem.output_extent(stem.field);
    norm_row(&mut rows, "stem.norm".into(), plan.stem_channels, field, proxy);
    for b in &plan.blocks {
        let i = b.index;
        if b.expand {
            next_conv(&mut rows);
            norm_row(&mut rows, format!("blocks.{i}.expand.norm"), b.expanded_channels, field, proxy);
        }
        let spatial = next_conv(&mut rows);
        field = spatial.output_extent(field);
        norm_row(&mut rows, format!("blocks.{i}.spatial.norm"), b.expanded_channels, field, proxy);
        if b.se_channels > 0 {
            let (c, r) = (b.expanded_channels as u64, b.se_channels as u64);
            let elements = c * (field * field) as u64;
            rows.push(CostRow {
                layer: format!("blocks.{i}.se"),
                kind: LayerKind::Se,
                params: 2 * c * r + r + c,
                flops: 2 * elements + 2 * c * r,
            });
        }
        next_conv(&mut rows);
        norm_row(&mut rows, format!("blocks.{i}.project.norm"), b.out_channels, field, false);
    }
    next_conv(&mut rows);
    norm_row(&mut rows, "head.norm".into(), plan.head_channels, field, proxy);
    let (c, k) = (plan.head_channels as u64, plan.num_classes as u64);
    rows.push(CostRow {
        layer: "pool".into(),
        kind: LayerKind::Pool,
        params: 0,
        flops: c * (field * field) as u64,
    });
    rows.push(CostRow {
        layer: "classifier".into(),
        kind: LayerKind::Dense,
        params: c * k + k,
        flops: c * k,
    });
    Ok(CostReport {
        resolution,
        params: rows.iter().map(|r| r.params).sum(),
        flops: rows.iter().map(|r| r.flops).sum(),
        rows,
    })
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,type,params,flops\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.layer, r.kind.as_str(), r.params, r.flops).unwrap();
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "resolution {}: params {:.2}M ({}), flops {:.3}B ({})",
            self.resolution,
            self.params as f64 / 1e6,
            self.params,
            self.flops as f64 / 1e9,
            self.flops
        )
    }
}
