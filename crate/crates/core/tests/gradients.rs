mod common;

use common::*;
use effnet::activation::Activation;
use effnet::model::ModelConfig;
use effnet::norm::NormMethod;

const INSTANCES: u64 = 20;
const LAYER_TOL: f64 = 1e-6;
const MODEL_TOL: f64 = 1e-5;

fn assert_all(label: &str, checks: impl Iterator<Item = Check>) {
    let checks: Vec<Check> = checks.collect();
    let max = checks.iter().map(|c| c.error).fold(0.0, f64::max);
    println!("{label}: {} instances, max relative error {max:.2e}", checks.len());
    for c in checks {
        assert!(c.error <= LAYER_TOL, "{label}: {} has relative error {:e}", c.label, c.error);
    }
}

#[test]
fn convolutions() {
    for kind in [ConvKind::Depthwise, ConvKind::Grouped, ConvKind::Dense] {
        assert_all("conv", (0..INSTANCES).map(|s| check_conv(s, kind)));
    }
}

#[test]
fn normalizations() {
    for method in [NormMethod::Batch, NormMethod::Layer, NormMethod::Group(2), NormMethod::Instance] {
        assert_all("norm", (0..INSTANCES).map(|s| check_norm(s, method, Activation::Swish, false)));
    }
}

#[test]
fn proxy_normalized_activations() {
    for act in [Activation::Swish, Activation::Relu] {
        for method in [NormMethod::Layer, NormMethod::Group(2), NormMethod::Instance] {
            assert_all("proxy", (0..INSTANCES).map(|s| check_norm(100 + s, method, act, true)));
        }
    }
}

#[test]
fn squeeze_excite_and_classifier() {
    assert_all("se", (0..INSTANCES).map(check_se));
    assert_all("dense", (0..INSTANCES).map(check_dense));
}

#[test]
fn tiny_model_end_to_end() {
    for cfg in [
        ModelConfig::tiny(4, 4, 3),
        ModelConfig::tiny(1, 4, 3).with_norm(NormMethod::Layer, true),
        ModelConfig::tiny(4, 2, 3).with_norm(NormMethod::Batch, false),
    ] {
        let c = check_model(&cfg, 7, 40);
        println!("{}: relative error {:.2e}", c.label, c.error);
        assert!(c.error <= MODEL_TOL, "{} has relative error {:e}", c.label, c.error);
    }
}
