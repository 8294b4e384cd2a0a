mod common;

use common::*;
use effnet::activation::Activation;
use effnet::model::ModelConfig;
use effnet::norm::NormMethod;

const METHODS: [NormMethod; 3] = [NormMethod::Layer, NormMethod::Group(2), NormMethod::Instance];

#[test]
fn batch_independent_norms() {
    for method in METHODS {
        for (act, proxy) in [(Activation::Swish, false), (Activation::Swish, true), (Activation::Relu, true)] {
            for seed in 0..5 {
                assert!(norm_batch_independent(seed, method, act, proxy), "{method} {act} proxy={proxy} seed {seed}");
            }
        }
    }
}

#[test]
fn batch_norm_depends_on_the_batch() {
    assert!(!norm_batch_independent(0, NormMethod::Batch, Activation::Swish, false));
}

#[test]
fn tiny_models_without_batch_norm() {
    assert!(model_batch_independent(&ModelConfig::tiny(4, 4, 3).with_norm(NormMethod::Layer, true), 1));
    assert!(model_batch_independent(&ModelConfig::tiny(1, 4, 3).with_norm(NormMethod::Group(4), true), 2));
    assert!(!model_batch_independent(&ModelConfig::tiny(4, 4, 3).with_norm(NormMethod::Batch, false), 3));
}
