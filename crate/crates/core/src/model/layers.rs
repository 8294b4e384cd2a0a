use serde::{Deserialize, Serialize};

use crate::activation::{sigmoid, Activation};
use crate::conv::{conv_backward, conv_forward, ConvCache, ConvSpec, ConvWeights};
use crate::error::{Error, Result};
use crate::norm::{NormCache, NormLayer};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Convolution kernels, squeeze-excite projections included.
    ConvWeight,
    NormGamma,
    NormBeta,
    ProxyBetaTilde,
    ProxyGammaTilde,
    Bias,
    DenseWeight,
}

impl ParamKind {
    /// Whether weight decay applies.
    pub fn decayed(self) -> bool {
        matches!(
            self,
            ParamKind::ConvWeight | ParamKind::ProxyBetaTilde | ParamKind::ProxyGammaTilde
        )
    }
}

#[derive(Debug)]
pub struct ParamView<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub value: &'a [f64],
    pub grad: &'a [f64],
}

#[derive(Debug)]
pub struct ParamViewMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

pub(crate) type Visit<'f> = &'f mut dyn FnMut(ParamView<'_>);
pub(crate) type VisitMut<'f> = &'f mut dyn FnMut(ParamViewMut<'_>);

fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

fn emit(f: Visit, prefix: &str, name: &str, kind: ParamKind, shape: &[usize], value: &[f64], grad: &[f64]) {
    f(ParamView {
        name: join(prefix, name),
        kind,
        shape: shape.to_vec(),
        value,
        grad,
    });
}

fn emit_mut(f: VisitMut, prefix: &str, name: &str, kind: ParamKind, shape: &[usize], value: &mut [f64], grad: &mut [f64]) {
    f(ParamViewMut {
        name: join(prefix, name),
        kind,
        shape: shape.to_vec(),
        value,
        grad,
    });
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Convolution with a gradient buffer. The spec's batch and field are
/// taken from each input.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weights: ConvWeights,
    pub grad: Tensor,
}

impl Conv2d {
    pub fn new(spec: ConvSpec, rng: &mut Rng) -> Self {
        let weights = ConvWeights::init(&spec, rng);
        Conv2d {
            grad: Tensor::zeros_like(&weights.weight),
            spec,
            weights,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let [n, _, h, w] = x.dims4()?;
        if h != w {
            return Err(Error::shape(format!("non-square input {h}×{w}")));
        }
        let spec = self.spec.with_input(n, h);
        let y = conv_forward(x, &self.weights, &spec)?;
        Ok((
            y,
            ConvCache {
                input: x.clone(),
                spec,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ConvCache, grad: &Tensor) -> Result<Tensor> {
        let (gx, gw) = conv_backward(grad, cache, &self.weights)?;
        self.grad.add_assign(&gw)?;
        Ok(gx)
    }

    fn params(&self, prefix: &str, f: Visit) {
        let w = &self.weights.weight;
        emit(f, prefix, "weight", ParamKind::ConvWeight, w.shape(), w.data(), self.grad.data());
    }

    fn params_mut(&mut self, prefix: &str, f: VisitMut) {
        let shape = self.weights.weight.shape().to_vec();
        emit_mut(f, prefix, "weight", ParamKind::ConvWeight, &shape, self.weights.weight.data_mut(), self.grad.data_mut());
    }
}

/// A normalization layer with gradient buffers for its affine and proxy
/// parameters.
#[derive(Debug, Clone)]
pub struct Norm {
    pub layer: NormLayer,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
    pub grad_beta_tilde: Vec<f64>,
    pub grad_gamma_tilde: Vec<f64>,
}

impl Norm {
    pub fn new(layer: NormLayer) -> Self {
        let c = layer.channels();
        let pc = if layer.proxy.is_some() { c } else { 0 };
        Norm {
            layer,
            grad_gamma: vec![0.0; c],
            grad_beta: vec![0.0; c],
            grad_beta_tilde: vec![0.0; pc],
            grad_gamma_tilde: vec![0.0; pc],
        }
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<(Tensor, NormCache)> {
        self.layer.forward(x, training)
    }

    pub fn backward(&mut self, cache: &NormCache, grad: &Tensor) -> Result<Tensor> {
        let g = self.layer.backward(cache, grad)?;
        accumulate(&mut self.grad_gamma, &g.gamma);
        accumulate(&mut self.grad_beta, &g.beta);
        accumulate(&mut self.grad_beta_tilde, &g.beta_tilde);
        accumulate(&mut self.grad_gamma_tilde, &g.gamma_tilde);
        Ok(g.x)
    }

    fn params(&self, prefix: &str, f: Visit) {
        let shape = [self.layer.channels()];
        let spec = &self.layer.spec;
        emit(f, prefix, "gamma", ParamKind::NormGamma, &shape, &spec.gamma, &self.grad_gamma);
        emit(f, prefix, "beta", ParamKind::NormBeta, &shape, &spec.beta, &self.grad_beta);
        if let Some(p) = &self.layer.proxy {
            emit(f, prefix, "beta_tilde", ParamKind::ProxyBetaTilde, &shape, &p.beta_tilde, &self.grad_beta_tilde);
            emit(f, prefix, "gamma_tilde", ParamKind::ProxyGammaTilde, &shape, &p.gamma_tilde, &self.grad_gamma_tilde);
        }
    }

    fn params_mut(&mut self, prefix: &str, f: VisitMut) {
        let shape = [self.layer.channels()];
        let spec = &mut self.layer.spec;
        emit_mut(f, prefix, "gamma", ParamKind::NormGamma, &shape, &mut spec.gamma, &mut self.grad_gamma);
        emit_mut(f, prefix, "beta", ParamKind::NormBeta, &shape, &mut spec.beta, &mut self.grad_beta);
        if let Some(p) = &mut self.layer.proxy {
            emit_mut(f, prefix, "beta_tilde", ParamKind::ProxyBetaTilde, &shape, &mut p.beta_tilde, &mut self.grad_beta_tilde);
            emit_mut(f, prefix, "gamma_tilde", ParamKind::ProxyGammaTilde, &shape, &mut p.gamma_tilde, &mut self.grad_gamma_tilde);
        }
    }
}

/// Convolution followed by normalization and activation.
#[derive(Debug, Clone)]
pub struct ConvNorm {
    pub conv: Conv2d,
    pub norm: Norm,
}

#[derive(Debug, Clone)]
pub struct ConvNormCache {
    pub conv: ConvCache,
    pub norm: NormCache,
}

impl ConvNorm {
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<(Tensor, ConvNormCache)> {
        let (y, conv) = self.conv.forward(x)?;
        let (z, norm) = self.norm.forward(&y, training)?;
        Ok((z, ConvNormCache { conv, norm }))
    }

    pub fn backward(&mut self, cache: &ConvNormCache, grad: &Tensor) -> Result<Tensor> {
        let g = self.norm.backward(&cache.norm, grad)?;
        self.conv.backward(&cache.conv, &g)
    }

    pub fn update_running(&mut self, cache: &ConvNormCache) {
        self.norm.layer.update_running(&cache.norm);
    }

    pub(crate) fn params(&self, prefix: &str, f: Visit) {
        self.conv.params(&join(prefix, "conv"), f);
        self.norm.params(&join(prefix, "norm"), f);
    }

    pub(crate) fn params_mut(&mut self, prefix: &str, f: VisitMut) {
        self.conv.params_mut(&join(prefix, "conv"), f);
        self.norm.params_mut(&join(prefix, "norm"), f);
    }
}

/// Fully connected layer on `[batch, in]` inputs.
#[derive(Debug, Clone)]
pub struct Dense {
    /// `[out, in]`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub grad_weight: Tensor,
    pub grad_bias: Vec<f64>,
}

impl Dense {
    /// Uniform initialization in `±1/√in` with zero bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let r = 1.0 / (inputs as f64).sqrt();
        Dense::from_parts(rng.uniform_tensor(&[outputs, inputs], -r, r), vec![0.0; outputs])
    }

    pub fn from_parts(weight: Tensor, bias: Vec<f64>) -> Self {
        Dense {
            grad_weight: Tensor::zeros_like(&weight),
            grad_bias: vec![0.0; bias.len()],
            weight,
            bias,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, k) = match x.shape() {
            &[n, k] if k == self.inputs() => (n, k),
            s => return Err(Error::shape(format!("dense layer expects [n, {}], got {s:?}", self.inputs()))),
        };
        let m = self.outputs();
        let w = self.weight.data();
        let xd = x.data();
        Ok(Tensor::from_fn(&[n, m], |i| {
            let (b, o) = (i / m, i % m);
            let row = &w[o * k..(o + 1) * k];
            self.bias[o] + row.iter().zip(&xd[b * k..(b + 1) * k]).map(|(a, v)| a * v).sum::<f64>()
        }))
    }

    pub fn backward(&mut self, x: &Tensor, grad: &Tensor) -> Result<Tensor> {
        let (n, k, m) = (x.shape()[0], self.inputs(), self.outputs());
        if grad.shape() != [n, m] {
            return Err(Error::shape(format!("dense gradient {:?} vs [{n}, {m}]", grad.shape())));
        }
        let (xd, gd, w) = (x.data(), grad.data(), self.weight.data());
        let gw = self.grad_weight.data_mut();
        for b in 0..n {
            for o in 0..m {
                let g = gd[b * m + o];
                self.grad_bias[o] += g;
                for i in 0..k {
                    gw[o * k + i] += g * xd[b * k + i];
                }
            }
        }
        Ok(Tensor::from_fn(&[n, k], |idx| {
            let (b, i) = (idx / k, idx % k);
            (0..m).map(|o| gd[b * m + o] * w[o * k + i]).sum()
        }))
    }

    fn params(&self, prefix: &str, kind: ParamKind, f: Visit) {
        emit(f, prefix, "weight", kind, self.weight.shape(), self.weight.data(), self.grad_weight.data());
        emit(f, prefix, "bias", ParamKind::Bias, &[self.bias.len()], &self.bias, &self.grad_bias);
    }

    fn params_mut(&mut self, prefix: &str, kind: ParamKind, f: VisitMut) {
        let shape = self.weight.shape().to_vec();
        emit_mut(f, prefix, "weight", kind, &shape, self.weight.data_mut(), self.grad_weight.data_mut());
        let b = [self.bias.len()];
        emit_mut(f, prefix, "bias", ParamKind::Bias, &b, &mut self.bias, &mut self.grad_bias);
    }

    pub(crate) fn classifier_params(&self, prefix: &str, f: Visit) {
        self.params(prefix, ParamKind::DenseWeight, f);
    }

    pub(crate) fn classifier_params_mut(&mut self, prefix: &str, f: VisitMut) {
        self.params_mut(prefix, ParamKind::DenseWeight, f);
    }
}

/// Mean over the spatial axes: `[n, c, h, w]` to `[n, c]`.
pub fn global_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let d = x.data();
    Ok(Tensor::from_fn(&[n, c], |i| d[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64))
}

pub fn global_pool_backward(grad: &Tensor, shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let g = grad.data();
    Tensor::from_fn(&[n, c, h, w], |i| g[i / hw] / hw as f64)
}

/// Squeeze-excite: pool, reduce, activate, expand, sigmoid gate.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub reduce: Dense,
    pub expand: Dense,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct SeCache {
    input: Tensor,
    pooled: Tensor,
    hidden: Tensor,
    activated: Tensor,
    gate: Tensor,
}

impl SqueezeExcite {
    /// Both projections use the convolution initialization of a 1×1 kernel.
    pub fn new(channels: usize, reduced: usize, activation: Activation, rng: &mut Rng) -> Self {
        let init = |inputs: usize, outputs: usize, rng: &mut Rng| {
            Dense::from_parts(rng.normal_tensor(&[outputs, inputs], (2.0 / outputs as f64).sqrt()), vec![0.0; outputs])
        };
        SqueezeExcite {
            reduce: init(channels, reduced, rng),
            expand: init(reduced, channels, rng),
            activation,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, SeCache)> {
        let [_, c, h, w] = x.dims4()?;
        let hw = h * w;
        let pooled = global_pool(x)?;
        let hidden = self.reduce.forward(&pooled)?;
        let activated = hidden.map(|v| self.activation.apply(v));
        let gate = self.expand.forward(&activated)?.map(sigmoid);
        let g = gate.data();
        let xd = x.data();
        let out = Tensor::from_fn(x.shape(), |i| xd[i] * g[i / hw]);
        debug_assert_eq!(gate.shape()[1], c);
        Ok((
            out,
            SeCache {
                input: x.clone(),
                pooled,
                hidden,
                activated,
                gate,
            },
        ))
    }

    pub fn backward(&mut self, cache: &SeCache, grad: &Tensor) -> Result<Tensor> {
        let x = &cache.input;
        grad.expect_same_shape(x)?;
        let shape = x.dims4()?;
        let hw = shape[2] * shape[3];
        let (xd, gd, gate) = (x.data(), grad.data(), cache.gate.data());
        let d_gate = Tensor::from_fn(cache.gate.shape(), |i| {
            let s: f64 = (i * hw..(i + 1) * hw).map(|j| gd[j] * xd[j]).sum();
            s * gate[i] * (1.0 - gate[i])
        });
        let d_act = self.expand.backward(&cache.activated, &d_gate)?;
        let d_hidden = d_act.zip_map(&cache.hidden, |g, h| g * self.activation.derivative(h))?;
        let d_pooled = self.reduce.backward(&cache.pooled, &d_hidden)?;
        let mut dx = global_pool_backward(&d_pooled, shape);
        for (i, v) in dx.data_mut().iter_mut().enumerate() {
            *v += gd[i] * gate[i / hw];
        }
        Ok(dx)
    }

    pub(crate) fn params(&self, prefix: &str, f: Visit) {
        self.reduce.params(&join(prefix, "reduce"), ParamKind::ConvWeight, f);
        self.expand.params(&join(prefix, "expand"), ParamKind::ConvWeight, f);
    }

    pub(crate) fn params_mut(&mut self, prefix: &str, f: VisitMut) {
        self.reduce.params_mut(&join(prefix, "reduce"), ParamKind::ConvWeight, f);
        self.expand.params_mut(&join(prefix, "expand"), ParamKind::ConvWeight, f);
    }
}
