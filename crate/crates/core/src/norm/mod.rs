//! Normalization layers: batch norm, the batch-independent family (layer,
//! group and instance norm) and proxy-normalized activations.
//!
//! A [`NormLayer`] maps unnormalized pre-activations `X` to normalized `Y`,
//! then applies the per-channel affine transform and the nonlinearity φ to
//! produce `Z`. With a proxy attached, `φ(γ·Y + β)` is additionally centred
//! and scaled by the mean and variance of `φ(γ·Ỹ + β)` for the Gaussian proxy
//! `Ỹ ~ N(β̃, (1 + γ̃)²)`, so nothing in the activation step depends on other
//! batch elements.

mod quadrature;

pub use quadrature::{gauss_legendre, standard_normal_pdf, QuadratureRule, SPLIT_RANGE};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::tensor::{channel_moments, sample_moments, Moments, SampleAxes, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_EPSILON_TILDE: f64 = 3e-2;
pub const DEFAULT_GROUPS: usize = 4;
pub const DEFAULT_QUADRATURE_ORDER: usize = 30;
/// Weight kept by the batch-norm running statistics at each update.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NormMethod {
    Batch,
    Layer,
    Group(usize),
    Instance,
}

impl NormMethod {
    pub fn is_batch_independent(self) -> bool {
        !matches!(self, NormMethod::Batch)
    }

    fn sample_axes(self) -> Option<SampleAxes> {
        match self {
            NormMethod::Batch => None,
            NormMethod::Layer => Some(SampleAxes::Sample),
            NormMethod::Group(g) => Some(SampleAxes::Group(g)),
            NormMethod::Instance => Some(SampleAxes::Channel),
        }
    }
}

impl fmt::Display for NormMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormMethod::Batch => f.write_str("bn"),
            NormMethod::Layer => f.write_str("ln"),
            NormMethod::Group(g) => write!(f, "gn:{g}"),
            NormMethod::Instance => f.write_str("in"),
        }
    }
}

impl TryFrom<String> for NormMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NormMethod> for String {
    fn from(m: NormMethod) -> String {
        m.to_string()
    }
}

impl FromStr for NormMethod {
    type Err = Error;

    /// `bn`, `ln`, `in`, `gn` (four groups) or `gn:<groups>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bn" => Ok(NormMethod::Batch),
            "ln" => Ok(NormMethod::Layer),
            "in" => Ok(NormMethod::Instance),
            "gn" => Ok(NormMethod::Group(DEFAULT_GROUPS)),
            _ => match s.strip_prefix("gn:").map(str::parse::<usize>) {
                Some(Ok(g)) if g > 0 => Ok(NormMethod::Group(g)),
                _ => Err(Error::invalid(format!("unknown normalization `{s}`"))),
            },
        }
    }
}

/// Normalization method, stability constant and per-channel affine parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub method: NormMethod,
    pub epsilon: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NormSpec {
    pub fn new(method: NormMethod, channels: usize) -> Self {
        NormSpec {
            method,
            epsilon: DEFAULT_EPSILON,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `epsilon == 0` is accepted so exact-identity cases can be checked;
    /// inputs with a zero-variance reduction set then produce non-finite output.
    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.gamma.len() != channels || self.beta.len() != channels {
            return Err(Error::shape(format!(
                "affine parameters have {}/{} entries for {channels} channels",
                self.gamma.len(),
                self.beta.len()
            )));
        }
        if let NormMethod::Group(g) = self.method {
            SampleAxes::Group(g).channels_per_set(channels)?;
        }
        Ok(())
    }
}

/// Per-channel proxy parameters β̃, γ̃ and the proxy stability constant ε̃.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyParams {
    pub beta_tilde: Vec<f64>,
    pub gamma_tilde: Vec<f64>,
    pub epsilon_tilde: f64,
    pub activation: Activation,
}

impl ProxyParams {
    /// Proxy initialized to the standard normal.
    pub fn new(channels: usize, activation: Activation) -> Self {
        ProxyParams {
            beta_tilde: vec![0.0; channels],
            gamma_tilde: vec![0.0; channels],
            epsilon_tilde: DEFAULT_EPSILON_TILDE,
            activation,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(self.epsilon_tilde >= 0.0 && self.epsilon_tilde.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon_tilde {} must be >= 0",
                self.epsilon_tilde
            )));
        }
        if self.beta_tilde.len() != channels || self.gamma_tilde.len() != channels {
            return Err(Error::shape(format!(
                "proxy parameters have {}/{} entries for {channels} channels",
                self.beta_tilde.len(),
                self.gamma_tilde.len()
            )));
        }
        if let Some(c) = self.gamma_tilde.iter().position(|&g| 1.0 + g == 0.0) {
            return Err(Error::invalid(format!(
                "gamma_tilde[{c}] = -1 gives a degenerate proxy"
            )));
        }
        Ok(())
    }
}

/// Mean and variance of `φ(γ·Ỹ + β)` and their partial derivatives with
/// respect to `[γ, β, β̃, γ̃]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyMoments {
    pub mean: f64,
    pub var: f64,
    pub d_mean: [f64; 4],
    pub d_var: [f64; 4],
}

/// Proxy moments of one channel, evaluated with `rule`. Activations with a
/// kink switch to a panel rule split at the kink's location in proxy space.
pub fn channel_proxy_moments(
    activation: Activation,
    gamma: f64,
    beta: f64,
    beta_tilde: f64,
    gamma_tilde: f64,
    rule: &QuadratureRule,
) -> Result<ProxyMoments> {
    if rule.order() < 2 {
        return Err(Error::invalid("proxy moments need a quadrature order of at least 2"));
    }
    let scale = 1.0 + gamma_tilde;
    if scale == 0.0 {
        return Err(Error::invalid("gamma_tilde = -1 gives a degenerate proxy"));
    }
    let split;
    let rule = match activation.kink() {
        Some(k) if gamma != 0.0 => {
            split = rule.split_at(((k - beta) / gamma - beta_tilde) / scale);
            &split
        }
        _ => rule,
    };

    let nodes = rule.nodes();
    let weights = rule.weights();
    let mut values = Vec::with_capacity(nodes.len());
    let mut mean = 0.0;
    let mut d_mean = [0.0; 4];
    for (&xi, &w) in nodes.iter().zip(weights) {
        let proxy = beta_tilde + scale * xi;
        let s = gamma * proxy + beta;
        let u = activation.apply(s);
        let du = activation.derivative(s);
        // ∂s/∂[γ, β, β̃, γ̃]
        let ds = [proxy, 1.0, gamma, gamma * xi];
        mean += w * u;
        for k in 0..4 {
            d_mean[k] += w * du * ds[k];
        }
        values.push((u, du, ds));
    }
    let mut var = 0.0;
    let mut d_var = [0.0; 4];
    let mut centred_weight = 0.0;
    for (&w, &(u, du, ds)) in weights.iter().zip(&values) {
        let c = u - mean;
        var += w * c * c;
        centred_weight += w * c;
        for k in 0..4 {
            d_var[k] += 2.0 * w * c * du * ds[k];
        }
    }
    for k in 0..4 {
        d_var[k] -= 2.0 * centred_weight * d_mean[k];
    }
    Ok(ProxyMoments {
        mean,
        var,
        d_mean,
        d_var,
    })
}

/// Proxy moments of every channel, `E` and `Var` of `φ(γ_c·Ỹ_c + β_c)`.
pub fn proxy_moments(
    params: &ProxyParams,
    gamma: &[f64],
    beta: &[f64],
    rule: &QuadratureRule,
) -> Result<Vec<ProxyMoments>> {
    params.validate(gamma.len())?;
    if beta.len() != gamma.len() {
        return Err(Error::shape("gamma and beta lengths differ"));
    }
    (0..gamma.len())
        .map(|c| {
            channel_proxy_moments(
                params.activation,
                gamma[c],
                beta[c],
                params.beta_tilde[c],
                params.gamma_tilde[c],
                rule,
            )
        })
        .collect()
}

/// Maps a (sample, channel) plane to its reduction set.
#[derive(Debug, Clone, Copy)]
struct SetLayout {
    method: NormMethod,
    channels: usize,
    per: usize,
}

impl SetLayout {
    fn new(method: NormMethod, channels: usize) -> Result<Self> {
        let per = match method.sample_axes() {
            Some(axes) => axes.channels_per_set(channels)?,
            None => 1,
        };
        Ok(SetLayout {
            method,
            channels,
            per,
        })
    }

    #[inline]
    fn set(&self, b: usize, c: usize) -> usize {
        match self.method {
            NormMethod::Batch => c,
            _ => b * (self.channels / self.per) + c / self.per,
        }
    }

    fn count(&self, batch: usize) -> usize {
        match self.method {
            NormMethod::Batch => self.channels,
            _ => batch * (self.channels / self.per),
        }
    }
}

fn moments_for(x: &Tensor, method: NormMethod) -> Result<Moments> {
    match method.sample_axes() {
        None => channel_moments(x),
        Some(axes) => sample_moments(x, axes),
    }
}

fn normalize(x: &Tensor, layout: &SetLayout, mean: &[f64], inv_std: &[f64]) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let mut y = x.clone();
    let data = y.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let s = layout.set(b, ch);
            let (m, r) = (mean[s], inv_std[s]);
            let base = (b * c + ch) * hw;
            for v in &mut data[base..base + hw] {
                *v = (*v - m) * r;
            }
        }
    }
    Ok(y)
}

/// Batch normalization followed by the affine transform and φ; returns `(Y, Z)`.
pub fn bn_forward(x: &Tensor, spec: &NormSpec, activation: Activation) -> Result<(Tensor, Tensor)> {
    if spec.method != NormMethod::Batch {
        return Err(Error::invalid(format!("bn_forward called with {}", spec.method)));
    }
    let layer = NormLayer::from_parts(spec.clone(), activation, None)?;
    let (z, cache) = layer.forward(x, true)?;
    Ok((cache.y, z))
}

/// Per-sample normalization (layer, group or instance norm); returns `Y`.
pub fn bi_norm_forward(x: &Tensor, spec: &NormSpec) -> Result<Tensor> {
    if !spec.method.is_batch_independent() {
        return Err(Error::invalid("bi_norm_forward needs ln, gn or in"));
    }
    let [_, c, _, _] = x.dims4()?;
    spec.validate(c)?;
    let layout = SetLayout::new(spec.method, c)?;
    let m = moments_for(x, spec.method)?;
    let inv_std: Vec<f64> = m.var.iter().map(|v| 1.0 / (v + spec.epsilon).sqrt()).collect();
    normalize(x, &layout, &m.mean, &inv_std)
}

/// Proxy-normalized activation of already normalized `y`.
pub fn pn_activation_forward(
    y: &Tensor,
    spec: &NormSpec,
    params: &ProxyParams,
    rule: &QuadratureRule,
) -> Result<Tensor> {
    let [_, c, _, _] = y.dims4()?;
    spec.validate(c)?;
    let moments = proxy_moments(params, &spec.gamma, &spec.beta, rule)?;
    Ok(affine_activation(y, spec, params.activation, Some((params, &moments))))
}

fn affine_activation(
    y: &Tensor,
    spec: &NormSpec,
    activation: Activation,
    proxy: Option<(&ProxyParams, &[ProxyMoments])>,
) -> Tensor {
    let [n, c, h, w] = [y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]];
    let hw = h * w;
    let mut z = y.clone();
    let data = z.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let (g, bt) = (spec.gamma[ch], spec.beta[ch]);
            let (shift, scale) = match proxy {
                Some((p, m)) => (m[ch].mean, 1.0 / (m[ch].var + p.epsilon_tilde).sqrt()),
                None => (0.0, 1.0),
            };
            let base = (b * c + ch) * hw;
            for v in &mut data[base..base + hw] {
                let u = activation.apply(g * *v + bt);
                *v = if proxy.is_some() { (u - shift) * scale } else { u };
            }
        }
    }
    z
}

/// Exponential moving averages of batch-norm statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// State saved by [`NormLayer::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub y: Tensor,
    inv_std: Vec<f64>,
    stats_fixed: bool,
    moments: Vec<ProxyMoments>,
    batch_stats: Option<Moments>,
}

#[derive(Debug, Clone)]
pub struct NormGrads {
    pub x: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    /// Empty unless the layer carries a proxy.
    pub beta_tilde: Vec<f64>,
    pub gamma_tilde: Vec<f64>,
}

/// Normalization, affine transform, nonlinearity and optional proxy
/// normalization of the activation.
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub spec: NormSpec,
    pub activation: Activation,
    pub proxy: Option<ProxyParams>,
    pub running: Option<RunningStats>,
    pub rule: QuadratureRule,
}

impl NormLayer {
    pub fn new(method: NormMethod, channels: usize, activation: Activation, proxy: bool) -> Result<Self> {
        let proxy = proxy.then(|| ProxyParams::new(channels, activation));
        Self::from_parts(NormSpec::new(method, channels), activation, proxy)
    }

    pub fn from_parts(spec: NormSpec, activation: Activation, proxy: Option<ProxyParams>) -> Result<Self> {
        let c = spec.channels();
        spec.validate(c)?;
        if let Some(p) = &proxy {
            p.validate(c)?;
            if p.activation != activation {
                return Err(Error::invalid("proxy activation differs from the layer activation"));
            }
        }
        let running = (spec.method == NormMethod::Batch).then(|| RunningStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        Ok(NormLayer {
            spec,
            activation,
            proxy,
            running,
            rule: QuadratureRule::gauss_hermite(DEFAULT_QUADRATURE_ORDER)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.spec.channels()
    }

    /// `training` only matters for batch norm, which otherwise normalizes
    /// with its running statistics.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<(Tensor, NormCache)> {
        let [_, c, _, _] = x.dims4()?;
        self.spec.validate(c)?;
        let layout = SetLayout::new(self.spec.method, c)?;
        let eps = self.spec.epsilon;
        let (mean, var, stats_fixed, batch_stats) = match (&self.running, training) {
            (Some(r), false) => (r.mean.clone(), r.var.clone(), true, None),
            _ => {
                let m = moments_for(x, self.spec.method)?;
                let batch = (self.spec.method == NormMethod::Batch).then(|| m.clone());
                (m.mean, m.var, false, batch)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = normalize(x, &layout, &mean, &inv_std)?;
        let moments = match &self.proxy {
            Some(p) => proxy_moments(p, &self.spec.gamma, &self.spec.beta, &self.rule)?,
            None => Vec::new(),
        };
        let z = affine_activation(
            &y,
            &self.spec,
            self.activation,
            self.proxy.as_ref().map(|p| (p, moments.as_slice())),
        );
        Ok((
            z,
            NormCache {
                y,
                inv_std,
                stats_fixed,
                moments,
                batch_stats,
            },
        ))
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running averages (batch norm only).
    pub fn update_running(&mut self, cache: &NormCache) {
        if let (Some(r), Some(b)) = (&mut self.running, &cache.batch_stats) {
            for c in 0..r.mean.len() {
                r.mean[c] = BN_MOMENTUM * r.mean[c] + (1.0 - BN_MOMENTUM) * b.mean[c];
                r.var[c] = BN_MOMENTUM * r.var[c] + (1.0 - BN_MOMENTUM) * b.var[c];
            }
        }
    }

    pub fn backward(&self, cache: &NormCache, grad_z: &Tensor) -> Result<NormGrads> {
        let y = &cache.y;
        grad_z.expect_same_shape(y)?;
        let [n, c, h, w] = y.dims4()?;
        if c != self.channels() {
            return Err(Error::shape("cached state does not match this layer"));
        }
        let hw = h * w;
        let yd = y.data();
        let gz = grad_z.data();
        let act = self.activation;
        let (gamma, beta) = (&self.spec.gamma, &self.spec.beta);

        // Proxy scale factors and reductions of the upstream gradient.
        let mut scale = vec![1.0; c];
        let mut sum_dz = vec![0.0; c];
        let mut sum_dz_centred = vec![0.0; c];
        if let Some(p) = &self.proxy {
            for ch in 0..c {
                scale[ch] = 1.0 / (cache.moments[ch].var + p.epsilon_tilde).sqrt();
            }
        }

        let mut grad_y = Tensor::zeros_like(y);
        let gy = grad_y.data_mut();
        let mut d_gamma = vec![0.0; c];
        let mut d_beta = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (g, bt) = (gamma[ch], beta[ch]);
                for i in base..base + hw {
                    let t = g * yd[i] + bt;
                    let mut du = gz[i];
                    if self.proxy.is_some() {
                        let u = act.apply(t);
                        sum_dz[ch] += gz[i];
                        sum_dz_centred[ch] += gz[i] * (u - cache.moments[ch].mean);
                        du *= scale[ch];
                    }
                    let dt = du * act.derivative(t);
                    d_gamma[ch] += dt * yd[i];
                    d_beta[ch] += dt;
                    gy[i] = dt * g;
                }
            }
        }

        let mut d_beta_tilde = Vec::new();
        let mut d_gamma_tilde = Vec::new();
        if self.proxy.is_some() {
            d_beta_tilde = vec![0.0; c];
            d_gamma_tilde = vec![0.0; c];
            for ch in 0..c {
                let m = &cache.moments[ch];
                let d_mean = -scale[ch] * sum_dz[ch];
                let d_var = -0.5 * scale[ch].powi(3) * sum_dz_centred[ch];
                let total = |k: usize| d_mean * m.d_mean[k] + d_var * m.d_var[k];
                d_gamma[ch] += total(0);
                d_beta[ch] += total(1);
                d_beta_tilde[ch] = total(2);
                d_gamma_tilde[ch] = total(3);
            }
        }

        let layout = SetLayout::new(self.spec.method, c)?;
        let grad_x = if cache.stats_fixed {
            normalize(&grad_y, &layout, &vec![0.0; cache.inv_std.len()], &cache.inv_std)?
        } else {
            let sets = layout.count(n);
            let mut mean_dy = vec![0.0; sets];
            let mut mean_dy_y = vec![0.0; sets];
            let mut counts = vec![0usize; sets];
            for b in 0..n {
                for ch in 0..c {
                    let s = layout.set(b, ch);
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        mean_dy[s] += gy[i];
                        mean_dy_y[s] += gy[i] * yd[i];
                    }
                    counts[s] += hw;
                }
            }
            for s in 0..sets {
                mean_dy[s] /= counts[s] as f64;
                mean_dy_y[s] /= counts[s] as f64;
            }
            let mut gx = Tensor::zeros_like(y);
            let gxd = gx.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let s = layout.set(b, ch);
                    let r = cache.inv_std[s];
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        gxd[i] = r * (gy[i] - mean_dy[s] - yd[i] * mean_dy_y[s]);
                    }
                }
            }
            gx
        };

        Ok(NormGrads {
            x: grad_x,
            gamma: d_gamma,
            beta: d_beta,
            beta_tilde: d_beta_tilde,
            gamma_tilde: d_gamma_tilde,
        })
    }
}
