//! Dense row-major tensors, per-axis moments and the seeded generator used
//! throughout the crate.
//!
//! 4-D tensors are laid out batch, channel, height, width. All reductions sum
//! sequentially in row-major order, so repeated calls are bit-identical.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision. `F32` rounds every stored value through `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::invalid(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor rank must be at least 1"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(format!("extent {pos} of {shape:?} is zero")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::shape(format!("element count of {shape:?} overflows")))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on an invalid shape; for shapes known to be valid by construction.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extents of a 4-D tensor as `[batch, channels, height, width]`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            s => Err(Error::shape(format!("expected a 4-D tensor, got {s:?}"))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    #[inline]
    pub fn offset4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset4(n, c, h, w)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn round_to(&mut self, precision: Precision) {
        if precision == Precision::F32 {
            self.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Copies batch rows `indices` into a new tensor, in the given order.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.shape[0];
        if indices.is_empty() {
            return Err(Error::invalid("empty batch selection"));
        }
        let row = self.data.len() / n;
        let mut data = Vec::with_capacity(row * indices.len());
        for &i in indices {
            if i >= n {
                return Err(Error::invalid(format!("batch index {i} out of range {n}")));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    /// The contiguous slice holding batch row `b`.
    pub fn batch_row(&self, b: usize) -> &[f64] {
        let row = self.data.len() / self.shape[0];
        &self.data[b * row..(b + 1) * row]
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_batch(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::new();
        shape[0] = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape, data })
    }

    /// Little-endian dump: rank (u64), extents (u64 each), then `f64` data.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for &e in &self.shape {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Tensor> {
        let mut word = [0u8; 8];
        input.read_exact(&mut word)?;
        let rank = u64::from_le_bytes(word);
        if rank == 0 || rank > 16 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            input.read_exact(&mut word)?;
            shape.push(usize::try_from(u64::from_le_bytes(word)).map_err(|_| {
                Error::Format("tensor extent does not fit in usize".into())
            })?);
        }
        let n = check_shape(&shape).map_err(|e| Error::Format(e.to_string()))?;
        let mut raw = vec![0u8; n * 8];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(8 * (1 + self.shape.len() + self.data.len()));
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let bytes = std::fs::read(path)?;
        Tensor::read_from(bytes.as_slice())
    }
}

/// Mean and biased variance for each retained index of a reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel moments over batch, height and width.
pub fn channel_moments(x: &Tensor) -> Result<Moments> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let data = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for v in &data[base..base + hw] {
                s += v;
            }
        }
        let m = s / count;
        let mut q = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for v in &data[base..base + hw] {
                let d = v - m;
                q += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    Ok(Moments { mean, var })
}

/// Per-sample reduction sets of the batch-independent normalizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleAxes {
    /// Channels and spatial positions of one sample (layer norm).
    Sample,
    /// A contiguous block of `channels / groups` channels of one sample.
    Group(usize),
    /// One channel of one sample (instance norm).
    Channel,
}

impl SampleAxes {
    /// Number of channels covered by one reduction set.
    pub fn channels_per_set(self, channels: usize) -> Result<usize> {
        match self {
            SampleAxes::Sample => Ok(channels),
            SampleAxes::Channel => Ok(1),
            SampleAxes::Group(0) => Err(Error::invalid("group count must be positive")),
            SampleAxes::Group(g) if !channels.is_multiple_of(g) => Err(Error::invalid(format!(
                "{g} groups do not divide {channels} channels"
            ))),
            SampleAxes::Group(g) => Ok(channels / g),
        }
    }
}

impl FromStr for SampleAxes {
    type Err = Error;

    /// Accepts `sample`, `channel` and `group:<n>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(SampleAxes::Sample),
            "channel" => Ok(SampleAxes::Channel),
            _ => match s.strip_prefix("group:").map(str::parse::<usize>) {
                Some(Ok(g)) if g > 0 => Ok(SampleAxes::Group(g)),
                _ => Err(Error::invalid(format!("unknown axis set `{s}`"))),
            },
        }
    }
}

/// Moments per batch element and reduction set; the result for sample `b`
/// and set `j` lives at index `b * sets + j`.
pub fn sample_moments(x: &Tensor, over: SampleAxes) -> Result<Moments> {
    let [n, c, h, w] = x.dims4()?;
    let per = over.channels_per_set(c)?;
    let sets = c / per;
    let len = per * h * w;
    let data = x.data();
    let mut mean = Vec::with_capacity(n * sets);
    let mut var = Vec::with_capacity(n * sets);
    for b in 0..n {
        for j in 0..sets {
            // channels of a set are contiguous in memory within a sample
            let start = (b * c + j * per) * h * w;
            let slice = &data[start..start + len];
            let m = slice.iter().sum::<f64>() / len as f64;
            let q = slice.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            mean.push(m);
            var.push(q / len as f64);
        }
    }
    Ok(Moments { mean, var })
}

/// Seeded ChaCha8 stream; identical seeds give identical samples everywhere.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn beta(&mut self, alpha: f64) -> f64 {
        Beta::new(alpha, alpha)
            .expect("beta parameters must be positive")
            .sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.uniform(lo, hi))
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::from_fn(shape, |_| std * self.normal())
    }
}
