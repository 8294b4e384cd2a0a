use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Pixel rectangle `[top, top + height) × [left, left + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.top + self.height > h || self.left + self.width > w {
            return Err(Error::invalid(format!(
                "box {self:?} exceeds a {h}×{w} image"
            )));
        }
        Ok(())
    }
}

fn mix_labels(y1: &[f64], y2: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if y1.len() != y2.len() {
        return Err(Error::shape("label distributions differ in length"));
    }
    Ok(y1.iter().zip(y2).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect())
}

/// `λ·(x1, y1) + (1 − λ)·(x2, y2)`.
pub fn mixup(x1: &Tensor, y1: &[f64], x2: &Tensor, y2: &[f64], lambda: f64) -> Result<(Tensor, Vec<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("mixup weight {lambda} outside [0, 1]")));
    }
    let x = x1.zip_map(x2, |a, b| lambda * a + (1.0 - lambda) * b)?;
    Ok((x, mix_labels(y1, y2, lambda)?))
}

/// Pastes `box` from `x2` into `x1`; the label weight of sample 2 is the
/// pasted fraction of the image. Images are `[..., H, W]`.
pub fn cutmix(x1: &Tensor, y1: &[f64], x2: &Tensor, y2: &[f64], cut: CutBox) -> Result<(Tensor, Vec<f64>)> {
    x1.expect_same_shape(x2)?;
    let rank = x1.rank();
    if rank < 2 {
        return Err(Error::shape("cutmix needs images with spatial axes"));
    }
    let (h, w) = (x1.shape()[rank - 2], x1.shape()[rank - 1]);
    cut.validate(h, w)?;
    let mut x = x1.clone();
    let planes = x.len() / (h * w);
    let dst = x.data_mut();
    for p in 0..planes {
        for i in cut.top..cut.top + cut.height {
            let row = p * h * w + i * w;
            dst[row + cut.left..row + cut.left + cut.width]
                .copy_from_slice(&x2.data()[row + cut.left..row + cut.left + cut.width]);
        }
    }
    let pasted = cut.area() as f64 / (h * w) as f64;
    Ok((x, mix_labels(y1, y2, 1.0 - pasted)?))
}

/// Box of side `√(1 − λ)` of the image around a uniform centre, clipped to
/// the image.
pub fn sample_box(h: usize, w: usize, lambda: f64, rng: &mut Rng) -> CutBox {
    let r = (1.0 - lambda).max(0.0).sqrt();
    let (ch, cw) = ((h as f64 * r).round() as usize, (w as f64 * r).round() as usize);
    let (cy, cx) = (rng.below(h), rng.below(w));
    let top = cy.saturating_sub(ch / 2);
    let left = cx.saturating_sub(cw / 2);
    let bottom = (cy + ch - ch / 2).min(h);
    let right = (cx + cw - cw / 2).min(w);
    CutBox {
        top,
        left,
        height: bottom - top,
        width: right - left,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mix {
    Mixup,
    CutMix,
}

/// Mixes every sample of a batch with a partner from a random permutation,
/// choosing Mixup or CutMix uniformly (or whichever has a positive
/// strength) and drawing λ from Beta(α, α). Returns the batch unchanged
/// when both strengths are zero.
pub fn augment_batch(
    x: &Tensor,
    targets: &Tensor,
    mixup_alpha: f64,
    cutmix_alpha: f64,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor, Option<Mix>)> {
    let kind = match (mixup_alpha > 0.0, cutmix_alpha > 0.0) {
        (false, false) => return Ok((x.clone(), targets.clone(), None)),
        (true, false) => Mix::Mixup,
        (false, true) => Mix::CutMix,
        (true, true) => {
            if rng.below(2) == 0 {
                Mix::Mixup
            } else {
                Mix::CutMix
            }
        }
    };
    let [n, _, h, w] = x.dims4()?;
    let alpha = if kind == Mix::Mixup { mixup_alpha } else { cutmix_alpha };
    let lambda = rng.beta(alpha);
    let mut partner: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut partner);
    let cut = (kind == Mix::CutMix).then(|| sample_box(h, w, lambda, rng));
    let k = targets.shape()[1];
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n * k);
    for (i, &j) in partner.iter().enumerate() {
        let a = x.select_batch(&[i])?;
        let b = x.select_batch(&[j])?;
        let (ya, yb) = (targets.batch_row(i), targets.batch_row(j));
        let (m, y) = match cut {
            None => mixup(&a, ya, &b, yb, lambda)?,
            Some(c) => cutmix(&a, ya, &b, yb, c)?,
        };
        xs.push(m);
        ys.extend(y);
    }
    let refs: Vec<&Tensor> = xs.iter().collect();
    Ok((Tensor::concat_batch(&refs)?, Tensor::new(vec![n, k], ys)?, Some(kind)))
}
