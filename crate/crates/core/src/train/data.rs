use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

const IMAGES_FILE: &str = "images.bin";
const LABELS_FILE: &str = "labels.bin";

/// Labelled square images, `[N, 3, R, R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let [n, c, h, w] = images.dims4()?;
        if n != labels.len() {
            return Err(Error::shape(format!("{n} images but {} labels", labels.len())));
        }
        if c != 3 || h != w {
            return Err(Error::shape(format!("images must be [N, 3, R, R], got {:?}", images.shape())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.select_batch(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Reads `images.bin` (`[N, 3, R, R]`) and `labels.bin` (`[N]`, integral
    /// values) in the tensor binary format. The class count is one more
    /// than the largest label.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let images = Tensor::load(dir.join(IMAGES_FILE))?;
        let raw = Tensor::load(dir.join(LABELS_FILE))?;
        let mut labels = Vec::with_capacity(raw.len());
        for &v in raw.data() {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Format(format!("label {v} is not a class index")));
            }
            labels.push(v as usize);
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Dataset::new(images, labels, classes)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.images.save(dir.join(IMAGES_FILE))?;
        let labels = Tensor::new(vec![self.len()], self.labels.iter().map(|&l| l as f64).collect())?;
        labels.save(dir.join(LABELS_FILE))
    }
}

/// Two-class task: one Gaussian blob on a noisy background, centred in the
/// left third of the image for class 0 and the right third for class 1.
/// Classes alternate so every prefix is balanced.
pub fn synthetic_blobs(n: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || resolution < 8 {
        return Err(Error::invalid("need at least one image of at least 8 pixels"));
    }
    let mut rng = Rng::new(seed);
    let r = resolution as f64;
    let sigma = r / 8.0;
    let mut data = Vec::with_capacity(n * 3 * resolution * resolution);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let cx = rng.uniform(0.0, r / 3.0) + if label == 1 { 2.0 * r / 3.0 } else { 0.0 };
        let cy = rng.uniform(0.0, r);
        let amplitude = rng.uniform(1.0, 2.0);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.uniform(0.5, 1.0));
        for t in tint {
            for y in 0..resolution {
                for x in 0..resolution {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let blob = amplitude * t * (-d2 / (2.0 * sigma * sigma)).exp();
                    data.push(blob + 0.3 * rng.normal());
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, 3, resolution, resolution], data)?, labels, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_seeded_and_balanced() {
        let a = synthetic_blobs(10, 16, 3).unwrap();
        assert_eq!(a, synthetic_blobs(10, 16, 3).unwrap());
        assert_ne!(a, synthetic_blobs(10, 16, 4).unwrap());
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 5);
        assert_eq!(a.resolution(), 16);
    }

    #[test]
    fn directory_round_trip() {
        let dir = std::env::temp_dir().join(format!("effnet-data-{}", std::process::id()));
        let a = synthetic_blobs(4, 8, 1).unwrap();
        a.save_dir(&dir).unwrap();
        assert_eq!(Dataset::load_dir(&dir).unwrap(), a);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rejects_inconsistent_inputs() {
        assert!(Dataset::new(Tensor::zeros(&[2, 3, 8, 8]), vec![0], 2).is_err());
        assert!(Dataset::new(Tensor::zeros(&[1, 3, 8, 8]), vec![2], 2).is_err());
        assert!(Dataset::new(Tensor::zeros(&[1, 1, 8, 8]), vec![0], 2).is_err());
    }
}
