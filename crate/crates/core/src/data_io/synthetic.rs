//! Deterministic synthetic datasets.

use super::Dataset;
use crate::{Error, Result, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticKind {
    /// Class `c` is normal with standard deviation `sigma` around
    /// `4·sigma·e_c`, so classes are linearly separable.
    GaussianBlobs { sigma: f64 },
    /// Every feature equals the value.
    Constant(f64),
}

/// `n` samples of `item_shape` with round-robin labels.
pub fn synthetic_dataset(n: usize, item_shape: &[usize], classes: usize, kind: SyntheticKind, seed: u64) -> Result<Dataset> {
    let dim: usize = item_shape.iter().product();
    if item_shape.is_empty() || dim == 0 || classes == 0 {
        return Err(Error::InvalidDesc(format!("synthetic item shape {item_shape:?} with {classes} classes")));
    }
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut values = Vec::with_capacity(n * dim);
    match kind {
        SyntheticKind::Constant(v) => values.resize(n * dim, v as f32),
        SyntheticKind::GaussianBlobs { sigma } => {
            if classes < 2 || dim < classes || !(sigma > 0.0) {
                return Err(Error::InvalidDesc(format!(
                    "blobs need 2 <= classes <= features and sigma > 0 (classes {classes}, features {dim}, sigma {sigma})"
                )));
            }
            let mut rng = Rng::new(seed, 0);
            for &c in &labels {
                for j in 0..dim {
                    let mean = if j == c { 4.0 * sigma } else { 0.0 };
                    values.push(rng.normal(mean, sigma) as f32);
                }
            }
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(item_shape);
    let features = Tensor::from_vec(shape, values)?;
    let labels = Tensor::from_vec([n], labels.iter().map(|&l| l as f32).collect())?;
    Dataset::new(format!("synthetic-{n}"), features, labels, classes)
}
