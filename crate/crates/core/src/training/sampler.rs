//! Minibatch samplers.
//!
//! Every sampler works in epochs of `floor(n / B)` batches; the final partial
//! batch of an epoch is dropped.

use serde::{Deserialize, Serialize};

use crate::data_io::Dataset;
use crate::error::DataError;
use crate::tensor::{Init, TensorDesc};
use crate::{DType, Error, Result, Rng, Tensor};

/// Values of generated samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticFill {
    Constant(f64),
    /// Independent draws from `[0, 1)`.
    Uniform,
}

/// Labels of generated samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticLabels {
    /// Sample `i` of an epoch gets class `i mod classes`.
    RoundRobin,
    /// Every sample gets the same class.
    Fixed(usize),
}

/// Generator standing in for a dataset of `len` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSource {
    pub item_shape: Vec<usize>,
    pub classes: usize,
    pub len: usize,
    pub fill: SyntheticFill,
    pub labels: SyntheticLabels,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Sequential,
    /// A fresh permutation per epoch from stream `epoch` of `seed`.
    Shuffle { seed: u64 },
    Synthetic(SyntheticSource),
}

#[derive(Debug, Clone)]
pub struct Sampler {
    kind: SamplerKind,
    batch: usize,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
    gen: Option<Rng>,
    /// `(rank, parts)`: yield only this slice of every global batch.
    slice: Option<(usize, usize)>,
}

impl Sampler {
    pub fn new(kind: SamplerKind, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let gen = match &kind {
            SamplerKind::Synthetic(s) => {
                if s.classes == 0 || s.len == 0 {
                    return Err(DataError::Empty.into());
                }
                if let SyntheticLabels::Fixed(c) = s.labels {
                    if c >= s.classes {
                        return Err(Error::InvalidArgument(format!("fixed label {c} outside [0, {})", s.classes)));
                    }
                }
                TensorDesc::new(DType::F32, [&[batch][..], &s.item_shape].concat())?;
                Some(Rng::new(s.seed, 0))
            }
            _ => None,
        };
        Ok(Sampler { kind, batch, epoch: 0, cursor: 0, order: Vec::new(), gen, slice: None })
    }

    pub fn sequential(batch: usize) -> Result<Self> {
        Sampler::new(SamplerKind::Sequential, batch)
    }

    pub fn shuffle(seed: u64, batch: usize) -> Result<Self> {
        Sampler::new(SamplerKind::Shuffle { seed }, batch)
    }

    /// Restricts every batch to slice `rank` of `parts` equal slices, so that
    /// `parts` workers sharing one global sample schedule each see their own
    /// part of it. The batch size must divide evenly.
    pub fn sliced(mut self, rank: usize, parts: usize) -> Result<Self> {
        if parts == 0 || rank >= parts || self.batch % parts != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot take slice {rank} of {parts} from batches of {}",
                self.batch
            )));
        }
        self.slice = Some((rank, parts));
        Ok(self)
    }

    /// Samples this sampler yields per batch.
    pub fn local_batch_size(&self) -> usize {
        self.slice.map_or(self.batch, |(_, parts)| self.batch / parts)
    }

    pub fn kind(&self) -> &SamplerKind {
        &self.kind
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Epoch of the next batch.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Samples per epoch: the dataset size, or the nominal size of a
    /// synthetic source.
    pub fn epoch_len(&self, ds: Option<&Dataset>) -> Result<usize> {
        let n = match (&self.kind, ds) {
            (SamplerKind::Synthetic(s), _) => s.len,
            (_, Some(d)) => d.len(),
            (_, None) => return Err(Error::InvalidArgument("this sampler needs a dataset".into())),
        };
        if n == 0 {
            return Err(DataError::Empty.into());
        }
        if self.batch > n {
            return Err(Error::InvalidArgument(format!("batch size {} exceeds {n} samples", self.batch)));
        }
        Ok(n)
    }

    pub fn steps_per_epoch(&self, ds: Option<&Dataset>) -> Result<usize> {
        Ok(self.epoch_len(ds)? / self.batch)
    }

    pub fn classes(&self, ds: Option<&Dataset>) -> Result<usize> {
        match (&self.kind, ds) {
            (SamplerKind::Synthetic(s), _) => Ok(s.classes),
            (_, Some(d)) => Ok(d.classes),
            (_, None) => Err(Error::InvalidArgument("this sampler needs a dataset".into())),
        }
    }

    /// Sample indices of the next batch within an epoch of `n` samples.
    pub fn next_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(DataError::Empty.into());
        }
        if self.batch > n {
            return Err(Error::InvalidArgument(format!("batch size {} exceeds {n} samples", self.batch)));
        }
        if self.cursor == 0 || self.order.len() != n {
            self.order = match &self.kind {
                SamplerKind::Shuffle { seed } => Rng::new(*seed, self.epoch).permutation(n),
                _ => (0..n).collect(),
            };
        }
        let mut start = self.cursor * self.batch;
        let mut len = self.batch;
        if let Some((rank, parts)) = self.slice {
            len /= parts;
            start += rank * len;
        }
        let out = self.order[start..start + len].to_vec();
        self.cursor += 1;
        if self.cursor == n / self.batch {
            self.cursor = 0;
            self.epoch += 1;
        }
        Ok(out)
    }

    fn synthetic_label(s: &SyntheticSource, index: usize) -> usize {
        match s.labels {
            SyntheticLabels::RoundRobin => index % s.classes,
            SyntheticLabels::Fixed(c) => c,
        }
    }

    /// Labels of the next batch, without materializing features.
    pub fn next_labels(&mut self, ds: Option<&Dataset>) -> Result<Vec<usize>> {
        let n = self.epoch_len(ds)?;
        let idx = self.next_indices(n)?;
        Ok(match (&self.kind, ds) {
            (SamplerKind::Synthetic(s), _) => idx.iter().map(|&i| Self::synthetic_label(s, i)).collect(),
            (_, Some(d)) => idx.iter().map(|&i| d.label(i)).collect(),
            (_, None) => unreachable!("epoch_len checked the dataset"),
        })
    }

    /// Next `(features, labels)` batch in `dtype`. Synthetic samplers ignore
    /// `ds`.
    pub fn sample_minibatch(&mut self, ds: Option<&Dataset>, dtype: DType) -> Result<(Tensor, Tensor)> {
        let n = self.epoch_len(ds)?;
        let idx = self.next_indices(n)?;
        match (&self.kind, ds) {
            (SamplerKind::Synthetic(s), _) => {
                let desc = TensorDesc::new(dtype, [&[idx.len()][..], &s.item_shape].concat())?;
                let x = match s.fill {
                    SyntheticFill::Constant(c) => Tensor::alloc(&desc, Init::Constant(c))?,
                    SyntheticFill::Uniform => {
                        let rng = self.gen.as_mut().expect("synthetic sampler has a generator");
                        Tensor::alloc(&desc, Init::Uniform(rng, 0.0, 1.0))?
                    }
                };
                let labels: Vec<f64> = idx.iter().map(|&i| Self::synthetic_label(s, i) as f64).collect();
                Ok((x, Tensor::from_f64_values(dtype, [idx.len()], &labels)))
            }
            (_, Some(d)) => d.batch(&idx, dtype),
            (_, None) => unreachable!("epoch_len checked the dataset"),
        }
    }
}
