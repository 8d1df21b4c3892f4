//! Datasets: IDX files, manifests, synthetic generators and benchmark shape
//! lists.

pub mod idx;
pub mod shapes;
pub mod synthetic;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::{DType, Error, Result, Tensor};

pub use idx::{load_idx, parse_idx, serialize_idx};
pub use shapes::{parse_shape_list, ShapeConfig};
pub use synthetic::{synthetic_dataset, SyntheticKind};

/// Environment variable pointing at a directory with the four MNIST IDX
/// files (optionally gzipped). Without it the bundled subset is used.
pub const MNIST_DIR_ENV: &str = "BENCH500_MNIST_DIR";

/// Labeled samples. Features are f32 with the sample index leading; labels
/// are class ids stored as integral f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Tensor,
    pub labels: Tensor,
    pub classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Tensor, labels: Tensor, classes: usize) -> Result<Self> {
        let n = *features.shape().first().unwrap_or(&0);
        if labels.shape() != [n] {
            return Err(DataError::Mismatch(format!(
                "{n} samples but labels of shape {:?}",
                labels.shape()
            ))
            .into());
        }
        if let Some(bad) = labels
            .to_f64_vec()
            .into_iter()
            .find(|&l| l.fract() != 0.0 || l < 0.0 || l >= classes as f64)
        {
            return Err(DataError::Mismatch(format!("label {bad} outside [0, {classes})")).into());
        }
        Ok(Dataset { name: name.into(), features, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels.get_f64(i) as usize
    }

    /// Features and labels of the given samples, in `dtype`.
    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<(Tensor, Tensor)> {
        let x = self.features.gather_rows(indices)?;
        let y = self.labels.gather_rows(indices)?;
        Ok((cast_if(x, dtype), cast_if(y, dtype)))
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for i in 0..self.len() {
            c[self.label(i)] += 1;
        }
        c
    }

    /// Contiguous shard `rank` of `parts`; shard sizes differ by at most one.
    pub fn partition(&self, rank: usize, parts: usize) -> Result<Dataset> {
        if parts == 0 || rank >= parts {
            return Err(Error::InvalidArgument(format!("shard {rank} of {parts}")));
        }
        let n = self.len();
        let start = rank * n / parts;
        let end = (rank + 1) * n / parts;
        Ok(Dataset {
            name: format!("{}[{rank}/{parts}]", self.name),
            features: self.features.slice_rows(start, end - start)?,
            labels: self.labels.slice_rows(start, end - start)?,
            classes: self.classes,
        })
    }
}

fn cast_if(t: Tensor, dtype: DType) -> Tensor {
    if t.dtype() == dtype {
        t
    } else {
        t.cast(dtype)
    }
}

/// `{name, images_path, labels_path, classes}` plus an optional held-out
/// split. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub images_path: PathBuf,
    pub labels_path: PathBuf,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels_path: Option<PathBuf>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<(Manifest, PathBuf)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display(), e))?;
        let m: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
        if m.classes == 0 {
            return Err(DataError::Manifest("classes must be positive".into()).into());
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }

    pub fn open(path: &Path) -> Result<(Dataset, Option<Dataset>)> {
        let (m, base) = Manifest::load(path)?;
        let train = load_labeled(&m.name, &base.join(&m.images_path), &base.join(&m.labels_path), m.classes)?;
        let test = match (&m.test_images_path, &m.test_labels_path) {
            (Some(i), Some(l)) => Some(load_labeled(&format!("{}-test", m.name), &base.join(i), &base.join(l), m.classes)?),
            (None, None) => None,
            _ => return Err(DataError::Manifest("test_images_path and test_labels_path go together".into()).into()),
        };
        Ok((train, test))
    }
}

/// Loads an image/label IDX pair. Images `[n, ...]` keep their extents.
pub fn load_labeled(name: &str, images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let x = load_idx(images)?;
    let y = load_idx(labels)?;
    if x.shape().first() != y.shape().first() {
        return Err(DataError::Mismatch(format!(
            "{} has {:?} images, {} has {:?} labels",
            images.display(),
            x.shape().first(),
            labels.display(),
            y.shape().first()
        ))
        .into());
    }
    Dataset::new(name, x, y, classes)
}

fn first_existing(dir: &Path, stem: &str) -> PathBuf {
    let plain = dir.join(stem);
    if plain.exists() {
        plain
    } else {
        dir.join(format!("{stem}.gz"))
    }
}

/// Directory of the bundled 10k-digit MNIST subset.
pub fn bundled_mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset")
}

/// `BENCH500_MNIST_DIR` if set, else the bundled subset.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from).unwrap_or_else(bundled_mnist_dir)
}

/// Train and test splits from a directory holding the standard file names.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_labeled(
        "mnist-train",
        &first_existing(dir, "train-images-idx3-ubyte"),
        &first_existing(dir, "train-labels-idx1-ubyte"),
        10,
    )?;
    let test = load_labeled(
        "mnist-test",
        &first_existing(dir, "t10k-images-idx3-ubyte"),
        &first_existing(dir, "t10k-labels-idx1-ubyte"),
        10,
    )?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_subset_loads() {
        let (train, test) = load_mnist(&bundled_mnist_dir()).unwrap();
        assert_eq!(train.features.shape(), &[9003, 28, 28]);
        assert_eq!(test.features.shape(), &[997, 28, 28]);
        assert!(train.class_counts().iter().all(|&c| c > 700));
        let px = train.features.data::<f32>().unwrap();
        assert!(px.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_bad_labels() {
        let x = Tensor::zeros(DType::F32, [2, 3]);
        let y = Tensor::from_vec([2], vec![0.0f32, 4.0]).unwrap();
        assert!(Dataset::new("d", x.clone(), y, 4).is_err());
        let y = Tensor::from_vec([3], vec![0.0f32, 1.0, 1.0]).unwrap();
        assert!(Dataset::new("d", x, y, 4).is_err());
    }

    #[test]
    fn partition_covers_everything() {
        let x = Tensor::from_vec([7, 1], (0..7).map(|v| v as f32).collect()).unwrap();
        let y = Tensor::zeros(DType::F32, [7]);
        let d = Dataset::new("d", x, y, 1).unwrap();
        let parts: Vec<Dataset> = (0..3).map(|r| d.partition(r, 3).unwrap()).collect();
        let joined: Vec<f32> = parts.iter().flat_map(|p| p.features.data::<f32>().unwrap().to_vec()).collect();
        assert_eq!(joined, (0..7).map(|v| v as f32).collect::<Vec<_>>());
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_vec([2, 1, 2], vec![0.0f32, 1.0, 1.0, 0.0]).unwrap();
        let lab = Tensor::from_vec([2], vec![1.0f32, 0.0]).unwrap();
        std::fs::write(dir.path().join("i.idx"), serialize_idx(&img).unwrap()).unwrap();
        std::fs::write(dir.path().join("l.idx"), serialize_idx(&lab).unwrap()).unwrap();
        let m = r#"{"name": "tiny", "images_path": "i.idx", "labels_path": "l.idx", "classes": 2}"#;
        std::fs::write(dir.path().join("m.json"), m).unwrap();
        let (train, test) = Manifest::open(&dir.path().join("m.json")).unwrap();
        assert_eq!(train.features, img);
        assert!(test.is_none());
        std::fs::write(dir.path().join("bad.json"), r#"{"name": "x"}"#).unwrap();
        assert!(Manifest::open(&dir.path().join("bad.json")).is_err());
    }
}
