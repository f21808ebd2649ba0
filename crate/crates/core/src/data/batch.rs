//! Manifests and deterministic, lazily loaded mini-batches.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_sfi, resize_bilinear, DataError, NUM_LABELS};
use crate::tensor::Tensor;

/// One manifest line. `path` is relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Loads and (if needed) resizes every sample at `indices` into one batch.
    pub fn load_batch(&self, indices: &[usize], image_size: Option<usize>) -> Result<Batch, DataError> {
        let mut images = Vec::new();
        let mut labels = Vec::with_capacity(indices.len() * NUM_LABELS);
        let mut ids = Vec::with_capacity(indices.len());
        let mut shape: Option<Vec<usize>> = None;
        for &i in indices {
            let entry = &self.entries[i];
            let path = self.resolve(entry);
            let mut img = read_sfi(&path).map_err(|e| DataError::MissingSample {
                id: entry.id.clone(),
                path: path.clone(),
                source: Box::new(e),
            })?;
            if let Some(s) = image_size {
                img = resize_bilinear(&img, s, s)?;
            }
            match &shape {
                None => shape = Some(img.shape().to_vec()),
                Some(s) if s.as_slice() != img.shape() => {
                    return Err(DataError::Invalid(format!(
                        "sample `{}` is {:?}, batch is {:?}",
                        entry.id,
                        img.shape(),
                        s
                    )))
                }
                _ => {}
            }
            images.extend_from_slice(img.data());
            labels.extend(entry.labels.iter().map(|&l| l as f64));
            ids.push(entry.id.clone());
        }
        let mut shape = shape.ok_or_else(|| DataError::Invalid("empty batch".into()))?;
        shape.insert(0, indices.len());
        let invalid = |e: crate::tensor::TensorError| DataError::Invalid(e.to_string());
        Ok(Batch {
            images: Tensor::new(shape, images).map_err(invalid)?,
            labels: Tensor::new(vec![indices.len(), NUM_LABELS], labels).map_err(invalid)?,
            ids,
        })
    }
}

fn check_entry(entry: &ManifestEntry, line: usize) -> Result<(), DataError> {
    if entry.labels.len() != NUM_LABELS {
        return Err(DataError::Manifest {
            line,
            msg: format!("expected {NUM_LABELS} labels, got {}", entry.labels.len()),
        });
    }
    if entry.labels.iter().any(|&l| l > 1) {
        return Err(DataError::Manifest {
            line,
            msg: format!("labels must be 0 or 1, got {:?}", entry.labels),
        });
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| DataError::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?;
        check_entry(&entry, i + 1)?;
        entries.push(entry);
    }
    Ok(Manifest {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        entries,
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let mut out = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        check_entry(e, i + 1)?;
        serde_json::to_writer(&mut out, e).map_err(|err| DataError::Invalid(err.to_string()))?;
        out.write_all(b"\n").expect("writing to a Vec");
    }
    std::fs::write(path, out).map_err(|e| DataError::io(path, e))
}

/// Images `[B, H, W, C]`, labels `[B, 6]` and sample ids.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Tensor,
    pub ids: Vec<String>,
}

/// Iterator over one epoch. Order depends only on `(seed, epoch)`.
pub struct BatchIter<'a> {
    manifest: &'a Manifest,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
    image_size: Option<usize>,
}

impl<'a> BatchIter<'a> {
    /// Resize every sample to `size × size` on load.
    pub fn with_image_size(mut self, size: usize) -> Self {
        self.image_size = Some(size);
        self
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Loads batch `k` of this epoch without advancing the iterator.
    pub fn batch(&self, k: usize) -> Option<Result<Batch, DataError>> {
        let start = k * self.batch_size;
        if start >= self.order.len() {
            return None;
        }
        let end = (start + self.batch_size).min(self.order.len());
        Some(self.manifest.load_batch(&self.order[start..end], self.image_size))
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        let out = self.batch(self.next)?;
        self.next += 1;
        Some(out)
    }
}

/// Shuffled epoch `epoch` of `manifest`. The last batch may be short.
pub fn batch_iter(manifest: &Manifest, batch_size: usize, seed: u64, epoch: u64) -> BatchIter<'_> {
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    BatchIter {
        manifest,
        order,
        batch_size: batch_size.max(1),
        next: 0,
        image_size: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> Manifest {
        Manifest {
            root: PathBuf::new(),
            entries: (0..n)
                .map(|i| ManifestEntry {
                    id: format!("s{i}"),
                    path: format!("{i}.sfi").into(),
                    labels: vec![0; NUM_LABELS],
                })
                .collect(),
        }
    }

    #[test]
    fn order_is_a_permutation_and_reproducible() {
        let m = manifest(10);
        let a = batch_iter(&m, 3, 7, 0);
        let mut sorted = a.order().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a.order(), batch_iter(&m, 3, 7, 0).order());
        assert_ne!(a.order(), batch_iter(&m, 3, 7, 1).order());
        assert_eq!(a.num_batches(), 4);
    }

    #[test]
    fn manifest_label_checks() {
        let bad = ManifestEntry {
            id: "x".into(),
            path: "x".into(),
            labels: vec![0, 2, 0, 0, 0, 0],
        };
        assert!(check_entry(&bad, 1).is_err());
    }
}
