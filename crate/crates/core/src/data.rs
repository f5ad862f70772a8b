//! Datasets: IDX (MNIST, Fashion-MNIST) and CIFAR-10 binary loaders, IDX
//! writers, subsetting and seeded mini-batching.
//!
//! IDX files start with a big-endian magic (`0x00000803` for image files,
//! `0x00000801` for label files), then one big-endian `u32` extent per
//! dimension, then raw bytes. Pixels are scaled by 1/255.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::models::InputShape;
use crate::seed::rng_for;
use crate::tensor::Array;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Class count of the IDX datasets handled here (MNIST, Fashion-MNIST).
pub const IDX_CLASSES: usize = 10;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images `[n, c, h, w]` in `[0, 1]` with integer labels below `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Array,
    labels: Vec<usize>,
    classes: usize,
    split: String,
}

impl Dataset {
    pub fn new(
        images: Array,
        labels: Vec<usize>,
        classes: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape(
                "dataset",
                format!("images must be [n, c, h, w], got {:?}", images.shape()),
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "pixel values must lie in [0, 1]".into(),
            ));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split: split.into(),
        })
    }

    pub fn images(&self) -> &Array {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> InputShape {
        let s = self.images.shape();
        InputShape {
            channels: s[1],
            height: s[2],
            width: s[3],
        }
    }

    /// The first `n` examples.
    pub fn subset(&self, n: usize) -> Result<Dataset> {
        self.check_size(n)?;
        Ok(Dataset {
            images: self.images.slice_rows(0, n)?,
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split.clone(),
        })
    }

    /// Examples `[start, start + n)`.
    pub fn range(&self, start: usize, n: usize) -> Result<Dataset> {
        self.check_size(start + n)?;
        Ok(Dataset {
            images: self.images.slice_rows(start, n)?,
            labels: self.labels[start..start + n].to_vec(),
            classes: self.classes,
            split: self.split.clone(),
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            images: self.images.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    fn check_size(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "requested {n} examples from a dataset of {}",
                self.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Array,
    pub labels: Vec<usize>,
}

/// Mini-batches over the first `n` examples in a seeded random order. The
/// batches partition the subset; the last one may be short.
pub fn subset_shuffle_batch(
    dataset: &Dataset,
    n: usize,
    seed: u64,
    batch_size: usize,
) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    dataset.check_size(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "shuffle"));
    Ok(Batches {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    /// The full visiting order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(
            self.dataset
                .batch(idx)
                .expect("indices come from the dataset"),
        )
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

fn read_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(what, "truncated header"))
}

/// Parses an IDX buffer with the expected magic; returns extents and payload.
fn parse_idx<'a>(
    bytes: &'a [u8],
    magic: u32,
    what: &'static str,
) -> Result<(Vec<usize>, &'a [u8])> {
    let found = read_u32(bytes, 0, what)?;
    if found != magic {
        return Err(Error::format(
            what,
            format!("magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|k| read_u32(bytes, 4 + 4 * k, what).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() < len {
        return Err(Error::format(
            what,
            format!("truncated: {} of {len} data bytes", payload.len()),
        ));
    }
    if payload.len() > len {
        return Err(Error::format(
            what,
            format!("{} bytes after the data", payload.len() - len),
        ));
    }
    Ok((dims, payload))
}

/// Reads an IDX image file as `[n, 1, h, w]` scaled into `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Array> {
    let bytes = fs::read(path)?;
    let (dims, payload) = parse_idx(&bytes, IDX_IMAGES_MAGIC, "IDX images")?;
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Array::new(vec![dims[0], 1, dims[1], dims[2]], data)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    let (_, payload) = parse_idx(&bytes, IDX_LABELS_MAGIC, "IDX labels")?;
    Ok(payload.iter().map(|&b| usize::from(b)).collect())
}

/// Loads a matching pair of IDX files as a 10-class dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::format(
            "IDX",
            format!("{} images but {} labels", images.shape()[0], labels.len()),
        ));
    }
    let split = images_path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| {
            if n.starts_with("t10k") {
                "test"
            } else {
                "train"
            }
        })
        .unwrap_or("train");
    Dataset::new(images, labels, IDX_CLASSES, split)
}

/// Locates `{train,t10k}-{images,labels}` in `dir`, accepting both
/// `train-images-idx3-ubyte` and `train-images.idx3-ubyte` spellings.
pub fn idx_paths(dir: &Path, split: &str) -> Result<(PathBuf, PathBuf)> {
    let prefix = match split {
        "train" => "train",
        "test" => "t10k",
        other => {
            return Err(Error::Config(format!(
                "unknown split `{other}` (expected train or test)"
            )))
        }
    };
    let find = |kind: &str, rank: u8| {
        [
            format!("{prefix}-{kind}-idx{rank}-ubyte"),
            format!("{prefix}-{kind}.idx{rank}-ubyte"),
        ]
        .into_iter()
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Config(format!("no {prefix} {kind} IDX file in {}", dir.display())))
    };
    Ok((find("images", 3)?, find("labels", 1)?))
}

pub fn load_idx_dir(dir: &Path, split: &str) -> Result<Dataset> {
    let (images, labels) = idx_paths(dir, split)?;
    load_idx(&images, &labels)
}

fn write_idx(path: &Path, magic: u32, dims: &[usize], payload: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    fs::write(path, out)?;
    Ok(())
}

/// Writes single-channel images as IDX bytes (`round(255 * v)`).
pub fn write_idx_images(path: &Path, images: &Array) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape(
            "write_idx_images",
            format!("expected [n, 1, h, w], got {s:?}"),
        ));
    }
    let payload: Vec<u8> = images
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_idx(path, IDX_IMAGES_MAGIC, &[s[0], s[2], s[3]], &payload)
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let payload = labels
        .iter()
        .map(|&y| {
            u8::try_from(y)
                .map_err(|_| Error::InvalidArgument(format!("label {y} does not fit a byte")))
        })
        .collect::<Result<Vec<u8>>>()?;
    write_idx(path, IDX_LABELS_MAGIC, &[labels.len()], &payload)
}

/// Reads CIFAR-10 binary batches (1 label byte + 3072 channel-major pixel
/// bytes per record) into one `[n, 3, 32, 32]` dataset.
pub fn load_cifar10(paths: &[PathBuf], split: &str) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                "CIFAR-10",
                format!(
                    "{}: {} bytes is not a whole number of records",
                    path.display(),
                    bytes.len()
                ),
            ));
        }
        for record in bytes.chunks(CIFAR_RECORD) {
            labels.push(usize::from(record[0]));
            pixels.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no CIFAR-10 files given".into()));
    }
    Dataset::new(Array::new(vec![n, 3, 32, 32], pixels)?, labels, 10, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_big_endian() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 2, 7, 9];
        let (dims, payload) = parse_idx(&bytes, IDX_LABELS_MAGIC, "labels").unwrap();
        assert_eq!(dims, vec![2]);
        assert_eq!(payload, &[7, 9]);
    }

    #[test]
    fn trailing_and_missing_bytes_are_rejected() {
        assert!(parse_idx(&[0, 0, 8, 1, 0, 0, 0, 2, 7], IDX_LABELS_MAGIC, "labels").is_err());
        assert!(parse_idx(
            &[0, 0, 8, 1, 0, 0, 0, 2, 7, 9, 9],
            IDX_LABELS_MAGIC,
            "labels"
        )
        .is_err());
        assert!(parse_idx(&[0, 0, 8], IDX_LABELS_MAGIC, "labels").is_err());
    }

    #[test]
    fn dataset_validates_contents() {
        let img = Array::full(&[2, 1, 2, 2], 0.5);
        assert!(Dataset::new(img.clone(), vec![0], 10, "t").is_err());
        assert!(Dataset::new(img.clone(), vec![0, 10], 10, "t").is_err());
        assert!(Dataset::new(Array::full(&[2, 1, 2, 2], 1.5), vec![0, 1], 10, "t").is_err());
        assert!(Dataset::new(img, vec![0, 9], 10, "t").is_ok());
    }
}
