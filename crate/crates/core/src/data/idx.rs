//! MNIST IDX reader and writer (big-endian header, unsigned byte payload).

use std::fs;
use std::path::Path;

use super::{Dataset, Example, TaskKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("file truncated inside header at byte {at}")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Returns `(rows, cols, pixels)` with one `rows * cols` byte slab per image.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let size = rows * cols;
    let body = &bytes[16..];
    if body.len() < n * size {
        return Err(Error::Format(format!(
            "expected {n} images of {rows}x{cols}, payload holds {} bytes",
            body.len()
        )));
    }
    Ok((
        rows,
        cols,
        body.chunks(size.max(1)).take(n).map(<[u8]>::to_vec).collect(),
    ))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format(format!(
            "expected {n} labels, payload holds {}",
            body.len()
        )));
    }
    Ok(body[..n].to_vec())
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, images: &[Vec<u8>]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IMAGE_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        if img.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "image of {} bytes, expected {}",
                img.len(),
                rows * cols
            )));
        }
        out.extend_from_slice(img);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

/// Loads up to `limit` image/label pairs into the train split, pixels scaled
/// to `[0, 1]`.
pub fn load_mnist_idx(images: &Path, labels: &Path, limit: usize) -> Result<Dataset> {
    let (rows, cols, imgs) = parse_idx_images(&fs::read(images)?)?;
    let labs = parse_idx_labels(&fs::read(labels)?)?;
    if imgs.len() != labs.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            imgs.len(),
            labs.len()
        )));
    }
    let mut train = Vec::with_capacity(limit.min(imgs.len()));
    for (img, &label) in imgs.iter().zip(&labs).take(limit) {
        if label > 9 {
            return Err(Error::Format(format!("label {label} is not a digit")));
        }
        let data = img.iter().map(|&b| f64::from(b) / 255.0).collect();
        train.push(Example {
            input: Tensor::new(vec![1, rows, cols], data)?,
            label: label as usize,
        });
    }
    Ok(Dataset {
        task: TaskKind::Image,
        num_classes: 10,
        train,
        test: Vec::new(),
        vocab: None,
    })
}

/// Loads the standard four-file MNIST layout from `dir`.
pub fn load_mnist_dir(dir: &Path, train_limit: usize, test_limit: usize) -> Result<Dataset> {
    let mut train = load_mnist_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        train_limit,
    )?;
    let test = load_mnist_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        test_limit,
    )?;
    train.test = test.train;
    Ok(train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let imgs: Vec<Vec<u8>> = (0..4u8).map(|i| vec![i * 60; 28 * 28]).collect();
        let ip = dir.join("img.idx");
        let lp = dir.join("lab.idx");
        write_idx_images(&ip, 28, 28, &imgs).unwrap();
        write_idx_labels(&lp, &[3, 1, 4, 1]).unwrap();
        (ip, lp)
    }

    #[test]
    fn four_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        let ds = load_mnist_idx(&ip, &lp, 100).unwrap();
        assert_eq!(ds.train.len(), 4);
        assert!(ds.train.iter().all(|e| e.input.shape() == [1, 28, 28]));
        assert_eq!(ds.train[2].label, 4);
        assert_eq!(ds.train[3].input.data()[0], 180.0 / 255.0);
        ds.validate().unwrap();
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        assert_eq!(
            load_mnist_idx(&ip, &ip, 10).unwrap_err(),
            Error::BadMagic {
                expected: LABEL_MAGIC,
                found: IMAGE_MAGIC
            }
        );
        let bytes = fs::read(&ip).unwrap();
        assert!(matches!(parse_idx_images(&bytes[..100]), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&bytes[..10]), Err(Error::Format(_))));
        let short = dir.path().join("short.idx");
        write_idx_labels(&short, &[1, 2]).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &short, 10), Err(Error::Format(_))));
        let _ = lp;
    }

    #[test]
    fn zero_limit_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        let ds = load_mnist_idx(&ip, &lp, 0).unwrap();
        assert!(ds.is_empty());
    }
}
