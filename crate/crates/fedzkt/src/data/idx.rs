//! IDX image/label file parsing and writing (big-endian dims, unsigned
//! bytes), the format MNIST-family datasets ship in.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use crate::data::{denormalize_to_byte, normalize_byte, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::IdxFormat {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Loads an images/labels file pair. Pixels are normalized to [-1, 1];
/// `classes` is one past the largest label present.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let mut imgf = BufReader::new(File::open(images_path)?);
    let magic = imgf
        .read_u32::<BigEndian>()
        .map_err(|_| idx_error(images_path, "truncated header"))?;
    if magic != IMAGES_MAGIC {
        return Err(idx_error(images_path, format!("bad magic {magic:#010x}")));
    }
    let n = read_dim(&mut imgf, images_path)?;
    let rows = read_dim(&mut imgf, images_path)?;
    let cols = read_dim(&mut imgf, images_path)?;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(idx_error(images_path, "zero-sized dimension"));
    }
    let mut pixels = vec![0u8; n * rows * cols];
    imgf.read_exact(&mut pixels)
        .map_err(|_| idx_error(images_path, "truncated pixel data"))?;
    if imgf.read(&mut [0u8; 1])? != 0 {
        return Err(idx_error(images_path, "trailing bytes after pixel data"));
    }

    let mut lblf = BufReader::new(File::open(labels_path)?);
    let magic = lblf
        .read_u32::<BigEndian>()
        .map_err(|_| idx_error(labels_path, "truncated header"))?;
    if magic != LABELS_MAGIC {
        return Err(idx_error(labels_path, format!("bad magic {magic:#010x}")));
    }
    let label_count = read_dim(&mut lblf, labels_path)?;
    if label_count != n {
        return Err(idx_error(
            labels_path,
            format!("{label_count} labels for {n} images"),
        ));
    }
    let mut raw_labels = vec![0u8; n];
    lblf.read_exact(&mut raw_labels)
        .map_err(|_| idx_error(labels_path, "truncated label data"))?;

    let values: Vec<f64> = pixels.iter().map(|&b| normalize_byte(b)).collect();
    let images = Tensor::from_values(&[n, 1, rows, cols], values)?;
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    LabeledDataset::new(images, labels, classes)
}

fn read_dim(reader: &mut impl Read, path: &Path) -> Result<usize> {
    reader
        .read_u32::<BigEndian>()
        .map(|d| d as usize)
        .map_err(|_| idx_error(path, "truncated header"))
}

/// Writes a single-channel dataset as an IDX images/labels file pair,
/// quantizing values back to the byte grid.
pub fn save_idx_dataset(
    ds: &LabeledDataset,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let shape = ds.images().shape();
    if shape[1] != 1 {
        return Err(Error::InvalidArgument(format!(
            "idx files hold single-channel images, got {} channels",
            shape[1]
        )));
    }
    if ds.labels().iter().any(|&l| l > u8::MAX as usize) {
        return Err(Error::InvalidArgument(
            "idx labels must fit in a byte".into(),
        ));
    }
    let mut imgf = BufWriter::new(File::create(images_path)?);
    imgf.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    imgf.write_u32::<BigEndian>(shape[0] as u32)?;
    imgf.write_u32::<BigEndian>(shape[2] as u32)?;
    imgf.write_u32::<BigEndian>(shape[3] as u32)?;
    let bytes: Vec<u8> = ds.images().values().iter().map(|&v| denormalize_to_byte(v)).collect();
    imgf.write_all(&bytes)?;
    imgf.flush()?;

    let mut lblf = BufWriter::new(File::create(labels_path)?);
    lblf.write_u32::<BigEndian>(LABELS_MAGIC)?;
    lblf.write_u32::<BigEndian>(ds.len() as u32)?;
    let labels: Vec<u8> = ds.labels().iter().map(|&l| l as u8).collect();
    lblf.write_all(&labels)?;
    lblf.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> LabeledDataset {
        let values: Vec<f64> = (0..=255u32)
            .map(|b| normalize_byte(b as u8))
            .chain((0..=255u32).rev().map(|b| normalize_byte(b as u8)))
            .collect();
        let images = Tensor::from_values(&[2, 1, 16, 16], values).unwrap();
        LabeledDataset::new(images, vec![3, 7], 8).unwrap()
    }

    #[test]
    fn round_trip_preserves_bytes_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        let img = dir.path().join("images.idx");
        let lbl = dir.path().join("labels.idx");
        save_idx_dataset(&ds, &img, &lbl).unwrap();
        let loaded = load_idx_dataset(&img, &lbl).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.image_shape(), &[1, 16, 16]);
        assert_eq!(loaded.labels(), ds.labels());
        assert_eq!(loaded.classes(), 8);
        // Values were already on the byte grid, so they survive exactly.
        assert_eq!(loaded.images().values(), ds.images().values());
        assert_eq!(loaded.images().values()[0], -1.0);
        assert_eq!(loaded.images().values()[255], 1.0);
    }

    #[test]
    fn rejects_bad_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        let img = dir.path().join("images.idx");
        let lbl = dir.path().join("labels.idx");
        save_idx_dataset(&ds, &img, &lbl).unwrap();

        // Corrupt the image magic.
        let mut bytes = std::fs::read(&img).unwrap();
        bytes[3] = 0x42;
        let bad = dir.path().join("bad.idx");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_idx_dataset(&bad, &lbl),
            Err(Error::IdxFormat { .. })
        ));

        // Truncate the pixel payload.
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&bad, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_idx_dataset(&bad, &lbl).is_err());

        // Label count mismatch: write a labels file with one label.
        let one = {
            let images = Tensor::zeros(&[1, 1, 16, 16]);
            LabeledDataset::new(images, vec![0], 1).unwrap()
        };
        let img1 = dir.path().join("img1.idx");
        let lbl1 = dir.path().join("lbl1.idx");
        save_idx_dataset(&one, &img1, &lbl1).unwrap();
        assert!(load_idx_dataset(&img, &lbl1).is_err());
    }
}
