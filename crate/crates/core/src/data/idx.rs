//! IDX (MNIST distribution) files: big-endian headers, unsigned bytes.

use std::path::Path;

use byteorder::{BigEndian, ByteOrder, WriteBytesExt};

use super::{DataError, Dataset};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, Default)]
pub struct IdxOptions {
    /// Number of label classes; 10 for digits.
    pub classes: Option<usize>,
    /// Standardize each image after scaling to `[0, 1]`.
    pub standardize: bool,
}

fn need(what: &'static str, bytes: &[u8], expected: usize) -> Result<(), DataError> {
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            what,
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Parse an image file into `(count, rows * cols, raw pixels)`.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), DataError> {
    need("image magic", bytes, 4)?;
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            what: "image file",
            found: magic,
            expected: IMAGES_MAGIC,
        });
    }
    need("image header", bytes, 16)?;
    let count = BigEndian::read_u32(&bytes[4..8]) as usize;
    let rows = BigEndian::read_u32(&bytes[8..12]) as usize;
    let cols = BigEndian::read_u32(&bytes[12..16]) as usize;
    let pixels = count * rows * cols;
    need("image data", bytes, 16 + pixels)?;
    Ok((count, rows * cols, bytes[16..16 + pixels].to_vec()))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    need("label magic", bytes, 4)?;
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            what: "label file",
            found: magic,
            expected: LABELS_MAGIC,
        });
    }
    need("label header", bytes, 8)?;
    let count = BigEndian::read_u32(&bytes[4..8]) as usize;
    need("label data", bytes, 8 + count)?;
    Ok(bytes[8..8 + count].to_vec())
}

pub fn load_idx(images_path: &Path, labels_path: &Path, opts: IdxOptions) -> Result<Dataset, DataError> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;
    let (count, dim, pixels) = read_idx_images(&image_bytes)?;
    let raw_labels = read_idx_labels(&label_bytes)?;
    if raw_labels.len() != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: raw_labels.len(),
        });
    }
    let classes = opts.classes.unwrap_or(10);
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let mut ds = Dataset::new(features, labels, dim.max(1), classes)?;
    if opts.standardize {
        ds.standardize_rows();
    }
    Ok(ds)
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> crate::Result<()> {
    let count = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.write_u32::<BigEndian>(v).expect("write to Vec");
    }
    out.extend_from_slice(pixels);
    super::write_all(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> crate::Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    for v in [LABELS_MAGIC, labels.len() as u32] {
        out.write_u32::<BigEndian>(v).expect("write to Vec");
    }
    out.extend_from_slice(labels);
    super::write_all(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let pixels: Vec<u8> = (0..labels.len() * 784).map(|i| (i * 7 % 256) as u8).collect();
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        write_idx_images(&ip, 28, 28, &pixels).unwrap();
        write_idx_labels(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn four_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), &[0, 3, 9, 1]);
        let ds = load_idx(&ip, &lp, IdxOptions::default()).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.input_dim(), 784);
        assert!(ds.features().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(ds.labels(), &[0, 3, 9, 1]);
    }

    #[test]
    fn first_image_checksum_matches_byte_reference() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), &[5, 5]);
        // independent reference: sum the raw bytes after the 16-byte header
        let raw = std::fs::read(&ip).unwrap();
        let reference: u64 = raw[16..16 + 784].iter().map(|&b| u64::from(b)).sum();
        let ds = load_idx(&ip, &lp, IdxOptions::default()).unwrap();
        let sum: f64 = ds.row(0).iter().sum();
        assert!((sum * 255.0 - reference as f64).abs() < 1e-6);
    }

    #[test]
    fn label_ten_is_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), &[1, 10]);
        let err = load_idx(&ip, &lp, IdxOptions::default()).unwrap_err();
        assert!(matches!(err, DataError::LabelOutOfRange { label: 10, .. }));
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), &[1, 2, 3]);
        // swapped files: bad magic
        assert!(matches!(
            load_idx(&lp, &ip, IdxOptions::default()),
            Err(DataError::BadMagic { .. })
        ));
        // truncated image data
        let bytes = std::fs::read(&ip).unwrap();
        let cut = dir.path().join("cut.idx");
        std::fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            load_idx(&cut, &lp, IdxOptions::default()),
            Err(DataError::Truncated { .. })
        ));
        // two labels for three images
        let lp2 = dir.path().join("two.idx");
        write_idx_labels(&lp2, &[1, 2]).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp2, IdxOptions::default()),
            Err(DataError::CountMismatch { images: 3, labels: 2 })
        ));
    }

    #[test]
    fn standardize_flag() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), &[1]);
        let ds = load_idx(
            &ip,
            &lp,
            IdxOptions {
                standardize: true,
                ..Default::default()
            },
        )
        .unwrap();
        let mean: f64 = ds.row(0).iter().sum::<f64>() / 784.0;
        assert!(mean.abs() < 1e-12);
    }
}
