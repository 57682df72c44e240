//! IDX ingestion for MNIST-family datasets (big-endian headers).

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::LabeledDataset;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn truncated(file: &Path, context: &str) -> Error {
    Error::Truncated {
        file: file.display().to_string(),
        context: context.to_string(),
    }
}

/// Loads an IDX image/label pair, scaling `u8` pixels to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let (images, n_images, rows, cols) = load_images(images_path)?;
    let labels = load_labels(labels_path)?;
    if labels.len() != n_images {
        return Err(Error::CountMismatch {
            file: labels_path.display().to_string(),
            context: format!("{n_images} images but {} labels", labels.len()),
        });
    }
    let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let images = Tensor::from_vec(vec![n_images, 1, rows, cols], images)?;
    let ds = LabeledDataset {
        images,
        labels,
        classes: classes.max(2),
        spurious: None,
        provenance: format!("idx({})", images_path.display()),
        domino_top_rows: None,
    };
    ds.validate()?;
    Ok(ds)
}

fn load_images(path: &Path) -> Result<(Vec<f32>, usize, usize, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| truncated(path, "magic"))?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            file: path.display().to_string(),
            expected: format!("{IMAGES_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let n = r.read_u32::<BigEndian>().map_err(|_| truncated(path, "count"))? as usize;
    let rows = r.read_u32::<BigEndian>().map_err(|_| truncated(path, "rows"))? as usize;
    let cols = r.read_u32::<BigEndian>().map_err(|_| truncated(path, "cols"))? as usize;
    let mut raw = vec![0u8; n * rows * cols];
    r.read_exact(&mut raw)
        .map_err(|_| truncated(path, "pixel payload"))?;
    let data = raw.iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok((data, n, rows, cols))
}

fn load_labels(path: &Path) -> Result<Vec<u32>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| truncated(path, "magic"))?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            file: path.display().to_string(),
            expected: format!("{LABELS_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let n = r.read_u32::<BigEndian>().map_err(|_| truncated(path, "count"))? as usize;
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw)
        .map_err(|_| truncated(path, "label payload"))?;
    Ok(raw.into_iter().map(u32::from).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    // Independent fixture writer: assembles IDX bytes by hand.
    fn write_fixture(dir: &Path, pixels: &[[u8; 4]], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let images = dir.join("im.idx");
        let mut f = File::create(&images).unwrap();
        f.write_all(&0x0000_0803u32.to_be_bytes()).unwrap();
        f.write_all(&(pixels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        for p in pixels {
            f.write_all(p).unwrap();
        }
        let labels_path = dir.join("lb.idx");
        let mut f = File::create(&labels_path).unwrap();
        f.write_all(&0x0000_0801u32.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (images, labels_path)
    }

    #[test]
    fn fixture_round_trips_counts_and_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = [
            [0u8, 51, 102, 255],
            [255, 0, 0, 0],
            [10, 20, 30, 40],
            [1, 2, 3, 4],
        ];
        let (im, lb) = write_fixture(dir.path(), &pixels, &[0, 1, 1, 0]);
        let ds = load_idx(&im, &lb).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.labels, vec![0, 1, 1, 0]);
        assert_eq!(ds.images.dims(), &[4, 1, 2, 2]);
        assert!((ds.images.data()[1] - 51.0 / 255.0).abs() < 1e-7);
        assert_eq!(ds.images.data()[3], 1.0);
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.idx");
        let mut f = File::create(&bad).unwrap();
        f.write_all(&0x0000_0802u32.to_be_bytes()).unwrap();
        f.write_all(&[0; 12]).unwrap();
        let lb = dir.path().join("lb.idx");
        File::create(&lb).unwrap();
        assert!(matches!(
            load_idx(&bad, &lb),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (im, lb) = write_fixture(dir.path(), &[[0; 4], [0; 4]], &[0, 1, 0]);
        assert!(matches!(
            load_idx(&im, &lb),
            Err(Error::CountMismatch { .. })
        ));
    }

    #[test]
    fn truncated_images_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (im, lb) = write_fixture(dir.path(), &[[7; 4], [9; 4]], &[0, 1]);
        let bytes = std::fs::read(&im).unwrap();
        std::fs::write(&im, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_idx(&im, &lb), Err(Error::Truncated { .. })));
    }
}
