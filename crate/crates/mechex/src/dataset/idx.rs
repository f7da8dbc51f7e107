//! IDX file parsing (the MNIST distribution format).

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};

use super::{ImageSet, Source, MNIST_RAW_SIDE};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an MNIST-style image/label file pair into a raw 28x28 [`ImageSet`]
/// with pixels scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path, source: Source) -> Result<ImageSet> {
    let (images, rows, cols) = read_images(images_path)?;
    let labels = read_labels(labels_path)?;
    if labels.len() != images.len() / (rows * cols) {
        return Err(Error::Parse {
            path: labels_path.to_path_buf(),
            offset: 4,
            detail: format!(
                "label count {} does not match image count {}",
                labels.len(),
                images.len() / (rows * cols)
            ),
        });
    }
    if rows != MNIST_RAW_SIDE || cols != MNIST_RAW_SIDE {
        return Err(Error::Parse {
            path: images_path.to_path_buf(),
            offset: 8,
            detail: format!("expected {MNIST_RAW_SIDE}x{MNIST_RAW_SIDE} images, got {rows}x{cols}"),
        });
    }
    let n = labels.len();
    ImageSet::new(
        Tensor::new(vec![n, 1, rows, cols], images)?,
        Some(labels),
        source,
    )
}

fn read_images(path: &Path) -> Result<(Vec<Real>, usize, usize)> {
    let mut r = open(path)?;
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    if magic != IMAGES_MAGIC {
        return Err(parse_err(
            path,
            0,
            format!("bad images magic {magic:#010x}, want {IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = r.read_u32::<BigEndian>().map_err(|e| parse_err(path, 4, e.to_string()))? as usize;
    let rows = r.read_u32::<BigEndian>().map_err(|e| parse_err(path, 8, e.to_string()))? as usize;
    let cols = r.read_u32::<BigEndian>().map_err(|e| parse_err(path, 12, e.to_string()))? as usize;
    let want = n * rows * cols;
    let mut bytes = Vec::with_capacity(want);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != want {
        return Err(parse_err(
            path,
            16 + bytes.len() as u64,
            format!("truncated: want {want} pixel bytes, got {}", bytes.len()),
        ));
    }
    Ok((
        bytes.into_iter().map(|b| b as Real / 255.0).collect(),
        rows,
        cols,
    ))
}

fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = open(path)?;
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    if magic != LABELS_MAGIC {
        return Err(parse_err(
            path,
            0,
            format!("bad labels magic {magic:#010x}, want {LABELS_MAGIC:#010x}"),
        ));
    }
    let n = r.read_u32::<BigEndian>().map_err(|e| parse_err(path, 4, e.to_string()))? as usize;
    let mut bytes = Vec::with_capacity(n);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n {
        return Err(parse_err(
            path,
            8 + bytes.len() as u64,
            format!("truncated: want {n} labels, got {}", bytes.len()),
        ));
    }
    Ok(bytes)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?))
}

fn parse_err(path: &Path, offset: u64, detail: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        detail,
    }
}

/// Write an IDX image/label pair; used by tests and the synthetic corpus so
/// the real ingestion path is exercised end to end.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    images: &[u8],
    labels: &[u8],
    rows: usize,
    cols: usize,
) -> Result<()> {
    use byteorder::WriteBytesExt;
    use std::io::Write;
    let n = labels.len();
    if images.len() != n * rows * cols {
        return Err(Error::Contract(format!(
            "{} pixel bytes for {} {}x{} images",
            images.len(),
            n,
            rows,
            cols
        )));
    }
    let mut w = std::io::BufWriter::new(File::create(images_path)?);
    w.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    w.write_u32::<BigEndian>(n as u32)?;
    w.write_u32::<BigEndian>(rows as u32)?;
    w.write_u32::<BigEndian>(cols as u32)?;
    w.write_all(images)?;
    w.flush()?;

    let mut w = std::io::BufWriter::new(File::create(labels_path)?);
    w.write_u32::<BigEndian>(LABELS_MAGIC)?;
    w.write_u32::<BigEndian>(n as u32)?;
    w.write_all(labels)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_crafted_fixture_round_trips_exact_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs.idx");
        let lbl_path = dir.path().join("lbls.idx");
        let mut pixels = vec![0u8; 2 * 28 * 28];
        pixels[0] = 255;
        pixels[28 * 28 + 5] = 128;
        write_idx(&img_path, &lbl_path, &pixels, &[3, 7], 28, 28).unwrap();

        let set = load_idx(&img_path, &lbl_path, Source::MnistTrain).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.labels.as_deref(), Some(&[3u8, 7][..]));
        assert_eq!(set.images.data()[0], 1.0);
        let v = set.images.data()[28 * 28 + 5];
        assert!((v - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn images_magic_passed_as_labels_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs.idx");
        let lbl_path = dir.path().join("lbls.idx");
        write_idx(&img_path, &lbl_path, &vec![0u8; 28 * 28], &[1], 28, 28).unwrap();
        // swap: images file where labels are expected
        match load_idx(&img_path, &img_path, Source::MnistTrain) {
            Err(Error::Parse { offset, detail, .. }) => {
                assert_eq!(offset, 0);
                assert!(detail.contains("magic"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_image_file_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs.idx");
        let lbl_path = dir.path().join("lbls.idx");
        write_idx(&img_path, &lbl_path, &vec![7u8; 28 * 28], &[1], 28, 28).unwrap();
        let bytes = std::fs::read(&img_path).unwrap();
        std::fs::write(&img_path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            load_idx(&img_path, &lbl_path, Source::MnistTrain),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs.idx");
        let lbl_path = dir.path().join("lbls.idx");
        let other_lbl = dir.path().join("lbls2.idx");
        write_idx(&img_path, &lbl_path, &vec![0u8; 2 * 28 * 28], &[1, 2], 28, 28).unwrap();
        write_idx(&dir.path().join("x.idx"), &other_lbl, &vec![0u8; 28 * 28], &[1], 28, 28).unwrap();
        assert!(matches!(
            load_idx(&img_path, &other_lbl, Source::MnistTrain),
            Err(Error::Parse { .. })
        ));
    }
}
