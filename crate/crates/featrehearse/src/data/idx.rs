//! IDX file reading and writing (the MNIST container format).
//!
//! Big-endian headers: two zero bytes, a dtype byte (0x08 = unsigned byte,
//! the only dtype supported here), a dimension-count byte, then one u32 per
//! dimension. Image files are rank 3 (count, rows, cols); label files rank 1.

use super::dataset::{ImageShape, LabeledDataset};
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const DTYPE_U8: u8 = 0x08;

fn read_header(r: &mut impl Read, path: &Path, want_rank: u8) -> Result<Vec<u32>> {
    let mut head = [0u8; 4];
    r.read_exact(&mut head)
        .map_err(|_| truncated(path, "header"))?;
    if head[0] != 0 || head[1] != 0 {
        return Err(Error::Format(format!(
            "{}: bad IDX magic {:02x}{:02x}{:02x}{:02x}",
            path.display(),
            head[0],
            head[1],
            head[2],
            head[3]
        )));
    }
    if head[2] != DTYPE_U8 {
        return Err(Error::Format(format!(
            "{}: unsupported IDX dtype 0x{:02x} (only unsigned byte 0x08)",
            path.display(),
            head[2]
        )));
    }
    if head[3] != want_rank {
        return Err(Error::Format(format!(
            "{}: IDX rank {} where {} expected",
            path.display(),
            head[3],
            want_rank
        )));
    }
    let mut dims = Vec::with_capacity(want_rank as usize);
    for _ in 0..want_rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| truncated(path, "dims"))?;
        dims.push(u32::from_be_bytes(b));
    }
    Ok(dims)
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::Format(format!("{}: truncated IDX file ({what})", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingInput(format!(
            "{} does not exist",
            path.display()
        ))),
        Err(e) => Err(e.into()),
    }
}

/// Loads an images/labels IDX pair into a dataset of single-channel images.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let mut ir = open(images)?;
    let idims = read_header(&mut ir, images, 3)?;
    let (count, rows, cols) = (idims[0] as usize, idims[1] as usize, idims[2] as usize);
    let mut pixels = vec![0u8; count * rows * cols];
    ir.read_exact(&mut pixels)
        .map_err(|_| truncated(images, "pixel data"))?;
    let mut trailing = [0u8; 1];
    if ir.read(&mut trailing)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after pixel data",
            images.display()
        )));
    }

    let mut lr = open(labels)?;
    let ldims = read_header(&mut lr, labels, 1)?;
    if ldims[0] as usize != count {
        return Err(Error::Consistency(format!(
            "{} has {} labels but {} has {} images",
            labels.display(),
            ldims[0],
            images.display(),
            count
        )));
    }
    let mut raw = vec![0u8; count];
    lr.read_exact(&mut raw)
        .map_err(|_| truncated(labels, "label data"))?;

    let class_count = raw.iter().copied().max().map_or(0, |m| m as u32 + 1);
    let shape = ImageShape {
        channels: 1,
        height: rows,
        width: cols,
    };
    LabeledDataset::new(shape, pixels, raw.iter().map(|&l| l as u32).collect(), class_count)
}

/// Writes a dataset back out as an images/labels IDX pair. Only
/// single-channel datasets with labels below 256 are representable.
pub fn write_idx_dataset(ds: &LabeledDataset, images: &Path, labels: &Path) -> Result<()> {
    use super::dataset::ImageSource;
    let shape = ds.shape();
    if shape.channels != 1 {
        return Err(Error::Dimension(format!(
            "IDX image files are single-channel; dataset has {} channels",
            shape.channels
        )));
    }
    let mut iw = BufWriter::new(File::create(images)?);
    iw.write_all(&[0, 0, DTYPE_U8, 3])?;
    iw.write_all(&(ds.len() as u32).to_be_bytes())?;
    iw.write_all(&(shape.height as u32).to_be_bytes())?;
    iw.write_all(&(shape.width as u32).to_be_bytes())?;
    for i in 0..ds.len() {
        iw.write_all(ds.image(i))?;
    }
    iw.flush()?;

    let mut lw = BufWriter::new(File::create(labels)?);
    lw.write_all(&[0, 0, DTYPE_U8, 1])?;
    lw.write_all(&(ds.len() as u32).to_be_bytes())?;
    for &l in ds.labels() {
        if l > 255 {
            return Err(Error::Consistency(format!(
                "label {l} does not fit in an IDX byte label"
            )));
        }
        lw.write_all(&[l as u8])?;
    }
    lw.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::ImageSource;

    fn tiny() -> LabeledDataset {
        let shape = ImageShape {
            channels: 1,
            height: 3,
            width: 2,
        };
        let pixels: Vec<u8> = (0..24).collect();
        LabeledDataset::new(shape, pixels, vec![1, 0, 3, 1], 4).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        let ds = tiny();
        write_idx_dataset(&ds, &ip, &lp).unwrap();
        let back = load_idx_dataset(&ip, &lp).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.shape(), ds.shape());
        assert_eq!(back.labels(), ds.labels());
        for i in 0..ds.len() {
            assert_eq!(back.image(i), ds.image(i));
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        write_idx_dataset(&tiny(), &ip, &lp).unwrap();
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[0] = 0xff;
        std::fs::write(&ip, bytes).unwrap();
        let err = load_idx_dataset(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn truncation_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        write_idx_dataset(&tiny(), &ip, &lp).unwrap();
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_idx_dataset(&ip, &lp).unwrap_err(),
            Error::Format(_)
        ));
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        let other_lp = dir.path().join("lab5.idx");
        write_idx_dataset(&tiny(), &ip, &lp).unwrap();
        // Label file advertising 5 entries against 4 images.
        let mut lab = vec![0, 0, DTYPE_U8, 1];
        lab.extend_from_slice(&5u32.to_be_bytes());
        lab.extend_from_slice(&[0, 1, 2, 3, 0]);
        std::fs::write(&other_lp, lab).unwrap();
        assert!(matches!(
            load_idx_dataset(&ip, &other_lp).unwrap_err(),
            Error::Consistency(_)
        ));
    }

    #[test]
    fn missing_file_is_missing_input() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_idx_dataset(&dir.path().join("nope"), &dir.path().join("nope2"))
            .unwrap_err();
        assert!(matches!(err, Error::MissingInput(_)));
        assert_eq!(err.exit_code(), 3);
    }
}
