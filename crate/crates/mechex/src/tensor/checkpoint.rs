//! MXT1 checkpoint files.
//!
//! Layout: magic bytes `MXT1`, then per entry: name length (u32 LE), UTF-8
//! name, rank (u32 LE), dims (u32 LE each), raw 32-bit LE floats. Running
//! batch-norm statistics use the reserved name prefix `bn_stat/` and Adam
//! state the prefix `adam/`; everything else is a parameter value.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MXT1";
pub const BN_STAT_PREFIX: &str = "bn_stat/";
pub const ADAM_PREFIX: &str = "adam/";

pub fn write_tensors(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for (name, tensor) in entries {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(tensor.rank() as u32)?;
        for &d in tensor.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in tensor.data() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let size = file.metadata()?.len();
    let mut r = CountingReader {
        inner: BufReader::new(file),
        offset: 0,
    };
    let parse_err = |offset: u64, detail: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        detail,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| parse_err(0, e.to_string()))?;
    if &magic != MAGIC {
        return Err(parse_err(0, format!("bad magic {magic:?}, want {MAGIC:?}")));
    }

    let mut entries = Vec::new();
    while r.offset < size {
        let at = r.offset;
        let name_len = r
            .read_u32::<LittleEndian>()
            .map_err(|e| parse_err(at, e.to_string()))? as usize;
        if name_len > 4096 {
            return Err(parse_err(at, format!("unreasonable name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|e| parse_err(r.offset, e.to_string()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| parse_err(at + 4, format!("name not UTF-8: {e}")))?;
        let rank = r
            .read_u32::<LittleEndian>()
            .map_err(|e| parse_err(r.offset, e.to_string()))? as usize;
        if rank == 0 || rank > 4 {
            return Err(parse_err(r.offset, format!("rank {rank} out of 1..=4")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(
                r.read_u32::<LittleEndian>()
                    .map_err(|e| parse_err(r.offset, e.to_string()))? as usize,
            );
        }
        let n: usize = shape.iter().product();
        let remaining = (size - r.offset) as usize;
        if n * 4 > remaining {
            return Err(parse_err(
                r.offset,
                format!("tensor `{name}` wants {} bytes, {} left", n * 4, remaining),
            ));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(
                r.read_f32::<LittleEndian>()
                    .map_err(|e| parse_err(r.offset, e.to_string()))? as Real,
            );
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.mxt");
        let entries = vec![
            ("conv1/weight".to_string(), Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| i as Real * 0.5).collect()).unwrap()),
            ("adam/conv1/weight/t".to_string(), Tensor::scalar_value(7.0)),
            ("bn_stat/bn1/mean".to_string(), Tensor::new(vec![2], vec![0.1, -0.2]).unwrap()),
        ];
        write_tensors(&path, &entries).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back.len(), 3);
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn bad_magic_is_a_parse_error_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mxt");
        std::fs::write(&path, b"NOPE----").unwrap();
        match read_tensors(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.mxt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(b"ww");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&100u32.to_le_bytes()); // claims 100 floats, provides none
        std::fs::write(&path, &bytes).unwrap();
        match read_tensors(&path) {
            Err(Error::Parse { detail, .. }) => assert!(detail.contains("ww")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
