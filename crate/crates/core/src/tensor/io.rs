//! Tensor file format: one JSON header line `{name, dtype, shape}` followed by
//! raw little-endian f64 values. Used by checkpoints and datasets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

pub fn save_tensor(path: &Path, name: &str, tensor: &Tensor) -> Result<()> {
    let header = Header {
        name: name.to_string(),
        dtype: "f64".to_string(),
        shape: tensor.shape().to_vec(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<(String, Tensor)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_line = String::new();
    r.read_line(&mut header_line)?;
    let header: Header = serde_json::from_str(header_line.trim_end())?;
    if header.dtype != "f64" {
        return Err(Error::Dataset(format!(
            "{}: unsupported dtype {:?}",
            path.display(),
            header.dtype
        )));
    }
    let numel: usize = header.shape.iter().product();
    let mut bytes = vec![0u8; numel * 8];
    r.read_exact(&mut bytes)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Dataset(format!(
            "{}: trailing bytes after {} values",
            path.display(),
            numel
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header.name, Tensor::new(header.shape, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let mut rng = Rng::new(5);
        let t = Tensor::randn(&mut rng, &[3, 4, 5], 1.7);
        save_tensor(&path, "weights", &t).unwrap();
        let (name, back) = load_tensor(&path).unwrap();
        assert_eq!(name, "weights");
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let t = Tensor::ones(&[4]);
        save_tensor(&path, "x", &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_tensor(&path).is_err());
    }
}
