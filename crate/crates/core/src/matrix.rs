//! Dense matrix file format: a header of two little-endian `u64`s
//! (`rows`, `dim`) followed by `rows * dim` little-endian `f32` values in
//! row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub fn write_matrix(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&(m.nrows() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(m.ncols() as u64).to_le_bytes()).map_err(io)?;
    for v in m.iter() {
        w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut word = [0u8; 8];
    r.read_exact(&mut word).map_err(io)?;
    let rows = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word).map_err(io)?;
    let dim = u64::from_le_bytes(word) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(io)?;
    if body.len() != rows * dim * 4 {
        return Err(Error::Integrity(format!(
            "{}: header says {rows}x{dim} but body holds {} bytes",
            path.display(),
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((rows, dim), values).map_err(|e| Error::Integrity(e.to_string()))
}
