use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major collection of equal-length vectors. Row `i` holds the vector of document `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(dim: usize) -> Self {
        Dataset { dim, data: Vec::new() }
    }

    pub fn from_flat(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::params(format!("{} values do not form rows of width {dim}", data.len())));
        }
        Ok(Dataset { dim, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut ds = Dataset { dim, data: Vec::with_capacity(dim * rows.len()) };
        for r in rows {
            ds.push(r)?;
        }
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[T] {
        &self.data
    }

    pub fn push(&mut self, v: &[T]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn read_fvecs(path: impl AsRef<Path>) -> Result<Self> {
        read_vecs(path.as_ref(), 4, |b| T::from_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]])).unwrap_or_else(T::nan))
    }

    pub fn read_bvecs(path: impl AsRef<Path>) -> Result<Self> {
        read_vecs(path.as_ref(), 1, |b| T::from_u8(b[0]).unwrap_or_else(T::nan))
    }

    pub fn write_fvecs(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let dim = i32::try_from(self.dim).map_err(|_| Error::params("dimension too large for fvecs"))?;
        for row in self.rows() {
            w.write_all(&dim.to_le_bytes())?;
            for x in row {
                w.write_all(&(x.to_f32().unwrap_or(f32::NAN)).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn read_vecs<T: Scalar>(path: &Path, width: usize, decode: impl Fn(&[u8]) -> T) -> Result<Dataset<T>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut dim = None;
    let mut data = Vec::new();
    let mut record = 0;
    while pos < bytes.len() {
        let head = bytes.get(pos..pos + 4).ok_or_else(|| Error::parse(record + 1, "truncated dimension header"))?;
        let d = i32::from_le_bytes([head[0], head[1], head[2], head[3]]);
        if d <= 0 {
            return Err(Error::parse(record + 1, format!("non-positive dimension {d}")));
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => return Err(Error::DimensionMismatch { expected, got: d }),
            _ => {}
        }
        pos += 4;
        let body = bytes.get(pos..pos + d * width).ok_or_else(|| Error::parse(record + 1, "truncated vector"))?;
        data.extend(body.chunks_exact(width).map(&decode));
        pos += d * width;
        record += 1;
    }
    let dim = dim.ok_or_else(|| Error::params("file holds no vectors"))?;
    Dataset::from_flat(dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fvecs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fvecs");
        let ds = Dataset::<f32>::from_rows(&[vec![1.0, -2.5, 3.0], vec![0.0, 0.5, 7.25]]).unwrap();
        ds.write_fvecs(&path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 2 * (4 + 12));
        assert_eq!(Dataset::<f32>::read_fvecs(&path).unwrap(), ds);
        let wide = Dataset::<f64>::read_fvecs(&path).unwrap();
        assert_eq!(wide.row(1), &[0.0, 0.5, 7.25]);
    }

    #[test]
    fn bvecs_decode_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bvecs");
        let mut raw = Vec::new();
        for row in [[1u8, 2], [250, 0]] {
            raw.extend_from_slice(&2i32.to_le_bytes());
            raw.extend_from_slice(&row);
        }
        std::fs::write(&path, &raw).unwrap();
        let ds = Dataset::<f32>::read_bvecs(&path).unwrap();
        assert_eq!(ds.row(1), &[250.0, 0.0]);
        std::fs::write(&path, &raw[..raw.len() - 1]).unwrap();
        assert!(Dataset::<f32>::read_bvecs(&path).is_err());
    }

    #[test]
    fn push_checks_dimension() {
        let mut ds = Dataset::<f32>::new(2);
        assert!(ds.push(&[1.0]).is_err());
        ds.push(&[1.0, 2.0]).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(Dataset::<f32>::from_flat(2, vec![1.0; 3]).is_err());
    }
}
