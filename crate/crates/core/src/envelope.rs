//! Little-endian binary files: generated datasets and weight checkpoints.
//!
//! Dataset layout:
//!
//! ```text
//! magic "SYND" | version u32 | D u32 | K u32 | n u64 | n × (D × f64, K × u8)
//! ```
//!
//! Checkpoint layout (shared by the plugin "SAE1" and the probe "PRB1"):
//!
//! ```text
//! magic [4] | version u32 | D u32 | K u32 | M u32
//! | n_widths u32 | n_widths × u32
//! | n_arrays u32 | n_arrays × u64 (array lengths)
//! | Σ lengths × f64 (arrays in declaration order)
//! | trailer_len u64 | trailer_len bytes of JSON
//! ```

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"SYND";
pub const FORMAT_VERSION: u32 = 1;

/// Parsed checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub magic: [u8; 4],
    pub style_dim: u32,
    pub attrs: u32,
    pub free_dims: u32,
    pub widths: Vec<u32>,
    pub arrays: Vec<Vec<f64>>,
    pub trailer: serde_json::Value,
}

impl Envelope {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        for v in [FORMAT_VERSION, self.style_dim, self.attrs, self.free_dims] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.widths.len() as u32).to_le_bytes());
        for w in &self.widths {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.len() as u64).to_le_bytes());
        }
        for a in &self.arrays {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let trailer = serde_json::to_vec(&self.trailer)?;
        out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
        out.extend_from_slice(&trailer);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], expected_magic: &[u8; 4]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != expected_magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(expected_magic)
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let style_dim = r.u32()?;
        let attrs = r.u32()?;
        let free_dims = r.u32()?;
        let n_widths = r.u32()? as usize;
        let widths = (0..n_widths).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n_arrays = r.u32()? as usize;
        let lens = (0..n_arrays).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let mut arrays = Vec::with_capacity(n_arrays);
        for len in lens {
            let len = usize::try_from(len).map_err(|_| Error::Format("array too long".into()))?;
            arrays.push((0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        }
        let tlen = r.u64()? as usize;
        let trailer = serde_json::from_slice(r.take(tlen)?)?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after JSON trailer".into()));
        }
        Ok(Self {
            magic,
            style_dim,
            attrs,
            free_dims,
            widths,
            arrays,
            trailer,
        })
    }

    pub fn write_to(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(path: &std::path::Path, magic: &[u8; 4]) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, magic)
    }
}

/// One dataset record: a style vector and its binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub w: Vec<f64>,
    pub labels: Vec<u8>,
}

pub fn write_dataset<W: Write>(out: &mut W, dim: usize, attrs: usize, records: &[Record]) -> Result<()> {
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    out.write_all(&(attrs as u32).to_le_bytes())?;
    out.write_all(&(records.len() as u64).to_le_bytes())?;
    for rec in records {
        if rec.w.len() != dim || rec.labels.len() != attrs {
            return Err(Error::ShapeMismatch {
                what: "dataset record",
                expected: vec![dim, attrs],
                got: vec![rec.w.len(), rec.labels.len()],
            });
        }
        for v in &rec.w {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&rec.labels)?;
    }
    Ok(())
}

/// Returns `(D, K, records)`.
pub fn read_dataset(bytes: &[u8]) -> Result<(usize, usize, Vec<Record>)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let dim = r.u32()? as usize;
    let attrs = r.u32()? as usize;
    let n = r.u64()? as usize;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let w = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let labels = r.take(attrs)?.to_vec();
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Format("label byte outside {0, 1}".into()));
        }
        records.push(Record { w, labels });
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after dataset records".into()));
    }
    Ok((dim, attrs, records))
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 over the little-endian bytes of a sequence of arrays.
pub fn hash_arrays<'a>(arrays: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut h = Sha256::new();
    for a in arrays {
        h.update((a.len() as u64).to_le_bytes());
        for v in a {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn dataset_roundtrip(
            dim in 1usize..6,
            attrs in 1usize..5,
            seed_vals in prop::collection::vec(-1e6f64..1e6, 0..40),
        ) {
            let records: Vec<Record> = seed_vals
                .chunks(dim)
                .filter(|c| c.len() == dim)
                .enumerate()
                .map(|(i, c)| Record { w: c.to_vec(), labels: (0..attrs).map(|k| ((i + k) % 2) as u8).collect() })
                .collect();
            let mut buf = Vec::new();
            write_dataset(&mut buf, dim, attrs, &records).unwrap();
            let (d, k, back) = read_dataset(&buf).unwrap();
            prop_assert_eq!((d, k), (dim, attrs));
            prop_assert_eq!(back, records);
        }

        #[test]
        fn envelope_roundtrip(arrays in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 0..10), 0..5)) {
            let env = Envelope {
                magic: *b"SAE1",
                style_dim: 64,
                attrs: 4,
                free_dims: 60,
                widths: vec![64, 512, 512, 64],
                arrays,
                trailer: serde_json::json!({"epochs": 3}),
            };
            let back = Envelope::from_bytes(&env.to_bytes().unwrap(), b"SAE1").unwrap();
            prop_assert_eq!(back, env);
        }
    }

    #[test]
    fn header_layout_is_little_endian() {
        let env = Envelope {
            magic: *b"PRB1",
            style_dim: 2,
            attrs: 1,
            free_dims: 1,
            widths: vec![7],
            arrays: vec![vec![1.0]],
            trailer: serde_json::json!({}),
        };
        let b = env.to_bytes().unwrap();
        assert_eq!(&b[..4], b"PRB1");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert!(Envelope::from_bytes(&b, b"SAE1").is_err());
        assert!(Envelope::from_bytes(&b[..b.len() - 1], b"PRB1").is_err());
    }

    #[test]
    fn dataset_rejects_bad_label_bytes() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, 1, 1, &[Record { w: vec![0.5], labels: vec![1] }]).unwrap();
        let last = buf.len() - 1;
        buf[last] = 2;
        assert!(read_dataset(&buf).is_err());
    }
}
