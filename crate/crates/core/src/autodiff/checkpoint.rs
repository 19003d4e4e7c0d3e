//! Portable parameter checkpoints.
//!
//! Layout: the 8-byte magic `MAFCKPT1`, then records until end of file. Each
//! record is `name_len: u64`, the UTF-8 name, `rank: u64`, `rank` dims as
//! `u64`, then the values as `f64`. All integers and floats little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MAFCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for r in records {
        out.extend_from_slice(&(r.name.len() as u64).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u64).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Parses checkpoint bytes; `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Vec<Record>> {
    let bad = |msg: &str| Error::format(origin, msg.to_string());
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(bad("missing MAFCKPT1 magic"));
    }
    let mut rd = Reader { buf: bytes, pos: 8 };
    let mut records = Vec::new();
    while rd.pos < bytes.len() {
        let name_len = rd.u64().ok_or_else(|| bad("truncated name length"))? as usize;
        let name = rd.take(name_len).ok_or_else(|| bad("truncated name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        let rank = rd.u64().ok_or_else(|| bad("truncated rank"))? as usize;
        if rank > 16 {
            return Err(bad(&format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u64().ok_or_else(|| bad("truncated dims"))? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("dimension overflow"))?;
        let raw = rd
            .take(n.checked_mul(8).ok_or_else(|| bad("dimension overflow"))?)
            .ok_or_else(|| bad(&format!("truncated values for {name}")))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        records.push(Record {
            name,
            shape,
            values,
        });
    }
    Ok(records)
}

pub fn write(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, encode(records)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout() {
        let r = Record {
            name: "w".into(),
            shape: vec![2],
            values: vec![1.0, -0.5],
        };
        let b = encode(&[r]);
        assert_eq!(&b[..8], b"MAFCKPT1");
        assert_eq!(&b[8..16], &1u64.to_le_bytes());
        assert_eq!(b[16], b'w');
        assert_eq!(&b[17..25], &1u64.to_le_bytes());
        assert_eq!(&b[25..33], &2u64.to_le_bytes());
        assert_eq!(&b[33..41], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 49);
    }

    #[test]
    fn rejects_corruption() {
        let p = Path::new("x.ckpt");
        assert!(decode(b"NOTMAGIC", p).is_err());
        let mut b = encode(&[Record {
            name: "w".into(),
            shape: vec![3],
            values: vec![0.0; 3],
        }]);
        b.truncate(b.len() - 4);
        let msg = decode(&b, p).unwrap_err().to_string();
        assert!(msg.contains("x.ckpt"), "{msg}");
    }

    proptest! {
        #[test]
        fn round_trip(names in proptest::collection::vec("[a-z.]{1,12}", 0..4),
                      vals in proptest::collection::vec(any::<f64>(), 0..12)) {
            let records: Vec<Record> = names.iter().enumerate().map(|(i, n)| {
                let v: Vec<f64> = vals.iter().skip(i).copied().collect();
                Record { name: n.clone(), shape: vec![1, v.len()], values: v }
            }).collect();
            let back = decode(&encode(&records), Path::new("p")).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for (a, b) in back.iter().zip(&records) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(&a.shape, &b.shape);
                let same = a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits());
                prop_assert!(same);
            }
        }
    }
}
