//! TGF1 binary field snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TGF1"            4 bytes
//! version           u16 (= 1)
//! dim               u16
//! cells per axis    dim × u64
//! field count       u16
//! names             count × (u16 length, ASCII bytes)
//! payload           count × cells × f64, row-major, fields concatenated
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;
use tumorctl_core::grid::{Domain, Field};

pub const MAGIC: &[u8; 4] = b"TGF1";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

/// Named fields on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub cells: Vec<u64>,
    pub fields: Vec<(String, Vec<f64>)>,
}

impl Snapshot {
    pub fn from_fields(domain: &Domain, fields: &[(&str, &Field)]) -> Self {
        Snapshot {
            cells: domain.cells().iter().map(|&c| c as u64).collect(),
            fields: fields.iter().map(|(n, f)| (n.to_string(), f.values().to_vec())).collect(),
        }
    }

    pub fn total_cells(&self) -> usize {
        self.cells.iter().product::<u64>() as usize
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, SnapshotError> {
        let n = self.total_cells();
        if let Some((name, _)) = self.fields.iter().find(|(_, v)| v.len() != n) {
            return Err(SnapshotError::Format(format!("field {name} does not have {n} values")));
        }
        if let Some((name, _)) = self.fields.iter().find(|(name, _)| !name.is_ascii() || name.len() > u16::MAX as usize) {
            return Err(SnapshotError::Format(format!("field name {name:?} is not short ASCII")));
        }
        let mut out = Vec::with_capacity(16 + self.fields.len() * (n * 8 + 16));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.cells.len() as u16).to_le_bytes());
        for c in &self.cells {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&(self.fields.len() as u16).to_le_bytes());
        for (name, _) in &self.fields {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        for (_, values) in &self.fields {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(SnapshotError::Format(format!("bad magic {magic:?}, expected \"TGF1\"")));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(SnapshotError::Format(format!("unsupported version {version}, expected {VERSION}")));
        }
        let dim = r.u16()? as usize;
        let cells = (0..dim).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        let total = cells.iter().try_fold(1u64, |a, &c| a.checked_mul(c)).ok_or_else(|| SnapshotError::Format("cell count overflows".into()))?;
        let count = r.u16()? as usize;
        let mut names = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let raw = r.take(len)?;
            if !raw.is_ascii() {
                return Err(SnapshotError::Format("field name is not ASCII".into()));
            }
            names.push(String::from_utf8(raw.to_vec()).expect("ascii is utf-8"));
        }
        let expected = (count as u64).checked_mul(total).and_then(|v| v.checked_mul(8));
        if expected != Some((bytes.len() - r.pos) as u64) {
            return Err(SnapshotError::Format(format!(
                "payload has {} bytes, expected {count} fields × {total} cells × 8",
                bytes.len() - r.pos
            )));
        }
        let fields = names
            .into_iter()
            .map(|name| {
                let values = (0..total).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>, _>>()?;
                Ok((name, values))
            })
            .collect::<Result<Vec<_>, SnapshotError>>()?;
        Ok(Snapshot { cells, fields })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| SnapshotError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, SnapshotError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn write_snapshot(path: &Path, snapshot: &Snapshot) -> Result<(), SnapshotError> {
    fs::write(path, snapshot.to_bytes()?)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot, SnapshotError> {
    Snapshot::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Snapshot {
        Snapshot {
            cells: vec![3, 2],
            fields: vec![
                ("phi".into(), vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 7.0]),
                ("sigma".into(), vec![1.0; 6]),
            ],
        }
    }

    #[test]
    fn layout_is_as_documented() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..4], b"TGF1");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..8], &[2, 0]);
        assert_eq!(&b[8..16], &3u64.to_le_bytes());
        assert_eq!(&b[24..26], &[2, 0]);
        assert_eq!(&b[26..28], &[3, 0]);
        assert_eq!(&b[28..31], b"phi");
        assert_eq!(b.len(), 31 + 2 + 5 + 2 * 6 * 8);
    }

    #[test]
    fn round_trip_and_format_errors() {
        let s = sample();
        let b = s.to_bytes().unwrap();
        let back = Snapshot::from_bytes(&b).unwrap();
        assert_eq!(back.cells, s.cells);
        for ((n1, v1), (n2, v2)) in back.fields.iter().zip(&s.fields) {
            assert_eq!(n1, n2);
            assert!(v1.iter().zip(v2).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        for cut in [0, 3, 10, 30, b.len() - 1] {
            assert!(matches!(Snapshot::from_bytes(&b[..cut]), Err(SnapshotError::Format(_))), "cut {cut}");
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        let msg = Snapshot::from_bytes(&bad).unwrap_err().to_string();
        assert!(msg.contains("\"TGF1\""), "{msg}");
        let mut bad = b;
        bad[4] = 2;
        assert!(Snapshot::from_bytes(&bad).unwrap_err().to_string().contains("version"));
    }
}
