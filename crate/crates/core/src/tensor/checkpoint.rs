//! Named-tensor container shared by every persisted artifact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "BAECKPT\0"
//! version  u32
//! count    u32      number of entries
//! entry*   name_len u32, name (UTF-8), rank u32, dims u64 x rank,
//!          values f64 x product(dims)
//! ```
//!
//! Trailing bytes after the last entry are rejected.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BAECKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: u32 = 8;
const MAX_NAME: u32 = 4096;

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &Checkpoint) {
        for (n, t) in &other.entries {
            self.insert(format!("{prefix}{n}"), t.clone());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let ckpt = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last entry",
                cursor.len()
            )));
        }
        Ok(ckpt)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic, "header")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = read_u32(r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let count = read_u32(r, "entry count")?;
        let mut entries = Vec::new();
        for i in 0..count {
            let name_len = read_u32(r, "name length")?;
            if name_len > MAX_NAME {
                return Err(Error::Checkpoint(format!(
                    "entry {i}: implausible name length {name_len}"
                )));
            }
            let mut name = vec![0u8; name_len as usize];
            read_exact(r, &mut name, "name")?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint(format!("entry {i}: name is not UTF-8")))?;
            let rank = read_u32(r, "rank")?;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!(
                    "entry `{name}`: implausible rank {rank}"
                )));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(r, &mut b, "dimension")?;
                let d = usize::try_from(u64::from_le_bytes(b))
                    .map_err(|_| Error::Checkpoint(format!("entry `{name}`: dimension overflow")))?;
                numel = numel
                    .checked_mul(d)
                    .filter(|&n| n <= 1 << 32)
                    .ok_or_else(|| Error::Checkpoint(format!("entry `{name}`: too many values")))?;
                shape.push(d);
            }
            let mut raw = vec![0u8; numel * 8];
            read_exact(r, &mut raw, "values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(&shape, data)
                .map_err(|e| Error::Checkpoint(format!("entry `{name}`: {e}")))?;
            entries.push((name, tensor));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::Checkpoint(format!("truncated file while reading {what}"))
        }
        _ => Error::Checkpoint(format!("read failed at {what}: {e}")),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::new(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap());
        c.insert("b", Tensor::scalar(0.125));
        c
    }

    #[test]
    fn header_layout_is_pinned() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], b"BAECKPT\0");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(bytes[20], b'w');
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Checkpoint(_))));

        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        let err = Checkpoint::from_bytes(&bad_version).unwrap_err();
        assert!(err.to_string().contains("version"));

        let truncated = &bytes[..bytes.len() - 3];
        let err = Checkpoint::from_bytes(truncated).unwrap_err();
        assert!(err.to_string().contains("truncated"));

        let mut trailing = bytes;
        trailing.push(0);
        assert!(Checkpoint::from_bytes(&trailing).is_err());
    }

    #[test]
    fn insert_replaces_in_place() {
        let mut c = sample();
        c.insert("w", Tensor::scalar(1.0));
        assert_eq!(c.len(), 2);
        assert_eq!(c.entries()[0].0, "w");
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f64>(), 1..40),
            name in "[a-z_.0-9]{1,16}",
        ) {
            let mut c = Checkpoint::new();
            let n = values.len();
            c.insert(name.clone(), Tensor::new(&[n], values).unwrap());
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            let (a, b) = (c.get(&name).unwrap(), back.get(&name).unwrap());
            prop_assert!(a.shape() == b.shape());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
