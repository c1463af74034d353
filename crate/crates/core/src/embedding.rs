//! `EMBF` v1: a flat little-endian file of keyed `f32` vectors.
//!
//! ```text
//! magic    "EMBF"                 4 bytes
//! version  u16 = 1
//! flags    u8   (bit 0: vectors are L2-normalized)
//! reserved u8   = 0
//! dim      u32
//! count    u64
//! count x { key_len u16, key utf-8 bytes, dim x f32 }
//! ```
//!
//! Records are written in ascending byte order of their keys, so a store always
//! serializes to the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::{fsutil, Error, Result};

pub const MAGIC: [u8; 4] = *b"EMBF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 4 + 8;
pub const FLAG_NORMALIZED: u8 = 0b1;
/// Allowed deviation of `‖v‖₂` from 1 for normalized stores.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Key of a ground-truth crop vector.
pub fn ann_key(ann_id: u64) -> String {
    format!("ann:{ann_id}")
}

/// Key of a class prompt vector; `normalized_name` must already be normalized.
pub fn prompt_key(normalized_name: &str) -> String {
    format!("prompt:{normalized_name}")
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Returns `v / ‖v‖₂`, or `None` for a zero or non-finite vector.
pub fn normalized(v: &[f32]) -> Option<Vec<f32>> {
    let n = l2_norm(v);
    (n.is_finite() && n > 0.0).then(|| v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dimension: usize,
    normalized: bool,
    records: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new(dimension: usize, normalized: bool) -> Result<Self> {
        if dimension == 0 || dimension > u32::MAX as usize {
            return Err(Error::InvalidValue(format!(
                "embedding dimension {dimension} out of range"
            )));
        }
        Ok(Self {
            dimension,
            normalized,
            records: BTreeMap::new(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Adds a record. Normalization is checked by [`EmbeddingStore::validate`], not here.
    pub fn insert(&mut self, key: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let key = key.into();
        if key.len() > usize::from(u16::MAX) {
            return Err(Error::InvalidKey(key));
        }
        if vector.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: vector.len(),
            });
        }
        if self.records.contains_key(&key) {
            return Err(Error::DuplicateKey(key));
        }
        self.records.insert(key, vector);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.records.get(key).map(Vec::as_slice)
    }

    /// Records in serialization order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> + '_ {
        self.records.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Checks the invariants a store must satisfy before it is written.
    pub fn validate(&self) -> Result<()> {
        for (key, v) in &self.records {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidValue(format!("non-finite component in {key:?}")));
            }
            if self.normalized {
                let norm = l2_norm(v);
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(Error::NotNormalized {
                        key: key.clone(),
                        norm,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self
                .records
                .keys()
                .map(|k| 2 + k.len() + 4 * self.dimension)
                .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(if self.normalized { FLAG_NORMALIZED } else { 0 });
        out.push(0);
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (key, v) in &self.records {
            out.extend_from_slice(&(key.len() as u16).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) {
                Error::TruncatedFile("header".into())
            } else {
                Error::BadMagic
            });
        }
        if bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        r.pos = 4;
        let version = u16::from_le_bytes(r.array("header")?);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let [flags] = r.array::<1>("header")?;
        let [_reserved] = r.array::<1>("header")?;
        let dimension = u32::from_le_bytes(r.array("header")?) as usize;
        let count = u64::from_le_bytes(r.array("header")?);
        if dimension == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }

        let mut store = EmbeddingStore::new(dimension, flags & FLAG_NORMALIZED != 0)?;
        for i in 0..count {
            let what = || format!("record {i} of {count}");
            let key_len = u16::from_le_bytes(r.array_with(what)?) as usize;
            let key_bytes = r.take(key_len, what)?;
            let key = std::str::from_utf8(key_bytes)
                .map_err(|_| Error::InvalidKey(String::from_utf8_lossy(key_bytes).into_owned()))?
                .to_owned();
            let raw = r.take(4 * dimension, what)?;
            let vector = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(key, vector)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::MalformedFile(format!(
                "{} trailing bytes after {count} records",
                bytes.len() - r.pos
            )));
        }
        store.validate()?;
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl Fn() -> String) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::TruncatedFile(what()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array_with<const N: usize>(&mut self, what: impl Fn() -> String) -> Result<[u8; N]> {
        let s = self.take(N, what)?;
        Ok(s.try_into().expect("slice has length N"))
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        self.array_with(|| what.to_owned())
    }
}

pub fn read_store(path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::from_bytes(&fsutil::read(path)?)
}

pub fn write_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &store.to_bytes()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f32]) -> Vec<f32> {
        normalized(v).unwrap()
    }

    #[test]
    fn empty_store_round_trips() {
        let s = EmbeddingStore::new(4, true).unwrap();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.dimension(), 4);
        assert!(back.is_empty());
    }

    #[test]
    fn file_size_matches_layout() {
        // header 20 + ("ann:1": 2 + 5 + 12) + ("prompt:dog": 2 + 10 + 12) = 63
        let mut s = EmbeddingStore::new(3, true).unwrap();
        s.insert("ann:1", unit(&[1.0, 2.0, 2.0])).unwrap();
        s.insert("prompt:dog", unit(&[0.0, 0.0, 1.0])).unwrap();
        assert_eq!(s.to_bytes().unwrap().len(), 63);
        assert_eq!(s.encoded_len(), 63);
    }

    #[test]
    fn header_layout_is_exact() {
        let mut s = EmbeddingStore::new(2, false).unwrap();
        s.insert("k", vec![1.5, -2.0]).unwrap();
        let b = s.to_bytes().unwrap();
        assert_eq!(&b[..4], b"EMBF");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 0);
        assert_eq!(b[7], 0);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..20], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[20..22], &[1, 0]);
        assert_eq!(b[22], b'k');
        assert_eq!(&b[23..27], &1.5f32.to_le_bytes());
        assert_eq!(&b[27..31], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn writes_are_deterministic_regardless_of_insertion_order() {
        let mut a = EmbeddingStore::new(2, true).unwrap();
        a.insert("prompt:b", unit(&[1.0, 1.0])).unwrap();
        a.insert("ann:2", unit(&[1.0, 0.0])).unwrap();
        let mut b = EmbeddingStore::new(2, true).unwrap();
        b.insert("ann:2", unit(&[1.0, 0.0])).unwrap();
        b.insert("prompt:b", unit(&[1.0, 1.0])).unwrap();
        assert_eq!(a.to_bytes().unwrap(), a.to_bytes().unwrap());
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn non_normalized_vector_is_rejected_before_write() {
        let mut s = EmbeddingStore::new(2, true).unwrap();
        s.insert("ann:1", vec![3.0, 4.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.embf");
        assert!(matches!(write_store(&s, &path), Err(Error::NotNormalized { .. })));
        assert!(!path.exists());
    }

    #[test]
    fn lookup_is_exact() {
        let mut s = EmbeddingStore::new(2, true).unwrap();
        s.insert(prompt_key("dog"), unit(&[0.6, 0.8])).unwrap();
        assert_eq!(s.get("prompt:dog"), Some(&unit(&[0.6, 0.8])[..]));
        assert_eq!(s.get("prompt:cat"), None);
        assert_eq!(s.get("prompt:Dog"), None);
    }

    #[test]
    fn truncation_is_detected() {
        let mut s = EmbeddingStore::new(2, false).unwrap();
        for i in 0..3 {
            s.insert(ann_key(i), vec![i as f32, 1.0]).unwrap();
        }
        let bytes = s.to_bytes().unwrap();
        let per_record = 2 + 5 + 8;
        // declares 3 records but holds 2
        let cut = &bytes[..bytes.len() - per_record];
        assert!(matches!(EmbeddingStore::from_bytes(cut), Err(Error::TruncatedFile(_))));
        for len in [0, 3, 10, 19] {
            let err = EmbeddingStore::from_bytes(&bytes[..len]).unwrap_err();
            assert!(matches!(err, Error::TruncatedFile(_)), "{len}: {err}");
        }
    }

    #[test]
    fn duplicate_keys_are_detected() {
        let mut s = EmbeddingStore::new(1, false).unwrap();
        s.insert("a", vec![1.0]).unwrap();
        s.insert("b", vec![2.0]).unwrap();
        let mut bytes = s.to_bytes().unwrap();
        let second_key = HEADER_LEN + 2 + 1 + 4 + 2;
        bytes[second_key] = b'a';
        assert!(matches!(EmbeddingStore::from_bytes(&bytes), Err(Error::DuplicateKey(k)) if k == "a"));
    }

    #[test]
    fn header_errors() {
        assert!(matches!(EmbeddingStore::from_bytes(b"EMBX\x01\x00"), Err(Error::BadMagic)));
        let mut b = EmbeddingStore::new(1, false).unwrap().to_bytes().unwrap();
        b[4] = 2;
        assert!(matches!(EmbeddingStore::from_bytes(&b), Err(Error::UnsupportedVersion(2))));
        let mut b = EmbeddingStore::new(1, false).unwrap().to_bytes().unwrap();
        b[8] = 0;
        assert!(matches!(EmbeddingStore::from_bytes(&b), Err(Error::DimensionMismatch { .. })));
        let mut b = EmbeddingStore::new(1, false).unwrap().to_bytes().unwrap();
        b.push(0);
        assert!(matches!(EmbeddingStore::from_bytes(&b), Err(Error::MalformedFile(_))));
    }

    #[test]
    fn insert_checks_dimension() {
        let mut s = EmbeddingStore::new(3, false).unwrap();
        assert!(matches!(
            s.insert("a", vec![1.0]),
            Err(Error::DimensionMismatch { expected: 3, actual: 1 })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dim in 1usize..64,
            recs in prop::collection::btree_map("[a-z:0-9é]{0,12}", prop::collection::vec(-1e3f32..1e3, 64), 0..40),
            norm in any::<bool>(),
        ) {
            let mut s = EmbeddingStore::new(dim, norm).unwrap();
            for (k, v) in recs {
                let v = &v[..dim];
                let v = if norm { normalized(v).unwrap_or_else(|| { let mut e = vec![0.0; dim]; e[0] = 1.0; e }) } else { v.to_vec() };
                s.insert(k, v).unwrap();
            }
            let bytes = s.to_bytes().unwrap();
            let back = EmbeddingStore::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.len(), s.len());
            for ((ka, va), (kb, vb)) in s.iter().zip(back.iter()) {
                prop_assert_eq!(ka, kb);
                let bits_a: Vec<u32> = va.iter().map(|x| x.to_bits()).collect();
                let bits_b: Vec<u32> = vb.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
