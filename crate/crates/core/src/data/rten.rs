//! RTEN: a minimal little-endian container of named tensors.
//!
//! ```text
//! "RTEN" | version: u16 | count: u32 | record*
//! record = name_len: u16 | name: utf8 | dtype: u8 | ndim: u8 | dims: u32[ndim] | payload
//! ```
//!
//! dtype 0 is `f64`, dtype 1 is `u32`. Payloads are little-endian and hold
//! exactly `product(dims)` elements.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, RtenError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RTEN";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum RtenData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl RtenData {
    pub fn len(&self) -> usize {
        match self {
            RtenData::F64(v) => v.len(),
            RtenData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> u8 {
        match self {
            RtenData::F64(_) => 0,
            RtenData::U32(_) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RtenRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: RtenData,
}

impl RtenRecord {
    pub fn f64(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        Self { name: name.into(), dims, data: RtenData::F64(data) }
    }

    pub fn u32(name: impl Into<String>, dims: Vec<usize>, data: Vec<u32>) -> Self {
        Self { name: name.into(), dims, data: RtenData::U32(data) }
    }

    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self::f64(name, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Result<Tensor, Error> {
        match &self.data {
            RtenData::F64(v) => Tensor::new(self.dims.clone(), v.clone()),
            RtenData::U32(v) => Tensor::new(self.dims.clone(), v.iter().map(|&x| x as f64).collect()),
        }
    }
}

pub fn encode(records: &[RtenRecord]) -> Result<Vec<u8>, RtenError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(records.len()).map_err(|_| RtenError::TooLarge("record count".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for r in records {
        if !seen.insert(r.name.as_str()) {
            return Err(RtenError::DuplicateName(r.name.clone()));
        }
        let expected: usize = r.dims.iter().product();
        if expected != r.data.len() {
            return Err(RtenError::PayloadMismatch { name: r.name.clone(), len: r.data.len(), dims: r.dims.clone() });
        }
        let name_len = u16::try_from(r.name.len()).map_err(|_| RtenError::TooLarge(r.name.clone()))?;
        let ndim = u8::try_from(r.dims.len()).map_err(|_| RtenError::TooLarge(r.name.clone()))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.data.dtype());
        out.push(ndim);
        for &d in &r.dims {
            let d = u32::try_from(d).map_err(|_| RtenError::TooLarge(r.name.clone()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &r.data {
            RtenData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RtenData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], RtenError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(RtenError::Truncated { context: context.to_string() }),
        }
    }

    fn u8(&mut self, context: &str) -> Result<u8, RtenError> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &str) -> Result<u16, RtenError> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: &str) -> Result<u32, RtenError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<RtenRecord>, RtenError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(RtenError::BadMagic { found: magic.try_into().unwrap() });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(RtenError::UnsupportedVersion(version));
    }
    let count = r.u32("record count")?;
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(count.min(1024) as usize);
    for i in 0..count {
        let ctx = format!("record {i}");
        let name_len = r.u16(&ctx)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &ctx)?).map_err(|_| RtenError::InvalidName)?.to_string();
        if !seen.insert(name.clone()) {
            return Err(RtenError::DuplicateName(name));
        }
        let ctx = format!("record {name:?}");
        let dtype = r.u8(&ctx)?;
        let ndim = r.u8(&ctx)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32(&ctx)? as usize);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| RtenError::TooLarge(name.clone()))?;
        let data = match dtype {
            0 => {
                let raw = r.take(n.checked_mul(8).ok_or_else(|| RtenError::TooLarge(name.clone()))?, &ctx)?;
                RtenData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            1 => {
                let raw = r.take(n.checked_mul(4).ok_or_else(|| RtenError::TooLarge(name.clone()))?, &ctx)?;
                RtenData::U32(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            other => return Err(RtenError::UnknownDtype(other)),
        };
        records.push(RtenRecord { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(RtenError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(records)
}

pub fn write_rten(path: &Path, records: &[RtenRecord]) -> Result<(), Error> {
    let bytes = encode(records)?;
    std::fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn read_rten(path: &Path) -> Result<Vec<RtenRecord>, Error> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(decode(&bytes)?)
}

/// Looks up a record by name.
pub fn find<'a>(records: &'a [RtenRecord], name: &str) -> Option<&'a RtenRecord> {
    records.iter().find(|r| r.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_container_round_trips() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes.len(), 10);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn scalar_round_trips_bit_exactly() {
        let r = RtenRecord::f64("x", vec![], vec![-0.0]);
        let back = decode(&encode(std::slice::from_ref(&r)).unwrap()).unwrap();
        assert_eq!(back.len(), 1);
        let RtenData::F64(v) = &back[0].data else { panic!("wrong dtype") };
        assert_eq!(v[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back[0].name, "x");
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[RtenRecord::u32("ab", vec![2], vec![1, 258])]).unwrap();
        let expected: Vec<u8> = [
            &b"RTEN"[..],
            &[1, 0],
            &[1, 0, 0, 0],
            &[2, 0],
            b"ab",
            &[1, 1],
            &[2, 0, 0, 0],
            &[1, 0, 0, 0],
            &[2, 1, 0, 0],
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn distinct_errors() {
        let good = encode(&[RtenRecord::f64("a", vec![2], vec![1.0, 2.0])]).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(RtenError::BadMagic { .. })));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(decode(truncated), Err(RtenError::Truncated { .. })));

        let dup = [RtenRecord::f64("a", vec![1], vec![1.0]), RtenRecord::f64("a", vec![1], vec![2.0])];
        assert!(matches!(encode(&dup), Err(RtenError::DuplicateName(_))));

        // Hand-assemble a container with a duplicate name to exercise the reader.
        let one = encode(&[RtenRecord::f64("a", vec![1], vec![1.0])]).unwrap();
        let mut two = one.clone();
        two[6] = 2;
        two.extend_from_slice(&one[10..]);
        assert!(matches!(decode(&two), Err(RtenError::DuplicateName(_))));

        let codes: HashSet<u8> = [
            RtenError::BadMagic { found: *b"XXXX" }.code(),
            RtenError::Truncated { context: String::new() }.code(),
            RtenError::DuplicateName(String::new()).code(),
        ]
        .into_iter()
        .collect();
        assert_eq!(codes.len(), 3);
    }

    #[test]
    fn payload_mismatch_rejected_on_write() {
        let r = RtenRecord::f64("a", vec![3], vec![1.0]);
        assert!(matches!(encode(&[r]), Err(RtenError::PayloadMismatch { .. })));
    }

    fn arb_record() -> impl Strategy<Value = (Vec<usize>, bool, Vec<u64>)> {
        (prop::collection::vec(0usize..4, 0..4), any::<bool>(), prop::collection::vec(any::<u64>(), 0..64))
    }

    proptest! {
        #[test]
        fn fuzz_round_trip(recs in prop::collection::vec(arb_record(), 0..6)) {
            let records: Vec<RtenRecord> = recs
                .into_iter()
                .enumerate()
                .map(|(i, (dims, is_f64, bits))| {
                    let n: usize = dims.iter().product();
                    let pick = |j: usize| bits.get(j % bits.len().max(1)).copied().unwrap_or(j as u64);
                    if is_f64 {
                        RtenRecord::f64(format!("r{i}"), dims, (0..n).map(|j| f64::from_bits(pick(j))).collect())
                    } else {
                        RtenRecord::u32(format!("r{i}"), dims, (0..n).map(|j| pick(j) as u32).collect())
                    }
                })
                .collect();
            let bytes = encode(&records).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }
}
