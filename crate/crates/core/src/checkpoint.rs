//! Binary parameter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"GMLP"
//! version u32            (currently 1)
//! count   u64            number of entries
//! entry*  name_len u32, name (UTF-8), dtype u8 (1 = f32, 2 = f64),
//!         rank u32, extents u64 × rank, payload (LE scalars, row-major)
//! ```
//!
//! Trailing bytes after the last entry are rejected.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::models::{ParamSpec, ParamStore};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"GMLP";
pub const VERSION: u32 = 1;
const MAX_RANK: u32 = 8;

/// A decoded tensor of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32(t) => t.shape(),
            Self::F64(t) => t.shape(),
        }
    }

    pub fn to_dtype<T: Scalar>(&self) -> Tensor<T> {
        match self {
            Self::F32(t) => t.to_dtype(),
            Self::F64(t) => t.to_dtype(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: IndexMap<String, AnyTensor>,
}

impl Checkpoint {
    /// Rebuilds a parameter store, converting precision when the file's
    /// dtype differs from `T`.
    pub fn into_store<T: Scalar>(self, specs: &[ParamSpec]) -> Result<ParamStore<T>> {
        let tensors = self
            .tensors
            .into_iter()
            .map(|(k, v)| (k, v.to_dtype::<T>()))
            .collect();
        ParamStore::from_tensors(specs, tensors)
    }
}

fn header(count: usize, capacity: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + capacity);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    out
}

fn put_entry<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE as u8);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = header(store.len(), store.num_scalars() * T::SIZE);
    for (name, p) in store.iter() {
        put_entry(&mut out, name, &p.tensor);
    }
    out
}

impl Checkpoint {
    /// Encodes the entries as decoded, dtypes preserved. The format is
    /// canonical: `decode(b)?.to_bytes() == b` for every accepted `b`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header(self.tensors.len(), 0);
        for (name, t) in &self.tensors {
            match t {
                AnyTensor::F32(t) => put_entry(&mut out, name, t),
                AnyTensor::F64(t) => put_entry(&mut out, name, t),
            }
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(self.fail(format!(
                "truncated: {what} needs {n} bytes, {remaining} remain"
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor<T: Scalar>(&mut self, shape: Vec<usize>, count: usize) -> Result<Tensor<T>> {
        let bytes = self.take(count * T::SIZE, "payload")?;
        let data = bytes.chunks_exact(T::SIZE).map(T::read_le).collect();
        Tensor::new(shape, data)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.u64("entry count")?;
    let mut ckpt = Checkpoint::default();
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint {
                offset: start + 4,
                msg: "name is not UTF-8".into(),
            })?
            .to_string();
        let dtype = match r.u8("dtype")? {
            1 => DType::F32,
            2 => DType::F64,
            other => return Err(r.fail(format!("unknown dtype tag {other}"))),
        };
        let rank = r.u32("rank")?;
        if rank > MAX_RANK {
            return Err(r.fail(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64("extent")?).map_err(|_| r.fail("extent overflows usize"))?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| r.fail("element count overflows"))?;
            shape.push(d);
        }
        let size = match dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        if count.checked_mul(size).is_none() {
            return Err(r.fail("payload size overflows"));
        }
        let tensor = match dtype {
            DType::F32 => AnyTensor::F32(r.tensor(shape, count)?),
            DType::F64 => AnyTensor::F64(r.tensor(shape, count)?),
        };
        if ckpt.tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint {
                offset: start,
                msg: format!("duplicate entry `{name}`"),
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ckpt)
}

/// Decodes and rebuilds a store in one step.
pub fn load<T: Scalar>(bytes: &[u8], specs: &[ParamSpec]) -> Result<ParamStore<T>> {
    decode(bytes)?.into_store(specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, param_specs, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro<T: Scalar>() -> (ParamStore<T>, Vec<ParamSpec>) {
        let cfg = ModelConfig::micro();
        let (store, _) = build_model::<T, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (store, param_specs(&cfg))
    }

    #[test]
    fn round_trip_is_bitwise_both_dtypes() {
        let (s64, specs) = micro::<f64>();
        let bytes = encode(&s64);
        let back: ParamStore<f64> = load(&bytes, &specs).unwrap();
        assert_eq!(back, s64);
        assert_eq!(encode(&back), bytes);

        let (s32, specs) = micro::<f32>();
        let bytes = encode(&s32);
        let back: ParamStore<f32> = load(&bytes, &specs).unwrap();
        assert_eq!(back, s32);
        let ck = decode(&bytes).unwrap();
        assert!(ck.tensors.values().all(|t| t.dtype() == DType::F32));
        assert_eq!(ck.to_bytes(), bytes);
    }

    #[test]
    fn mixed_dtypes_reencode_exactly() {
        let mut ck = Checkpoint::default();
        ck.tensors.insert("a".into(), AnyTensor::F32(Tensor::from_f64(vec![2], &[1.5, -0.0]).unwrap()));
        ck.tensors.insert("b".into(), AnyTensor::F64(Tensor::from_f64(vec![1, 0], &[]).unwrap()));
        ck.tensors.insert("".into(), AnyTensor::F64(Tensor::scalar(f64::NAN)));
        let bytes = ck.to_bytes();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.tensors.keys().collect::<Vec<_>>(), ["a", "b", ""]);
    }

    #[test]
    fn every_truncation_is_rejected_with_offset() {
        let (s, _) = micro::<f32>();
        let mut small = ParamStore::<f32>::default();
        for (name, p) in s.iter().take(3) {
            small.insert(name, p.clone()).unwrap();
        }
        let bytes = encode(&small);
        for cut in 0..bytes.len() {
            match decode(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn malformed_headers() {
        let (s, _) = micro::<f64>();
        let good = encode(&s);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint { offset: 8, .. })));
        let mut bad = good.clone();
        bad.push(0);
        assert!(decode(&bad).is_err());
        // huge extent must not allocate
        let mut f = Vec::new();
        f.extend_from_slice(MAGIC);
        f.extend_from_slice(&1u32.to_le_bytes());
        f.extend_from_slice(&1u64.to_le_bytes());
        f.extend_from_slice(&1u32.to_le_bytes());
        f.push(b'w');
        f.push(2);
        f.extend_from_slice(&2u32.to_le_bytes());
        f.extend_from_slice(&u64::MAX.to_le_bytes());
        f.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode(&f).is_err());
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let (s, specs) = micro::<f64>();
        let mut ck = decode(&encode(&s)).unwrap();
        ck.tensors.shift_remove("final_norm.gamma");
        assert!(matches!(ck.into_store::<f64>(&specs), Err(Error::MissingParam(_))));
        let mut ck = decode(&encode(&s)).unwrap();
        ck.tensors
            .insert("extra".into(), AnyTensor::F64(Tensor::zeros(vec![1])));
        assert!(matches!(ck.into_store::<f64>(&specs), Err(Error::NameMismatch(_))));
    }
}
