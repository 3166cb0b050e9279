//! Binary checkpoint format:
//!
//! ```text
//! "GVOCKPT1" | u32 count | count x ( u16 name_len | name | u8 dtype | u8 ndim | u32 dims.. | values.. )
//! ```
//!
//! All integers and values are little-endian. Model settings are stored as
//! `meta.*` scalars and the optimizer as `adam.step`, `adam.m.<param>` and
//! `adam.v.<param>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig};
use crate::tensor::{AdamState, DType, Moments, ParamSet, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"GVOCKPT1";

const STEP_KEY: &str = "adam.step";
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

/// A stored tensor in its on-disk precision.
#[derive(Clone, Debug, PartialEq)]
pub enum RawTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl RawTensor {
    pub fn dtype(&self) -> DType {
        match self {
            RawTensor::F32(_) => DType::F32,
            RawTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            RawTensor::F32(t) => t.shape(),
            RawTensor::F64(t) => t.shape(),
        }
    }

    /// Converted to `T`; exact when the stored precision is `T`.
    pub fn to_real<T: Real>(&self) -> Tensor<T> {
        match self {
            RawTensor::F32(t) => t.cast(),
            RawTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_real<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => RawTensor::F32(t.cast()),
            DType::F64 => RawTensor::F64(t.cast()),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            RawTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            RawTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

/// Serializes named tensors.
pub fn write_checkpoint(entries: &[(String, RawTensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(entries.len()).map_err(|_| Error::InvalidArgument("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("entry name of {} bytes is too long", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype().code());
        let ndim = u8::try_from(t.shape().len()).map_err(|_| Error::InvalidArgument(format!("{name}: too many dims")))?;
        out.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("{name}: extent {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        t.write(&mut out);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn read_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<(String, RawTensor)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic"));
    }
    let count = r.u32("entry count")?;
    let mut entries: Vec<(String, RawTensor)> = Vec::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| {
                r.pos = start + 2;
                r.fail("entry name is not UTF-8")
            })?
            .to_string();
        if entries.iter().any(|(n, _)| *n == name) {
            r.pos = start;
            return Err(r.fail(format!("duplicate entry {name:?}")));
        }
        let code_pos = r.pos;
        let dtype = DType::from_code(r.u8("dtype")?).ok_or_else(|| {
            r.pos = code_pos;
            r.fail(format!("{name}: unknown dtype code"))
        })?;
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = r.u32("dimension")? as usize;
            if d == 0 {
                return Err(r.fail(format!("{name}: zero extent")));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| r.fail(format!("{name}: element count overflows")))?;
            shape.push(d);
        }
        let nbytes = numel
            .checked_mul(dtype.size())
            .ok_or_else(|| r.fail(format!("{name}: byte count overflows")))?;
        let raw = r.take(nbytes, "tensor values")?;
        let t = match dtype {
            DType::F32 => RawTensor::F32(
                Tensor::new(shape, raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect())
                    .expect("extents checked"),
            ),
            DType::F64 => RawTensor::F64(
                Tensor::new(shape, raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect())
                    .expect("extents checked"),
            ),
        };
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

/// Writes to a temporary sibling then renames it over `path`.
pub fn save_checkpoint(path: &Path, entries: &[(String, RawTensor)]) -> Result<()> {
    let bytes = write_checkpoint(entries)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, RawTensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, path)
}

impl<T: Real> Checkpoint<T> {
    pub fn to_entries(&self) -> Vec<(String, RawTensor)> {
        let mut out: Vec<(String, RawTensor)> = self
            .model
            .to_meta()
            .into_iter()
            .map(|(k, v)| (k.to_string(), RawTensor::F64(Tensor::scalar(v))))
            .collect();
        for e in self.params.iter() {
            out.push((e.name.clone(), RawTensor::from_real(&e.value)));
        }
        out.push((STEP_KEY.into(), RawTensor::F64(Tensor::scalar(self.optimizer.step as f64))));
        for mo in &self.optimizer.moments {
            out.push((format!("{M_PREFIX}{}", mo.name), RawTensor::from_real(&mo.m)));
            out.push((format!("{V_PREFIX}{}", mo.name), RawTensor::from_real(&mo.v)));
        }
        out
    }

    pub fn from_entries(entries: &[(String, RawTensor)], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            offset: 0,
            msg,
        };
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let scalar = |name: &str| {
            find(name).and_then(|t| match t {
                RawTensor::F64(t) if t.len() == 1 => Some(t.data()[0]),
                _ => None,
            })
        };
        let model = ModelConfig::from_meta(scalar)?;
        let mut params = ParamSet::new();
        for (name, t) in entries {
            if name.starts_with("meta.") || name.starts_with("adam.") {
                continue;
            }
            let trainable = find(&format!("{M_PREFIX}{name}")).is_some();
            params.insert(name, t.to_real(), trainable)?;
        }
        let step = scalar(STEP_KEY).ok_or_else(|| bad(format!("missing {STEP_KEY}")))?;
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(bad(format!("invalid {STEP_KEY} {step}")));
        }
        let mut moments = Vec::new();
        for e in params.iter().filter(|e| e.trainable) {
            let get = |prefix: &str| -> Result<Tensor<T>> {
                let key = format!("{prefix}{}", e.name);
                let t = find(&key).ok_or_else(|| bad(format!("missing {key}")))?;
                if t.shape() != e.value.shape() {
                    return Err(bad(format!("{key} has shape {:?}, expected {:?}", t.shape(), e.value.shape())));
                }
                Ok(t.to_real())
            };
            moments.push(Moments {
                name: e.name.clone(),
                m: get(M_PREFIX)?,
                v: get(V_PREFIX)?,
            });
        }
        let expected = crate::model::init_params::<T>(&model, 0)?;
        for e in expected.iter() {
            match params.get(&e.name) {
                Some(t) if t.shape() == e.value.shape() => {}
                Some(t) => return Err(bad(format!("{} has shape {:?}, expected {:?}", e.name, t.shape(), e.value.shape()))),
                None => return Err(bad(format!("missing parameter {}", e.name))),
            }
        }
        if params.len() != expected.len() {
            return Err(bad("unexpected extra parameters".into()));
        }
        Ok(Checkpoint {
            model,
            params,
            optimizer: AdamState {
                step: step as u64,
                moments,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&load_checkpoint(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn p() -> &'static Path {
        Path::new("x.ckpt")
    }

    #[test]
    fn empty_file_is_valid() {
        let bytes = write_checkpoint(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert!(read_checkpoint(&bytes, p()).unwrap().is_empty());
    }

    #[test]
    fn raw_round_trip_and_layout() {
        let entries = vec![
            ("a".to_string(), RawTensor::F32(Tensor::new(vec![2], vec![1.5f32, -0.0]).unwrap())),
            ("bb".to_string(), RawTensor::F64(Tensor::scalar(f64::MIN_POSITIVE))),
        ];
        let bytes = write_checkpoint(&entries).unwrap();
        assert_eq!(&bytes[..8], b"GVOCKPT1");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'a');
        assert_eq!(bytes[15], 0);
        assert_eq!(bytes[16], 1);
        assert_eq!(&bytes[17..21], &2u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &1.5f32.to_le_bytes());
        let back = read_checkpoint(&bytes, p()).unwrap();
        assert_eq!(back, entries);
        if let RawTensor::F32(t) = &back[0].1 {
            assert!(t.data()[1].is_sign_negative());
        }
    }

    #[test]
    fn every_truncation_fails_with_offset() {
        let entries = vec![("w".to_string(), RawTensor::F64(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()))];
        let bytes = write_checkpoint(&entries).unwrap();
        for cut in 0..bytes.len() {
            match read_checkpoint(&bytes[..cut], p()) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad, p()), Err(Error::Checkpoint { offset: 0, .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = ModelConfig::new(Variant::SrnnSe, 1.0 / 64.0);
        let mut ck = Checkpoint::<f32>::fresh(cfg, 5).unwrap();
        ck.optimizer.step = 17;
        ck.optimizer.moments[0].v.data_mut()[0] = 3.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path).unwrap();
        assert!(back.params.bit_identical(&ck.params));
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.model, ck.model);
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }
}
