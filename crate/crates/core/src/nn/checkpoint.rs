//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DACBCKPT"
//! version  u32      1
//! json_len u64      length of the JSON header
//! json     bytes    {"meta": <model config and metadata>, "kinds": {name: kind}}
//! count    u32      number of tensors
//! tensor*  name_len u32, name utf-8, dtype u8 (0 = f32, 1 = f64),
//!          rank u8, dims u64 * rank, payload (row-major, little-endian)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde_json::Value;

use super::params::{ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::DType;
use crate::Scalar;

pub const MAGIC: &[u8; 8] = b"DACBCKPT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, meta: &Value, store: &ParamStore<T>) -> std::io::Result<()> {
    let kinds: BTreeMap<&str, ParamKind> = store.entries().iter().map(|e| (e.name.as_str(), e.kind)).collect();
    let header = serde_json::json!({ "meta": meta, "kinds": kinds });
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + store.num_scalars() * T::DTYPE.width() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(T::DTYPE.code());
        buf.push(e.value.shape().len() as u8);
        for &d in e.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.value.data() {
            v.write_le(&mut buf);
        }
    }
    w.write_all(&buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a checkpoint, converting stored values to `T`.
pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<(Value, ParamStore<T>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("read failed: {e}")))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let json_len = c.u64()? as usize;
    let mut header: Value = serde_json::from_slice(c.take(json_len)?)?;
    let kinds: BTreeMap<String, ParamKind> = serde_json::from_value(header["kinds"].take())?;
    let meta = header["meta"].take();
    let count = c.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let dtype = DType::from_code(c.u8()?).ok_or_else(|| Error::Format(format!("{name}: unknown dtype")))?;
        let rank = c.u8()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = c.take(n * dtype.width())?;
        let data: Vec<T> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect(),
        };
        let kind = *kinds
            .get(&name)
            .ok_or_else(|| Error::Format(format!("{name}: no kind recorded")))?;
        store.insert(name, kind, Tensor::from_vec(&shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((meta, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Encoder, ModelConfig};
    use crate::rng::stream;

    #[test]
    fn round_trip_and_dtype_conversion() {
        let mut store = ParamStore::<f32>::new();
        let cfg = ModelConfig::desk(1, 8, 2, 10);
        Encoder::init(&mut store, "", &cfg, &mut stream(3, "init")).unwrap();
        let meta = serde_json::json!({ "config": cfg });
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &meta, &store).unwrap();
        assert_eq!(&buf[..8], MAGIC);

        let (meta2, back) = read_checkpoint::<f32, _>(buf.as_slice()).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back, store);

        let (_, wide) = read_checkpoint::<f64, _>(buf.as_slice()).unwrap();
        assert_eq!(
            wide.entries()[0].value.data()[0] as f32,
            store.entries()[0].value.data()[0]
        );
    }

    #[test]
    fn corrupt_input_rejected() {
        assert!(read_checkpoint::<f32, _>(&b"NOTACKPT"[..]).is_err());
        let mut store = ParamStore::<f64>::new();
        store.insert("w", ParamKind::Linear, Tensor::zeros(&[2, 2])).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &Value::Null, &store).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint::<f64, _>(buf.as_slice()).is_err());
    }
}
