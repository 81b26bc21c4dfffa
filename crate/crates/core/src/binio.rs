//! Little-endian primitives shared by the binary file formats.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_TENSOR_LEN: usize = 1 << 28;

pub(crate) struct LeReader<R> {
    inner: R,
    what: &'static str,
}

impl<R: Read> LeReader<R> {
    pub(crate) fn new(inner: R, what: &'static str) -> Self {
        Self { inner, what }
    }

    pub(crate) fn bytes(&mut self, buf: &mut [u8], field: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Truncated(format!("{} ended while reading {field}", self.what)),
            _ => Error::Io(e),
        })
    }

    pub(crate) fn u8(&mut self, field: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.bytes(&mut b, field)?;
        Ok(b[0])
    }

    pub(crate) fn u16(&mut self, field: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.bytes(&mut b, field)?;
        Ok(u16::from_le_bytes(b))
    }

    pub(crate) fn u32(&mut self, field: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b, field)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn u64(&mut self, field: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, field)?;
        Ok(u64::from_le_bytes(b))
    }

    pub(crate) fn string(&mut self, field: &str) -> Result<String> {
        let len = self.u16(field)? as usize;
        let mut buf = vec![0u8; len];
        self.bytes(&mut buf, field)?;
        String::from_utf8(buf).map_err(|_| Error::Format(format!("{field} is not valid UTF-8")))
    }

    pub(crate) fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let mut buf = vec![0u8; n * 4];
        self.bytes(&mut buf, field)?;
        Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let mut m = [0u8; 8];
        self.bytes(&mut m, "magic")?;
        if &m != expected {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(&m).into_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn at_end(&mut self) -> Result<bool> {
        let mut b = [0u8; 1];
        Ok(self.inner.read(&mut b)? == 0)
    }
}

pub(crate) fn write_named_tensors<W: Write, T: Scalar>(w: &mut W, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub(crate) fn read_named_tensors<R: Read, T: Scalar>(r: &mut LeReader<R>) -> Result<Vec<(String, Tensor<T>)>> {
    let n = r.u32("tensor count")?;
    let mut out = Vec::new();
    for i in 0..n {
        let name = r.string(&format!("tensor {i} name"))?;
        let rank = r.u32(&format!("{name} rank"))? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("{name}: unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("{name} extent"))? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n > 0 && n <= MAX_TENSOR_LEN)
            .ok_or_else(|| Error::Format(format!("{name}: implausible shape {shape:?}")))?;
        let data = r.f32s(len, &name)?.into_iter().map(|v| T::from_f64_lossy(v as f64)).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub(crate) fn write_json_block<W: Write, S: serde::Serialize>(w: &mut W, value: &S) -> Result<()> {
    let json = serde_json::to_vec(value).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

pub(crate) fn read_json_block<R: Read, S: serde::de::DeserializeOwned>(r: &mut LeReader<R>, field: &str) -> Result<S> {
    let len = r.u32(field)? as usize;
    let mut buf = vec![0u8; len];
    r.bytes(&mut buf, field)?;
    serde_json::from_slice(&buf).map_err(|e| Error::Format(format!("{field}: {e}")))
}
