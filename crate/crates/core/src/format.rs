//! Bit-exact binary container formats.
//!
//! Tensor container (`DLTN`): magic `DLTN`, version `u8 = 1`, dtype `u8`
//! (0 = f32, 1 = f64, 2 = i32, 3 = u8), ndim `u8`, `ndim` little-endian
//! `u32` dims, then the row-major little-endian payload. No padding.
//!
//! Parameter archive (`DLSA`): magic `DLSA`, `u32` entry count, then per
//! entry a `u32` length-prefixed UTF-8 name and an embedded tensor blob.
//!
//! Both codecs work on byte buffers; file IO lives in the companion
//! crate.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::format;

use crate::tensor::{Dtype, Element, LabelMap, PixelMask, Tensor4};
use crate::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"DLTN";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"DLSA";
pub const TENSOR_VERSION: u8 = 1;

/// A dtype-erased dense tensor of arbitrary rank, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dtype: Dtype,
    pub dims: Vec<u32>,
    /// Row-major little-endian element bytes.
    pub payload: Vec<u8>,
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

impl RawTensor {
    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    pub fn from_f32_slice(dims: &[u32], values: &[f32]) -> Result<RawTensor> {
        Self::from_values(Dtype::F32, dims, values.len(), |out| {
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        })
    }

    pub fn from_f64_slice(dims: &[u32], values: &[f64]) -> Result<RawTensor> {
        Self::from_values(Dtype::F64, dims, values.len(), |out| {
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        })
    }

    pub fn from_i32_slice(dims: &[u32], values: &[i32]) -> Result<RawTensor> {
        Self::from_values(Dtype::I32, dims, values.len(), |out| {
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        })
    }

    pub fn from_u8_slice(dims: &[u32], values: &[u8]) -> Result<RawTensor> {
        Self::from_values(Dtype::U8, dims, values.len(), |out| {
            out.extend_from_slice(values);
        })
    }

    fn from_values(
        dtype: Dtype,
        dims: &[u32],
        len: usize,
        write: impl FnOnce(&mut Vec<u8>),
    ) -> Result<RawTensor> {
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        if numel != len {
            return Err(Error::dim(format!(
                "dims {dims:?} imply {numel} elements, got {len}"
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::dim("tensor rank exceeds 255"));
        }
        let mut payload = Vec::with_capacity(len * dtype.size_bytes());
        write(&mut payload);
        Ok(RawTensor {
            dtype,
            dims: dims.to_vec(),
            payload,
        })
    }

    pub fn from_tensor4<T: Element>(t: &Tensor4<T>) -> RawTensor {
        let dims: Vec<u32> = t.shape().iter().map(|&d| d as u32).collect();
        let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.size_bytes());
        for &v in t.iter() {
            v.write_le(&mut payload);
        }
        RawTensor {
            dtype: T::DTYPE,
            dims,
            payload,
        }
    }

    pub fn from_labels(labels: &LabelMap) -> RawTensor {
        let dims: Vec<u32> = labels.shape().iter().map(|&d| d as u32).collect();
        RawTensor::from_i32_slice(&dims, labels.data()).expect("shape matches by construction")
    }

    pub fn from_mask(mask: &PixelMask) -> RawTensor {
        let dims: Vec<u32> = mask.shape().iter().map(|&d| d as u32).collect();
        let bytes: Vec<u8> = mask.data().iter().map(|&b| b as u8).collect();
        RawTensor::from_u8_slice(&dims, &bytes).expect("shape matches by construction")
    }

    pub fn to_f32_values(&self) -> Result<Vec<f32>> {
        if self.dtype != Dtype::F32 {
            return Err(Error::usage(format!(
                "tensor holds {:?}, expected F32",
                self.dtype
            )));
        }
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn to_f64_values(&self) -> Result<Vec<f64>> {
        if self.dtype != Dtype::F64 {
            return Err(Error::usage(format!(
                "tensor holds {:?}, expected F64",
                self.dtype
            )));
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }

    pub fn to_i32_values(&self) -> Result<Vec<i32>> {
        if self.dtype != Dtype::I32 {
            return Err(Error::usage(format!(
                "tensor holds {:?}, expected I32",
                self.dtype
            )));
        }
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Reinterprets as a rank-4 float tensor; lower-rank tensors gain
    /// leading unit dims.
    pub fn to_tensor4<T: Element>(&self) -> Result<Tensor4<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::usage(format!(
                "tensor holds {:?}, expected {:?}",
                self.dtype,
                T::DTYPE
            )));
        }
        if self.dims.len() > 4 {
            return Err(Error::dim(format!(
                "cannot view rank-{} tensor as rank 4",
                self.dims.len()
            )));
        }
        let mut shape = [1usize; 4];
        let offset = 4 - self.dims.len();
        for (i, &d) in self.dims.iter().enumerate() {
            shape[offset + i] = d as usize;
        }
        let size = T::DTYPE.size_bytes();
        let data: Vec<T> = self
            .payload
            .chunks_exact(size)
            .map(|c| T::read_le(c))
            .collect();
        Tensor4::new(shape, data)
    }

    pub fn to_labels(&self) -> Result<LabelMap> {
        if self.dims.len() != 3 {
            return Err(Error::dim(format!(
                "label map must be rank 3, got rank {}",
                self.dims.len()
            )));
        }
        let shape = [
            self.dims[0] as usize,
            self.dims[1] as usize,
            self.dims[2] as usize,
        ];
        LabelMap::new(shape, self.to_i32_values()?)
    }

    pub fn to_mask(&self) -> Result<PixelMask> {
        if self.dims.len() != 3 || self.dtype != Dtype::U8 {
            return Err(Error::dim("mask must be a rank-3 u8 tensor"));
        }
        let shape = [
            self.dims[0] as usize,
            self.dims[1] as usize,
            self.dims[2] as usize,
        ];
        PixelMask::new(shape, self.payload.iter().map(|&b| b != 0).collect())
    }

    /// Serializes into the tensor container layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * self.dims.len() + self.payload.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(TENSOR_VERSION);
        out.push(self.dtype.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses a tensor container, validating magic, version and payload
    /// length. `base_offset` shifts reported error offsets when the blob
    /// is embedded in a larger buffer.
    pub fn from_bytes_at(bytes: &[u8], base_offset: usize) -> Result<(RawTensor, usize)> {
        let need = |at: usize, n: usize| -> Result<()> {
            if bytes.len() < at + n {
                Err(fmt_err(
                    base_offset + bytes.len(),
                    format!("truncated: needed {} bytes, have {}", at + n, bytes.len()),
                ))
            } else {
                Ok(())
            }
        };
        need(0, 7)?;
        if &bytes[0..4] != TENSOR_MAGIC {
            return Err(fmt_err(base_offset, "bad magic, expected \"DLTN\""));
        }
        if bytes[4] != TENSOR_VERSION {
            return Err(fmt_err(
                base_offset + 4,
                format!("unsupported version {}", bytes[4]),
            ));
        }
        let dtype = Dtype::from_code(bytes[5])
            .ok_or_else(|| fmt_err(base_offset + 5, format!("unknown dtype code {}", bytes[5])))?;
        let ndim = bytes[6] as usize;
        need(7, 4 * ndim)?;
        let mut dims = Vec::with_capacity(ndim);
        for i in 0..ndim {
            let at = 7 + 4 * i;
            dims.push(u32::from_le_bytes([
                bytes[at],
                bytes[at + 1],
                bytes[at + 2],
                bytes[at + 3],
            ]));
        }
        let header = 7 + 4 * ndim;
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        let payload_len = numel * dtype.size_bytes();
        need(header, payload_len)?;
        let payload = bytes[header..header + payload_len].to_vec();
        Ok((
            RawTensor {
                dtype,
                dims,
                payload,
            },
            header + payload_len,
        ))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<RawTensor> {
        let (t, used) = Self::from_bytes_at(bytes, 0)?;
        if used != bytes.len() {
            return Err(fmt_err(
                used,
                format!("{} trailing bytes after payload", bytes.len() - used),
            ));
        }
        Ok(t)
    }
}

/// Serializes named tensors into a `DLSA` archive. Entry order is
/// preserved exactly as given.
pub fn encode_archive(entries: &[(String, RawTensor)]) -> Result<Vec<u8>> {
    if entries.len() > u32::MAX as usize {
        return Err(Error::usage("archive entry count exceeds u32"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&tensor.to_bytes());
    }
    Ok(out)
}

/// Parses a `DLSA` archive, preserving entry order.
pub fn decode_archive(bytes: &[u8]) -> Result<Vec<(String, RawTensor)>> {
    if bytes.len() < 8 {
        return Err(fmt_err(bytes.len(), "truncated archive header"));
    }
    if &bytes[0..4] != ARCHIVE_MAGIC {
        return Err(fmt_err(0, "bad magic, expected \"DLSA\""));
    }
    let count = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let mut entries = Vec::with_capacity(count);
    let mut at = 8usize;
    for i in 0..count {
        if bytes.len() < at + 4 {
            return Err(fmt_err(at, format!("truncated name length of entry {i}")));
        }
        let name_len =
            u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize;
        at += 4;
        if bytes.len() < at + name_len {
            return Err(fmt_err(at, format!("truncated name of entry {i}")));
        }
        let name = core::str::from_utf8(&bytes[at..at + name_len])
            .map_err(|_| fmt_err(at, format!("entry {i} name is not UTF-8")))?
            .into();
        at += name_len;
        let (tensor, used) = RawTensor::from_bytes_at(&bytes[at..], at)?;
        at += used;
        entries.push((name, tensor));
    }
    if at != bytes.len() {
        return Err(fmt_err(
            at,
            format!("{} trailing bytes after last entry", bytes.len() - at),
        ));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn tensor_round_trip_is_bit_identical() {
        let mut rng = StreamRng::new(1, "fmt");
        let t = Tensor4::<f32>::random_uniform([2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let raw = RawTensor::from_tensor4(&t);
        let bytes = raw.to_bytes();
        let back = RawTensor::from_bytes(&bytes).unwrap();
        assert_eq!(raw, back);
        let t2: Tensor4<f32> = back.to_tensor4().unwrap();
        assert_eq!(t.data(), t2.data());
        assert_eq!(t.shape(), t2.shape());
    }

    #[test]
    fn header_is_pinned_little_endian() {
        let raw = RawTensor::from_f32_slice(&[1, 2], &[1.0, 2.0]).unwrap();
        let bytes = raw.to_bytes();
        assert_eq!(&bytes[0..4], b"DLTN");
        assert_eq!(bytes[4], 1); // version
        assert_eq!(bytes[5], 0); // f32
        assert_eq!(bytes[6], 2); // ndim
        assert_eq!(&bytes[7..11], &1u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &2u32.to_le_bytes());
        assert_eq!(&bytes[15..19], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncation_reports_offset() {
        let raw = RawTensor::from_f32_slice(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = raw.to_bytes();
        bytes.truncate(bytes.len() - 3);
        match RawTensor::from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let raw = RawTensor::from_u8_slice(&[2], &[7, 9]).unwrap();
        let mut bytes = raw.to_bytes();
        bytes[0] = b'X';
        match RawTensor::from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn archive_round_trip_preserves_order() {
        let a = RawTensor::from_f32_slice(&[2], &[1.0, 2.0]).unwrap();
        let b = RawTensor::from_i32_slice(&[3], &[-1, 0, 1]).unwrap();
        let entries = vec![("zeta".into(), a), ("alpha".into(), b)];
        let bytes = encode_archive(&entries).unwrap();
        assert_eq!(&bytes[0..4], b"DLSA");
        let back = decode_archive(&bytes).unwrap();
        assert_eq!(entries, back);
    }

    #[test]
    fn archive_truncation_is_detected() {
        let a = RawTensor::from_f32_slice(&[2], &[1.0, 2.0]).unwrap();
        let bytes = encode_archive(&[("w".into(), a)]).unwrap();
        for cut in [bytes.len() - 1, 10, 6] {
            let sliced = &bytes[..cut];
            assert!(
                matches!(decode_archive(sliced), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn labels_and_masks_round_trip() {
        let labels = LabelMap::new([1, 2, 2], vec![0, -1, 3, 1]).unwrap();
        let raw = RawTensor::from_labels(&labels);
        assert_eq!(raw.to_labels().unwrap(), labels);
        let mask = PixelMask::new([1, 2, 2], vec![true, false, false, true]).unwrap();
        let raw = RawTensor::from_mask(&mask);
        assert_eq!(raw.to_mask().unwrap(), mask);
    }
}
