//! STF1 binary tensor files.
//!
//! Layout (little-endian):
//! - magic `STF1`
//! - `u32` header length in bytes
//! - UTF-8 JSON header `{"dtype":"f32"|"f64"|"u8","shape":[...]}`
//! - raw row-major payload

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"STF1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

/// Decoded file contents.
#[derive(Clone, Debug, PartialEq)]
pub enum StfData {
    Float { dtype: Dtype, tensor: Tensor },
    Bytes { shape: Vec<usize>, data: Vec<u8> },
}

fn encode(dtype: Dtype, shape: &[usize], payload: Vec<u8>) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        dtype,
        shape: shape.to_vec(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

/// Encodes a float tensor; `dtype` must be `F32` or `F64`.
pub fn encode_tensor(tensor: &Tensor, dtype: Dtype) -> Vec<u8> {
    let payload = match dtype {
        Dtype::F64 => tensor.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        Dtype::F32 => tensor
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect(),
        Dtype::U8 => panic!("u8 is reserved for label maps"),
    };
    encode(dtype, tensor.dims(), payload)
}

pub fn encode_labels(mask: &LabelMap) -> Vec<u8> {
    encode(
        Dtype::U8,
        &[mask.height(), mask.width()],
        mask.data().to_vec(),
    )
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<StfData> {
    let fail = |field: &'static str, reason: String| Error::Format {
        path: path.to_path_buf(),
        field,
        reason,
    };
    if bytes.len() < 8 {
        return Err(fail("magic", format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("magic", format!("expected STF1, found {:?}", &bytes[..4])));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if header_len > body.len() {
        return Err(fail(
            "header_len",
            format!("{header_len} exceeds remaining {} bytes", body.len()),
        ));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| fail("header", e.to_string()))?;
    let shape = Shape::new(header.shape.clone()).map_err(|e| fail("shape", e.to_string()))?;
    let payload = &body[header_len..];
    let expected = shape
        .numel()
        .checked_mul(header.dtype.width())
        .ok_or_else(|| fail("shape", "payload size overflows".into()))?;
    if payload.len() != expected {
        return Err(fail(
            "payload",
            format!("expected {expected} bytes, found {}", payload.len()),
        ));
    }
    let values: Vec<f64> = match header.dtype {
        Dtype::U8 => {
            return Ok(StfData::Bytes {
                shape: header.shape,
                data: payload.to_vec(),
            })
        }
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    let tensor = Tensor::from_vec(shape, values).map_err(|e| fail("payload", e.to_string()))?;
    Ok(StfData::Float {
        dtype: header.dtype,
        tensor,
    })
}

pub fn read(path: impl AsRef<Path>) -> Result<StfData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads an `f32` or `f64` file as an `f64` tensor.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    match read(path)? {
        StfData::Float { tensor, .. } => Ok(tensor),
        StfData::Bytes { .. } => Err(Error::Format {
            path: path.to_path_buf(),
            field: "dtype",
            reason: "expected f32 or f64, found u8".into(),
        }),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path: PathBuf = path.as_ref().to_path_buf();
    match read(&path)? {
        StfData::Bytes { shape, data } if shape.len() == 2 => {
            LabelMap::new(shape[0], shape[1], data).map_err(|e| Error::Format {
                path,
                field: "shape",
                reason: e.to_string(),
            })
        }
        StfData::Bytes { shape, .. } => Err(Error::Format {
            path,
            field: "shape",
            reason: format!("label map must be rank 2, found {shape:?}"),
        }),
        StfData::Float { dtype, .. } => Err(Error::Format {
            path,
            field: "dtype",
            reason: format!("expected u8, found {dtype:?}"),
        }),
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(tensor, dtype)).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: impl AsRef<Path>, mask: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_labels(mask)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::from_dims(&[2], vec![1.0, -2.0]).unwrap();
        let bytes = encode_tensor(&t, Dtype::F64);
        let header = br#"{"dtype":"f64","shape":[2]}"#;
        assert_eq!(&bytes[..4], b"STF1");
        assert_eq!(&bytes[4..8], &(header.len() as u32).to_le_bytes());
        assert_eq!(&bytes[8..8 + header.len()], header);
        assert_eq!(&bytes[8 + header.len()..16 + header.len()], &1.0f64.to_le_bytes());
    }

    #[test]
    fn malformed_inputs_name_the_field() {
        let p = Path::new("x.stf");
        let field = |bytes: &[u8]| match decode(bytes, p) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(field(b"STF"), "magic");
        assert_eq!(field(b"STF0\0\0\0\0"), "magic");
        assert_eq!(field(b"STF1\xff\0\0\0{}"), "header_len");
        let mut ok = encode_tensor(&Tensor::scalar(1.0).unwrap(), Dtype::F32);
        ok.pop();
        assert_eq!(field(&ok), "payload");
        let bad = encode(Dtype::F32, &[0], vec![]);
        assert_eq!(field(&bad), "shape");
        let junk = [b"STF1".as_slice(), &3u32.to_le_bytes(), b"{x}"].concat();
        assert_eq!(field(&junk), "header");
    }

    #[test]
    fn labels_round_trip() {
        let m = LabelMap::new(2, 3, vec![0, 1, 255, 4, 2, 2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stf");
        write_labels(&path, &m).unwrap();
        assert_eq!(read_labels(&path).unwrap(), m);
        assert!(read_tensor(&path).is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_exact(vals in prop::collection::vec(-1e12f64..1e12, 1..40)) {
            let n = vals.len();
            let t = Tensor::from_dims(&[n], vals).unwrap();
            match decode(&encode_tensor(&t, Dtype::F64), Path::new("p")).unwrap() {
                StfData::Float { dtype, tensor } => {
                    prop_assert_eq!(dtype, Dtype::F64);
                    prop_assert_eq!(tensor, t);
                }
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn f32_export_matches_cast(vals in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let n = vals.len();
            let t = Tensor::from_dims(&[1, n], vals).unwrap();
            let back = read_back(&encode_tensor(&t, Dtype::F32));
            for (a, b) in t.data().iter().zip(back.data()) {
                prop_assert_eq!(*a as f32 as f64, *b);
            }
        }
    }

    fn read_back(bytes: &[u8]) -> Tensor {
        match decode(bytes, Path::new("p")).unwrap() {
            StfData::Float { tensor, .. } => tensor,
            _ => unreachable!(),
        }
    }
}
