//! `.vten` binary tensors.
//!
//! Layout, all little-endian: magic `VTEN`, `u32` version (1), `u32` ndim,
//! `ndim × u32` dims, then the row-major `f32` payload. A bundle is a
//! directory holding one `.vten` per named tensor plus `manifest.json`.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, VideoLatent};

pub const MAGIC: &[u8; 4] = b"VTEN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Format(format!("dims {dims:?} imply {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }
}

pub fn encode(t: &RawTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<RawTensor> {
    let mut cur = bytes;
    let mut word = || -> Result<u32> {
        if cur.len() < 4 {
            return Err(Error::Format("truncated header".into()));
        }
        let (head, rest) = cur.split_at(4);
        cur = rest;
        Ok(u32::from_le_bytes(head.try_into().unwrap()))
    };
    let magic = word()?.to_le_bytes();
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = word()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let ndim = word()? as usize;
    if ndim > 16 {
        return Err(Error::Format(format!("implausible ndim {ndim}")));
    }
    let dims = (0..ndim).map(|_| word().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    if cur.len() != 4 * n {
        return Err(Error::Format(format!("payload has {} bytes, expected {}", cur.len(), 4 * n)));
    }
    let data = cur.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(RawTensor { dims, data })
}

pub fn write_tensor(path: &Path, t: &RawTensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn video_to_raw(v: &VideoLatent) -> RawTensor {
    RawTensor { dims: v.dims().as_array().to_vec(), data: v.data().to_vec() }
}

pub fn raw_to_video(t: RawTensor) -> Result<VideoLatent> {
    match t.dims[..] {
        [b, c, f, h, w] => VideoLatent::new(Dims::new(b, c, f, h, w), t.data),
        _ => Err(Error::Format(format!("expected a 5D video tensor, got dims {:?}", t.dims))),
    }
}

pub fn write_video(path: &Path, v: &VideoLatent) -> Result<()> {
    write_tensor(path, &video_to_raw(v))
}

pub fn read_video(path: &Path) -> Result<VideoLatent> {
    raw_to_video(read_tensor(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub tensors: Vec<ManifestEntry>,
}

pub fn write_bundle(dir: &Path, tensors: &[(String, RawTensor)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let file = format!("{name}.vten");
        write_tensor(&dir.join(&file), t)?;
        entries.push(ManifestEntry { name: name.clone(), dims: t.dims.clone(), file });
    }
    let manifest = BundleManifest { format: "vten-bundle/1".into(), tensors: entries };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<Vec<(String, RawTensor)>> {
    let manifest: BundleManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest
        .tensors
        .into_iter()
        .map(|e| {
            let t = read_tensor(&dir.join(&e.file))?;
            if t.dims != e.dims {
                return Err(Error::Format(format!("{}: manifest dims {:?} vs file {:?}", e.name, e.dims, t.dims)));
            }
            Ok((e.name, t))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = RawTensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"VTEN");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[24..28], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn rejects_corruption() {
        let t = RawTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut bytes = encode(&t);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
        let mut v2 = encode(&t);
        v2[4] = 2;
        assert!(decode(&v2).is_err());
    }

    #[test]
    fn video_requires_five_dims() {
        let t = RawTensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(raw_to_video(t).is_err());
    }

    #[test]
    fn bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ts = vec![
            ("a".to_string(), RawTensor::new(vec![2, 3], (0..6).map(|i| i as f32).collect()).unwrap()),
            ("b.w".to_string(), RawTensor::new(vec![1], vec![7.0]).unwrap()),
        ];
        write_bundle(dir.path(), &ts).unwrap();
        assert_eq!(read_bundle(dir.path()).unwrap(), ts);
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(dims in proptest::collection::vec(1usize..5, 0..5), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-3).collect();
            let t = RawTensor::new(dims, data).unwrap();
            prop_assert_eq!(decode(&encode(&t)).unwrap(), t);
        }
    }
}
