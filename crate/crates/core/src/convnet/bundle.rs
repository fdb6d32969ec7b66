//! NNWB weight bundles.
//!
//! Layout (little-endian):
//!
//! ```text
//! "NNWB"  u32 version=1  u32 tensor_count
//! per tensor: u16 name_len, name (UTF-8), u8 dtype (0 = f32), u8 rank,
//!             u64 dims[rank], f32 data[product(dims)]
//! u32 metadata_len, metadata (UTF-8 JSON)
//! u64 FNV-1a checksum over every preceding byte
//! ```

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NNWB";
pub const VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Streaming 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }

    pub fn hash(bytes: &[u8]) -> u64 {
        let mut h = Self::default();
        h.update(bytes);
        h.finish()
    }
}

struct HashingWriter<W> {
    inner: W,
    hash: Fnv1a,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hash.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Per-channel input normalization: `(x - mean) / scale` for RGB in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub preprocess_mean: [f32; 3],
    pub preprocess_scale: [f32; 3],
    pub input_side: usize,
    pub labels_file: Option<String>,
    pub provenance: String,
}

impl BundleMeta {
    /// ImageNet statistics as used by common VGG16 checkpoints.
    pub fn imagenet(provenance: impl Into<String>) -> Self {
        Self {
            preprocess_mean: [0.485, 0.456, 0.406],
            preprocess_scale: [0.229, 0.224, 0.225],
            input_side: 224,
            labels_file: None,
            provenance: provenance.into(),
        }
    }

    pub fn preprocess(&self, image: &RgbImage) -> Tensor {
        let mut t = image.to_tensor();
        let plane = image.width() * image.height();
        for c in 0..3 {
            let (m, s) = (self.preprocess_mean[c], self.preprocess_scale[c]);
            for v in &mut t.data_mut()[c * plane..(c + 1) * plane] {
                *v = (*v - m) / s;
            }
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Immutable named-tensor store with preprocessing constants and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBundle {
    tensors: Vec<NamedTensor>,
    meta: BundleMeta,
    labels: Vec<String>,
    checksum: u64,
}

impl WeightBundle {
    /// Builds a bundle from parts; the checksum is that of its NNWB encoding.
    pub fn from_parts(tensors: Vec<NamedTensor>, meta: BundleMeta, labels: Vec<String>) -> Result<Self> {
        let mut bundle = Self {
            tensors,
            meta,
            labels,
            checksum: 0,
        };
        let mut sink = HashingWriter {
            inner: io::sink(),
            hash: Fnv1a::default(),
        };
        bundle
            .encode_body(&mut sink)
            .map_err(|e| Error::io("<memory>", e))?;
        bundle.checksum = sink.hash.finish();
        Ok(bundle)
    }

    pub fn meta(&self) -> &BundleMeta {
        &self.meta
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn has_classifier(&self) -> bool {
        self.get("fc6.weight").is_some()
    }

    /// Checks that every weight-bearing layer of `spec` has a shape-compatible
    /// weight and bias.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        for (layer, wdims, blen) in spec.parameter_shapes() {
            let check = |suffix: &str, want: &[usize]| -> Result<()> {
                let name = format!("{layer}.{suffix}");
                let t = self.get(&name).ok_or_else(|| Error::Layer {
                    layer: layer.clone(),
                    reason: format!("missing {suffix} tensor `{name}`"),
                })?;
                if t.dims() != want {
                    return Err(Error::Layer {
                        layer: layer.clone(),
                        reason: format!("{suffix} dims {:?}, expected {want:?}", t.dims()),
                    });
                }
                Ok(())
            };
            check("weight", &wdims)?;
            check("bias", &[blen])?;
        }
        Ok(())
    }

    fn encode_body<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for nt in &self.tensors {
            let name = nt.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[0u8, nt.tensor.rank() as u8])?;
            for &d in nt.tensor.dims() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(nt.tensor.len() * 4);
            for v in nt.tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        let meta = serde_json::to_vec(&self.meta).map_err(io::Error::other)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)
    }

    /// Writes the NNWB file and, when `labels_file` is set, the labels file
    /// next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = HashingWriter {
            inner: BufWriter::new(file),
            hash: Fnv1a::default(),
        };
        self.encode_body(&mut w).map_err(|e| Error::io(path, e))?;
        let checksum = w.hash.finish();
        let mut inner = w.inner;
        inner
            .write_all(&checksum.to_le_bytes())
            .and_then(|_| inner.flush())
            .map_err(|e| Error::io(path, e))?;
        if let Some(labels_file) = &self.meta.labels_file {
            let lp = sibling(path, labels_file);
            let mut text = self.labels.join("\n");
            text.push('\n');
            std::fs::write(&lp, text).map_err(|e| Error::io(&lp, e))?;
        }
        Ok(())
    }
}

fn sibling(bundle_path: &Path, name: &str) -> PathBuf {
    bundle_path
        .parent()
        .map(|p| p.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::io(
                self.path,
                io::Error::new(io::ErrorKind::UnexpectedEof, "truncated weight bundle"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads and verifies an NNWB file, then shape-checks it against the VGG16
/// feature stack (and the classifier head when the bundle carries one).
pub fn load_weight_bundle(path: &Path) -> Result<WeightBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bundle = decode_bundle(path, &bytes)?;
    let spec = if bundle.has_classifier() {
        NetworkSpec::vgg16()
    } else {
        NetworkSpec::vgg16_features()
    };
    bundle.validate(&spec)?;
    Ok(bundle)
}

fn decode_bundle(path: &Path, bytes: &[u8]) -> Result<WeightBundle> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = cur.u8()?;
        if dtype != 0 {
            return Err(Error::Format(format!("tensor `{name}`: unsupported dtype {dtype}")));
        }
        let rank = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(dims, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        tensors.push(NamedTensor { name, tensor });
    }
    let meta_len = cur.u32()? as usize;
    let meta: BundleMeta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let body_end = cur.pos;
    let stored = cur.u64()?;
    let computed = Fnv1a::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Format(format!(
            "{}: checksum mismatch (stored {stored:016x}, computed {computed:016x})",
            path.display()
        )));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }

    let labels = match &meta.labels_file {
        Some(name) => {
            let lp = sibling(path, name);
            let text = std::fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
            text.lines().map(str::to_string).collect()
        }
        None => default_labels(&tensors),
    };
    let bundle = WeightBundle {
        tensors,
        meta,
        labels,
        checksum: stored,
    };
    if bundle.has_classifier() && bundle.labels.len() != class_count(&bundle.tensors) {
        return Err(Error::Format(format!(
            "labels file has {} entries, classifier has {} classes",
            bundle.labels.len(),
            class_count(&bundle.tensors)
        )));
    }
    Ok(bundle)
}

fn class_count(tensors: &[NamedTensor]) -> usize {
    tensors
        .iter()
        .find(|t| t.name == "fc8.bias")
        .map(|t| t.tensor.len())
        .unwrap_or(0)
}

pub(crate) fn default_labels(tensors: &[NamedTensor]) -> Vec<String> {
    (0..class_count(tensors)).map(|i| format!("class_{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> WeightBundle {
        let t = |name: &str, dims: &[usize], v: f32| NamedTensor {
            name: name.into(),
            tensor: Tensor::filled(dims, v),
        };
        WeightBundle::from_parts(
            vec![t("a.weight", &[2, 1, 3, 3], 0.5), t("a.bias", &[2], -1.0)],
            BundleMeta::imagenet("unit test"),
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(Fnv1a::hash(b""), 0xcbf29ce484222325);
        assert_eq!(Fnv1a::hash(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(Fnv1a::hash(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.nnwb");
        let b = tiny();
        b.write(&p).unwrap();
        let back = decode_bundle(&p, &std::fs::read(&p).unwrap()).unwrap();
        assert_eq!(back, b);
        let bytes = std::fs::read(&p).unwrap();
        let tail = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        assert_eq!(tail, b.checksum());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.nnwb");
        tiny().write(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        let q = dir.path().join("bad.nnwb");
        std::fs::write(&q, &bad).unwrap();
        assert!(matches!(load_weight_bundle(&q), Err(Error::Format(_))));

        bytes.truncate(bytes.len() / 2);
        std::fs::write(&q, &bytes).unwrap();
        assert!(matches!(load_weight_bundle(&q), Err(Error::Io { .. })));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.nnwb");
        tiny().write(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[60] ^= 0x10;
        std::fs::write(&p, &bytes).unwrap();
        let err = decode_bundle(&p, &bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn labels_file_written_alongside() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.nnwb");
        let mut meta = BundleMeta::imagenet("unit test");
        meta.labels_file = Some("labels.txt".into());
        let b = WeightBundle::from_parts(tiny().tensors, meta, vec!["cat".into(), "dog".into()]).unwrap();
        b.write(&p).unwrap();
        let text = std::fs::read_to_string(dir.path().join("labels.txt")).unwrap();
        assert_eq!(text, "cat\ndog\n");
        let back = decode_bundle(&p, &std::fs::read(&p).unwrap()).unwrap();
        assert_eq!(back.labels(), &["cat".to_string(), "dog".to_string()]);
    }
}
