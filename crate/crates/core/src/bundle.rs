//! Two-file bundles (`manifest.json` + `tensors.bin`) and JSON reports.
//!
//! The blob holds little-endian tensors, each starting on a 64-byte boundary
//! with zero padding in between. The manifest names every tensor with its
//! dtype, shape and byte range, and optionally describes a head model (which
//! tensor plays which role) and any number of sample sets (an `n x d_in`
//! embedding tensor plus ids and labels).

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BundleError, BundleErrorKind, Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{ActivationKind, HeadModel, Sample};

pub const FORMAT_VERSION: &str = "1.0";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
const ALIGN: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    fn first_non_finite(&self) -> Option<usize> {
        match self {
            TensorData::F32(v) => v.iter().position(|x| !x.is_finite()),
            TensorData::F64(v) => v.iter().position(|x| !x.is_finite()),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Self {
        Tensor {
            name: name.into(),
            shape,
            data,
        }
    }

    fn from_f64(name: &str, shape: Vec<usize>, values: &[f64], dtype: DType) -> Self {
        let data = match dtype {
            DType::F64 => TensorData::F64(values.to_vec()),
            DType::F32 => TensorData::F32(values.iter().map(|&x| x as f32).collect()),
        };
        Tensor::new(name, shape, data)
    }
}

/// Which tensor holds each model parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    #[serde(rename = "W")]
    pub w: String,
    pub b: String,
    #[serde(rename = "W_c")]
    pub w_c: String,
    pub b_c: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub activation: ActivationKind,
    pub d_in: usize,
    pub d_out: usize,
    pub classes: usize,
    pub roles: Roles,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSetMeta {
    pub name: String,
    pub tensor: String,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelMeta>,
    #[serde(default)]
    pub sets: Vec<SampleSetMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBundle {
    pub tensors: Vec<Tensor>,
    pub model: Option<ModelMeta>,
    pub sets: Vec<SampleSetMeta>,
}

fn err(entry: &str, kind: BundleErrorKind) -> Error {
    Error::Bundle(BundleError::new(entry, kind))
}

impl TensorBundle {
    pub fn empty() -> Self {
        TensorBundle {
            tensors: Vec::new(),
            model: None,
            sets: Vec::new(),
        }
    }

    /// Bundle holding `model` (as tensors `W`, `b`, `W_c`, `b_c`).
    pub fn with_model(model: &HeadModel, dtype: DType) -> Self {
        let mut b = TensorBundle::empty();
        b.set_model(model, dtype);
        b
    }

    /// Replaces (or adds) the model tensors and metadata.
    pub fn set_model(&mut self, model: &HeadModel, dtype: DType) {
        if let Some(old) = self.model.take() {
            let r = old.roles;
            let stale = [r.w, r.b, r.w_c, r.b_c];
            self.tensors.retain(|t| !stale.contains(&t.name));
        }
        let (d_out, d_in, c) = (model.d_out(), model.d_in(), model.classes());
        let parts = [
            ("W", vec![d_out, d_in], model.weight().as_slice()),
            ("b", vec![d_out], model.bias()),
            ("W_c", vec![c, d_out], model.head_weight().as_slice()),
            ("b_c", vec![c], model.head_bias()),
        ];
        for (name, shape, values) in parts {
            self.put_tensor(Tensor::from_f64(name, shape, values, dtype));
        }
        self.model = Some(ModelMeta {
            activation: model.activation(),
            d_in,
            d_out,
            classes: c,
            roles: Roles {
                w: "W".into(),
                b: "b".into(),
                w_c: "W_c".into(),
                b_c: "b_c".into(),
            },
        });
    }

    /// Adds (or replaces) a sample set stored in tensor `set:<name>`.
    pub fn put_samples(&mut self, name: &str, samples: &[Sample], d_in: usize, dtype: DType) {
        let tensor = format!("set:{name}");
        let flat: Vec<f64> = samples.iter().flat_map(|s| s.v.iter().copied()).collect();
        self.put_tensor(Tensor::from_f64(&tensor, vec![samples.len(), d_in], &flat, dtype));
        let meta = SampleSetMeta {
            name: name.to_string(),
            tensor,
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
        };
        match self.sets.iter_mut().find(|s| s.name == name) {
            Some(slot) => *slot = meta,
            None => self.sets.push(meta),
        }
    }

    pub fn put_tensor(&mut self, t: Tensor) {
        match self.tensors.iter_mut().find(|x| x.name == t.name) {
            Some(slot) => *slot = t,
            None => self.tensors.push(t),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn set_names(&self) -> Vec<&str> {
        self.sets.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn has_set(&self, name: &str) -> bool {
        self.sets.iter().any(|s| s.name == name)
    }

    pub fn head_model(&self) -> Result<HeadModel> {
        let meta = self
            .model
            .as_ref()
            .ok_or_else(|| err("model", BundleErrorKind::Role("bundle has no model".into())))?;
        let get = |name: &str| -> Result<Vec<f64>> {
            self.tensor(name)
                .map(|t| t.data.to_f64())
                .ok_or_else(|| err(name, BundleErrorKind::Role("missing tensor".into())))
        };
        let w = DenseMatrix::new(meta.d_out, meta.d_in, get(&meta.roles.w)?)?;
        let wc = DenseMatrix::new(meta.classes, meta.d_out, get(&meta.roles.w_c)?)?;
        HeadModel::new(w, get(&meta.roles.b)?, wc, get(&meta.roles.b_c)?, meta.activation)
    }

    pub fn samples(&self, name: &str) -> Result<Vec<Sample>> {
        let set = self.sets.iter().find(|s| s.name == name).ok_or_else(|| {
            err(name, BundleErrorKind::Manifest(format!("no sample set named `{name}`")))
        })?;
        let t = self
            .tensor(&set.tensor)
            .ok_or_else(|| err(&set.tensor, BundleErrorKind::Manifest("missing tensor".into())))?;
        let d = t.shape.get(1).copied().unwrap_or(0);
        let flat = t.data.to_f64();
        Ok(set
            .ids
            .iter()
            .zip(&set.labels)
            .enumerate()
            .map(|(i, (id, &label))| Sample::new(id.clone(), flat[i * d..(i + 1) * d].to_vec(), label))
            .collect())
    }

    /// Checks shapes, roles, labels and values; the checks `load` applies.
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(err(&t.name, BundleErrorKind::Manifest("duplicate tensor name".into())));
            }
            let count: usize = t.shape.iter().product();
            if count != t.data.len() {
                return Err(err(
                    &t.name,
                    BundleErrorKind::Shape(format!(
                        "shape {:?} needs {count} values, found {}",
                        t.shape,
                        t.data.len()
                    )),
                ));
            }
            if let Some(i) = t.data.first_non_finite() {
                return Err(err(&t.name, BundleErrorKind::NonFinite(i)));
            }
        }
        let shape_of = |name: &str, role: &str| -> Result<&[usize]> {
            self.tensor(name).map(|t| t.shape.as_slice()).ok_or_else(|| {
                err(role, BundleErrorKind::Role(format!("tensor `{name}` does not exist")))
            })
        };
        if let Some(m) = &self.model {
            let r = &m.roles;
            let distinct: HashSet<&str> = [&r.w, &r.b, &r.w_c, &r.b_c].iter().map(|s| s.as_str()).collect();
            if distinct.len() != 4 {
                return Err(err("model", BundleErrorKind::Role("roles must name four distinct tensors".into())));
            }
            if m.classes < 2 {
                return Err(err("model", BundleErrorKind::Shape("at least two classes required".into())));
            }
            let expect = [
                ("W", &r.w, vec![m.d_out, m.d_in]),
                ("b", &r.b, vec![m.d_out]),
                ("W_c", &r.w_c, vec![m.classes, m.d_out]),
                ("b_c", &r.b_c, vec![m.classes]),
            ];
            for (role, name, shape) in expect {
                let found = shape_of(name, role)?;
                if found != shape.as_slice() {
                    return Err(err(
                        name,
                        BundleErrorKind::Shape(format!(
                            "role {role} expects shape {shape:?}, found {found:?}"
                        )),
                    ));
                }
            }
        }
        let mut set_names = HashSet::new();
        for s in &self.sets {
            if !set_names.insert(s.name.as_str()) {
                return Err(err(&s.name, BundleErrorKind::Manifest("duplicate set name".into())));
            }
            let shape = shape_of(&s.tensor, &s.name)?;
            if shape.len() != 2 {
                return Err(err(&s.name, BundleErrorKind::Shape(format!("set tensor must be 2-d, found {shape:?}"))));
            }
            if let Some(m) = &self.model {
                if shape[1] != m.d_in {
                    return Err(err(
                        &s.name,
                        BundleErrorKind::Shape(format!("embedding width {} but model d_in {}", shape[1], m.d_in)),
                    ));
                }
            }
            if s.ids.len() != shape[0] || s.labels.len() != shape[0] {
                return Err(err(
                    &s.name,
                    BundleErrorKind::Shape(format!(
                        "{} rows, {} ids, {} labels",
                        shape[0],
                        s.ids.len(),
                        s.labels.len()
                    )),
                ));
            }
            let unique: HashSet<&str> = s.ids.iter().map(|x| x.as_str()).collect();
            if unique.len() != s.ids.len() {
                return Err(err(&s.name, BundleErrorKind::Manifest("duplicate sample id".into())));
            }
            if let Some(m) = &self.model {
                if let Some(bad) = s.labels.iter().find(|&&l| l >= m.classes) {
                    return Err(err(
                        &s.name,
                        BundleErrorKind::Label(format!("label {bad} with {} classes", m.classes)),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Serializes to `(manifest, blob)` bytes.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        self.validate()?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let pad = (ALIGN - blob.len() as u64 % ALIGN) % ALIGN;
            blob.resize(blob.len() + pad as usize, 0);
            let offset = blob.len() as u64;
            t.data.write_le(&mut blob);
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: t.data.dtype(),
                shape: t.shape.clone(),
                offset,
                length: blob.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION.to_string(),
            tensors: entries,
            model: self.model.clone(),
            sets: self.sets.clone(),
        };
        let mut text = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| err("manifest", BundleErrorKind::Manifest(e.to_string())))?;
        text.push(b'\n');
        Ok((text, blob))
    }

    pub fn decode(manifest: &[u8], blob: &[u8]) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_slice(manifest)
            .map_err(|e| err("manifest", BundleErrorKind::Manifest(e.to_string())))?;
        let version = raw
            .get("format_version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| err("format_version", BundleErrorKind::Manifest("missing format_version".into())))?;
        let supported_major = FORMAT_VERSION.split('.').next();
        if version.split('.').next() != supported_major {
            return Err(err("format_version", BundleErrorKind::Version(version.to_string())));
        }
        let manifest: Manifest = serde_json::from_value(raw)
            .map_err(|e| err("manifest", BundleErrorKind::Manifest(e.to_string())))?;

        let blob_len = blob.len() as u64;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let end = e.offset.checked_add(e.length).unwrap_or(u64::MAX);
            if end > blob_len {
                return Err(err(
                    &e.name,
                    BundleErrorKind::OutOfBounds {
                        offset: e.offset,
                        end,
                        blob_len,
                    },
                ));
            }
            if e.offset % ALIGN != 0 {
                return Err(err(&e.name, BundleErrorKind::Manifest(format!("offset {} is not 64-byte aligned", e.offset))));
            }
            let count: u64 = e.shape.iter().map(|&d| d as u64).product();
            if count * e.dtype.size() != e.length {
                return Err(err(
                    &e.name,
                    BundleErrorKind::Shape(format!(
                        "shape {:?} of {:?} needs {} bytes, entry has {}",
                        e.shape,
                        e.dtype,
                        count * e.dtype.size(),
                        e.length
                    )),
                ));
            }
            let bytes = &blob[e.offset as usize..end as usize];
            tensors.push(Tensor::new(e.name.clone(), e.shape.clone(), TensorData::read_le(e.dtype, bytes)));
        }
        let mut ranges: Vec<&TensorEntry> = manifest.tensors.iter().filter(|e| e.length > 0).collect();
        ranges.sort_by_key(|e| e.offset);
        for pair in ranges.windows(2) {
            if pair[0].offset + pair[0].length > pair[1].offset {
                return Err(err(&pair[1].name, BundleErrorKind::Overlap(pair[0].name.clone())));
            }
        }
        let bundle = TensorBundle {
            tensors,
            model: manifest.model,
            sets: manifest.sets,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Writes the bundle into directory `dir` (blob first, then manifest).
pub fn save(bundle: &TensorBundle, dir: &Path) -> Result<()> {
    let (manifest, blob) = bundle.encode()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load(dir: &Path) -> Result<TensorBundle> {
    let mpath = dir.join(MANIFEST_FILE);
    let bpath = dir.join(BLOB_FILE);
    let manifest = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    TensorBundle::decode(&manifest, &blob)
}

/// Pretty printing with every float rendered as 17 significant digits.
struct ReportFormatter {
    inner: serde_json::ser::PrettyFormatter<'static>,
}

impl serde_json::ser::Formatter for ReportFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.inner.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.inner.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Report JSON: fields in declaration order, floats with 17 significant
/// digits, non-finite floats as `null`.
pub fn report_json<T: Serialize>(report: &T) -> Result<String> {
    let mut out = Vec::new();
    let fmt = ReportFormatter {
        inner: serde_json::ser::PrettyFormatter::new(),
    };
    let mut ser = serde_json::Serializer::with_formatter(&mut out, fmt);
    report
        .serialize(&mut ser)
        .map_err(|e| Error::InternalInvariant(format!("report serialization: {e}")))?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

pub fn write_report<T: Serialize>(report: &T, path: &Path) -> Result<()> {
    write_atomic(path, report_json(report)?.as_bytes())
}

pub fn read_report<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}
