//! On-disk formats and the synthetic dataset generator.
//!
//! Tensor container layout (all integers little-endian):
//!
//! ```text
//! "LPE1" | header_len: u32 | header: UTF-8 JSON | payload
//! ```
//!
//! The header is `{spec, [member], tensors: [{name, dtype, shape, offset, length}]}`
//! where `offset`/`length` are byte positions inside the payload and `dtype`
//! is `"f32"` or `"i8"`. Loaders never infer shapes from file sizes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensembler::{EnsembleSpec, Member, MemberLayer, MemberSet, Method};
use crate::error::{Error, Result};
use crate::metrics::Dataset;
use crate::nn::{weight_name, Checkpoint, ModelSpec};
use crate::quantizer::{QuantGridSet, QuantizedTensor};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LPE1";
pub const BASE_FILE: &str = "base.lpe1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I8,
}

impl Dtype {
    pub fn width(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

/// Identifies a member file and where its shared layers live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberMeta {
    pub index: usize,
    pub seed: u64,
    pub ensemble: EnsembleSpec,
    /// Base checkpoint, relative to the member file's directory.
    pub base: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub spec: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member: Option<MemberMeta>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor),
    I8 { shape: Vec<usize>, data: Vec<i8> },
}

impl TensorData {
    fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::I8 { .. } => Dtype::I8,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::I8 { shape, .. } => shape,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(t) => t
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorData::I8 { data, .. } => out.extend(data.iter().map(|&v| v as u8)),
        }
    }
}

/// Parsed container: header plus named tensors in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub spec: ModelSpec,
    pub member: Option<MemberMeta>,
    pub tensors: Vec<(String, TensorData)>,
}

impl Container {
    fn take(&mut self, name: &str, path: &Path) -> Result<TensorData> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
        Ok(self.tensors.remove(pos).1)
    }
}

/// Serializes a container to bytes.
pub fn encode(container: &Container) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(container.tensors.len());
    let mut payload = Vec::new();
    for (name, t) in &container.tensors {
        let offset = payload.len() as u64;
        t.write_le(&mut payload);
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: t.dtype(),
            shape: t.shape().to_vec(),
            offset,
            length: payload.len() as u64 - offset,
        });
    }
    let header = Header {
        spec: container.spec.clone(),
        member: container.member.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses and validates container bytes; `path` is only used in errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Container> {
    if bytes.len() < 8 {
        return Err(Error::format(
            path,
            format!("file is {} bytes, too short for a header", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected \"LPE1\"", &bytes[..4]),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            expected: (8 + header_len) as u64,
            found: bytes.len() as u64,
        });
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::format(path, format!("invalid header: {e}")))?;
    header
        .spec
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let payload = &bytes[8 + header_len..];

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
    let mut needed = 0u64;
    for e in &header.tensors {
        if e.shape.is_empty() || e.shape.contains(&0) {
            return Err(Error::format(
                path,
                format!("tensor {} has invalid shape {:?}", e.name, e.shape),
            ));
        }
        let count: u64 = e.shape.iter().map(|&d| d as u64).product();
        if count * e.dtype.width() != e.length {
            return Err(Error::format(
                path,
                format!(
                    "tensor {} length {} does not match shape {:?}",
                    e.name, e.length, e.shape
                ),
            ));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .ok_or_else(|| Error::format(path, format!("tensor {} offset overflows", e.name)))?;
        needed = needed.max(end);
        spans.push((e.offset, end, &e.name));
    }
    spans.sort();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::format(
                path,
                format!("tensors {} and {} overlap", pair[0].2, pair[1].2),
            ));
        }
    }
    if (payload.len() as u64) < needed {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            expected: needed,
            found: payload.len() as u64,
        });
    }
    if (payload.len() as u64) > needed {
        return Err(Error::format(
            path,
            format!("{} trailing payload bytes", payload.len() as u64 - needed),
        ));
    }

    let mut seen = std::collections::HashSet::new();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if !seen.insert(e.name.clone()) {
            return Err(Error::format(path, format!("duplicate tensor {}", e.name)));
        }
        let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
        let data = match e.dtype {
            Dtype::F32 => {
                let values = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                TensorData::F32(Tensor::new(e.shape, values)?)
            }
            Dtype::I8 => TensorData::I8 {
                shape: e.shape,
                data: raw.iter().map(|&b| b as i8).collect(),
            },
        };
        tensors.push((e.name, data));
    }
    Ok(Container {
        spec: header.spec,
        member: header.member,
        tensors,
    })
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

fn checkpoint_container(ckpt: &Checkpoint) -> Container {
    Container {
        spec: ckpt.spec().clone(),
        member: None,
        tensors: ckpt
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, TensorData::F32(t.clone())))
            .collect(),
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(&checkpoint_container(ckpt))?)
}

fn expect_f32(t: TensorData, name: &str, path: &Path) -> Result<Tensor> {
    match t {
        TensorData::F32(t) => Ok(t),
        TensorData::I8 { .. } => Err(Error::format(path, format!("tensor {name} must be f32"))),
    }
}

fn expect_i8(t: TensorData, name: &str, path: &Path) -> Result<(Vec<usize>, Vec<i8>)> {
    match t {
        TensorData::I8 { shape, data } => Ok((shape, data)),
        TensorData::F32(_) => Err(Error::format(path, format!("tensor {name} must be i8"))),
    }
}

fn checkpoint_from_container(c: Container, path: &Path) -> Result<Checkpoint> {
    let mut named = BTreeMap::new();
    for (name, t) in c.tensors {
        let t = expect_f32(t, &name, path)?;
        named.insert(name, t);
    }
    Checkpoint::from_named(c.spec, named).map_err(|e| Error::format(path, e.to_string()))
}

/// Loads a full-precision checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = read(path)?;
    if c.member.is_some() {
        return Err(Error::format(
            path,
            "this is a member file, not a checkpoint",
        ));
    }
    checkpoint_from_container(c, path)
}

fn member_container(ms: &MemberSet, member: &Member) -> Container {
    let mut tensors = Vec::new();
    for (i, layer) in &member.layers {
        let w = weight_name(*i);
        match layer {
            MemberLayer::Quantized(q) => {
                tensors.push((
                    format!("{w}.codes"),
                    TensorData::I8 {
                        shape: q.shape().to_vec(),
                        data: q.codes().to_vec(),
                    },
                ));
                let scales = q.grids().scales().to_vec();
                tensors.push((
                    format!("{w}.scales"),
                    TensorData::F32(
                        Tensor::new(vec![scales.len()], scales).expect("one scale per channel"),
                    ),
                ));
            }
            MemberLayer::Dense(t) => tensors.push((w, TensorData::F32(t.clone()))),
            MemberLayer::Mask(m) => tensors.push((
                format!("{w}.mask"),
                TensorData::I8 {
                    shape: m.shape().to_vec(),
                    data: m.data().iter().map(|&v| v as i8).collect(),
                },
            )),
        }
    }
    Container {
        spec: ms.base().spec().clone(),
        member: Some(MemberMeta {
            index: member.index,
            seed: member.seed,
            ensemble: *ms.spec(),
            base: BASE_FILE.to_string(),
        }),
        tensors,
    }
}

pub fn save_member(path: &Path, ms: &MemberSet, index: usize) -> Result<()> {
    write_atomic(path, &encode(&member_container(ms, &ms.members()[index]))?)
}

/// A parsed member file.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberFile {
    pub meta: MemberMeta,
    pub spec: ModelSpec,
    pub member: Member,
}

/// Parses a member file into its metadata and member layers.
pub fn load_member(path: &Path) -> Result<MemberFile> {
    let mut c = read(path)?;
    let meta = c
        .member
        .clone()
        .ok_or_else(|| Error::format(path, "not a member file"))?;
    let mask = c.spec.quantize_mask.clone();
    let mut layers = Vec::new();
    for (i, &masked) in mask.iter().enumerate() {
        if !masked {
            continue;
        }
        let w = weight_name(i);
        let layer = match meta.ensemble.method {
            Method::Bsr { bits } | Method::Rtn { bits } => {
                let codes_name = format!("{w}.codes");
                let scales_name = format!("{w}.scales");
                let (shape, codes) = expect_i8(c.take(&codes_name, path)?, &codes_name, path)?;
                let scales = expect_f32(c.take(&scales_name, path)?, &scales_name, path)?;
                let &[rows, cols] = shape.as_slice() else {
                    return Err(Error::format(path, format!("{codes_name} must be 2-D")));
                };
                let grids = QuantGridSet::new(bits, scales.into_data())
                    .map_err(|e| Error::format(path, e.to_string()))?;
                MemberLayer::Quantized(
                    QuantizedTensor::new(codes, grids, [rows, cols])
                        .map_err(|e| Error::format(path, e.to_string()))?,
                )
            }
            Method::Gaussian { .. } => MemberLayer::Dense(expect_f32(c.take(&w, path)?, &w, path)?),
            Method::Mcd { .. } => {
                let name = format!("{w}.mask");
                let (shape, data) = expect_i8(c.take(&name, path)?, &name, path)?;
                if data.iter().any(|&v| v != 0 && v != 1) {
                    return Err(Error::format(path, format!("{name} is not binary")));
                }
                MemberLayer::Mask(Tensor::new(
                    shape,
                    data.iter().map(|&v| v as f32).collect(),
                )?)
            }
        };
        layers.push((i, layer));
    }
    if let Some((extra, _)) = c.tensors.first() {
        return Err(Error::format(path, format!("unexpected tensor {extra}")));
    }
    let member = Member {
        index: meta.index,
        seed: meta.seed,
        layers,
    };
    Ok(MemberFile {
        meta,
        spec: c.spec,
        member,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub file: String,
}

/// Index of an ensemble directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub ensemble: EnsembleSpec,
    pub base: String,
    pub memory_bits: u64,
    pub members: Vec<ManifestEntry>,
}

pub fn member_file_name(index: usize) -> String {
    format!("member_{index:03}.lpe1")
}

/// Writes `base.lpe1`, one file per member and `manifest.json` into `dir`.
/// Returns every path written, manifest last.
pub fn save_member_set(dir: &Path, ms: &MemberSet) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let base = dir.join(BASE_FILE);
    save_checkpoint(&base, ms.base())?;
    written.push(base);
    let mut entries = Vec::new();
    for m in ms.members() {
        let file = member_file_name(m.index);
        let path = dir.join(&file);
        save_member(&path, ms, m.index)?;
        written.push(path);
        entries.push(ManifestEntry {
            index: m.index,
            seed: m.seed,
            file,
        });
    }
    let manifest = Manifest {
        ensemble: *ms.spec(),
        base: BASE_FILE.to_string(),
        memory_bits: crate::ensembler::memory_budget(ms),
        members: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&path, &json)?;
    written.push(path);
    Ok(written)
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

/// Loads an ensemble from its manifest.
pub fn load_member_set(manifest_path: &Path) -> Result<MemberSet> {
    let bytes = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(manifest_path, format!("invalid manifest: {e}")))?;
    let base = load_checkpoint(&sibling(manifest_path, &manifest.base))?;
    let mut members = Vec::with_capacity(manifest.members.len());
    for entry in &manifest.members {
        let path = sibling(manifest_path, &entry.file);
        let file = load_member(&path)?;
        let meta = &file.meta;
        if meta.ensemble != manifest.ensemble
            || meta.index != entry.index
            || meta.seed != entry.seed
        {
            return Err(Error::format(
                &path,
                "member metadata disagrees with the manifest",
            ));
        }
        if &file.spec != base.spec() {
            return Err(Error::format(
                &path,
                "member model spec differs from the base checkpoint",
            ));
        }
        members.push(file.member);
    }
    MemberSet::new(manifest.ensemble, base, members)
}

/// Loads a full checkpoint from either a checkpoint file or a member file
/// (whose base checkpoint is resolved next to it).
pub fn load_model(path: &Path) -> Result<Checkpoint> {
    let c = read(path)?;
    match &c.member {
        None => checkpoint_from_container(c, path),
        Some(meta) => {
            let base = load_checkpoint(&sibling(path, &meta.base))?;
            let file = load_member(path)?;
            if &file.spec != base.spec() {
                return Err(Error::format(
                    path,
                    "member model spec differs from the base checkpoint",
                ));
            }
            file.member.checkpoint(&base)
        }
    }
}

/// Reads a CSV with header `f0,…,f{d-1},label`.
pub fn load_dataset_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let d = headers.len().saturating_sub(1);
    let expected: Vec<String> = (0..d)
        .map(|j| format!("f{j}"))
        .chain(["label".to_string()])
        .collect();
    if d == 0 || headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::format(
            path,
            format!(
                "header must be f0..f{{d-1}},label, got {:?}",
                headers.iter().collect::<Vec<_>>()
            ),
        ));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        for j in 0..d {
            let v: f32 = record[j].trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}: row {}: f{j} is not a number",
                    path.display(),
                    line + 1
                ))
            })?;
            features.push(v);
        }
        let label: usize = record[d].trim().parse().map_err(|_| {
            Error::Data(format!(
                "{}: row {}: label {:?} is not a non-negative integer",
                path.display(),
                line + 1,
                &record[d]
            ))
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    Dataset::new(Tensor::new(vec![labels.len(), d], features)?, labels)
}

pub fn save_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let d = data.dim();
    let header: Vec<String> = (0..d)
        .map(|j| format!("f{j}"))
        .chain(["label".to_string()])
        .collect();
    writer
        .write_record(&header)
        .map_err(|e| csv_error(path, e))?;
    for (row, label) in data.features().rows().zip(data.labels()) {
        let record: Vec<String> = row
            .iter()
            .map(|v| v.to_string())
            .chain([label.to_string()])
            .collect();
        writer
            .write_record(&record)
            .map_err(|e| csv_error(path, e))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Radius of the circle the class centers sit on.
const BLOB_RADIUS: f64 = 3.0;

/// Balanced Gaussian clusters. Centers lie evenly on a circle of radius 3 in
/// the first two coordinates (random phase) and uniformly in `[-3, 3]` in the
/// remaining ones; points are `center + spread · N(0, I)`. Rows are
/// interleaved by class.
pub fn make_blobs(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    make_blobs_split(classes, dim, n_per_class, spread, seed, 0)
}

/// Like [`make_blobs`], but draws the points of split `split` around the same
/// centers. Different splits are independent samples of one distribution, so
/// split 1 serves as a held-out set for a model trained on split 0.
pub fn make_blobs_split(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
    split: u32,
) -> Result<Dataset> {
    if classes < 2 || dim < 2 {
        return Err(Error::Config(format!(
            "blobs need at least 2 classes and 2 dimensions, got K={classes}, d={dim}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::Config(
            "blobs need at least one point per class".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!(
            "spread must be finite and non-negative, got {spread}"
        )));
    }
    let center_rng = CounterRng::new(seed, 0);
    let point_rng = CounterRng::new(seed, 1 + split as u64);
    let phase = center_rng.uniform(0) * std::f64::consts::TAU;
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            let angle = phase + std::f64::consts::TAU * k as f64 / classes as f64;
            let mut c = vec![BLOB_RADIUS * angle.cos(), BLOB_RADIUS * angle.sin()];
            for j in 2..dim {
                let u = center_rng.uniform(1 + (k * dim + j) as u64);
                c.push(BLOB_RADIUS * (2.0 * u - 1.0));
            }
            c
        })
        .collect();

    let n = classes * n_per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        for (j, c) in centers[k].iter().enumerate() {
            features.push((c + spread * point_rng.normal((i * dim + j) as u64)) as f32);
        }
        labels.push(k);
    }
    Dataset::new(Tensor::new(vec![n, dim], features)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembler::generate_members;
    use crate::nn::{Activation, ModelSpec};

    fn ckpt() -> Checkpoint {
        let spec = ModelSpec::new(vec![3, 16, 8, 2], Activation::Tanh).unwrap();
        Checkpoint::random_init(spec, 4).unwrap()
    }

    fn bits(c: &Checkpoint) -> Vec<u32> {
        c.flatten().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lpe1");
        let c = ckpt();
        save_checkpoint(&path, &c).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(bits(&back), bits(&c));
        assert_eq!(back.spec(), c.spec());
        assert_eq!(&fs::read(&path).unwrap()[..4], b"LPE1");
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode(&checkpoint_container(&ckpt())).unwrap();
        bytes[3] = b'2';
        assert!(matches!(
            decode(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_corruption_with_counts() {
        let bytes = encode(&checkpoint_container(&ckpt())).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        match decode(cut, Path::new("x")) {
            Err(Error::Corruption {
                expected, found, ..
            }) => assert_eq!(expected, found + 10),
            other => panic!("{other:?}"),
        }
    }

    fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut Header)) -> Vec<u8> {
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        edit(&mut header);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[8 + len..]);
        out
    }

    #[test]
    fn overlapping_offsets_rejected() {
        let bytes = encode(&checkpoint_container(&ckpt())).unwrap();
        let bad = rewrite_header(&bytes, |h| h.tensors[1].offset = 4);
        let err = decode(&bad, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }

    #[test]
    fn inconsistent_length_rejected() {
        let bytes = encode(&checkpoint_container(&ckpt())).unwrap();
        let bad = rewrite_header(&bytes, |h| h.tensors[0].shape = vec![3, 3]);
        assert!(matches!(
            decode(&bad, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn member_set_roundtrip_all_methods() {
        let dir = tempfile::tempdir().unwrap();
        let c = ckpt();
        for (k, method) in [
            Method::Bsr { bits: 5 },
            Method::Rtn { bits: 3 },
            Method::Gaussian { sigma2: 0.01 },
            Method::Mcd { drop_p: 0.25 },
        ]
        .into_iter()
        .enumerate()
        {
            let size = if matches!(method, Method::Rtn { .. }) {
                1
            } else {
                3
            };
            let ms = generate_members(&c, &EnsembleSpec::new(method, size, 10).unwrap()).unwrap();
            let sub = dir.path().join(k.to_string());
            let written = save_member_set(&sub, &ms).unwrap();
            assert_eq!(written.len(), size + 2);
            let back = load_member_set(&sub.join(MANIFEST_FILE)).unwrap();
            assert_eq!(back, ms);
            let member = load_model(&sub.join(member_file_name(0))).unwrap();
            assert_eq!(bits(&member), bits(&ms.member_checkpoint(0).unwrap()));
        }
    }

    #[test]
    fn int5_member_file_smaller_than_fp32_layer() {
        // single masked layer 32×64 and a tiny head
        let spec = ModelSpec::new(vec![64, 32, 2], Activation::Relu).unwrap();
        let c = Checkpoint::random_init(spec, 0).unwrap();
        let ms = generate_members(
            &c,
            &EnsembleSpec::new(Method::Bsr { bits: 5 }, 1, 0).unwrap(),
        )
        .unwrap();
        let member = encode(&member_container(&ms, &ms.members()[0])).unwrap();
        let header_len = u32::from_le_bytes(member[4..8].try_into().unwrap()) as usize;
        assert_eq!(member.len(), 8 + header_len + 32 * 64 + 32 * 4);
        assert!(((8 + header_len + 32 * 64 + 32 * 4) as u64) < 4 * 32 * 64);
    }

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let a = make_blobs(2, 2, 50, 1.0, 3).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.labels().iter().filter(|&&y| y == 0).count(), 50);
        assert_eq!(a, make_blobs(2, 2, 50, 1.0, 3).unwrap());
        assert_ne!(a, make_blobs(2, 2, 50, 1.0, 4).unwrap());
        assert!(make_blobs(1, 2, 5, 1.0, 0).is_err());
        assert!(make_blobs(2, 1, 5, 1.0, 0).is_err());
    }

    #[test]
    fn zero_spread_collapses_onto_centers() {
        let d = make_blobs(4, 3, 5, 0.0, 1).unwrap();
        for i in 0..d.len() {
            assert_eq!(d.features().row(i), d.features().row(i % 4));
        }
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = make_blobs(3, 4, 7, 0.5, 2).unwrap();
        save_dataset_csv(&path, &d).unwrap();
        assert_eq!(load_dataset_csv(&path).unwrap(), d);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("f0,f1,f2,f3,label\n"));
    }

    #[test]
    fn dataset_csv_rejects_bad_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "f0,f1,label\n1,2,0\n3,4,1.5\n").unwrap();
        assert!(matches!(load_dataset_csv(&path), Err(Error::Data(_))));
        fs::write(&path, "x,y,label\n1,2,0\n").unwrap();
        assert!(matches!(load_dataset_csv(&path), Err(Error::Format { .. })));
    }
}
