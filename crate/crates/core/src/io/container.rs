//! The `AXTC` binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "AXTC"
//! version  u16      1
//! length   u32      byte length of the manifest
//! manifest UTF-8 JSON, `length` bytes
//! padding  zero bytes up to the next multiple of 8
//! payload  f32 tensors, row-major, each starting on an 8-byte boundary
//! ```
//!
//! Tensor offsets in the manifest are relative to the start of the payload.
//! The file ends exactly at the end of the last tensor.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::adapt::{AdaptLayer, AdaptState};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::merge::{MergedDelta, MergedLayer, Provenance};
use crate::params::{ParamSet, TaskVector, Tensor};

pub const MAGIC: &[u8; 4] = b"AXTC";
pub const VERSION: u16 = 1;
/// Magic, version and manifest length.
pub const HEADER_LEN: usize = 10;

/// Flag marking learnable singular values in an adaptation state.
pub const FLAG_LEARNABLE: &str = "learnable";
pub const FLAG_FROZEN: &str = "frozen";
pub const FLAG_FACTOR_U: &str = "factor_u";
pub const FLAG_FACTOR_V: &str = "factor_v";
pub const FLAG_SINGULAR_VALUES: &str = "singular_values";
pub const FLAG_NON_ORTHOGONAL: &str = "non_orthogonal";
pub const FLAG_VECTOR_DELTA: &str = "vector_delta";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectType {
    ParamSet,
    TaskVector,
    MergedDelta,
    AdaptState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKindTag {
    Matrix,
    Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKindTag,
    pub shape: Vec<u64>,
    pub dtype: String,
    pub offset: u64,
    pub byte_len: u64,
    #[serde(default)]
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub object_type: ObjectType,
    #[serde(default)]
    pub attrs: BTreeMap<String, Value>,
    pub tensors: Vec<TensorEntry>,
}

/// Any object a container can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum ContainerObject {
    ParamSet(ParamSet),
    TaskVector(TaskVector),
    MergedDelta(MergedDelta),
    AdaptState(AdaptState),
}

impl ContainerObject {
    pub fn object_type(&self) -> ObjectType {
        match self {
            ContainerObject::ParamSet(_) => ObjectType::ParamSet,
            ContainerObject::TaskVector(_) => ObjectType::TaskVector,
            ContainerObject::MergedDelta(_) => ObjectType::MergedDelta,
            ContainerObject::AdaptState(_) => ObjectType::AdaptState,
        }
    }
}

impl From<ParamSet> for ContainerObject {
    fn from(p: ParamSet) -> Self {
        ContainerObject::ParamSet(p)
    }
}

impl From<TaskVector> for ContainerObject {
    fn from(t: TaskVector) -> Self {
        ContainerObject::TaskVector(t)
    }
}

impl From<MergedDelta> for ContainerObject {
    fn from(m: MergedDelta) -> Self {
        ContainerObject::MergedDelta(m)
    }
}

impl From<AdaptState> for ContainerObject {
    fn from(a: AdaptState) -> Self {
        ContainerObject::AdaptState(a)
    }
}

struct Pending<'a> {
    name: String,
    kind: TensorKindTag,
    shape: Vec<u64>,
    flags: Vec<&'static str>,
    values: &'a [f64],
}

impl<'a> Pending<'a> {
    fn matrix(name: String, m: &'a Matrix, flags: Vec<&'static str>) -> Self {
        Self {
            name,
            kind: TensorKindTag::Matrix,
            shape: vec![m.rows() as u64, m.cols() as u64],
            flags,
            values: m.as_slice(),
        }
    }

    fn vector(name: String, v: &'a [f64], flags: Vec<&'static str>) -> Self {
        Self {
            name,
            kind: TensorKindTag::Vector,
            shape: vec![v.len() as u64],
            flags,
            values: v,
        }
    }

    fn tensor(name: &str, t: &'a Tensor) -> Self {
        match t {
            Tensor::Matrix(m) => Self::matrix(name.to_string(), m, vec![]),
            Tensor::Vector(v) => Self::vector(name.to_string(), v, vec![]),
        }
    }
}

fn factor_name(layer: &str, role: &str) -> String {
    format!("{layer}::{role}")
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

/// Serializes an object to container bytes. Identical input gives identical
/// bytes.
pub fn encode(object: &ContainerObject) -> Vec<u8> {
    let mut attrs = BTreeMap::new();
    let mut pending: Vec<Pending<'_>> = Vec::new();
    match object {
        ContainerObject::ParamSet(p) => {
            pending.extend(p.iter().map(|(n, t)| Pending::tensor(n, t)));
        }
        ContainerObject::TaskVector(tv) => {
            attrs.insert("source_id".to_string(), json!(tv.source_id));
            pending.extend(tv.deltas.iter().map(|(n, t)| Pending::tensor(n, t)));
        }
        ContainerObject::MergedDelta(m) => {
            attrs.insert(
                "provenance".to_string(),
                serde_json::to_value(&m.provenance).expect("provenance is plain data"),
            );
            for (name, layer) in &m.layers {
                let mut s_flags = vec![FLAG_SINGULAR_VALUES];
                if !layer.orthogonal {
                    s_flags.push(FLAG_NON_ORTHOGONAL);
                }
                pending.push(Pending::matrix(factor_name(name, "U"), &layer.u, vec![FLAG_FACTOR_U]));
                pending.push(Pending::vector(factor_name(name, "s"), &layer.s, s_flags));
                pending.push(Pending::matrix(factor_name(name, "V"), &layer.v, vec![FLAG_FACTOR_V]));
            }
            for (name, v) in &m.vector_deltas {
                pending.push(Pending::vector(name.clone(), v, vec![FLAG_VECTOR_DELTA]));
            }
        }
        ContainerObject::AdaptState(a) => {
            attrs.insert("n_fraction".to_string(), json!(a.n_fraction));
            for (name, layer) in &a.layers {
                pending.push(Pending::matrix(factor_name(name, "U"), &layer.u, vec![FLAG_FACTOR_U]));
                pending.push(Pending::vector(factor_name(name, "lambda"), &layer.lambda, vec![FLAG_LEARNABLE]));
                pending.push(Pending::vector(factor_name(name, "s_frozen"), &layer.s_frozen, vec![FLAG_FROZEN]));
                pending.push(Pending::matrix(factor_name(name, "V"), &layer.v, vec![FLAG_FACTOR_V]));
            }
            for (name, v) in &a.vector_deltas {
                pending.push(Pending::vector(name.clone(), v, vec![FLAG_VECTOR_DELTA]));
            }
        }
    }

    let mut tensors = Vec::with_capacity(pending.len());
    let mut offset = 0usize;
    for p in &pending {
        offset = align8(offset);
        let byte_len = 4 * p.values.len();
        tensors.push(TensorEntry {
            name: p.name.clone(),
            kind: p.kind,
            shape: p.shape.clone(),
            dtype: "f32".to_string(),
            offset: offset as u64,
            byte_len: byte_len as u64,
            flags: p.flags.iter().map(|f| f.to_string()).collect(),
        });
        offset += byte_len;
    }
    let manifest = Manifest {
        object_type: object.object_type(),
        attrs,
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest is plain data");

    let payload_start = align8(HEADER_LEN + manifest_bytes.len());
    let mut out = Vec::with_capacity(payload_start + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.resize(payload_start, 0);
    for (p, entry) in pending.iter().zip(&manifest.tensors) {
        out.resize(payload_start + entry.offset as usize, 0);
        for &x in p.values {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

/// Parsed and validated container: manifest plus decoded tensor values.
#[derive(Clone, Debug)]
pub struct RawContainer {
    pub manifest: Manifest,
    pub values: Vec<Vec<f64>>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptFile(msg.into())
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::FormatError(msg.into())
}

/// Validates every structural invariant and decodes the tensors.
pub fn parse(bytes: &[u8]) -> Result<RawContainer> {
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        return Err(format_err("bad magic, not an AXTC container"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("truncated header ({} bytes)", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let manifest_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let manifest_end = HEADER_LEN
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("manifest extends past end of file"))?;
    let text = std::str::from_utf8(&bytes[HEADER_LEN..manifest_end])
        .map_err(|e| format_err(format!("manifest is not UTF-8: {e}")))?;
    let manifest: Manifest =
        serde_json::from_str(text).map_err(|e| format_err(format!("manifest JSON: {e}")))?;

    let payload_start = align8(manifest_end);
    if bytes.len() < payload_start {
        return Err(corrupt("truncated before payload"));
    }
    if bytes[manifest_end..payload_start].iter().any(|&b| b != 0) {
        return Err(corrupt("nonzero manifest padding"));
    }
    let payload = &bytes[payload_start..];

    let mut names = HashSet::new();
    let mut values = Vec::with_capacity(manifest.tensors.len());
    let mut prev_end = 0u64;
    for t in &manifest.tensors {
        if !names.insert(t.name.as_str()) {
            return Err(format_err(format!("duplicate tensor name `{}`", t.name)));
        }
        if t.dtype != "f32" {
            return Err(format_err(format!("tensor `{}`: unsupported dtype `{}`", t.name, t.dtype)));
        }
        let dims = match t.kind {
            TensorKindTag::Matrix => 2,
            TensorKindTag::Vector => 1,
        };
        if t.shape.len() != dims {
            return Err(format_err(format!("tensor `{}`: shape {:?} does not fit its kind", t.name, t.shape)));
        }
        let expected = t
            .shape
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(format!("tensor `{}`: shape overflows", t.name)))?;
        if t.byte_len != expected {
            return Err(corrupt(format!(
                "tensor `{}`: byte_len {} but shape needs {expected}",
                t.name, t.byte_len
            )));
        }
        if t.offset % 8 != 0 {
            return Err(corrupt(format!("tensor `{}`: offset {} not 8-byte aligned", t.name, t.offset)));
        }
        if t.offset < prev_end {
            return Err(corrupt(format!("tensor `{}`: offset {} overlaps previous tensor", t.name, t.offset)));
        }
        let end = t
            .offset
            .checked_add(t.byte_len)
            .filter(|&e| e <= payload.len() as u64)
            .ok_or_else(|| corrupt(format!("tensor `{}` runs past end of file", t.name)))?;
        let data = &payload[t.offset as usize..end as usize];
        let decoded: Vec<f64> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if decoded.iter().any(|x| !x.is_finite()) {
            return Err(corrupt(format!("tensor `{}` holds non-finite values", t.name)));
        }
        values.push(decoded);
        prev_end = end;
    }
    if prev_end != payload.len() as u64 {
        return Err(corrupt(format!(
            "{} trailing bytes after last tensor",
            payload.len() as u64 - prev_end
        )));
    }
    Ok(RawContainer { manifest, values })
}

fn to_tensor(entry: &TensorEntry, values: Vec<f64>) -> Result<Tensor> {
    Ok(match entry.kind {
        TensorKindTag::Matrix => Tensor::Matrix(Matrix::new(entry.shape[0] as usize, entry.shape[1] as usize, values)?),
        TensorKindTag::Vector => Tensor::Vector(values),
    })
}

fn split_factor_name(name: &str) -> Result<(&str, &str)> {
    name.rsplit_once("::")
        .ok_or_else(|| format_err(format!("tensor `{name}` is not a `layer::role` factor")))
}

#[derive(Default)]
struct FactorParts {
    u: Option<Matrix>,
    v: Option<Matrix>,
    s: Option<Vec<f64>>,
    frozen: Option<Vec<f64>>,
    non_orthogonal: bool,
}

fn take<T>(slot: Option<T>, layer: &str, what: &str) -> Result<T> {
    slot.ok_or_else(|| format_err(format!("layer `{layer}` is missing its {what}")))
}

/// Decodes container bytes into the object they hold.
pub fn decode(bytes: &[u8]) -> Result<ContainerObject> {
    let RawContainer { manifest, values } = parse(bytes)?;
    let entries = manifest.tensors.iter().zip(values);
    match manifest.object_type {
        ObjectType::ParamSet | ObjectType::TaskVector => {
            let mut params = ParamSet::new();
            for (entry, vals) in entries {
                params.insert(entry.name.clone(), to_tensor(entry, vals)?)?;
            }
            if manifest.object_type == ObjectType::ParamSet {
                return Ok(ContainerObject::ParamSet(params));
            }
            let source_id = manifest
                .attrs
                .get("source_id")
                .and_then(Value::as_str)
                .ok_or_else(|| format_err("task vector without a source_id"))?
                .to_string();
            Ok(ContainerObject::TaskVector(TaskVector {
                source_id,
                deltas: params,
            }))
        }
        ObjectType::MergedDelta | ObjectType::AdaptState => {
            let mut parts: BTreeMap<String, FactorParts> = BTreeMap::new();
            let mut vector_deltas = BTreeMap::new();
            for (entry, vals) in entries {
                let has = |f: &str| entry.flags.iter().any(|x| x == f);
                if has(FLAG_VECTOR_DELTA) {
                    vector_deltas.insert(entry.name.clone(), vals);
                    continue;
                }
                let (layer, _) = split_factor_name(&entry.name)?;
                let slot = parts.entry(layer.to_string()).or_default();
                let tensor = to_tensor(entry, vals)?;
                match (tensor, entry.kind) {
                    (Tensor::Matrix(m), _) if has(FLAG_FACTOR_U) => slot.u = Some(m),
                    (Tensor::Matrix(m), _) if has(FLAG_FACTOR_V) => slot.v = Some(m),
                    (Tensor::Vector(v), _) if has(FLAG_SINGULAR_VALUES) || has(FLAG_LEARNABLE) => {
                        slot.non_orthogonal = has(FLAG_NON_ORTHOGONAL);
                        slot.s = Some(v);
                    }
                    (Tensor::Vector(v), _) if has(FLAG_FROZEN) => slot.frozen = Some(v),
                    _ => return Err(format_err(format!("tensor `{}` has no recognised role", entry.name))),
                }
            }
            if manifest.object_type == ObjectType::MergedDelta {
                let provenance: Provenance = manifest
                    .attrs
                    .get("provenance")
                    .cloned()
                    .ok_or_else(|| format_err("merged delta without provenance"))
                    .and_then(|v| serde_json::from_value(v).map_err(|e| format_err(format!("provenance: {e}"))))?;
                let mut layers = BTreeMap::new();
                for (name, p) in parts {
                    let layer = MergedLayer {
                        u: take(p.u, &name, "U factor")?,
                        s: take(p.s, &name, "singular values")?,
                        v: take(p.v, &name, "V factor")?,
                        orthogonal: !p.non_orthogonal,
                    };
                    check_widths(&name, &layer.u, &layer.v, layer.s.len())?;
                    layers.insert(name, layer);
                }
                Ok(ContainerObject::MergedDelta(MergedDelta {
                    layers,
                    vector_deltas,
                    provenance,
                }))
            } else {
                let n_fraction = manifest
                    .attrs
                    .get("n_fraction")
                    .and_then(Value::as_f64)
                    .ok_or_else(|| format_err("adapt state without n_fraction"))?;
                let mut layers = BTreeMap::new();
                for (name, p) in parts {
                    let layer = AdaptLayer {
                        u: take(p.u, &name, "U factor")?,
                        v: take(p.v, &name, "V factor")?,
                        lambda: take(p.s, &name, "learnable values")?,
                        s_frozen: take(p.frozen, &name, "frozen values")?,
                    };
                    check_widths(&name, &layer.u, &layer.v, layer.lambda.len() + layer.s_frozen.len())?;
                    layers.insert(name, layer);
                }
                Ok(ContainerObject::AdaptState(AdaptState {
                    layers,
                    vector_deltas,
                    n_fraction,
                }))
            }
        }
    }
}

fn check_widths(name: &str, u: &Matrix, v: &Matrix, width: usize) -> Result<()> {
    if u.cols() != width || v.cols() != width {
        return Err(format_err(format!(
            "layer `{name}`: factor widths {} / {} vs {width} singular values",
            u.cols(),
            v.cols()
        )));
    }
    Ok(())
}

pub fn write_container(path: impl AsRef<Path>, object: &ContainerObject) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(object)).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<ContainerObject> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads only the manifest, after full validation.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse(&bytes)?.manifest)
}
