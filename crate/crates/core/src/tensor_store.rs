//! Checkpoint data model and safetensors serialization.
//!
//! A safetensors file is laid out as
//!
//! ```text
//! [ u64 LE header length N ][ N bytes of JSON header ][ tensor data ]
//! ```
//!
//! where the header maps each tensor name to `{dtype, shape, data_offsets}`
//! (offsets relative to the start of the data section) and an optional
//! `__metadata__` string map. Tensors are written in lexicographic name order
//! with no gaps, and the header is padded with spaces to an 8-byte boundary.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use half::{bf16, f16};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

/// Element type of a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dtype {
    F64,
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub const ALL: [Dtype; 4] = [Dtype::F64, Dtype::F32, Dtype::F16, Dtype::BF16];

    /// Element size in bytes.
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F64 => "F64",
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    fn decode(self, bytes: &[u8]) -> f64 {
        match self {
            Dtype::F64 => f64::from_le_bytes(bytes.try_into().unwrap()),
            Dtype::F32 => f32::from_le_bytes(bytes.try_into().unwrap()) as f64,
            Dtype::F16 => f16::from_le_bytes(bytes.try_into().unwrap()).to_f64(),
            Dtype::BF16 => bf16::from_le_bytes(bytes.try_into().unwrap()).to_f64(),
        }
    }

    fn encode(self, value: f64, out: &mut Vec<u8>) {
        match self {
            Dtype::F64 => out.extend_from_slice(&value.to_le_bytes()),
            Dtype::F32 => out.extend_from_slice(&(value as f32).to_le_bytes()),
            Dtype::F16 => out.extend_from_slice(&f16::from_f32(round_to_odd_f32(value)).to_le_bytes()),
            Dtype::BF16 => {
                out.extend_from_slice(&bf16::from_f32(round_to_odd_f32(value)).to_le_bytes())
            }
        }
    }
}

/// Narrows an f64 to f32 with round-to-odd, so that a second nearest-even
/// rounding to a 16-bit format matches a single correctly rounded conversion.
fn round_to_odd_f32(value: f64) -> f32 {
    let nearest = value as f32;
    if !nearest.is_finite() || nearest as f64 == value {
        return nearest;
    }
    let mut bits = nearest.to_bits();
    if (nearest as f64).abs() > value.abs() {
        bits -= 1;
    }
    f32::from_bits(bits | 1)
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F64" => Ok(Dtype::F64),
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// A dense little-endian tensor buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tensor {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Tensor {
    /// Wraps a raw little-endian buffer, checking its length against the shape.
    pub fn new(dtype: Dtype, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected = element_count(&shape)
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::invalid(format!("shape {shape:?} overflows")))?;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "buffer of {} bytes does not match shape {shape:?} with dtype {dtype} ({expected} bytes)",
                data.len()
            )));
        }
        Ok(Self { dtype, shape, data })
    }

    /// Encodes `values` into `dtype`, rounding to nearest-even.
    pub fn from_f64(dtype: Dtype, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let mut data = Vec::with_capacity(values.len() * dtype.size());
        for &v in values {
            dtype.encode(v, &mut data);
        }
        Self::new(dtype, shape, data)
    }

    pub fn from_f32(dtype: Dtype, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let wide: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        Self::from_f64(dtype, shape, &wide)
    }

    pub fn zeros(dtype: Dtype, shape: Vec<usize>) -> Self {
        let n = element_count(&shape).expect("shape overflow");
        let values = vec![0.0; n];
        Self::from_f64(dtype, shape, &values).expect("consistent zero buffer")
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Raw little-endian element bytes.
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len() / self.dtype.size()
    }

    /// Decodes every element exactly into f64.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.dtype.size())
            .map(|b| self.dtype.decode(b))
            .collect()
    }

    /// Bytes of the element at flat index `i`.
    pub fn element_bytes(&self, i: usize) -> &[u8] {
        let size = self.dtype.size();
        &self.data[i * size..(i + 1) * size]
    }

    /// Builds a tensor of the same dtype and shape from f64 values, taking
    /// the original element bytes wherever `keep_original[i]` is true.
    pub(crate) fn rebuild_with(&self, values: &[f64], keep_original: Option<&[bool]>) -> Tensor {
        debug_assert_eq!(values.len(), self.numel());
        let size = self.dtype.size();
        let mut data = Vec::with_capacity(self.data.len());
        for (i, &v) in values.iter().enumerate() {
            match keep_original {
                Some(keep) if keep[i] => data.extend_from_slice(&self.data[i * size..(i + 1) * size]),
                _ => self.dtype.encode(v, &mut data),
            }
        }
        Tensor {
            dtype: self.dtype,
            shape: self.shape.clone(),
            data,
        }
    }
}

/// Description of one layer (named tensor) shared by a set of checkpoints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl LayerInfo {
    pub fn numel(&self) -> usize {
        element_count(&self.shape).unwrap_or(0)
    }
}

/// Ordered layer list; index `l` in every downstream structure refers to
/// `layers()[l]`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LayerCatalog {
    layers: Vec<LayerInfo>,
}

impl LayerCatalog {
    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.layers.iter().map(LayerInfo::numel).sum()
    }
}

/// One model's weights: named tensors in lexicographic order plus optional
/// string metadata.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Checkpoint {
    entries: BTreeMap<String, Tensor>,
    metadata: Option<BTreeMap<String, String>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<BTreeMap<String, String>>) {
        self.metadata = metadata;
    }

    pub fn insert_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata
            .get_or_insert_with(BTreeMap::new)
            .insert(key.into(), value.into());
    }

    /// Catalog of this checkpoint alone.
    pub fn catalog(&self) -> LayerCatalog {
        LayerCatalog {
            layers: self
                .entries
                .iter()
                .map(|(name, t)| LayerInfo {
                    name: name.clone(),
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                })
                .collect(),
        }
    }

    /// Serialized JSON header, without the length prefix or padding.
    pub fn header_json(&self) -> String {
        let mut header = Map::new();
        if let Some(meta) = &self.metadata {
            let meta: Map<String, Value> = meta
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert(METADATA_KEY.to_string(), Value::Object(meta));
        }
        let mut offset = 0usize;
        for (name, tensor) in &self.entries {
            let end = offset + tensor.data.len();
            let mut entry = Map::new();
            entry.insert("dtype".into(), Value::String(tensor.dtype.as_str().into()));
            entry.insert("shape".into(), Value::from(tensor.shape.clone()));
            entry.insert("data_offsets".into(), Value::from(vec![offset, end]));
            header.insert(name.clone(), Value::Object(entry));
            offset = end;
        }
        Value::Object(header).to_string()
    }

    /// Encodes the checkpoint as a complete safetensors byte stream.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.header_json().into_bytes();
        let padded = header.len().div_ceil(8) * 8;
        header.resize(padded, b' ');
        let body: usize = self.entries.values().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(8 + header.len() + body);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for tensor in self.entries.values() {
            out.extend_from_slice(&tensor.data);
        }
        out
    }

    /// Parses a safetensors byte stream.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format("file shorter than the 8-byte header length"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let n = usize::try_from(n)
            .ok()
            .filter(|&n| n <= bytes.len() - 8)
            .ok_or_else(|| Error::format(format!("header length {n} exceeds file size")))?;
        let header_text = std::str::from_utf8(&bytes[8..8 + n])
            .map_err(|e| Error::format(format!("header is not UTF-8: {e}")))?;
        let header: Map<String, Value> = serde_json::from_str(header_text)
            .map_err(|e| Error::format(format!("header is not a JSON object: {e}")))?;
        let buffer = &bytes[8 + n..];

        let mut metadata = None;
        let mut regions = Vec::new();
        let mut entries = BTreeMap::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                metadata = Some(parse_metadata(value)?);
                continue;
            }
            let (dtype, shape, start, end) = parse_entry(&name, &value)?;
            if end > buffer.len() {
                return Err(Error::format(format!(
                    "tensor {name:?}: offset out of bounds ({end} > {})",
                    buffer.len()
                )));
            }
            let expected = element_count(&shape)
                .and_then(|c| c.checked_mul(dtype.size()))
                .ok_or_else(|| Error::format(format!("tensor {name:?}: shape overflows")))?;
            if end - start != expected {
                return Err(Error::format(format!(
                    "tensor {name:?}: data length {} does not match shape {shape:?} ({expected} bytes)",
                    end - start
                )));
            }
            regions.push((start, end, name.clone()));
            entries.insert(
                name,
                Tensor {
                    dtype,
                    shape,
                    data: buffer[start..end].to_vec(),
                },
            );
        }

        regions.sort();
        let mut cursor = 0usize;
        for (start, end, name) in &regions {
            if *start < cursor {
                return Err(Error::format(format!("tensor {name:?}: overlapping data offsets")));
            }
            if *start > cursor {
                return Err(Error::format(format!("gap in data before tensor {name:?}")));
            }
            cursor = *end;
        }
        if cursor != buffer.len() {
            return Err(Error::format(format!(
                "{} trailing bytes not covered by any tensor",
                buffer.len() - cursor
            )));
        }

        Ok(Self { entries, metadata })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_checkpoint(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(self, path)
    }
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = value else {
        return Err(Error::format("__metadata__ must be an object"));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            _ => Err(Error::format(format!("metadata value for {k:?} is not a string"))),
        })
        .collect()
}

fn parse_entry(name: &str, value: &Value) -> Result<(Dtype, Vec<usize>, usize, usize)> {
    let bad = |what: &str| Error::format(format!("tensor {name:?}: {what}"));
    let obj = value.as_object().ok_or_else(|| bad("entry is not an object"))?;
    let dtype: Dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing dtype"))?
        .parse()?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| d.as_u64().and_then(|d| usize::try_from(d).ok()))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("shape must hold nonnegative integers"))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| bad("data_offsets must be a pair"))?;
    let offset = |v: &Value| {
        v.as_u64()
            .and_then(|o| usize::try_from(o).ok())
            .ok_or_else(|| bad("data_offsets must be nonnegative integers"))
    };
    let (start, end) = (offset(&offsets[0])?, offset(&offsets[1])?);
    if end < start {
        return Err(bad("data_offsets end precedes start"));
    }
    Ok((dtype, shape, start, end))
}

/// Reads a safetensors file into memory.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes a checkpoint as safetensors. Identical checkpoints produce
/// identical files.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Checks that every checkpoint has the same tensor names, shapes and dtypes,
/// returning the shared catalog.
pub fn validate_compatibility(ckpts: &[&Checkpoint]) -> Result<LayerCatalog> {
    let (first, rest) = ckpts
        .split_first()
        .ok_or_else(|| Error::invalid("no checkpoints given"))?;
    for (i, other) in rest.iter().enumerate() {
        check_pair(first, other, i + 1, true)?;
    }
    Ok(first.catalog())
}

/// Like [`validate_compatibility`] but ignores dtypes; used for auxiliary
/// per-parameter inputs such as importance weights.
pub(crate) fn validate_shapes(reference: &Checkpoint, other: &Checkpoint, label: &str) -> Result<()> {
    check_pair(reference, other, 0, false).map_err(|e| match e {
        Error::Incompatible(msg) => Error::incompatible(format!("{label}: {msg}")),
        other => other,
    })
}

fn check_pair(first: &Checkpoint, other: &Checkpoint, index: usize, check_dtype: bool) -> Result<()> {
    if let Some(name) = first.names().find(|n| other.get(n).is_none()) {
        return Err(Error::incompatible(format!(
            "checkpoint {index} is missing tensor {name:?}"
        )));
    }
    if let Some(name) = other.names().find(|n| first.get(n).is_none()) {
        return Err(Error::incompatible(format!(
            "checkpoint {index} has extra tensor {name:?}"
        )));
    }
    for (name, a) in first.iter() {
        let b = &other.entries[name];
        if a.shape != b.shape {
            return Err(Error::incompatible(format!(
                "tensor {name:?}: shape {:?} in checkpoint 0 but {:?} in checkpoint {index}",
                a.shape, b.shape
            )));
        }
        if check_dtype && a.dtype != b.dtype {
            return Err(Error::incompatible(format!(
                "tensor {name:?}: dtype {} in checkpoint 0 but {} in checkpoint {index}",
                a.dtype, b.dtype
            )));
        }
    }
    Ok(())
}
