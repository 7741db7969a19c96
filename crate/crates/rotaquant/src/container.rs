//! The RTA1 tensor container.
//!
//! Layout: magic `RTA1`, a little-endian u64 header length, a JSON header
//! describing every tensor (dtype, shape, payload offset, byte length) plus a
//! free-form `meta` object, then the payload. Tensor offsets are relative to
//! the payload start and 8-byte aligned. Floats are stored as f32; all
//! in-memory arithmetic stays f64.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rotaquant_core::hadamard::{RotationKind, RotationMatrix};
use rotaquant_core::linalg::Matrix;
use rotaquant_core::model::{param_names, ModelCheckpoint, ModelConfig};
use rotaquant_core::rotation::RotationSet;
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"RTA1";
const ALIGN: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not an RTA1 file")]
    BadMagic,
    #[error("truncated file: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("inconsistent container: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
    I32,
}

impl DType {
    pub fn size(&self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 => 1,
        }
    }
}

/// Tensor payload, one vector per dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as u8).collect(),
            TensorData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_bytes(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
            DType::I32 => TensorData::I32(
                bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Self {
        // f32 snap happens exactly here, at the storage boundary.
        Tensor { shape, data: TensorData::F32(values.iter().map(|&v| v as f32).collect()) }
    }

    pub fn f64_values(&self) -> Result<Vec<f64>, FormatError> {
        match &self.data {
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            _ => Err(FormatError::Inconsistent("expected an f32 tensor".into())),
        }
    }

    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    byte_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: BTreeMap<String, HeaderEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named tensors plus a JSON metadata object.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: serde_json::Value,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut entries = BTreeMap::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if t.elements() != t.data.len() {
                return Err(FormatError::Inconsistent(format!(
                    "tensor '{name}': shape {:?} does not match {} stored elements",
                    t.shape,
                    t.data.len()
                )));
            }
            let byte_len = t.data.len() * t.data.dtype().size();
            entries.insert(
                name.clone(),
                HeaderEntry { dtype: t.data.dtype(), shape: t.shape.clone(), offset, byte_len },
            );
            offset = align_up(offset + byte_len);
        }
        let header = Header { tensors: entries, meta: self.meta.clone() };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| FormatError::Header(e.to_string()))?;

        let mut out = Vec::with_capacity(12 + header_json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        // Pad so payload offsets stay 8-byte aligned in the file.
        while (out.len() - 12 - header_json.len()) < align_up(header_json.len()) - header_json.len()
        {
            out.push(0);
        }
        let payload_start = out.len();
        for (name, t) in &self.tensors {
            let entry = &header.tensors[name];
            while out.len() - payload_start < entry.offset {
                out.push(0);
            }
            out.extend_from_slice(&t.data.to_bytes());
        }
        while out.len() - payload_start < offset {
            out.push(0);
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let bytes = fs::read(path)?;
        if bytes.len() < 12 {
            return Err(FormatError::Truncated { need: 12, have: bytes.len() });
        }
        if &bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .ok_or_else(|| FormatError::Header("header length overflow".into()))?;
        if bytes.len() < header_end {
            return Err(FormatError::Truncated { need: header_end, have: bytes.len() });
        }
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| FormatError::Header(e.to_string()))?;
        let payload_start = 12 + align_up(header_len);
        let payload = bytes.get(payload_start..).unwrap_or(&[]);

        let mut tensors = BTreeMap::new();
        for (name, entry) in header.tensors {
            if entry.offset % ALIGN != 0 {
                return Err(FormatError::Inconsistent(format!(
                    "tensor '{name}': offset {} not {ALIGN}-byte aligned",
                    entry.offset
                )));
            }
            let elements: usize = entry.shape.iter().product();
            if entry.byte_len != elements * entry.dtype.size() {
                return Err(FormatError::Inconsistent(format!(
                    "tensor '{name}': shape {:?} needs {} bytes, header says {}",
                    entry.shape,
                    elements * entry.dtype.size(),
                    entry.byte_len
                )));
            }
            let end = entry
                .offset
                .checked_add(entry.byte_len)
                .ok_or_else(|| FormatError::Inconsistent(format!("tensor '{name}': offset overflow")))?;
            if end > payload.len() {
                return Err(FormatError::Truncated {
                    need: payload_start + end,
                    have: bytes.len(),
                });
            }
            let data = TensorData::from_bytes(entry.dtype, &payload[entry.offset..end]);
            tensors.insert(name, Tensor { shape: entry.shape, data });
        }
        Ok(Container { tensors, meta: header.meta })
    }
}

// ---------------------------------------------------------------------------
// Checkpoint <-> container
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RotationMeta {
    dim: usize,
    seed: u64,
    kind: RotationKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct RotationSetMeta {
    r1: Option<RotationMeta>,
    r2_enabled: bool,
    r3: Option<RotationMeta>,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: ModelConfig,
    norm_fused: bool,
    rotated: Option<RotationSetMeta>,
}

fn rotation_meta(r: &RotationMatrix) -> Result<RotationMeta, FormatError> {
    if r.kind == RotationKind::Explicit {
        return Err(FormatError::Inconsistent(
            "explicit rotation matrices are not serializable by seed".into(),
        ));
    }
    Ok(RotationMeta { dim: r.dim, seed: r.seed, kind: r.kind })
}

fn rebuild_rotation(meta: &RotationMeta) -> Result<RotationMatrix, FormatError> {
    let r = match meta.kind {
        RotationKind::PlainHadamard => rotaquant_core::hadamard::hadamard_matrix(meta.dim),
        RotationKind::RandomizedHadamard => {
            rotaquant_core::hadamard::randomized_hadamard(meta.dim, meta.seed)
        }
        RotationKind::Explicit => {
            return Err(FormatError::Inconsistent("explicit rotation in metadata".into()))
        }
    };
    r.map_err(|e| FormatError::Inconsistent(e.to_string()))
}

/// Serialize a checkpoint: one f32 tensor per parameter, config and rotation
/// provenance in `meta`.
pub fn checkpoint_to_container(m: &ModelCheckpoint) -> Result<Container, FormatError> {
    let mut c = Container::default();
    for name in param_names(&m.config) {
        let (rows, cols) = m
            .param_shape(&name)
            .map_err(|e| FormatError::Inconsistent(e.to_string()))?;
        let values = m.param(&name).map_err(|e| FormatError::Inconsistent(e.to_string()))?;
        c.tensors.insert(name, Tensor::from_f64(vec![rows, cols], values));
    }
    let rotated = match &m.rotated {
        Some(set) => Some(RotationSetMeta {
            r1: set.r1.as_ref().map(rotation_meta).transpose()?,
            r2_enabled: set.r2_enabled,
            r3: set.r3.as_ref().map(rotation_meta).transpose()?,
            seed: set.seed,
        }),
        None => None,
    };
    let meta = CheckpointMeta {
        kind: "checkpoint".into(),
        config: m.config.clone(),
        norm_fused: m.norm_fused,
        rotated,
    };
    c.meta = serde_json::to_value(meta).map_err(|e| FormatError::Header(e.to_string()))?;
    Ok(c)
}

/// Rebuild a checkpoint from a container written by [`checkpoint_to_container`].
pub fn container_to_checkpoint(c: &Container) -> Result<ModelCheckpoint, FormatError> {
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| FormatError::Header(format!("checkpoint meta: {e}")))?;
    if meta.kind != "checkpoint" {
        return Err(FormatError::Inconsistent(format!(
            "expected a checkpoint container, found kind '{}'",
            meta.kind
        )));
    }
    let mut m = rotaquant_core::model::init_model(&meta.config)
        .map_err(|e| FormatError::Inconsistent(e.to_string()))?;
    for name in param_names(&meta.config) {
        let t = c
            .tensors
            .get(&name)
            .ok_or_else(|| FormatError::Inconsistent(format!("missing tensor '{name}'")))?;
        let values = t.f64_values()?;
        let slot = m.param_mut(&name).map_err(|e| FormatError::Inconsistent(e.to_string()))?;
        if slot.len() != values.len() {
            return Err(FormatError::Inconsistent(format!(
                "tensor '{name}': expected {} elements, found {}",
                slot.len(),
                values.len()
            )));
        }
        slot.copy_from_slice(&values);
    }
    m.norm_fused = meta.norm_fused;
    m.rotated = match meta.rotated {
        Some(set) => Some(RotationSet {
            r1: set.r1.as_ref().map(rebuild_rotation).transpose()?,
            r2_enabled: set.r2_enabled,
            r3: set.r3.as_ref().map(rebuild_rotation).transpose()?,
            seed: set.seed,
        }),
        None => None,
    };
    Ok(m)
}

pub fn save_checkpoint(m: &ModelCheckpoint, path: &Path) -> Result<(), FormatError> {
    checkpoint_to_container(m)?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, FormatError> {
    container_to_checkpoint(&Container::load(path)?)
}

// ---------------------------------------------------------------------------
// Adapters
// ---------------------------------------------------------------------------

/// Store trained adapters as `lora.{layer}.{proj}.{a|b}` f32 tensors.
pub fn adapters_to_container(
    adapters: &[rotaquant_core::lora::LoraAdapter],
    meta: serde_json::Value,
) -> Container {
    let mut c = Container { meta, ..Container::default() };
    for ad in adapters {
        let stem = format!("lora.{}.{}", ad.layer, ad.proj.field());
        c.tensors.insert(
            format!("{stem}.a"),
            Tensor::from_f64(vec![ad.a.rows(), ad.a.cols()], ad.a.data()),
        );
        c.tensors.insert(
            format!("{stem}.b"),
            Tensor::from_f64(vec![ad.b.rows(), ad.b.cols()], ad.b.data()),
        );
    }
    c
}

// ---------------------------------------------------------------------------
// Quantized tensors
// ---------------------------------------------------------------------------

/// Store quantized projections: codes (i8 up to 8 bits, i32 above), f32
/// scales, i32 zero points when present.
pub fn quantized_to_container(
    tensors: &BTreeMap<String, rotaquant_core::quant::QuantizedTensor>,
    meta: serde_json::Value,
) -> Container {
    let mut c = Container { meta, ..Container::default() };
    for (name, q) in tensors {
        let shape = vec![q.rows, q.cols];
        let codes = if q.bits <= 8 {
            TensorData::I8(q.codes.iter().map(|&v| v as i8).collect())
        } else {
            TensorData::I32(q.codes.clone())
        };
        c.tensors.insert(format!("{name}.codes"), Tensor { shape, data: codes });
        c.tensors.insert(
            format!("{name}.scales"),
            Tensor::from_f64(vec![q.scales.len()], &q.scales),
        );
        if let Some(zp) = &q.zero_points {
            c.tensors.insert(
                format!("{name}.zero_points"),
                Tensor { shape: vec![zp.len()], data: TensorData::I32(zp.clone()) },
            );
        }
    }
    c
}

/// Rebuild the dequantized weights from a quantized container.
pub fn dequantize_container(c: &Container) -> Result<BTreeMap<String, Matrix>, FormatError> {
    let mut out = BTreeMap::new();
    for (name, t) in &c.tensors {
        let Some(stem) = name.strip_suffix(".codes") else { continue };
        if t.shape.len() != 2 {
            return Err(FormatError::Inconsistent(format!("'{name}' must be 2-D")));
        }
        let (rows, cols) = (t.shape[0], t.shape[1]);
        let scales = c
            .tensors
            .get(&format!("{stem}.scales"))
            .ok_or_else(|| FormatError::Inconsistent(format!("missing '{stem}.scales'")))?
            .f64_values()?;
        if scales.len() != cols {
            return Err(FormatError::Inconsistent(format!(
                "'{stem}': {} scales for {cols} columns",
                scales.len()
            )));
        }
        let codes: Vec<i64> = match &t.data {
            TensorData::I8(v) => v.iter().map(|&x| x as i64).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as i64).collect(),
            TensorData::F32(_) => {
                return Err(FormatError::Inconsistent(format!("'{name}' must be integer")))
            }
        };
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, codes[i * cols + j] as f64 * scales[j]);
            }
        }
        out.insert(stem.to_string(), m);
    }
    Ok(out)
}
