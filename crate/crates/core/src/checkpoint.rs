//! Bit-exact container format (`MATSCKPT`) for named parameter sets and
//! statistics bundles — the only persistence format in the project.
//!
//! Layout: 8-byte magic `MATSCKPT`, 1-byte version (= 1), 1-byte kind
//! (0 = checkpoint, 1 = stats), a little-endian `u64` header length, a UTF-8
//! JSON header with sorted keys, a payload of row-major little-endian IEEE-754
//! `f64` values, and a trailing little-endian CRC-32 (IEEE) of the payload.
//! Identical values always produce identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MatsError, Result};
use crate::fisher::{FisherMode, LayerStats};
use crate::synth::Split;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"MATSCKPT";
pub const FORMAT_VERSION: u8 = 1;
const KIND_CHECKPOINT: u8 = 0;
const KIND_STATS: u8 = 1;
const FIXED_PREFIX: usize = 8 + 1 + 1 + 8;

/// Role of a named parameter: a linear-layer weight matrix or a flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    LinearWeight { d: usize, k: usize },
    Vector { n: usize },
}

impl ParamRole {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            ParamRole::LinearWeight { d, k } => vec![*d, *k],
            ParamRole::Vector { n } => vec![*n],
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ParamRole::LinearWeight { d, k } => d * k,
            ParamRole::Vector { n } => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tag(&self) -> &'static str {
        match self {
            ParamRole::LinearWeight { .. } => "linear_weight",
            ParamRole::Vector { .. } => "vector",
        }
    }

    fn from_tag_shape(tag: &str, shape: &[usize]) -> Option<ParamRole> {
        match (tag, shape) {
            ("linear_weight", [d, k]) => Some(ParamRole::LinearWeight { d: *d, k: *k }),
            ("vector", [n]) => Some(ParamRole::Vector { n: *n }),
            _ => None,
        }
    }
}

impl fmt::Display for ParamRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamRole::LinearWeight { d, k } => write!(f, "linear_weight({d},{k})"),
            ParamRole::Vector { n } => write!(f, "vector({n})"),
        }
    }
}

/// One named tensor: a role plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub role: ParamRole,
    pub values: Vec<f64>,
}

impl Param {
    pub fn weight(m: Matrix) -> Param {
        let role = ParamRole::LinearWeight {
            d: m.rows(),
            k: m.cols(),
        };
        Param {
            role,
            values: m.into_data(),
        }
    }

    pub fn vector(values: Vec<f64>) -> Param {
        Param {
            role: ParamRole::Vector { n: values.len() },
            values,
        }
    }

    /// Weight matrices materialized as a [`Matrix`]; errors on vector roles.
    pub fn as_matrix(&self) -> Result<Matrix> {
        match self.role {
            ParamRole::LinearWeight { d, k } => Matrix::from_vec(d, k, self.values.clone()),
            ParamRole::Vector { .. } => Err(MatsError::Shape(
                "vector parameter has no matrix view".into(),
            )),
        }
    }

    fn check_consistent(&self, name: &str) -> Result<()> {
        if self.values.len() != self.role.len() {
            return Err(MatsError::Shape(format!(
                "parameter `{name}`: {} values for role {}",
                self.values.len(),
                self.role
            )));
        }
        Ok(())
    }
}

/// Named map of parameter tensors with provenance metadata; the unit merged
/// and evaluated.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Param>,
    pub provenance: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.entries.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// name → shape map used by the mergeability check.
    pub fn shape_map(&self) -> BTreeMap<&str, Vec<usize>> {
        self.entries
            .iter()
            .map(|(k, p)| (k.as_str(), p.role.shape()))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        match load(path)? {
            Container::Checkpoint(c) => Ok(c),
            Container::Stats(_) => Err(MatsError::Format {
                offset: 9,
                reason: "expected a checkpoint container, found stats".into(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = BTreeMap::new();
        for (name, param) in &self.entries {
            param.check_consistent(name)?;
            entries.insert(name.clone(), push_tensor(&mut payload, param.role.tag(), &param.role.shape(), &param.values));
        }
        let header = CheckpointHeader {
            entries,
            provenance: self.provenance.clone(),
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| MatsError::Format {
                offset: FIXED_PREFIX as u64,
                reason: format!("header serialization: {e}"),
            })?;
        Ok(assemble(KIND_CHECKPOINT, &header_json, &payload))
    }
}

/// Per-parameter statistics bundle aligned with a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsBundle {
    pub layers: BTreeMap<String, LayerStats>,
    pub fisher_mode: FisherMode,
    pub data_split: Split,
    pub example_count: u64,
    pub provenance: BTreeMap<String, String>,
}

impl StatsBundle {
    pub fn get(&self, name: &str) -> Option<&LayerStats> {
        self.layers.get(name)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<StatsBundle> {
        match load(path)? {
            Container::Stats(s) => Ok(s),
            Container::Checkpoint(_) => Err(MatsError::Format {
                offset: 9,
                reason: "expected a stats container, found a checkpoint".into(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = BTreeMap::new();
        let mut layers = BTreeMap::new();
        for (name, stats) in &self.layers {
            if stats.diag_fisher.len() != stats.role.len() {
                return Err(MatsError::Shape(format!(
                    "stats for `{name}`: diag_fisher has {} values for role {}",
                    stats.diag_fisher.len(),
                    stats.role
                )));
            }
            entries.insert(
                format!("{name}/diag_fisher"),
                push_tensor(&mut payload, "diag_fisher", &stats.role.shape(), &stats.diag_fisher),
            );
            let square = |m: &Matrix| vec![m.rows(), m.cols()];
            if let Some(g) = &stats.input_gram {
                entries.insert(
                    format!("{name}/input_gram"),
                    push_tensor(&mut payload, "input_gram", &square(g), g.data()),
                );
            }
            if let Some(g) = &stats.outgrad_gram {
                entries.insert(
                    format!("{name}/outgrad_gram"),
                    push_tensor(&mut payload, "outgrad_gram", &square(g), g.data()),
                );
            }
            if let Some(g) = &stats.exact_fisher {
                entries.insert(
                    format!("{name}/exact_fisher"),
                    push_tensor(&mut payload, "exact_fisher", &square(g), g.data()),
                );
            }
            layers.insert(
                name.clone(),
                LayerMeta {
                    n_examples: stats.n_examples,
                    role: stats.role.tag().to_string(),
                    shape: stats.role.shape(),
                },
            );
        }
        let header = StatsHeader {
            data_split: self.data_split.to_string(),
            entries,
            example_count: self.example_count,
            fisher_mode: self.fisher_mode.to_string(),
            layers,
            provenance: self.provenance.clone(),
        };
        let header_json = serde_json::to_vec(&header).map_err(|e| MatsError::Format {
            offset: FIXED_PREFIX as u64,
            reason: format!("header serialization: {e}"),
        })?;
        Ok(assemble(KIND_STATS, &header_json, &payload))
    }
}

/// Either container kind, as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    Checkpoint(Checkpoint),
    Stats(StatsBundle),
}

/// Checks that all checkpoints share an identical name → shape map, reporting
/// the first mismatch by sorted parameter name.
pub fn assert_mergeable(checkpoints: &[Checkpoint]) -> Result<()> {
    let Some((first, rest)) = checkpoints.split_first() else {
        return Err(MatsError::Mergeability("no checkpoints given".into()));
    };
    let reference = first.shape_map();
    for (i, other) in rest.iter().enumerate() {
        let candidate = other.shape_map();
        for (name, shape) in &reference {
            match candidate.get(name) {
                None => {
                    return Err(MatsError::Mergeability(format!(
                        "checkpoint {} is missing parameter `{name}`",
                        i + 1
                    )))
                }
                Some(s) if s != shape => {
                    return Err(MatsError::Mergeability(format!(
                        "parameter `{name}`: shape {shape:?} vs {s:?} in checkpoint {}",
                        i + 1
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some((name, _)) = candidate.iter().find(|(n, _)| !reference.contains_key(*n)) {
            return Err(MatsError::Mergeability(format!(
                "checkpoint {} has extra parameter `{name}`",
                i + 1
            )));
        }
    }
    Ok(())
}

// ── wire schema ─────────────────────────────────────────────────────────────
// Struct fields are declared in alphabetical order so the emitted JSON has
// fully sorted keys (BTreeMap values are sorted by construction).

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    len: u64,
    offset: u64,
    role: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    entries: BTreeMap<String, HeaderEntry>,
    provenance: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct LayerMeta {
    n_examples: u64,
    role: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct StatsHeader {
    data_split: String,
    entries: BTreeMap<String, HeaderEntry>,
    example_count: u64,
    fisher_mode: String,
    layers: BTreeMap<String, LayerMeta>,
    provenance: BTreeMap<String, String>,
}

fn push_tensor(payload: &mut Vec<u8>, role: &str, shape: &[usize], values: &[f64]) -> HeaderEntry {
    let offset = payload.len() as u64;
    for v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    HeaderEntry {
        len: (values.len() * 8) as u64,
        offset,
        role: role.to_string(),
        shape: shape.to_vec(),
    }
}

fn assemble(kind: u8, header_json: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FIXED_PREFIX + header_json.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(kind);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(header_json);
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out
}

/// Loads either container kind from a file.
pub fn load(path: impl AsRef<Path>) -> Result<Container> {
    from_bytes(&std::fs::read(path)?)
}

/// Parses either container kind from raw bytes, reporting the byte offset of
/// the first inconsistency on malformed input.
pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
    let fail = |offset: usize, reason: String| MatsError::Format {
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(fail(0, "bad magic (expected MATSCKPT)".into()));
    }
    if bytes.len() < FIXED_PREFIX {
        return Err(fail(bytes.len(), "truncated fixed header".into()));
    }
    if bytes[8] != FORMAT_VERSION {
        return Err(fail(8, format!("unknown version {}", bytes[8])));
    }
    let kind = bytes[9];
    if kind != KIND_CHECKPOINT && kind != KIND_STATS {
        return Err(fail(9, format!("unknown kind {kind}")));
    }
    let header_len = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")) as usize;
    let header_end = FIXED_PREFIX
        .checked_add(header_len)
        .ok_or_else(|| fail(10, "header length overflows".into()))?;
    if bytes.len() < header_end + 4 {
        return Err(fail(bytes.len(), "truncated header or payload".into()));
    }
    let header_bytes = &bytes[FIXED_PREFIX..header_end];
    let payload = &bytes[header_end..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored_crc {
        return Err(fail(bytes.len() - 4, "payload checksum mismatch".into()));
    }

    let read_tensor = |entry: &HeaderEntry, name: &str| -> Result<Vec<f64>> {
        let start = entry.offset as usize;
        let end = start
            .checked_add(entry.len as usize)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| {
                fail(
                    header_end + start.min(payload.len()),
                    format!("entry `{name}` extends past payload"),
                )
            })?;
        if entry.len % 8 != 0 {
            return Err(fail(
                header_end + start,
                format!("entry `{name}` length {} is not a multiple of 8", entry.len),
            ));
        }
        let expected: usize = entry.shape.iter().product();
        if expected * 8 != entry.len as usize {
            return Err(fail(
                header_end + start,
                format!("entry `{name}` shape {:?} disagrees with byte length", entry.shape),
            ));
        }
        Ok(payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };

    if kind == KIND_CHECKPOINT {
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| fail(FIXED_PREFIX, format!("header JSON: {e}")))?;
        let mut ckpt = Checkpoint {
            entries: BTreeMap::new(),
            provenance: header.provenance,
        };
        for (name, entry) in &header.entries {
            let role = ParamRole::from_tag_shape(&entry.role, &entry.shape).ok_or_else(|| {
                fail(
                    FIXED_PREFIX,
                    format!("entry `{name}`: unknown role `{}` for shape {:?}", entry.role, entry.shape),
                )
            })?;
            ckpt.insert(name.clone(), Param {
                role,
                values: read_tensor(entry, name)?,
            });
        }
        Ok(Container::Checkpoint(ckpt))
    } else {
        let header: StatsHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| fail(FIXED_PREFIX, format!("header JSON: {e}")))?;
        let fisher_mode = FisherMode::parse(&header.fisher_mode).ok_or_else(|| {
            fail(FIXED_PREFIX, format!("unknown fisher mode `{}`", header.fisher_mode))
        })?;
        let data_split = Split::parse(&header.data_split).ok_or_else(|| {
            fail(FIXED_PREFIX, format!("unknown split `{}`", header.data_split))
        })?;
        let mut layers = BTreeMap::new();
        for (name, meta) in &header.layers {
            let role = ParamRole::from_tag_shape(&meta.role, &meta.shape).ok_or_else(|| {
                fail(
                    FIXED_PREFIX,
                    format!("layer `{name}`: unknown role `{}` for shape {:?}", meta.role, meta.shape),
                )
            })?;
            let tensor = |stat: &str| -> Result<Option<Vec<f64>>> {
                match header.entries.get(&format!("{name}/{stat}")) {
                    Some(e) => Ok(Some(read_tensor(e, name)?)),
                    None => Ok(None),
                }
            };
            let square = |stat: &str| -> Result<Option<Matrix>> {
                match header.entries.get(&format!("{name}/{stat}")) {
                    Some(e) => {
                        let values = read_tensor(e, name)?;
                        if e.shape.len() != 2 {
                            return Err(fail(
                                FIXED_PREFIX,
                                format!("`{name}/{stat}` must be 2-dimensional"),
                            ));
                        }
                        Ok(Some(Matrix::from_vec(e.shape[0], e.shape[1], values)?))
                    }
                    None => Ok(None),
                }
            };
            let diag_fisher = tensor("diag_fisher")?.ok_or_else(|| {
                fail(FIXED_PREFIX, format!("layer `{name}` is missing diag_fisher"))
            })?;
            layers.insert(
                name.clone(),
                LayerStats {
                    role,
                    diag_fisher,
                    input_gram: square("input_gram")?,
                    outgrad_gram: square("outgrad_gram")?,
                    exact_fisher: square("exact_fisher")?,
                    n_examples: meta.n_examples,
                },
            );
        }
        Ok(Container::Stats(StatsBundle {
            layers,
            fisher_mode,
            data_split,
            example_count: header.example_count,
            provenance: header.provenance,
        }))
    }
}
