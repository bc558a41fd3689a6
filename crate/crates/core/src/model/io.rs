//! `KANT` model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "KANT" | u32 version | u32 metadata length | metadata (UTF-8 JSON)
//!        | payload | u32 CRC32(payload)
//! ```
//!
//! The payload holds the coefficient tensors as `f32` in declared order,
//! followed by any spline-table blobs as one byte per entry. Tensor offsets
//! in the metadata are byte offsets into the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConvKanLayer, KanLinearLayer, Layer, Model, Shape};
use crate::bspline::GridSpec;
use crate::error::{KanError, Result};
use crate::quant::QuantParams;
use crate::tabulation::{SplineTableSet, SplineTables};

pub const MAGIC: &[u8; 4] = b"KANT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    grid: GridMeta,
    input_shape: Vec<usize>,
    layers: Vec<LayerMeta>,
    tensors: Vec<TensorMeta>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    spline_tables: Vec<TableMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GridMeta {
    intervals: usize,
    degree: usize,
    domain: [f64; 2],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerMeta {
    KanLinear {
        n_in: usize,
        n_out: usize,
        tensor: String,
    },
    ConvKan {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        tensor: String,
    },
    MaxPool {
        window: usize,
    },
    Flatten,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

impl TensorMeta {
    fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    fn byte_len(&self) -> Result<usize> {
        let width = match self.dtype.as_str() {
            "f32" => 4,
            "u8" => 1,
            other => return Err(KanError::Format(format!("unknown dtype '{other}' for {}", self.name))),
        };
        Ok(self.elements() * width)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TableMeta {
    layer: usize,
    tensor: String,
    n_in: usize,
    n_out: usize,
    bw_a: u32,
    h: u32,
    input_qp: QuantParams,
    output_qp: QuantParams,
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    save_model_with_tables(model, None, path)
}

/// Writes `model`, and optionally its spline tables, to `path`.
pub fn save_model_with_tables(model: &Model, tables: Option<&SplineTableSet>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(model, tables)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Ok(load_container(path)?.0)
}

/// Reads a model and any spline tables stored with it.
pub fn load_container(path: impl AsRef<Path>) -> Result<(Model, Option<SplineTableSet>)> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

fn encode(model: &Model, tables: Option<&SplineTableSet>) -> Result<Vec<u8>> {
    let g = model.grid();
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut layers = Vec::new();
    let mut push_f32 = |name: String, shape: Vec<usize>, data: &[f32], payload: &mut Vec<u8>| {
        tensors.push(TensorMeta {
            name: name.clone(),
            dtype: "f32".into(),
            shape,
            offset: payload.len(),
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        name
    };
    for (i, layer) in model.layers().iter().enumerate() {
        layers.push(match layer {
            Layer::KanLinear(l) => LayerMeta::KanLinear {
                n_in: l.n_in(),
                n_out: l.n_out(),
                tensor: push_f32(format!("layers.{i}.coeffs"), vec![l.coeff_rows(), l.n_out()], l.coeffs(), &mut payload),
            },
            Layer::ConvKan(c) => LayerMeta::ConvKan {
                c_in: c.c_in(),
                c_out: c.c_out(),
                kernel: c.kernel(),
                stride: c.stride(),
                padding: c.padding(),
                tensor: push_f32(format!("layers.{i}.coeffs"), vec![c.coeff_rows(), c.c_out()], c.coeffs(), &mut payload),
            },
            Layer::MaxPool { window } => LayerMeta::MaxPool { window: *window },
            Layer::Flatten => LayerMeta::Flatten,
        });
    }
    let mut spline_tables = Vec::new();
    if let Some(set) = tables {
        for (layer, t) in set.iter() {
            let name = format!("layers.{layer}.spline_table");
            tensors.push(TensorMeta {
                name: name.clone(),
                dtype: "u8".into(),
                shape: vec![t.n_in(), t.n_out(), t.entries_per_table()],
                offset: payload.len(),
            });
            payload.extend_from_slice(t.entries());
            spline_tables.push(TableMeta {
                layer,
                tensor: name,
                n_in: t.n_in(),
                n_out: t.n_out(),
                bw_a: t.bw_a(),
                h: t.h(),
                input_qp: *t.input_qp(),
                output_qp: *t.output_qp(),
            });
        }
    }
    let meta = Metadata {
        grid: GridMeta {
            intervals: g.intervals(),
            degree: g.degree(),
            domain: [g.domain().0, g.domain().1],
        },
        input_shape: model.input_shape().dims(),
        layers,
        tensors,
        spline_tables,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| KanError::Format("file truncated in header".into()))
}

fn decode(bytes: &[u8]) -> Result<(Model, Option<SplineTableSet>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(KanError::Format("missing KANT magic bytes".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(KanError::Format(format!(
            "unsupported container version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let json_len = read_u32(bytes, 8)? as usize;
    let json_end = 12usize
        .checked_add(json_len)
        .filter(|&end| end + 4 <= bytes.len())
        .ok_or_else(|| KanError::Format("file truncated in metadata".into()))?;
    let meta: Metadata = serde_json::from_slice(&bytes[12..json_end])
        .map_err(|e| KanError::Format(format!("invalid metadata: {e}")))?;
    let payload = &bytes[json_end..bytes.len() - 4];
    let mut declared = 0usize;
    for t in &meta.tensors {
        declared = declared.max(t.offset + t.byte_len()?);
    }
    if payload.len() != declared {
        return Err(KanError::Format(format!(
            "payload holds {} bytes but the metadata declares {declared}",
            payload.len()
        )));
    }
    let stored = read_u32(bytes, bytes.len() - 4)?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(KanError::ChecksumMismatch { stored, computed });
    }

    let tensor = |name: &str| -> Result<&TensorMeta> {
        meta.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| KanError::Format(format!("missing tensor '{name}'")))
    };
    let f32_tensor = |name: &str| -> Result<Vec<f32>> {
        let t = tensor(name)?;
        if t.dtype != "f32" {
            return Err(KanError::Format(format!("tensor '{name}' is not f32")));
        }
        let raw = &payload[t.offset..t.offset + t.byte_len()?];
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    };

    let grid = GridSpec::new(meta.grid.intervals, meta.grid.degree, meta.grid.domain[0], meta.grid.domain[1])
        .map_err(|e| KanError::Format(format!("invalid grid: {e}")))?;
    let mut layers = Vec::with_capacity(meta.layers.len());
    for lm in &meta.layers {
        layers.push(match lm {
            LayerMeta::KanLinear { n_in, n_out, tensor } => {
                Layer::KanLinear(KanLinearLayer::new(*n_in, *n_out, grid.clone(), f32_tensor(tensor)?)?)
            }
            LayerMeta::ConvKan {
                c_in,
                c_out,
                kernel,
                stride,
                padding,
                tensor,
            } => Layer::ConvKan(ConvKanLayer::new(
                *c_in,
                *c_out,
                *kernel,
                *stride,
                *padding,
                grid.clone(),
                f32_tensor(tensor)?,
            )?),
            LayerMeta::MaxPool { window } => Layer::MaxPool { window: *window },
            LayerMeta::Flatten => Layer::Flatten,
        });
    }
    let model = Model::new(grid, Shape::from_dims(&meta.input_shape)?, layers)
        .map_err(|e| KanError::Format(format!("inconsistent model: {e}")))?;

    let tables = if meta.spline_tables.is_empty() {
        None
    } else {
        let mut set = SplineTableSet::empty(model.layers().len());
        for tm in &meta.spline_tables {
            let t = tensor(&tm.tensor)?;
            if t.dtype != "u8" {
                return Err(KanError::Format(format!("table '{}' is not u8", tm.tensor)));
            }
            let entries = payload[t.offset..t.offset + t.byte_len()?].to_vec();
            let tables = SplineTables::from_parts(tm.n_in, tm.n_out, tm.bw_a, tm.h, tm.input_qp, tm.output_qp, entries)
                .map_err(|e| KanError::Format(format!("invalid spline table: {e}")))?;
            set.insert(tm.layer, tables)?;
        }
        Some(set)
    };
    Ok((model, tables))
}
