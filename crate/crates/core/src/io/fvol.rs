//! FVOL: a minimal self-describing volume container.
//!
//! Layout:
//!
//! ```text
//! "FVOL1\n"                      6 bytes magic
//! u32 little-endian              header length in bytes
//! UTF-8 JSON header              {"shape", "dtype", "spacing", "extra"}
//! payload                        little-endian, C order (last axis fastest)
//! ```
//!
//! Shapes are `[D, H, W]` for scalar fields and `[C, D, H, W]` for
//! multi-channel fields. Supported dtypes are `f32` and `u8`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, FormatError, Result};
use crate::volume::{LabelMap, Volume, VolumeShape};

pub const MAGIC: &[u8; 6] = b"FVOL1\n";

#[derive(Debug, Clone, PartialEq)]
pub enum FvolData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl FvolData {
    pub fn dtype(&self) -> &'static str {
        match self {
            FvolData::F32(_) => "f32",
            FvolData::U8(_) => "u8",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            FvolData::F32(v) => v.len(),
            FvolData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FvolField {
    pub shape: Vec<usize>,
    pub data: FvolData,
    pub spacing: [f64; 3],
    pub extra: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
    spacing: [f64; 3],
    #[serde(default)]
    extra: Map<String, Value>,
}

fn fmt_err(path: &Path, kind: FormatError) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        kind,
    }
}

pub fn encode_fvol(field: &FvolField) -> Result<Vec<u8>> {
    if !(field.shape.len() == 3 || field.shape.len() == 4) {
        return Err(Error::Shape(format!(
            "fvol fields are rank 3 or 4, got {:?}",
            field.shape
        )));
    }
    if field.shape.iter().product::<usize>() != field.data.len() {
        return Err(Error::Shape(format!(
            "shape {:?} does not match {} elements",
            field.shape,
            field.data.len()
        )));
    }
    if let FvolData::F32(v) = &field.data {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("fvol data must be finite".into()));
        }
    }
    let header = serde_json::to_vec(&Header {
        shape: field.shape.clone(),
        dtype: field.data.dtype().to_string(),
        spacing: field.spacing,
        extra: field.extra.clone(),
    })?;
    let mut out = Vec::with_capacity(10 + header.len() + field.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    match &field.data {
        FvolData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        FvolData::U8(v) => out.extend_from_slice(v),
    }
    Ok(out)
}

pub fn decode_fvol(bytes: &[u8], path: &Path) -> Result<FvolField> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fmt_err(path, FormatError::BadMagic));
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(fmt_err(path, FormatError::TruncatedHeader));
    }
    let hlen = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < hlen {
        return Err(fmt_err(path, FormatError::TruncatedHeader));
    }
    let header: Header = serde_json::from_slice(&rest[..hlen])
        .map_err(|e| fmt_err(path, FormatError::MalformedHeader(e.to_string())))?;
    let payload = &rest[hlen..];
    if !(header.shape.len() == 3 || header.shape.len() == 4) {
        return Err(fmt_err(
            path,
            FormatError::ShapeMismatch(format!("rank {} not supported", header.shape.len())),
        ));
    }
    let n: usize = header.shape.iter().product();
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "u8" => 1,
        other => return Err(fmt_err(path, FormatError::UnsupportedDtype(other.to_string()))),
    };
    if payload.len() != n * width {
        return Err(fmt_err(
            path,
            FormatError::PayloadSizeMismatch {
                expected: n * width,
                found: payload.len(),
            },
        ));
    }
    let data = if width == 4 {
        FvolData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        )
    } else {
        FvolData::U8(payload.to_vec())
    };
    Ok(FvolField {
        shape: header.shape,
        data,
        spacing: header.spacing,
        extra: header.extra,
    })
}

pub fn write_fvol(path: &Path, field: &FvolField) -> Result<()> {
    let bytes = encode_fvol(field)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_fvol(path: &Path) -> Result<FvolField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fvol(&bytes, path)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut extra = Map::new();
    extra.insert("kind".into(), "volume".into());
    extra.insert("normalized".into(), v.normalized.into());
    write_fvol(
        path,
        &FvolField {
            shape: v.shape().dims().to_vec(),
            data: FvolData::F32(v.data().to_vec()),
            spacing: v.spacing,
            extra,
        },
    )
}

fn spatial_shape(path: &Path, field: &FvolField) -> Result<VolumeShape> {
    match field.shape.as_slice() {
        [d, h, w] | [1, d, h, w] => Ok(VolumeShape::from_dims([*d, *h, *w])),
        s => Err(fmt_err(
            path,
            FormatError::ShapeMismatch(format!("expected a scalar field, got {s:?}")),
        )),
    }
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let field = read_fvol(path)?;
    let shape = spatial_shape(path, &field)?;
    let FvolData::F32(data) = field.data else {
        return Err(fmt_err(path, FormatError::ShapeMismatch("volume must be f32".into())));
    };
    let normalized = field.extra.get("normalized").and_then(Value::as_bool).unwrap_or(false);
    if normalized {
        Volume::new_normalized(shape, data, field.spacing)
    } else {
        Volume::new(shape, data, field.spacing)
    }
}

pub fn write_label(path: &Path, l: &LabelMap, spacing: [f64; 3]) -> Result<()> {
    let mut extra = Map::new();
    extra.insert("kind".into(), "label".into());
    extra.insert("num_classes".into(), l.num_classes.into());
    write_fvol(
        path,
        &FvolField {
            shape: l.shape().dims().to_vec(),
            data: FvolData::U8(l.data().to_vec()),
            spacing,
            extra,
        },
    )
}

pub fn read_label(path: &Path) -> Result<LabelMap> {
    let field = read_fvol(path)?;
    let shape = spatial_shape(path, &field)?;
    let FvolData::U8(data) = field.data else {
        return Err(fmt_err(path, FormatError::ShapeMismatch("label must be u8".into())));
    };
    let classes = field
        .extra
        .get("num_classes")
        .and_then(Value::as_u64)
        .unwrap_or(crate::volume::NUM_CLASSES as u64);
    LabelMap::new(shape, data, classes as u8)
}
