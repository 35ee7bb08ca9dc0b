//! Binary container: 8-byte magic, `u64` LE header length, JSON header, raw
//! little-endian `f64` payload.
//!
//! Used for checkpoints, layer import/export and dataset caches. The header
//! must carry `"dtype": "f64"` and `"len"`; everything else is free-form.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::param::{Layout, ParamVector};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"SAFEF64\0";

fn format_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Format {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Writes `header` (a JSON object, augmented with `dtype` and `len`) and `data`.
pub fn write_container<W: Write>(mut w: W, header: &Map<String, Value>, data: &[f64]) -> Result<()> {
    let mut h = header.clone();
    h.insert("dtype".into(), Value::from("f64"));
    h.insert("len".into(), Value::from(data.len()));
    let text = serde_json::to_vec(&h)?;
    w.write_all(MAGIC)?;
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(&text)?;
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<(Map<String, Value>, Vec<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| format_err("magic", "file too short"))?;
    if &magic != MAGIC {
        return Err(format_err("magic", "not a parameter container"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| format_err("header_len", "truncated"))?;
    let hlen = u64::from_le_bytes(len) as usize;
    if hlen > 1 << 30 {
        return Err(format_err("header_len", format!("implausible length {hlen}")));
    }
    let mut text = vec![0u8; hlen];
    r.read_exact(&mut text)
        .map_err(|_| format_err("header", "truncated"))?;
    let header: Map<String, Value> = match serde_json::from_slice(&text)? {
        Value::Object(m) => m,
        _ => return Err(format_err("header", "not a JSON object")),
    };
    if header.get("dtype").and_then(Value::as_str) != Some("f64") {
        return Err(format_err("dtype", "expected \"f64\""));
    }
    let n = header
        .get("len")
        .and_then(Value::as_u64)
        .ok_or_else(|| format_err("len", "missing"))? as usize;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != n * 8 {
        return Err(format_err(
            "payload",
            format!("expected {} bytes, found {}", n * 8, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

pub fn write_container_file(path: &Path, header: &Map<String, Value>, data: &[f64]) -> Result<()> {
    write_container(BufWriter::new(File::create(path)?), header, data)
}

pub fn read_container_file(path: &Path) -> Result<(Map<String, Value>, Vec<f64>)> {
    read_container(BufReader::new(File::open(path)?))
}

/// Saves a parameter vector with its layout and extra header fields.
pub fn save_params<T: Scalar>(path: &Path, x: &ParamVector<T>, extra: &Map<String, Value>) -> Result<()> {
    let mut h = extra.clone();
    h.insert("kind".into(), Value::from("params"));
    h.insert("layout".into(), serde_json::to_value(x.layout().as_ref())?);
    write_container_file(path, &h, &x.to_f64_vec())
}

pub fn load_params<T: Scalar>(path: &Path) -> Result<(ParamVector<T>, Map<String, Value>)> {
    let (h, data) = read_container_file(path)?;
    let layout: Layout = serde_json::from_value(
        h.get("layout")
            .cloned()
            .ok_or_else(|| format_err("layout", "missing"))?,
    )?;
    let layout = Layout::from_segments(layout.segments().to_vec())?;
    let values = data.iter().map(|&v| T::of_f64(v)).collect();
    Ok((ParamVector::new(values, Arc::new(layout))?, h))
}
