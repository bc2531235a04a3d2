//! JSON-lines dataset files: one [`VesselSample`] per line.
//!
//! Raster payloads are base64 of little-endian `f32` values in channel-major
//! order. `ais_mask` holds availability flags (`true` = report present).

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::data::{AisTrajectory, CctvTrajectory, Point, SceneFrame, VesselSample};
use crate::error::{Error, Result};

#[derive(Serialize)]
struct SceneRecord {
    raster: String,
    shape: [usize; 3],
    bbox: [f64; 4],
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    vessel_id: &'a str,
    density: &'a str,
    is_dark: bool,
    obs_ais: &'a [Point],
    ais_mask: &'a [bool],
    obs_cctv: &'a [Point],
    fut_ais: &'a [Point],
    fut_cctv: &'a [Point],
    scenes: Vec<SceneRecord>,
}

pub fn encode_raster(raster: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(raster.len() * 4);
    for v in raster {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_raster(text: &str) -> std::result::Result<Vec<f32>, String> {
    let bytes = B64.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{} bytes is not a whole number of f32 values", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Serialize one sample as a single JSON line (no trailing newline).
pub fn sample_to_line(s: &VesselSample) -> String {
    let scenes = s
        .scenes
        .iter()
        .map(|f| SceneRecord {
            raster: encode_raster(&f.raster),
            shape: [SceneFrame::CHANNELS, f.height, f.width],
            bbox: f.bbox,
        })
        .collect();
    let rec = SampleRecord {
        vessel_id: &s.vessel_id,
        density: s.density.as_str(),
        is_dark: s.is_dark,
        obs_ais: &s.obs_ais.points,
        ais_mask: &s.obs_ais.available,
        obs_cctv: &s.obs_cctv.points,
        fut_ais: &s.fut_ais,
        fut_cctv: &s.fut_cctv,
        scenes,
    };
    serde_json::to_string(&rec).expect("sample records always serialize")
}

fn field<'a>(obj: &'a Map<String, Value>, line: usize, name: &str) -> Result<&'a Value> {
    nested(obj, line, name, name)
}

/// Look up `key`, reporting a miss under the dotted path `label`.
fn nested<'a>(obj: &'a Map<String, Value>, line: usize, key: &str, label: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::parse(line, label, "missing field"))
}

fn as_points(v: &Value, line: usize, name: &str) -> Result<Vec<Point>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::parse(line, name, "expected an array of [x, y] pairs"))?;
    arr.iter()
        .enumerate()
        .map(|(i, p)| match p.as_array().map(Vec::as_slice) {
            Some([x, y]) => match (x.as_f64(), y.as_f64()) {
                (Some(x), Some(y)) => Ok([x, y]),
                _ => Err(Error::parse(line, name, format!("element {i}: non-numeric coordinate"))),
            },
            _ => Err(Error::parse(line, name, format!("element {i}: expected [x, y]"))),
        })
        .collect()
}

fn as_f64_array<const N: usize>(v: &Value, line: usize, name: &str) -> Result<[f64; N]> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == N)
        .ok_or_else(|| Error::parse(line, name, format!("expected {N} numbers")))?;
    let mut out = [0.0; N];
    for (o, x) in out.iter_mut().zip(arr) {
        *o = x
            .as_f64()
            .ok_or_else(|| Error::parse(line, name, "non-numeric entry"))?;
    }
    Ok(out)
}

fn parse_scene(v: &Value, line: usize, idx: usize) -> Result<SceneFrame> {
    let name = format!("scenes[{idx}]");
    let obj = v
        .as_object()
        .ok_or_else(|| Error::parse(line, &name, "expected an object"))?;
    let raster_text = nested(obj, line, "raster", &format!("{name}.raster"))?
        .as_str()
        .ok_or_else(|| Error::parse(line, &format!("{name}.raster"), "expected a base64 string"))?;
    let raster = decode_raster(raster_text).map_err(|m| Error::parse(line, &format!("{name}.raster"), m))?;
    let shape_v = nested(obj, line, "shape", &format!("{name}.shape"))?;
    let shape = shape_v
        .as_array()
        .filter(|a| a.len() == 3)
        .and_then(|a| a.iter().map(Value::as_u64).collect::<Option<Vec<_>>>())
        .ok_or_else(|| Error::parse(line, &format!("{name}.shape"), "expected [3, H, W]"))?;
    if shape[0] != SceneFrame::CHANNELS as u64 {
        return Err(Error::parse(line, &format!("{name}.shape"), "channel count must be 3"));
    }
    let bbox = as_f64_array::<4>(nested(obj, line, "bbox", &format!("{name}.bbox"))?, line, &format!("{name}.bbox"))?;
    let frame = SceneFrame {
        height: usize::try_from(shape[1]).unwrap_or(usize::MAX),
        width: usize::try_from(shape[2]).unwrap_or(usize::MAX),
        raster,
        bbox,
    };
    if frame.height.checked_mul(frame.width).and_then(|v| v.checked_mul(3)).is_none() {
        return Err(Error::parse(line, &format!("{name}.shape"), "shape overflows"));
    }
    frame.validate().map_err(|m| Error::parse(line, &name, m))?;
    Ok(frame)
}

/// Parse one JSON line. `line` is 1-based and only used for error messages.
pub fn sample_from_line(text: &str, line: usize) -> Result<VesselSample> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::parse(line, "<json>", e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| Error::parse(line, "<json>", "expected an object"))?;

    let vessel_id = field(obj, line, "vessel_id")?
        .as_str()
        .ok_or_else(|| Error::parse(line, "vessel_id", "expected a string"))?
        .to_string();
    let density = field(obj, line, "density")?
        .as_str()
        .ok_or_else(|| Error::parse(line, "density", "expected a string"))?
        .parse()
        .map_err(|m: String| Error::parse(line, "density", m))?;
    let is_dark = field(obj, line, "is_dark")?
        .as_bool()
        .ok_or_else(|| Error::parse(line, "is_dark", "expected a boolean"))?;
    let obs_ais = as_points(field(obj, line, "obs_ais")?, line, "obs_ais")?;
    let ais_mask = field(obj, line, "ais_mask")?
        .as_array()
        .and_then(|a| a.iter().map(Value::as_bool).collect::<Option<Vec<_>>>())
        .ok_or_else(|| Error::parse(line, "ais_mask", "expected an array of booleans"))?;
    let obs_cctv = as_points(field(obj, line, "obs_cctv")?, line, "obs_cctv")?;
    let fut_ais = as_points(field(obj, line, "fut_ais")?, line, "fut_ais")?;
    let fut_cctv = as_points(field(obj, line, "fut_cctv")?, line, "fut_cctv")?;
    let scenes = field(obj, line, "scenes")?
        .as_array()
        .ok_or_else(|| Error::parse(line, "scenes", "expected an array"))?
        .iter()
        .enumerate()
        .map(|(i, s)| parse_scene(s, line, i))
        .collect::<Result<Vec<_>>>()?;

    let sample = VesselSample {
        vessel_id,
        density,
        is_dark,
        obs_ais: AisTrajectory {
            points: obs_ais,
            available: ais_mask,
        },
        obs_cctv: CctvTrajectory { points: obs_cctv },
        scenes,
        fut_ais,
        fut_cctv,
    };
    sample
        .validate()
        .map_err(|(f, m)| Error::parse(line, f, m))?;
    Ok(sample)
}

/// Parse a whole JSON-lines document. Blank lines are skipped.
pub fn parse_dataset(text: &str) -> Result<Vec<VesselSample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| sample_from_line(l, i + 1))
        .collect()
}

pub fn dataset_to_string(samples: &[VesselSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&sample_to_line(s));
        out.push('\n');
    }
    out
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<VesselSample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[VesselSample]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_string(samples)).map_err(|e| Error::io(path, e))
}
