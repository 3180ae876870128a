//! Binary little-endian PLY in the common 3DGS layout, plus a trailing
//! `sigma_d` property for the learned distance decay.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Vector3, Vector4};

use crate::error::{Error, Result};
use crate::model::{sh_degree_from_coeffs, GaussianPrimitive, GaussianScene, DEFAULT_SIGMA_D};

/// Tolerance on the stored quaternion norm before it is renormalized on load.
const ROTATION_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<(String, ScalarType)>,
    has_list: bool,
}

impl Element {
    fn record_size(&self) -> usize {
        self.properties.iter().map(|(_, t)| t.size()).sum()
    }
}

struct Header {
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Ply("missing end_header".into()))?;
    let mut body_offset = end + END.len();
    // Header lines end with "\n" (or "\r\n").
    if bytes.get(body_offset) == Some(&b'\r') {
        body_offset += 1;
    }
    if bytes.get(body_offset) != Some(&b'\n') {
        return Err(Error::Ply("end_header not followed by newline".into()));
    }
    body_offset += 1;

    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Ply("header is not valid ascii".into()))?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(Error::Ply("missing 'ply' magic".into()));
    }

    let mut format_seen = false;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "binary_little_endian", _] => format_seen = true,
            ["format", other, ..] => {
                return Err(Error::Ply(format!("unsupported format '{other}'")));
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::Ply(format!("bad element count '{count}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    has_list: false,
                });
            }
            ["property", "list", ..] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Ply("property before element".into()))?;
                el.has_list = true;
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Ply("property before element".into()))?;
                let ty =
                    ScalarType::parse(ty).ok_or_else(|| Error::Ply(format!("unknown type '{ty}' for '{name}'")))?;
                el.properties.push((name.to_string(), ty));
            }
            _ => return Err(Error::Ply(format!("malformed header line '{line}'"))),
        }
    }
    if !format_seen {
        return Err(Error::Ply("missing format line".into()));
    }
    Ok(Header { elements, body_offset })
}

/// Reads a scene. A missing `sigma_d` property fills [`DEFAULT_SIGMA_D`].
pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianScene> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes)
}

pub fn parse_ply(bytes: &[u8]) -> Result<GaussianScene> {
    let header = parse_header(bytes)?;
    let mut offset = header.body_offset;
    let mut vertex = None;
    for el in &header.elements {
        if el.name == "vertex" {
            vertex = Some(el);
            break;
        }
        if el.has_list {
            return Err(Error::Ply(format!(
                "list properties in element '{}' before vertex are not supported",
                el.name
            )));
        }
        offset += el.count * el.record_size();
    }
    let vertex = vertex.ok_or_else(|| Error::Ply("no 'vertex' element".into()))?;
    if vertex.has_list {
        return Err(Error::Ply("vertex element has list properties".into()));
    }

    let mut columns = Vec::new();
    let mut cursor = 0;
    for (name, ty) in &vertex.properties {
        columns.push((name.as_str(), *ty, cursor));
        cursor += ty.size();
    }
    let record = cursor;
    let find = |name: &str| -> Option<(ScalarType, usize)> {
        columns.iter().find(|(n, _, _)| *n == name).map(|&(_, t, o)| (t, o))
    };
    let require = |name: &str| -> Result<(ScalarType, usize)> {
        find(name).ok_or_else(|| Error::Ply(format!("missing required property '{name}'")))
    };

    let pos = [require("x")?, require("y")?, require("z")?];
    let dc = [require("f_dc_0")?, require("f_dc_1")?, require("f_dc_2")?];
    let opacity = require("opacity")?;
    let scale = [require("scale_0")?, require("scale_1")?, require("scale_2")?];
    let rot = [
        require("rot_0")?,
        require("rot_1")?,
        require("rot_2")?,
        require("rot_3")?,
    ];
    let sigma = find("sigma_d");

    let mut rest = Vec::new();
    while let Some(col) = find(&format!("f_rest_{}", rest.len())) {
        rest.push(col);
    }
    let rest_count = columns.iter().filter(|(n, _, _)| n.starts_with("f_rest_")).count();
    if rest_count != rest.len() || rest.len() % 3 != 0 {
        return Err(Error::Ply(format!(
            "f_rest properties must be f_rest_0..f_rest_(3k-1), found {rest_count}"
        )));
    }
    let coeffs = 1 + rest.len() / 3;
    let sh_degree = sh_degree_from_coeffs(coeffs)
        .ok_or_else(|| Error::Ply(format!("{coeffs} sh coefficients is not a valid degree")))?;

    let body = &bytes[offset.min(bytes.len())..];
    let needed = vertex.count * record;
    if body.len() < needed {
        return Err(Error::Ply(format!(
            "element count mismatch: header declares {} vertices ({needed} bytes), body has {} bytes",
            vertex.count,
            body.len()
        )));
    }

    let mut primitives = Vec::with_capacity(vertex.count);
    for row in 0..vertex.count {
        let rec = &body[row * record..(row + 1) * record];
        let get = |(ty, off): (ScalarType, usize)| -> Result<f64> {
            let v = ty.read(&rec[off..]);
            if v.is_finite() {
                Ok(v)
            } else {
                let name = columns
                    .iter()
                    .find(|&&(_, _, o)| o == off)
                    .map(|(n, _, _)| *n)
                    .unwrap_or("?");
                Err(Error::Ply(format!(
                    "non-finite value in property '{name}' at row {row}"
                )))
            }
        };
        let mut sh = vec![[0.0; 3]; coeffs];
        for c in 0..3 {
            sh[0][c] = get(dc[c])?;
            for k in 1..coeffs {
                sh[k][c] = get(rest[c * (coeffs - 1) + (k - 1)])?;
            }
        }
        let mut rotation = Vector4::new(get(rot[0])?, get(rot[1])?, get(rot[2])?, get(rot[3])?);
        let norm = rotation.norm();
        if norm == 0.0 {
            return Err(Error::Ply(format!("zero quaternion in 'rot_*' at row {row}")));
        }
        if (norm - 1.0).abs() > ROTATION_NORM_TOL {
            rotation /= norm;
        }
        primitives.push(GaussianPrimitive {
            position: Vector3::new(get(pos[0])?, get(pos[1])?, get(pos[2])?),
            log_scale: Vector3::new(get(scale[0])?, get(scale[1])?, get(scale[2])?),
            rotation,
            opacity_logit: get(opacity)?,
            sh,
            sigma_d: match sigma {
                Some(col) => get(col)?,
                None => DEFAULT_SIGMA_D,
            },
        });
    }
    GaussianScene::new(primitives, sh_degree, [0.0; 3])
}

/// Property names in on-disk order.
pub fn property_names(sh_degree: usize) -> Vec<String> {
    let coeffs = crate::model::sh_coeffs_for_degree(sh_degree);
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3 * (coeffs - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names.push("sigma_d".into());
    names
}

/// Bytes per vertex record, `sigma_d` included.
pub fn record_size(sh_degree: usize) -> usize {
    4 * property_names(sh_degree).len()
}

pub fn encode_ply(scene: &GaussianScene) -> Result<Vec<u8>> {
    scene.validate()?;
    let names = property_names(scene.sh_degree);
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", scene.len()).as_bytes());
    for n in &names {
        out.extend_from_slice(format!("property float {n}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");

    let coeffs = scene.sh_coeffs();
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for p in &scene.primitives {
        p.position.iter().for_each(|&v| put(v));
        (0..3).for_each(|_| put(0.0));
        (0..3).for_each(|c| put(p.sh[0][c]));
        for c in 0..3 {
            for k in 1..coeffs {
                put(p.sh[k][c]);
            }
        }
        put(p.opacity_logit);
        p.log_scale.iter().for_each(|&v| put(v));
        p.rotation.iter().for_each(|&v| put(v));
        put(p.sigma_d);
    }
    Ok(out)
}

pub fn save_ply(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ply(scene)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Rounds every parameter to the nearest float32, the precision kept on disk.
pub fn quantize_f32(scene: &GaussianScene) -> GaussianScene {
    let mut q = scene.clone();
    let params: Vec<f64> = scene.params().iter().map(|&v| v as f32 as f64).collect();
    q.set_params(&params);
    q
}
