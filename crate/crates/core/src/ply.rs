//! Binary little-endian PLY in the layout written by the reference 3DGS
//! trainer.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use nalgebra::{Quaternion, Vector3};
use thiserror::Error;

use crate::scene::{sh_rest_len, Gaussian, GaussianScene};

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed PLY header at line {line} ({text:?}): {reason}")]
    Header { line: usize, text: String, reason: String },
    #[error("PLY schema error: {0}")]
    Schema(String),
    #[error("invalid value in element {index}, property `{property}`")]
    Data { index: usize, property: String },
    #[error("refusing to write an empty scene")]
    EmptyScene,
}

/// Rotations whose norm is off by less than this are taken as already unit,
/// so values written by [`save_ply`] are read back unchanged.
const UNIT_NORM_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

struct Property {
    name: String,
    ty: ScalarType,
    offset: usize,
}

struct Header {
    vertex_count: usize,
    properties: Vec<Property>,
    stride: usize,
    data_start: usize,
}

fn header_err(line: usize, text: &str, reason: impl Into<String>) -> PlyError {
    PlyError::Header { line, text: text.to_string(), reason: reason.into() }
}

fn parse_header(bytes: &[u8]) -> Result<Header, PlyError> {
    const END: &[u8] = b"end_header\n";
    let end =
        bytes.windows(END.len()).position(|w| w == END).ok_or_else(|| header_err(0, "", "missing `end_header`"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| header_err(0, "", "header is not ASCII"))?;

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, l)) => return Err(header_err(n, l, "expected `ply` magic")),
        None => return Err(header_err(1, "", "empty header")),
    }

    let mut format_seen = false;
    let mut vertex: Option<(usize, Vec<Property>, usize)> = None;
    // Element currently receiving properties: None when outside any element.
    let mut current_is_vertex: Option<bool> = None;
    let mut element_before_vertex = false;

    for (n, line) in lines {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                let fmt = tok.next().unwrap_or_default();
                if fmt != "binary_little_endian" {
                    return Err(header_err(n, line, format!("unsupported format `{fmt}`")));
                }
                format_seen = true;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| header_err(n, line, "element without name"))?;
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| header_err(n, line, "element count is not an integer"))?;
                if name == "vertex" {
                    if vertex.is_some() {
                        return Err(header_err(n, line, "duplicate vertex element"));
                    }
                    vertex = Some((count, Vec::new(), 0));
                    current_is_vertex = Some(true);
                } else {
                    if vertex.is_none() && count > 0 {
                        element_before_vertex = true;
                    }
                    current_is_vertex = Some(false);
                }
            }
            Some("property") => {
                let ty = tok.next().ok_or_else(|| header_err(n, line, "property without type"))?;
                match current_is_vertex {
                    None => return Err(header_err(n, line, "property outside of an element")),
                    Some(false) => continue,
                    Some(true) => {}
                }
                if ty == "list" {
                    return Err(header_err(n, line, "list properties are not supported on vertex"));
                }
                let ty = ScalarType::parse(ty).ok_or_else(|| header_err(n, line, format!("unknown type `{ty}`")))?;
                let name = tok.next().ok_or_else(|| header_err(n, line, "property without name"))?;
                let (_, props, stride) = vertex.as_mut().expect("vertex element is open");
                props.push(Property { name: name.to_string(), ty, offset: *stride });
                *stride += ty.size();
            }
            Some(_) => return Err(header_err(n, line, "unrecognized header keyword")),
        }
    }

    if !format_seen {
        return Err(header_err(0, "", "missing `format` line"));
    }
    let (vertex_count, properties, stride) = vertex.ok_or_else(|| PlyError::Schema("no `vertex` element".into()))?;
    if element_before_vertex {
        return Err(PlyError::Schema("`vertex` must be the first non-empty element".into()));
    }
    Ok(Header { vertex_count, properties, stride, data_start: end + END.len() })
}

struct Layout {
    xyz: [usize; 3],
    dc: [usize; 3],
    rest: Vec<usize>,
    opacity: usize,
    scale: [usize; 3],
    rot: [usize; 4],
    sh_degree: u8,
}

fn resolve_layout(props: &[Property]) -> Result<Layout, PlyError> {
    let find = |name: &str| -> Result<usize, PlyError> {
        let p = props
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| PlyError::Schema(format!("missing required property `{name}`")))?;
        if p.ty != ScalarType::F32 {
            return Err(PlyError::Schema(format!("property `{name}` must be float32")));
        }
        Ok(p.offset)
    };
    let rest_count = props.iter().filter(|p| p.name.starts_with("f_rest_")).count();
    let sh_degree = (0u8..=3)
        .find(|&d| sh_rest_len(d) == rest_count)
        .ok_or_else(|| PlyError::Schema(format!("{rest_count} `f_rest_*` properties match no SH degree")))?;
    let rest = (0..rest_count).map(|i| find(&format!("f_rest_{i}"))).collect::<Result<_, _>>()?;
    Ok(Layout {
        xyz: [find("x")?, find("y")?, find("z")?],
        dc: [find("f_dc_0")?, find("f_dc_1")?, find("f_dc_2")?],
        rest,
        opacity: find("opacity")?,
        scale: [find("scale_0")?, find("scale_1")?, find("scale_2")?],
        rot: [find("rot_0")?, find("rot_1")?, find("rot_2")?, find("rot_3")?],
        sh_degree,
    })
}

/// Parses an in-memory PLY file.
pub fn parse_ply(bytes: &[u8]) -> Result<GaussianScene, PlyError> {
    let header = parse_header(bytes)?;
    let layout = resolve_layout(&header.properties)?;
    let body = &bytes[header.data_start..];
    let needed = header.vertex_count * header.stride;
    if body.len() < needed {
        return Err(PlyError::Schema(format!(
            "body holds {} bytes, {} vertices need {needed}",
            body.len(),
            header.vertex_count
        )));
    }

    let names = |off: usize| -> String {
        header.properties.iter().find(|p| p.offset == off).map(|p| p.name.clone()).unwrap_or_default()
    };

    let mut gaussians = Vec::with_capacity(header.vertex_count);
    for (index, rec) in body[..needed].chunks_exact(header.stride).enumerate() {
        let read = |off: usize| -> Result<f64, PlyError> {
            let v = f32::from_le_bytes(rec[off..off + 4].try_into().expect("4 bytes"));
            if v.is_finite() {
                Ok(v as f64)
            } else {
                Err(PlyError::Data { index, property: names(off) })
            }
        };
        let center = Vector3::new(read(layout.xyz[0])?, read(layout.xyz[1])?, read(layout.xyz[2])?);
        let sh_dc = [read(layout.dc[0])?, read(layout.dc[1])?, read(layout.dc[2])?];
        let sh_rest = layout.rest.iter().map(|&o| read(o)).collect::<Result<Vec<_>, _>>()?;
        let opacity_logit = read(layout.opacity)?;
        let log_scale = Vector3::new(read(layout.scale[0])?, read(layout.scale[1])?, read(layout.scale[2])?);
        let mut rotation =
            Quaternion::new(read(layout.rot[0])?, read(layout.rot[1])?, read(layout.rot[2])?, read(layout.rot[3])?);
        let norm = rotation.norm();
        if norm == 0.0 {
            return Err(PlyError::Data { index, property: "rot".into() });
        }
        if (norm - 1.0).abs() > UNIT_NORM_SLACK {
            rotation /= norm;
        }
        gaussians.push(Gaussian { center, log_scale, rotation, opacity_logit, sh_dc, sh_rest });
    }
    Ok(GaussianScene::new(gaussians, layout.sh_degree))
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianScene, PlyError> {
    parse_ply(&fs::read(path)?)
}

fn property_names(sh_degree: u8) -> Vec<String> {
    let mut names: Vec<String> =
        ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"].iter().map(|s| s.to_string()).collect();
    names.extend((0..sh_rest_len(sh_degree)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

pub fn write_ply<W: Write>(scene: &GaussianScene, mut out: W) -> Result<(), PlyError> {
    if scene.is_empty() {
        return Err(PlyError::EmptyScene);
    }
    let rest_len = sh_rest_len(scene.sh_degree);
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", scene.len());
    for name in property_names(scene.sh_degree) {
        header.push_str("property float ");
        header.push_str(&name);
        header.push('\n');
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;

    let mut rec: Vec<f32> = Vec::with_capacity(17 + rest_len);
    let mut buf = Vec::with_capacity(scene.len() * (17 + rest_len) * 4);
    for (i, g) in scene.gaussians.iter().enumerate() {
        if g.sh_rest.len() != rest_len {
            return Err(PlyError::Schema(format!(
                "gaussian {i} has {} SH rest coefficients, degree {} needs {rest_len}",
                g.sh_rest.len(),
                scene.sh_degree
            )));
        }
        rec.clear();
        rec.extend(g.center.iter().map(|&v| v as f32));
        rec.extend([0.0f32; 3]);
        rec.extend(g.sh_dc.iter().map(|&v| v as f32));
        rec.extend(g.sh_rest.iter().map(|&v| v as f32));
        rec.push(g.opacity_logit as f32);
        rec.extend(g.log_scale.iter().map(|&v| v as f32));
        let q = g.rotation;
        rec.extend([q.w as f32, q.i as f32, q.j as f32, q.k as f32]);
        for v in &rec {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_ply(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<(), PlyError> {
    let mut bytes = Vec::new();
    write_ply(scene, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Serializes to an in-memory buffer.
pub fn to_ply_bytes(scene: &GaussianScene) -> Result<Vec<u8>, PlyError> {
    let mut bytes = Vec::new();
    write_ply(scene, &mut bytes)?;
    Ok(bytes)
}
