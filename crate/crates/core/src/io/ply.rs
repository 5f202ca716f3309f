//! PLY point clouds, ASCII and binary little-endian.
//!
//! The `vertex` element must carry `x`, `y`, `z` (float or double) and `red`,
//! `green`, `blue` (uchar). Every other property and element is skipped.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::primitives::{CloudPoint, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug, Clone)]
enum PropertyKind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    kind: PropertyKind,
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
}

struct Parser<'a> {
    path: &'a Path,
}

impl Parser<'_> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn header(&self, bytes: &[u8]) -> Result<Header> {
        let mut offset = 0usize;
        let mut format = None;
        let mut elements: Vec<Element> = Vec::new();
        let mut first = true;
        loop {
            let Some(len) = bytes[offset..].iter().position(|b| *b == b'\n') else {
                return Err(self.err(offset, "header is not terminated by end_header"));
            };
            let line_start = offset;
            let line = std::str::from_utf8(&bytes[offset..offset + len])
                .map_err(|_| self.err(line_start, "header line is not valid UTF-8"))?
                .trim_end_matches('\r');
            offset += len + 1;
            let mut words = line.split_whitespace();
            let keyword = words.next().unwrap_or("");
            if first {
                if line != "ply" {
                    return Err(self.err(0, "missing 'ply' magic line"));
                }
                first = false;
                continue;
            }
            match keyword {
                "format" => {
                    let f = match (words.next(), words.next()) {
                        (Some("ascii"), Some("1.0")) => PlyFormat::Ascii,
                        (Some("binary_little_endian"), Some("1.0")) => PlyFormat::BinaryLittleEndian,
                        (Some(other), _) => {
                            return Err(self.err(line_start, format!("unsupported format '{other}'")))
                        }
                        _ => return Err(self.err(line_start, "malformed format line")),
                    };
                    format = Some(f);
                }
                "comment" | "obj_info" | "" => {}
                "element" => {
                    let (Some(name), Some(count)) = (words.next(), words.next()) else {
                        return Err(self.err(line_start, "malformed element line"));
                    };
                    let count = count
                        .parse()
                        .map_err(|_| self.err(line_start, format!("bad element count '{count}'")))?;
                    elements.push(Element {
                        name: name.to_string(),
                        count,
                        properties: Vec::new(),
                    });
                }
                "property" => {
                    let Some(element) = elements.last_mut() else {
                        return Err(self.err(line_start, "property before any element"));
                    };
                    let parts: Vec<&str> = words.collect();
                    let bad_type = |t: &str| self.err(line_start, format!("unknown property type '{t}'"));
                    let property = match parts.as_slice() {
                        ["list", count, item, name] => Property {
                            name: name.to_string(),
                            kind: PropertyKind::List {
                                count: Scalar::parse(count).ok_or_else(|| bad_type(count))?,
                                item: Scalar::parse(item).ok_or_else(|| bad_type(item))?,
                            },
                        },
                        [ty, name] => Property {
                            name: name.to_string(),
                            kind: PropertyKind::Scalar(Scalar::parse(ty).ok_or_else(|| bad_type(ty))?),
                        },
                        _ => return Err(self.err(line_start, "malformed property line")),
                    };
                    element.properties.push(property);
                }
                "end_header" => break,
                other => return Err(self.err(line_start, format!("unexpected header keyword '{other}'"))),
            }
        }
        let format = format.ok_or_else(|| self.err(0, "header has no format line"))?;
        Ok(Header {
            format,
            elements,
            body_offset: offset,
        })
    }
}

struct VertexLayout {
    xyz: [usize; 3],
    rgb: [usize; 3],
}

fn vertex_layout(parser: &Parser, element: &Element) -> Result<VertexLayout> {
    let find = |name: &str, allowed: &[Scalar]| -> Result<usize> {
        let idx = element
            .properties
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| parser.err(0, format!("vertex element lacks required property '{name}'")))?;
        match element.properties[idx].kind {
            PropertyKind::Scalar(s) if allowed.contains(&s) => Ok(idx),
            _ => Err(parser.err(0, format!("property '{name}' must be one of {allowed:?}"))),
        }
    };
    let float = [Scalar::F32, Scalar::F64];
    Ok(VertexLayout {
        xyz: [find("x", &float)?, find("y", &float)?, find("z", &float)?],
        rgb: [
            find("red", &[Scalar::U8])?,
            find("green", &[Scalar::U8])?,
            find("blue", &[Scalar::U8])?,
        ],
    })
}

fn to_point(values: &[f64], layout: &VertexLayout) -> CloudPoint {
    CloudPoint {
        position: layout.xyz.map(|i| values[i]),
        color: layout.rgb.map(|i| values[i] / 255.0),
    }
}

fn read_binary(parser: &Parser, bytes: &[u8], header: &Header) -> Result<Vec<CloudPoint>> {
    let mut offset = header.body_offset;
    let mut take = |n: usize, what: &str| -> Result<(usize, usize)> {
        if offset + n > bytes.len() {
            return Err(parser.err(offset, format!("truncated payload while reading {what}")));
        }
        let start = offset;
        offset += n;
        Ok((start, start + n))
    };
    let mut points = Vec::new();
    for element in &header.elements {
        let layout = if element.name == "vertex" {
            Some(vertex_layout(parser, element)?)
        } else {
            None
        };
        let mut values = vec![0.0; element.properties.len()];
        for _ in 0..element.count {
            for (k, p) in element.properties.iter().enumerate() {
                match p.kind {
                    PropertyKind::Scalar(s) => {
                        let (a, b) = take(s.size(), &p.name)?;
                        values[k] = s.read_le(&bytes[a..b]);
                    }
                    PropertyKind::List { count, item } => {
                        let (a, b) = take(count.size(), &p.name)?;
                        let n = count.read_le(&bytes[a..b]);
                        if !(n >= 0.0) {
                            return Err(parser.err(a, format!("negative list length for '{}'", p.name)));
                        }
                        take(n as usize * item.size(), &p.name)?;
                    }
                }
            }
            if let Some(layout) = &layout {
                points.push(to_point(&values, layout));
            }
        }
    }
    Ok(points)
}

fn read_ascii(parser: &Parser, bytes: &[u8], header: &Header) -> Result<Vec<CloudPoint>> {
    let body = &bytes[header.body_offset..];
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < body.len() {
        while i < body.len() && body[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < body.len() && !body[i].is_ascii_whitespace() {
            i += 1;
        }
        if i > start {
            tokens.push((header.body_offset + start, &body[start..i]));
        }
    }
    let end = bytes.len();
    let mut cursor = tokens.into_iter();
    let mut next = |what: &str| -> Result<f64> {
        let (off, tok) = cursor
            .next()
            .ok_or_else(|| parser.err(end, format!("truncated payload while reading {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| parser.err(off, format!("invalid number for {what}")))
    };
    let mut points = Vec::new();
    for element in &header.elements {
        let layout = if element.name == "vertex" {
            Some(vertex_layout(parser, element)?)
        } else {
            None
        };
        let mut values = vec![0.0; element.properties.len()];
        for _ in 0..element.count {
            for (k, p) in element.properties.iter().enumerate() {
                match p.kind {
                    PropertyKind::Scalar(_) => values[k] = next(&p.name)?,
                    PropertyKind::List { .. } => {
                        let n = next(&p.name)?;
                        for _ in 0..n.max(0.0) as usize {
                            next(&p.name)?;
                        }
                    }
                }
            }
            if let Some(layout) = &layout {
                points.push(to_point(&values, layout));
            }
        }
    }
    Ok(points)
}

pub fn parse_point_cloud(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let parser = Parser { path };
    let header = parser.header(bytes)?;
    if !header.elements.iter().any(|e| e.name == "vertex") {
        return Err(parser.err(0, "no vertex element"));
    }
    let points = match header.format {
        PlyFormat::Ascii => read_ascii(&parser, bytes, &header)?,
        PlyFormat::BinaryLittleEndian => read_binary(&parser, bytes, &header)?,
    };
    let cloud = PointCloud::new(points);
    cloud.validate()?;
    Ok(cloud)
}

pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_point_cloud(&bytes, path)
}

fn quantize_color(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes positions as doubles so they survive a round trip bit for bit.
pub fn write_point_cloud(path: impl AsRef<Path>, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let mut out = Vec::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let header = format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    );
    out.extend_from_slice(header.as_bytes());
    for p in &cloud.points {
        let rgb = p.color.map(quantize_color);
        match format {
            PlyFormat::Ascii => {
                writeln!(
                    out,
                    "{} {} {} {} {} {}",
                    p.position[0], p.position[1], p.position[2], rgb[0], rgb[1], rgb[2]
                )
                .expect("write to vec");
            }
            PlyFormat::BinaryLittleEndian => {
                for v in p.position {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&rgb);
            }
        }
    }
    fs::write(&path, out).map_err(|e| Error::io(path, e))
}
