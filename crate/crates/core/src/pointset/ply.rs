//! PLY reading and writing for featured point clouds.
//!
//! Reads ascii, binary little- and big-endian files. The `vertex` element
//! must carry `x, y, z` and `red, green, blue` (uchar, scaled by 1/255, or
//! float in `[0, 1]`); feature channels are the float properties
//! `f_0 .. f_{F-1}`. A `comment feature_dim F` header line, when present,
//! pins `F`. Other elements and properties are skipped.
//!
//! Writing always emits float32 properties, so a load/save cycle of a file
//! this module wrote is byte-stable.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::FeaturedPointCloud;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyFormat {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Encoding {
    Ascii,
    Little,
    Big,
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
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
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

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }
}

#[derive(Debug, Clone)]
enum PropKind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    kind: PropKind,
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    encoding: Encoding,
    elements: Vec<Element>,
    feature_dim: Option<usize>,
    body_offset: usize,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::PlyParse {
        offset,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut offset = 0;
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut feature_dim = None;
    let mut first = true;
    loop {
        let rest = &bytes[offset..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(parse_err(offset, "unterminated header (missing end_header)"));
        };
        let line_start = offset;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| parse_err(line_start, "header is not valid UTF-8"))?
            .trim_end_matches('\r');
        offset += nl + 1;
        let mut words = line.split_whitespace();
        let keyword = words.next().unwrap_or("");
        if first {
            if keyword != "ply" {
                return Err(parse_err(line_start, "missing `ply` magic"));
            }
            first = false;
            continue;
        }
        match keyword {
            "format" => {
                encoding = Some(match words.next() {
                    Some("ascii") => Encoding::Ascii,
                    Some("binary_little_endian") => Encoding::Little,
                    Some("binary_big_endian") => Encoding::Big,
                    other => {
                        return Err(parse_err(line_start, format!("unknown format {other:?}")));
                    }
                });
            }
            "comment" => {
                if words.next() == Some("feature_dim") {
                    let v = words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| parse_err(line_start, "malformed feature_dim comment"))?;
                    feature_dim = Some(v);
                }
            }
            "obj_info" | "" => {}
            "element" => {
                let name = words
                    .next()
                    .ok_or_else(|| parse_err(line_start, "element without name"))?;
                let count = words
                    .next()
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| parse_err(line_start, "element without valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(line_start, "property before any element"))?;
                let ty = words
                    .next()
                    .ok_or_else(|| parse_err(line_start, "property without type"))?;
                let kind = if ty == "list" {
                    let count = words.next().and_then(Scalar::parse);
                    let item = words.next().and_then(Scalar::parse);
                    match (count, item) {
                        (Some(count), Some(item)) => PropKind::List { count, item },
                        _ => return Err(parse_err(line_start, "malformed list property")),
                    }
                } else {
                    PropKind::Scalar(
                        Scalar::parse(ty)
                            .ok_or_else(|| parse_err(line_start, format!("unknown type `{ty}`")))?,
                    )
                };
                let name = words
                    .next()
                    .ok_or_else(|| parse_err(line_start, "property without name"))?;
                el.props.push(Property {
                    name: name.to_string(),
                    kind,
                });
            }
            "end_header" => break,
            other => {
                return Err(parse_err(line_start, format!("unexpected header keyword `{other}`")));
            }
        }
    }
    let encoding = encoding.ok_or_else(|| parse_err(0, "missing format line"))?;
    Ok(Header {
        encoding,
        elements,
        feature_dim,
        body_offset: offset,
    })
}

/// Sequential reader over the body, yielding every scalar as `f64`.
struct Body<'a> {
    bytes: &'a [u8],
    pos: usize,
    encoding: Encoding,
}

impl Body<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn read(&mut self, ty: Scalar) -> Result<f64> {
        match self.encoding {
            Encoding::Ascii => {
                self.skip_ws();
                let start = self.pos;
                while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
                    self.pos += 1;
                }
                if start == self.pos {
                    return Err(parse_err(start, "unexpected end of data (element count mismatch)"));
                }
                let tok = std::str::from_utf8(&self.bytes[start..self.pos])
                    .map_err(|_| parse_err(start, "non-UTF-8 token"))?;
                let v: f64 = tok
                    .parse()
                    .map_err(|_| parse_err(start, format!("invalid number `{tok}`")))?;
                if !ty.is_float() && v.fract() != 0.0 {
                    return Err(parse_err(start, format!("expected integer, found `{tok}`")));
                }
                // declared precision applies to text too
                Ok(if ty == Scalar::F32 { tok.parse::<f32>().map_or(v, f64::from) } else { v })
            }
            Encoding::Little | Encoding::Big => {
                let n = ty.size();
                if self.pos + n > self.bytes.len() {
                    return Err(parse_err(self.pos, "unexpected end of data (element count mismatch)"));
                }
                let raw = &self.bytes[self.pos..self.pos + n];
                self.pos += n;
                let mut buf = [0u8; 8];
                buf[..n].copy_from_slice(raw);
                if self.encoding == Encoding::Big {
                    buf[..n].reverse();
                }
                Ok(match ty {
                    Scalar::I8 => buf[0] as i8 as f64,
                    Scalar::U8 => buf[0] as f64,
                    Scalar::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
                    Scalar::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
                    Scalar::I32 => i32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
                    Scalar::U32 => u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
                    Scalar::F32 => f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
                    Scalar::F64 => f64::from_le_bytes(buf),
                })
            }
        }
    }

    fn at_end(&mut self) -> bool {
        if self.encoding == Encoding::Ascii {
            self.skip_ws();
        }
        self.pos >= self.bytes.len()
    }
}

fn schema(property: impl Into<String>) -> Error {
    Error::PlySchema {
        property: property.into(),
    }
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<FeaturedPointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes)
}

pub(crate) fn parse_ply(bytes: &[u8]) -> Result<FeaturedPointCloud> {
    let header = parse_header(bytes)?;
    let vertex = header
        .elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| schema("vertex"))?;
    let slot = |name: &str| vertex.props.iter().position(|p| p.name == name);
    let scalar_slot = |name: &str| -> Result<(usize, Scalar)> {
        let i = slot(name).ok_or_else(|| schema(name))?;
        match vertex.props[i].kind {
            PropKind::Scalar(s) => Ok((i, s)),
            PropKind::List { .. } => Err(schema(name)),
        }
    };
    let xyz = [scalar_slot("x")?, scalar_slot("y")?, scalar_slot("z")?];
    let rgb = [
        scalar_slot("red")?,
        scalar_slot("green")?,
        scalar_slot("blue")?,
    ];
    for (name, (_, ty)) in ["red", "green", "blue"].iter().zip(&rgb) {
        if !(ty.is_float() || *ty == Scalar::U8) {
            return Err(schema(*name));
        }
    }
    let feature_dim = match header.feature_dim {
        Some(f) => f,
        None => (0..).take_while(|k| slot(&format!("f_{k}")).is_some()).count(),
    };
    let features_slots = (0..feature_dim)
        .map(|k| scalar_slot(&format!("f_{k}")))
        .collect::<Result<Vec<_>>>()?;

    let mut body = Body {
        bytes,
        pos: header.body_offset,
        encoding: header.encoding,
    };
    let n = vertex.count;
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut features = Array2::zeros((n, feature_dim));
    let mut row = Vec::new();
    for el in &header.elements {
        for i in 0..el.count {
            row.clear();
            for p in &el.props {
                match p.kind {
                    PropKind::Scalar(s) => row.push(body.read(s)?),
                    PropKind::List { count, item } => {
                        let len = body.read(count)?;
                        if len < 0.0 {
                            return Err(parse_err(body.pos, "negative list length"));
                        }
                        for _ in 0..len as usize {
                            body.read(item)?;
                        }
                        row.push(f64::NAN);
                    }
                }
            }
            if el.name != "vertex" {
                continue;
            }
            positions.push(Vec3::new(row[xyz[0].0], row[xyz[1].0], row[xyz[2].0]));
            let mut c = Vec3::zeros();
            for k in 0..3 {
                let (s, ty) = rgb[k];
                c[k] = if ty == Scalar::U8 { row[s] / 255.0 } else { row[s] };
            }
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(schema(format!("red/green/blue (vertex {i} outside [0, 1])")));
            }
            colors.push(c);
            for (k, (s, _)) in features_slots.iter().enumerate() {
                features[[i, k]] = row[*s];
            }
        }
    }
    if !body.at_end() {
        return Err(parse_err(body.pos, "trailing data after last element (element count mismatch)"));
    }
    FeaturedPointCloud::new(positions, colors, features)
}

pub fn save_ply(cloud: &FeaturedPointCloud, path: impl AsRef<Path>, format: PlyFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ply(cloud, format)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode_ply(cloud: &FeaturedPointCloud, format: PlyFormat) -> Result<Vec<u8>> {
    cloud.validate()?;
    let f = cloud.feature_dim();
    let mut out = String::new();
    out.push_str("ply\n");
    out.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    out.push_str(&format!("comment feature_dim {f}\n"));
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    for name in ["x", "y", "z", "red", "green", "blue"] {
        out.push_str(&format!("property float {name}\n"));
    }
    for k in 0..f {
        out.push_str(&format!("property float f_{k}\n"));
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    for i in 0..cloud.len() {
        let p = &cloud.positions[i];
        let c = &cloud.colors[i];
        let row = cloud.features.row(i);
        let values = [p.x, p.y, p.z, c.x, c.y, c.z]
            .into_iter()
            .chain(row.iter().copied())
            .map(|v| v as f32);
        match format {
            PlyFormat::Ascii => {
                let line = values.map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
                bytes.extend_from_slice(line.as_bytes());
                bytes.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                for v in values {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(bytes)
}
