//! Binary little-endian PLY point clouds: `x y z` as float32 (double also
//! accepted on read) and optional `red green blue` as uchar.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::binary::{create, read_file};
use crate::scene::PointCloud;

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

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => f64::from(b[0] as i8),
            Scalar::U8 => f64::from(b[0]),
            Scalar::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Scalar::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Scalar::I32 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::U32 => f64::from(u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

struct Property {
    name: String,
    scalar: Scalar,
}

struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
    has_list: bool,
}

impl Element {
    fn stride(&self) -> usize {
        self.properties.iter().map(|p| p.scalar.size()).sum()
    }

    fn offset_of(&self, name: &str) -> Option<(usize, Scalar)> {
        let mut off = 0;
        for p in &self.properties {
            if p.name == name {
                return Some((off, p.scalar));
            }
            off += p.scalar.size();
        }
        None
    }
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let data = read_file(path)?;
    let err = |line: usize, msg: &str| Error::parse(path, format!("line {line}"), msg);

    let mut pos = 0;
    let mut line_no = 0;
    let mut elements: Vec<Element> = Vec::new();
    let mut format_ok = false;
    loop {
        let Some(nl) = data[pos..].iter().position(|&b| b == b'\n') else {
            return Err(err(line_no + 1, "header is not terminated by end_header"));
        };
        let line = std::str::from_utf8(&data[pos..pos + nl])
            .map_err(|_| err(line_no + 1, "header is not valid UTF-8"))?
            .trim_end_matches('\r')
            .trim();
        pos += nl + 1;
        line_no += 1;
        let mut words = line.split_whitespace();
        match words.next() {
            _ if line_no == 1 => {
                if line != "ply" {
                    return Err(err(1, "missing `ply` magic line"));
                }
            }
            Some("format") => {
                let fmt = words.next().unwrap_or("");
                if fmt != "binary_little_endian" {
                    return Err(err(line_no, &format!("unsupported format `{fmt}`, expected binary_little_endian")));
                }
                format_ok = true;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = words.next().ok_or_else(|| err(line_no, "element without name"))?;
                let count = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| err(line_no, "element count is not an integer"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    has_list: false,
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(line_no, "property before any element"))?;
                let ty = words.next().ok_or_else(|| err(line_no, "property without type"))?;
                if ty == "list" {
                    el.has_list = true;
                    continue;
                }
                let scalar = Scalar::parse(ty).ok_or_else(|| err(line_no, &format!("unknown property type `{ty}`")))?;
                let name = words.next().ok_or_else(|| err(line_no, "property without name"))?;
                el.properties.push(Property {
                    name: name.to_string(),
                    scalar,
                });
            }
            Some("end_header") => break,
            Some(other) => return Err(err(line_no, &format!("unexpected header keyword `{other}`"))),
        }
    }
    if !format_ok {
        return Err(err(line_no, "header has no format line"));
    }

    let location = |offset: usize| format!("byte {offset}");
    for el in &elements {
        if el.name == "vertex" {
            break;
        }
        if el.has_list {
            return Err(Error::parse(
                path,
                location(pos),
                format!("element `{}` with list properties precedes vertex", el.name),
            ));
        }
        pos += el.stride() * el.count;
    }
    let vertex = elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| err(line_no, "no vertex element"))?;
    if vertex.has_list {
        return Err(err(line_no, "vertex element has list properties"));
    }
    let axis = |n: &str| {
        vertex
            .offset_of(n)
            .ok_or_else(|| err(line_no, &format!("vertex has no `{n}` property")))
    };
    let (xs, ys, zs) = (axis("x")?, axis("y")?, axis("z")?);
    let rgb = match (vertex.offset_of("red"), vertex.offset_of("green"), vertex.offset_of("blue")) {
        (Some(r), Some(g), Some(b)) => {
            if [r.1, g.1, b.1].iter().any(|s| *s != Scalar::U8) {
                return Err(err(line_no, "color properties must be uchar"));
            }
            Some([r.0, g.0, b.0])
        }
        (None, None, None) => None,
        _ => return Err(err(line_no, "incomplete red/green/blue properties")),
    };

    let stride = vertex.stride();
    let needed = stride * vertex.count;
    if data.len() < pos + needed {
        return Err(Error::parse(
            path,
            location(data.len()),
            format!("vertex data truncated: need {needed} bytes from byte {pos}"),
        ));
    }
    let mut positions = Vec::with_capacity(vertex.count);
    let mut colors = rgb.map(|_| Vec::with_capacity(vertex.count));
    for i in 0..vertex.count {
        let rec = &data[pos + i * stride..pos + (i + 1) * stride];
        let p = [xs.1.read(&rec[xs.0..]), ys.1.read(&rec[ys.0..]), zs.1.read(&rec[zs.0..])];
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::parse(
                path,
                location(pos + i * stride),
                format!("vertex {i} has a non-finite coordinate"),
            ));
        }
        positions.push(p);
        if let (Some(offs), Some(c)) = (rgb, colors.as_mut()) {
            c.push(offs.map(|o| rec[o]));
        }
    }
    PointCloud::new(positions, colors)
}

/// Writes positions as float32; values not representable in f32 are rounded.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = create(path)?;
    let r = (|| {
        writeln!(w, "ply")?;
        writeln!(w, "format binary_little_endian 1.0")?;
        writeln!(w, "element vertex {}", cloud.len())?;
        writeln!(w, "property float x")?;
        writeln!(w, "property float y")?;
        writeln!(w, "property float z")?;
        if cloud.colors().is_some() {
            writeln!(w, "property uchar red")?;
            writeln!(w, "property uchar green")?;
            writeln!(w, "property uchar blue")?;
        }
        writeln!(w, "end_header")?;
        for (i, p) in cloud.positions().iter().enumerate() {
            for c in p {
                w.write_all(&(*c as f32).to_le_bytes())?;
            }
            if let Some(colors) = cloud.colors() {
                w.write_all(&colors[i])?;
            }
        }
        w.flush()
    })();
    r.map_err(|e| Error::io(path, e))
}
