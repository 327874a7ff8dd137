//! Minimal PLY reader/writer for triangle meshes (ASCII and binary
//! little-endian). Only vertex positions and face index lists are kept;
//! every other element and property is parsed and skipped.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Point3;

use super::TriangleMesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LengthUnit {
    Meters,
    /// BOP models store millimeters; values are divided by 1000 on load.
    #[default]
    Millimeters,
}

impl LengthUnit {
    fn to_meters(self) -> f64 {
        match self {
            LengthUnit::Meters => 1.0,
            LengthUnit::Millimeters => 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
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
    fn parse(name: &str) -> Option<Scalar> {
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
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(Scalar, String),
    List(Scalar, Scalar, String),
}

impl Property {
    fn name(&self) -> &str {
        match self {
            Property::Scalar(_, n) | Property::List(_, _, n) => n,
        }
    }
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

fn perr(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parse the header; returns the encoding, the elements and the byte offset
/// where the body starts.
fn parse_header(bytes: &[u8]) -> Result<(PlyEncoding, Vec<Element>, usize)> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| perr(start, "unexpected end of header"))?;
        *pos = end + 1;
        let line = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| perr(start, "header is not valid UTF-8"))?;
        Ok((start, line.trim_end_matches('\r').trim().to_string()))
    };

    let (off, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(perr(off, "missing 'ply' magic"));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (off, line) = next_line(&mut pos)?;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                encoding = Some(match tok.next() {
                    Some("ascii") => PlyEncoding::Ascii,
                    Some("binary_little_endian") => PlyEncoding::BinaryLittleEndian,
                    Some(other) => {
                        return Err(Error::UnsupportedFormat(format!("PLY encoding '{other}'")))
                    }
                    None => return Err(perr(off, "format line without encoding")),
                });
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| perr(off, "element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| perr(off, "element without valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| perr(off, "property before any element"))?;
                let ty = tok
                    .next()
                    .ok_or_else(|| perr(off, "property without type"))?;
                let prop = if ty == "list" {
                    let ct = tok.next().and_then(Scalar::parse);
                    let it = tok.next().and_then(Scalar::parse);
                    let name = tok.next();
                    match (ct, it, name) {
                        (Some(ct), Some(it), Some(name)) => {
                            Property::List(ct, it, name.to_string())
                        }
                        _ => return Err(perr(off, "malformed list property")),
                    }
                } else {
                    let st = Scalar::parse(ty)
                        .ok_or_else(|| perr(off, format!("unknown property type '{ty}'")))?;
                    let name = tok
                        .next()
                        .ok_or_else(|| perr(off, "property without name"))?;
                    Property::Scalar(st, name.to_string())
                };
                el.properties.push(prop);
            }
            Some("end_header") => break,
            Some(other) => return Err(perr(off, format!("unexpected header keyword '{other}'"))),
        }
    }
    let encoding = encoding.ok_or_else(|| perr(0, "header has no format line"))?;
    Ok((encoding, elements, pos))
}

/// Source of scalar values for either encoding.
trait ValueReader {
    fn read(&mut self, ty: Scalar) -> Result<f64>;
    fn offset(&self) -> usize;
}

struct AsciiReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ValueReader for AsciiReader<'_> {
    fn read(&mut self, _ty: Scalar) -> Result<f64> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(perr(start, "unexpected end of data"));
        }
        let tok = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| perr(start, "non-UTF-8 token"))?;
        tok.parse::<f64>()
            .map_err(|_| perr(start, format!("invalid number '{tok}'")))
    }

    fn offset(&self) -> usize {
        self.pos
    }
}

struct BinaryReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ValueReader for BinaryReader<'_> {
    fn read(&mut self, ty: Scalar) -> Result<f64> {
        let n = ty.size();
        let b = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| perr(self.pos, "unexpected end of binary data"))?;
        self.pos += n;
        Ok(match ty {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b.try_into().unwrap()),
        })
    }

    fn offset(&self) -> usize {
        self.pos
    }
}

fn read_body(
    reader: &mut dyn ValueReader,
    elements: &[Element],
    unit: LengthUnit,
) -> Result<TriangleMesh> {
    let scale = unit.to_meters();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for el in elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let xyz = if is_vertex {
            let find = |n: &str| el.properties.iter().position(|p| p.name() == n);
            match (find("x"), find("y"), find("z")) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                _ => {
                    return Err(perr(
                        reader.offset(),
                        "vertex element lacks x/y/z properties",
                    ))
                }
            }
        } else {
            None
        };
        if is_vertex {
            vertices.reserve(el.count);
        }
        for _ in 0..el.count {
            let mut pos = [0.0; 3];
            for (pi, prop) in el.properties.iter().enumerate() {
                match prop {
                    Property::Scalar(ty, _) => {
                        let v = reader.read(*ty)?;
                        if let Some(idx) = xyz {
                            if let Some(k) = idx.iter().position(|&i| i == pi) {
                                pos[k] = v;
                            }
                        }
                    }
                    Property::List(ct, it, name) => {
                        let at = reader.offset();
                        let count = reader.read(*ct)?;
                        if count < 0.0 || count.fract() != 0.0 {
                            return Err(perr(at, "invalid list length"));
                        }
                        let count = count as usize;
                        let mut idx = Vec::with_capacity(count);
                        for _ in 0..count {
                            idx.push(reader.read(*it)?);
                        }
                        if is_face && (name == "vertex_indices" || name == "vertex_index") {
                            if count < 3 {
                                return Err(perr(at, "face with fewer than 3 vertices"));
                            }
                            let as_u32 = |v: f64| -> Result<u32> {
                                if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                                    Err(perr(at, format!("invalid vertex index {v}")))
                                } else {
                                    Ok(v as u32)
                                }
                            };
                            // Fan triangulation for polygons.
                            for k in 1..count - 1 {
                                triangles.push([
                                    as_u32(idx[0])?,
                                    as_u32(idx[k])?,
                                    as_u32(idx[k + 1])?,
                                ]);
                            }
                        }
                    }
                }
            }
            if is_vertex {
                vertices.push(Point3::new(pos[0] * scale, pos[1] * scale, pos[2] * scale));
            }
        }
    }
    if vertices.is_empty() {
        return Err(perr(reader.offset(), "mesh has no vertices"));
    }
    let n = vertices.len();
    if let Some(bad) = triangles.iter().flatten().find(|&&i| i as usize >= n) {
        return Err(perr(
            reader.offset(),
            format!("face references vertex {bad} but only {n} exist"),
        ));
    }
    TriangleMesh::new(vertices, triangles)
}

/// Parse a PLY file from memory.
pub fn read_ply(bytes: &[u8], unit: LengthUnit) -> Result<TriangleMesh> {
    let (encoding, elements, body) = parse_header(bytes)?;
    match encoding {
        PlyEncoding::Ascii => read_body(&mut AsciiReader { bytes, pos: body }, &elements, unit),
        PlyEncoding::BinaryLittleEndian => {
            read_body(&mut BinaryReader { bytes, pos: body }, &elements, unit)
        }
    }
}

pub fn load_ply(path: &Path, unit: LengthUnit) -> Result<TriangleMesh> {
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    read_ply(&bytes, unit).map_err(|e| e.in_file(path))
}

/// Write vertices as `double` and faces as `uchar`/`int` lists.
pub fn write_ply<W: Write>(
    out: &mut W,
    mesh: &TriangleMesh,
    encoding: PlyEncoding,
    unit: LengthUnit,
) -> Result<()> {
    let scale = 1.0 / unit.to_meters();
    let fmt = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        out,
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty double x\nproperty double y\n\
         property double z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )?;
    match encoding {
        PlyEncoding::Ascii => {
            for v in &mesh.vertices {
                writeln!(out, "{} {} {}", v.x * scale, v.y * scale, v.z * scale)?;
            }
            for t in &mesh.triangles {
                writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            for v in &mesh.vertices {
                for c in [v.x, v.y, v.z] {
                    out.write_all(&(c * scale).to_le_bytes())?;
                }
            }
            for t in &mesh.triangles {
                out.write_all(&[3u8])?;
                for i in t {
                    out.write_all(&(*i as i32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRI: &str = "ply\nformat ascii 1.0\ncomment test\nelement vertex 3\nproperty float x\n\
property float y\nproperty float z\nproperty uchar red\nelement face 1\n\
property list uchar int vertex_indices\nend_header\n0 0 0 255\n1 0 0 0\n0 1 0 7\n3 0 1 2\n";

    #[test]
    fn minimal_ascii() {
        let m = read_ply(TRI.as_bytes(), LengthUnit::Meters).unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
        assert_eq!(m.vertices[1], Point3::new(1.0, 0.0, 0.0));
        let mm = read_ply(TRI.as_bytes(), LengthUnit::Millimeters).unwrap();
        assert_eq!(mm.vertices[1], Point3::new(0.001, 0.0, 0.0));
    }

    #[test]
    fn empty_vertex_element_rejected() {
        let text = "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\n\
property float z\nend_header\n";
        assert!(matches!(
            read_ply(text.as_bytes(), LengthUnit::Meters),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn big_endian_unsupported() {
        let text = "ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(
            read_ply(text.as_bytes(), LengthUnit::Meters),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn parse_error_reports_offset() {
        let text = TRI.replace("1 0 0 0\n", "1 zz 0 0\n");
        match read_ply(text.as_bytes(), LengthUnit::Meters) {
            Err(Error::Parse { offset, .. }) => {
                assert_eq!(
                    &text.as_bytes()[offset as usize..offset as usize + 2],
                    b"zz"
                );
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let truncated = &TRI[..TRI.len() - 4];
        assert!(matches!(
            read_ply(truncated.as_bytes(), LengthUnit::Meters),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn quads_are_fan_triangulated() {
        let text =
            "ply\nformat ascii 1.0\nelement vertex 4\nproperty double x\nproperty double y\n\
property double z\nelement face 1\nproperty list uchar uint vertex_index\nend_header\n\
0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let m = read_ply(text.as_bytes(), LengthUnit::Meters).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn binary_round_trip_icosphere() {
        let sphere = TriangleMesh::icosphere(0.05, 2);
        for enc in [PlyEncoding::BinaryLittleEndian, PlyEncoding::Ascii] {
            let mut buf = Vec::new();
            write_ply(&mut buf, &sphere, enc, LengthUnit::Meters).unwrap();
            let back = read_ply(&buf, LengthUnit::Meters).unwrap();
            assert_eq!(back, sphere);
        }
        let mut buf = Vec::new();
        write_ply(
            &mut buf,
            &sphere,
            PlyEncoding::BinaryLittleEndian,
            LengthUnit::Millimeters,
        )
        .unwrap();
        let back = read_ply(&buf, LengthUnit::Millimeters).unwrap();
        for (a, b) in back.vertices.iter().zip(&sphere.vertices) {
            assert!((a - b).norm() < 1e-15);
        }
    }
}
