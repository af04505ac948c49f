//! Minimal PLY reader/writer (ascii and binary little-endian).
//!
//! Only the `vertex` element is materialized; other elements (faces, edges)
//! are parsed and skipped so that mesh files can be read as point sets.

use std::io::Write;

#[derive(Debug, thiserror::Error)]
pub enum PlyError {
    #[error("malformed PLY: {0}")]
    Malformed(String),
    #[error("unsupported PLY feature: {0}")]
    Unsupported(String),
    #[error("missing vertex property `{0}`")]
    MissingProperty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn malformed(msg: impl Into<String>) -> PlyError {
    PlyError::Malformed(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
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
    fn parse(s: &str) -> Result<Self, PlyError> {
        Ok(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            other => return Err(malformed(format!("unknown scalar type `{other}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ScalarType::I8 => "char",
            ScalarType::U8 => "uchar",
            ScalarType::I16 => "short",
            ScalarType::U16 => "ushort",
            ScalarType::I32 => "int",
            ScalarType::U32 => "uint",
            ScalarType::F32 => "float",
            ScalarType::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, ScalarType::F32 | ScalarType::F64)
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn write_le(self, v: f64, out: &mut Vec<u8>) {
        match self {
            ScalarType::I8 => out.push(v as i8 as u8),
            ScalarType::U8 => out.push(v as u8),
            ScalarType::I16 => out.extend((v as i16).to_le_bytes()),
            ScalarType::U16 => out.extend((v as u16).to_le_bytes()),
            ScalarType::I32 => out.extend((v as i32).to_le_bytes()),
            ScalarType::U32 => out.extend((v as u32).to_le_bytes()),
            ScalarType::F32 => out.extend((v as f32).to_le_bytes()),
            ScalarType::F64 => out.extend(v.to_le_bytes()),
        }
    }

    fn write_ascii(self, v: f64, out: &mut Vec<u8>) {
        let _ = match self {
            ScalarType::F32 => write!(out, "{}", v as f32),
            ScalarType::F64 => write!(out, "{v}"),
            _ => write!(out, "{}", v as i64),
        };
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PropertyKind {
    Scalar(ScalarType),
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Property {
    pub name: String,
    pub kind: PropertyKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub name: String,
    pub count: usize,
    pub properties: Vec<Property>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub encoding: Encoding,
    pub comments: Vec<String>,
    pub elements: Vec<Element>,
}

/// The vertex table of a PLY file. Each row holds the scalar properties in
/// header order; list properties are dropped.
#[derive(Debug, Clone)]
pub struct VertexTable {
    pub header: Header,
    pub names: Vec<String>,
    pub types: Vec<ScalarType>,
    pub rows: Vec<Vec<f64>>,
}

impl VertexTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn require(&self, name: &str) -> Result<usize, PlyError> {
        self.column(name)
            .ok_or_else(|| PlyError::MissingProperty(name.to_string()))
    }

    pub fn type_of(&self, name: &str) -> Option<ScalarType> {
        self.column(name).map(|i| self.types[i])
    }

    /// Value of `key value...` header comments, e.g. `comment k 2`.
    pub fn comment_value(&self, key: &str) -> Option<&str> {
        self.header.comments.iter().find_map(|c| {
            let mut it = c.splitn(2, ' ');
            (it.next() == Some(key)).then(|| it.next().unwrap_or("").trim())
        })
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize), PlyError> {
    const END: &[u8] = b"end_header";
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| malformed("header is not terminated by end_header"))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| malformed("header is not valid UTF-8"))?
            .trim_end_matches('\r')
            .to_string();
        pos += nl + 1;
        if line.as_bytes() == END {
            break;
        }
        lines.push(line);
    }
    let mut it = lines.into_iter();
    if it.next().as_deref() != Some("ply") {
        return Err(malformed("missing `ply` magic"));
    }
    let mut encoding = None;
    let mut comments = Vec::new();
    let mut elements: Vec<Element> = Vec::new();
    for line in it {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["format", fmt, _version] => {
                encoding = Some(match *fmt {
                    "ascii" => Encoding::Ascii,
                    "binary_little_endian" => Encoding::BinaryLittleEndian,
                    other => return Err(PlyError::Unsupported(format!("format {other}"))),
                })
            }
            ["comment", ..] | ["obj_info", ..] => {
                comments.push(line.splitn(2, ' ').nth(1).unwrap_or("").trim().to_string())
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| malformed(format!("bad element count `{count}`")))?,
                properties: Vec::new(),
            }),
            ["property", "list", count, item, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| malformed("property before any element"))?;
                el.properties.push(Property {
                    name: name.to_string(),
                    kind: PropertyKind::List {
                        count: ScalarType::parse(count)?,
                        item: ScalarType::parse(item)?,
                    },
                });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| malformed("property before any element"))?;
                el.properties.push(Property {
                    name: name.to_string(),
                    kind: PropertyKind::Scalar(ScalarType::parse(ty)?),
                });
            }
            _ => return Err(malformed(format!("unrecognized header line `{line}`"))),
        }
    }
    let encoding = encoding.ok_or_else(|| malformed("missing format line"))?;
    Ok((
        Header {
            encoding,
            comments,
            elements,
        },
        pos,
    ))
}

/// Parse a PLY file and return its vertex table.
pub fn read_vertices(bytes: &[u8]) -> Result<VertexTable, PlyError> {
    let (header, body_start) = parse_header(bytes)?;
    let vertex_idx = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| malformed("no vertex element"))?;
    let vertex = &header.elements[vertex_idx];
    let names = vertex
        .properties
        .iter()
        .filter(|p| matches!(p.kind, PropertyKind::Scalar(_)))
        .map(|p| p.name.clone())
        .collect();
    let types = vertex
        .properties
        .iter()
        .filter_map(|p| match p.kind {
            PropertyKind::Scalar(t) => Some(t),
            _ => None,
        })
        .collect();
    let body = &bytes[body_start..];
    let mut rows = Vec::with_capacity(vertex.count);
    match header.encoding {
        Encoding::Ascii => {
            let text =
                std::str::from_utf8(body).map_err(|_| malformed("ascii body is not UTF-8"))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for (ei, el) in header.elements.iter().enumerate() {
                for r in 0..el.count {
                    let line = lines.next().ok_or_else(|| {
                        malformed(format!("element `{}` truncated at row {r}", el.name))
                    })?;
                    let mut toks = line.split_whitespace();
                    let mut row = Vec::new();
                    for p in &el.properties {
                        let mut next = || -> Result<f64, PlyError> {
                            let tok = toks.next().ok_or_else(|| {
                                malformed(format!("row {r} of `{}` has too few values", el.name))
                            })?;
                            tok.parse::<f64>()
                                .map_err(|_| malformed(format!("bad number `{tok}` in row {r}")))
                        };
                        match p.kind {
                            PropertyKind::Scalar(_) => row.push(next()?),
                            PropertyKind::List { .. } => {
                                let n = next()? as usize;
                                for _ in 0..n {
                                    next()?;
                                }
                            }
                        }
                    }
                    if ei == vertex_idx {
                        rows.push(row);
                    }
                }
            }
        }
        Encoding::BinaryLittleEndian => {
            let mut pos = 0usize;
            let mut take = |n: usize| -> Result<&[u8], PlyError> {
                let s = body
                    .get(pos..pos + n)
                    .ok_or_else(|| malformed("binary body truncated"))?;
                pos += n;
                Ok(s)
            };
            for (ei, el) in header.elements.iter().enumerate() {
                for _ in 0..el.count {
                    let mut row = Vec::new();
                    for p in &el.properties {
                        match p.kind {
                            PropertyKind::Scalar(t) => row.push(t.read_le(take(t.size())?)),
                            PropertyKind::List { count, item } => {
                                let n = count.read_le(take(count.size())?) as usize;
                                take(n * item.size())?;
                            }
                        }
                    }
                    if ei == vertex_idx {
                        rows.push(row);
                    }
                }
            }
        }
    }
    Ok(VertexTable {
        header,
        names,
        types,
        rows,
    })
}

/// Write a vertex-only PLY file.
pub fn write_vertices(
    encoding: Encoding,
    comments: &[String],
    properties: &[(&str, ScalarType)],
    rows: &[Vec<f64>],
) -> Vec<u8> {
    let mut out = Vec::new();
    let fmt = match encoding {
        Encoding::Ascii => "ascii",
        Encoding::BinaryLittleEndian => "binary_little_endian",
    };
    let _ = writeln!(out, "ply\nformat {fmt} 1.0");
    for c in comments {
        let _ = writeln!(out, "comment {c}");
    }
    let _ = writeln!(out, "element vertex {}", rows.len());
    for (name, ty) in properties {
        let _ = writeln!(out, "property {} {name}", ty.name());
    }
    let _ = writeln!(out, "end_header");
    for row in rows {
        debug_assert_eq!(row.len(), properties.len());
        match encoding {
            Encoding::Ascii => {
                for (i, (v, (_, ty))) in row.iter().zip(properties).enumerate() {
                    if i > 0 {
                        out.push(b' ');
                    }
                    ty.write_ascii(*v, &mut out);
                }
                out.push(b'\n');
            }
            Encoding::BinaryLittleEndian => {
                for (v, (_, ty)) in row.iter().zip(properties) {
                    ty.write_le(*v, &mut out);
                }
            }
        }
    }
    out
}

/// Integer-typed columns must hold integral values.
pub fn integral(v: f64, ty: ScalarType) -> bool {
    !ty.is_integer() || v.fract() == 0.0
}
