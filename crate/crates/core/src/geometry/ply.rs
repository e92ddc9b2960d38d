//! Vertex-only PLY reading (ASCII and binary little-endian) and binary writing.

use std::io::{BufRead, Write};

use super::{GeometryError, PointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    F32,
    F64,
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::F32 | Scalar::I32 | Scalar::U32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Scalar::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b.try_into().unwrap()),
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::U16 => u16::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::I32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b.try_into().unwrap()) as f64,
        }
    }
}

fn next_line<R: BufRead>(r: &mut R, line_no: &mut usize) -> Result<(usize, String), GeometryError> {
    let mut s = String::new();
    *line_no += 1;
    if r.read_line(&mut s)? == 0 {
        return Err(perr(*line_no, "unexpected end of input"));
    }
    Ok((*line_no, s.trim_end().to_string()))
}

fn perr(line: usize, message: impl Into<String>) -> GeometryError {
    GeometryError::Parse { line, message: message.into() }
}

/// Reads the `x`, `y`, `z` vertex properties. Other elements must come after
/// the vertex element and are ignored.
pub fn read_ply<R: BufRead>(mut r: R) -> Result<PointCloud, GeometryError> {
    let mut line_no = 0usize;
    let (l, magic) = next_line(&mut r, &mut line_no)?;
    if magic != "ply" {
        return Err(perr(l, "missing `ply` magic"));
    }
    let mut format = None;
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        let (l, line) = next_line(&mut r, &mut line_no)?;
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "ascii", _] => format = Some(Format::Ascii),
            ["format", "binary_little_endian", _] => format = Some(Format::BinaryLe),
            ["format", other, _] => return Err(perr(l, format!("unsupported format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                if vertex_count.is_some() {
                    return Err(perr(l, "duplicate vertex element"));
                }
                vertex_count = Some(n.parse::<usize>().map_err(|_| perr(l, "bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => {
                if vertex_count.is_none() {
                    return Err(perr(l, "vertex element must come first"));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => return Err(perr(l, "list property on vertex")),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| perr(l, format!("unknown type `{ty}`")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(perr(l, format!("unexpected header line `{line}`"))),
        }
    }
    let format = format.ok_or_else(|| perr(line_no, "missing format line"))?;
    let n = vertex_count.ok_or_else(|| perr(line_no, "missing vertex element"))?;
    let col = |name: &str| props.iter().position(|(p, _)| p == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(perr(line_no, "vertex element lacks x, y or z")),
    };
    let mut points = Vec::with_capacity(n);
    match format {
        Format::Ascii => {
            for _ in 0..n {
                let (l, line) = next_line(&mut r, &mut line_no)?;
                let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
                let vals = vals.map_err(|_| perr(l, "bad vertex value"))?;
                if vals.len() < props.len() {
                    return Err(perr(l, "too few vertex values"));
                }
                points.push(Vec3::new(vals[ix], vals[iy], vals[iz]));
            }
        }
        Format::BinaryLe => {
            let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
            let offsets: Vec<usize> =
                props.iter().scan(0, |acc, (_, s)| { let o = *acc; *acc += s.size(); Some(o) }).collect();
            let mut buf = vec![0u8; stride];
            for i in 0..n {
                r.read_exact(&mut buf).map_err(|_| perr(line_no, format!("binary data ends at vertex {i}")))?;
                let get = |k: usize| props[k].1.decode(&buf[offsets[k]..offsets[k] + props[k].1.size()]);
                points.push(Vec3::new(get(ix), get(iy), get(iz)));
            }
        }
    }
    let cloud = PointCloud::new(points);
    if !cloud.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    Ok(cloud)
}

/// Writes a binary little-endian PLY with float32 `x y z` vertices.
pub fn write_ply_binary<W: Write>(mut w: W, cloud: &PointCloud) -> std::io::Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )?;
    let mut buf = Vec::with_capacity(cloud.len() * 12);
    for p in cloud.iter() {
        for v in [p.x, p.y, p.z] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)
}
