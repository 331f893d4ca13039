//! Colored point-cloud files: PLY (ASCII or binary) and raw float buffers with a JSON sidecar.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::encode::ColoredPointCloud;
use crate::error::{CoreError, Result};

fn parse_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Parse(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
    BinaryBigEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PropType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PropType {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => PropType::I8,
            "uchar" | "uint8" => PropType::U8,
            "short" | "int16" => PropType::I16,
            "ushort" | "uint16" => PropType::U16,
            "int" | "int32" => PropType::I32,
            "uint" | "uint32" => PropType::U32,
            "float" | "float32" => PropType::F32,
            "double" | "float64" => PropType::F64,
            other => return parse_err(format!("unknown PLY property type '{other}'")),
        })
    }

    fn size(self) -> usize {
        match self {
            PropType::I8 | PropType::U8 => 1,
            PropType::I16 | PropType::U16 => 2,
            PropType::I32 | PropType::U32 | PropType::F32 => 4,
            PropType::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], little: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(&b[..$n]);
                (if little { <$t>::from_le_bytes(a) } else { <$t>::from_be_bytes(a) }) as f64
            }};
        }
        match self {
            PropType::I8 => b[0] as i8 as f64,
            PropType::U8 => b[0] as f64,
            PropType::I16 => num!(i16, 2),
            PropType::U16 => num!(u16, 2),
            PropType::I32 => num!(i32, 4),
            PropType::U32 => num!(u32, 4),
            PropType::F32 => num!(f32, 4),
            PropType::F64 => num!(f64, 8),
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, PropType::F32 | PropType::F64)
    }
}

#[derive(Debug)]
struct VertexLayout {
    count: usize,
    props: Vec<(String, PropType)>,
}

impl VertexLayout {
    fn index(&self, names: &[&str]) -> Option<usize> {
        self.props.iter().position(|(n, _)| names.contains(&n.as_str()))
    }

    fn record(&self, values: &[f64], columns: &Columns) -> ([f64; 3], [f64; 3]) {
        let p = columns.xyz.map(|i| values[i]);
        let c = match columns.rgb {
            Some(idx) => idx.map(|i| {
                let v = values[i];
                if self.props[i].1.is_integer() {
                    v / 255.0
                } else {
                    v
                }
            }),
            None => [1.0; 3],
        };
        (p, c)
    }
}

struct Columns {
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
}

/// Reads the vertex element of a PLY stream. Colors stored as integers are
/// divided by 255; clouds without colors are white.
pub fn read_ply(reader: impl Read) -> Result<ColoredPointCloud> {
    let mut r = BufReader::new(reader);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != "ply" {
        return parse_err("missing 'ply' magic");
    }
    let mut format = None;
    let mut vertex: Option<VertexLayout> = None;
    let mut in_vertex = false;
    let mut seen_other_before_vertex = false;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return parse_err("unexpected end of PLY header");
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    "binary_big_endian" => PlyFormat::BinaryBigEndian,
                    other => return parse_err(format!("unknown PLY format '{other}'")),
                })
            }
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    let count = n.parse().map_err(|_| CoreError::Parse(format!("bad vertex count '{n}'")))?;
                    vertex = Some(VertexLayout { count, props: vec![] });
                } else if vertex.is_none() {
                    seen_other_before_vertex = true;
                }
            }
            ["property", "list", ..] if in_vertex => return parse_err("list properties on vertices are not supported"),
            ["property", ty, name] if in_vertex => {
                let v = vertex.as_mut().expect("vertex element open");
                v.props.push((name.to_string(), PropType::parse(ty)?));
            }
            [] | ["comment", ..] | ["obj_info", ..] | ["property", ..] => {}
            _ => return parse_err(format!("unexpected PLY header line '{}'", line.trim())),
        }
    }
    let format = format.ok_or_else(|| CoreError::Parse("PLY header has no format line".into()))?;
    let layout = vertex.ok_or_else(|| CoreError::Parse("PLY has no vertex element".into()))?;
    if seen_other_before_vertex {
        return parse_err("elements before 'vertex' are not supported");
    }
    let find = |names: &[&str]| layout.index(names);
    let xyz = match (find(&["x"]), find(&["y"]), find(&["z"])) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return parse_err("PLY vertices need x, y and z"),
    };
    let rgb = match (
        find(&["red", "r", "diffuse_red"]),
        find(&["green", "g", "diffuse_green"]),
        find(&["blue", "b", "diffuse_blue"]),
    ) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let columns = Columns { xyz, rgb };
    let mut points = Vec::with_capacity(layout.count);
    let mut colors = Vec::with_capacity(layout.count);
    match format {
        PlyFormat::Ascii => {
            for k in 0..layout.count {
                line.clear();
                if r.read_line(&mut line)? == 0 {
                    return parse_err(format!("PLY ends after {k} of {} vertices", layout.count));
                }
                let values: Vec<f64> = line
                    .split_whitespace()
                    .map(|w| w.parse::<f64>().map_err(|_| CoreError::Parse(format!("bad number '{w}'"))))
                    .collect::<Result<_>>()?;
                if values.len() < layout.props.len() {
                    return parse_err(format!("vertex {k} has {} values", values.len()));
                }
                let (p, c) = layout.record(&values, &columns);
                points.push(p);
                colors.push(c);
            }
        }
        PlyFormat::BinaryLittleEndian | PlyFormat::BinaryBigEndian => {
            let little = format == PlyFormat::BinaryLittleEndian;
            let stride: usize = layout.props.iter().map(|(_, t)| t.size()).sum();
            let mut buf = vec![0u8; stride];
            let mut values = vec![0.0; layout.props.len()];
            for _ in 0..layout.count {
                r.read_exact(&mut buf)?;
                let mut off = 0;
                for (v, (_, t)) in values.iter_mut().zip(&layout.props) {
                    *v = t.decode(&buf[off..], little);
                    off += t.size();
                }
                let (p, c) = layout.record(&values, &columns);
                points.push(p);
                colors.push(c);
            }
        }
    }
    ColoredPointCloud::new(points, colors)
}

/// Writes `float x y z` and `uchar red green blue` vertices.
pub fn write_ply(cloud: &ColoredPointCloud, mut w: impl Write, format: PlyFormat) -> Result<()> {
    let name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
        PlyFormat::BinaryBigEndian => "binary_big_endian",
    };
    writeln!(w, "ply\nformat {name} 1.0\nelement vertex {}", cloud.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header")?;
    let byte = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        let c = c.map(byte);
        match format {
            PlyFormat::Ascii => writeln!(w, "{} {} {} {} {} {}", p[0] as f32, p[1] as f32, p[2] as f32, c[0], c[1], c[2])?,
            PlyFormat::BinaryLittleEndian => {
                for v in p {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
                w.write_all(&c)?;
            }
            PlyFormat::BinaryBigEndian => {
                for v in p {
                    w.write_all(&(*v as f32).to_be_bytes())?;
                }
                w.write_all(&c)?;
            }
        }
    }
    Ok(())
}

/// Sidecar header of a raw float file.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RawHeader {
    /// `[N, 3]` (positions only) or `[N, 6]` (positions and RGB in `[0, 1]`).
    pub shape: Vec<usize>,
    /// `"f32"` or `"f64"`, little-endian.
    pub dtype: String,
}

/// `cloud.bin` → `cloud.bin.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_raw(path: &Path) -> Result<ColoredPointCloud> {
    let side = sidecar_path(path);
    let header: RawHeader = serde_json::from_str(&fs::read_to_string(&side)?)
        .map_err(|e| CoreError::Parse(format!("{}: {e}", side.display())))?;
    let (n, cols) = match header.shape.as_slice() {
        [n, c] if *c == 3 || *c == 6 => (*n, *c),
        s => return parse_err(format!("raw point shape {s:?} is not [N, 3] or [N, 6]")),
    };
    let bytes = fs::read(path)?;
    let size = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        d => return parse_err(format!("unsupported raw dtype '{d}'")),
    };
    if bytes.len() != n * cols * size {
        return parse_err(format!("{} holds {} bytes, header expects {}", path.display(), bytes.len(), n * cols * size));
    }
    let ty = if size == 4 { PropType::F32 } else { PropType::F64 };
    let vals: Vec<f64> = bytes.chunks_exact(size).map(|b| ty.decode(b, true)).collect();
    let points = vals.chunks_exact(cols).map(|r| [r[0], r[1], r[2]]).collect();
    let colors = vals
        .chunks_exact(cols)
        .map(|r| if cols == 6 { [r[3], r[4], r[5]] } else { [1.0; 3] })
        .collect();
    ColoredPointCloud::new(points, colors)
}

/// Writes `[N, 6]` little-endian `f32` rows and the sidecar header.
pub fn write_raw(cloud: &ColoredPointCloud, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.len() * 24);
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        for v in p.iter().chain(c) {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    let header = RawHeader {
        shape: vec![cloud.len(), 6],
        dtype: "f32".into(),
    };
    let json = serde_json::to_string_pretty(&header).map_err(|e| CoreError::Parse(e.to_string()))?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// PLY by extension, otherwise a raw buffer with its sidecar.
pub fn load_point_cloud(path: &Path) -> Result<ColoredPointCloud> {
    let is_ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        read_ply(fs::File::open(path)?)
    } else {
        read_raw(path)
    }
}
