use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Point3;

use super::PointCloud;
use crate::{Error, Result};

/// On-disk cloud formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    /// ASCII PLY 1.0 with `x y z red green blue [semantic instance]`.
    PlyAscii,
    /// Whitespace-separated `x y z r g b [sem inst]`, one point per line.
    XyzlText,
}

impl CloudFormat {
    /// `.ply` files are PLY; everything else is treated as xyzl text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("ply") => CloudFormat::PlyAscii,
            _ => CloudFormat::XyzlText,
        }
    }
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("cloud")
        .to_string()
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = stem_of(path);
    match format {
        CloudFormat::XyzlText => parse_xyzl(&text, &id),
        CloudFormat::PlyAscii => parse_ply(&text, &id),
    }
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let text = match format {
        CloudFormat::XyzlText => write_xyzl(cloud),
        CloudFormat::PlyAscii => write_ply(cloud),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_f64(tok: &str, line: usize, what: &str) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} '{tok}'"),
    })
}

fn parse_i32(tok: &str, line: usize, what: &str) -> Result<i32> {
    tok.parse::<i32>().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} '{tok}'"),
    })
}

/// Parses xyzl text. Line numbers in errors are 1-based.
pub fn parse_xyzl(text: &str, source_id: &str) -> Result<PointCloud> {
    let mut coords = Vec::new();
    let mut colors = Vec::new();
    let mut sem = Vec::new();
    let mut inst = Vec::new();
    let mut columns: Option<usize> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() != 6 && toks.len() != 8 {
            return Err(Error::Parse {
                line,
                message: format!("expected 6 or 8 fields, found {}", toks.len()),
            });
        }
        match columns {
            None => columns = Some(toks.len()),
            Some(c) if c != toks.len() => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {c} fields like previous lines, found {}", toks.len()),
                })
            }
            _ => {}
        }
        let x = parse_f64(toks[0], line, "x")?;
        let y = parse_f64(toks[1], line, "y")?;
        let z = parse_f64(toks[2], line, "z")?;
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::Parse {
                line,
                message: "non-finite coordinate".into(),
            });
        }
        coords.push(Point3::new(x, y, z));
        let mut rgb = [0.0; 3];
        for (c, tok) in rgb.iter_mut().zip(&toks[3..6]) {
            *c = parse_f64(tok, line, "color")?;
            if !(0.0..=1.0).contains(c) {
                return Err(Error::Parse {
                    line,
                    message: format!("color channel {c} outside [0,1]"),
                });
            }
        }
        colors.push(rgb);
        if toks.len() == 8 {
            sem.push(parse_i32(toks[6], line, "semantic label")?);
            inst.push(parse_i32(toks[7], line, "instance label")?);
        }
    }
    if coords.is_empty() {
        return Err(Error::EmptyInput(format!("'{source_id}' contains no points")));
    }
    let labeled = columns == Some(8);
    PointCloud::new(
        coords,
        colors,
        labeled.then_some(sem),
        labeled.then_some(inst),
        source_id,
    )
}

/// Serializes a cloud to xyzl text. Clouds with any labels get 8 columns;
/// a missing label array is written as `-1`.
pub fn write_xyzl(cloud: &PointCloud) -> String {
    let labeled = cloud.semantic().is_some() || cloud.instance().is_some();
    let mut out = String::with_capacity(cloud.len() * 64);
    let _ = writeln!(out, "# {} points, source {}", cloud.len(), cloud.source_id());
    for i in 0..cloud.len() {
        let p = cloud.coords()[i];
        let c = cloud.colors()[i];
        let _ = write!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, c[0], c[1], c[2]);
        if labeled {
            let s = cloud.semantic().map_or(-1, |v| v[i]);
            let t = cloud.instance().map_or(-1, |v| v[i]);
            let _ = write!(out, " {s} {t}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum PlyScalar {
    Float,
    Int,
    UChar,
}

/// Parses ASCII PLY; only the `vertex` element is read.
pub fn parse_ply(text: &str, source_id: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "missing 'ply' magic".into(),
            })
        }
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, PlyScalar)> = Vec::new();
    let mut header_done = false;
    for (line, l) in lines.by_ref() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(Error::Parse {
                    line,
                    message: format!("unsupported PLY format '{other}'"),
                })
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(count.parse().map_err(|_| Error::Parse {
                        line,
                        message: format!("invalid vertex count '{count}'"),
                    })?);
                }
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(Error::Parse {
                        line,
                        message: "list properties on vertices are not supported".into(),
                    });
                }
            }
            ["property", ty, name] => {
                if in_vertex {
                    let scalar = match *ty {
                        "float" | "float32" | "double" | "float64" => PlyScalar::Float,
                        "uchar" | "uint8" => PlyScalar::UChar,
                        "char" | "int8" | "short" | "int16" | "ushort" | "uint16" | "int" | "int32"
                        | "uint" | "uint32" => PlyScalar::Int,
                        other => {
                            return Err(Error::Parse {
                                line,
                                message: format!("unknown property type '{other}'"),
                            })
                        }
                    };
                    props.push((name.to_string(), scalar));
                }
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            [] => {}
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("unexpected header line '{l}'"),
                })
            }
        }
    }
    if !header_done {
        return Err(Error::Parse {
            line: text.lines().count(),
            message: "missing end_header".into(),
        });
    }
    let count = vertex_count.ok_or_else(|| Error::Parse {
        line: 1,
        message: "no vertex element".into(),
    })?;
    if count == 0 {
        return Err(Error::EmptyInput(format!("'{source_id}' contains no points")));
    }
    let col = |name: &str| props.iter().position(|(n, _)| n == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "vertex element lacks x/y/z".into(),
            })
        }
    };
    let rgb = match (col("red"), col("green"), col("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let isem = col("semantic");
    let iinst = col("instance");

    let mut coords = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    let mut sem = Vec::new();
    let mut inst = Vec::new();
    for _ in 0..count {
        let (line, l) = lines.next().ok_or_else(|| Error::Parse {
            line: text.lines().count(),
            message: format!("expected {count} vertices, file ended early"),
        })?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != props.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} values, found {}", props.len(), toks.len()),
            });
        }
        let p = Point3::new(
            parse_f64(toks[ix], line, "x")?,
            parse_f64(toks[iy], line, "y")?,
            parse_f64(toks[iz], line, "z")?,
        );
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(Error::Parse {
                line,
                message: "non-finite coordinate".into(),
            });
        }
        coords.push(p);
        let color = match rgb {
            Some(cols) => {
                let mut c = [0.0; 3];
                for (k, &ci) in cols.iter().enumerate() {
                    let v = parse_f64(toks[ci], line, "color")?;
                    c[k] = match props[ci].1 {
                        PlyScalar::UChar | PlyScalar::Int => v / 255.0,
                        PlyScalar::Float => v,
                    };
                    if !(0.0..=1.0).contains(&c[k]) {
                        return Err(Error::Parse {
                            line,
                            message: format!("color value {v} out of range"),
                        });
                    }
                }
                c
            }
            None => [0.5; 3],
        };
        colors.push(color);
        if let Some(i) = isem {
            sem.push(parse_i32(toks[i], line, "semantic label")?);
        }
        if let Some(i) = iinst {
            inst.push(parse_i32(toks[i], line, "instance label")?);
        }
    }
    PointCloud::new(
        coords,
        colors,
        isem.map(|_| sem),
        iinst.map(|_| inst),
        source_id,
    )
}

/// Serializes to ASCII PLY. Colors are quantized to `uchar`.
pub fn write_ply(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 64 + 256);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "comment source {}", cloud.source_id());
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    if cloud.semantic().is_some() {
        out.push_str("property int semantic\n");
    }
    if cloud.instance().is_some() {
        out.push_str("property int instance\n");
    }
    out.push_str("end_header\n");
    for i in 0..cloud.len() {
        let p = cloud.coords()[i];
        let c = cloud.colors()[i].map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
        let _ = write!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, c[0], c[1], c[2]);
        if let Some(s) = cloud.semantic() {
            let _ = write!(out, " {}", s[i]);
        }
        if let Some(t) = cloud.instance() {
            let _ = write!(out, " {}", t[i]);
        }
        out.push('\n');
    }
    out
}
