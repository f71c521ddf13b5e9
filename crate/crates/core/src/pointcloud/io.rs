//! XYZ and PLY readers and writers.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    PlyAscii,
    PlyBinary,
}

impl CloudFormat {
    /// Picks a format from the file extension; `.ply` defaults to binary.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
            Some(e) if e == "xyz" || e == "txt" => Ok(CloudFormat::Xyz),
            Some(e) if e == "ply" => Ok(CloudFormat::PlyBinary),
            _ => Err(Error::Argument(format!(
                "cannot infer point-cloud format from '{}'",
                path.display()
            ))),
        }
    }
}

/// Loads a cloud. For either PLY variant the encoding is read from the header.
pub fn load(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let points = match format {
        CloudFormat::Xyz => parse_xyz(&String::from_utf8_lossy(&bytes))?,
        CloudFormat::PlyAscii | CloudFormat::PlyBinary => parse_ply(&bytes)?,
    };
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    let mut pc = PointCloud::new(points)?;
    pc.name = name;
    Ok(pc)
}

pub fn save(pc: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let mut out: Vec<u8> = Vec::with_capacity(pc.len() * 40 + 128);
    match format {
        CloudFormat::Xyz => {
            for p in pc.points() {
                writeln!(out, "{} {} {}", p[0], p[1], p[2]).expect("vec write");
            }
        }
        CloudFormat::PlyAscii => {
            out.extend(ply_header("ascii", pc.len()).as_bytes());
            for p in pc.points() {
                writeln!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32).expect("vec write");
            }
        }
        CloudFormat::PlyBinary => {
            out.extend(ply_header("binary_little_endian", pc.len()).as_bytes());
            for v in pc.points().iter().flatten() {
                out.extend((*v as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn ply_header(encoding: &str, n: usize) -> String {
    format!(
        "ply\nformat {encoding} 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
    )
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_xyz(text: &str) -> Result<Vec<[f64; 3]>> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        points.push(parse_triple(line, i + 1)?);
    }
    Ok(points)
}

fn parse_triple(line: &str, lineno: usize) -> Result<[f64; 3]> {
    let mut fields = line.split_whitespace();
    let mut p = [0.0; 3];
    for v in p.iter_mut() {
        let tok = fields
            .next()
            .ok_or_else(|| parse_err(lineno, "expected three coordinates"))?;
        *v = tok
            .parse::<f64>()
            .map_err(|_| parse_err(lineno, format!("not a number: '{tok}'")))?;
        if !v.is_finite() {
            return Err(parse_err(lineno, format!("non-finite coordinate '{tok}'")));
        }
    }
    Ok(p)
}

#[derive(PartialEq)]
enum Encoding {
    Ascii,
    Binary,
}

fn parse_ply(bytes: &[u8]) -> Result<Vec<[f64; 3]>> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Option<String> {
        if *pos >= bytes.len() {
            return None;
        }
        let end = bytes[*pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|o| *pos + o)
            .unwrap_or(bytes.len());
        let line = String::from_utf8_lossy(&bytes[*pos..end]).trim_end_matches('\r').to_string();
        *pos = (end + 1).min(bytes.len());
        Some(line)
    };

    let mut line_no = 1;
    match next_line(&mut pos) {
        Some(l) if l.trim() == "ply" => {}
        _ => return Err(parse_err(1, "missing 'ply' magic")),
    }
    let mut encoding = None;
    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    loop {
        line_no += 1;
        let line = next_line(&mut pos).ok_or_else(|| parse_err(line_no, "header ended before end_header"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", enc, "1.0"] => {
                encoding = Some(match *enc {
                    "ascii" => Encoding::Ascii,
                    "binary_little_endian" => Encoding::Binary,
                    other => return Err(parse_err(line_no, format!("unsupported format '{other}'"))),
                });
            }
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(parse_err(line_no, "duplicate vertex element"));
                }
                count = Some(n.parse().map_err(|_| parse_err(line_no, format!("bad vertex count '{n}'")))?);
            }
            ["element", other, ..] => {
                return Err(parse_err(line_no, format!("unsupported element '{other}'")));
            }
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(parse_err(line_no, "property before element"));
                }
                if !matches!(*ty, "float" | "float32") {
                    return Err(parse_err(line_no, format!("unsupported property type '{ty}'")));
                }
                props.push(name.to_string());
            }
            ["end_header"] => break,
            _ => return Err(parse_err(line_no, format!("unexpected header line '{line}'"))),
        }
    }
    let encoding = encoding.ok_or_else(|| parse_err(line_no, "missing format line"))?;
    let n = count.ok_or_else(|| parse_err(line_no, "missing 'element vertex'"))?;
    if props != ["x", "y", "z"] {
        return Err(parse_err(
            line_no,
            format!("expected float properties x y z, got {props:?}"),
        ));
    }

    let mut points = Vec::with_capacity(n);
    match encoding {
        Encoding::Binary => {
            let payload = &bytes[pos..];
            if payload.len() < 12 * n {
                return Err(parse_err(
                    line_no,
                    format!("binary payload has {} bytes, need {}", payload.len(), 12 * n),
                ));
            }
            for (i, c) in payload[..12 * n].chunks_exact(12).enumerate() {
                let f = |k: usize| f32::from_le_bytes([c[4 * k], c[4 * k + 1], c[4 * k + 2], c[4 * k + 3]]) as f64;
                let p = [f(0), f(1), f(2)];
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(parse_err(line_no, format!("non-finite vertex {i}")));
                }
                points.push(p);
            }
        }
        Encoding::Ascii => {
            while points.len() < n {
                line_no += 1;
                let line = next_line(&mut pos)
                    .ok_or_else(|| parse_err(line_no, format!("expected {n} vertices, found {}", points.len())))?;
                if line.trim().is_empty() {
                    continue;
                }
                let toks = line.split_whitespace().count();
                if toks != 3 {
                    return Err(parse_err(line_no, format!("expected 3 values, got {toks}")));
                }
                points.push(parse_triple(&line, line_no)?);
            }
        }
    }
    Ok(points)
}
