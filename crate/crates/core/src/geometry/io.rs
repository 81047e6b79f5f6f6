use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::seed;

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        msg: msg.into(),
    }
}

/// Parses `x y z [part]` lines. Blank lines and `#` comments are skipped.
/// Part labels must be present on every line or on none.
pub fn parse_xyz(text: &str, origin: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut parts: Vec<u32> = Vec::new();
    let mut with_parts = None;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(parse_err(
                origin,
                lineno,
                format!("expected 3 or 4 fields, found {}", fields.len()),
            ));
        }
        let has = fields.len() == 4;
        if *with_parts.get_or_insert(has) != has {
            return Err(parse_err(
                origin,
                lineno,
                "part labels must appear on every line or none",
            ));
        }
        let mut p: Point = [0.0; 3];
        for k in 0..3 {
            p[k] = fields[k].parse::<f64>().map_err(|e| {
                parse_err(
                    origin,
                    lineno,
                    format!("bad coordinate {:?}: {e}", fields[k]),
                )
            })?;
            if !p[k].is_finite() {
                return Err(parse_err(origin, lineno, "non-finite coordinate"));
            }
        }
        if has {
            parts.push(fields[3].parse::<u32>().map_err(|e| {
                parse_err(
                    origin,
                    lineno,
                    format!("bad part label {:?}: {e}", fields[3]),
                )
            })?);
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::EmptyInput("xyz file"));
    }
    PointCloud::with_labels(points, None, with_parts.unwrap_or(false).then_some(parts))
}

pub fn load_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    parse_xyz(&fs::read_to_string(path)?, &path.display().to_string())
}

/// One line per point with 17 significant digits, so values round-trip
/// exactly. `parts` overrides the cloud's own part labels when given.
pub fn write_xyz(pc: &PointCloud, parts: Option<&[u32]>) -> Result<String> {
    let parts = parts.or(pc.part_labels.as_deref());
    if let Some(parts) = parts {
        if parts.len() != pc.len() {
            return Err(Error::Dimension {
                op: "write_xyz",
                left: vec![pc.len()],
                right: vec![parts.len()],
            });
        }
    }
    let mut out = String::with_capacity(pc.len() * 72);
    for (i, p) in pc.points.iter().enumerate() {
        write!(out, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]).expect("write to String");
        if let Some(parts) = parts {
            write!(out, " {}", parts[i]).expect("write to String");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn save_xyz(path: impl AsRef<Path>, pc: &PointCloud, parts: Option<&[u32]>) -> Result<()> {
    fs::write(path, write_xyz(pc, parts)?)?;
    Ok(())
}

/// Triangle soup parsed from an ASCII OFF file.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
}

/// Parses an ASCII OFF mesh. Polygonal faces are fan-triangulated. Also
/// accepts the header glued to the counts (`OFF490 518 0`), as found in
/// some ModelNet files.
pub fn parse_off(text: &str, origin: &str) -> Result<Mesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines.next().ok_or(Error::EmptyInput("off file"))?;
    let rest = header.strip_prefix("OFF").ok_or_else(|| {
        parse_err(
            origin,
            hline,
            format!("expected OFF header, found {header:?}"),
        )
    })?;
    let counts_text;
    let counts_line;
    if rest.trim().is_empty() {
        let (l, t) = lines
            .next()
            .ok_or_else(|| parse_err(origin, hline, "missing vertex/face counts"))?;
        counts_line = l;
        counts_text = t;
    } else {
        counts_line = hline;
        counts_text = rest.trim();
    }
    let counts: Vec<usize> = counts_text
        .split_whitespace()
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(origin, counts_line, format!("bad counts: {e}")))?;
    if counts.len() < 2 {
        return Err(parse_err(
            origin,
            counts_line,
            "expected vertex and face counts",
        ));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (l, t) = lines
            .next()
            .ok_or_else(|| parse_err(origin, counts_line, format!("expected {nv} vertices")))?;
        let v: Vec<f64> = t
            .split_whitespace()
            .take(3)
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(origin, l, format!("bad vertex: {e}")))?;
        if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(
                origin,
                l,
                "vertex needs three finite coordinates",
            ));
        }
        vertices.push([v[0], v[1], v[2]]);
    }

    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (l, t) = lines
            .next()
            .ok_or_else(|| parse_err(origin, counts_line, format!("expected {nf} faces")))?;
        let f: Vec<usize> = t
            .split_whitespace()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(origin, l, format!("bad face: {e}")))?;
        let k = *f
            .first()
            .ok_or_else(|| parse_err(origin, l, "empty face"))?;
        if k < 3 || f.len() < k + 1 {
            return Err(parse_err(
                origin,
                l,
                format!("face needs at least 3 of {k} indices"),
            ));
        }
        let idx = &f[1..=k];
        if let Some(bad) = idx.iter().find(|&&i| i >= nv) {
            return Err(parse_err(
                origin,
                l,
                format!("vertex index {bad} out of range"),
            ));
        }
        for j in 1..k - 1 {
            triangles.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok(Mesh {
        vertices,
        triangles,
    })
}

fn triangle_area(a: &Point, b: &Point, c: &Point) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let x = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    0.5 * super::norm(&x)
}

impl Mesh {
    /// `n` points uniformly distributed over the surface: faces are chosen
    /// in proportion to area, then a uniform point within the face.
    pub fn sample(&self, n: usize, seed: u64) -> Result<PointCloud> {
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in &self.triangles {
            total += triangle_area(
                &self.vertices[t[0]],
                &self.vertices[t[1]],
                &self.vertices[t[2]],
            );
            cumulative.push(total);
        }
        if !(total > 0.0) {
            return Err(Error::DegenerateCloud);
        }
        let mut rng = seed::rng(seed);
        let points = (0..n)
            .map(|_| {
                let r = rng.random::<f64>() * total;
                let f = cumulative
                    .partition_point(|&c| c <= r)
                    .min(cumulative.len() - 1);
                let [a, b, c] = self.triangles[f].map(|i| self.vertices[i]);
                let (mut s, mut t): (f64, f64) = (rng.random(), rng.random());
                if s + t > 1.0 {
                    (s, t) = (1.0 - s, 1.0 - t);
                }
                std::array::from_fn(|k| a[k] + s * (b[k] - a[k]) + t * (c[k] - a[k]))
            })
            .collect();
        PointCloud::new(points)
    }
}

/// Loads an OFF mesh and samples `n` surface points from it.
pub fn load_off(path: impl AsRef<Path>, n: usize, seed: u64) -> Result<PointCloud> {
    let path = path.as_ref();
    parse_off(&fs::read_to_string(path)?, &path.display().to_string())?.sample(n, seed)
}
