use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

/// Triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::invalid(format!(
                "face {f:?} references a vertex beyond {}",
                vertices.len()
            )));
        }
        Ok(Self { vertices, faces })
    }

    pub fn triangle(&self, f: usize) -> [Point3; 3] {
        self.faces[f].map(|i| self.vertices[i])
    }

    pub fn triangle_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        let u = crate::geometry::sub(&b, &a);
        let v = crate::geometry::sub(&c, &a);
        let cross = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        0.5 * crate::geometry::norm(&cross)
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.triangle_area(f)).sum()
    }
}

/// Parses ASCII OFF text. Polygons are fan-triangulated.
///
/// Also accepts the `OFFv f e` header variant where the counts follow the
/// keyword on the same line.
pub fn parse_off(text: &str, path: &Path) -> Result<Mesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| err(hline, format!("expected 'OFF' header, found '{header}'")))?
        .trim();
    let (cline, counts) = if rest.is_empty() {
        lines
            .next()
            .ok_or_else(|| err(hline + 1, "missing counts line".into()))?
    } else {
        (hline, rest)
    };
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| err(cline, format!("bad count '{t}'"))))
        .collect::<Result<_>>()?;
    if counts.len() < 2 {
        return Err(err(cline, "counts line needs vertex and face counts".into()));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv);
    let mut last = cline;
    for _ in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| err(last + 1, format!("expected {nv} vertices, found {}", vertices.len())))?;
        last = ln;
        let v: Vec<f64> = l
            .split_whitespace()
            .take(3)
            .map(|t| t.parse().map_err(|_| err(ln, format!("bad coordinate '{t}'"))))
            .collect::<Result<_>>()?;
        if v.len() < 3 {
            return Err(err(ln, "vertex needs 3 coordinates".into()));
        }
        vertices.push([v[0], v[1], v[2]]);
    }

    let mut faces = Vec::with_capacity(nf);
    for f in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| err(last + 1, format!("expected {nf} faces, found {f}")))?;
        last = ln;
        let nums: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(ln, format!("bad index '{t}'"))))
            .collect::<Result<_>>()?;
        let (&deg, idx) = nums.split_first().ok_or_else(|| err(ln, "empty face".into()))?;
        if deg < 3 || idx.len() < deg {
            return Err(err(ln, format!("face declares {deg} vertices, has {}", idx.len())));
        }
        if let Some(&bad) = idx[..deg].iter().find(|&&i| i >= nv) {
            return Err(err(ln, format!("vertex index {bad} out of range")));
        }
        for t in 1..deg - 1 {
            faces.push([idx[0], idx[t], idx[t + 1]]);
        }
    }
    Ok(Mesh { vertices, faces })
}

pub fn load_off(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_off(&text, path)
}

/// Uniform surface samples: triangle by area, then
/// `(1 - sqrt(r1)) A + sqrt(r1) (1 - r2) B + sqrt(r1) r2 C`.
pub fn sample_mesh_uniform<R: Rng + ?Sized>(mesh: &Mesh, n_points: usize, rng: &mut R) -> Result<PointCloud> {
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.triangle_area(f);
        cumulative.push(total);
    }
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::invalid("mesh has zero surface area"));
    }
    if n_points == 0 {
        return Err(Error::invalid("n_points must be at least 1"));
    }
    let coords = (0..n_points)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            let f = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
            let [a, b, c] = mesh.triangle(f);
            let s = rng.random::<f64>().sqrt();
            let r2 = rng.random::<f64>();
            std::array::from_fn(|k| (1.0 - s) * a[k] + s * (1.0 - r2) * b[k] + s * r2 * c[k])
        })
        .collect();
    PointCloud::new(coords)
}
