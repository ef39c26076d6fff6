use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::LabeledSample;
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

pub const CYLINDER_RADIUS: f64 = 0.5;
pub const CYLINDER_HEIGHT: f64 = 1.0;
pub const TORUS_MAJOR: f64 = 0.5;
pub const TORUS_MINOR: f64 = 0.2;
/// Plane points with `max(|x|, |y|)` above this belong to the border part.
pub const PLANE_BORDER: f64 = 0.4;

/// Primitive shapes of the synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Plane,
    Torus,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [Self::Sphere, Self::Cube, Self::Cylinder, Self::Plane, Self::Torus];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Cube => "cube",
            Self::Cylinder => "cylinder",
            Self::Plane => "plane",
            Self::Torus => "torus",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown shape '{s}'")))
    }
}

fn sym<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>() - 0.5
}

/// One uniform surface point and its local part id (0 or 1).
fn surface_point<R: Rng + ?Sized>(kind: ShapeKind, rng: &mut R) -> (Point3, usize) {
    match kind {
        ShapeKind::Sphere => loop {
            let g: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let n = crate::geometry::norm(&g);
            if n > 1e-12 {
                let p = g.map(|v| v / n);
                break (p, usize::from(p[2] >= 0.0));
            }
        },
        ShapeKind::Cube => {
            let face = rng.random_range(0..6);
            let (axis, side) = (face / 2, if face % 2 == 0 { -0.5 } else { 0.5 });
            let mut p = [sym(rng), sym(rng), sym(rng)];
            p[axis] = side;
            (p, usize::from(axis == 2))
        }
        ShapeKind::Cylinder => {
            let (r, h) = (CYLINDER_RADIUS, CYLINDER_HEIGHT);
            let barrel = 2.0 * PI * r * h;
            let cap = PI * r * r;
            let u = rng.random::<f64>() * (barrel + 2.0 * cap);
            let theta = 2.0 * PI * rng.random::<f64>();
            if u < barrel {
                ([r * theta.cos(), r * theta.sin(), h * sym(rng)], 0)
            } else {
                let rho = r * rng.random::<f64>().sqrt();
                let z = if u < barrel + cap { -h / 2.0 } else { h / 2.0 };
                ([rho * theta.cos(), rho * theta.sin(), z], 1)
            }
        }
        ShapeKind::Plane => {
            let p = [sym(rng), sym(rng), 0.0];
            (p, usize::from(p[0].abs().max(p[1].abs()) > PLANE_BORDER))
        }
        ShapeKind::Torus => {
            let (big, small) = (TORUS_MAJOR, TORUS_MINOR);
            // Area density along the tube angle is proportional to the
            // distance from the axis.
            let theta = loop {
                let t = 2.0 * PI * rng.random::<f64>();
                if rng.random::<f64>() * (big + small) <= big + small * t.cos() {
                    break t;
                }
            };
            let phi = 2.0 * PI * rng.random::<f64>();
            let rho = big + small * theta.cos();
            (
                [rho * phi.cos(), rho * phi.sin(), small * theta.sin()],
                usize::from(theta.cos() > 0.0),
            )
        }
    }
}

/// Uniform samples on a unit-scale primitive with exact two-part labels,
/// plus optional Gaussian jitter of standard deviation `jitter`.
///
/// `shape_label` is the position of `kind` in [`ShapeKind::ALL`]; part
/// labels are local (0 or 1).
pub fn generate_synthetic<R: Rng + ?Sized>(
    kind: ShapeKind,
    n_points: usize,
    jitter: f64,
    rng: &mut R,
) -> Result<LabeledSample> {
    if n_points < 8 {
        return Err(Error::invalid("synthetic clouds need at least 8 points"));
    }
    if !jitter.is_finite() || jitter < 0.0 {
        return Err(Error::invalid("jitter must be finite and non-negative"));
    }
    let mut coords = Vec::with_capacity(n_points);
    let mut parts = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let (mut p, part) = surface_point(kind, rng);
        if jitter > 0.0 {
            for v in &mut p {
                let z: f64 = StandardNormal.sample(rng);
                *v += jitter * z;
            }
        }
        coords.push(p);
        parts.push(part);
    }
    Ok(LabeledSample {
        cloud: PointCloud::new(coords)?,
        shape_label: Some(kind as usize),
        part_labels: Some(parts),
    })
}

/// `per_class` normalized samples of each kind, labeled by position in
/// `kinds`. Part labels become `2 * class + local_part`.
pub fn synthetic_dataset<R: Rng + ?Sized>(
    kinds: &[ShapeKind],
    per_class: usize,
    n_points: usize,
    jitter: f64,
    rng: &mut R,
) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::with_capacity(kinds.len() * per_class);
    for _ in 0..per_class {
        for (c, &kind) in kinds.iter().enumerate() {
            let s = generate_synthetic(kind, n_points, jitter, rng)?;
            out.push(LabeledSample {
                cloud: crate::geometry::normalize_unit_sphere(&s.cloud),
                shape_label: Some(c),
                part_labels: s.part_labels.map(|p| p.into_iter().map(|l| 2 * c + l).collect()),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gen(kind: ShapeKind) -> LabeledSample {
        generate_synthetic(kind, 400, 0.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn sphere_on_unit_sphere() {
        let s = gen(ShapeKind::Sphere);
        assert!(s
            .cloud
            .coords()
            .iter()
            .all(|p| (crate::geometry::norm(p) - 1.0).abs() < 1e-12));
        let sigma = 0.01;
        let j = generate_synthetic(ShapeKind::Sphere, 400, sigma, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        // Radial error of isotropic noise is bounded well within 5 sigma here.
        assert!(j
            .cloud
            .coords()
            .iter()
            .all(|p| (crate::geometry::norm(p) - 1.0).abs() < 5.0 * sigma));
    }

    #[test]
    fn cube_points_on_faces() {
        let s = gen(ShapeKind::Cube);
        for p in s.cloud.coords() {
            assert!(p.iter().any(|v| v.abs() == 0.5));
            assert!(p.iter().all(|v| v.abs() <= 0.5));
        }
    }

    #[test]
    fn cylinder_cap_labels() {
        let s = gen(ShapeKind::Cylinder);
        let parts = s.part_labels.unwrap();
        for (p, &l) in s.cloud.coords().iter().zip(&parts) {
            if l == 1 {
                assert_eq!(p[2].abs(), CYLINDER_HEIGHT / 2.0);
            } else {
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                assert!((r - CYLINDER_RADIUS).abs() < 1e-12);
            }
        }
        assert!(parts.contains(&0) && parts.contains(&1));
    }

    #[test]
    fn torus_and_plane_geometry() {
        for p in gen(ShapeKind::Torus).cloud.coords() {
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let d = ((rho - TORUS_MAJOR).powi(2) + p[2] * p[2]).sqrt();
            assert!((d - TORUS_MINOR).abs() < 1e-12);
        }
        let plane = gen(ShapeKind::Plane);
        for (p, &l) in plane.cloud.coords().iter().zip(plane.part_labels.as_ref().unwrap()) {
            assert_eq!(p[2], 0.0);
            assert_eq!(l == 1, p[0].abs().max(p[1].abs()) > PLANE_BORDER);
        }
    }

    #[test]
    fn dataset_labels_and_determinism() {
        let kinds = [ShapeKind::Cube, ShapeKind::Plane];
        let a = synthetic_dataset(&kinds, 3, 16, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = synthetic_dataset(&kinds, 3, 16, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert_eq!(a[1].shape_label, Some(1));
        assert!(a[1].part_labels.as_ref().unwrap().iter().all(|&l| l == 2 || l == 3));
        assert!(generate_synthetic(ShapeKind::Cube, 7, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert_eq!("torus".parse::<ShapeKind>().unwrap(), ShapeKind::Torus);
    }
}
