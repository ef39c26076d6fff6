//! Deterministic geometric primitives on point clouds.
//!
//! Everything here works in `f64` model coordinates. Distances are Euclidean;
//! neighbor and sampling routines compare squared distances, which orders
//! points identically. All ties resolve to the lowest point index.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn norm(a: &Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[inline]
pub fn dist_sq(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dist(a: &Point3, b: &Point3) -> f64 {
    dist_sq(a, b).sqrt()
}

/// A set of points with optional per-point extra features.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point3>,
    extras: Option<Array2<f64>>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point3>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("point cloud needs at least one point"));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point cloud contains NaN or infinite coordinates"));
        }
        Ok(Self { coords, extras: None })
    }

    pub fn with_extras(coords: Vec<Point3>, extras: Array2<f64>) -> Result<Self> {
        let mut pc = Self::new(coords)?;
        if extras.nrows() != pc.len() {
            return Err(Error::shape(format!(
                "extras has {} rows for {} points",
                extras.nrows(),
                pc.len()
            )));
        }
        pc.extras = Some(extras);
        Ok(pc)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> &Point3 {
        &self.coords[i]
    }

    pub fn extras(&self) -> Option<&Array2<f64>> {
        self.extras.as_ref()
    }

    pub fn centroid(&self) -> Point3 {
        let mut c = [0.0; 3];
        for p in &self.coords {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Reorders points so that output row `i` is input row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let coords = perm.iter().map(|&i| self.coords[i]).collect();
        let extras = self.extras.as_ref().map(|e| e.select(ndarray::Axis(0), perm));
        Self { coords, extras }
    }

    pub fn map_coords(&self, mut f: impl FnMut(&Point3) -> Point3) -> Self {
        Self {
            coords: self.coords.iter().map(&mut f).collect(),
            extras: self.extras.clone(),
        }
    }
}

/// Centers the cloud at the origin and scales it so the farthest point has norm 1.
///
/// A cloud whose points all coincide maps to the all-zero cloud.
pub fn normalize_unit_sphere(pc: &PointCloud) -> PointCloud {
    let c = pc.centroid();
    let centered: Vec<Point3> = pc.coords.iter().map(|p| sub(p, &c)).collect();
    let radius = centered.iter().map(norm).fold(0.0, f64::max);
    let coords = if radius > 0.0 {
        centered
            .iter()
            .map(|p| [p[0] / radius, p[1] / radius, p[2] / radius])
            .collect()
    } else {
        vec![[0.0; 3]; pc.len()]
    };
    PointCloud {
        coords,
        extras: pc.extras.clone(),
    }
}

/// Where farthest point sampling starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpsSeed {
    /// A fixed point index.
    Index(usize),
    /// The point farthest from the centroid. Unlike a fixed index this does
    /// not depend on point order, so FPS becomes permutation-equivariant.
    FarthestFromCentroid,
}

impl Default for FpsSeed {
    fn default() -> Self {
        FpsSeed::Index(0)
    }
}

impl FpsSeed {
    pub fn resolve(self, pc: &PointCloud) -> usize {
        match self {
            FpsSeed::Index(i) => i,
            FpsSeed::FarthestFromCentroid => {
                let c = pc.centroid();
                argmax_lowest(pc.coords.iter().map(|p| dist_sq(p, &c)))
            }
        }
    }
}

fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Greedy farthest point sampling starting at `seed_index`.
pub fn farthest_point_sampling(pc: &PointCloud, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("fps: need 1 <= m <= n, got m={m}, n={n}")));
    }
    if seed_index >= n {
        return Err(Error::invalid(format!(
            "fps: seed index {seed_index} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut chosen = vec![false; n];
    let mut current = seed_index;
    loop {
        selected.push(current);
        chosen[current] = true;
        if selected.len() == m {
            break;
        }
        let cp = pc.coords[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pc.coords.iter().enumerate() {
            let d = dist_sq(p, &cp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !chosen[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Indices of the `k` points closest to `query`, nearest first.
pub fn knn(pc: &PointCloud, query: &Point3, k: usize) -> Result<Vec<usize>> {
    knn_points(&pc.coords, query, k)
}

/// [`knn`] over a bare coordinate slice.
pub fn knn_points(points: &[Point3], query: &Point3, k: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("knn: need 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut keyed: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (dist_sq(p, query), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < n {
        keyed.select_nth_unstable_by(k - 1, cmp);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(cmp);
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// Training-time augmentation: per-axis scale, then shift, then jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub shift_range: f64,
    pub noise_sigma: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        scale_lo: 1.0,
        scale_hi: 1.0,
        shift_range: 0.0,
        noise_sigma: 0.0,
    };

    /// Classification recipe: scale in [0.66, 1.4], shift in [-0.2, 0.2], sigma 0.01.
    pub fn classification() -> Self {
        Self {
            scale_lo: 0.66,
            scale_hi: 1.4,
            shift_range: 0.2,
            noise_sigma: 0.01,
        }
    }

    /// Segmentation recipe: as classification but scale in [0.5, 2.0].
    pub fn segmentation() -> Self {
        Self {
            scale_lo: 0.5,
            scale_hi: 2.0,
            ..Self::classification()
        }
    }

    /// Test-time voting copies: anisotropic scaling only.
    pub fn scale_only(lo: f64, hi: f64) -> Self {
        Self {
            scale_lo: lo,
            scale_hi: hi,
            shift_range: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale_lo > 0.0
            && self.scale_lo <= self.scale_hi
            && self.shift_range >= 0.0
            && self.noise_sigma >= 0.0
            && [self.scale_lo, self.scale_hi, self.shift_range, self.noise_sigma]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid augmentation parameters {self:?}")))
        }
    }
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        Uniform::new_inclusive(lo, hi).expect("finite bounds").sample(rng)
    }
}

/// Applies random anisotropic scaling, translation and Gaussian jitter.
///
/// Draw order is fixed (3 scales, 3 shifts, then 3 noise values per point in
/// point order), so a seeded generator gives bit-identical results.
pub fn augment<R: Rng + ?Sized>(pc: &PointCloud, params: &AugmentParams, rng: &mut R) -> Result<PointCloud> {
    params.validate()?;
    let scale: [f64; 3] = std::array::from_fn(|_| uniform_in(rng, params.scale_lo, params.scale_hi));
    let shift: [f64; 3] = std::array::from_fn(|_| uniform_in(rng, -params.shift_range, params.shift_range));
    let noise =
        (params.noise_sigma > 0.0).then(|| Normal::new(0.0, params.noise_sigma).expect("sigma is finite and positive"));
    let coords = pc
        .coords
        .iter()
        .map(|p| {
            std::array::from_fn(|a| {
                let v = p[a] * scale[a] + shift[a];
                match &noise {
                    Some(dist) => v + dist.sample(rng),
                    None => v,
                }
            })
        })
        .collect();
    Ok(PointCloud {
        coords,
        extras: pc.extras.clone(),
    })
}
