//! Inverse-distance-weighted feature propagation from centers to points.

use crate::error::{Error, Result};
use crate::geometry::{dist_sq, knn_points, Point3};

/// Targets closer than this to a center take that center's feature.
pub const COINCIDENT_DIST: f64 = 1e-10;

/// Normalized weights of the nearest centers, written relative to the
/// nearest one: `f = f[anchor] + sum w_i (f[i] - f[anchor])`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdwWeights {
    pub anchor: usize,
    pub others: Vec<(usize, f64)>,
}

/// Weights `1 / d^2` over the `k` nearest centers (fewer if there are
/// fewer centers), normalized to sum to one.
pub fn idw_weights(target: &Point3, centers: &[Point3], k: usize) -> Result<IdwWeights> {
    if centers.is_empty() {
        return Err(Error::invalid("interpolation needs at least one center"));
    }
    if k == 0 {
        return Err(Error::invalid("interpolation needs k >= 1"));
    }
    let nearest = knn_points(centers, target, k.min(centers.len()))?;
    let anchor = nearest[0];
    let d0 = dist_sq(&centers[anchor], target);
    if d0 < COINCIDENT_DIST * COINCIDENT_DIST {
        return Ok(IdwWeights {
            anchor,
            others: Vec::new(),
        });
    }
    let w: Vec<f64> = nearest.iter().map(|&i| 1.0 / dist_sq(&centers[i], target)).collect();
    let total: f64 = w.iter().sum();
    Ok(IdwWeights {
        anchor,
        others: nearest[1..]
            .iter()
            .zip(&w[1..])
            .map(|(&i, &wi)| (i, wi / total))
            .collect(),
    })
}

/// Interpolates per-center feature vectors at `target`.
pub fn idw_interpolate(target: &Point3, centers: &[Point3], center_feats: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
    if center_feats.len() != centers.len() {
        return Err(Error::shape(format!(
            "{} feature rows for {} centers",
            center_feats.len(),
            centers.len()
        )));
    }
    let w = idw_weights(target, centers, k)?;
    let base = &center_feats[w.anchor];
    let mut out = base.clone();
    for &(i, wi) in &w.others {
        let f = &center_feats[i];
        if f.len() != base.len() {
            return Err(Error::shape("center features differ in width"));
        }
        for (o, (&v, &b)) in out.iter_mut().zip(f.iter().zip(base)) {
            *o += wi * (v - b);
        }
    }
    Ok(out)
}
