//! Local areas around center points, their metric features, and the
//! encoders that turn them into area features and the second global feature.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::RngCore;

use crate::autodiff::{BnUpdate, BoundLayer, MlpStack, Mode, NodeId, Real, Tape};
use crate::error::{Error, Result};
use crate::geometry::{dist, knn, norm, sub, Point3, PointCloud};

/// The `k` nearest neighbors of one center, in center-relative coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalArea {
    /// Position of the center in the center list.
    pub center_index: usize,
    pub neighbor_indices: Vec<usize>,
    pub rel_coords: Vec<Point3>,
    pub metric_feats: Option<Vec<[f64; 3]>>,
}

impl LocalArea {
    pub fn k(&self) -> usize {
        self.neighbor_indices.len()
    }
}

/// One area per center (duplicates included), neighbors found by kNN on
/// the original coordinates. Metric features are filled in.
pub fn build_local_areas(pc: &PointCloud, centers: &[Point3], k: usize) -> Result<Vec<LocalArea>> {
    build_areas(pc, centers, k, true)
}

/// As [`build_local_areas`], computing metric features only when asked.
pub fn build_areas(pc: &PointCloud, centers: &[Point3], k: usize, with_metric: bool) -> Result<Vec<LocalArea>> {
    if k > pc.len() {
        return Err(Error::invalid(format!("k = {k} exceeds cloud size {}", pc.len())));
    }
    centers
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            let neighbor_indices = knn(pc, c, k)?;
            let rel_coords = neighbor_indices.iter().map(|&j| sub(pc.point(j), c)).collect();
            let mut area = LocalArea {
                center_index: ci,
                neighbor_indices,
                rel_coords,
                metric_feats: None,
            };
            if with_metric {
                area.metric_feats = Some(metric_features(&area));
            }
            Ok(area)
        })
        .collect()
}

/// Per neighbor: distance to the center, largest distance to any area
/// point, and the area diameter (the same for every row).
pub fn metric_features(area: &LocalArea) -> Vec<[f64; 3]> {
    let rel = &area.rel_coords;
    let far: Vec<f64> = rel
        .iter()
        .map(|a| rel.iter().map(|b| dist(a, b)).fold(0.0, f64::max))
        .collect();
    let diameter = far.iter().copied().fold(0.0, f64::max);
    rel.iter().zip(&far).map(|(p, &f)| [norm(p), f, diameter]).collect()
}

/// Which metric feature columns feed the area encoder.
///
/// Letters name the eight subsets: `A` none, `B`..`D` one of phi1..phi3,
/// `E` phi1+phi2, `F` phi1+phi3, `G` phi2+phi3, `H` all three.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MfcMask {
    pub phi1: bool,
    pub phi2: bool,
    pub phi3: bool,
}

impl MfcMask {
    pub const ALL: Self = Self {
        phi1: true,
        phi2: true,
        phi3: true,
    };
    pub const NONE: Self = Self {
        phi1: false,
        phi2: false,
        phi3: false,
    };

    pub fn flags(&self) -> [bool; 3] {
        [self.phi1, self.phi2, self.phi3]
    }

    pub fn count(&self) -> usize {
        self.flags().iter().filter(|&&f| f).count()
    }

    /// Encoder input width: 3 coordinates plus the enabled features.
    pub fn input_width(&self) -> usize {
        3 + self.count()
    }

    pub fn from_letter(c: char) -> Option<Self> {
        let (phi1, phi2, phi3) = match c.to_ascii_uppercase() {
            'A' => (false, false, false),
            'B' => (true, false, false),
            'C' => (false, true, false),
            'D' => (false, false, true),
            'E' => (true, true, false),
            'F' => (true, false, true),
            'G' => (false, true, true),
            'H' => (true, true, true),
            _ => return None,
        };
        Some(Self { phi1, phi2, phi3 })
    }

    pub fn letter(&self) -> char {
        ('A'..='H').find(|&c| Self::from_letter(c) == Some(*self)).unwrap()
    }
}

impl fmt::Display for MfcMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = ["phi1", "phi2", "phi3"]
            .iter()
            .zip(self.flags())
            .filter_map(|(n, on)| on.then_some(*n))
            .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

impl FromStr for MfcMask {
    type Err = Error;

    /// Accepts a table letter (`A`..`H`), `none`, `all`, or a comma list
    /// of `phi1`, `phi2`, `phi3`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.len() == 1 {
            return Self::from_letter(s.chars().next().unwrap())
                .ok_or_else(|| Error::config(format!("unknown metric feature set '{s}'")));
        }
        match s.to_ascii_lowercase().as_str() {
            "none" | "off" => return Ok(Self::NONE),
            "all" | "on" => return Ok(Self::ALL),
            _ => {}
        }
        let mut mask = Self::NONE;
        for part in s.split(',').map(str::trim) {
            match part.to_ascii_lowercase().as_str() {
                "phi1" => mask.phi1 = true,
                "phi2" => mask.phi2 = true,
                "phi3" => mask.phi3 = true,
                other => return Err(Error::config(format!("unknown metric feature '{other}'"))),
            }
        }
        Ok(mask)
    }
}

/// Stacks area rows `(x, y, z, enabled phis...)` into one array,
/// area-major, `k` rows per area.
pub fn area_input_rows<T: Real>(areas: &[LocalArea], mask: MfcMask) -> Result<Array2<T>> {
    let k = areas.first().map_or(0, LocalArea::k);
    if areas.iter().any(|a| a.k() != k) {
        return Err(Error::shape("areas differ in neighbor count"));
    }
    let width = mask.input_width();
    let flags = mask.flags();
    let mut rows = Array2::<T>::zeros((areas.len() * k, width));
    let mut r = 0;
    for area in areas {
        let phis = match (&area.metric_feats, mask.count()) {
            (_, 0) => None,
            (Some(m), _) => Some(std::borrow::Cow::Borrowed(m)),
            (None, _) => Some(std::borrow::Cow::Owned(metric_features(area))),
        };
        for (j, p) in area.rel_coords.iter().enumerate() {
            let mut row = rows.row_mut(r);
            for a in 0..3 {
                row[a] = T::of(p[a]);
            }
            if let Some(phis) = &phis {
                let mut col = 3;
                for (f, &on) in flags.iter().enumerate() {
                    if on {
                        row[col] = T::of(phis[j][f]);
                        col += 1;
                    }
                }
            }
            r += 1;
        }
    }
    Ok(rows)
}

fn uniform_offsets(groups: usize, size: usize) -> Vec<usize> {
    (0..=groups).map(|g| g * size).collect()
}

/// Shared MLP on every area row, then max within each area of `k` rows.
///
/// Returns `(areas x d_area, batch-norm statistics)`.
pub fn encode_areas<T: Real>(
    tape: &mut Tape<T>,
    rows: NodeId,
    k: usize,
    stack: &MlpStack<T>,
    bound: &[BoundLayer],
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(NodeId, Vec<Option<BnUpdate<T>>>)> {
    let (n, width) = tape.shape(rows);
    if width != stack.d_in() {
        return Err(Error::config(format!(
            "area encoder expects width {}, rows have {width}",
            stack.d_in()
        )));
    }
    if k == 0 || n % k != 0 || n == 0 {
        return Err(Error::shape(format!("{n} area rows do not split into areas of {k}")));
    }
    let (outs, updates) = stack.forward(tape, rows, bound, mode, rng)?;
    let pooled = tape.segment_max(*outs.last().unwrap(), &uniform_offsets(n / k, k))?;
    Ok((pooled, updates))
}

/// Shared MLP on each area feature, then max over the `m` areas of each
/// cloud, giving one `g2` row per cloud.
pub fn aggregate_global<T: Real>(
    tape: &mut Tape<T>,
    area_features: NodeId,
    m: usize,
    stack: &MlpStack<T>,
    bound: &[BoundLayer],
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(NodeId, Vec<Option<BnUpdate<T>>>)> {
    let n = tape.shape(area_features).0;
    if m == 0 || !n.is_multiple_of(m) || n == 0 {
        return Err(Error::shape(format!(
            "{n} area features do not split into clouds of {m}"
        )));
    }
    let (outs, updates) = stack.forward(tape, area_features, bound, mode, rng)?;
    let g2 = tape.segment_max(*outs.last().unwrap(), &uniform_offsets(n / m, m))?;
    Ok((g2, updates))
}
