//! Dataset ingestion, synthetic shapes, file formats and batching.

mod adapters;
mod io;
mod mesh;
mod synthetic;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

pub use adapters::{load_modelnet, load_shapenet_part};
pub use io::{
    label_color, load_dataset, parse_manifest, parse_points_csv, ply_text, points_to_csv, read_points_csv,
    write_dataset, write_ply, write_points_csv, write_text, Manifest, ManifestEntry,
};
pub use mesh::{load_off, parse_off, sample_mesh_uniform, Mesh};
pub use synthetic::{
    generate_synthetic, synthetic_dataset, ShapeKind, CYLINDER_HEIGHT, CYLINDER_RADIUS, PLANE_BORDER, TORUS_MAJOR,
    TORUS_MINOR,
};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// A cloud with optional shape and per-point part labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub cloud: PointCloud,
    pub shape_label: Option<usize>,
    pub part_labels: Option<Vec<usize>>,
}

impl LabeledSample {
    pub fn validate(&self) -> Result<()> {
        match &self.part_labels {
            Some(p) if p.len() != self.cloud.len() => Err(Error::Data(format!(
                "{} part labels for {} points",
                p.len(),
                self.cloud.len()
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl Dataset {
    /// Builds the synthetic dataset: `train_per_class` and `test_per_class`
    /// normalized clouds per kind, both drawn from `rng`.
    pub fn synthetic<R: Rng + ?Sized>(
        kinds: &[ShapeKind],
        train_per_class: usize,
        test_per_class: usize,
        n_points: usize,
        jitter: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            class_names: kinds.iter().map(|k| k.name().to_string()).collect(),
            train: synthetic_dataset(kinds, train_per_class, n_points, jitter, rng)?,
            test: synthetic_dataset(kinds, test_per_class, n_points, jitter, rng)?,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// One more than the largest part label seen.
    pub fn part_count(&self) -> usize {
        self.all()
            .filter_map(|s| s.part_labels.as_ref())
            .flat_map(|p| p.iter().copied())
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Part ids observed on shapes of each class.
    pub fn parts_per_class(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![BTreeSet::new(); self.class_count()];
        for s in self.all() {
            if let (Some(c), Some(p)) = (s.shape_label, &s.part_labels) {
                if c < sets.len() {
                    sets[c].extend(p.iter().copied());
                }
            }
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    fn all(&self) -> impl Iterator<Item = &LabeledSample> {
        self.train.iter().chain(&self.test)
    }

    /// Checks label ranges and part label lengths.
    pub fn validate(&self) -> Result<()> {
        for s in self.all() {
            s.validate()?;
            if let Some(c) = s.shape_label {
                if c >= self.class_count() {
                    return Err(Error::Data(format!("shape label {c} out of range")));
                }
            }
        }
        Ok(())
    }
}

/// Index batches for one epoch. Shuffles when asked; the last partial
/// batch is kept.
pub fn batch_iter<R: Rng + ?Sized>(
    len: usize,
    batch_size: usize,
    shuffle: bool,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
