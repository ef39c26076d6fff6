//! Critical point learning.
//!
//! A shared MLP maps every point to an `m`-wide feature. The column-wise max
//! over the points of a cloud is the global feature `g1`; the row that wins
//! column `j` is the `j`-th critical point. Only the winning rows receive
//! gradient through `g1`, which is what moves the critical points during
//! training.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::RngCore;

use crate::autodiff::{BnUpdate, BoundLayer, MlpStack, Mode, NodeId, Real, Tape};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

/// Per-cloud result of critical point selection.
#[derive(Debug, Clone, PartialEq)]
pub struct CplOutput {
    /// Column-wise max of the final per-point features.
    pub g1: Vec<f64>,
    /// Row (within the cloud) that produced each entry of `g1`.
    pub critical_indices: Vec<usize>,
    /// Number of pairwise different critical indices.
    pub distinct_count: usize,
}

impl CplOutput {
    pub fn m(&self) -> usize {
        self.critical_indices.len()
    }

    /// Selection multiplicity per point of a cloud with `n` points.
    pub fn times_selected(&self, n: usize) -> Vec<usize> {
        let mut counts = vec![0; n];
        for &i in &self.critical_indices {
            counts[i] += 1;
        }
        counts
    }
}

/// Tape handles from a batched CPL pass.
#[derive(Debug, Clone)]
pub struct CplBatch {
    /// `batch x m`
    pub g1: NodeId,
    /// Final per-point features, `sum(n) x m`.
    pub features: NodeId,
    /// Penultimate per-point features, kept for segmentation.
    pub point_features: NodeId,
    pub outputs: Vec<CplOutput>,
}

/// Row offsets delimiting each cloud in a stacked batch.
pub fn cloud_offsets(clouds: &[&PointCloud]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(clouds.len() + 1);
    offsets.push(0);
    for c in clouds {
        offsets.push(offsets.last().unwrap() + c.len());
    }
    offsets
}

/// Stacks the coordinates of all clouds into a `sum(n) x 3` array.
pub fn stacked_coords<T: Real>(clouds: &[&PointCloud]) -> Array2<T> {
    let total: usize = clouds.iter().map(|c| c.len()).sum();
    let mut x = Array2::<T>::zeros((total, 3));
    let mut r = 0;
    for c in clouds {
        for p in c.coords() {
            for a in 0..3 {
                x[[r, a]] = T::of(p[a]);
            }
            r += 1;
        }
    }
    x
}

/// Pools per-point features into `g1` and reads off critical indices.
///
/// `features` holds the stacked per-point features of all clouds and
/// `offsets` delimits them.
pub fn pool_critical_points<T: Real>(
    tape: &mut Tape<T>,
    features: NodeId,
    offsets: &[usize],
) -> Result<(NodeId, Vec<CplOutput>)> {
    let g1 = tape.segment_max(features, offsets)?;
    let values = tape.value(g1);
    let argmax = tape.argmax(g1).expect("segment max node");
    let outputs = (0..offsets.len() - 1)
        .map(|b| {
            let critical_indices: Vec<usize> = argmax.row(b).iter().map(|&r| r - offsets[b]).collect();
            let distinct_count = critical_indices.iter().collect::<BTreeSet<_>>().len();
            CplOutput {
                g1: values.row(b).iter().map(|v| v.to_f64().unwrap()).collect(),
                critical_indices,
                distinct_count,
            }
        })
        .collect();
    Ok((g1, outputs))
}

/// Runs the CPL encoder over a batch of clouds.
///
/// The encoder's last layer must have width `m`. Batch norm statistics
/// (train mode) span all points of all clouds in the batch.
pub fn cpl_forward<T: Real>(
    tape: &mut Tape<T>,
    clouds: &[&PointCloud],
    stack: &MlpStack<T>,
    bound: &[BoundLayer],
    m: usize,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(CplBatch, Vec<Option<BnUpdate<T>>>)> {
    if stack.d_out() != m {
        return Err(Error::config(format!(
            "CPL encoder ends at width {} but m = {m}",
            stack.d_out()
        )));
    }
    if stack.layers.len() < 2 {
        return Err(Error::config("CPL encoder needs at least two layers"));
    }
    let offsets = cloud_offsets(clouds);
    let x = tape.constant(stacked_coords(clouds));
    let (outs, updates) = stack.forward(tape, x, bound, mode, rng)?;
    let features = *outs.last().unwrap();
    let point_features = outs[outs.len() - 2];
    let (g1, outputs) = pool_critical_points(tape, features, &offsets)?;
    Ok((
        CplBatch {
            g1,
            features,
            point_features,
            outputs,
        },
        updates,
    ))
}

/// Coordinates of the critical points, in `critical_indices` order.
pub fn select_centers(cpl: &CplOutput, pc: &PointCloud) -> Vec<Point3> {
    cpl.critical_indices.iter().map(|&i| *pc.point(i)).collect()
}

/// Mean, max and min number of distinct critical points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistinctStats {
    pub mean: f64,
    pub max: usize,
    pub min: usize,
}

pub fn count_distinct_stats(outputs: &[CplOutput]) -> Result<DistinctStats> {
    if outputs.is_empty() {
        return Err(Error::invalid("distinct-count statistics of an empty batch"));
    }
    let counts = outputs.iter().map(|o| o.distinct_count);
    Ok(DistinctStats {
        mean: counts.clone().sum::<usize>() as f64 / outputs.len() as f64,
        max: counts.clone().max().unwrap(),
        min: counts.min().unwrap(),
    })
}

/// Accumulates distinct-count statistics across steps of an epoch.
#[derive(Debug, Clone, Default)]
pub struct DistinctTally {
    sum: usize,
    count: usize,
    max: usize,
    min: Option<usize>,
}

impl DistinctTally {
    pub fn add(&mut self, outputs: &[CplOutput]) {
        for o in outputs {
            self.sum += o.distinct_count;
            self.count += 1;
            self.max = self.max.max(o.distinct_count);
            self.min = Some(self.min.map_or(o.distinct_count, |m| m.min(o.distinct_count)));
        }
    }

    pub fn stats(&self) -> Option<DistinctStats> {
        (self.count > 0).then(|| DistinctStats {
            mean: self.sum as f64 / self.count as f64,
            max: self.max,
            min: self.min.unwrap(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::LayerSpec;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(m: usize, rng: &mut ChaCha8Rng) -> MlpStack<f64> {
        MlpStack::new(
            3,
            &[
                LayerSpec::hidden(8),
                LayerSpec::hidden(6),
                LayerSpec {
                    relu: false,
                    ..LayerSpec::hidden(m)
                },
            ],
            rng,
        )
    }

    #[test]
    fn pooling_example() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(array![[1.0, 5.0], [3.0, 2.0]]);
        let (g1, out) = pool_critical_points(&mut tape, f, &[0, 2]).unwrap();
        assert_eq!(tape.value(g1), &array![[3.0, 5.0]]);
        assert_eq!(out[0].critical_indices, vec![1, 0]);
        assert_eq!(out[0].distinct_count, 2);
        assert_eq!(out[0].g1, vec![3.0, 5.0]);
    }

    #[test]
    fn single_point_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = encoder(5, &mut rng);
        let pc = PointCloud::new(vec![[0.1, 0.2, 0.3]]).unwrap();
        let mut tape = Tape::new();
        let bound = stack.bind(&mut tape);
        let (batch, _) = cpl_forward(&mut tape, &[&pc], &stack, &bound, 5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(batch.outputs[0].critical_indices, vec![0; 5]);
        assert_eq!(batch.outputs[0].distinct_count, 1);
        let row: Vec<f64> = tape.value(batch.features).row(0).to_vec();
        assert_eq!(batch.outputs[0].g1, row);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = encoder(5, &mut rng);
        let pc = PointCloud::new(vec![[0.0; 3]]).unwrap();
        let mut tape = Tape::new();
        let bound = stack.bind(&mut tape);
        let r = cpl_forward(&mut tape, &[&pc], &stack, &bound, 4, Mode::Eval, &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn centers_keep_duplicates_and_order() {
        let pc = PointCloud::new(vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap();
        let out = CplOutput {
            g1: vec![0.0; 3],
            critical_indices: vec![0, 0, 1],
            distinct_count: 2,
        };
        assert_eq!(
            select_centers(&out, &pc),
            vec![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]
        );
        assert_eq!(out.times_selected(2), vec![2, 1]);
    }

    #[test]
    fn distinct_stats() {
        let mk = |idx: Vec<usize>| {
            let distinct_count = idx.iter().collect::<BTreeSet<_>>().len();
            CplOutput {
                g1: vec![],
                critical_indices: idx,
                distinct_count,
            }
        };
        let all_dup = vec![mk(vec![3, 3, 3]), mk(vec![0, 0, 0])];
        let s = count_distinct_stats(&all_dup).unwrap();
        assert_eq!((s.mean, s.max, s.min), (1.0, 1, 1));
        let one = count_distinct_stats(&[mk(vec![0, 1, 1])]).unwrap();
        assert_eq!((one.mean, one.max, one.min), (2.0, 2, 2));
        assert!(count_distinct_stats(&[]).is_err());
        let mut tally = DistinctTally::default();
        tally.add(&[mk(vec![0, 1, 2]), mk(vec![0, 0, 0])]);
        let t = tally.stats().unwrap();
        assert_eq!((t.mean, t.max, t.min), (2.0, 3, 1));
    }
}
