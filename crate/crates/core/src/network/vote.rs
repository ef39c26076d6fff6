use ndarray::Array2;
use rand::RngCore;

use super::model::NetworkParams;
use crate::autodiff::{Mode, Real};
use crate::error::{Error, Result};
use crate::geometry::{augment, AugmentParams, PointCloud};

/// Scale range of the test-time copies.
pub const VOTE_SCALE: (f64, f64) = (0.66, 1.4);

fn scaled_copies(pc: &PointCloud, n_votes: usize, scale: (f64, f64), rng: &mut dyn RngCore) -> Result<Vec<PointCloud>> {
    if n_votes == 0 {
        return Err(Error::invalid("at least one vote is required"));
    }
    let params = AugmentParams::scale_only(scale.0, scale.1);
    (0..n_votes).map(|_| augment(pc, &params, rng)).collect()
}

/// Per-vote class probabilities, one row per scaled copy.
pub fn vote_scores<T: Real>(
    pc: &PointCloud,
    params: &NetworkParams<T>,
    n_votes: usize,
    scale: (f64, f64),
    rng: &mut dyn RngCore,
) -> Result<Array2<f64>> {
    let copies = scaled_copies(pc, n_votes, scale, rng)?;
    let refs: Vec<&PointCloud> = copies.iter().collect();
    // Eval mode draws nothing from the rng, so the copies fully determine
    // the result.
    let pass = params.forward_classify(&refs, Mode::Eval, rng)?;
    Ok(pass.probabilities())
}

/// Mean softmax output over `n_votes` anisotropically scaled copies.
pub fn vote_predict<T: Real>(
    pc: &PointCloud,
    params: &NetworkParams<T>,
    n_votes: usize,
    scale: (f64, f64),
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let scores = vote_scores(pc, params, n_votes, scale, rng)?;
    Ok(scores.mean_axis(ndarray::Axis(0)).unwrap().to_vec())
}

/// Mean per-point part probabilities over scaled copies.
pub fn vote_segment<T: Real>(
    pc: &PointCloud,
    object_class: usize,
    params: &NetworkParams<T>,
    n_votes: usize,
    scale: (f64, f64),
    rng: &mut dyn RngCore,
) -> Result<Array2<f64>> {
    let copies = scaled_copies(pc, n_votes, scale, rng)?;
    let refs: Vec<&PointCloud> = copies.iter().collect();
    let classes = vec![object_class; n_votes];
    let pass = params.forward_segment(&refs, &classes, Mode::Eval, rng)?;
    let probs = pass.probabilities();
    let n = pc.len();
    let mut sum = Array2::<f64>::zeros((n, probs.ncols()));
    for v in 0..n_votes {
        sum += &probs.slice(ndarray::s![v * n..(v + 1) * n, ..]);
    }
    Ok(sum / n_votes as f64)
}
