//! Central finite-difference checks of every differentiable op and of the
//! full networks, in f64.

use localnet::autodiff::{Mode, NodeId, Tape};
use localnet::network::{CenterSource, ModelConfig, NetworkParams};
use localnet::PointCloud;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const INSTANCES: u64 = 20;
const OP_TOL: f64 = 1e-4;
const NET_TOL: f64 = 1e-3;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Gradient norms below this count as zero. Central differences in f64 at
/// `H` carry roughly 1e-10 of rounding noise per entry; groups whose true
/// gradient vanishes (a bias feeding train-mode batch norm) are then
/// checked in absolute terms instead of against that noise.
const NORM_FLOOR: f64 = 1e-6;

/// Norm-wise relative error.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(NORM_FLOOR)
}

/// Builds `sum(op(inputs) * weights)` so every output entry matters.
fn weighted_loss(
    tape: &mut Tape<f64>,
    inputs: &[NodeId],
    op: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    weights: &Array2<f64>,
) -> NodeId {
    let out = op(tape, inputs);
    let w = tape.mul_const(out, weights.clone()).unwrap();
    tape.sum(w)
}

/// Compares analytic and numeric gradients of every input of `op`.
fn check_op(
    name: &str,
    inputs: &[Array2<f64>],
    out_shape: (usize, usize),
    op: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    rng: &mut ChaCha8Rng,
) {
    let weights = rand_mat(rng, out_shape.0, out_shape.1);
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = weighted_loss(&mut tape, &ids, op, &weights);
    tape.backward(loss).unwrap();
    let eval = |xs: &[Array2<f64>]| {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| t.param(x.clone())).collect();
        let l = weighted_loss(&mut t, &ids, op, &weights);
        t.value(l)[[0, 0]]
    };
    for (i, x) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = tape.grad(ids[i]).unwrap().iter().copied().collect();
        let mut numeric = Vec::with_capacity(x.len());
        let mut xs = inputs.to_vec();
        for j in 0..x.len() {
            let orig = xs[i].as_slice().unwrap()[j];
            xs[i].as_slice_mut().unwrap()[j] = orig + H;
            let up = eval(&xs);
            xs[i].as_slice_mut().unwrap()[j] = orig - H;
            let down = eval(&xs);
            xs[i].as_slice_mut().unwrap()[j] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < OP_TOL, "{name}: input {i} relative error {e}");
    }
}

fn for_instances(f: impl Fn(&mut ChaCha8Rng)) {
    for seed in 0..INSTANCES {
        f(&mut ChaCha8Rng::seed_from_u64(seed));
    }
}

#[test]
pub fn grad_linear() {
    for_instances(|rng| {
        let (n, di, d) = (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..5));
        let inputs = [rand_mat(rng, n, di), rand_mat(rng, d, di), rand_mat(rng, 1, d)];
        check_op(
            "linear",
            &inputs,
            (n, d),
            &|t, x| t.linear(x[0], x[1], x[2]).unwrap(),
            rng,
        );
    });
}

#[test]
pub fn grad_batch_norm_train() {
    for_instances(|rng| {
        let (n, d) = (rng.random_range(2..7), rng.random_range(1..4));
        let inputs = [rand_mat(rng, n, d), rand_mat(rng, 1, d), rand_mat(rng, 1, d)];
        check_op(
            "batch_norm_train",
            &inputs,
            (n, d),
            &|t, x| t.batch_norm_train(x[0], x[1], x[2], 1e-5).unwrap().0,
            rng,
        );
    });
}

#[test]
pub fn grad_batch_norm_eval() {
    for_instances(|rng| {
        let (n, d) = (rng.random_range(1..6), rng.random_range(1..4));
        let mean = ndarray::Array1::from_shape_fn(d, |_| rng.random_range(-0.5..0.5));
        let var = ndarray::Array1::from_shape_fn(d, |_| rng.random_range(0.1..2.0));
        let inputs = [rand_mat(rng, n, d), rand_mat(rng, 1, d), rand_mat(rng, 1, d)];
        check_op(
            "batch_norm_eval",
            &inputs,
            (n, d),
            &|t, x| t.batch_norm_eval(x[0], x[1], x[2], &mean, &var, 1e-5).unwrap(),
            rng,
        );
    });
}

/// Keeps entries at least `gap` away from zero so the step never crosses
/// the kink.
fn away_from_zero(mut m: Array2<f64>, gap: f64) -> Array2<f64> {
    m.mapv_inplace(|v| if v.abs() < gap { v.signum() * gap + v } else { v });
    m
}

#[test]
pub fn grad_relu() {
    for_instances(|rng| {
        let (n, d) = (rng.random_range(1..6), rng.random_range(1..5));
        let inputs = [away_from_zero(rand_mat(rng, n, d), 1e-3)];
        check_op("relu", &inputs, (n, d), &|t, x| t.relu(x[0]), rng);
    });
}

#[test]
pub fn grad_segment_max() {
    for_instances(|rng| {
        let sizes: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..5)).collect();
        let mut offsets = vec![0];
        for s in &sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let d = rng.random_range(1..4);
        let inputs = [rand_mat(rng, *offsets.last().unwrap(), d)];
        let off = offsets.clone();
        check_op(
            "segment_max",
            &inputs,
            (sizes.len(), d),
            &move |t, x| t.segment_max(x[0], &off).unwrap(),
            rng,
        );
    });
}

#[test]
pub fn grad_dropout_fixed_mask() {
    for_instances(|rng| {
        let (n, d) = (rng.random_range(1..6), rng.random_range(1..5));
        let seed: u64 = rng.random();
        let inputs = [rand_mat(rng, n, d)];
        check_op(
            "dropout",
            &inputs,
            (n, d),
            &move |t, x| {
                t.dropout(x[0], 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed))
                    .unwrap()
            },
            rng,
        );
    });
}

#[test]
pub fn grad_concat() {
    for_instances(|rng| {
        let n = rng.random_range(1..5);
        let (a, b) = (rng.random_range(1..4), rng.random_range(1..4));
        let inputs = [rand_mat(rng, n, a), rand_mat(rng, n, b)];
        check_op(
            "concat",
            &inputs,
            (n, a + b),
            &|t, x| t.concat(&[x[0], x[1]]).unwrap(),
            rng,
        );
    });
}

#[test]
pub fn grad_gather() {
    for_instances(|rng| {
        let (n, d, r) = (rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..6));
        let rows: Vec<Vec<(usize, f64)>> = (0..r)
            .map(|_| {
                (0..rng.random_range(1..4))
                    .map(|_| (rng.random_range(0..n), rng.random_range(-1.0..1.0)))
                    .collect()
            })
            .collect();
        let inputs = [rand_mat(rng, n, d)];
        check_op(
            "gather",
            &inputs,
            (r, d),
            &move |t, x| t.gather(x[0], rows.clone()).unwrap(),
            rng,
        );
    });
}

#[test]
pub fn grad_interpolate() {
    for_instances(|rng| {
        let (n, d, r) = (rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..6));
        let rows: Vec<(usize, Vec<(usize, f64)>)> = (0..r)
            .map(|_| {
                let others = (0..rng.random_range(0..3))
                    .map(|_| (rng.random_range(0..n), rng.random_range(0.0..0.5)))
                    .collect();
                (rng.random_range(0..n), others)
            })
            .collect();
        let inputs = [rand_mat(rng, n, d)];
        check_op(
            "interpolate",
            &inputs,
            (r, d),
            &move |t, x| t.interpolate(x[0], rows.clone()).unwrap(),
            rng,
        );
    });
}

#[test]
pub fn grad_elementwise() {
    for_instances(|rng| {
        let (n, d) = (rng.random_range(1..5), rng.random_range(1..5));
        let inputs = [rand_mat(rng, n, d), rand_mat(rng, n, d)];
        check_op("add", &inputs, (n, d), &|t, x| t.add(x[0], x[1]).unwrap(), rng);
        check_op("mul", &inputs, (n, d), &|t, x| t.mul(x[0], x[1]).unwrap(), rng);
        let c = rand_mat(rng, n, d);
        check_op(
            "mul_const",
            &inputs[..1],
            (n, d),
            &move |t, x| t.mul_const(x[0], c.clone()).unwrap(),
            rng,
        );
        check_op("sum", &inputs[..1], (1, 1), &|t, x| t.sum(x[0]), rng);
    });
}

#[test]
pub fn grad_softmax_cross_entropy() {
    for_instances(|rng| {
        let (n, c) = (rng.random_range(1..6), rng.random_range(2..6));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let inputs = [rand_mat(rng, n, c).mapv(|v| 3.0 * v)];
        check_op(
            "softmax_cross_entropy",
            &inputs,
            (1, 1),
            &move |t, x| t.softmax_cross_entropy(x[0], &labels).unwrap(),
            rng,
        );
    });
}

fn micro_config(base: ModelConfig) -> ModelConfig {
    ModelConfig {
        m: 4,
        k: 4,
        cpl_hidden: vec![6, 5],
        area_widths: vec![6, 5],
        global_widths: vec![6, 7],
        head_widths: vec![6, 5],
        ..base
    }
}

fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect(),
    )
    .unwrap()
}

/// Points per cloud of the micro instance.
const N: usize = 16;
/// Clouds per batch. With two clouds, train-mode batch norm in the head
/// maps every column to plus or minus gamma and the gradient upstream
/// vanishes, which would make the comparison meaningless.
const BATCH: usize = 4;

fn batch(rng: &mut ChaCha8Rng) -> Vec<PointCloud> {
    (0..BATCH).map(|_| random_cloud(N, rng)).collect()
}

fn refs(clouds: &[PointCloud]) -> Vec<&PointCloud> {
    clouds.iter().collect()
}

/// Loss of a train-mode pass with a fixed dropout stream.
fn net_loss(
    params: &NetworkParams<f64>,
    clouds: &[&PointCloud],
    objects: &[usize],
    labels: &[usize],
    dropout_seed: u64,
) -> (f64, Vec<Array2<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut pass = if objects.is_empty() {
        params.forward_classify(clouds, Mode::Train, &mut rng).unwrap()
    } else {
        params.forward_segment(clouds, objects, Mode::Train, &mut rng).unwrap()
    };
    let loss = pass.loss(labels).unwrap();
    let value = pass.tape.value(loss)[[0, 0]];
    pass.tape.backward(loss).unwrap();
    (value, params.grads(&pass))
}

/// Checks every parameter tensor of `params` against central differences.
fn check_network(
    mut params: NetworkParams<f64>,
    clouds: &[&PointCloud],
    objects: &[usize],
    labels: &[usize],
    seed: u64,
) {
    let (_, analytic) = net_loss(&params, clouds, objects, labels, seed);
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    // Guard against a vacuous check: most groups must carry real gradient.
    let live = analytic
        .iter()
        .filter(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt() > 100.0 * NORM_FLOOR)
        .count();
    assert!(
        2 * live > names.len(),
        "only {live} of {} groups have gradient",
        names.len()
    );
    for (g, name) in names.iter().enumerate() {
        let len = analytic[g].len();
        let mut numeric = Vec::with_capacity(len);
        for j in 0..len {
            let orig = params.tensors_mut()[g].as_slice().unwrap()[j];
            params.tensors_mut()[g].as_slice_mut().unwrap()[j] = orig + H;
            let up = net_loss(&params, clouds, objects, labels, seed).0;
            params.tensors_mut()[g].as_slice_mut().unwrap()[j] = orig - H;
            let down = net_loss(&params, clouds, objects, labels, seed).0;
            params.tensors_mut()[g].as_slice_mut().unwrap()[j] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        let a: Vec<f64> = analytic[g].iter().copied().collect();
        let e = rel_err(&a, &numeric);
        assert!(e < NET_TOL, "{name}: relative error {e}");
    }
}

#[test]
pub fn grad_end_to_end_classifier() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cfg = micro_config(ModelConfig::classifier(3));
        let params = NetworkParams::<f64>::init(&cfg, &mut rng).unwrap();
        let clouds = batch(&mut rng);
        let labels: Vec<usize> = (0..BATCH).map(|_| rng.random_range(0..3)).collect();
        check_network(params, &refs(&clouds), &[], &labels, seed);
    }
}

#[test]
pub fn grad_end_to_end_ablation_modes() {
    for (i, (centers, use_g1)) in [(CenterSource::Fps, false), (CenterSource::Fps, true)]
        .into_iter()
        .enumerate()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + i as u64);
        let cfg = ModelConfig {
            centers,
            use_g1,
            ..micro_config(ModelConfig::classifier(3))
        };
        let params = NetworkParams::<f64>::init(&cfg, &mut rng).unwrap();
        let clouds = batch(&mut rng);
        check_network(params, &refs(&clouds), &[], &[0, 2, 1, 0], 7);
    }
}

#[test]
pub fn grad_end_to_end_segmenter() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let cfg = micro_config(ModelConfig::segmenter(3, 2));
        let params = NetworkParams::<f64>::init(&cfg, &mut rng).unwrap();
        let clouds = batch(&mut rng);
        let labels: Vec<usize> = (0..BATCH * N).map(|_| rng.random_range(0..3)).collect();
        check_network(params, &refs(&clouds), &[0, 1, 1, 0], &labels, seed);
    }
}
