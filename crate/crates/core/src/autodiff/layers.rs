use ndarray::{Array1, Array2};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Uniform};

use super::tape::{NodeId, Tape};
use super::{Mode, Real, BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `d_out x d_in`
    pub weight: Array2<T>,
    /// `1 x d_out`
    pub bias: Array2<T>,
}

impl<T: Real> Linear<T> {
    /// Uniform init in `[-1/sqrt(d_in), 1/sqrt(d_in)]`, scaled by `gain`.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain / (d_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weight = Array2::from_shape_simple_fn((d_out, d_in), || T::of(dist.sample(rng)));
        let bias = Array2::from_shape_simple_fn((1, d_out), || T::of(dist.sample(rng)));
        Self { weight, bias }
    }

    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Array2<T>,
    pub beta: Array2<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: T,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Array2::ones((1, d)),
            beta: Array2::zeros((1, d)),
            running_mean: Array1::zeros(d),
            running_var: Array1::ones(d),
            momentum: T::of(BN_MOMENTUM),
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`
    pub fn update(&mut self, upd: &BnUpdate<T>) {
        let keep = T::one() - self.momentum;
        let mom = self.momentum;
        self.running_mean
            .zip_mut_with(&upd.mean, |r, &b| *r = keep * *r + mom * b);
        self.running_var
            .zip_mut_with(&upd.var, |r, &b| *r = keep * *r + mom * b);
    }
}

/// Batch statistics observed in one train-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate<T> {
    pub mean: Array1<T>,
    pub var: Array1<T>,
}

/// One shared layer: affine map, optional batch norm, optional ReLU, then
/// optional dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub linear: Linear<T>,
    pub bn: Option<BatchNorm<T>>,
    pub relu: bool,
    pub dropout: f64,
}

/// Tape handles for one layer's trainable tensors.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weight: NodeId,
    pub bias: NodeId,
    pub gamma: Option<NodeId>,
    pub beta: Option<NodeId>,
}

impl<T: Real> LayerParams<T> {
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundLayer {
        BoundLayer {
            weight: tape.param(self.linear.weight.clone()),
            bias: tape.param(self.linear.bias.clone()),
            gamma: self.bn.as_ref().map(|bn| tape.param(bn.gamma.clone())),
            beta: self.bn.as_ref().map(|bn| tape.param(bn.beta.clone())),
        }
    }

    pub fn d_out(&self) -> usize {
        self.linear.d_out()
    }
}

/// Applies one shared layer to every row of `x`.
///
/// In train mode batch norm uses the statistics of all rows in `x` and the
/// observed statistics are returned; eval mode uses the running statistics.
pub fn shared_mlp_layer<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    layer: &LayerParams<T>,
    bound: &BoundLayer,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(NodeId, Option<BnUpdate<T>>)> {
    let mut h = tape.linear(x, bound.weight, bound.bias)?;
    let mut update = None;
    if let Some(bn) = &layer.bn {
        let (gamma, beta) = bound
            .gamma
            .zip(bound.beta)
            .ok_or_else(|| Error::config("batch norm layer bound without gamma/beta"))?;
        let eps = T::of(BN_EPS);
        h = match mode {
            Mode::Train => {
                let (id, mean, var) = tape.batch_norm_train(h, gamma, beta, eps)?;
                update = Some(BnUpdate { mean, var });
                id
            }
            Mode::Eval => tape.batch_norm_eval(h, gamma, beta, &bn.running_mean, &bn.running_var, eps)?,
        };
    }
    if layer.relu {
        h = tape.relu(h);
    }
    if layer.dropout > 0.0 {
        h = tape.dropout(h, layer.dropout, mode, rng)?;
    }
    Ok((h, update))
}

/// Per-layer outputs and batch-norm statistic updates of a stack.
pub type StackOutput<T> = (Vec<NodeId>, Vec<Option<BnUpdate<T>>>);

/// A stack of shared layers applied in sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpStack<T> {
    pub layers: Vec<LayerParams<T>>,
}

/// Per-layer settings used when building a stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub width: usize,
    pub bn: bool,
    pub relu: bool,
    pub dropout: f64,
    pub init_gain: f64,
}

impl LayerSpec {
    /// Affine + batch norm + ReLU.
    pub fn hidden(width: usize) -> Self {
        Self {
            width,
            bn: true,
            relu: true,
            dropout: 0.0,
            init_gain: 1.0,
        }
    }
}

impl<T: Real> MlpStack<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, specs: &[LayerSpec], rng: &mut R) -> Self {
        let mut d = d_in;
        let layers = specs
            .iter()
            .map(|s| {
                let layer = LayerParams {
                    linear: Linear::init(d, s.width, s.init_gain, rng),
                    bn: s.bn.then(|| BatchNorm::new(s.width)),
                    relu: s.relu,
                    dropout: s.dropout,
                };
                d = s.width;
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers.first().map_or(0, |l| l.linear.d_in())
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out())
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<BoundLayer> {
        self.layers.iter().map(|l| l.bind(tape)).collect()
    }

    /// Runs every layer; returns each layer's output node and the batch
    /// statistics per layer (train mode only).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        bound: &[BoundLayer],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<StackOutput<T>> {
        if tape.shape(x).1 != self.d_in() {
            return Err(Error::shape(format!(
                "stack expects width {}, got {}",
                self.d_in(),
                tape.shape(x).1
            )));
        }
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut updates = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (layer, b) in self.layers.iter().zip(bound) {
            let (next, upd) = shared_mlp_layer(tape, h, layer, b, mode, rng)?;
            h = next;
            outs.push(h);
            updates.push(upd);
        }
        Ok((outs, updates))
    }

    pub fn apply_bn_updates(&mut self, updates: &[Option<BnUpdate<T>>]) {
        for (layer, upd) in self.layers.iter_mut().zip(updates) {
            if let (Some(bn), Some(u)) = (layer.bn.as_mut(), upd) {
                bn.update(u);
            }
        }
    }

    /// Trainable tensors in a fixed order: per layer weight, bias, gamma, beta.
    pub fn tensors(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{i}.weight"), &l.linear.weight));
            out.push((format!("{i}.bias"), &l.linear.bias));
            if let Some(bn) = &l.bn {
                out.push((format!("{i}.bn.gamma"), &bn.gamma));
                out.push((format!("{i}.bn.beta"), &bn.beta));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.linear.weight);
            out.push(&mut l.linear.bias);
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Running statistics, in layer order.
    pub fn buffers(&self) -> Vec<(String, &Array1<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(bn) = &l.bn {
                out.push((format!("{i}.bn.running_mean"), &bn.running_mean));
                out.push((format!("{i}.bn.running_var"), &bn.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Array1<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
        }
        out
    }

    /// Gradients matching [`MlpStack::tensors`]; unreached tensors get zeros.
    pub fn grads(&self, tape: &Tape<T>, bound: &[BoundLayer]) -> Vec<Array2<T>> {
        let grab = |id: NodeId| tape.grad(id).cloned().unwrap_or_else(|| Array2::zeros(tape.shape(id)));
        let mut out = Vec::new();
        for b in bound {
            out.push(grab(b.weight));
            out.push(grab(b.bias));
            if let (Some(g), Some(be)) = (b.gamma, b.beta) {
                out.push(grab(g));
                out.push(grab(be));
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> MlpStack<U> {
        let c2 = |a: &Array2<T>| a.mapv(|v| U::of(v.to_f64().unwrap()));
        let c1 = |a: &Array1<T>| a.mapv(|v| U::of(v.to_f64().unwrap()));
        MlpStack {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    linear: Linear {
                        weight: c2(&l.linear.weight),
                        bias: c2(&l.linear.bias),
                    },
                    bn: l.bn.as_ref().map(|bn| BatchNorm {
                        gamma: c2(&bn.gamma),
                        beta: c2(&bn.beta),
                        running_mean: c1(&bn.running_mean),
                        running_var: c1(&bn.running_var),
                        momentum: U::of(bn.momentum.to_f64().unwrap()),
                    }),
                    relu: l.relu,
                    dropout: l.dropout,
                })
                .collect(),
        }
    }
}
