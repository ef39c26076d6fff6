use ndarray::{Array1, Array2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{CenterSource, ModelConfig, Task};
use super::interp::idw_weights;
use crate::autodiff::{
    softmax_rows, AdamState, BnUpdate, BoundLayer, Checkpoint, LayerSpec, MlpStack, Mode, NodeId, OptimizerBlock, Real,
    Tape, TensorBlock,
};
use crate::cpl::{cloud_offsets, cpl_forward, select_centers, CplOutput};
use crate::error::{Error, Result};
use crate::features::{aggregate_global, area_input_rows, build_areas, encode_areas};
use crate::geometry::{farthest_point_sampling, Point3, PointCloud};

/// Init gain of the score layer. Small initial logits start training near
/// the uniform prediction.
pub const SCORE_INIT_GAIN: f64 = 0.1;

/// All learnable weights plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub config: ModelConfig,
    /// Absent when centers come from FPS and `g1` is unused.
    pub cpl: Option<MlpStack<T>>,
    pub area: MlpStack<T>,
    pub global: MlpStack<T>,
    pub head: MlpStack<T>,
}

#[derive(Debug, Clone, Default)]
struct Bound {
    cpl: Vec<BoundLayer>,
    area: Vec<BoundLayer>,
    global: Vec<BoundLayer>,
    head: Vec<BoundLayer>,
}

#[derive(Debug, Clone)]
struct Updates<T> {
    cpl: Vec<Option<BnUpdate<T>>>,
    area: Vec<Option<BnUpdate<T>>>,
    global: Vec<Option<BnUpdate<T>>>,
    head: Vec<Option<BnUpdate<T>>>,
}

impl<T> Default for Updates<T> {
    fn default() -> Self {
        Self {
            cpl: Vec::new(),
            area: Vec::new(),
            global: Vec::new(),
            head: Vec::new(),
        }
    }
}

/// One recorded forward pass over a batch.
pub struct Pass<T: Real> {
    pub tape: Tape<T>,
    bound: Bound,
    updates: Updates<T>,
    /// Classification: `batch x classes`. Segmentation: `sum(n) x parts`.
    pub logits: NodeId,
    /// Fused global feature, `batch x d_g`.
    pub g: NodeId,
    pub cpl: Vec<CplOutput>,
    pub centers: Vec<Vec<Point3>>,
    /// Logit rows belonging to each cloud.
    pub row_offsets: Vec<usize>,
}

impl<T: Real> Pass<T> {
    /// Mean cross entropy of the logits against per-row labels.
    pub fn loss(&mut self, labels: &[usize]) -> Result<NodeId> {
        self.tape.softmax_cross_entropy(self.logits, labels)
    }

    pub fn probabilities(&self) -> Array2<f64> {
        softmax_rows(self.tape.value(self.logits)).mapv(|v| v.to_f64().unwrap())
    }

    pub fn cloud_rows(&self, b: usize) -> std::ops::Range<usize> {
        self.row_offsets[b]..self.row_offsets[b + 1]
    }
}

fn head_specs(hidden: &[usize], out: usize, dropout: f64) -> Vec<LayerSpec> {
    let mut specs: Vec<LayerSpec> = hidden
        .iter()
        .map(|&w| LayerSpec {
            dropout,
            ..LayerSpec::hidden(w)
        })
        .collect();
    specs.push(LayerSpec {
        width: out,
        bn: false,
        relu: false,
        dropout: 0.0,
        init_gain: SCORE_INIT_GAIN,
    });
    specs
}

fn hidden_specs(widths: &[usize]) -> Vec<LayerSpec> {
    widths.iter().map(|&w| LayerSpec::hidden(w)).collect()
}

impl<T: Real> NetworkParams<T> {
    /// Fresh parameters drawn from `rng` in a fixed order.
    pub fn init(config: &ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let cpl = config.has_cpl().then(|| {
            let mut specs = hidden_specs(&config.cpl_hidden);
            specs.push(LayerSpec {
                relu: false,
                ..LayerSpec::hidden(config.m)
            });
            MlpStack::new(3, &specs, rng)
        });
        let area = MlpStack::new(config.mfc.input_width(), &hidden_specs(&config.area_widths), rng);
        let global = MlpStack::new(config.d_area(), &hidden_specs(&config.global_widths), rng);
        let head = MlpStack::new(
            config.head_input(),
            &head_specs(&config.head_widths, config.class_count, config.dropout),
            rng,
        );
        Ok(Self {
            config: config.clone(),
            cpl,
            area,
            global,
            head,
        })
    }

    fn stacks(&self) -> Vec<(&'static str, &MlpStack<T>)> {
        let mut out = Vec::with_capacity(4);
        if let Some(c) = &self.cpl {
            out.push(("cpl", c));
        }
        out.push(("area", &self.area));
        out.push(("global", &self.global));
        out.push(("head", &self.head));
        out
    }

    fn stacks_mut(&mut self) -> Vec<&mut MlpStack<T>> {
        let mut out = Vec::with_capacity(4);
        if let Some(c) = &mut self.cpl {
            out.push(c);
        }
        out.push(&mut self.area);
        out.push(&mut self.global);
        out.push(&mut self.head);
        out
    }

    /// Trainable tensors with dotted names, e.g. `cpl.0.weight`.
    pub fn tensors(&self) -> Vec<(String, &Array2<T>)> {
        self.stacks()
            .into_iter()
            .flat_map(|(p, s)| s.tensors().into_iter().map(move |(n, t)| (format!("{p}.{n}"), t)))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.stacks_mut().into_iter().flat_map(|s| s.tensors_mut()).collect()
    }

    pub fn buffers(&self) -> Vec<(String, &Array1<T>)> {
        self.stacks()
            .into_iter()
            .flat_map(|(p, s)| s.buffers().into_iter().map(move |(n, t)| (format!("{p}.{n}"), t)))
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Array1<T>> {
        self.stacks_mut().into_iter().flat_map(|s| s.buffers_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|(_, t)| t.dim()).collect()
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            config: self.config.clone(),
            cpl: self.cpl.as_ref().map(MlpStack::cast),
            area: self.area.cast(),
            global: self.global.cast(),
            head: self.head.cast(),
        }
    }

    fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            cpl: self.cpl.as_ref().map(|c| c.bind(tape)).unwrap_or_default(),
            area: self.area.bind(tape),
            global: self.global.bind(tape),
            head: self.head.bind(tape),
        }
    }

    /// Gradients in [`NetworkParams::tensors`] order, after `backward`.
    pub fn grads(&self, pass: &Pass<T>) -> Vec<Array2<T>> {
        let mut out = Vec::new();
        if let Some(c) = &self.cpl {
            out.extend(c.grads(&pass.tape, &pass.bound.cpl));
        }
        out.extend(self.area.grads(&pass.tape, &pass.bound.area));
        out.extend(self.global.grads(&pass.tape, &pass.bound.global));
        out.extend(self.head.grads(&pass.tape, &pass.bound.head));
        out
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// statistics.
    pub fn apply_bn_updates(&mut self, pass: &Pass<T>) {
        if let Some(c) = &mut self.cpl {
            c.apply_bn_updates(&pass.updates.cpl);
        }
        self.area.apply_bn_updates(&pass.updates.area);
        self.global.apply_bn_updates(&pass.updates.global);
        self.head.apply_bn_updates(&pass.updates.head);
    }

    /// Critical points of each cloud from an eval-mode CPL pass.
    pub fn critical_points(&self, clouds: &[&PointCloud]) -> Result<Vec<CplOutput>> {
        let stack = self
            .cpl
            .as_ref()
            .ok_or_else(|| Error::config("model has no CPL encoder"))?;
        let mut tape = Tape::new();
        let bound = stack.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (batch, _) = cpl_forward(&mut tape, clouds, stack, &bound, self.config.m, Mode::Eval, &mut rng)?;
        Ok(batch.outputs)
    }

    fn centers_for(&self, clouds: &[&PointCloud], cpl: &[CplOutput]) -> Result<Vec<Vec<Point3>>> {
        let cfg = &self.config;
        match cfg.centers {
            CenterSource::Cpl => Ok(cpl.iter().zip(clouds).map(|(o, c)| select_centers(o, c)).collect()),
            CenterSource::Fps => clouds
                .iter()
                .map(|c| {
                    let idx = farthest_point_sampling(c, cfg.m, cfg.fps_seed.resolve(c))?;
                    Ok(idx.iter().map(|&i| *c.point(i)).collect())
                })
                .collect(),
        }
    }

    /// Local areas, area features and `g2`. Returns `(area_features, g2)`.
    #[allow(clippy::too_many_arguments)]
    fn encode_local(
        &self,
        tape: &mut Tape<T>,
        clouds: &[&PointCloud],
        centers: &[Vec<Point3>],
        bound: &Bound,
        updates: &mut Updates<T>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(NodeId, NodeId)> {
        let cfg = &self.config;
        let with_metric = cfg.mfc.count() > 0;
        let mut blocks = Vec::with_capacity(clouds.len());
        for (cloud, cs) in clouds.iter().zip(centers) {
            let areas = build_areas(cloud, cs, cfg.k, with_metric)?;
            blocks.push(area_input_rows::<T>(&areas, cfg.mfc)?);
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let rows = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
        let rows = tape.constant(rows);
        let (area_feats, u) = encode_areas(tape, rows, cfg.k, &self.area, &bound.area, mode, rng)?;
        updates.area = u;
        let (g2, u) = aggregate_global(tape, area_feats, cfg.m, &self.global, &bound.global, mode, rng)?;
        updates.global = u;
        Ok((area_feats, g2))
    }

    /// Classification forward pass over a batch. Logits are `batch x classes`.
    pub fn forward_classify(&self, clouds: &[&PointCloud], mode: Mode, rng: &mut dyn RngCore) -> Result<Pass<T>> {
        let cfg = &self.config;
        if cfg.task != Task::Classify {
            return Err(Error::config("classification pass on a segmentation model"));
        }
        if clouds.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut updates = Updates::default();
        let (g1, cpl) = match &self.cpl {
            Some(stack) => {
                let (batch, u) = cpl_forward(&mut tape, clouds, stack, &bound.cpl, cfg.m, mode, rng)?;
                updates.cpl = u;
                (Some(batch.g1), batch.outputs)
            }
            None => (None, Vec::new()),
        };
        let centers = self.centers_for(clouds, &cpl)?;
        let (_, g2) = self.encode_local(&mut tape, clouds, &centers, &bound, &mut updates, mode, rng)?;
        let g = match (cfg.use_g1, g1) {
            (true, Some(g1)) => tape.concat(&[g1, g2])?,
            (true, None) => return Err(Error::config("use_g1 set but no CPL encoder")),
            (false, _) => g2,
        };
        let (outs, u) = self.head.forward(&mut tape, g, &bound.head, mode, rng)?;
        updates.head = u;
        let logits = *outs.last().unwrap();
        Ok(Pass {
            tape,
            bound,
            updates,
            logits,
            g,
            cpl,
            centers,
            row_offsets: (0..=clouds.len()).collect(),
        })
    }

    /// Part segmentation forward pass. `object_classes[b]` is the shape class
    /// of cloud `b`; logits are `sum(n) x parts`.
    pub fn forward_segment(
        &self,
        clouds: &[&PointCloud],
        object_classes: &[usize],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Pass<T>> {
        let cfg = &self.config;
        if cfg.task != Task::Segment {
            return Err(Error::config("segmentation pass on a classification model"));
        }
        if clouds.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if object_classes.len() != clouds.len() {
            return Err(Error::shape("one object class per cloud required"));
        }
        if let Some(&bad) = object_classes.iter().find(|&&c| c >= cfg.object_classes) {
            return Err(Error::invalid(format!(
                "object class {bad} out of range for {} classes",
                cfg.object_classes
            )));
        }
        let stack = self
            .cpl
            .as_ref()
            .ok_or_else(|| Error::config("segmentation model without CPL encoder"))?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut updates = Updates::default();
        let (batch, u) = cpl_forward(&mut tape, clouds, stack, &bound.cpl, cfg.m, mode, rng)?;
        updates.cpl = u;
        let centers = self.centers_for(clouds, &batch.outputs)?;
        let (area_feats, g2) = self.encode_local(&mut tape, clouds, &centers, &bound, &mut updates, mode, rng)?;
        let g = if cfg.use_g1 { tape.concat(&[batch.g1, g2])? } else { g2 };

        let offsets = cloud_offsets(clouds);
        let mut interp_rows = Vec::with_capacity(*offsets.last().unwrap());
        let mut g_rows = Vec::with_capacity(interp_rows.capacity());
        let mut onehot = Array2::<T>::zeros((*offsets.last().unwrap(), cfg.object_classes));
        let mut r = 0;
        for (b, cloud) in clouds.iter().enumerate() {
            let base = b * cfg.m;
            for p in cloud.coords() {
                let w = idw_weights(p, &centers[b], cfg.k_interp)?;
                interp_rows.push((
                    base + w.anchor,
                    w.others.iter().map(|&(i, wi)| (base + i, T::of(wi))).collect(),
                ));
                g_rows.push(vec![(b, T::one())]);
                onehot[[r, object_classes[b]]] = T::one();
                r += 1;
            }
        }
        let interp = tape.interpolate(area_feats, interp_rows)?;
        let g_per_point = tape.gather(g, g_rows)?;
        let onehot = tape.constant(onehot);
        let x = tape.concat(&[interp, batch.point_features, g_per_point, onehot])?;
        let (outs, u) = self.head.forward(&mut tape, x, &bound.head, mode, rng)?;
        updates.head = u;
        let logits = *outs.last().unwrap();
        Ok(Pass {
            tape,
            bound,
            updates,
            logits,
            g,
            cpl: batch.outputs,
            centers,
            row_offsets: offsets,
        })
    }
}

fn block_of<T: Real>(name: String, shape: Vec<usize>, values: impl Iterator<Item = T>) -> TensorBlock {
    TensorBlock {
        name,
        shape,
        values: values.map(|v| v.to_f32().unwrap()).collect(),
    }
}

impl<T: Real> NetworkParams<T> {
    /// Serializes weights, running statistics and (optionally) Adam state.
    pub fn to_checkpoint(&self, adam: Option<&AdamState<T>>) -> Checkpoint {
        let mut params = Vec::new();
        for (name, t) in self.tensors() {
            params.push(block_of(name, vec![t.nrows(), t.ncols()], t.iter().copied()));
        }
        for (name, b) in self.buffers() {
            params.push(block_of(name, vec![b.len()], b.iter().copied()));
        }
        let optimizer = adam.map(|st| {
            let mut tensors = Vec::new();
            let names: Vec<String> = self.tensors().into_iter().map(|(n, _)| n).collect();
            for (prefix, moments) in [("adam.m", &st.m), ("adam.v", &st.v)] {
                for (name, t) in names.iter().zip(moments) {
                    tensors.push(block_of(
                        format!("{prefix}.{name}"),
                        vec![t.nrows(), t.ncols()],
                        t.iter().copied(),
                    ));
                }
            }
            OptimizerBlock {
                step: st.step_count,
                lr: st.lr,
                beta1: st.beta1,
                beta2: st.beta2,
                eps: st.eps,
                tensors,
            }
        });
        Checkpoint {
            config: self.config.to_text(),
            params,
            optimizer,
        }
    }

    /// Rebuilds parameters (and Adam state, if stored) from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Option<AdamState<T>>)> {
        let config = ModelConfig::from_text(&ckpt.config)?;
        let mut params = Self::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        let buffer_names: Vec<String> = params.buffers().into_iter().map(|(n, _)| n).collect();
        let lookup = |blocks: &[TensorBlock], name: &str, len: usize| -> Result<Vec<T>> {
            let b = blocks
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor '{name}'")))?;
            if b.values.len() != len {
                return Err(Error::Data(format!("tensor '{name}' has wrong size")));
            }
            Ok(b.values.iter().map(|&v| T::of(v as f64)).collect())
        };
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            let vals = lookup(&ckpt.params, name, t.len())?;
            t.iter_mut().zip(vals).for_each(|(d, v)| *d = v);
        }
        for (name, b) in buffer_names.iter().zip(params.buffers_mut()) {
            let vals = lookup(&ckpt.params, name, b.len())?;
            b.iter_mut().zip(vals).for_each(|(d, v)| *d = v);
        }
        let adam = match &ckpt.optimizer {
            None => None,
            Some(o) => {
                let mut st = AdamState::new(params.shapes(), o.lr);
                st.step_count = o.step;
                st.beta1 = o.beta1;
                st.beta2 = o.beta2;
                st.eps = o.eps;
                for (prefix, moments) in [("adam.m", &mut st.m), ("adam.v", &mut st.v)] {
                    for (name, t) in names.iter().zip(moments.iter_mut()) {
                        let vals = lookup(&o.tensors, &format!("{prefix}.{name}"), t.len())?;
                        t.iter_mut().zip(vals).for_each(|(d, v)| *d = v);
                    }
                }
                Some(st)
            }
        };
        Ok((params, adam))
    }
}

/// Probabilities for one cloud, with logits.
pub fn classify_forward<T: Real>(
    pc: &PointCloud,
    params: &NetworkParams<T>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let pass = params.forward_classify(&[pc], mode, rng)?;
    let probs = pass.probabilities().row(0).to_vec();
    let logits = pass
        .tape
        .value(pass.logits)
        .row(0)
        .iter()
        .map(|v| v.to_f64().unwrap())
        .collect();
    Ok((probs, logits))
}

/// Per-point part probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutput {
    /// `n x parts`, rows sum to one.
    pub per_point_scores: Array2<f64>,
}

impl SegmentationOutput {
    pub fn labels(&self) -> Vec<usize> {
        self.per_point_scores
            .rows()
            .into_iter()
            .map(|r| super::metrics::argmax(&r.to_vec()))
            .collect()
    }
}

/// Segments one cloud given the one-hot encoding of its object class.
pub fn segment_forward<T: Real>(
    pc: &PointCloud,
    class_onehot: &[f64],
    params: &NetworkParams<T>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<SegmentationOutput> {
    if class_onehot.len() != params.config.object_classes
        || class_onehot.iter().filter(|&&v| v == 1.0).count() != 1
        || class_onehot.iter().any(|&v| v != 0.0 && v != 1.0)
    {
        return Err(Error::invalid("class vector is not a valid one-hot"));
    }
    let class = class_onehot.iter().position(|&v| v == 1.0).unwrap();
    let pass = params.forward_segment(&[pc], &[class], mode, rng)?;
    Ok(SegmentationOutput {
        per_point_scores: pass.probabilities(),
    })
}
