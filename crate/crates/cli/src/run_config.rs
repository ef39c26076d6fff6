use std::path::{Path, PathBuf};

use clap::Args;
use localnet::data::{load_dataset, load_modelnet, load_shapenet_part, Dataset, ShapeKind};
use localnet::network::{parse_key_values, parse_num, ModelConfig, Task};
use localnet::train::TrainConfig;
use localnet::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Flags shared by the commands that build or train a model.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Center source: cpl or fps.
    #[arg(long)]
    pub centers: Option<String>,
    /// Concatenate g1 into the global feature; `--use-g1 false` disables it.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub use_g1: Option<String>,
    /// Metric features: a letter A-H, `none`, `all`, or a list like `phi1,phi3`.
    #[arg(long)]
    pub mfc: Option<String>,
    #[arg(long)]
    pub votes: Option<usize>,
    /// Dataset: `synthetic`, `manifest:<path>`, `modelnet:<dir>` or `shapenet:<dir>`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Any other setting, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic,
    Manifest(PathBuf),
    ModelNet(PathBuf),
    ShapeNet(PathBuf),
}

impl DatasetSpec {
    fn parse(v: &str) -> Result<Self> {
        let v = v.trim();
        if v == "synthetic" {
            return Ok(Self::Synthetic);
        }
        let (kind, path) = v
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bad dataset '{v}'")))?;
        let path = PathBuf::from(path);
        match kind {
            "manifest" => Ok(Self::Manifest(path)),
            "modelnet" => Ok(Self::ModelNet(path)),
            "shapenet" => Ok(Self::ShapeNet(path)),
            _ => Err(Error::Config(format!("unknown dataset kind '{kind}'"))),
        }
    }
}

/// Everything a run needs, resolved from defaults, config file and flags.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: Task,
    /// Model keys applied after the dataset fixes class counts.
    model_overrides: Vec<(String, String)>,
    pub train: TrainConfig,
    pub votes: usize,
    pub dataset: DatasetSpec,
    pub synth_classes: Vec<ShapeKind>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub jitter: f64,
    pub data_seed: u64,
    pub max_per_class: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Classify,
            model_overrides: Vec::new(),
            train: TrainConfig::classification(60, 0),
            votes: 10,
            dataset: DatasetSpec::Synthetic,
            synth_classes: vec![
                ShapeKind::Sphere,
                ShapeKind::Cube,
                ShapeKind::Cylinder,
                ShapeKind::Plane,
            ],
            train_per_class: 50,
            test_per_class: 20,
            points: 256,
            jitter: 0.0,
            data_seed: 0,
            max_per_class: None,
        }
    }
}

impl RunConfig {
    pub fn load(flags: &RunFlags) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(path) = &flags.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            pairs.extend(parse_key_values(&text)?);
        }
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        flag("seed", flags.seed.map(|v| v.to_string()));
        flag("epochs", flags.epochs.map(|v| v.to_string()));
        flag("m", flags.m.map(|v| v.to_string()));
        flag("k", flags.k.map(|v| v.to_string()));
        flag("centers", flags.centers.clone());
        flag("use_g1", flags.use_g1.clone());
        flag("mfc", flags.mfc.clone());
        flag("votes", flags.votes.map(|v| v.to_string()));
        flag("dataset", flags.dataset.clone());
        for s in &flags.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{s}'")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        // The task decides the recipe defaults, so it goes first.
        if let Some((_, t)) = pairs.iter().rev().find(|(k, _)| k == "task") {
            cfg.task = t.parse()?;
            cfg.train = TrainConfig::for_task(cfg.task, cfg.train.epochs, cfg.train.seed);
        }
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "task" => {}
            "epochs" => self.train.epochs = parse_num(key, v)?,
            "seed" => self.train.seed = parse_num(key, v)?,
            "batch_size" => self.train.batch_size = parse_num(key, v)?,
            "lr" => self.train.lr = parse_num(key, v)?,
            "lr_decay" => self.train.lr_decay = parse_num(key, v)?,
            "decay_every" => self.train.decay_every = parse_num(key, v)?,
            "scale_lo" => self.train.augment.scale_lo = parse_num(key, v)?,
            "scale_hi" => self.train.augment.scale_hi = parse_num(key, v)?,
            "shift" => self.train.augment.shift_range = parse_num(key, v)?,
            "noise" => self.train.augment.noise_sigma = parse_num(key, v)?,
            "votes" => self.votes = parse_num(key, v)?,
            "dataset" => self.dataset = DatasetSpec::parse(v)?,
            "classes" => {
                self.synth_classes = v.split(',').map(|s| s.parse()).collect::<Result<_>>()?;
            }
            "train_per_class" => self.train_per_class = parse_num(key, v)?,
            "test_per_class" => self.test_per_class = parse_num(key, v)?,
            "points" => self.points = parse_num(key, v)?,
            "jitter" => self.jitter = parse_num(key, v)?,
            "data_seed" => self.data_seed = parse_num(key, v)?,
            "max_per_class" => self.max_per_class = Some(parse_num(key, v)?),
            _ => {
                // Validate model keys now; apply them once class counts are known.
                let mut probe = ModelConfig::classifier(2);
                if !probe.set(key, v)? {
                    return Err(Error::Config(format!("unknown setting '{key}'")));
                }
                self.model_overrides.push((key.to_string(), v.to_string()));
            }
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.data_seed);
        let ds = match &self.dataset {
            DatasetSpec::Synthetic => Dataset::synthetic(
                &self.synth_classes,
                self.train_per_class,
                self.test_per_class,
                self.points,
                self.jitter,
                &mut rng,
            )?,
            DatasetSpec::Manifest(p) => load_dataset(p)?,
            DatasetSpec::ModelNet(p) => load_modelnet(p, self.points, self.max_per_class, &mut rng)?,
            DatasetSpec::ShapeNet(p) => load_shapenet_part(p, self.points, self.max_per_class, &mut rng)?,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Model configuration for a dataset: task defaults, class counts from
    /// the data, then explicit settings.
    pub fn model_for(&self, ds: &Dataset) -> Result<ModelConfig> {
        let mut model = match self.task {
            Task::Classify => ModelConfig::classifier(ds.class_count()),
            Task::Segment => ModelConfig::segmenter(ds.part_count(), ds.class_count()),
        };
        for (k, v) in &self.model_overrides {
            model.set(k, v)?;
        }
        model.validate()?;
        Ok(model)
    }

    /// Resolved settings as `key = value` text.
    pub fn describe(&self, model: &ModelConfig) -> String {
        let ds = match &self.dataset {
            DatasetSpec::Synthetic => "synthetic".to_string(),
            DatasetSpec::Manifest(p) => format!("manifest:{}", p.display()),
            DatasetSpec::ModelNet(p) => format!("modelnet:{}", p.display()),
            DatasetSpec::ShapeNet(p) => format!("shapenet:{}", p.display()),
        };
        let t = &self.train;
        let classes: Vec<&str> = self.synth_classes.iter().map(|k| k.name()).collect();
        format!(
            "{}epochs = {}\nseed = {}\nbatch_size = {}\nlr = {}\nlr_decay = {}\ndecay_every = {}\n\
             scale_lo = {}\nscale_hi = {}\nshift = {}\nnoise = {}\nvotes = {}\ndataset = {ds}\n\
             classes = {}\ntrain_per_class = {}\ntest_per_class = {}\npoints = {}\njitter = {}\ndata_seed = {}\n",
            model.to_text(),
            t.epochs,
            t.seed,
            t.batch_size,
            t.lr,
            t.lr_decay,
            t.decay_every,
            t.augment.scale_lo,
            t.augment.scale_hi,
            t.augment.shift_range,
            t.augment.noise_sigma,
            self.votes,
            classes.join(","),
            self.train_per_class,
            self.test_per_class,
            self.points,
            self.jitter,
            self.data_seed,
        )
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}
