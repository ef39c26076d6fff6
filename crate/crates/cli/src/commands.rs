use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use localnet::autodiff::{read_checkpoint, write_checkpoint};
use localnet::data::{
    label_color, load_off, read_points_csv, sample_mesh_uniform, write_dataset, write_ply, write_points_csv,
    write_text, Dataset, LabeledSample, ShapeKind,
};
use localnet::features::MfcMask;
use localnet::geometry::{farthest_point_sampling, normalize_unit_sphere, PointCloud};
use localnet::network::{vote_segment, ModelConfig, NetworkParams, Task, VOTE_SCALE};
use localnet::train::{
    class_eval_from, log_csv, restricted_argmax, train, vote_rng, vote_sample, EpochLog, TrainOutcome,
};
use localnet::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::run_config::{ensure_dir, RunConfig, RunFlags};

/// Worker pool of `jobs` threads, capped by `LOCALNET_THREADS`.
pub fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    let cap = std::env::var("LOCALNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&c| c > 0)
        .unwrap_or(usize::MAX);
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.clamp(1, cap))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn load_params(path: &Path) -> Result<NetworkParams<f32>> {
    let ckpt = read_checkpoint(path)?;
    Ok(NetworkParams::from_checkpoint(&ckpt)?.0)
}

/// Trains and writes `metrics.csv`, `model.ckpt` and `run.cfg` into `out`.
/// The metric log is rewritten after every epoch, so a run that fails
/// midway keeps its rows.
pub fn cmd_train(flags: &RunFlags, out: &Path) -> Result<TrainOutcome> {
    let rc = RunConfig::load(flags)?;
    let ds = rc.load_dataset()?;
    let model = rc.model_for(&ds)?;
    ensure_dir(out)?;
    write_text(out.join("run.cfg"), &rc.describe(&model))?;
    let log_path = out.join("metrics.csv");
    write_text(&log_path, &log_csv(&[]))?;
    let mut rows: Vec<EpochLog> = Vec::new();
    let mut write_err = None;
    let outcome = train(&model, &rc.train, &ds, |row| {
        eprintln!("{}", row.csv_row());
        rows.push(row.clone());
        if let Err(e) = write_text(&log_path, &log_csv(&rows)) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    write_checkpoint(
        &out.join("model.ckpt"),
        &outcome.params.to_checkpoint(Some(&outcome.adam)),
    )?;
    Ok(outcome)
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub task: String,
    pub checkpoint: String,
    pub samples: usize,
    pub votes: usize,
    pub accuracy: Option<f64>,
    pub accuracy_voted: Option<f64>,
    pub miou: Option<f64>,
    pub miou_voted: Option<f64>,
}

/// Evaluates the test split with and without voting. Writes `report.json`
/// and a per-sample `report.csv`.
pub fn cmd_eval(checkpoint: &Path, flags: &RunFlags, out: &Path, jobs: usize) -> Result<EvalReport> {
    let rc = RunConfig::load(flags)?;
    let params = load_params(checkpoint)?;
    let ds = rc.load_dataset()?;
    localnet::train::check_dataset(&params.config, &ds)?;
    if rc.votes == 0 {
        return Err(Error::Config("votes must be at least 1".into()));
    }
    let seed = rc.train.seed;
    let samples = &ds.test;
    let pool = pool(jobs)?;
    let mut csv = String::new();
    let mut report = EvalReport {
        task: params.config.task.to_string(),
        checkpoint: checkpoint.display().to_string(),
        samples: samples.len(),
        votes: rc.votes,
        accuracy: None,
        accuracy_voted: None,
        miou: None,
        miou_voted: None,
    };
    match params.config.task {
        Task::Classify => {
            let rows: Vec<(Vec<f64>, Vec<f64>)> = pool.install(|| {
                samples
                    .par_iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let plain = single_probs(&params, &s.cloud)?;
                        let voted = vote_sample(&params, s, rc.votes, seed, i)?;
                        Ok((plain, voted))
                    })
                    .collect::<Result<_>>()
            })?;
            let (plain, voted): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
            let plain = class_eval_from(samples, plain)?;
            let voted = class_eval_from(samples, voted)?;
            csv.push_str("sample,true_label,predicted,predicted_voted\n");
            for (i, s) in samples.iter().enumerate() {
                let _ = writeln!(
                    csv,
                    "{i},{},{},{}",
                    s.shape_label.unwrap(),
                    plain.predictions[i],
                    voted.predictions[i]
                );
            }
            report.accuracy = Some(plain.accuracy);
            report.accuracy_voted = Some(voted.accuracy);
        }
        Task::Segment => {
            let parts = ds.parts_per_class();
            let rows: Vec<(f64, f64)> = pool.install(|| {
                samples
                    .par_iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let class = s.shape_label.unwrap();
                        let truth = s.part_labels.as_ref().unwrap();
                        let allowed = &parts[class];
                        let plain = vote_segment(&s.cloud, class, &params, 1, (1.0, 1.0), &mut vote_rng(seed, i))?;
                        let voted =
                            vote_segment(&s.cloud, class, &params, rc.votes, VOTE_SCALE, &mut vote_rng(seed, i))?;
                        let iou = |p: &ndarray::Array2<f64>| {
                            localnet::network::shape_iou(
                                &restricted_argmax(p, 0..s.cloud.len(), allowed),
                                truth,
                                allowed,
                            )
                        };
                        Ok((iou(&plain)?, iou(&voted)?))
                    })
                    .collect::<Result<_>>()
            })?;
            csv.push_str("sample,class,iou,iou_voted\n");
            for (i, (a, b)) in rows.iter().enumerate() {
                let _ = writeln!(csv, "{i},{},{a},{b}", samples[i].shape_label.unwrap());
            }
            let mean = |f: fn(&(f64, f64)) -> f64| {
                if rows.is_empty() {
                    0.0
                } else {
                    rows.iter().map(f).sum::<f64>() / rows.len() as f64
                }
            };
            report.miou = Some(mean(|r| r.0));
            report.miou_voted = Some(mean(|r| r.1));
        }
    }
    ensure_dir(out)?;
    write_text(out.join("report.csv"), &csv)?;
    json(&out.join("report.json"), &report)?;
    Ok(report)
}

fn single_probs(params: &NetworkParams<f32>, cloud: &PointCloud) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = params.forward_classify(&[cloud], localnet::autodiff::Mode::Eval, &mut rng)?;
    Ok(pass.probabilities().row(0).to_vec())
}

/// Input of `predict`: explicit point files or the test split of a dataset.
pub struct PredictInputs {
    pub files: Vec<PathBuf>,
    /// Object class for segmentation of explicit files.
    pub class: Option<usize>,
}

/// Classification: `predictions.csv` with one row per sample. Segmentation:
/// per-point CSV and colored PLY per sample under `out`.
pub fn cmd_predict(checkpoint: &Path, inputs: &PredictInputs, flags: &RunFlags, out: &Path, jobs: usize) -> Result<()> {
    let rc = RunConfig::load(flags)?;
    let params = load_params(checkpoint)?;
    let samples: Vec<LabeledSample> = if inputs.files.is_empty() {
        rc.load_dataset()?.test
    } else {
        inputs
            .files
            .iter()
            .map(|f| {
                let (cloud, _) = read_points_csv(f)?;
                Ok(LabeledSample {
                    cloud,
                    shape_label: inputs.class,
                    part_labels: None,
                })
            })
            .collect::<Result<_>>()?
    };
    let seed = rc.train.seed;
    let votes = rc.votes.max(1);
    let pool = pool(jobs)?;
    ensure_dir(out)?;
    match params.config.task {
        Task::Classify => {
            let probs: Vec<Vec<f64>> = pool.install(|| {
                samples
                    .par_iter()
                    .enumerate()
                    .map(|(i, s)| {
                        if votes > 1 {
                            vote_sample(&params, s, votes, seed, i)
                        } else {
                            single_probs(&params, &s.cloud)
                        }
                    })
                    .collect::<Result<_>>()
            })?;
            let c = params.config.class_count;
            let mut csv = String::from("sample,true_label,predicted_label");
            for j in 0..c {
                let _ = write!(csv, ",p_{j}");
            }
            csv.push('\n');
            for (i, (s, p)) in samples.iter().zip(&probs).enumerate() {
                let truth = s.shape_label.map_or(String::new(), |l| l.to_string());
                let _ = write!(csv, "{i},{truth},{}", localnet::network::argmax(p));
                for v in p {
                    let _ = write!(csv, ",{v}");
                }
                csv.push('\n');
            }
            write_text(out.join("predictions.csv"), &csv)
        }
        Task::Segment => {
            let all_parts: Vec<usize> = (0..params.config.class_count).collect();
            for (i, s) in samples.iter().enumerate() {
                let class = s
                    .shape_label
                    .ok_or_else(|| Error::Config("segmentation needs --class for point files".into()))?;
                let scale = if votes > 1 { VOTE_SCALE } else { (1.0, 1.0) };
                let probs = vote_segment(&s.cloud, class, &params, votes, scale, &mut vote_rng(seed, i))?;
                let labels = restricted_argmax(&probs, 0..s.cloud.len(), &all_parts);
                write_points_csv(out.join(format!("{i:05}.csv")), &s.cloud, Some(&labels))?;
                let colors: Vec<[u8; 3]> = labels.iter().map(|&l| label_color(l)).collect();
                write_ply(out.join(format!("{i:05}.ply")), s.cloud.coords(), Some(&colors))?;
            }
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterMethod {
    Cpl,
    Fps,
    Both,
}

impl std::str::FromStr for CenterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpl" => Ok(Self::Cpl),
            "fps" => Ok(Self::Fps),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!("unknown method '{s}'"))),
        }
    }
}

fn centers_csv(cloud: &PointCloud, counts: &[usize]) -> String {
    let mut s = String::from("x,y,z,is_center,times_selected\n");
    for (p, &c) in cloud.coords().iter().zip(counts) {
        let _ = writeln!(s, "{},{},{},{},{c}", p[0], p[1], p[2], u8::from(c > 0));
    }
    s
}

fn centers_ply(path: &Path, cloud: &PointCloud, counts: &[usize]) -> Result<()> {
    let colors: Vec<[u8; 3]> = counts
        .iter()
        .map(|&c| if c > 0 { [220, 40, 40] } else { [170, 170, 170] })
        .collect();
    write_ply(path, cloud.coords(), Some(&colors))
}

/// Writes the cloud plus FPS and/or CPL centers. Without a checkpoint the
/// model is freshly initialized from the run settings. Returns the CPL
/// selection counts when CPL was requested.
pub fn cmd_inspect_centers(
    checkpoint: Option<&Path>,
    input: &Path,
    method: CenterMethod,
    flags: &RunFlags,
    out: &Path,
) -> Result<Option<Vec<usize>>> {
    let params = match checkpoint {
        Some(p) => load_params(p)?,
        None => {
            let rc = RunConfig::load(flags)?;
            let ds = Dataset {
                class_names: vec!["a".into(), "b".into()],
                ..Default::default()
            };
            let model = rc.model_for(&ds)?;
            NetworkParams::init(&model, &mut ChaCha8Rng::seed_from_u64(rc.train.seed))?
        }
    };
    let (cloud, _) = read_points_csv(input)?;
    let n = cloud.len();
    ensure_dir(out)?;
    write_ply(out.join("cloud.ply"), cloud.coords(), None)?;
    if matches!(method, CenterMethod::Fps | CenterMethod::Both) {
        let idx = farthest_point_sampling(&cloud, params.config.m, params.config.fps_seed.resolve(&cloud))?;
        let mut counts = vec![0; n];
        idx.iter().for_each(|&i| counts[i] += 1);
        write_text(out.join("centers_fps.csv"), &centers_csv(&cloud, &counts))?;
        centers_ply(&out.join("centers_fps.ply"), &cloud, &counts)?;
    }
    if matches!(method, CenterMethod::Cpl | CenterMethod::Both) {
        let cpl = params.critical_points(&[&cloud])?.remove(0);
        let counts = cpl.times_selected(n);
        write_text(out.join("centers_cpl.csv"), &centers_csv(&cloud, &counts))?;
        centers_ply(&out.join("centers_cpl.ply"), &cloud, &counts)?;
        return Ok(Some(counts));
    }
    Ok(None)
}

/// One axis of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Default step of numeric ranges, the spacing of the published grids.
pub const GRID_STEP: usize = 32;

/// Parses `key=a..b[:step]`, `key=v1,v2,...` or, for `mfc`, letter ranges
/// like `A..H`.
pub fn parse_grid(spec: &str) -> Result<GridAxis> {
    let bad = || Error::Config(format!("bad grid '{spec}'"));
    let (key, vals) = spec.split_once('=').ok_or_else(bad)?;
    let key = key.trim().to_string();
    let vals = vals.trim();
    let values: Vec<String> = if let Some((lo, hi)) = vals.split_once("..") {
        if key == "mfc" {
            let (lo, hi) = (lo.trim(), hi.trim());
            let (Some(a), Some(b)) = (lo.chars().next(), hi.chars().next()) else {
                return Err(bad());
            };
            if lo.len() != 1
                || hi.len() != 1
                || MfcMask::from_letter(a).is_none()
                || MfcMask::from_letter(b).is_none()
                || a > b
            {
                return Err(bad());
            }
            (a..=b).map(|c| c.to_string()).collect()
        } else {
            let (hi, step) = match hi.split_once(':') {
                Some((h, s)) => (h, s.trim().parse::<usize>().map_err(|_| bad())?),
                None => (hi, GRID_STEP),
            };
            let lo: usize = lo.trim().parse().map_err(|_| bad())?;
            let hi: usize = hi.trim().parse().map_err(|_| bad())?;
            if step == 0 || lo > hi {
                return Err(bad());
            }
            (lo..=hi).step_by(step).map(|v| v.to_string()).collect()
        }
    } else {
        vals.split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect()
    };
    if values.is_empty() {
        return Err(bad());
    }
    Ok(GridAxis { key, values })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub settings: Vec<(String, String)>,
    pub test_metric: f64,
    pub final_train_loss: f64,
    pub mprime_mean: Option<f64>,
}

/// Trains once per grid point (cartesian product of the axes) and writes
/// `ablation.csv` and `ablation.json`.
pub fn cmd_ablate(flags: &RunFlags, axes: &[GridAxis], out: &Path, jobs: usize) -> Result<Vec<AblationRow>> {
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((axis.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    // Resolve every configuration up front so bad settings fail fast.
    let runs: Vec<(RunConfig, ModelConfig, Dataset)> = points
        .iter()
        .map(|p| {
            let mut f = flags.clone();
            f.set.extend(p.iter().map(|(k, v)| format!("{k}={v}")));
            let rc = RunConfig::load(&f)?;
            let ds = rc.load_dataset()?;
            let model = rc.model_for(&ds)?;
            Ok((rc, model, ds))
        })
        .collect::<Result<_>>()?;
    let pool = pool(jobs)?;
    let rows: Vec<AblationRow> = pool.install(|| {
        runs.par_iter()
            .zip(&points)
            .map(|((rc, model, ds), p)| {
                let o = train(model, &rc.train, ds, |_| {})?;
                let last = o.log.last();
                Ok(AblationRow {
                    settings: p.clone(),
                    test_metric: last.map_or(f64::NAN, |r| r.test_metric),
                    final_train_loss: last.map_or(f64::NAN, |r| r.train_loss),
                    mprime_mean: last.and_then(|r| r.mprime.map(|m| m.mean)),
                })
            })
            .collect::<Result<_>>()
    })?;
    let mut csv = String::new();
    for a in axes {
        let _ = write!(csv, "{},", a.key);
    }
    csv.push_str("test_metric,final_train_loss,mprime_mean\n");
    for r in &rows {
        for (_, v) in &r.settings {
            let _ = write!(csv, "{v},");
        }
        let mp = r.mprime_mean.map_or(String::new(), |m| m.to_string());
        let _ = writeln!(csv, "{},{},{mp}", r.test_metric, r.final_train_loss);
    }
    ensure_dir(out)?;
    write_text(out.join("ablation.csv"), &csv)?;
    json(&out.join("ablation.json"), &rows)?;
    Ok(rows)
}

pub fn cmd_sample_mesh(input: &Path, points: usize, seed: u64, normalize: bool, out: &Path) -> Result<PointCloud> {
    let mesh = load_off(input)?;
    let cloud = sample_mesh_uniform(&mesh, points, &mut ChaCha8Rng::seed_from_u64(seed))
        .map_err(|e| Error::Data(format!("{}: {e}", input.display())))?;
    let cloud = if normalize {
        normalize_unit_sphere(&cloud)
    } else {
        cloud
    };
    if out.extension().is_some_and(|e| e == "ply") {
        write_ply(out, cloud.coords(), None)?;
    } else {
        write_points_csv(out, &cloud, None)?;
    }
    Ok(cloud)
}

pub struct SynthArgs {
    pub classes: Vec<ShapeKind>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub jitter: f64,
    pub seed: u64,
}

/// Writes a synthetic dataset and returns its manifest path.
pub fn cmd_gen_synthetic(args: &SynthArgs, out: &Path) -> Result<PathBuf> {
    let ds = Dataset::synthetic(
        &args.classes,
        args.train_per_class,
        args.test_per_class,
        args.points,
        args.jitter,
        &mut ChaCha8Rng::seed_from_u64(args.seed),
    )?;
    write_dataset(out, &ds)
}
