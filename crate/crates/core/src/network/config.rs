use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MfcMask;
use crate::geometry::FpsSeed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Segment,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "classify" | "classification" => Ok(Task::Classify),
            "segment" | "segmentation" => Ok(Task::Segment),
            other => Err(Error::config(format!("unknown task '{other}'"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Classify => "classify",
            Task::Segment => "segment",
        })
    }
}

/// Where local-area centers come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterSource {
    /// Critical points of the CPL encoder.
    Cpl,
    /// Farthest point sampling.
    Fps,
}

impl FromStr for CenterSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cpl" => Ok(CenterSource::Cpl),
            "fps" => Ok(CenterSource::Fps),
            other => Err(Error::config(format!("unknown center source '{other}'"))),
        }
    }
}

impl std::fmt::Display for CenterSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CenterSource::Cpl => "cpl",
            CenterSource::Fps => "fps",
        })
    }
}

/// Architecture and ablation switches for both tasks.
///
/// The three classification ablation modes are `(Fps, use_g1 = false)`,
/// `(Fps, true)` and `(Cpl, true)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    /// Number of centers; also the CPL output width.
    pub m: usize,
    /// Neighbors per local area.
    pub k: usize,
    pub centers: CenterSource,
    pub use_g1: bool,
    pub mfc: MfcMask,
    /// Shape classes (classification) or part classes (segmentation).
    pub class_count: usize,
    /// Width of the object-class one-hot (segmentation only).
    pub object_classes: usize,
    /// CPL hidden widths; the final width is `m`.
    pub cpl_hidden: Vec<usize>,
    pub area_widths: Vec<usize>,
    pub global_widths: Vec<usize>,
    /// Hidden widths of the prediction head, before the score layer.
    pub head_widths: Vec<usize>,
    pub dropout: f64,
    /// Centers used per point when propagating features (segmentation).
    pub k_interp: usize,
    pub fps_seed: FpsSeed,
}

impl ModelConfig {
    /// Best classification configuration: m = 256, k = 128, CPL, all metric features.
    pub fn classifier(class_count: usize) -> Self {
        Self {
            task: Task::Classify,
            m: 256,
            k: 128,
            centers: CenterSource::Cpl,
            use_g1: true,
            mfc: MfcMask::ALL,
            class_count,
            object_classes: 0,
            cpl_hidden: vec![64, 128],
            area_widths: vec![64, 128],
            global_widths: vec![256, 1024],
            head_widths: vec![512, 256],
            dropout: 0.5,
            k_interp: 3,
            fps_seed: FpsSeed::Index(0),
        }
    }

    /// Segmentation: FPS centers with m = 512, no metric features, 256-wide
    /// area features and a 512-wide second global feature.
    pub fn segmenter(part_count: usize, object_classes: usize) -> Self {
        Self {
            task: Task::Segment,
            m: 512,
            k: 32,
            centers: CenterSource::Fps,
            use_g1: true,
            mfc: MfcMask::NONE,
            class_count: part_count,
            object_classes,
            cpl_hidden: vec![64, 128],
            area_widths: vec![64, 256],
            global_widths: vec![256, 512],
            head_widths: vec![256, 128],
            dropout: 0.5,
            k_interp: 3,
            fps_seed: FpsSeed::FarthestFromCentroid,
        }
    }

    /// Whether the CPL encoder is part of the network.
    pub fn has_cpl(&self) -> bool {
        self.task == Task::Segment || self.centers == CenterSource::Cpl || self.use_g1
    }

    pub fn d_area(&self) -> usize {
        *self.area_widths.last().unwrap_or(&0)
    }

    pub fn d_g2(&self) -> usize {
        *self.global_widths.last().unwrap_or(&0)
    }

    /// Width of the fused global feature `g`.
    pub fn d_g(&self) -> usize {
        self.d_g2() + if self.use_g1 { self.m } else { 0 }
    }

    pub fn d_point_features(&self) -> usize {
        *self.cpl_hidden.last().unwrap_or(&0)
    }

    pub fn head_input(&self) -> usize {
        match self.task {
            Task::Classify => self.d_g(),
            Task::Segment => self.d_area() + self.d_point_features() + self.d_g() + self.object_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::config(msg.to_string()));
        if self.m == 0 {
            return fail("m must be at least 1");
        }
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if self.class_count < 2 {
            return fail("need at least 2 classes");
        }
        if self.cpl_hidden.is_empty() || self.area_widths.is_empty() || self.global_widths.is_empty() {
            return fail("encoder width lists must be non-empty");
        }
        let widths = [
            &self.cpl_hidden,
            &self.area_widths,
            &self.global_widths,
            &self.head_widths,
        ];
        if widths.iter().any(|w| w.contains(&0)) {
            return fail("layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.k_interp == 0 {
            return fail("k_interp must be at least 1");
        }
        if self.task == Task::Segment {
            if self.centers != CenterSource::Fps {
                return fail("segmentation uses FPS centers");
            }
            if self.object_classes == 0 {
                return fail("segmentation needs object_classes >= 1");
            }
        }
        Ok(())
    }

    /// `key = value` lines, parseable by [`ModelConfig::from_text`].
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let seed = match self.fps_seed {
            FpsSeed::Index(i) => i.to_string(),
            FpsSeed::FarthestFromCentroid => "farthest".into(),
        };
        let mut s = String::new();
        let _ = writeln!(s, "task = {}", self.task);
        let _ = writeln!(s, "m = {}", self.m);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "centers = {}", self.centers);
        let _ = writeln!(s, "use_g1 = {}", self.use_g1);
        let _ = writeln!(s, "mfc = {}", self.mfc);
        let _ = writeln!(s, "class_count = {}", self.class_count);
        let _ = writeln!(s, "object_classes = {}", self.object_classes);
        let _ = writeln!(s, "cpl_hidden = {}", list(&self.cpl_hidden));
        let _ = writeln!(s, "area_widths = {}", list(&self.area_widths));
        let _ = writeln!(s, "global_widths = {}", list(&self.global_widths));
        let _ = writeln!(s, "head_widths = {}", list(&self.head_widths));
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "k_interp = {}", self.k_interp);
        let _ = writeln!(s, "fps_seed = {seed}");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_key_values(text)?;
        let task: Task = pairs
            .get("task")
            .ok_or_else(|| Error::config("missing key 'task'"))?
            .parse()?;
        let mut cfg = match task {
            Task::Classify => Self::classifier(2),
            Task::Segment => Self::segmenter(2, 1),
        };
        for (k, v) in &pairs {
            if k != "task" && !cfg.set(k, v)? {
                return Err(Error::config(format!("unknown model key '{k}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual form. Returns `false` for keys that
    /// are not model settings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "task" => self.task = value.parse()?,
            "m" => self.m = parse_num(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "centers" => self.centers = value.parse()?,
            "use_g1" => self.use_g1 = parse_bool(key, value)?,
            "mfc" => self.mfc = value.parse()?,
            "class_count" => self.class_count = parse_num(key, value)?,
            "object_classes" => self.object_classes = parse_num(key, value)?,
            "cpl_hidden" => self.cpl_hidden = parse_list(key, value)?,
            "area_widths" => self.area_widths = parse_list(key, value)?,
            "global_widths" => self.global_widths = parse_list(key, value)?,
            "head_widths" => self.head_widths = parse_list(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            "k_interp" => self.k_interp = parse_num(key, value)?,
            "fps_seed" => {
                self.fps_seed = match value.trim() {
                    "farthest" => FpsSeed::FarthestFromCentroid,
                    v => FpsSeed::Index(parse_num(key, v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are ignored.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected 'key = value'", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn parse_num<N: FromStr>(key: &str, v: &str) -> Result<N> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("bad value '{v}' for '{key}'")))
}

pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("bad boolean '{v}' for '{key}'"))),
    }
}

pub fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::classifier(4);
        c.m = 32;
        c.mfc = "phi2".parse().unwrap();
        c.head_widths = vec![];
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        let s = ModelConfig::segmenter(5, 3);
        assert_eq!(ModelConfig::from_text(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn ablation_dimensions() {
        let mut c = ModelConfig::classifier(4);
        assert_eq!(c.d_g(), 256 + 1024);
        assert!(c.has_cpl());
        c.centers = CenterSource::Fps;
        assert!(c.has_cpl());
        c.use_g1 = false;
        assert_eq!(c.d_g(), 1024);
        assert!(!c.has_cpl());
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::classifier(1);
        assert!(c.validate().is_err());
        c.class_count = 3;
        c.validate().unwrap();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut s = ModelConfig::segmenter(3, 2);
        s.centers = CenterSource::Cpl;
        assert!(s.validate().is_err());
        assert!(ModelConfig::from_text("task = classify\nbogus = 1").is_err());
        assert!(parse_key_values("no equals sign").is_err());
    }
}
