use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Dataset, LabeledSample};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// CSV text with header `x,y,z` or `x,y,z,label`. Coordinates use the
/// shortest round-trip representation, so reading back is bit-exact.
pub fn points_to_csv(pc: &PointCloud, labels: Option<&[usize]>) -> Result<String> {
    if let Some(l) = labels {
        if l.len() != pc.len() {
            return Err(Error::shape(format!("{} labels for {} points", l.len(), pc.len())));
        }
    }
    let mut s = String::from(if labels.is_some() { "x,y,z,label\n" } else { "x,y,z\n" });
    for (i, p) in pc.coords().iter().enumerate() {
        let _ = write!(s, "{},{},{}", p[0], p[1], p[2]);
        if let Some(l) = labels {
            let _ = write!(s, ",{}", l[i]);
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn parse_points_csv(text: &str, path: &Path) -> Result<(PointCloud, Option<Vec<usize>>)> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let labeled = match header.trim() {
        "x,y,z" => false,
        "x,y,z,label" => true,
        h => return Err(err(1, format!("unexpected header '{h}'"))),
    };
    let width = if labeled { 4 } else { 3 };
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != width {
            return Err(err(ln, format!("expected {width} fields, found {}", fields.len())));
        }
        let mut p: Point3 = [0.0; 3];
        for a in 0..3 {
            p[a] = fields[a]
                .trim()
                .parse()
                .map_err(|_| err(ln, format!("bad coordinate '{}'", fields[a])))?;
        }
        coords.push(p);
        if labeled {
            labels.push(
                fields[3]
                    .trim()
                    .parse()
                    .map_err(|_| err(ln, format!("bad label '{}'", fields[3])))?,
            );
        }
    }
    let cloud = PointCloud::new(coords).map_err(|e| err(1, e.to_string()))?;
    Ok((cloud, labeled.then_some(labels)))
}

pub fn write_points_csv(path: impl AsRef<Path>, pc: &PointCloud, labels: Option<&[usize]>) -> Result<()> {
    write(path.as_ref(), &points_to_csv(pc, labels)?)
}

pub fn read_points_csv(path: impl AsRef<Path>) -> Result<(PointCloud, Option<Vec<usize>>)> {
    let path = path.as_ref();
    parse_points_csv(&read(path)?, path)
}

/// One manifest line: `relative_path,class_name[,split]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class_name: String,
    pub split: String,
}

/// Parsed manifest. A `# classes: a,b,c` line fixes the class order;
/// otherwise classes are numbered by first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let mut class_names: Vec<String> = Vec::new();
    let mut fixed = false;
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(list) = comment.trim().strip_prefix("classes:") {
                class_names = list
                    .split(',')
                    .map(|c| c.trim().to_string())
                    .filter(|c| !c.is_empty())
                    .collect();
                fixed = true;
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(2..=3).contains(&fields.len()) || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected relative_path,class_name[,split]".into(),
            });
        }
        let class_name = fields[1].to_string();
        if !class_names.contains(&class_name) {
            if fixed {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("class '{class_name}' not in class list"),
                });
            }
            class_names.push(class_name.clone());
        }
        entries.push(ManifestEntry {
            path: PathBuf::from(fields[0]),
            class_name,
            split: fields.get(2).map_or("train", |s| s).to_string(),
        });
    }
    Ok(Manifest { class_names, entries })
}

/// Loads a manifest and every point file it lists (paths relative to the
/// manifest's directory). Splits other than `train` and `test` are an error.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = parse_manifest(&read(manifest_path)?, manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut ds = Dataset {
        class_names: manifest.class_names.clone(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for e in &manifest.entries {
        let (cloud, part_labels) = read_points_csv(root.join(&e.path))?;
        let label = manifest.class_names.iter().position(|c| *c == e.class_name).unwrap();
        let sample = LabeledSample {
            cloud,
            shape_label: Some(label),
            part_labels,
        };
        match e.split.as_str() {
            "train" => ds.train.push(sample),
            "test" => ds.test.push(sample),
            s => return Err(Error::Data(format!("unknown split '{s}' for {}", e.path.display()))),
        }
    }
    Ok(ds)
}

/// Writes every sample as `<split>/<index>.csv` plus `manifest.csv`.
/// Returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut manifest = format!("# classes: {}\n", ds.class_names.join(","));
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        for (i, s) in samples.iter().enumerate() {
            let label = s
                .shape_label
                .ok_or_else(|| Error::Data("sample without shape label".into()))?;
            let name = ds
                .class_names
                .get(label)
                .ok_or_else(|| Error::Data(format!("label {label} has no class name")))?;
            let rel = format!("{split}/{i:05}.csv");
            write_points_csv(dir.join(&rel), &s.cloud, s.part_labels.as_deref())?;
            let _ = writeln!(manifest, "{rel},{name},{split}");
        }
    }
    let path = dir.join("manifest.csv");
    write(&path, &manifest)?;
    Ok(path)
}

/// ASCII PLY with optional per-vertex colors.
pub fn ply_text(coords: &[Point3], colors: Option<&[[u8; 3]]>) -> Result<String> {
    if let Some(c) = colors {
        if c.len() != coords.len() {
            return Err(Error::shape("one color per vertex required"));
        }
    }
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        coords.len()
    );
    if colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in coords.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        if let Some(c) = colors {
            let _ = write!(s, " {} {} {}", c[i][0], c[i][1], c[i][2]);
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_ply(path: impl AsRef<Path>, coords: &[Point3], colors: Option<&[[u8; 3]]>) -> Result<()> {
    write(path.as_ref(), &ply_text(coords, colors)?)
}

/// Distinct colors for label ids.
pub fn label_color(label: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 10] = [
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [140, 86, 75],
        [227, 119, 194],
        [127, 127, 127],
        [188, 189, 34],
        [23, 190, 207],
    ];
    PALETTE[label % PALETTE.len()]
}

/// Writes a text file, creating parent directories.
pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    write(path.as_ref(), text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let pc = PointCloud::new(vec![[0.1, -1.0 / 3.0, 1e-300], [std::f64::consts::PI, 2.5e10, -0.0]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_points_csv(&path, &pc, Some(&[3, 0])).unwrap();
        let (back, labels) = read_points_csv(&path).unwrap();
        assert_eq!(back, pc);
        assert_eq!(labels, Some(vec![3, 0]));
        for (a, b) in back.coords().iter().flatten().zip(pc.coords().iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_errors_carry_line() {
        let p = Path::new("x.csv");
        assert!(matches!(
            parse_points_csv("a,b\n", p),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_points_csv("x,y,z\n1,2,3\n1,2\n", p),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("# classes: b,a\nx.csv,a,test\ny.csv,b\n", Path::new("m")).unwrap();
        assert_eq!(m.class_names, vec!["b", "a"]);
        assert_eq!(m.entries[1].split, "train");
        let m = parse_manifest("x.csv,a\ny.csv,b\nz.csv,a\n", Path::new("m")).unwrap();
        assert_eq!(m.class_names, vec!["a", "b"]);
        assert!(parse_manifest("# classes: a\ny.csv,b\n", Path::new("m")).is_err());
        assert!(parse_manifest("onlypath\n", Path::new("m")).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let ds = Dataset {
            class_names: vec!["p".into(), "q".into()],
            train: vec![LabeledSample {
                cloud: PointCloud::new(vec![[1.0, 2.0, 3.0]]).unwrap(),
                shape_label: Some(1),
                part_labels: Some(vec![2]),
            }],
            test: vec![LabeledSample {
                cloud: PointCloud::new(vec![[0.5, 0.25, 0.125]]).unwrap(),
                shape_label: Some(0),
                part_labels: None,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(manifest).unwrap(), ds);
    }

    #[test]
    fn ply_header() {
        let s = ply_text(&[[0.0, 1.0, 2.0]], Some(&[[1, 2, 3]])).unwrap();
        assert!(s.starts_with("ply\nformat ascii 1.0\nelement vertex 1\n"));
        assert!(s.ends_with("end_header\n0 1 2 1 2 3\n"));
    }
}
