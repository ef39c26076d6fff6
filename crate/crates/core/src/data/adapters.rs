//! Readers for the public dataset directory layouts. Only used in
//! full-scale runs; CI exercises them on tiny fixtures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use super::mesh::{load_off, sample_mesh_uniform};
use super::{Dataset, LabeledSample};
use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_sphere, PointCloud};

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// `root/<class>/{train,test}/*.off`. Each mesh is sampled uniformly with
/// `n_points` points and normalized.
pub fn load_modelnet<R: Rng + ?Sized>(
    root: impl AsRef<Path>,
    n_points: usize,
    max_per_class: Option<usize>,
    rng: &mut R,
) -> Result<Dataset> {
    let root = root.as_ref();
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::Data(format!("no class directories under {}", root.display())));
    }
    let mut ds = Dataset {
        class_names: classes
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (label, class_dir) in classes.iter().enumerate() {
        for split in ["train", "test"] {
            let dir = class_dir.join(split);
            if !dir.is_dir() {
                continue;
            }
            let files: Vec<PathBuf> = sorted_entries(&dir)?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e == "off"))
                .take(max_per_class.unwrap_or(usize::MAX))
                .collect();
            for f in files {
                let mesh = load_off(&f)?;
                let cloud = sample_mesh_uniform(&mesh, n_points, rng)
                    .map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
                let sample = LabeledSample {
                    cloud: normalize_unit_sphere(&cloud),
                    shape_label: Some(label),
                    part_labels: None,
                };
                if split == "train" {
                    ds.train.push(sample);
                } else {
                    ds.test.push(sample);
                }
            }
        }
    }
    Ok(ds)
}

fn parse_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: format!("bad number '{t}'"),
                    })
                })
                .collect()
        })
        .collect()
}

/// Part-annotated layout: `synsetoffset2category.txt`,
/// `<synset>/points/<id>.pts`, `<synset>/points_label/<id>.seg` and
/// `train_test_split/shuffled_{train,test}_file_list.json`.
///
/// Part ids are made global by offsetting each category's 1-based labels
/// by the part counts of the categories before it. Clouds are resampled to
/// `n_points`.
pub fn load_shapenet_part<R: Rng + ?Sized>(
    root: impl AsRef<Path>,
    n_points: usize,
    max_per_class: Option<usize>,
    rng: &mut R,
) -> Result<Dataset> {
    let root = root.as_ref();
    let cat_path = root.join("synsetoffset2category.txt");
    let cats = std::fs::read_to_string(&cat_path).map_err(|e| Error::io(&cat_path, e))?;
    let mut categories: Vec<(String, String)> = cats
        .lines()
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            Some((it.next()?.to_string(), it.next()?.to_string()))
        })
        .collect();
    categories.sort();

    let mut splits: BTreeMap<String, &str> = BTreeMap::new();
    for split in ["train", "test"] {
        let p = root.join(format!("train_test_split/shuffled_{split}_file_list.json"));
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let list: Vec<String> =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        for entry in list {
            // Entries look like `shape_data/<synset>/<id>`.
            let mut parts = entry.rsplit('/');
            if let (Some(id), Some(syn)) = (parts.next(), parts.next()) {
                splits.insert(format!("{syn}/{id}"), split);
            }
        }
    }

    let mut ds = Dataset {
        class_names: categories.iter().map(|(n, _)| n.clone()).collect(),
        train: Vec::new(),
        test: Vec::new(),
    };
    let mut offset = 0;
    for (label, (_, synset)) in categories.iter().enumerate() {
        let pts_dir = root.join(synset).join("points");
        let mut loaded = Vec::new();
        let mut max_part = 0;
        let mut taken = 0;
        for f in sorted_entries(&pts_dir)? {
            if taken >= max_per_class.unwrap_or(usize::MAX) {
                break;
            }
            let id = f.file_stem().unwrap().to_string_lossy().into_owned();
            let Some(&split) = splits.get(&format!("{synset}/{id}")) else {
                continue;
            };
            let seg = root.join(synset).join("points_label").join(format!("{id}.seg"));
            let coords = parse_rows(&f)?;
            let labels = parse_rows(&seg)?;
            if coords.len() != labels.len() || coords.iter().any(|r| r.len() < 3) || labels.iter().any(|r| r.len() != 1)
            {
                return Err(Error::Data(format!("{}: point and label files disagree", f.display())));
            }
            let labels: Vec<usize> = labels.iter().map(|r| r[0] as usize).collect();
            if labels.contains(&0) {
                return Err(Error::Data(format!("{}: part labels are 1-based", seg.display())));
            }
            max_part = max_part.max(*labels.iter().max().unwrap_or(&0));
            loaded.push((coords, labels, split));
            taken += 1;
        }
        for (coords, labels, split) in loaded {
            let mut order: Vec<usize> = (0..coords.len()).collect();
            order.shuffle(rng);
            let pick: Vec<usize> = (0..n_points)
                .map(|i| {
                    if i < order.len() {
                        order[i]
                    } else {
                        order[rng.random_range(0..order.len())]
                    }
                })
                .collect();
            let cloud = PointCloud::new(
                pick.iter()
                    .map(|&i| [coords[i][0], coords[i][1], coords[i][2]])
                    .collect(),
            )?;
            let sample = LabeledSample {
                cloud: normalize_unit_sphere(&cloud),
                shape_label: Some(label),
                part_labels: Some(pick.iter().map(|&i| offset + labels[i] - 1).collect()),
            };
            if split == "train" {
                ds.train.push(sample);
            } else {
                ds.test.push(sample);
            }
        }
        offset += max_part;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TRI: &str = "OFF\n4 2 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n";

    #[test]
    fn modelnet_layout() {
        let dir = tempfile::tempdir().unwrap();
        for (c, split) in [("chair", "train"), ("chair", "test"), ("desk", "train")] {
            let d = dir.path().join(c).join(split);
            std::fs::create_dir_all(&d).unwrap();
            std::fs::write(d.join("a.off"), TRI).unwrap();
        }
        let ds = load_modelnet(dir.path(), 32, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ds.class_names, vec!["chair", "desk"]);
        assert_eq!((ds.train.len(), ds.test.len()), (2, 1));
        assert_eq!(ds.train[1].shape_label, Some(1));
        assert_eq!(ds.train[0].cloud.len(), 32);
    }

    #[test]
    fn shapenet_layout() {
        let dir = tempfile::tempdir().unwrap();
        let r = dir.path();
        std::fs::write(r.join("synsetoffset2category.txt"), "Airplane\t001\nBag\t002\n").unwrap();
        std::fs::create_dir_all(r.join("train_test_split")).unwrap();
        std::fs::write(
            r.join("train_test_split/shuffled_train_file_list.json"),
            r#"["shape_data/001/a", "shape_data/002/b"]"#,
        )
        .unwrap();
        std::fs::write(r.join("train_test_split/shuffled_test_file_list.json"), "[]").unwrap();
        for (syn, id, labels) in [("001", "a", "1\n3\n"), ("002", "b", "2\n1\n")] {
            std::fs::create_dir_all(r.join(syn).join("points")).unwrap();
            std::fs::create_dir_all(r.join(syn).join("points_label")).unwrap();
            std::fs::write(r.join(syn).join("points").join(format!("{id}.pts")), "0 0 0\n1 1 1\n").unwrap();
            std::fs::write(r.join(syn).join("points_label").join(format!("{id}.seg")), labels).unwrap();
        }
        let ds = load_shapenet_part(r, 2, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ds.train.len(), 2);
        let mut a = ds.train[0].part_labels.clone().unwrap();
        a.sort();
        assert_eq!(a, vec![0, 2]);
        let mut b = ds.train[1].part_labels.clone().unwrap();
        b.sort();
        assert_eq!(b, vec![3, 4]);
    }
}
