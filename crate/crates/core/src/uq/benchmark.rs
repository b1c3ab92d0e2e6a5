//! Batch evaluation of stack directories against ground-truth masks.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{aggregate, argmax_map, decompose, segmentation_metrics, AggregationSpec, ProbStack};
use crate::error::{Error, Result};
use crate::render::read_semantic;

const PROBS_SUFFIX: &str = "_probs.json";
const SEM_SUFFIX: &str = "_sem.png";
/// `image_stem` value of per-level mean rows in the CSV.
pub const MEAN_STEM: &str = "mean";

/// One directory of stacks sharing a noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGroup {
    pub noise_level: f64,
    pub dir: PathBuf,
    /// Directory name used to look for a matching ground-truth subdirectory.
    pub label: Option<String>,
}

pub fn level_dir_name(level: f64) -> String {
    format!("level_{level:.2}")
}

fn parse_level(name: &str) -> Option<f64> {
    name.strip_prefix("level_")?.parse().ok().filter(|v: &f64| v.is_finite())
}

fn stems_in(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(stem) = entry.file_name().to_str().and_then(|n| n.strip_suffix(PROBS_SUFFIX)) {
            stems.push(stem.to_owned());
        }
    }
    stems.sort();
    Ok(stems)
}

/// `level_<x>` subdirectories sorted by level, or the root itself as level 0
/// when it holds stacks directly.
pub fn discover_levels(pred_root: &Path) -> Result<Vec<LevelGroup>> {
    let mut groups = Vec::new();
    for entry in std::fs::read_dir(pred_root).map_err(|e| Error::io(pred_root, e))? {
        let entry = entry.map_err(|e| Error::io(pred_root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(level) = parse_level(&name) {
            if entry.path().is_dir() {
                groups.push(LevelGroup {
                    noise_level: level,
                    dir: entry.path(),
                    label: Some(name),
                });
            }
        }
    }
    if groups.is_empty() && !stems_in(pred_root)?.is_empty() {
        groups.push(LevelGroup {
            noise_level: 0.0,
            dir: pred_root.to_owned(),
            label: None,
        });
    }
    if groups.is_empty() {
        return Err(Error::invalid(
            "prediction root",
            format!("{} holds no stacks and no level_<x> directories", pred_root.display()),
        ));
    }
    groups.sort_by(|a, b| a.noise_level.total_cmp(&b.noise_level));
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub noise_level: f64,
    pub image_stem: String,
    pub source_tag: String,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub pu: f64,
    pub au: f64,
    pub eu: f64,
    pub agg_strategy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub noise_level: f64,
    pub images: usize,
    pub source_tag: String,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub pu: f64,
    pub au: f64,
    pub eu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub agg_strategy: String,
    pub aggregation: AggregationSpec,
    pub rows: Vec<BenchmarkRow>,
    pub levels: Vec<LevelSummary>,
}

impl BenchmarkReport {
    /// Data rows followed by one mean row per level.
    pub fn csv_rows(&self) -> Vec<BenchmarkRow> {
        let mut out = self.rows.clone();
        out.extend(self.levels.iter().map(|s| BenchmarkRow {
            noise_level: s.noise_level,
            image_stem: MEAN_STEM.into(),
            source_tag: s.source_tag.clone(),
            accuracy: s.accuracy,
            f1_macro: s.f1_macro,
            pu: s.pu,
            au: s.au,
            eu: s.eu,
            agg_strategy: self.agg_strategy.clone(),
        }));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_owned(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for row in self.csv_rows() {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `stem -> _sem.png` under `root`, searched recursively. The shallowest
/// match wins, then the lexically first path.
fn index_ground_truth(root: &Path) -> BTreeMap<String, PathBuf> {
    let mut index: BTreeMap<String, (usize, PathBuf)> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name().into_iter().flatten() {
        let Some(stem) = entry.file_name().to_str().and_then(|n| n.strip_suffix(SEM_SUFFIX)) else {
            continue;
        };
        let depth = entry.depth();
        match index.get(stem) {
            Some((d, _)) if *d <= depth => {}
            _ => {
                index.insert(stem.to_owned(), (depth, entry.path().to_owned()));
            }
        }
    }
    index.into_iter().map(|(k, (_, p))| (k, p)).collect()
}

fn evaluate_one(
    stack_dir: &Path,
    stem: &str,
    gt_path: &Path,
    noise_level: f64,
    agg: &AggregationSpec,
) -> Result<BenchmarkRow> {
    let stack = ProbStack::read(stack_dir, stem)?;
    let (w, h, mut gt) = read_semantic(gt_path)?;
    if (w, h) != (stack.width, stack.height) {
        return Err(Error::in_file(
            gt_path,
            Error::Dimensions(format!("mask is {w}x{h}, stack {}x{}", stack.width, stack.height)),
        ));
    }
    // Two-class stacks are scored against the foreground/background mask.
    if stack.classes == 2 {
        gt.iter_mut().for_each(|v| *v = u8::from(*v != 0));
    }
    let unc = decompose(&stack)?;
    let pred = argmax_map(&stack.mean());
    let metrics = segmentation_metrics(&pred, &gt, stack.classes).map_err(|e| match e {
        Error::LabelOutOfRange { label, w: i, classes, .. } => Error::in_file(
            gt_path,
            Error::LabelOutOfRange {
                label,
                h: i / w,
                w: i % w,
                classes,
            },
        ),
        other => other,
    })?;
    Ok(BenchmarkRow {
        noise_level,
        image_stem: stem.to_owned(),
        source_tag: stack.source_tag.clone(),
        accuracy: metrics.accuracy,
        f1_macro: metrics.f1_macro,
        pu: aggregate(&unc.pu, h, w, agg)?,
        au: aggregate(&unc.au, h, w, agg)?,
        eu: aggregate(&unc.eu, h, w, agg)?,
        agg_strategy: agg.label(),
    })
}

/// Scores every stack of every group. Ground truth for a group labelled
/// `level_x` is looked up under `gt_root/level_x` when that exists, else
/// anywhere under `gt_root`.
pub fn benchmark_run(groups: &[LevelGroup], gt_root: &Path, agg: &AggregationSpec) -> Result<BenchmarkReport> {
    let mut rows = Vec::new();
    let mut levels = Vec::new();
    let mut root_index = None;
    for group in groups {
        let stems = stems_in(&group.dir)?;
        if stems.is_empty() {
            return Err(Error::invalid("prediction directory", format!("{} holds no stacks", group.dir.display())));
        }
        let level_gt = group.label.as_ref().map(|l| gt_root.join(l)).filter(|p| p.is_dir());
        let index = match level_gt {
            Some(dir) => index_ground_truth(&dir),
            None => root_index.get_or_insert_with(|| index_ground_truth(gt_root)).clone(),
        };
        let missing: Vec<String> = stems.iter().filter(|s| !index.contains_key(*s)).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::MissingPairs(missing));
        }
        let group_rows = stems
            .par_iter()
            .map(|stem| evaluate_one(&group.dir, stem, &index[stem], group.noise_level, agg))
            .collect::<Result<Vec<_>>>()?;
        levels.push(summarize(group.noise_level, &group_rows));
        rows.extend(group_rows);
    }
    Ok(BenchmarkReport {
        agg_strategy: agg.label(),
        aggregation: *agg,
        rows,
        levels,
    })
}

fn summarize(noise_level: f64, rows: &[BenchmarkRow]) -> LevelSummary {
    let n = rows.len() as f64;
    let mean = |f: fn(&BenchmarkRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let tags: BTreeSet<&str> = rows.iter().map(|r| r.source_tag.as_str()).collect();
    LevelSummary {
        noise_level,
        images: rows.len(),
        source_tag: tags.into_iter().collect::<Vec<_>>().join("+"),
        accuracy: mean(|r| r.accuracy),
        f1_macro: mean(|r| r.f1_macro),
        pu: mean(|r| r.pu),
        au: mean(|r| r.au),
        eu: mean(|r| r.eu),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::write_semantic;

    fn write_pair(pred: &Path, gt: &Path, stem: &str, probs: [f32; 8]) {
        std::fs::create_dir_all(pred).unwrap();
        std::fs::create_dir_all(gt).unwrap();
        // T = 2, C = 2, 1 × 2 image.
        ProbStack::new(2, 2, 1, 2, probs.to_vec(), vec!["bg".into(), "fg".into()], "mock")
            .unwrap()
            .write(pred, stem)
            .unwrap();
        write_semantic(&gt.join(format!("{stem}_sem.png")), 2, 1, &[0, 3]).unwrap();
    }

    #[test]
    fn one_image_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
        write_pair(&pred, &gt.join("img_0000"), "img_0000", [0.9, 0.2, 0.1, 0.8, 0.7, 0.4, 0.3, 0.6]);
        let groups = discover_levels(&pred).unwrap();
        assert_eq!(groups.len(), 1);
        let report = benchmark_run(&groups, &gt, &AggregationSpec::ImageMean).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.csv_rows().len(), 2);
        assert_eq!(report.rows[0].accuracy, 1.0);

        let csv_path = dir.path().join("r.csv");
        report.write_csv(&csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "noise_level,image_stem,source_tag,accuracy,f1_macro,pu,au,eu,agg_strategy"
        );
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn pu_column_recomputes() {
        let dir = tempfile::tempdir().unwrap();
        let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
        let probs = [0.8, 0.3, 0.2, 0.7, 0.6, 0.5, 0.4, 0.5];
        write_pair(&pred, &gt, "a", probs);
        let agg = AggregationSpec::ThresholdMean { quantile_p: 0.5 };
        let report = benchmark_run(&discover_levels(&pred).unwrap(), &gt, &agg).unwrap();
        // Independent evaluation, pixel by pixel.
        let h = |p: &[f64]| -p.iter().map(|v| v * v.ln()).sum::<f64>();
        let pu: Vec<f64> = (0..2)
            .map(|i| {
                let m0 = (f64::from(probs[i]) + f64::from(probs[4 + i])) / 2.0;
                h(&[m0, 1.0 - m0])
            })
            .collect();
        let q = pu[0].min(pu[1]);
        let sel: Vec<f64> = pu.iter().copied().filter(|&v| v >= q).collect();
        let expect = sel.iter().sum::<f64>() / sel.len() as f64;
        assert!((report.rows[0].pu - expect).abs() < 1e-6);
    }

    #[test]
    fn levels_compose_and_prefer_level_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
        let sure = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        for level in [0.0, 0.5] {
            let name = level_dir_name(level);
            write_pair(&pred.join(&name), &gt.join(&name), "img_0000", sure);
            write_pair(&pred.join(&name), &gt.join(&name), "img_0001", sure);
        }
        // Flip the level-0.5 ground truth so accuracy differs per level.
        write_semantic(&gt.join("level_0.50/img_0000_sem.png"), 2, 1, &[4, 0]).unwrap();
        let groups = discover_levels(&pred).unwrap();
        assert_eq!(groups.iter().map(|g| g.noise_level).collect::<Vec<_>>(), vec![0.0, 0.5]);
        let agg = AggregationSpec::ImageMean;
        let all = benchmark_run(&groups, &gt, &agg).unwrap();
        let parts: Vec<BenchmarkRow> = groups
            .iter()
            .flat_map(|g| benchmark_run(std::slice::from_ref(g), &gt, &agg).unwrap().rows)
            .collect();
        assert_eq!(all.rows, parts);
        assert_eq!(all.levels[0].accuracy, 1.0);
        assert_eq!(all.levels[1].accuracy, 0.5);
    }

    #[test]
    fn missing_pairs_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
        write_pair(&pred, &gt, "a", [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        ProbStack::read(&pred, "a").unwrap().write(&pred, "zz").unwrap();
        match benchmark_run(&discover_levels(&pred).unwrap(), &gt, &AggregationSpec::ImageMean) {
            Err(Error::MissingPairs(stems)) => assert_eq!(stems, vec!["zz".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_prediction_root_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(discover_levels(dir.path()).is_err());
    }
}
