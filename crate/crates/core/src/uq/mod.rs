//! Uncertainty quantification on model-agnostic softmax stacks.
//!
//! For a stack of `T` softmax samples per pixel the predictive uncertainty
//! is the entropy of the mean distribution; the aleatoric part is the mean of
//! the per-sample entropies and the epistemic part (the mutual information
//! between label and model draw) is their difference. All entropies are in
//! nats.

mod benchmark;
mod stack;

pub use benchmark::{
    benchmark_run, discover_levels, level_dir_name, BenchmarkReport, BenchmarkRow, LevelGroup, LevelSummary,
};
pub use stack::{ProbMap, ProbStack, StackHeader};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on per-pixel probability sums.
pub const SIMPLEX_TOL: f64 = 1e-5;

/// Per-pixel uncertainty maps in nats, row-major `H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncMaps {
    pub height: usize,
    pub width: usize,
    pub pu: Vec<f32>,
    pub au: Vec<f32>,
    pub eu: Vec<f32>,
    /// Set when the stack had a single member; `eu` is then zero.
    pub single_member: bool,
    /// Largest amount by which a negative `pu - au` was clamped to zero.
    pub max_clamp: f64,
}

/// Entropy `-Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Per-pixel entropy of a probability map.
pub fn entropy_map(map: &ProbMap) -> Vec<f32> {
    let mut buf = vec![0.0; map.classes];
    (0..map.height * map.width)
        .map(|i| {
            map.pixel_into(i, &mut buf);
            entropy(&buf) as f32
        })
        .collect()
}

/// Arithmetic mean over the `T` members.
pub fn predictive_mean(stack: &ProbStack) -> Result<ProbMap> {
    stack.validate()?;
    Ok(stack.mean())
}

/// Splits predictive entropy into aleatoric and epistemic parts.
pub fn decompose(stack: &ProbStack) -> Result<UncMaps> {
    stack.validate()?;
    let (t, c) = (stack.members, stack.classes);
    let hw = stack.height * stack.width;
    let mut pu = vec![0f32; hw];
    let mut au = vec![0f32; hw];
    let mut eu = vec![0f32; hw];
    let mut max_clamp: f64 = 0.0;
    let mut member = vec![0.0; c];
    let mut mean = vec![0.0; c];

    for i in 0..hw {
        mean.iter_mut().for_each(|m| *m = 0.0);
        let mut h_sum = 0.0;
        let mut identical = true;
        for m in 0..t {
            for k in 0..c {
                let v = f64::from(stack.at(m, k, i));
                if m > 0 && v != f64::from(stack.at(0, k, i)) {
                    identical = false;
                }
                member[k] = v;
                mean[k] += v;
            }
            h_sum += entropy(&member);
        }
        mean.iter_mut().for_each(|v| *v /= t as f64);
        let h_pred = entropy(&mean);
        let (p, a, e) = if identical {
            (h_pred, h_pred, 0.0)
        } else {
            let a = h_sum / t as f64;
            let e = h_pred - a;
            if e < 0.0 {
                max_clamp = max_clamp.max(-e);
            }
            (h_pred, a, e.max(0.0))
        };
        pu[i] = p as f32;
        au[i] = a as f32;
        eu[i] = e as f32;
    }
    Ok(UncMaps {
        height: stack.height,
        width: stack.width,
        pu,
        au,
        eu,
        single_member: t == 1,
        max_clamp,
    })
}

/// `1 - max_c p_c` per pixel.
pub fn msr_uncertainty(map: &ProbMap) -> Vec<f32> {
    let mut buf = vec![0.0; map.classes];
    (0..map.height * map.width)
        .map(|i| {
            map.pixel_into(i, &mut buf);
            (1.0 - buf.iter().copied().fold(f64::NEG_INFINITY, f64::max)) as f32
        })
        .collect()
}

/// Argmax class per pixel; ties go to the lowest class index.
pub fn argmax_map(map: &ProbMap) -> Vec<u8> {
    let mut buf = vec![0.0; map.classes];
    (0..map.height * map.width)
        .map(|i| {
            map.pixel_into(i, &mut buf);
            let mut best = 0;
            for k in 1..buf.len() {
                if buf[k] > buf[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum AggregationSpec {
    ImageMean,
    PatchMax { patch_size: usize, stride: usize },
    ThresholdMean { quantile_p: f64 },
}

impl Default for AggregationSpec {
    fn default() -> Self {
        AggregationSpec::ThresholdMean { quantile_p: 0.9 }
    }
}

impl AggregationSpec {
    pub fn default_patch_max() -> Self {
        AggregationSpec::PatchMax {
            patch_size: 64,
            stride: 32,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        match *self {
            AggregationSpec::ImageMean => Ok(()),
            AggregationSpec::PatchMax { patch_size, stride } => {
                if patch_size == 0 || stride == 0 {
                    Err(Error::invalid("aggregation", "patch_size and stride must be > 0"))
                } else if patch_size > height.min(width) {
                    Err(Error::invalid(
                        "aggregation",
                        format!("patch_size {patch_size} exceeds image side {}", height.min(width)),
                    ))
                } else {
                    Ok(())
                }
            }
            AggregationSpec::ThresholdMean { quantile_p } => {
                if (0.0..1.0).contains(&quantile_p) {
                    Ok(())
                } else {
                    Err(Error::invalid("aggregation", format!("quantile_p must be in [0, 1), got {quantile_p}")))
                }
            }
        }
    }

    /// Short label used in report tables.
    pub fn label(&self) -> String {
        match self {
            AggregationSpec::ImageMean => "image_mean".into(),
            AggregationSpec::PatchMax { patch_size, stride } => format!("patch_max({patch_size},{stride})"),
            AggregationSpec::ThresholdMean { quantile_p } => format!("threshold_mean({quantile_p})"),
        }
    }
}

/// Nearest-rank empirical quantile: the `ceil(p n)`-th smallest value
/// (at least the first).
pub fn nearest_rank_quantile(values: &[f32], p: f64) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = ((p * sorted.len() as f64).ceil() as usize).max(1);
    sorted[rank - 1]
}

/// Window start offsets along one side: stride-gridded, stopping after the
/// first window that reaches the edge (so a final partial window is kept).
fn window_starts(side: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        starts.push(s);
        if s + patch >= side {
            break;
        }
        s += stride;
    }
    starts
}

/// Reduces a per-pixel map to one image score.
pub fn aggregate(unc: &[f32], height: usize, width: usize, spec: &AggregationSpec) -> Result<f64> {
    if unc.len() != height * width || unc.is_empty() {
        return Err(Error::Dimensions(format!(
            "map has {} values, expected {height}x{width}",
            unc.len()
        )));
    }
    spec.validate(height, width)?;
    let n = unc.len() as f64;
    Ok(match *spec {
        AggregationSpec::ImageMean => unc.iter().map(|&v| f64::from(v)).sum::<f64>() / n,
        AggregationSpec::ThresholdMean { quantile_p } => {
            let q = nearest_rank_quantile(unc, quantile_p);
            let (sum, count) = unc
                .iter()
                .filter(|&&v| v >= q)
                .fold((0.0, 0usize), |(s, k), &v| (s + f64::from(v), k + 1));
            sum / count as f64
        }
        AggregationSpec::PatchMax { patch_size, stride } => {
            // Summed-area table with a zero border row/column.
            let mut sat = vec![0.0f64; (height + 1) * (width + 1)];
            for y in 0..height {
                let mut row = 0.0;
                for x in 0..width {
                    row += f64::from(unc[y * width + x]);
                    sat[(y + 1) * (width + 1) + x + 1] = sat[y * (width + 1) + x + 1] + row;
                }
            }
            let at = |y: usize, x: usize| sat[y * (width + 1) + x];
            let mut best = f64::NEG_INFINITY;
            for &y0 in &window_starts(height, patch_size, stride) {
                let y1 = (y0 + patch_size).min(height);
                for &x0 in &window_starts(width, patch_size, stride) {
                    let x1 = (x0 + patch_size).min(width);
                    let sum = at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0);
                    best = best.max(sum / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
            best
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub accuracy: f64,
    /// Per-class F1; `None` for classes absent from both maps.
    pub f1: Vec<Option<f64>>,
    /// Mean of the defined per-class F1 scores.
    pub f1_macro: f64,
    /// Rows are ground-truth classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
}

pub fn segmentation_metrics(pred: &[u8], gt: &[u8], classes: usize) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Dimensions(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        for label in [p, g] {
            if usize::from(label) >= classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    h: 0,
                    w: i,
                    classes,
                });
            }
        }
        confusion[usize::from(g)][usize::from(p)] += 1;
    }
    let correct: u64 = (0..classes).map(|k| confusion[k][k]).sum();
    let f1: Vec<Option<f64>> = (0..classes)
        .map(|k| {
            let tp = confusion[k][k] as f64;
            let fn_: f64 = confusion[k].iter().sum::<u64>() as f64 - tp;
            let fp: f64 = (0..classes).map(|g| confusion[g][k]).sum::<u64>() as f64 - tp;
            let denom = 2.0 * tp + fp + fn_;
            (denom > 0.0).then(|| 2.0 * tp / denom)
        })
        .collect();
    let defined: Vec<f64> = f1.iter().flatten().copied().collect();
    let f1_macro = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    Ok(SegMetrics {
        accuracy: if gt.is_empty() { 0.0 } else { correct as f64 / gt.len() as f64 },
        f1,
        f1_macro,
        confusion,
    })
}
