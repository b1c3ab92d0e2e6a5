//! Seeded corruption of ground-truth masks, imitating annotator error.
//!
//! Each instance draws from its own stream keyed by its id, so whether an
//! instance is corrupted does not depend on how many others the mask holds.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::CellClass;
use crate::error::{Error, Result};
use crate::filter::{gaussian_blur, Border};
use crate::seed::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTask {
    SemSegFlip,
    FgBgShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeOp {
    Shift,
    Scale,
    Elastic,
    Drop,
}

const OPS: [ShapeOp; 4] = [ShapeOp::Shift, ShapeOp::Scale, ShapeOp::Elastic, ShapeOp::Drop];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelNoiseSpec {
    pub task: NoiseTask,
    pub level: f64,
    pub seed: u64,
    /// Fraction of the instance's equivalent diameter.
    #[serde(default = "d_shift")]
    pub shift_max: f64,
    #[serde(default = "d_scale")]
    pub scale_range: [f64; 2],
    #[serde(default = "d_sigma")]
    pub elastic_sigma: f64,
    #[serde(default = "d_alpha")]
    pub elastic_alpha: f64,
    /// Weights over shift, scale, elastic, drop.
    #[serde(default = "d_weights")]
    pub op_weights: [f64; 4],
}

fn d_shift() -> f64 {
    0.5
}
fn d_scale() -> [f64; 2] {
    [0.6, 1.4]
}
fn d_sigma() -> f64 {
    8.0
}
fn d_alpha() -> f64 {
    10.0
}
fn d_weights() -> [f64; 4] {
    [0.25; 4]
}

impl LabelNoiseSpec {
    pub fn new(task: NoiseTask, level: f64, seed: u64) -> Self {
        LabelNoiseSpec {
            task,
            level,
            seed,
            shift_max: d_shift(),
            scale_range: d_scale(),
            elastic_sigma: d_sigma(),
            elastic_alpha: d_alpha(),
            op_weights: d_weights(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("label noise spec", reason));
        if !(0.0..=1.0).contains(&self.level) {
            return bad(format!("level must be in [0, 1], got {}", self.level));
        }
        if self.op_weights.iter().any(|&w| w.is_nan() || w < 0.0) || (self.op_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("op_weights must be non-negative and sum to 1, got {:?}", self.op_weights));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("scale_range must be positive and ordered, got {:?}", self.scale_range));
        }
        for (what, v) in [("shift_max", self.shift_max), ("elastic_sigma", self.elastic_sigma), ("elastic_alpha", self.elastic_alpha)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{what} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Reads the id → class table off a pair of masks. Each instance takes the
/// label of its first pixel.
pub fn class_table(instance: &[u16], semantic: &[u8]) -> Result<BTreeMap<u16, CellClass>> {
    if instance.len() != semantic.len() {
        return Err(Error::Dimensions("instance and semantic masks differ in size".into()));
    }
    let mut table = BTreeMap::new();
    for (&id, &label) in instance.iter().zip(semantic) {
        if id != 0 && !table.contains_key(&id) {
            let class = CellClass::from_label(label).ok_or(Error::UnknownInstance(id))?;
            table.insert(id, class);
        }
    }
    Ok(table)
}

/// Paints the semantic mask of `instance` from an id → class table.
pub fn semantic_from_table(instance: &[u16], table: &BTreeMap<u16, CellClass>) -> Result<Vec<u8>> {
    instance
        .iter()
        .map(|&id| match id {
            0 => Ok(0),
            _ => table
                .get(&id)
                .and_then(|c| c.label())
                .ok_or(Error::UnknownInstance(id)),
        })
        .collect()
}

/// 1 wherever the semantic label is non-zero.
pub fn derive_fgbg(semantic: &[u8]) -> Vec<u8> {
    semantic.iter().map(|&v| u8::from(v != 0)).collect()
}

/// Flips each instance's class with probability `level` to one of the other
/// nucleus classes, uniformly.
pub fn corrupt_semantic(
    instance: &[u16],
    table: &BTreeMap<u16, CellClass>,
    spec: &LabelNoiseSpec,
) -> Result<BTreeMap<u16, CellClass>> {
    spec.validate()?;
    if let Some(&id) = instance.iter().find(|&&id| id != 0 && !table.contains_key(&id)) {
        return Err(Error::UnknownInstance(id));
    }
    Ok(table
        .iter()
        .map(|(&id, &class)| {
            let mut rng = stream(spec.seed, "flip", u64::from(id));
            if !rng.random_bool(spec.level) {
                return (id, class);
            }
            let others: Vec<CellClass> = CellClass::NUCLEUS_CLASSES.into_iter().filter(|&c| c != class).collect();
            (id, others[rng.random_range(0..others.len())])
        })
        .collect())
}

/// Pixel coordinates `(x, y)` of one instance.
type PixelSet = Vec<(i64, i64)>;

/// Membership bitmap over the bounding box of a pixel set.
struct LocalMask {
    x0: i64,
    y0: i64,
    w: i64,
    h: i64,
    bits: Vec<bool>,
}

impl LocalMask {
    fn new(pixels: &PixelSet) -> Self {
        let x0 = pixels.iter().map(|p| p.0).min().unwrap_or(0);
        let y0 = pixels.iter().map(|p| p.1).min().unwrap_or(0);
        let w = pixels.iter().map(|p| p.0).max().unwrap_or(-1) - x0 + 1;
        let h = pixels.iter().map(|p| p.1).max().unwrap_or(-1) - y0 + 1;
        let mut bits = vec![false; (w.max(0) * h.max(0)) as usize];
        for &(x, y) in pixels {
            bits[((y - y0) * w + x - x0) as usize] = true;
        }
        LocalMask { x0, y0, w, h, bits }
    }

    fn contains(&self, x: i64, y: i64) -> bool {
        let (lx, ly) = (x - self.x0, y - self.y0);
        lx >= 0 && ly >= 0 && lx < self.w && ly < self.h && self.bits[(ly * self.w + lx) as usize]
    }
}

fn centroid(pixels: &PixelSet) -> (f64, f64) {
    let n = pixels.len() as f64;
    let sx: f64 = pixels.iter().map(|p| p.0 as f64).sum();
    let sy: f64 = pixels.iter().map(|p| p.1 as f64).sum();
    (sx / n, sy / n)
}

fn apply_op(op: ShapeOp, pixels: &PixelSet, spec: &LabelNoiseSpec, rng: &mut crate::seed::Rng) -> PixelSet {
    match op {
        ShapeOp::Drop => Vec::new(),
        ShapeOp::Shift => {
            let diameter = 2.0 * (pixels.len() as f64 / std::f64::consts::PI).sqrt();
            let r = spec.shift_max * diameter * rng.random::<f64>().sqrt();
            let theta = std::f64::consts::TAU * rng.random::<f64>();
            let (dx, dy) = ((r * theta.cos()).round() as i64, (r * theta.sin()).round() as i64);
            pixels.iter().map(|&(x, y)| (x + dx, y + dy)).collect()
        }
        ShapeOp::Scale => {
            let [lo, hi] = spec.scale_range;
            let f = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let mask = LocalMask::new(pixels);
            let (cx, cy) = centroid(pixels);
            // Target box: the source box mapped forward, with a pixel to spare.
            let map = |v: i64, c: f64| c + (v as f64 - c) * f;
            let xs = [map(mask.x0, cx), map(mask.x0 + mask.w - 1, cx)];
            let ys = [map(mask.y0, cy), map(mask.y0 + mask.h - 1, cy)];
            let mut out = Vec::new();
            for y in (ys[0].floor() as i64 - 1)..=(ys[1].ceil() as i64 + 1) {
                for x in (xs[0].floor() as i64 - 1)..=(xs[1].ceil() as i64 + 1) {
                    let sx = (cx + (x as f64 - cx) / f).round() as i64;
                    let sy = (cy + (y as f64 - cy) / f).round() as i64;
                    if mask.contains(sx, sy) {
                        out.push((x, y));
                    }
                }
            }
            out
        }
        ShapeOp::Elastic => {
            let mask = LocalMask::new(pixels);
            let pad = spec.elastic_alpha.ceil() as i64 + 1;
            let (x0, y0) = (mask.x0 - pad, mask.y0 - pad);
            let (w, h) = ((mask.w + 2 * pad) as usize, (mask.h + 2 * pad) as usize);
            let mut fields = [vec![0.0f64; w * h], vec![0.0f64; w * h]];
            for f in fields.iter_mut() {
                f.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                gaussian_blur(f, w, h, spec.elastic_sigma, Border::Clamp);
            }
            let peak = (0..w * h)
                .map(|i| fields[0][i].hypot(fields[1][i]))
                .fold(0.0f64, f64::max);
            let gain = if peak > 0.0 { spec.elastic_alpha / peak } else { 0.0 };
            let mut out = Vec::new();
            for ly in 0..h {
                for lx in 0..w {
                    let i = ly * w + lx;
                    let (x, y) = (x0 + lx as i64, y0 + ly as i64);
                    let sx = (x as f64 + gain * fields[0][i]).round() as i64;
                    let sy = (y as f64 + gain * fields[1][i]).round() as i64;
                    if mask.contains(sx, sy) {
                        out.push((x, y));
                    }
                }
            }
            out
        }
    }
}

/// What happened to one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeEvent {
    pub id: u16,
    pub op: ShapeOp,
}

/// Applies a random shape operation to each instance with probability
/// `level`. Unmodified instances keep their pixels on collisions; among
/// modified ones the lower id wins. Pixels leaving the image are clipped.
pub fn corrupt_shapes(
    instance: &[u16],
    width: usize,
    height: usize,
    spec: &LabelNoiseSpec,
) -> Result<(Vec<u16>, Vec<ShapeEvent>)> {
    spec.validate()?;
    if instance.len() != width * height {
        return Err(Error::Dimensions(format!("mask has {} pixels, expected {width}x{height}", instance.len())));
    }
    let mut sets: BTreeMap<u16, PixelSet> = BTreeMap::new();
    for (i, &id) in instance.iter().enumerate() {
        if id != 0 {
            sets.entry(id).or_default().push(((i % width) as i64, (i / width) as i64));
        }
    }
    let weights = WeightedIndex::new(spec.op_weights).map_err(|e| Error::invalid("op_weights", e.to_string()))?;
    let mut out = vec![0u16; instance.len()];
    let mut modified = Vec::new();
    let mut events = Vec::new();
    for (&id, pixels) in &sets {
        let mut rng = stream(spec.seed, "labelnoise", u64::from(id));
        if rng.random_bool(spec.level) {
            let op = OPS[weights.sample(&mut rng)];
            events.push(ShapeEvent { id, op });
            modified.push((id, apply_op(op, pixels, spec, &mut rng)));
        } else {
            for &(x, y) in pixels {
                out[y as usize * width + x as usize] = id;
            }
        }
    }
    for (id, pixels) in modified {
        for (x, y) in pixels {
            if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                let slot = &mut out[y as usize * width + x as usize];
                if *slot == 0 {
                    *slot = id;
                }
            }
        }
    }
    Ok((out, events))
}

/// Corrupted masks for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyMasks {
    pub instance: Vec<u16>,
    pub semantic: Vec<u8>,
    pub fgbg: Vec<u8>,
    pub flipped: usize,
    pub shape_events: Vec<ShapeEvent>,
}

/// Runs the task named in `spec` on a mask pair. The binary mask is always
/// derived after instance-level corruption.
pub fn corrupt_masks(
    instance: &[u16],
    semantic: &[u8],
    width: usize,
    height: usize,
    spec: &LabelNoiseSpec,
) -> Result<NoisyMasks> {
    let table = class_table(instance, semantic)?;
    let (instance, table, flipped, shape_events) = match spec.task {
        NoiseTask::SemSegFlip => {
            let noisy = corrupt_semantic(instance, &table, spec)?;
            let flipped = noisy.iter().filter(|(id, c)| table[id] != **c).count();
            (instance.to_vec(), noisy, flipped, Vec::new())
        }
        NoiseTask::FgBgShape => {
            let (inst, events) = corrupt_shapes(instance, width, height, spec)?;
            (inst, table, 0, events)
        }
    };
    let semantic = semantic_from_table(&instance, &table)?;
    Ok(NoisyMasks {
        fgbg: derive_fgbg(&semantic),
        instance,
        semantic,
        flipped,
        shape_events,
    })
}
