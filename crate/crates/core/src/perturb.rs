//! Targeted scene manipulations that leave the masks untouched.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{assign_ids, blood_cell, SceneGraph, StainBlob};
use crate::seed::{derive_seed, stream};

/// Blood cells added at level 1.
pub const MAX_EXTRA_BLOOD: f64 = 150.0;
/// Stain blobs added at level 1.
pub const MAX_STAIN_BLOBS: f64 = 12.0;
/// Absorbance scale of a blob core at level 1, relative to the cell hue.
pub const BLOB_PEAK: f64 = 0.6;
pub const BLOB_RADIUS: (f64, f64) = (5.0, 25.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbKind {
    NucleiIntensity,
    BloodStain,
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbKind::NucleiIntensity => "nuclei-intensity",
            PerturbKind::BloodStain => "blood-stain",
        })
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nuclei-intensity" | "nuclei_intensity" => Ok(PerturbKind::NucleiIntensity),
            "blood-stain" | "blood_stain" => Ok(PerturbKind::BloodStain),
            other => Err(Error::invalid("perturbation kind", format!("unknown kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub kind: PerturbKind,
    pub level: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.level) {
            Ok(())
        } else {
            Err(Error::invalid("perturbation level", format!("must be in [0, 1], got {}", self.level)))
        }
    }
}

/// Parses `kind=nuclei-intensity,level=0.6[,seed=3]`.
impl FromStr for PerturbationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mut kind, mut level, mut seed) = (None, None, 0);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid("perturbation", format!("expected key=value, got `{part}`")))?;
            let num = |what| Error::invalid("perturbation", format!("bad {what} `{v}`"));
            match k.trim() {
                "kind" => kind = Some(v.trim().parse()?),
                "level" => level = Some(v.trim().parse::<f64>().map_err(|_| num("level"))?),
                "seed" => seed = v.trim().parse().map_err(|_| num("seed"))?,
                other => return Err(Error::invalid("perturbation", format!("unknown key `{other}`"))),
            }
        }
        let spec = PerturbationSpec {
            kind: kind.ok_or_else(|| Error::invalid("perturbation", "missing kind"))?,
            level: level.ok_or_else(|| Error::invalid("perturbation", "missing level"))?,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Scales nucleus stain by `1 - level`.
pub fn apply_nuclei_intensity(scene: &SceneGraph, level: f64) -> Result<SceneGraph> {
    PerturbationSpec { kind: PerturbKind::NucleiIntensity, level, seed: 0 }.validate()?;
    let mut out = scene.clone();
    if level > 0.0 {
        out.config.stain.nucleus_intensity *= 1.0 - level;
    }
    Ok(out)
}

/// Adds `round(level × 150)` blood cells and `round(level × 12)` red stain
/// blobs. The `i`-th added object depends only on `(seed, i)`, so higher
/// levels extend lower ones.
pub fn apply_blood_stain(scene: &SceneGraph, level: f64, seed: u64) -> Result<SceneGraph> {
    PerturbationSpec { kind: PerturbKind::BloodStain, level, seed }.validate()?;
    let mut out = scene.clone();
    if level == 0.0 {
        return Ok(out);
    }
    let cfg = &scene.config;
    let extra = (level * MAX_EXTRA_BLOOD).round() as u64;
    let cells_seed = derive_seed(seed, "blood-extra", 0);
    for i in 0..extra {
        out.cells.push(blood_cell(&mut stream(cells_seed, "blood", i), cfg, &scene.layout));
    }
    // Keep existing ids; number the new cells after them.
    let first_new = scene.cells.len();
    let next = scene.cells.iter().map(|c| c.id).max().unwrap_or(0);
    if first_new + extra as usize > 65_534 || usize::from(next) + extra as usize > 65_534 {
        return Err(Error::TooManyInstances(first_new + extra as usize));
    }
    if scene.cells.iter().enumerate().all(|(i, c)| usize::from(c.id) == i + 1) {
        assign_ids(&mut out.cells)?;
    } else {
        for (k, c) in out.cells[first_new..].iter_mut().enumerate() {
            c.id = next + 1 + k as u16;
        }
    }

    let blobs = (level * MAX_STAIN_BLOBS).round() as u64;
    let blob_seed = derive_seed(seed, "stain-blob", 0);
    for i in 0..blobs {
        let mut rng = stream(blob_seed, "blob", i);
        let center = [rng.random_range(0.0..cfg.world_extent), rng.random_range(0.0..cfg.world_height())];
        let radius = rng.random_range(BLOB_RADIUS.0..=BLOB_RADIUS.1);
        out.stain_blobs.push(StainBlob {
            center,
            radius,
            intensity: BLOB_PEAK * level,
        });
    }
    out.provenance.perturbations.push(seed);
    Ok(out)
}

pub fn apply(scene: &SceneGraph, spec: &PerturbationSpec) -> Result<SceneGraph> {
    match spec.kind {
        PerturbKind::NucleiIntensity => apply_nuclei_intensity(scene, spec.level),
        PerturbKind::BloodStain => apply_blood_stain(scene, spec.level, spec.seed),
    }
}

/// `n` evenly spaced levels from 0 to 1.
pub fn level_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}
