//! Softmax stacks derived from ground truth with separate knobs for
//! within-member spread (aleatoric) and between-member disagreement
//! (epistemic). Used to exercise the harness without a trained model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{gaussian_blur, Border};
use crate::seed::{hash_key, normal_from_key, unit_f64};
use crate::uq::ProbStack;

/// Probability floor before taking logs, so jitter can move mass off a
/// one-hot class.
pub const LOGIT_FLOOR: f64 = 1e-3;

const CONFUSION_KEY: u64 = 0x636f_6e66;
const JITTER_KEY: u64 = 0x6a69_7474;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSpec {
    pub members: usize,
    pub softness: f64,
    pub jitter: f64,
    /// Row-stochastic `C × C`; row = true class.
    #[serde(default)]
    pub confusion: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub boundary_sigma: f64,
    pub seed: u64,
    #[serde(default = "default_tag")]
    pub source_tag: String,
}

fn default_tag() -> String {
    "mock".into()
}

impl Default for MockSpec {
    fn default() -> Self {
        MockSpec {
            members: 8,
            softness: 0.0,
            jitter: 0.0,
            confusion: None,
            boundary_sigma: 0.0,
            seed: 0,
            source_tag: default_tag(),
        }
    }
}

impl MockSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.members == 0 {
            return Err(Error::invalid("mock spec", "members must be >= 1"));
        }
        for (what, v) in [("softness", self.softness), ("jitter", self.jitter), ("boundary_sigma", self.boundary_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("mock spec", format!("{what} must be finite and >= 0, got {v}")));
            }
        }
        if let Some(m) = &self.confusion {
            if m.len() != classes || m.iter().any(|r| r.len() != classes) {
                return Err(Error::invalid("mock spec", format!("confusion must be {classes}x{classes}")));
            }
            for (i, row) in m.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&v| v.is_nan() || v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid("mock spec", format!("confusion row {i} is not stochastic (sum {sum})")));
                }
            }
        }
        Ok(())
    }
}

/// Label after passing through the confusion matrix, drawn from a key on
/// the pixel so it is shared by all members.
fn confused_label(row: &[f64], seed: u64, pixel: usize) -> usize {
    let u = unit_f64(hash_key(&[seed, CONFUSION_KEY, pixel as u64]));
    let mut acc = 0.0;
    for (k, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Rounding left a sliver above the last cumulative value.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Builds a stack from an `H × W` label map with labels `< class_names.len()`.
pub fn generate_stack(
    gt: &[u8],
    height: usize,
    width: usize,
    class_names: &[String],
    spec: &MockSpec,
) -> Result<ProbStack> {
    let c = class_names.len();
    let hw = height * width;
    if gt.len() != hw {
        return Err(Error::Dimensions(format!("label map has {} pixels, expected {height}x{width}", gt.len())));
    }
    spec.validate(c)?;
    if let Some(i) = gt.iter().position(|&l| usize::from(l) >= c) {
        return Err(Error::LabelOutOfRange {
            label: gt[i],
            h: i / width,
            w: i % width,
            classes: c,
        });
    }

    let mut base = vec![0.0f64; c * hw];
    for (i, &l) in gt.iter().enumerate() {
        let k = match &spec.confusion {
            Some(m) => confused_label(&m[usize::from(l)], spec.seed, i),
            None => usize::from(l),
        };
        base[k * hw + i] = 1.0;
    }
    base.par_chunks_mut(hw)
        .for_each(|plane| gaussian_blur(plane, width, height, spec.boundary_sigma, Border::Clamp));

    let lambda = 1.0 - (-spec.softness).exp();
    let uniform = 1.0 / c as f64;
    base.iter_mut().for_each(|v| *v = (1.0 - lambda) * *v + lambda * uniform);

    let member = |t: usize| -> Vec<f32> {
        let mut out = vec![0f32; c * hw];
        let mut v = vec![0.0f64; c];
        for i in 0..hw {
            for k in 0..c {
                v[k] = base[k * hw + i];
            }
            if spec.jitter > 0.0 {
                for (k, x) in v.iter_mut().enumerate() {
                    let eps = normal_from_key(&[spec.seed, JITTER_KEY, t as u64, i as u64, k as u64]);
                    *x = x.max(LOGIT_FLOOR).ln() + spec.jitter * eps;
                }
                let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                v.iter_mut().for_each(|x| *x = (*x - m).exp());
            }
            let s: f64 = v.iter().sum();
            for k in 0..c {
                out[k * hw + i] = (v[k] / s) as f32;
            }
        }
        out
    };
    let data: Vec<f32> = if spec.jitter > 0.0 {
        (0..spec.members).into_par_iter().flat_map_iter(member).collect()
    } else {
        let one = member(0);
        (0..spec.members).flat_map(|_| one.iter().copied()).collect()
    };
    ProbStack::new(spec.members, c, height, width, data, class_names.to_vec(), spec.source_tag.clone())
}
