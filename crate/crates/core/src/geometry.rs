//! Implicit cell shapes and slab sectioning.
//!
//! Shapes live in a local frame whose x axis is the major axis. Membership
//! is a radial test in ellipsoid-normalized coordinates, optionally
//! modulated by a band-limited angular noise field and a banana bend of the
//! major axis. The renderer only ever asks one question of a shape: where
//! does the vertical ray through `(x, y)` enter and leave `shape ∩ slab`.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed;

/// Maximum z step when scanning a ray through a noisy or bent shape.
const SCAN_STEP: f64 = 0.25;
/// Bisection tolerance for entry/exit depths.
const BISECT_TOL: f64 = 0.01;
const NOISE_TERMS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipsoid,
    BiLobed,
    Spindle,
    Disc,
    Vacuole,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slab {
    pub z0: f64,
    pub thickness: f64,
}

impl Slab {
    pub fn new(z0: f64, thickness: f64) -> Self {
        debug_assert!(thickness > 0.0);
        Slab { z0, thickness }
    }

    pub fn z1(&self) -> f64 {
        self.z0 + self.thickness
    }

    /// Splits into `n` equal consecutive sub-slabs.
    pub fn split(&self, n: usize) -> Vec<Slab> {
        let h = self.thickness / n as f64;
        (0..n)
            .map(|i| {
                let z0 = self.z0 + h * i as f64;
                let z1 = if i + 1 == n { self.z1() } else { self.z0 + h * (i + 1) as f64 };
                Slab::new(z0, z1 - z0)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancySample {
    pub covered: bool,
    pub z_entry: f64,
    pub z_exit: f64,
}

impl OccupancySample {
    const EMPTY: OccupancySample = OccupancySample {
        covered: false,
        z_entry: 0.0,
        z_exit: 0.0,
    };

    pub fn path_length(&self) -> f64 {
        if self.covered {
            self.z_exit - self.z_entry
        } else {
            0.0
        }
    }
}

/// Axis-aligned box in the xy plane. Empty when `min > max` on any axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb2 {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Aabb2 {
    pub const EMPTY: Aabb2 = Aabb2 {
        min: [f64::INFINITY; 2],
        max: [f64::NEG_INFINITY; 2],
    };

    pub fn is_empty(&self) -> bool {
        !(self.min[0] <= self.max[0] && self.min[1] <= self.max[1])
    }

    pub fn contains(&self, xy: [f64; 2]) -> bool {
        (self.min[0]..=self.max[0]).contains(&xy[0]) && (self.min[1]..=self.max[1]).contains(&xy[1])
    }

    pub fn dilate(&self, r: f64) -> Aabb2 {
        if self.is_empty() {
            return *self;
        }
        Aabb2 {
            min: [self.min[0] - r, self.min[1] - r],
            max: [self.max[0] + r, self.max[1] + r],
        }
    }
}

/// Sum of a few random plane waves on the unit sphere, normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
struct AngularNoise {
    terms: [(Vector3<f64>, f64, f64); NOISE_TERMS],
}

impl AngularNoise {
    fn new(noise_seed: u64) -> Self {
        let mut rng = seed::stream(noise_seed, "shape-noise", 0);
        let terms = std::array::from_fn(|_| {
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let s = (1.0 - z * z).sqrt();
            let dir = Vector3::new(s * phi.cos(), s * phi.sin(), z);
            let freq = rng.random_range(2.0..6.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (dir, freq, phase)
        });
        AngularNoise { terms }
    }

    #[inline]
    fn eval(&self, unit: &Vector3<f64>) -> f64 {
        let sum: f64 = self
            .terms
            .iter()
            .map(|(dir, freq, phase)| (freq * dir.dot(unit) + phase).sin())
            .sum();
        sum / NOISE_TERMS as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitShape {
    pub kind: ShapeKind,
    pub center: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub semi_axes: Vector3<f64>,
    /// Distance between the two lobe centers (bi-lobed only).
    pub lobe_separation: f64,
    /// Bend of the major axis, 0..=1; the tips are displaced by
    /// `bending * major / 2` along local y.
    pub bending: f64,
    pub noise_amplitude: f64,
    pub noise_seed: u64,
    noise: Option<AngularNoise>,
    to_local: Matrix3<f64>,
    inv_semi_sq: Vector3<f64>,
}

impl ImplicitShape {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: ShapeKind,
        center: Vector3<f64>,
        orientation: UnitQuaternion<f64>,
        semi_axes: Vector3<f64>,
        lobe_separation: f64,
        bending: f64,
        noise_amplitude: f64,
        noise_seed: u64,
    ) -> Self {
        let lobe_separation = if kind == ShapeKind::BiLobed { lobe_separation } else { 0.0 };
        let noise = (noise_amplitude > 0.0).then(|| AngularNoise::new(noise_seed));
        ImplicitShape {
            kind,
            center,
            orientation,
            semi_axes,
            lobe_separation,
            bending,
            noise_amplitude,
            noise_seed,
            noise,
            to_local: orientation.inverse().to_rotation_matrix().into_inner(),
            inv_semi_sq: semi_axes.map(|s| 1.0 / (s * s)),
        }
    }

    pub fn sphere(center: Vector3<f64>, radius: f64) -> Self {
        Self::new(
            ShapeKind::Ellipsoid,
            center,
            UnitQuaternion::identity(),
            Vector3::repeat(radius),
            0.0,
            0.0,
            0.0,
            0,
        )
    }

    fn lobe_offsets(&self) -> &'static [f64] {
        if self.lobe_separation > 0.0 {
            &[-0.5, 0.5]
        } else {
            &[0.0]
        }
    }

    fn bend_max(&self) -> f64 {
        self.bending * 0.5 * (self.semi_axes.x + 0.5 * self.lobe_separation)
    }

    fn inflation(&self) -> f64 {
        1.0 + self.noise_amplitude
    }

    /// Radius of a sphere around `center` that contains the shape.
    pub fn bounding_radius(&self) -> f64 {
        self.semi_axes.max() * self.inflation() + 0.5 * self.lobe_separation + self.bend_max()
    }

    #[inline]
    fn local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let mut l = self.to_local * (p - self.center);
        if self.bending > 0.0 {
            let half = self.semi_axes.x + 0.5 * self.lobe_separation;
            let u = l.x / half;
            l.y -= self.bend_max() * u * u;
        }
        l
    }

    #[inline]
    fn lobe_contains(&self, q: Vector3<f64>) -> bool {
        let r2 = q.norm_squared();
        match &self.noise {
            None => r2 <= 1.0,
            Some(noise) => {
                let a = self.noise_amplitude;
                if r2 > (1.0 + a) * (1.0 + a) {
                    return false;
                }
                if r2 <= (1.0 - a) * (1.0 - a) {
                    return true;
                }
                let r = r2.sqrt();
                r <= 1.0 + a * noise.eval(&(q / r))
            }
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let l = self.local(p);
        self.lobe_offsets().iter().any(|&k| {
            let off = Vector3::new(k * self.lobe_separation, 0.0, 0.0);
            self.lobe_contains((l - off).component_div(&self.semi_axes))
        })
    }

    /// Half extents of the axis-aligned world box around `center`.
    fn half_extents(&self) -> Vector3<f64> {
        let r = self.orientation.to_rotation_matrix().into_inner();
        let s = self.semi_axes * self.inflation();
        Vector3::from_fn(|i, _| {
            let ellipsoid = ((r[(i, 0)] * s.x).powi(2) + (r[(i, 1)] * s.y).powi(2) + (r[(i, 2)] * s.z).powi(2)).sqrt();
            ellipsoid + r[(i, 0)].abs() * 0.5 * self.lobe_separation + r[(i, 1)].abs() * self.bend_max()
        })
    }

    /// World z range that can contain the shape.
    pub fn z_range(&self) -> (f64, f64) {
        let h = self.half_extents().z;
        (self.center.z - h, self.center.z + h)
    }

    /// Exact entry/exit of the vertical ray for smooth unbent shapes, or the
    /// interval of the inflated bound otherwise.
    fn ray_interval(&self, xy: [f64; 2], inflate: f64) -> Option<(f64, f64)> {
        let d = self.to_local.column(2).into_owned();
        let o0 = self.to_local * Vector3::new(xy[0] - self.center.x, xy[1] - self.center.y, -self.center.z);
        let inv = self.inv_semi_sq / (inflate * inflate);
        let a = d.component_mul(&d).dot(&inv);
        let mut best: Option<(f64, f64)> = None;
        for &k in self.lobe_offsets() {
            let o = o0 - Vector3::new(k * self.lobe_separation, 0.0, 0.0);
            let b = 2.0 * o.component_mul(&d).dot(&inv);
            let c = o.component_mul(&o).dot(&inv) - 1.0;
            let disc = b * b - 4.0 * a * c;
            if disc <= 0.0 {
                continue;
            }
            let sq = disc.sqrt();
            let (t0, t1) = ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a));
            best = Some(match best {
                None => (t0, t1),
                Some((e, x)) => (e.min(t0), x.max(t1)),
            });
        }
        best
    }

    fn bisect(&self, xy: [f64; 2], mut inside: f64, mut outside: f64) -> f64 {
        while (inside - outside).abs() > BISECT_TOL {
            let mid = 0.5 * (inside + outside);
            if self.contains(&Vector3::new(xy[0], xy[1], mid)) {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        inside
    }
}

/// Whether `point` lies inside the shape after pose, bend and noise.
pub fn contains(shape: &ImplicitShape, point: &Vector3<f64>) -> bool {
    shape.contains(point)
}

/// Entry and exit depths of the vertical ray through `xy` within
/// `shape ∩ slab`.
///
/// Smooth, unbent shapes are solved in closed form. Otherwise the ray is
/// scanned in steps of at most 0.25 µm inside the bounding interval and
/// both ends are refined by bisection to 0.01 µm; the reported depths are
/// always points that test inside.
pub fn slab_occupancy(shape: &ImplicitShape, slab: &Slab, xy: [f64; 2]) -> OccupancySample {
    let exact = shape.noise.is_none() && shape.bending == 0.0;
    let interval = if exact {
        shape.ray_interval(xy, 1.0)
    } else if shape.bending == 0.0 {
        shape.ray_interval(xy, shape.inflation())
    } else {
        let r = shape.bounding_radius();
        let d2 = (xy[0] - shape.center.x).powi(2) + (xy[1] - shape.center.y).powi(2);
        (d2 < r * r).then(|| {
            let h = (r * r - d2).sqrt();
            (shape.center.z - h, shape.center.z + h)
        })
    };
    let Some((t0, t1)) = interval else {
        return OccupancySample::EMPTY;
    };
    let lo = t0.max(slab.z0);
    let hi = t1.min(slab.z1());
    if hi <= lo {
        return OccupancySample::EMPTY;
    }
    if exact {
        return OccupancySample {
            covered: true,
            z_entry: lo,
            z_exit: hi,
        };
    }

    let n = (((hi - lo) / SCAN_STEP).ceil() as usize).max(2);
    let z_at = |i: usize| if i == n { hi } else { lo + (hi - lo) * i as f64 / n as f64 };
    let inside = |z: f64| shape.contains(&Vector3::new(xy[0], xy[1], z));
    let Some(first) = (0..=n).find(|&i| inside(z_at(i))) else {
        return OccupancySample::EMPTY;
    };
    let last = (first..=n).rev().find(|&i| inside(z_at(i))).unwrap_or(first);
    let z_entry = if first == 0 { lo } else { shape.bisect(xy, z_at(first), z_at(first - 1)) };
    let z_exit = if last == n { hi } else { shape.bisect(xy, z_at(last), z_at(last + 1)) };
    OccupancySample {
        covered: true,
        z_entry,
        z_exit,
    }
}

/// Conservative xy box of everything the shape can cover inside the slab.
pub fn footprint(shape: &ImplicitShape, slab: &Slab) -> Aabb2 {
    let h = shape.half_extents();
    if shape.center.z + h.z <= slab.z0 || shape.center.z - h.z >= slab.z1() {
        return Aabb2::EMPTY;
    }
    Aabb2 {
        min: [shape.center.x - h.x, shape.center.y - h.y],
        max: [shape.center.x + h.x, shape.center.y + h.y],
    }
}
