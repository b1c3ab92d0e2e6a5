//! Ground-truth world construction.
//!
//! Crypts sit on a jittered hexagonal lattice. Their walls are lined with
//! rings of epithelial nuclei, one ring per z band, each ring relaxed with a
//! 1D Lloyd iteration so neighbours end up roughly evenly spaced. The stroma
//! between crypts is filled with immune and support cells by dart throwing,
//! and blood cells are scattered there as distractors.

use std::f64::consts::TAU;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{CellClass, SceneConfig, ShapeParams, ValidatedConfig};
use crate::error::{Error, Result};
use crate::geometry::{ImplicitShape, ShapeKind};
use crate::seed::{self, derive_seed, Rng};

/// Axial length over which a crypt's quadratic bend reaches its amplitude.
const BEND_LENGTH: f64 = 50.0;
const MAX_TEARS: f64 = 8.0;
const DART_RETRIES: usize = 30;
const MAX_INSTANCES: usize = 65_534;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crypt {
    pub center_xy: [f64; 2],
    pub radius: f64,
    pub wall_thickness: f64,
    /// Unit direction of the crypt axis.
    pub axis_tilt: [f64; 3],
    /// Lateral offset of the axis at `BEND_LENGTH` above or below `z_ref`.
    pub bend: [f64; 2],
    pub z_ref: f64,
}

impl Crypt {
    /// Axis position in the plane at height `z`.
    pub fn axis_at(&self, z: f64) -> [f64; 2] {
        let dz = z - self.z_ref;
        let s = dz / BEND_LENGTH;
        let [tx, ty, tz] = self.axis_tilt;
        [
            self.center_xy[0] + tx / tz * dz + self.bend[0] * s * s,
            self.center_xy[1] + ty / tz * dz + self.bend[1] * s * s,
        ]
    }

    pub fn radial_distance(&self, p: [f64; 3]) -> f64 {
        let a = self.axis_at(p[2]);
        (p[0] - a[0]).hypot(p[1] - a[1])
    }

    pub fn interior_contains(&self, p: [f64; 3]) -> bool {
        self.radial_distance(p) < self.radius
    }

    pub fn lumen_contains(&self, p: [f64; 3]) -> bool {
        self.radial_distance(p) < self.radius - self.wall_thickness
    }
}

/// Polygonal void in the stroma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tear {
    pub vertices: Vec<[f64; 2]>,
}

impl Tear {
    pub fn contains(&self, xy: [f64; 2]) -> bool {
        let v = &self.vertices;
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (a, b) = (v[i], v[j]);
            if (a[1] > xy[1]) != (b[1] > xy[1]) && xy[0] < (b[0] - a[0]) * (xy[1] - a[1]) / (b[1] - a[1]) + a[0] {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    pub fn area(&self) -> f64 {
        let v = &self.vertices;
        let twice: f64 = (0..v.len())
            .map(|i| {
                let (a, b) = (v[i], v[(i + 1) % v.len()]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum();
        0.5 * twice.abs()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CryptLayout {
    pub crypts: Vec<Crypt>,
    pub tears: Vec<Tear>,
}

impl CryptLayout {
    pub fn in_crypt(&self, p: [f64; 3]) -> bool {
        self.crypts.iter().any(|c| c.interior_contains(p))
    }

    pub fn in_lumen(&self, p: [f64; 3]) -> bool {
        self.crypts.iter().any(|c| c.lumen_contains(p))
    }

    /// Tears only void stroma; crypts cut through them.
    pub fn in_tear(&self, p: [f64; 3]) -> bool {
        self.tears.iter().any(|t| t.contains([p[0], p[1]])) && !self.in_crypt(p)
    }

    pub fn in_stroma(&self, p: [f64; 3]) -> bool {
        !self.in_crypt(p) && !self.tears.iter().any(|t| t.contains([p[0], p[1]]))
    }

    /// Whether the point carries tissue stain (stroma or crypt wall).
    pub fn is_tissue(&self, p: [f64; 3]) -> bool {
        !self.in_lumen(p) && !self.in_tear(p)
    }
}

/// Realized shape of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellShape {
    pub kind: ShapeKind,
    /// Semi-axes of the nucleus (or of the body for goblet/blood cells).
    pub semi_axes: [f64; 3],
    pub lobe_separation: f64,
    pub bending: f64,
    pub shape_noise: f64,
    pub noise_seed: u64,
    /// Cytoplasm ellipsoid, sharing the cell orientation.
    pub cytoplasm: Option<Cytoplasm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cytoplasm {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellInstance {
    pub id: u16,
    pub class: CellClass,
    pub nucleus_center: [f64; 3],
    /// Unit quaternion `[w, x, y, z]`; local x is the major axis.
    pub orientation: [f64; 4],
    pub shape: CellShape,
    pub stain_jitter: f64,
    /// Crypt the cell belongs to (epithelial and goblet only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crypt: Option<usize>,
}

impl CellInstance {
    pub fn rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.orientation;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
    }

    /// Nucleus shape, or the whole body for anucleate distractors.
    pub fn body_shape(&self) -> ImplicitShape {
        let s = &self.shape;
        ImplicitShape::new(
            s.kind,
            Vector3::from(self.nucleus_center),
            self.rotation(),
            Vector3::from(s.semi_axes),
            s.lobe_separation,
            s.bending,
            s.shape_noise,
            s.noise_seed,
        )
    }

    pub fn cytoplasm_shape(&self) -> Option<ImplicitShape> {
        let s = &self.shape;
        s.cytoplasm.as_ref().map(|c| {
            ImplicitShape::new(
                ShapeKind::Ellipsoid,
                Vector3::from(c.center),
                self.rotation(),
                Vector3::from(c.semi_axes),
                0.0,
                s.bending,
                0.0,
                0,
            )
        })
    }
}

/// Soft-edged red stain disc, confined to the stroma when rendered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainBlob {
    pub center: [f64; 2],
    pub radius: f64,
    pub intensity: f64,
}

impl StainBlob {
    /// Density at `xy`: flat core, smooth falloff over the outer 40%.
    pub fn density(&self, xy: [f64; 2]) -> f64 {
        let r = (xy[0] - self.center[0]).hypot(xy[1] - self.center[1]) / self.radius;
        if r >= 1.0 {
            0.0
        } else if r <= 0.6 {
            self.intensity
        } else {
            let t = (1.0 - r) / 0.4;
            self.intensity * t * t * (3.0 - 2.0 * t)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedProvenance {
    pub master_seed: u64,
    pub crypts: u64,
    pub epithelial: u64,
    pub stromal: u64,
    pub distractors: u64,
    /// Seeds of perturbations applied after assembly, in order.
    #[serde(default)]
    pub perturbations: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub config: SceneConfig,
    pub layout: CryptLayout,
    pub cells: Vec<CellInstance>,
    #[serde(default)]
    pub stain_blobs: Vec<StainBlob>,
    pub provenance: SeedProvenance,
}

impl SceneGraph {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scene serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<SceneGraph, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn cell(&self, id: u16) -> Option<&CellInstance> {
        let c = self.cells.get(usize::from(id).checked_sub(1)?)?;
        (c.id == id).then_some(c).or_else(|| self.cells.iter().find(|c| c.id == id))
    }

    pub fn count(&self, class: CellClass) -> usize {
        self.cells.iter().filter(|c| c.class == class).count()
    }
}

fn sample_diameter(rng: &mut Rng, p: &ShapeParams) -> f64 {
    let d = if p.diameter_sd > 0.0 {
        Normal::new(p.diameter_mean, p.diameter_sd).expect("finite sd").sample(rng)
    } else {
        p.diameter_mean
    };
    d.max(0.3 * p.diameter_mean)
}

/// Semi-axes of an equal-volume ellipsoid with the given elongation along x.
fn elongated(d: f64, elongation: f64) -> [f64; 3] {
    let r = 0.5 * d;
    let minor = r * elongation.powf(-1.0 / 3.0);
    [r * elongation.powf(2.0 / 3.0), minor, minor]
}

fn uniform_rotation(rng: &mut Rng) -> [f64; 4] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    [b * (TAU * u3).cos(), a * (TAU * u2).sin(), a * (TAU * u2).cos(), b * (TAU * u3).sin()]
}

fn rotation_about_z(angle: f64) -> [f64; 4] {
    [(0.5 * angle).cos(), 0.0, 0.0, (0.5 * angle).sin()]
}

fn stain_jitter(rng: &mut Rng, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 1.0;
    }
    let n: f64 = Normal::new(0.0, sigma).expect("finite sigma").sample(rng);
    (1.0 + n).max(0.0)
}

fn z_ref(config: &SceneConfig) -> f64 {
    config.slab_z0 + 0.5 * config.slab_thickness
}

fn tear_radius(degree: f64) -> f64 {
    4.0 + 16.0 * degree
}

/// Hexagonal crypt lattice plus tears.
pub fn build_crypt_layout(config: &ValidatedConfig, seed: u64) -> CryptLayout {
    let (w, h) = (config.world_extent, config.world_height());
    let spacing = config.crypt_spacing;
    let row = spacing * 3f64.sqrt() / 2.0;
    let margin = config.crypt_radius_mean + config.crypt_radius_jitter + config.crypt_position_jitter;
    let zr = z_ref(config);

    let mut lattice_rng = seed::stream(seed, "crypt-lattice", 0);
    let ox: f64 = lattice_rng.random_range(0.0..spacing);
    let oy: f64 = lattice_rng.random_range(0.0..2.0 * row);

    let mut centers = Vec::new();
    let j0 = ((-margin - oy) / row).floor() as i64;
    let j1 = ((h + margin - oy) / row).ceil() as i64;
    let i0 = ((-margin - ox) / spacing).floor() as i64 - 1;
    let i1 = ((w + margin - ox) / spacing).ceil() as i64 + 1;
    for j in j0..=j1 {
        let shift = if j.rem_euclid(2) == 1 { 0.5 * spacing } else { 0.0 };
        for i in i0..=i1 {
            let x = ox + i as f64 * spacing + shift;
            let y = oy + j as f64 * row;
            if (-margin..=w + margin).contains(&x) && (-margin..=h + margin).contains(&y) {
                centers.push([x, y]);
            }
        }
    }

    let max_tilt = config.crypt_max_tilt_deg.to_radians();
    let mut crypts: Vec<Crypt> = centers
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let mut rng = seed::stream(seed, "crypt", k as u64);
            let jr = config.crypt_position_jitter * rng.random::<f64>().sqrt();
            let ja = rng.random_range(0.0..TAU);
            let radius = config.crypt_radius_mean + config.crypt_radius_jitter * rng.random_range(-1.0..=1.0);
            let theta = max_tilt * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..TAU);
            let bend_dir = rng.random_range(0.0..TAU);
            let bend = config.crypt_bending_amplitude * rng.random::<f64>();
            Crypt {
                center_xy: [c[0] + jr * ja.cos(), c[1] + jr * ja.sin()],
                radius,
                wall_thickness: config.crypt_wall_thickness,
                axis_tilt: [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()],
                bend: [bend * bend_dir.cos(), bend * bend_dir.sin()],
                z_ref: zr,
            }
        })
        .collect();

    // Keep interiors disjoint at the reference depth.
    let limits: Vec<f64> = crypts
        .iter()
        .enumerate()
        .map(|(i, a)| {
            crypts
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| 0.5 * (a.center_xy[0] - b.center_xy[0]).hypot(a.center_xy[1] - b.center_xy[1]) - 0.5)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    for (c, limit) in crypts.iter_mut().zip(&limits) {
        c.radius = c.radius.min(*limit);
    }
    crypts.retain(|c| c.radius > 1.05 * c.wall_thickness);

    let mut layout = CryptLayout {
        crypts,
        tears: Vec::new(),
    };
    let n_tears = (config.tearing_degree * MAX_TEARS).round() as u64;
    let scale = tear_radius(config.tearing_degree);
    for t in 0..n_tears {
        let mut rng = seed::stream(seed, "tear", t);
        let mut center = [0.0, 0.0];
        for _ in 0..64 {
            center = [rng.random_range(0.0..w), rng.random_range(0.0..h)];
            if layout.in_stroma([center[0], center[1], zr]) {
                break;
            }
        }
        let size = rng.random_range(0.7..1.3);
        let n = rng.random_range(4..=7);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let vertices = angles
            .iter()
            .map(|&a| {
                let r = scale * size * rng.random_range(0.5..1.0);
                [center[0] + r * a.cos(), center[1] + r * a.sin()]
            })
            .collect();
        layout.tears.push(Tear { vertices });
    }
    layout
}

/// One Lloyd step on the circle: every angle moves to the middle of its
/// Voronoi arc. Input and output are sorted in `[0, 2π)`.
fn lloyd_step(angles: &mut [f64]) {
    let n = angles.len();
    if n < 2 {
        return;
    }
    let old = angles.to_vec();
    for i in 0..n {
        let prev = if i == 0 { old[n - 1] - TAU } else { old[i - 1] };
        let next = if i + 1 == n { old[0] + TAU } else { old[i + 1] };
        let lo = 0.5 * (prev + old[i]);
        let hi = 0.5 * (old[i] + next);
        angles[i] = 0.5 * (lo + hi);
    }
    for a in angles.iter_mut() {
        *a = a.rem_euclid(TAU);
    }
    angles.sort_by(f64::total_cmp);
}

/// Arc width of each point's Voronoi cell on the circle.
fn voronoi_widths(angles: &[f64]) -> Vec<f64> {
    let n = angles.len();
    if n == 1 {
        return vec![TAU];
    }
    (0..n)
        .map(|i| {
            let prev = if i == 0 { angles[n - 1] - TAU } else { angles[i - 1] };
            let next = if i + 1 == n { angles[0] + TAU } else { angles[i + 1] };
            0.5 * (next - prev)
        })
        .collect()
}

/// Number of nuclei that fit on a ring: diameters are drawn one after
/// another until the next one no longer fits in the circumference.
fn ring_count(rng: &mut Rng, circumference: f64, p: &ShapeParams) -> usize {
    let mut used = 0.0;
    let mut n = 0;
    loop {
        let d = sample_diameter(rng, p);
        if used + d > circumference {
            break;
        }
        used += d;
        n += 1;
    }
    n.max(3)
}

/// Ring radius of nucleus centers for a crypt.
pub fn nucleus_ring_radius(crypt: &Crypt) -> f64 {
    crypt.radius - 0.5 * crypt.wall_thickness
}

pub fn place_epithelial_cells(layout: &CryptLayout, config: &ValidatedConfig, seed: u64) -> Vec<CellInstance> {
    let p = &config.shapes.epithelial;
    let goblet = &config.shapes.goblet;
    let band = p.diameter_mean;
    let z_start = config.slab_z0 - p.diameter_mean;
    let n_bands = ((config.slab_thickness + 2.0 * p.diameter_mean) / band).ceil() as usize;
    let sigma = config.stain.stain_noise_sigma;
    let mut cells = Vec::new();

    for (ci, crypt) in layout.crypts.iter().enumerate() {
        let ring = nucleus_ring_radius(crypt);
        let half_wall = 0.5 * crypt.wall_thickness;
        for b in 0..n_bands {
            let mut rng = seed::stream(seed, &format!("epithelial/{ci}"), b as u64);
            let n = ring_count(&mut rng, TAU * ring, p);
            let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
            angles.sort_by(f64::total_cmp);
            for _ in 0..30 {
                lloyd_step(&mut angles);
            }
            let gap = TAU / n as f64;
            let widths = voronoi_widths(&angles);
            let zb = z_start + (b as f64 + 0.5) * band;

            for (&theta, &width) in angles.iter().zip(&widths) {
                let extent = width.clamp(0.6 * gap, gap);
                let z = zb + 0.15 * band * rng.random_range(-1.0..=1.0);
                let axis = crypt.axis_at(z);
                let (cos, sin) = (theta.cos(), theta.sin());
                let noise_seed: u64 = rng.random();
                let jitter = stain_jitter(&mut rng, sigma);

                if rng.random::<f64>() < config.goblet_ratio {
                    let r = (0.5 * sample_diameter(&mut rng, goblet)).min(0.9 * half_wall).min(0.5 * ring * extent);
                    let center = [axis[0] + ring * cos, axis[1] + ring * sin, z];
                    cells.push(CellInstance {
                        id: 0,
                        class: CellClass::Goblet,
                        nucleus_center: center,
                        orientation: rotation_about_z(theta),
                        shape: CellShape {
                            kind: ShapeKind::Vacuole,
                            semi_axes: elongated(2.0 * r, goblet.elongation),
                            lobe_separation: 0.0,
                            bending: 0.0,
                            shape_noise: goblet.shape_noise,
                            noise_seed,
                            cytoplasm: None,
                        },
                        stain_jitter: jitter,
                        crypt: Some(ci),
                    });
                    continue;
                }

                let d = sample_diameter(&mut rng, p);
                let [ax, _, az] = elongated(d, p.elongation);
                let radial = ax.min(0.35 * crypt.wall_thickness);
                let tangential = 0.5 * ring * extent;
                let slack = (half_wall - radial).max(0.0);
                let r = ring + 0.5 * slack * rng.random_range(-1.0..=1.0);
                cells.push(CellInstance {
                    id: 0,
                    class: CellClass::Epithelial,
                    nucleus_center: [axis[0] + r * cos, axis[1] + r * sin, z],
                    orientation: rotation_about_z(theta),
                    shape: CellShape {
                        kind: ShapeKind::Ellipsoid,
                        semi_axes: [radial, tangential, az],
                        lobe_separation: 0.0,
                        bending: 0.0,
                        shape_noise: p.shape_noise,
                        noise_seed,
                        cytoplasm: Some(Cytoplasm {
                            center: [axis[0] + ring * cos, axis[1] + ring * sin, zb],
                            semi_axes: [0.95 * half_wall, 0.5 * ring * width.min(1.3 * gap), 0.5 * band * p.cytoplasm_scale],
                        }),
                    },
                    stain_jitter: jitter,
                    crypt: Some(ci),
                });
            }
        }
    }
    cells
}

fn stromal_cell(rng: &mut Rng, config: &SceneConfig, class: CellClass, center: [f64; 3]) -> CellInstance {
    let p = config.shapes.get(class);
    let d = sample_diameter(rng, p);
    let orientation = uniform_rotation(rng);
    let noise_seed: u64 = rng.random();
    let (kind, semi_axes, lobe_separation) = match class {
        CellClass::Eosinophil => {
            let lobe = elongated(0.8 * d, p.elongation);
            (ShapeKind::BiLobed, lobe, p.lobe_separation)
        }
        CellClass::Fibroblast => (ShapeKind::Spindle, elongated(d, p.elongation), 0.0),
        _ => (ShapeKind::Ellipsoid, elongated(d, p.elongation), 0.0),
    };
    // Plasma cells carry their nucleus off-center in the cytoplasm.
    let offset = if class == CellClass::Plasma { 0.35 * (p.cytoplasm_scale - 1.0) * 0.5 * d } else { 0.0 };
    let rot = UnitQuaternion::from_quaternion(Quaternion::new(
        orientation[0],
        orientation[1],
        orientation[2],
        orientation[3],
    ));
    let shift = rot * Vector3::new(offset, 0.0, 0.0);
    let cyto_semi = [
        (semi_axes[0] + 0.5 * lobe_separation) * p.cytoplasm_scale,
        semi_axes[1] * p.cytoplasm_scale,
        semi_axes[2] * p.cytoplasm_scale,
    ];
    CellInstance {
        id: 0,
        class,
        nucleus_center: center,
        orientation,
        shape: CellShape {
            kind,
            semi_axes,
            lobe_separation,
            bending: p.bending,
            shape_noise: p.shape_noise,
            noise_seed,
            cytoplasm: Some(Cytoplasm {
                center: [center[0] + shift.x, center[1] + shift.y, center[2] + shift.z],
                semi_axes: cyto_semi,
            }),
        },
        stain_jitter: stain_jitter(rng, config.stain.stain_noise_sigma),
        crypt: None,
    }
}

pub(crate) fn random_point(rng: &mut Rng, config: &SceneConfig) -> [f64; 3] {
    [
        rng.random_range(0.0..config.world_extent),
        rng.random_range(0.0..config.world_height()),
        rng.random_range(config.slab_z0..config.slab_z1()),
    ]
}

/// Scatters stromal cells at `stromal_density`.
///
/// A Poisson number of darts is thrown uniformly over the whole image; darts
/// landing outside the stroma are discarded, so the kept count is Poisson
/// with mean `density × stroma area`. A kept dart that is closer than half
/// the class diameter to an earlier cell is re-thrown within the stroma up to
/// 30 times, then accepted as is.
pub fn place_stromal_cells(layout: &CryptLayout, config: &ValidatedConfig, seed: u64) -> Vec<CellInstance> {
    let mut rng = seed::stream(seed, "stroma", 0);
    let area_mm2 = config.world_extent * config.world_height() * 1e-6;
    let mean = config.stromal_density * area_mm2;
    if mean <= 0.0 {
        return Vec::new();
    }
    let darts = Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize;
    let ratios = config.class_ratios.as_array();
    let mut cells: Vec<CellInstance> = Vec::new();

    for _ in 0..darts {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let class = CellClass::STROMAL
            .iter()
            .zip(ratios)
            .find(|(_, r)| {
                acc += r;
                u < acc
            })
            .map(|(c, _)| *c)
            .unwrap_or(CellClass::Fibroblast);

        let mut p = random_point(&mut rng, config);
        if !layout.in_stroma(p) {
            continue;
        }
        let min_sep = 0.5 * config.shapes.get(class).diameter_mean;
        let clear = |p: [f64; 3], cells: &[CellInstance]| {
            cells.iter().all(|c| {
                let q = c.nucleus_center;
                (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2) >= min_sep * min_sep
            })
        };
        let mut tries = 0;
        while !clear(p, &cells) && tries < DART_RETRIES {
            tries += 1;
            let q = random_point(&mut rng, config);
            if layout.in_stroma(q) {
                p = q;
            }
        }
        cells.push(stromal_cell(&mut rng, config, class, p));
    }
    cells
}

pub(crate) fn blood_cell(rng: &mut Rng, config: &SceneConfig, layout: &CryptLayout) -> CellInstance {
    let mut p = random_point(rng, config);
    for _ in 0..1000 {
        if layout.in_stroma(p) {
            break;
        }
        p = random_point(rng, config);
    }
    let shape = &config.shapes.blood_cell;
    let r = 0.5 * sample_diameter(rng, shape);
    // Discs lie roughly flat in the section.
    let tilt = rng.random_range(-0.3..0.3);
    let spin = rng.random_range(0.0..TAU);
    let q = UnitQuaternion::from_euler_angles(tilt, 0.0, spin);
    let noise_seed: u64 = rng.random();
    CellInstance {
        id: 0,
        class: CellClass::BloodCell,
        nucleus_center: p,
        orientation: [q.w, q.i, q.j, q.k],
        shape: CellShape {
            kind: ShapeKind::Disc,
            semi_axes: [r, r, 0.3 * r],
            lobe_separation: 0.0,
            bending: 0.0,
            shape_noise: shape.shape_noise,
            noise_seed,
            cytoplasm: None,
        },
        stain_jitter: stain_jitter(rng, config.stain.stain_noise_sigma),
        crypt: None,
    }
}

/// Blood cells in the stroma. Cell `i` depends only on `(seed, i)`, so a
/// larger count extends a smaller one.
pub fn place_distractors(layout: &CryptLayout, config: &ValidatedConfig, seed: u64, blood_count: usize) -> Vec<CellInstance> {
    (0..blood_count)
        .map(|i| blood_cell(&mut seed::stream(seed, "blood", i as u64), config, layout))
        .collect()
}

fn within_padded_world(config: &SceneConfig, p: [f64; 3]) -> bool {
    let pad = config.max_cell_diameter();
    (-pad..=config.world_extent + pad).contains(&p[0])
        && (-pad..=config.world_height() + pad).contains(&p[1])
        && (config.slab_z0 - pad..=config.slab_z1() + pad).contains(&p[2])
}

pub(crate) fn assign_ids(cells: &mut [CellInstance]) -> Result<()> {
    if cells.len() > MAX_INSTANCES {
        return Err(Error::TooManyInstances(cells.len()));
    }
    for (i, c) in cells.iter_mut().enumerate() {
        c.id = (i + 1) as u16;
    }
    Ok(())
}

/// Builds the full scene. A pure function of the config.
pub fn assemble_scene(config: &ValidatedConfig) -> Result<SceneGraph> {
    let master = config.master_seed;
    let provenance = SeedProvenance {
        master_seed: master,
        crypts: derive_seed(master, "crypts", 0),
        epithelial: derive_seed(master, "epithelial", 0),
        stromal: derive_seed(master, "stromal", 0),
        distractors: derive_seed(master, "distractors", 0),
        perturbations: Vec::new(),
    };
    let layout = build_crypt_layout(config, provenance.crypts);
    let mut cells = place_epithelial_cells(&layout, config, provenance.epithelial);
    cells.extend(place_stromal_cells(&layout, config, provenance.stromal));
    cells.extend(place_distractors(
        &layout,
        config,
        provenance.distractors,
        config.blood_cell_baseline as usize,
    ));
    cells.retain(|c| within_padded_world(config, c.nucleus_center));
    assign_ids(&mut cells)?;
    Ok(SceneGraph {
        config: (**config).clone(),
        layout,
        cells,
        stain_blobs: Vec::new(),
        provenance,
    })
}

/// Fraction of the world area covered by stroma at depth `z`, by grid sampling.
pub fn stroma_area(layout: &CryptLayout, config: &SceneConfig, z: f64, step: f64) -> f64 {
    let nx = (config.world_extent / step).ceil() as usize;
    let ny = (config.world_height() / step).ceil() as usize;
    let mut hits = 0usize;
    for j in 0..ny {
        for i in 0..nx {
            let p = [(i as f64 + 0.5) * step, (j as f64 + 0.5) * step, z];
            if layout.in_stroma(p) {
                hits += 1;
            }
        }
    }
    hits as f64 * step * step
}
