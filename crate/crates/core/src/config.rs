//! Scene parameters: every slider that controls one generated scene.
//!
//! A config is a JSON document; one file fully determines one scene
//! (geometry, cell populations, stains and the master seed). Lengths are in
//! micrometers unless a field says pixels. `world_extent` is the physical
//! width of the image; pixels are square, so the physical height is
//! `image_height * world_extent / image_width`.

use std::fmt;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every object class the generator knows about. The first five carry a
/// nucleus label in the masks; goblet and blood cells are distractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellClass {
    Epithelial,
    Plasma,
    Lymphocyte,
    Eosinophil,
    Fibroblast,
    Goblet,
    BloodCell,
}

impl CellClass {
    pub const NUCLEUS_CLASSES: [CellClass; 5] = [
        CellClass::Epithelial,
        CellClass::Plasma,
        CellClass::Lymphocyte,
        CellClass::Eosinophil,
        CellClass::Fibroblast,
    ];

    pub const STROMAL: [CellClass; 4] = [
        CellClass::Plasma,
        CellClass::Lymphocyte,
        CellClass::Eosinophil,
        CellClass::Fibroblast,
    ];

    /// Semantic mask label (1..=5), or `None` for distractors.
    pub fn label(self) -> Option<u8> {
        match self {
            CellClass::Epithelial => Some(1),
            CellClass::Plasma => Some(2),
            CellClass::Lymphocyte => Some(3),
            CellClass::Eosinophil => Some(4),
            CellClass::Fibroblast => Some(5),
            CellClass::Goblet | CellClass::BloodCell => None,
        }
    }

    pub fn from_label(label: u8) -> Option<CellClass> {
        Self::NUCLEUS_CLASSES.get(usize::from(label).checked_sub(1)?).copied()
    }

    pub fn has_nucleus(self) -> bool {
        self.label().is_some()
    }
}

/// Names of the semantic classes, index = mask label.
pub const SEMANTIC_CLASS_NAMES: [&str; 6] = [
    "background",
    "epithelial",
    "plasma",
    "lymphocyte",
    "eosinophil",
    "fibroblast",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeParams {
    /// Volume-equivalent diameter of the nucleus.
    pub diameter_mean: f64,
    pub diameter_sd: f64,
    /// Major over minor axis, >= 1.
    pub elongation: f64,
    /// Banana bend of the major axis, 0..=1.
    pub bending: f64,
    /// Radial perturbation amplitude, 0..=1.
    pub shape_noise: f64,
    /// Distance between lobe centers; only used for eosinophils.
    pub lobe_separation: f64,
    /// Cytoplasm size relative to the nucleus, > 1.
    pub cytoplasm_scale: f64,
}

impl ShapeParams {
    fn new(diameter_mean: f64, diameter_sd: f64, elongation: f64) -> Self {
        ShapeParams {
            diameter_mean,
            diameter_sd,
            elongation,
            bending: 0.0,
            shape_noise: 0.1,
            lobe_separation: 0.0,
            cytoplasm_scale: 1.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeTable {
    pub epithelial: ShapeParams,
    pub plasma: ShapeParams,
    pub lymphocyte: ShapeParams,
    pub eosinophil: ShapeParams,
    pub fibroblast: ShapeParams,
    pub goblet: ShapeParams,
    pub blood_cell: ShapeParams,
}

impl ShapeTable {
    pub fn get(&self, class: CellClass) -> &ShapeParams {
        match class {
            CellClass::Epithelial => &self.epithelial,
            CellClass::Plasma => &self.plasma,
            CellClass::Lymphocyte => &self.lymphocyte,
            CellClass::Eosinophil => &self.eosinophil,
            CellClass::Fibroblast => &self.fibroblast,
            CellClass::Goblet => &self.goblet,
            CellClass::BloodCell => &self.blood_cell,
        }
    }

    fn iter(&self) -> impl Iterator<Item = (&'static str, &ShapeParams)> {
        [
            ("epithelial", &self.epithelial),
            ("plasma", &self.plasma),
            ("lymphocyte", &self.lymphocyte),
            ("eosinophil", &self.eosinophil),
            ("fibroblast", &self.fibroblast),
            ("goblet", &self.goblet),
            ("blood_cell", &self.blood_cell),
        ]
        .into_iter()
    }
}

impl Default for ShapeTable {
    fn default() -> Self {
        ShapeTable {
            epithelial: ShapeParams {
                shape_noise: 0.12,
                cytoplasm_scale: 1.5,
                ..ShapeParams::new(7.0, 0.6, 1.5)
            },
            plasma: ShapeParams {
                cytoplasm_scale: 1.9,
                ..ShapeParams::new(6.0, 0.5, 1.15)
            },
            lymphocyte: ShapeParams {
                shape_noise: 0.05,
                cytoplasm_scale: 1.25,
                ..ShapeParams::new(5.2, 0.4, 1.05)
            },
            eosinophil: ShapeParams {
                lobe_separation: 3.0,
                cytoplasm_scale: 2.0,
                ..ShapeParams::new(5.0, 0.4, 1.2)
            },
            fibroblast: ShapeParams {
                bending: 0.3,
                shape_noise: 0.08,
                cytoplasm_scale: 1.3,
                ..ShapeParams::new(5.5, 0.5, 3.5)
            },
            goblet: ShapeParams {
                shape_noise: 0.05,
                ..ShapeParams::new(9.0, 1.0, 1.1)
            },
            blood_cell: ShapeParams {
                shape_noise: 0.02,
                cytoplasm_scale: 1.05,
                ..ShapeParams::new(7.0, 0.3, 1.0)
            },
        }
    }
}

/// Probability vector over the four stromal classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRatios {
    pub plasma: f64,
    pub lymphocyte: f64,
    pub eosinophil: f64,
    pub fibroblast: f64,
}

impl ClassRatios {
    pub fn as_array(&self) -> [f64; 4] {
        [self.plasma, self.lymphocyte, self.eosinophil, self.fibroblast]
    }
}

impl Default for ClassRatios {
    fn default() -> Self {
        ClassRatios {
            plasma: 0.35,
            lymphocyte: 0.35,
            eosinophil: 0.1,
            fibroblast: 0.2,
        }
    }
}

/// Absorbance triple (R, G, B) with a scalar intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stain {
    pub hue: [f64; 3],
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NucleusHues {
    pub epithelial: [f64; 3],
    pub plasma: [f64; 3],
    pub lymphocyte: [f64; 3],
    pub eosinophil: [f64; 3],
    pub fibroblast: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CytoplasmStains {
    pub epithelial: Stain,
    pub plasma: Stain,
    pub lymphocyte: Stain,
    pub eosinophil: Stain,
    pub fibroblast: Stain,
    pub goblet: Stain,
    pub blood_cell: Stain,
}

impl CytoplasmStains {
    pub fn get(&self, class: CellClass) -> &Stain {
        match class {
            CellClass::Epithelial => &self.epithelial,
            CellClass::Plasma => &self.plasma,
            CellClass::Lymphocyte => &self.lymphocyte,
            CellClass::Eosinophil => &self.eosinophil,
            CellClass::Fibroblast => &self.fibroblast,
            CellClass::Goblet => &self.goblet,
            CellClass::BloodCell => &self.blood_cell,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StainConfig {
    pub nucleus_hue: NucleusHues,
    pub nucleus_intensity: f64,
    pub cytoplasm: CytoplasmStains,
    pub tissue_hue: [f64; 3],
    pub tissue_intensity: f64,
    /// Relative standard deviation of the per-object intensity multiplier.
    pub stain_noise_sigma: f64,
    pub background_light: [f64; 3],
}

impl StainConfig {
    /// Hematoxylin hue for a nucleus class; black for distractors.
    pub fn nucleus_hue(&self, class: CellClass) -> [f64; 3] {
        match class {
            CellClass::Epithelial => self.nucleus_hue.epithelial,
            CellClass::Plasma => self.nucleus_hue.plasma,
            CellClass::Lymphocyte => self.nucleus_hue.lymphocyte,
            CellClass::Eosinophil => self.nucleus_hue.eosinophil,
            CellClass::Fibroblast => self.nucleus_hue.fibroblast,
            CellClass::Goblet | CellClass::BloodCell => [0.0; 3],
        }
    }
}

impl Default for StainConfig {
    fn default() -> Self {
        let eosin = |hue: [f64; 3], intensity: f64| Stain { hue, intensity };
        StainConfig {
            nucleus_hue: NucleusHues {
                epithelial: [0.62, 0.88, 0.32],
                plasma: [0.66, 0.92, 0.34],
                lymphocyte: [0.75, 0.98, 0.38],
                eosinophil: [0.62, 0.88, 0.34],
                fibroblast: [0.58, 0.84, 0.32],
            },
            nucleus_intensity: 1.0,
            cytoplasm: CytoplasmStains {
                epithelial: eosin([0.10, 0.38, 0.16], 0.55),
                plasma: eosin([0.16, 0.42, 0.18], 0.6),
                lymphocyte: eosin([0.12, 0.36, 0.16], 0.4),
                eosinophil: eosin([0.05, 0.80, 0.60], 0.9),
                fibroblast: eosin([0.10, 0.36, 0.16], 0.45),
                goblet: eosin([0.0, 0.0, 0.0], 0.0),
                blood_cell: eosin([0.04, 0.88, 0.78], 1.0),
            },
            tissue_hue: [0.08, 0.42, 0.18],
            tissue_intensity: 0.45,
            stain_noise_sigma: 0.1,
            background_light: [1.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub image_width: u32,
    pub image_height: u32,
    pub world_extent: f64,
    pub slab_z0: f64,
    pub slab_thickness: f64,
    pub focal_depth: f64,
    /// Gaussian sigma in pixels per micrometer of defocus.
    pub blur_strength: f64,
    pub crypt_spacing: f64,
    pub crypt_position_jitter: f64,
    pub crypt_radius_mean: f64,
    pub crypt_radius_jitter: f64,
    pub crypt_wall_thickness: f64,
    pub crypt_bending_amplitude: f64,
    /// Largest tilt of a crypt axis away from vertical, in degrees.
    pub crypt_max_tilt_deg: f64,
    pub tearing_degree: f64,
    pub shapes: ShapeTable,
    pub class_ratios: ClassRatios,
    /// Stromal cells per square millimeter of stroma.
    pub stromal_density: f64,
    pub goblet_ratio: f64,
    pub stain: StainConfig,
    pub blood_cell_baseline: u32,
    pub master_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_width: 512,
            image_height: 512,
            world_extent: 256.0,
            slab_z0: 0.0,
            slab_thickness: 5.0,
            focal_depth: 2.5,
            blur_strength: 0.5,
            crypt_spacing: 85.0,
            crypt_position_jitter: 4.0,
            crypt_radius_mean: 30.0,
            crypt_radius_jitter: 3.0,
            crypt_wall_thickness: 13.0,
            crypt_bending_amplitude: 3.0,
            crypt_max_tilt_deg: 6.0,
            tearing_degree: 0.1,
            shapes: ShapeTable::default(),
            class_ratios: ClassRatios::default(),
            stromal_density: 4000.0,
            goblet_ratio: 0.15,
            stain: StainConfig::default(),
            blood_cell_baseline: 5,
            master_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn pixel_size(&self) -> f64 {
        self.world_extent / f64::from(self.image_width)
    }

    pub fn world_height(&self) -> f64 {
        f64::from(self.image_height) * self.pixel_size()
    }

    pub fn slab_z1(&self) -> f64 {
        self.slab_z0 + self.slab_thickness
    }

    pub fn max_cell_diameter(&self) -> f64 {
        self.shapes
            .iter()
            .map(|(_, s)| (s.diameter_mean + 3.0 * s.diameter_sd) * s.cytoplasm_scale.max(1.0))
            .fold(0.0, f64::max)
    }

    pub fn validate(self) -> Result<ValidatedConfig, ConfigError> {
        validate(self)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<SceneConfig, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<ValidatedConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = Self::from_json(&text).map_err(|source| Error::Json {
            path: path.to_owned(),
            source,
        })?;
        Ok(validate(config)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// A config whose invariants have been checked.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ValidatedConfig(SceneConfig);

impl ValidatedConfig {
    pub fn into_inner(self) -> SceneConfig {
        self.0
    }
}

impl Deref for ValidatedConfig {
    type Target = SceneConfig;

    fn deref(&self) -> &SceneConfig {
        &self.0
    }
}

struct Checker {
    first: Option<ConfigError>,
}

impl Checker {
    fn require(&mut self, ok: bool, path: impl FnOnce() -> String, message: impl FnOnce() -> String) {
        if self.first.is_none() && !ok {
            self.first = Some(ConfigError {
                path: path(),
                message: message(),
            });
        }
    }

    fn positive(&mut self, path: &str, v: f64) {
        self.require(v > 0.0 && v.is_finite(), || path.to_owned(), || format!("must be > 0, got {v}"));
    }

    fn non_negative(&mut self, path: &str, v: f64) {
        self.require(v >= 0.0 && v.is_finite(), || path.to_owned(), || format!("must be >= 0, got {v}"));
    }

    fn unit(&mut self, path: &str, v: f64) {
        self.require((0.0..=1.0).contains(&v), || path.to_owned(), || format!("must be in [0, 1], got {v}"));
    }

    fn finite(&mut self, path: &str, v: f64) {
        self.require(v.is_finite(), || path.to_owned(), || format!("must be finite, got {v}"));
    }

    fn unit3(&mut self, path: &str, v: &[f64; 3]) {
        for (i, c) in v.iter().enumerate() {
            self.require(
                (0.0..=1.0).contains(c),
                || format!("{path}[{i}]"),
                || format!("must be in [0, 1], got {c}"),
            );
        }
    }

    fn stain(&mut self, path: &str, s: &Stain) {
        self.unit3(&format!("{path}.hue"), &s.hue);
        self.unit(&format!("{path}.intensity"), s.intensity);
    }
}

/// Checks every invariant and reports the first violation with its field path.
pub fn validate(config: SceneConfig) -> Result<ValidatedConfig, ConfigError> {
    let mut c = Checker { first: None };
    let cfg = &config;

    c.require(cfg.image_width > 0, || "image_width".into(), || "must be > 0".into());
    c.require(cfg.image_height > 0, || "image_height".into(), || "must be > 0".into());
    c.positive("world_extent", cfg.world_extent);
    c.finite("slab_z0", cfg.slab_z0);
    c.positive("slab_thickness", cfg.slab_thickness);
    c.finite("focal_depth", cfg.focal_depth);
    c.non_negative("blur_strength", cfg.blur_strength);

    c.positive("crypt_spacing", cfg.crypt_spacing);
    c.non_negative("crypt_position_jitter", cfg.crypt_position_jitter);
    c.positive("crypt_radius_mean", cfg.crypt_radius_mean);
    c.non_negative("crypt_radius_jitter", cfg.crypt_radius_jitter);
    c.positive("crypt_wall_thickness", cfg.crypt_wall_thickness);
    c.require(
        cfg.crypt_wall_thickness < cfg.crypt_radius_mean,
        || "crypt_wall_thickness".into(),
        || {
            format!(
                "must be < crypt_radius_mean ({} >= {})",
                cfg.crypt_wall_thickness, cfg.crypt_radius_mean
            )
        },
    );
    c.non_negative("crypt_bending_amplitude", cfg.crypt_bending_amplitude);
    c.require(
        (0.0..90.0).contains(&cfg.crypt_max_tilt_deg),
        || "crypt_max_tilt_deg".into(),
        || format!("must be in [0, 90), got {}", cfg.crypt_max_tilt_deg),
    );
    c.unit("tearing_degree", cfg.tearing_degree);

    for (name, s) in cfg.shapes.iter() {
        c.positive(&format!("shapes.{name}.diameter_mean"), s.diameter_mean);
        c.non_negative(&format!("shapes.{name}.diameter_sd"), s.diameter_sd);
        c.require(
            s.elongation >= 1.0 && s.elongation.is_finite(),
            || format!("shapes.{name}.elongation"),
            || format!("must be >= 1, got {}", s.elongation),
        );
        c.unit(&format!("shapes.{name}.bending"), s.bending);
        c.unit(&format!("shapes.{name}.shape_noise"), s.shape_noise);
        c.non_negative(&format!("shapes.{name}.lobe_separation"), s.lobe_separation);
        c.require(
            s.cytoplasm_scale > 1.0 && s.cytoplasm_scale.is_finite(),
            || format!("shapes.{name}.cytoplasm_scale"),
            || format!("must be > 1, got {}", s.cytoplasm_scale),
        );
    }

    let ratios = cfg.class_ratios.as_array();
    for (name, v) in ["plasma", "lymphocyte", "eosinophil", "fibroblast"].iter().zip(ratios) {
        c.non_negative(&format!("class_ratios.{name}"), v);
    }
    let sum: f64 = ratios.iter().sum();
    c.require((sum - 1.0).abs() <= 1e-9, || "class_ratios".into(), || format!("sum = {sum:.6}, expected 1"));

    c.non_negative("stromal_density", cfg.stromal_density);
    c.unit("goblet_ratio", cfg.goblet_ratio);

    let st = &cfg.stain;
    for (name, hue) in [
        ("epithelial", &st.nucleus_hue.epithelial),
        ("plasma", &st.nucleus_hue.plasma),
        ("lymphocyte", &st.nucleus_hue.lymphocyte),
        ("eosinophil", &st.nucleus_hue.eosinophil),
        ("fibroblast", &st.nucleus_hue.fibroblast),
    ] {
        c.unit3(&format!("stain.nucleus_hue.{name}"), hue);
    }
    c.unit("stain.nucleus_intensity", st.nucleus_intensity);
    for (name, s) in [
        ("epithelial", &st.cytoplasm.epithelial),
        ("plasma", &st.cytoplasm.plasma),
        ("lymphocyte", &st.cytoplasm.lymphocyte),
        ("eosinophil", &st.cytoplasm.eosinophil),
        ("fibroblast", &st.cytoplasm.fibroblast),
        ("goblet", &st.cytoplasm.goblet),
        ("blood_cell", &st.cytoplasm.blood_cell),
    ] {
        c.stain(&format!("stain.cytoplasm.{name}"), s);
    }
    c.unit3("stain.tissue_hue", &st.tissue_hue);
    c.unit("stain.tissue_intensity", st.tissue_intensity);
    c.non_negative("stain.stain_noise_sigma", st.stain_noise_sigma);
    c.unit3("stain.background_light", &st.background_light);

    match c.first {
        Some(err) => Err(err),
        None => Ok(ValidatedConfig(config)),
    }
}
