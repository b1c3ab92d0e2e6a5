//! Brightfield compositing and exact mask rasterization.
//!
//! Every stained volume contributes absorbance
//! `hue × intensity × jitter × path_length / slab_thickness` along the
//! vertical ray of each sample; the transmitted color is
//! `background_light × exp(-Σ absorbance)`. Each object's absorbance patch is
//! blurred with a Gaussian whose sigma grows with the object's distance from
//! the focal plane before it is added. The color image is rendered at twice
//! the output resolution and box filtered; masks are rasterized directly at
//! output resolution from unblurred nucleus occupancy.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{CellClass, SceneConfig};
use crate::error::{Error, Result};
use crate::filter::{gaussian_blur, kernel_radius, Border};
use crate::geometry::{footprint, slab_occupancy, ImplicitShape, Slab};
use crate::scenegen::{CellInstance, SceneGraph};

const SUPERSAMPLE: usize = 2;
/// Depth samples per ray when integrating the tissue slab.
const TISSUE_Z_SAMPLES: usize = 4;
const PATCH_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub image: Vec<u8>,
    pub semantic_mask: Vec<u8>,
    pub instance_mask: Vec<u16>,
    /// Nucleus-center depth in micrometers, 0 on background.
    pub depth_map: Vec<f32>,
    pub scene_hash: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderMeta {
    pub scene_hash: String,
    pub config_hash: String,
    pub width: usize,
    pub height: usize,
}

impl RenderOutput {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.image[i], self.image[i + 1], self.image[i + 2]]
    }

    pub fn meta(&self) -> RenderMeta {
        RenderMeta {
            scene_hash: self.scene_hash.clone(),
            config_hash: self.config_hash.clone(),
            width: self.width,
            height: self.height,
        }
    }
}

pub fn config_hash(config: &SceneConfig) -> String {
    hex::encode(Sha256::digest(config.to_json().as_bytes()))
}

/// Absorbance density of one object on a rectangle of supersampled pixels,
/// already blurred. Coordinates may extend past the image.
struct Patch {
    x0: i64,
    y0: i64,
    w: usize,
    h: usize,
    hue: [f64; 3],
    density: Vec<f64>,
}

impl Patch {
    fn add_to(&self, planes: &mut [Vec<f64>; 3], width: usize, height: usize) {
        for py in 0..self.h {
            let y = self.y0 + py as i64;
            if y < 0 || y >= height as i64 {
                continue;
            }
            let row = y as usize * width;
            for px in 0..self.w {
                let x = self.x0 + px as i64;
                if x < 0 || x >= width as i64 {
                    continue;
                }
                let d = self.density[py * self.w + px];
                if d != 0.0 {
                    for (plane, hue) in planes.iter_mut().zip(self.hue) {
                        plane[row + x as usize] += hue * d;
                    }
                }
            }
        }
    }
}

/// Inclusive pixel index range whose centers `(i + 0.5) * step` fall in `[lo, hi]`.
fn center_range(lo: f64, hi: f64, step: f64) -> (i64, i64) {
    ((lo / step - 0.5).ceil() as i64, (hi / step - 0.5).floor() as i64)
}

struct Raster<'a> {
    config: &'a SceneConfig,
    slab: Slab,
    /// Supersampled image size and sample pitch in µm.
    ss_w: usize,
    ss_h: usize,
    ss_step: f64,
}

impl Raster<'_> {
    fn sigma_for(&self, z: f64) -> f64 {
        self.config.blur_strength * (z - self.config.focal_depth).abs() * SUPERSAMPLE as f64
    }

    /// Path length over reference length, times `scale`, blurred for depth `z`.
    fn shape_patch(&self, shape: &ImplicitShape, hue: [f64; 3], scale: f64, z: f64, blur: bool) -> Option<Patch> {
        self.weighted_patch(shape, hue, scale, z, blur, None)
    }

    /// Like `shape_patch`, with the unblurred density scaled per sample by
    /// `weight(sample index)`; samples off the image get the nearest edge weight.
    fn weighted_patch(
        &self,
        shape: &ImplicitShape,
        hue: [f64; 3],
        scale: f64,
        z: f64,
        blur: bool,
        weight: Option<&dyn Fn(usize) -> f64>,
    ) -> Option<Patch> {
        if scale == 0.0 {
            return None;
        }
        let b = footprint(shape, &self.slab);
        if b.is_empty() {
            return None;
        }
        let sigma = if blur { self.sigma_for(z) } else { 0.0 };
        let margin = if sigma > 0.0 { kernel_radius(sigma) as i64 } else { 0 };
        let (cx0, cx1) = center_range(b.min[0], b.max[0], self.ss_step);
        let (cy0, cy1) = center_range(b.min[1], b.max[1], self.ss_step);
        if cx1 < cx0 || cy1 < cy0 {
            return None;
        }
        let (x0, y0) = (cx0 - margin, cy0 - margin);
        let (x1, y1) = (cx1 + margin, cy1 + margin);
        if x1 < 0 || y1 < 0 || x0 >= self.ss_w as i64 || y0 >= self.ss_h as i64 {
            return None;
        }
        let (w, h) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
        let mut density = vec![0.0; w * h];
        let norm = scale / self.config.slab_thickness;
        let mut any = false;
        for iy in cy0..=cy1 {
            let y = (iy as f64 + 0.5) * self.ss_step;
            for ix in cx0..=cx1 {
                let x = (ix as f64 + 0.5) * self.ss_step;
                let occ = slab_occupancy(shape, &self.slab, [x, y]);
                if occ.covered {
                    let k = match weight {
                        Some(f) => {
                            let cx = ix.clamp(0, self.ss_w as i64 - 1) as usize;
                            let cy = iy.clamp(0, self.ss_h as i64 - 1) as usize;
                            f(cy * self.ss_w + cx)
                        }
                        None => 1.0,
                    };
                    density[(iy - y0) as usize * w + (ix - x0) as usize] = occ.path_length() * norm * k;
                    any = true;
                }
            }
        }
        if !any {
            return None;
        }
        gaussian_blur(&mut density, w, h, sigma, Border::Zero);
        Some(Patch {
            x0,
            y0,
            w,
            h,
            hue,
            density,
        })
    }

    /// A cell pushes the extracellular matrix aside. Where its outer shape
    /// overlaps tissue it replaces it, and each channel keeps whichever of the
    /// two stains is stronger, so adding a cell never brightens a pixel. Over
    /// lumen or tears the cell stain is added in full.
    fn cell_patches(&self, cell: &CellInstance, tissue: Option<&[f64]>) -> Vec<Patch> {
        let stain = &self.config.stain;
        let z = cell.nucleus_center[2];
        let mut out = Vec::with_capacity(3);
        if cell.class == CellClass::Goblet {
            return out;
        }
        let cyto = stain.cytoplasm.get(cell.class);
        let body = cell.body_shape();
        let cyto_shape = cell.cytoplasm_shape();
        let outer = cyto_shape.as_ref().unwrap_or(&body);
        // stain of the outer shape, per unit of scale
        let (outer_hue, outer_scale) = if cyto_shape.is_some() || !cell.class.has_nucleus() {
            (cyto.hue, cyto.intensity * cell.stain_jitter)
        } else {
            (stain.nucleus_hue(cell.class), stain.nucleus_intensity * cell.stain_jitter)
        };
        let own = outer_hue.map(|h| h * outer_scale);
        match tissue {
            Some(frac) => {
                let matrix = stain.tissue_hue.map(|h| h * stain.tissue_intensity);
                let excess = [0, 1, 2].map(|c| (own[c] - matrix[c]).max(0.0));
                let open = |i: usize| 1.0 - frac[i].clamp(0.0, 1.0);
                let filled = |i: usize| frac[i].clamp(0.0, 1.0);
                out.extend(self.weighted_patch(outer, own, 1.0, z, true, Some(&open)));
                if excess.iter().any(|&e| e > 0.0) {
                    out.extend(self.weighted_patch(outer, excess, 1.0, z, true, Some(&filled)));
                }
            }
            None => out.extend(self.shape_patch(outer, own, 1.0, z, true)),
        }
        if cyto_shape.is_some() && cell.class.has_nucleus() {
            let hue = stain.nucleus_hue(cell.class);
            out.extend(self.shape_patch(&body, hue, stain.nucleus_intensity * cell.stain_jitter, z, true));
        }
        out
    }

    /// Fraction of the slab that is tissue along each supersampled ray,
    /// with goblet vacuoles carved out. Unblurred.
    fn tissue_plane(&self, scene: &SceneGraph) -> Vec<f64> {
        let layout = &scene.layout;
        let dz = self.slab.thickness / TISSUE_Z_SAMPLES as f64;
        let zs: Vec<f64> = (0..TISSUE_Z_SAMPLES).map(|k| self.slab.z0 + (k as f64 + 0.5) * dz).collect();
        let step = self.ss_step;
        let mut plane = vec![0.0; self.ss_w * self.ss_h];
        let weight = self.slab.thickness / self.config.slab_thickness / TISSUE_Z_SAMPLES as f64;

        plane.par_chunks_mut(self.ss_w).enumerate().for_each(|(iy, row)| {
            let y = (iy as f64 + 0.5) * step;
            let near: Vec<_> = layout
                .crypts
                .iter()
                .filter(|c| zs.iter().any(|&z| (c.axis_at(z)[1] - y).abs() < c.radius))
                .collect();
            let near_tears: Vec<_> = layout
                .tears
                .iter()
                .filter(|t| t.vertices.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min) <= y
                    && t.vertices.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max) >= y)
                .collect();
            for (ix, v) in row.iter_mut().enumerate() {
                let x = (ix as f64 + 0.5) * step;
                let mut n = 0usize;
                for &z in &zs {
                    let p = [x, y, z];
                    let in_lumen = near.iter().any(|c| c.lumen_contains(p));
                    let in_crypt = in_lumen || near.iter().any(|c| c.interior_contains(p));
                    let torn = !in_crypt && near_tears.iter().any(|t| t.contains([x, y]));
                    if !in_lumen && !torn {
                        n += 1;
                    }
                }
                *v = n as f64 * weight;
            }
        });

        let goblets: Vec<Patch> = scene
            .cells
            .par_iter()
            .filter(|c| c.class == CellClass::Goblet)
            .filter_map(|c| self.shape_patch(&c.body_shape(), [1.0; 3], 1.0, 0.0, false))
            .collect();
        for g in goblets {
            for py in 0..g.h {
                let y = g.y0 + py as i64;
                if y < 0 || y >= self.ss_h as i64 {
                    continue;
                }
                for px in 0..g.w {
                    let x = g.x0 + px as i64;
                    if x >= 0 && x < self.ss_w as i64 {
                        let v = &mut plane[y as usize * self.ss_w + x as usize];
                        *v = (*v - g.density[py * g.w + px]).max(0.0);
                    }
                }
            }
        }
        plane
    }

    fn absorbance(&self, scene: &SceneGraph) -> [Vec<f64>; 3] {
        let stain = &self.config.stain;
        let n = self.ss_w * self.ss_h;
        let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];

        let raw = (stain.tissue_intensity > 0.0).then(|| self.tissue_plane(scene));
        if let Some(raw) = &raw {
            let mut tissue = raw.clone();
            let mid = self.slab.z0 + 0.5 * self.slab.thickness;
            gaussian_blur(&mut tissue, self.ss_w, self.ss_h, self.sigma_for(mid), Border::Clamp);
            for (plane, hue) in planes.iter_mut().zip(stain.tissue_hue) {
                let k = hue * stain.tissue_intensity;
                for (a, t) in plane.iter_mut().zip(&tissue) {
                    *a += k * t;
                }
            }
        }

        for chunk in scene.cells.chunks(PATCH_CHUNK) {
            let patches: Vec<Vec<Patch>> =
                chunk.par_iter().map(|c| self.cell_patches(c, raw.as_deref())).collect();
            for p in patches.iter().flatten() {
                p.add_to(&mut planes, self.ss_w, self.ss_h);
            }
        }

        if !scene.stain_blobs.is_empty() {
            let hue = stain.cytoplasm.blood_cell.hue;
            let zr = self.slab.z0 + 0.5 * self.slab.thickness;
            for blob in &scene.stain_blobs {
                let (cx0, cx1) = center_range(blob.center[0] - blob.radius, blob.center[0] + blob.radius, self.ss_step);
                let (cy0, cy1) = center_range(blob.center[1] - blob.radius, blob.center[1] + blob.radius, self.ss_step);
                for iy in cy0.max(0)..=cy1.min(self.ss_h as i64 - 1) {
                    let y = (iy as f64 + 0.5) * self.ss_step;
                    for ix in cx0.max(0)..=cx1.min(self.ss_w as i64 - 1) {
                        let x = (ix as f64 + 0.5) * self.ss_step;
                        let d = blob.density([x, y]);
                        if d > 0.0 && scene.layout.in_stroma([x, y, zr]) {
                            let i = iy as usize * self.ss_w + ix as usize;
                            for (plane, h) in planes.iter_mut().zip(hue) {
                                plane[i] += h * d;
                            }
                        }
                    }
                }
            }
        }
        planes
    }
}

/// Nucleus coverage of one cell at output resolution: (pixel index, key).
fn nucleus_coverage(cell: &CellInstance, slab: &Slab, px: f64, width: usize, height: usize) -> Vec<usize> {
    let shape = cell.body_shape();
    let b = footprint(&shape, slab);
    if b.is_empty() {
        return Vec::new();
    }
    let (x0, x1) = center_range(b.min[0], b.max[0], px);
    let (y0, y1) = center_range(b.min[1], b.max[1], px);
    let mut out = Vec::new();
    for iy in y0.max(0)..=y1.min(height as i64 - 1) {
        let y = (iy as f64 + 0.5) * px;
        for ix in x0.max(0)..=x1.min(width as i64 - 1) {
            let x = (ix as f64 + 0.5) * px;
            if slab_occupancy(&shape, slab, [x, y]).covered {
                out.push(iy as usize * width + ix as usize);
            }
        }
    }
    out
}

struct Masks {
    semantic: Vec<u8>,
    instance: Vec<u16>,
    depth: Vec<f32>,
}

/// Masks for the nucleus classes. Overlaps go to the nucleus nearer the
/// focal plane, then to the lower id.
fn rasterize_masks(scene: &SceneGraph, slab: &Slab) -> Masks {
    let cfg = &scene.config;
    let (w, h) = (cfg.image_width as usize, cfg.image_height as usize);
    let px = cfg.pixel_size();
    let mut instance = vec![0u16; w * h];
    let mut best = vec![f64::INFINITY; w * h];
    let nuclei: Vec<&CellInstance> = scene.cells.iter().filter(|c| c.class.has_nucleus()).collect();
    for chunk in nuclei.chunks(PATCH_CHUNK) {
        let covers: Vec<Vec<usize>> = chunk.par_iter().map(|c| nucleus_coverage(c, slab, px, w, h)).collect();
        for (cell, cover) in chunk.iter().zip(covers) {
            let key = (cell.nucleus_center[2] - cfg.focal_depth).abs();
            for i in cover {
                let current = instance[i];
                if current == 0 || key < best[i] || (key == best[i] && cell.id < current) {
                    instance[i] = cell.id;
                    best[i] = key;
                }
            }
        }
    }
    let mut semantic = vec![0u8; w * h];
    let mut depth = vec![0f32; w * h];
    for i in 0..w * h {
        if instance[i] != 0 {
            let cell = scene.cell(instance[i]).expect("id from scene");
            semantic[i] = cell.class.label().expect("nucleus class");
            depth[i] = cell.nucleus_center[2] as f32;
        }
    }
    Masks {
        semantic,
        instance,
        depth,
    }
}

fn render_slab(scene: &SceneGraph, slab: Slab) -> Result<RenderOutput> {
    if scene.cells.len() > 65_534 {
        return Err(Error::TooManyInstances(scene.cells.len()));
    }
    let cfg = &scene.config;
    let (w, h) = (cfg.image_width as usize, cfg.image_height as usize);
    let raster = Raster {
        config: cfg,
        slab,
        ss_w: w * SUPERSAMPLE,
        ss_h: h * SUPERSAMPLE,
        ss_step: cfg.pixel_size() / SUPERSAMPLE as f64,
    };
    let planes = raster.absorbance(scene);
    let light = cfg.stain.background_light;
    let ss_w = raster.ss_w;
    let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;

    let mut image = vec![0u8; 3 * w * h];
    image.par_chunks_mut(3 * w).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for sy in 0..SUPERSAMPLE {
                    let base = (y * SUPERSAMPLE + sy) * ss_w + x * SUPERSAMPLE;
                    for sx in 0..SUPERSAMPLE {
                        acc += (-planes[c][base + sx]).exp();
                    }
                }
                let v = light[c] * acc * norm;
                row[3 * x + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    });

    let masks = rasterize_masks(scene, &slab);
    Ok(RenderOutput {
        width: w,
        height: h,
        image,
        semantic_mask: masks.semantic,
        instance_mask: masks.instance,
        depth_map: masks.depth,
        scene_hash: scene.content_hash(),
        config_hash: config_hash(cfg),
    })
}

/// Renders the scene through its configured slab.
pub fn render_scene(scene: &SceneGraph) -> Result<RenderOutput> {
    let cfg = &scene.config;
    render_slab(scene, Slab::new(cfg.slab_z0, cfg.slab_thickness))
}

/// Renders `n_slices` equal consecutive sub-slabs. Absorbance stays
/// normalized by the full slab thickness and the focal plane is unchanged.
pub fn render_zstack(scene: &SceneGraph, n_slices: usize) -> Result<Vec<RenderOutput>> {
    if n_slices == 0 {
        return Err(Error::invalid("n_slices", "must be >= 1"));
    }
    let cfg = &scene.config;
    Slab::new(cfg.slab_z0, cfg.slab_thickness)
        .split(n_slices)
        .into_iter()
        .map(|slab| render_slab(scene, slab))
        .collect()
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_owned(),
        source,
    }
}

/// Output file names for a stem, in write order.
pub fn output_files(stem: &str) -> [String; 5] {
    [
        format!("{stem}.png"),
        format!("{stem}_sem.png"),
        format!("{stem}_inst.png"),
        format!("{stem}_depth.bin"),
        format!("{stem}_meta.json"),
    ]
}

pub fn write_semantic(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::Dimensions(format!("{}: buffer does not match {width}x{height}", path.display())))?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(image_err(path))
}

pub fn write_instance(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    ImageBuffer::<Luma<u16>, _>::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::Dimensions(format!("{}: buffer does not match {width}x{height}", path.display())))?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(image_err(path))
}

/// Writes the five per-render files into `dir`. Existing files with the same
/// stem are overwritten.
pub fn write_outputs(out: &RenderOutput, dir: &Path, stem: &str) -> Result<()> {
    let [rgb, sem, inst, depth, meta] = output_files(stem).map(|f| dir.join(f));
    ImageBuffer::<Rgb<u8>, _>::from_raw(out.width as u32, out.height as u32, out.image.clone())
        .ok_or_else(|| Error::Dimensions("image buffer does not match dimensions".into()))?
        .save_with_format(&rgb, image::ImageFormat::Png)
        .map_err(image_err(&rgb))?;
    write_semantic(&sem, out.width, out.height, &out.semantic_mask)?;
    write_instance(&inst, out.width, out.height, &out.instance_mask)?;
    let bytes: Vec<u8> = out.depth_map.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&depth, bytes).map_err(|e| Error::io(&depth, e))?;
    let mut text = serde_json::to_string_pretty(&out.meta()).expect("meta serializes");
    text.push('\n');
    std::fs::write(&meta, text).map_err(|e| Error::io(&meta, e))?;
    Ok(())
}

pub fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(image_err(path))?.into_rgb8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

pub fn read_semantic(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(image_err(path))?;
    match img {
        image::DynamicImage::ImageLuma8(b) => Ok((b.width() as usize, b.height() as usize, b.into_raw())),
        other => Err(Error::Dimensions(format!(
            "{}: expected 8-bit grayscale, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn read_instance(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path).map_err(image_err(path))?;
    match img {
        image::DynamicImage::ImageLuma16(b) => Ok((b.width() as usize, b.height() as usize, b.into_raw())),
        image::DynamicImage::ImageLuma8(b) => Ok((
            b.width() as usize,
            b.height() as usize,
            b.into_raw().into_iter().map(u16::from).collect(),
        )),
        other => Err(Error::Dimensions(format!(
            "{}: expected 16-bit grayscale, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn read_depth(path: &Path, width: usize, height: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * width * height {
        return Err(Error::Dimensions(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            4 * width * height
        )));
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

/// Reads back everything [`write_outputs`] wrote.
pub fn read_outputs(dir: &Path, stem: &str) -> Result<RenderOutput> {
    let [rgb, sem, inst, depth, meta] = output_files(stem).map(|f| dir.join(f));
    let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let meta_v: RenderMeta = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: meta.clone(),
        source,
    })?;
    let (w, h, image) = read_rgb(&rgb)?;
    let (_, _, semantic_mask) = read_semantic(&sem)?;
    let (_, _, instance_mask) = read_instance(&inst)?;
    let depth_map = read_depth(&depth, w, h)?;
    Ok(RenderOutput {
        width: w,
        height: h,
        image,
        semantic_mask,
        instance_mask,
        depth_map,
        scene_hash: meta_v.scene_hash,
        config_hash: meta_v.config_hash,
    })
}
