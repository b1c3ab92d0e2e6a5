use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::ValueEnum;
use histosynth::config::{validate, SceneConfig, SEMANTIC_CLASS_NAMES};
use histosynth::labelnoise::{corrupt_masks, LabelNoiseSpec, NoiseTask, ShapeEvent};
use histosynth::mockpred::{generate_stack, MockSpec};
use histosynth::perturb::{self, level_grid, PerturbKind, PerturbationSpec};
use histosynth::render::{self, output_files, read_instance, read_semantic, render_scene, write_instance, write_semantic};
use histosynth::scenegen::assemble_scene;
use histosynth::seed::derive_seed;
use histosynth::uq::{self, benchmark_run, discover_levels, level_dir_name, AggregationSpec};
use histosynth::SceneGraph;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::manifest::{Manifest, Outputs, MANIFEST_NAME};

pub const SCENE_FILE: &str = "scene.json";
const DEFAULT_LEVELS: usize = 5;

pub fn image_stem(i: usize) -> String {
    format!("img_{i:04}")
}

fn stem_seed(base: u64, purpose: &str, stem: &str) -> u64 {
    derive_seed(base, &format!("{purpose}/{stem}"), 0)
}

fn resolve_levels(levels: &[f64]) -> Result<Vec<f64>> {
    let levels = if levels.is_empty() { level_grid(DEFAULT_LEVELS) } else { levels.to_vec() };
    let mut seen = BTreeMap::new();
    for &l in &levels {
        ensure!((0.0..=1.0).contains(&l), "level {l} is outside [0, 1]");
        if let Some(prev) = seen.insert(level_dir_name(l), l) {
            bail!("levels {prev} and {l} share the directory {}", level_dir_name(l));
        }
    }
    Ok(levels)
}

fn finish(mut manifest: Manifest, out: &Path, outputs: Outputs) -> Result<Manifest> {
    manifest.add_outputs(out, outputs.files())?;
    manifest.write_atomic(&out.join(MANIFEST_NAME))?;
    outputs.commit();
    Ok(manifest)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Files written for one rendered scene.
fn scene_files(dir: &Path, stem: &str) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = output_files(stem).iter().map(|f| dir.join(f)).collect();
    files.push(dir.join(SCENE_FILE));
    files
}

fn render_into(scene: &SceneGraph, dir: &Path, stem: &str) -> Result<render::RenderOutput> {
    let out = render_scene(scene)?;
    render::write_outputs(&out, dir, stem)?;
    write_text(&dir.join(SCENE_FILE), &scene.to_json())?;
    Ok(out)
}

#[derive(clap::Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenerateArgs {
    /// Scene config JSON; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Base seed for per-image seeds; defaults to the config's master_seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scene perturbation, e.g. `kind=nuclei-intensity,level=0.6`.
    #[arg(long)]
    pub perturb: Option<PerturbationSpec>,
}

/// Renders `count` scenes into `out/<stem>/`. A config passed in directly
/// (from a manifest) takes precedence over `args.config`.
pub fn generate(args: &GenerateArgs, config: Option<SceneConfig>, out: &Path) -> Result<Manifest> {
    let config = match (config, &args.config) {
        (Some(c), _) => validate(c)?,
        (None, Some(path)) => SceneConfig::load(path)?,
        (None, None) => validate(SceneConfig::default())?,
    };
    let base = args.seed.unwrap_or(config.master_seed);
    let mut outputs = Outputs::default();
    outputs.mkdir(out)?;
    let stems: Vec<String> = (0..args.count).map(image_stem).collect();
    for stem in &stems {
        outputs.mkdir(&out.join(stem))?;
        outputs.extend(scene_files(&out.join(stem), stem));
    }

    let seeds: Vec<u64> = (0..args.count).map(|i| derive_seed(base, "image", i as u64)).collect();
    stems
        .par_iter()
        .zip(&seeds)
        .try_for_each(|(stem, &seed)| -> Result<()> {
            let cfg = validate(SceneConfig { master_seed: seed, ..(*config).clone() })?;
            let mut scene = assemble_scene(&cfg)?;
            if let Some(spec) = &args.perturb {
                let spec = PerturbationSpec { seed: stem_seed(spec.seed, "perturb", stem), ..*spec };
                scene = perturb::apply(&scene, &spec)?;
            }
            render_into(&scene, &out.join(stem), stem).with_context(|| format!("rendering {stem}"))?;
            Ok(())
        })?;

    let mut manifest = Manifest::new("generate", args)?;
    manifest.config = Some(config.into_inner());
    manifest.seeds.insert("base_seed".into(), base);
    manifest.seeds.extend(stems.into_iter().zip(seeds));
    finish(manifest, out, outputs)
}

#[derive(clap::Args, Debug, Clone, Serialize, Deserialize)]
pub struct PerturbArgs {
    /// Dataset written by `generate`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub kind: PerturbKind,
    /// Comma-separated levels in [0, 1]; five evenly spaced by default.
    #[arg(long, value_delimiter = ',')]
    pub levels: Vec<f64>,
    /// Base seed for stain placement.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Scene directories of a dataset, sorted. Directories that hold files but
/// no scene file are returned as errors.
fn dataset_scenes(root: &Path) -> Result<Vec<Result<(String, PathBuf)>>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs
        .into_iter()
        .filter_map(|d| {
            let stem = d.file_name()?.to_string_lossy().into_owned();
            let scene = d.join(SCENE_FILE);
            if scene.is_file() {
                Some(Ok((stem, d)))
            } else if d.join(format!("{stem}.png")).is_file() {
                Some(Err(anyhow!("{}: missing {SCENE_FILE}", d.display())))
            } else {
                None
            }
        })
        .collect())
}

pub fn perturb(args: &PerturbArgs, out: &Path) -> Result<Manifest> {
    let levels = resolve_levels(&args.levels)?;
    let found = dataset_scenes(&args.dataset)?;
    ensure!(!found.is_empty(), "{} holds no scenes", args.dataset.display());
    let mut errors: Vec<String> = Vec::new();
    let mut scenes = Vec::new();
    for f in found {
        match f {
            Ok(s) => scenes.push(s),
            Err(e) => errors.push(format!("{e:#}")),
        }
    }

    let mut outputs = Outputs::default();
    outputs.mkdir(out)?;
    for &level in &levels {
        for (stem, _) in &scenes {
            outputs.mkdir(&out.join(level_dir_name(level)).join(stem))?;
        }
    }

    let results: Vec<Result<Vec<PathBuf>>> = scenes
        .par_iter()
        .map(|(stem, dir)| -> Result<Vec<PathBuf>> {
            let path = dir.join(SCENE_FILE);
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let scene = SceneGraph::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
            let seed = stem_seed(args.seed, "perturb", stem);
            let mut written = Vec::new();
            for &level in &levels {
                let spec = PerturbationSpec { kind: args.kind, level, seed };
                let target = out.join(level_dir_name(level)).join(stem);
                let rendered = render_into(&perturb::apply(&scene, &spec)?, &target, stem)?;
                // Masks must not move; ship the originals byte for byte.
                let [_, sem, inst, depth, _] = output_files(stem);
                let (_, _, orig_sem) = read_semantic(&dir.join(&sem))?;
                let (_, _, orig_inst) = read_instance(&dir.join(&inst))?;
                ensure!(
                    orig_sem == rendered.semantic_mask && orig_inst == rendered.instance_mask,
                    "{stem}: masks changed under {} at level {level}",
                    args.kind
                );
                for f in [sem, inst, depth] {
                    fs::copy(dir.join(&f), target.join(&f)).with_context(|| format!("copying {f}"))?;
                }
                written.extend(scene_files(&target, stem));
            }
            Ok(written)
        })
        .collect();

    let mut manifest = Manifest::new("perturb", args)?;
    for ((stem, dir), r) in scenes.iter().zip(results) {
        match r {
            Ok(files) => {
                outputs.extend(files);
                manifest.add_inputs([dir.join(SCENE_FILE).as_path()])?;
                manifest.seeds.insert(stem.clone(), stem_seed(args.seed, "perturb", stem));
            }
            Err(e) => errors.push(format!("{stem}: {e:#}")),
        }
    }
    if !errors.is_empty() {
        // Keep what succeeded, but without a manifest the run is incomplete.
        outputs.commit();
        bail!("{} scene(s) failed:\n  {}", errors.len(), errors.join("\n  "));
    }
    finish(manifest, out, outputs)
}

/// `stem -> (semantic, instance)` under `root`, shallowest match first.
fn find_masks(root: &Path, need_instance: bool) -> Result<BTreeMap<String, (PathBuf, PathBuf)>> {
    let mut found: BTreeMap<String, (usize, PathBuf, PathBuf)> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.with_context(|| format!("walking {}", root.display()))?;
        let Some(stem) = entry.file_name().to_str().and_then(|n| n.strip_suffix("_sem.png")) else {
            continue;
        };
        let inst = entry.path().with_file_name(format!("{stem}_inst.png"));
        if need_instance && !inst.is_file() {
            bail!("{}: no matching {stem}_inst.png", entry.path().display());
        }
        if found.get(stem).is_none_or(|(d, _, _)| *d > entry.depth()) {
            found.insert(stem.to_owned(), (entry.depth(), entry.path().to_owned(), inst));
        }
    }
    ensure!(!found.is_empty(), "no masks under {}", root.display());
    Ok(found.into_iter().map(|(k, (_, s, i))| (k, (s, i))).collect())
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseTaskArg {
    SemsegFlip,
    FgbgShape,
}

#[derive(clap::Args, Debug, Clone, Serialize, Deserialize)]
pub struct LabelNoiseArgs {
    /// Directory searched recursively for `<stem>_sem.png` / `<stem>_inst.png`.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum)]
    pub task: NoiseTaskArg,
    #[arg(long, value_delimiter = ',')]
    pub levels: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub shift_max: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.6, 1.4])]
    pub scale_range: Vec<f64>,
    #[arg(long, default_value_t = 8.0)]
    pub elastic_sigma: f64,
    #[arg(long, default_value_t = 10.0)]
    pub elastic_alpha: f64,
    /// Weights of shift, scale, elastic and drop.
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.25, 0.25, 0.25])]
    pub op_weights: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct NoiseRecord {
    flipped: usize,
    shape_events: Vec<ShapeEvent>,
}

pub fn labelnoise(args: &LabelNoiseArgs, out: &Path) -> Result<Manifest> {
    let levels = resolve_levels(&args.levels)?;
    let scale: [f64; 2] = args.scale_range.as_slice().try_into().map_err(|_| anyhow!("--scale-range takes two values"))?;
    let weights: [f64; 4] = args.op_weights.as_slice().try_into().map_err(|_| anyhow!("--op-weights takes four values"))?;
    let task = match args.task {
        NoiseTaskArg::SemsegFlip => NoiseTask::SemSegFlip,
        NoiseTaskArg::FgbgShape => NoiseTask::FgBgShape,
    };
    let spec_at = |level, seed| LabelNoiseSpec {
        task,
        level,
        seed,
        shift_max: args.shift_max,
        scale_range: scale,
        elastic_sigma: args.elastic_sigma,
        elastic_alpha: args.elastic_alpha,
        op_weights: weights,
    };
    for &l in &levels {
        spec_at(l, 0).validate()?;
    }
    let masks = find_masks(&args.gt, true)?;
    let mut outputs = Outputs::default();
    outputs.mkdir(out)?;
    for &level in &levels {
        for stem in masks.keys() {
            outputs.mkdir(&out.join(level_dir_name(level)).join(stem))?;
        }
    }

    type Done = (Vec<PathBuf>, Vec<(f64, NoiseRecord)>);
    let results: Vec<Done> = masks
        .par_iter()
        .map(|(stem, (sem_path, inst_path))| -> Result<Done> {
            let (w, h, sem) = read_semantic(sem_path)?;
            let (iw, ih, inst) = read_instance(inst_path)?;
            ensure!((w, h) == (iw, ih), "{stem}: semantic and instance masks differ in size");
            let seed = stem_seed(args.seed, "labelnoise", stem);
            let mut files = Vec::new();
            let mut records = Vec::new();
            for &level in &levels {
                let noisy = corrupt_masks(&inst, &sem, w, h, &spec_at(level, seed))
                    .with_context(|| format!("corrupting {}", inst_path.display()))?;
                let dir = out.join(level_dir_name(level)).join(stem);
                let paths = ["sem", "inst", "fgbg"].map(|k| dir.join(format!("{stem}_{k}.png")));
                write_semantic(&paths[0], w, h, &noisy.semantic)?;
                write_instance(&paths[1], w, h, &noisy.instance)?;
                write_semantic(&paths[2], w, h, &noisy.fgbg)?;
                files.extend(paths);
                // Carry the image along so the level directory is a dataset.
                let image = sem_path.with_file_name(format!("{stem}.png"));
                if image.is_file() {
                    let target = dir.join(format!("{stem}.png"));
                    fs::copy(&image, &target).with_context(|| format!("copying {}", image.display()))?;
                    files.push(target);
                }
                records.push((level, NoiseRecord { flipped: noisy.flipped, shape_events: noisy.shape_events }));
            }
            Ok((files, records))
        })
        .collect::<Result<_>>()?;

    let mut manifest = Manifest::new("labelnoise", args)?;
    let mut per_level: BTreeMap<String, BTreeMap<&str, &NoiseRecord>> = BTreeMap::new();
    for ((stem, (sem, inst)), (files, records)) in masks.iter().zip(&results) {
        outputs.extend(files.iter().cloned());
        manifest.add_inputs([sem.as_path(), inst.as_path()])?;
        manifest.seeds.insert(stem.clone(), stem_seed(args.seed, "labelnoise", stem));
        for (level, rec) in records {
            per_level.entry(level_dir_name(*level)).or_default().insert(stem, rec);
        }
    }
    for (dir, recs) in &per_level {
        let path = out.join(dir).join("labelnoise.json");
        write_json(&path, recs)?;
        outputs.extend([path]);
    }
    finish(manifest, out, outputs)
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockTask {
    /// Six classes: background plus five nucleus classes.
    Semseg,
    /// Two classes: background and nucleus.
    Fgbg,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Knob {
    Softness,
    Jitter,
}

#[derive(clap::Args, Debug, Clone, Serialize, Deserialize)]
pub struct MockPredArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value = "semseg")]
    pub task: MockTask,
    #[arg(long, default_value_t = 8)]
    pub members: usize,
    #[arg(long, default_value_t = 0.0)]
    pub softness: f64,
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0.0)]
    pub boundary_sigma: f64,
    /// JSON file holding a row-stochastic C×C matrix.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
    /// Knob swept over `--levels`, one `level_<x>` directory each.
    #[arg(long, value_enum)]
    pub sweep: Option<Knob>,
    #[arg(long, value_delimiter = ',')]
    pub levels: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "mock")]
    pub source_tag: String,
}

pub fn mockpred(args: &MockPredArgs, out: &Path) -> Result<Manifest> {
    let names: Vec<String> = match args.task {
        MockTask::Semseg => SEMANTIC_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        MockTask::Fgbg => vec!["background".into(), "nucleus".into()],
    };
    let confusion = match &args.confusion {
        Some(p) => Some(
            serde_json::from_str::<Vec<Vec<f64>>>(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
        ),
        None => None,
    };
    // Without a sweep the stacks go straight into `out`.
    let runs: Vec<(Option<f64>, PathBuf)> = match args.sweep {
        None => vec![(None, out.to_owned())],
        Some(_) => {
            ensure!(!args.levels.is_empty(), "--sweep needs --levels");
            let mut seen = BTreeMap::new();
            for &l in &args.levels {
                ensure!(l >= 0.0 && l.is_finite(), "level {l} must be finite and >= 0");
                ensure!(seen.insert(level_dir_name(l), l).is_none(), "duplicate level directory for {l}");
            }
            args.levels.iter().map(|&l| (Some(l), out.join(level_dir_name(l)))).collect()
        }
    };
    let spec_for = |value: Option<f64>, seed| {
        let mut s = MockSpec {
            members: args.members,
            softness: args.softness,
            jitter: args.jitter,
            confusion: confusion.clone(),
            boundary_sigma: args.boundary_sigma,
            seed,
            source_tag: args.source_tag.clone(),
        };
        match (args.sweep, value) {
            (Some(Knob::Softness), Some(v)) => s.softness = v,
            (Some(Knob::Jitter), Some(v)) => s.jitter = v,
            _ => {}
        }
        s
    };
    spec_for(runs[0].0, 0).validate(names.len())?;

    let masks = find_masks(&args.gt, false)?;
    let mut outputs = Outputs::default();
    outputs.mkdir(out)?;
    for (_, dir) in &runs {
        outputs.mkdir(dir)?;
    }
    let results: Vec<Vec<PathBuf>> = masks
        .par_iter()
        .map(|(stem, (sem_path, _))| -> Result<Vec<PathBuf>> {
            let (w, h, mut gt) = read_semantic(sem_path)?;
            if args.task == MockTask::Fgbg {
                gt = histosynth::labelnoise::derive_fgbg(&gt);
            }
            let seed = stem_seed(args.seed, "mockpred", stem);
            let mut files = Vec::new();
            for (value, dir) in &runs {
                let stack = generate_stack(&gt, h, w, &names, &spec_for(*value, seed))
                    .with_context(|| format!("building stack for {}", sem_path.display()))?;
                stack.write(dir, stem)?;
                let (bin, json) = uq::ProbStack::paths(dir, stem);
                files.extend([bin, json]);
            }
            Ok(files)
        })
        .collect::<Result<_>>()?;

    let mut manifest = Manifest::new("mockpred", args)?;
    if let Some(p) = &args.confusion {
        manifest.add_inputs([p.as_path()])?;
    }
    for ((stem, (sem, _)), files) in masks.iter().zip(results) {
        outputs.extend(files);
        manifest.add_inputs([sem.as_path()])?;
        manifest.seeds.insert(stem.clone(), stem_seed(args.seed, "mockpred", stem));
    }
    finish(manifest, out, outputs)
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggArg {
    ImageMean,
    PatchMax,
    ThresholdMean,
}

#[derive(clap::Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Stacks, either directly or in `level_<x>` subdirectories.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth masks; `level_<x>` subdirectories are used when present.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value = "threshold-mean")]
    pub agg: AggArg,
    #[arg(long, default_value_t = 0.9)]
    pub quantile: f64,
    #[arg(long, default_value_t = 64)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 32)]
    pub stride: usize,
}

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_SUMMARY: &str = "summary.json";

pub fn evaluate(args: &EvaluateArgs, out: &Path) -> Result<Manifest> {
    let agg = match args.agg {
        AggArg::ImageMean => AggregationSpec::ImageMean,
        AggArg::PatchMax => AggregationSpec::PatchMax { patch_size: args.patch_size, stride: args.stride },
        AggArg::ThresholdMean => AggregationSpec::ThresholdMean { quantile_p: args.quantile },
    };
    let groups = discover_levels(&args.pred)?;
    let report = benchmark_run(&groups, &args.gt, &agg)?;

    let mut outputs = Outputs::default();
    outputs.mkdir(out)?;
    let (csv, summary) = (out.join(REPORT_CSV), out.join(REPORT_SUMMARY));
    outputs.extend([csv.clone(), summary.clone()]);
    report.write_csv(&csv)?;
    report.write_summary(&summary)?;

    println!("noise_level,images,accuracy,f1_macro,pu,au,eu");
    for s in &report.levels {
        println!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            s.noise_level, s.images, s.accuracy, s.f1_macro, s.pu, s.au, s.eu
        );
    }
    let mut manifest = Manifest::new("evaluate", args)?;
    let stacks: Vec<PathBuf> = groups
        .iter()
        .flat_map(|g| report.rows.iter().filter(move |r| r.noise_level == g.noise_level).map(move |r| g.dir.join(format!("{}_probs.bin", r.image_stem))))
        .collect();
    manifest.add_inputs(stacks.iter().map(PathBuf::as_path))?;
    finish(manifest, out, outputs)
}
