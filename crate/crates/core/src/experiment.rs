//! Run orchestration behind the command-line tool.
//!
//! Output directory layout of a fit:
//!
//! | file | content |
//! |---|---|
//! | `config.txt` | resolved configuration echo |
//! | `metrics.csv` | one row per logged step |
//! | `checkpoint.bin` | final (or last good) checkpoint |
//! | `render.ppm` | image task: clamped full-resolution prediction |
//! | `slice_{x,y,z}.ppm` | SDF task: central planes of the field |

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, NffbError, Result};
use crate::filter_bank::{FilterBank, Variant};
use crate::io::{load_image, load_points, save_checkpoint, save_image, Checkpoint, RunConfig, TaskKind};
use crate::math::AdamConfig;
use crate::real::Matrix;
use crate::tasks::{
    all_pixel_coords, relative_error, render, render_sdf_slice, sdf_eval_metrics, ssim, train, Image, ImageTask,
    MetricsRow, SdfField, SdfOracle, SdfTask, SliceAxis, Task, TrainOptions, TrainState, CSV_HEADER,
};

/// Hyperparameters a sweep may vary.
pub const SWEEP_PARAMS: [&str; 6] = ["n_min", "c_g", "sigma_min", "alpha", "width", "levels"];

const EVAL_SALT: u64 = 0xe7a1_0000_0000_0001;

pub enum LoadedTask {
    Image(ImageTask),
    Sdf(SdfTask),
}

impl LoadedTask {
    pub fn as_task(&self) -> &dyn Task {
        match self {
            LoadedTask::Image(t) => t,
            LoadedTask::Sdf(t) => t,
        }
    }
}

/// Reads the task's input files.
pub fn load_task(config: &RunConfig) -> Result<LoadedTask> {
    config.require_input()?;
    match config.task {
        TaskKind::Image => {
            let path = config.image.as_ref().expect("checked by require_input");
            let image = load_image(path)?;
            Ok(LoadedTask::Image(ImageTask::new(image, config.batch_size, config.sampling)?))
        }
        TaskKind::Sdf => {
            let oracle = match &config.points {
                Some(p) => SdfOracle::Sampled(load_points(p)?),
                None => SdfOracle::Analytic(config.shape()?),
            };
            Ok(LoadedTask::Sdf(SdfTask::new(
                oracle,
                config.batch_size,
                config.near_sigma,
                config.eps,
            )?))
        }
    }
}

pub fn train_options(config: &RunConfig) -> TrainOptions {
    TrainOptions {
        steps: config.steps,
        log_every: config.log_every,
        seed: config.model.seed,
        adam: AdamConfig {
            base_lr: config.lr,
            ..AdamConfig::default()
        },
        chunk_rows: config.chunk_rows,
        deterministic: config.deterministic,
    }
}

/// Quality of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalReport {
    Image {
        psnr: f64,
        /// `None` when the image is smaller than the SSIM window.
        ssim: Option<f64>,
    },
    Sdf {
        surface_median: f64,
        iou: f64,
    },
    /// Against an external point file: mean relative error and the fraction
    /// of points whose sign is reproduced.
    Points {
        relative_error: f64,
        sign_agreement: f64,
    },
}

impl EvalReport {
    /// `(name, value)` pairs in display order.
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        match *self {
            EvalReport::Image { psnr, ssim } => {
                let mut v = vec![("psnr", psnr)];
                v.extend(ssim.map(|s| ("ssim", s)));
                v
            }
            EvalReport::Sdf { surface_median, iou } => vec![("surface_median", surface_median), ("iou", iou)],
            EvalReport::Points {
                relative_error,
                sign_agreement,
            } => vec![("relative_error", relative_error), ("sign_agreement", sign_agreement)],
        }
    }

    pub fn primary(&self) -> f64 {
        self.fields()[0].1
    }
}

pub fn evaluate(config: &RunConfig, task: &LoadedTask, model: &FilterBank<f32>) -> Result<EvalReport> {
    match task {
        LoadedTask::Image(t) => {
            let pred = render(model, t.image.width, t.image.height)?.clamped();
            let psnr = crate::tasks::psnr(&pred, &t.image, 1.0)?;
            let ssim = if t.image.width >= 11 && t.image.height >= 11 {
                Some(ssim(&pred, &t.image)?)
            } else {
                None
            };
            Ok(EvalReport::Image { psnr, ssim })
        }
        LoadedTask::Sdf(t) => match &t.oracle {
            SdfOracle::Analytic(shape) => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.model.seed ^ EVAL_SALT);
                let m = sdf_eval_metrics(model, shape, config.eval_samples, config.eval_grid, &mut rng)?;
                Ok(EvalReport::Sdf {
                    surface_median: m.surface_median,
                    iou: m.iou,
                })
            }
            SdfOracle::Sampled(set) => {
                let world: Vec<[f64; 3]> = set.points.iter().map(|p| p.map(f64::from)).collect();
                let pred: Vec<f32> = model.sdf(&world)?.into_iter().map(|v| v as f32).collect();
                let agree = pred
                    .iter()
                    .zip(&set.sdf)
                    .filter(|(p, t)| (**p < 0.0) == (**t < 0.0))
                    .count();
                Ok(EvalReport::Points {
                    relative_error: relative_error(&pred, &set.sdf, config.eps),
                    sign_agreement: agree as f64 / set.len() as f64,
                })
            }
        },
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub rows: Vec<MetricsRow>,
    pub eval: EvalReport,
    pub param_count: usize,
    pub checkpoint: PathBuf,
}

/// Opens `metrics.csv`, appending when resuming into a file with our header.
fn open_metrics(path: &Path, resuming: bool) -> Result<File> {
    if resuming && path.exists() {
        let mut first = String::new();
        BufReader::new(File::open(path)?).read_line(&mut first)?;
        if first.trim_end() == CSV_HEADER {
            return Ok(OpenOptions::new().append(true).open(path)?);
        }
    }
    let mut f = File::create(path)?;
    writeln!(f, "{CSV_HEADER}")?;
    Ok(f)
}

/// Trains per `config` (optionally continuing `resume`) and writes every
/// output into `config.output`.
///
/// On a numerics failure the last good state is checkpointed before the error
/// is returned.
pub fn fit(config: &RunConfig, resume: Option<Checkpoint>) -> Result<FitReport> {
    config.validate()?;
    let task = load_task(config)?;
    let (mut model, mut state) = match resume {
        Some(ckpt) => {
            let model = ckpt.model()?;
            (model, ckpt.state)
        }
        None => {
            let model = FilterBank::build(&config.model, config.variant)?;
            let n = model.param_count();
            (model, TrainState::new(n))
        }
    };
    let out = &config.output;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), config.to_text())?;
    let mut csv = open_metrics(&out.join("metrics.csv"), state.step > 0)?;
    let mut rows = Vec::new();
    let result = train(task.as_task(), &mut model, &mut state, &train_options(config), |row| {
        writeln!(csv, "{}", row.csv_line())?;
        rows.push(*row);
        Ok(())
    });
    csv.flush()?;
    let checkpoint = out.join("checkpoint.bin");
    save_checkpoint(&Checkpoint::capture(config, &model, &state), &checkpoint)?;
    result?;
    write_renders(config, &task, &model, out)?;
    let eval = evaluate(config, &task, &model)?;
    Ok(FitReport {
        rows,
        eval,
        param_count: model.param_count(),
        checkpoint,
    })
}

fn write_renders(config: &RunConfig, task: &LoadedTask, model: &FilterBank<f32>, out: &Path) -> Result<()> {
    match task {
        LoadedTask::Image(t) => {
            let img = render(model, t.image.width, t.image.height)?.clamped();
            save_image(&img, &out.join("render.ppm"))
        }
        LoadedTask::Sdf(_) => {
            for axis in [SliceAxis::X, SliceAxis::Y, SliceAxis::Z] {
                let img = render_sdf_slice(model, axis, 0.0, config.slice_res)?;
                save_image(&img, &out.join(format!("slice_{}.ppm", axis.name())))?;
            }
            Ok(())
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub param_count: usize,
    pub eval: EvalReport,
}

/// Trains every variant with the same seed, each in `output/<variant>`.
pub fn ablate(config: &RunConfig) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .iter()
        .map(|&variant| {
            let mut c = config.clone();
            c.variant = variant;
            c.output = config.output.join(variant.name());
            let report = fit(&c, None)?;
            Ok(AblationRow {
                variant,
                param_count: report.param_count,
                eval: report.eval,
            })
        })
        .collect()
}

/// Comma-separated ablation table with a header line.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    if let Some(first) = rows.first() {
        let names: Vec<&str> = first.eval.fields().iter().map(|(n, _)| *n).collect();
        s.push_str(&format!("variant,params,{}\n", names.join(",")));
    }
    for r in rows {
        let values: Vec<String> = r.eval.fields().iter().map(|(_, v)| v.to_string()).collect();
        s.push_str(&format!("{},{},{}\n", r.variant.name(), r.param_count, values.join(",")));
    }
    s
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: String,
    pub metrics: PathBuf,
    pub eval: EvalReport,
}

/// One run per value of `param`, each in `output/<param>_<value>`.
pub fn sweep(config: &RunConfig, param: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    if !SWEEP_PARAMS.contains(&param) {
        return config_err(format!("cannot sweep '{param}'; choose one of {}", SWEEP_PARAMS.join(", ")));
    }
    if values.is_empty() {
        return config_err("sweep needs at least one value");
    }
    values
        .iter()
        .map(|value| {
            let mut c = config.clone();
            c.set(param, value)
                .map_err(|m| NffbError::Config(format!("invalid value '{value}' for '{param}': {m}")))?;
            if param == "levels" {
                c.model.layer_alphas = None;
            }
            c.output = config.output.join(format!("{param}_{value}"));
            let report = fit(&c, None)?;
            Ok(SweepRow {
                value: value.clone(),
                metrics: c.output.join("metrics.csv"),
                eval: report.eval,
            })
        })
        .collect()
}

/// Per-level outputs `o_i` or their running sums, queried in world space.
struct LevelField<'a> {
    model: &'a FilterBank<f32>,
    level: usize,
    cumulative: bool,
}

impl SdfField for LevelField<'_> {
    fn sdf(&self, points: &[[f64; 3]]) -> Result<Vec<f64>> {
        let x = Matrix::from_vec(
            points.len(),
            3,
            points
                .iter()
                .flat_map(|p| p.map(|v| (((v + 1.0) * 0.5) as f32).clamp(0.0, 1.0)))
                .collect(),
        );
        let levels = self.model.predict_levels(&x)?;
        let range = if self.cumulative { 0..self.level + 1 } else { self.level..self.level + 1 };
        let mut out = vec![0.0f64; points.len()];
        for l in range {
            for (o, v) in out.iter_mut().zip(&levels[l].data) {
                *o += f64::from(*v);
            }
        }
        Ok(out)
    }
}

/// Writes `level_<i>` (the head output `o_i`) and `partial_<i>` (the sum of
/// `o_1..o_i`) for every level. Image levels are shifted by 0.5 so zero maps
/// to mid-gray; SDF levels are `z = 0` slices with the slice color ramp.
pub fn dump_levels(config: &RunConfig, model: &FilterBank<f32>, out: &Path, size: (usize, usize)) -> Result<Vec<PathBuf>> {
    if model.variant() != Variant::Full {
        return config_err("per-level outputs exist only for the full model");
    }
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let levels = config.model.levels;
    match config.task {
        TaskKind::Image => {
            let (w, h) = size;
            let outputs = model.predict_levels(&all_pixel_coords(w, h))?;
            let mut partial = vec![0.0f32; w * h * 3];
            for (l, o) in outputs.iter().enumerate() {
                for (p, v) in partial.iter_mut().zip(&o.data) {
                    *p += v;
                }
                let level = Image::new(w, h, o.data.iter().map(|v| v + 0.5).collect())?.clamped();
                let sum = Image::new(w, h, partial.clone())?.clamped();
                for (name, img) in [(format!("level_{}.ppm", l + 1), level), (format!("partial_{}.ppm", l + 1), sum)] {
                    let path = out.join(name);
                    save_image(&img, &path)?;
                    written.push(path);
                }
            }
        }
        TaskKind::Sdf => {
            for l in 0..levels {
                for (prefix, cumulative) in [("level", false), ("partial", true)] {
                    let field = LevelField {
                        model,
                        level: l,
                        cumulative,
                    };
                    let img = render_sdf_slice(&field, SliceAxis::Z, 0.0, size.0)?;
                    let path = out.join(format!("{prefix}_{}.ppm", l + 1));
                    save_image(&img, &path)?;
                    written.push(path);
                }
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{load_checkpoint, parse_config};

    fn write_image(dir: &Path) -> PathBuf {
        let mut data = Vec::new();
        for r in 0..16 {
            for c in 0..16 {
                data.extend([r as f32 / 15.0, c as f32 / 15.0, 0.5]);
            }
        }
        let path = dir.join("img.ppm");
        save_image(&Image::new(16, 16, data).unwrap(), &path).unwrap();
        path
    }

    fn small_config(dir: &Path) -> RunConfig {
        let text = format!(
            "steps = 6\nbatch_size = 64\nlog_every = 2\ndeterministic = true\nlevels = 2\nwidth = 8\nn_min = 4\ntable_size = 256\noutput = \"{}\"\npath = \"{}\"\n",
            dir.join("out").display(),
            write_image(dir).display()
        );
        parse_config(&text).unwrap()
    }

    #[test]
    fn fit_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        let report = fit(&config, None).unwrap();
        assert_eq!(report.rows.len(), 3);
        let csv = fs::read_to_string(config.output.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with(CSV_HEADER));
        assert!(config.output.join("render.ppm").exists());
        let ckpt = load_checkpoint(&report.checkpoint).unwrap();
        assert_eq!(ckpt.state.step, 6);
        assert!(matches!(report.eval, EvalReport::Image { ssim: Some(_), .. }));
    }

    #[test]
    fn resume_appends_identical_rows() {
        let dir = tempfile::tempdir().unwrap();
        let full = small_config(dir.path());
        fit(&full, None).unwrap();
        let whole = fs::read(full.output.join("metrics.csv")).unwrap();

        let mut first = full.clone();
        first.output = dir.path().join("split");
        first.steps = 2;
        let report = fit(&first, None).unwrap();
        let mut rest = load_checkpoint(&report.checkpoint).unwrap();
        rest.config.steps = 6;
        let config = rest.config.clone();
        fit(&config, Some(rest)).unwrap();
        assert_eq!(fs::read(first.output.join("metrics.csv")).unwrap(), whole);
    }

    #[test]
    fn sweep_validates_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        assert!(sweep(&config, "lr", &["1".into()]).is_err());
        let rows = sweep(&config, "sigma_min", &["1".into(), "8".into()]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.metrics.exists()));
    }

    #[test]
    fn dump_levels_writes_two_files_per_level() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        let model = FilterBank::build(&config.model, Variant::Full).unwrap();
        let files = dump_levels(&config, &model, &dir.path().join("levels"), (8, 8)).unwrap();
        assert_eq!(files.len(), 4);
        let sdf = parse_config("task = sdf\nlevels = 2\nwidth = 8\ntable_size = 256").unwrap();
        let model = FilterBank::build(&sdf.model, Variant::Full).unwrap();
        assert_eq!(dump_levels(&sdf, &model, &dir.path().join("sdf"), (8, 8)).unwrap().len(), 4);
    }
}
