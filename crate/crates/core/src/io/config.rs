//! Line-oriented run configuration.
//!
//! Grammar: one `key = value` per line, optional `[section]` headers, `#`
//! starts a comment, blank lines are ignored. A key may appear at top level or
//! inside its own section, at most once. Strings may be double-quoted.
//!
//! Resolution order: built-in defaults, then the preset of `task`, then the
//! preset of `style` (images only), then every explicit key. Presets apply
//! regardless of where `task` and `style` appear in the file.
//!
//! | section | key | default (image / sdf) |
//! |---|---|---|
//! | run | task | image |
//! | run | variant | full |
//! | run | steps | 50000 |
//! | run | batch_size | 16384 / 49152 |
//! | run | log_every | 100 |
//! | run | seed | 0 |
//! | run | deterministic | false |
//! | run | lr | 1e-4 |
//! | run | chunk_rows | 1024 |
//! | run | output | out |
//! | model | levels | 8 / 5 |
//! | model | width | 96 / 256 |
//! | model | alpha | 100 / 45 |
//! | model | layer_alphas | none |
//! | model | n_min | 64 / 8 |
//! | model | c_g | 1.5 / 1.3 |
//! | model | table_size | 524288 |
//! | model | features | 2 |
//! | model | sigma_min | 5 |
//! | model | c_f | 2 / 1.2 |
//! | image | path | none |
//! | image | style | tokyo |
//! | image | sampling | uniform |
//! | sdf | shape | sphere |
//! | sdf | radius | 0.5 |
//! | sdf | half | 0.3 |
//! | sdf | major | 0.5 |
//! | sdf | minor | 0.2 |
//! | sdf | offset | 0.3 |
//! | sdf | points | none |
//! | sdf | eps | 0.01 |
//! | sdf | near_sigma | 0.01 |
//! | sdf | eval_samples | 10000 |
//! | sdf | eval_grid | 64 |
//! | sdf | slice_res | 128 |
//!
//! The `einstein` style sets width 256, c_g 2 and sigma_min 10.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{config_err, NffbError, Result};
use crate::filter_bank::{FilterBankConfig, Variant};
use crate::tasks::{ImageSampling, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Image,
    Sdf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageStyle {
    Tokyo,
    Einstein,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Box,
    Torus,
    /// Sphere of `radius` at `-offset` and box of `half` at `+offset` along x.
    Union,
}

macro_rules! named_enum {
    ($ty:ident, $what:literal, $($variant:ident => $name:literal),+) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(format!(concat!("expected ", $what, " ({})"), [$($name),+].join(" | "))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(TaskKind, "a task", Image => "image", Sdf => "sdf");
named_enum!(ImageStyle, "an image style", Tokyo => "tokyo", Einstein => "einstein");
named_enum!(ShapeKind, "a shape", Sphere => "sphere", Box => "box", Torus => "torus", Union => "union");

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskKind,
    pub style: ImageStyle,
    pub variant: Variant,
    /// `seed` lives here and also drives batch sampling.
    pub model: FilterBankConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub log_every: u64,
    pub lr: f64,
    pub chunk_rows: usize,
    pub deterministic: bool,
    pub output: PathBuf,
    pub image: Option<PathBuf>,
    pub sampling: ImageSampling,
    pub shape: ShapeKind,
    pub radius: f64,
    pub half: f64,
    pub major: f64,
    pub minor: f64,
    pub offset: f64,
    pub points: Option<PathBuf>,
    pub eps: f64,
    pub near_sigma: f64,
    pub eval_samples: usize,
    pub eval_grid: usize,
    pub slice_res: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(TaskKind::Image, ImageStyle::Tokyo)
    }
}

const KEYS: &[(&str, &str)] = &[
    ("run", "task"),
    ("run", "variant"),
    ("run", "steps"),
    ("run", "batch_size"),
    ("run", "log_every"),
    ("run", "seed"),
    ("run", "deterministic"),
    ("run", "lr"),
    ("run", "chunk_rows"),
    ("run", "output"),
    ("model", "levels"),
    ("model", "width"),
    ("model", "alpha"),
    ("model", "layer_alphas"),
    ("model", "n_min"),
    ("model", "c_g"),
    ("model", "table_size"),
    ("model", "features"),
    ("model", "sigma_min"),
    ("model", "c_f"),
    ("image", "path"),
    ("image", "style"),
    ("image", "sampling"),
    ("sdf", "shape"),
    ("sdf", "radius"),
    ("sdf", "half"),
    ("sdf", "major"),
    ("sdf", "minor"),
    ("sdf", "offset"),
    ("sdf", "points"),
    ("sdf", "eps"),
    ("sdf", "near_sigma"),
    ("sdf", "eval_samples"),
    ("sdf", "eval_grid"),
    ("sdf", "slice_res"),
];

/// Keys accepted by [`RunConfig::set`] and the config grammar.
pub fn known_keys() -> impl Iterator<Item = &'static str> {
    KEYS.iter().map(|(_, k)| *k)
}

fn parse_number(v: &str) -> std::result::Result<f64, String> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err("expected a finite number".into()),
    }
}

fn parse_int<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    if let Some(exp) = v.strip_prefix("2^") {
        let e: u32 = exp.parse().map_err(|_| "expected an integer or 2^k".to_string())?;
        let n = 1u64.checked_shl(e).filter(|_| e < 64).ok_or("exponent too large")?;
        return n.to_string().parse().map_err(|_| "integer out of range".into());
    }
    v.parse().map_err(|_| "expected a non-negative integer".into())
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_path(v: &str) -> std::result::Result<Option<PathBuf>, String> {
    match v {
        "" => Err("expected a path".into()),
        "none" => Ok(None),
        _ => Ok(Some(PathBuf::from(v))),
    }
}

impl RunConfig {
    /// Defaults for a task and, for images, a style.
    pub fn preset(task: TaskKind, style: ImageStyle) -> Self {
        let mut c = RunConfig {
            task,
            style,
            variant: Variant::Full,
            model: FilterBankConfig::default(),
            steps: 50_000,
            batch_size: 16_384,
            log_every: 100,
            lr: 1e-4,
            chunk_rows: crate::filter_bank::DEFAULT_CHUNK_ROWS,
            deterministic: false,
            output: PathBuf::from("out"),
            image: None,
            sampling: ImageSampling::Uniform,
            shape: ShapeKind::Sphere,
            radius: 0.5,
            half: 0.3,
            major: 0.5,
            minor: 0.2,
            offset: 0.3,
            points: None,
            eps: crate::tasks::DEFAULT_EPS,
            near_sigma: crate::tasks::DEFAULT_NEAR_SIGMA,
            eval_samples: 10_000,
            eval_grid: 64,
            slice_res: 128,
        };
        match task {
            TaskKind::Image => {
                if style == ImageStyle::Einstein {
                    c.model.width = 256;
                    c.model.c_g = 2.0;
                    c.model.sigma_min = 10.0;
                }
            }
            TaskKind::Sdf => {
                c.batch_size = 49_152;
                c.model = FilterBankConfig {
                    input_dims: 3,
                    output_dims: 1,
                    levels: 5,
                    width: 256,
                    alpha: 45.0,
                    n_min: 8,
                    c_g: 1.3,
                    sigma_min: 5.0,
                    c_f: 1.2,
                    ..FilterBankConfig::default()
                };
            }
        }
        c
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        match key {
            "task" => {
                let task: TaskKind = value.parse()?;
                let (i, o) = match task {
                    TaskKind::Image => (2, 3),
                    TaskKind::Sdf => (3, 1),
                };
                self.task = task;
                m.input_dims = i;
                m.output_dims = o;
            }
            "variant" => self.variant = value.parse().map_err(|e: NffbError| e.to_string())?,
            "steps" => self.steps = parse_int(value)?,
            "batch_size" => self.batch_size = parse_int(value)?,
            "log_every" => self.log_every = parse_int(value)?,
            "seed" => m.seed = parse_int(value)?,
            "deterministic" => self.deterministic = parse_bool(value)?,
            "lr" => self.lr = parse_number(value)?,
            "chunk_rows" => self.chunk_rows = parse_int(value)?,
            "output" => self.output = parse_path(value)?.ok_or("output cannot be none")?,
            "levels" => m.levels = parse_int(value)?,
            "width" => m.width = parse_int(value)?,
            "alpha" => m.alpha = parse_number(value)?,
            "layer_alphas" => {
                m.layer_alphas = match value {
                    "none" => None,
                    _ => Some(
                        value
                            .split(',')
                            .map(|v| parse_number(v.trim()))
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| "expected none or a comma-separated list of numbers".to_string())?,
                    ),
                }
            }
            "n_min" => m.n_min = parse_int(value)?,
            "c_g" => m.c_g = parse_number(value)?,
            "table_size" => m.table_cap = parse_int(value)?,
            "features" => m.features = parse_int(value)?,
            "sigma_min" => m.sigma_min = parse_number(value)?,
            "c_f" => m.c_f = parse_number(value)?,
            "path" => self.image = parse_path(value)?,
            "style" => self.style = value.parse()?,
            "sampling" => {
                self.sampling = match value {
                    "uniform" => ImageSampling::Uniform,
                    "exhaustive" => ImageSampling::Exhaustive,
                    _ => return Err("expected uniform or exhaustive".into()),
                }
            }
            "shape" => self.shape = value.parse()?,
            "radius" => self.radius = parse_number(value)?,
            "half" => self.half = parse_number(value)?,
            "major" => self.major = parse_number(value)?,
            "minor" => self.minor = parse_number(value)?,
            "offset" => self.offset = parse_number(value)?,
            "points" => self.points = parse_path(value)?,
            "eps" => self.eps = parse_number(value)?,
            "near_sigma" => self.near_sigma = parse_number(value)?,
            "eval_samples" => self.eval_samples = parse_int(value)?,
            "eval_grid" => self.eval_grid = parse_int(value)?,
            "slice_res" => self.slice_res = parse_int(value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Shared-value checks that do not need input files.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return config_err("batch_size must be at least 1");
        }
        if self.log_every == 0 {
            return config_err("log_every must be at least 1");
        }
        if self.chunk_rows == 0 {
            return config_err("chunk_rows must be at least 1");
        }
        if !(self.lr > 0.0) {
            return config_err(format!("lr must be positive, got {}", self.lr));
        }
        if self.task == TaskKind::Sdf {
            if !(self.eps > 0.0) || !(self.near_sigma > 0.0) {
                return config_err("eps and near_sigma must be positive");
            }
            if self.points.is_none() {
                self.shape()?.validate()?;
            }
        }
        Ok(())
    }

    /// Fails when the task's input file is not configured.
    pub fn require_input(&self) -> Result<()> {
        if self.task == TaskKind::Image && self.image.is_none() {
            return config_err("image task needs an input path ([image] path or --input)");
        }
        Ok(())
    }

    /// The analytic shape named by the `sdf` section.
    pub fn shape(&self) -> Result<Shape> {
        let shape = match self.shape {
            ShapeKind::Sphere => Shape::sphere(self.radius),
            ShapeKind::Box => Shape::Cuboid {
                center: [0.0; 3],
                half: [self.half; 3],
            },
            ShapeKind::Torus => Shape::Torus {
                center: [0.0; 3],
                major: self.major,
                minor: self.minor,
            },
            ShapeKind::Union => Shape::Union(
                Box::new(Shape::Sphere {
                    center: [-self.offset, 0.0, 0.0],
                    radius: self.radius,
                }),
                Box::new(Shape::Cuboid {
                    center: [self.offset, 0.0, 0.0],
                    half: [self.half; 3],
                }),
            ),
        };
        shape.validate()?;
        Ok(shape)
    }

    /// Canonical text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| quote(&p.to_string_lossy()));
        let alphas = m.layer_alphas.as_ref().map_or("none".to_string(), |a| {
            a.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        });
        let sampling = match self.sampling {
            ImageSampling::Uniform => "uniform",
            ImageSampling::Exhaustive => "exhaustive",
        };
        let mut s = String::new();
        let mut section = "";
        let values: Vec<String> = vec![
            self.task.to_string(),
            self.variant.to_string(),
            self.steps.to_string(),
            self.batch_size.to_string(),
            self.log_every.to_string(),
            m.seed.to_string(),
            self.deterministic.to_string(),
            self.lr.to_string(),
            self.chunk_rows.to_string(),
            quote(&self.output.to_string_lossy()),
            m.levels.to_string(),
            m.width.to_string(),
            m.alpha.to_string(),
            alphas,
            m.n_min.to_string(),
            m.c_g.to_string(),
            m.table_cap.to_string(),
            m.features.to_string(),
            m.sigma_min.to_string(),
            m.c_f.to_string(),
            path(&self.image),
            self.style.to_string(),
            sampling.to_string(),
            self.shape.to_string(),
            self.radius.to_string(),
            self.half.to_string(),
            self.major.to_string(),
            self.minor.to_string(),
            self.offset.to_string(),
            path(&self.points),
            self.eps.to_string(),
            self.near_sigma.to_string(),
            self.eval_samples.to_string(),
            self.eval_grid.to_string(),
            self.slice_res.to_string(),
        ];
        for ((sec, key), value) in KEYS.iter().zip(values) {
            if *sec != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                let _ = writeln!(s, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn parse_err(line: usize, message: impl Into<String>) -> NffbError {
    NffbError::Parse {
        line,
        message: message.into(),
    }
}

/// Value text with comments and quotes removed.
fn clean_value(raw: &str, line: usize) -> Result<String> {
    let raw = raw.trim();
    if let Some(rest) = raw.strip_prefix('"') {
        let mut out = String::new();
        let mut chars = rest.chars();
        while let Some(c) = chars.next() {
            match c {
                '\\' => match chars.next() {
                    Some(e @ ('\\' | '"')) => out.push(e),
                    _ => return Err(parse_err(line, "invalid escape in quoted string")),
                },
                '"' => {
                    let tail = chars.as_str().trim();
                    if !tail.is_empty() && !tail.starts_with('#') {
                        return Err(parse_err(line, "unexpected text after quoted string"));
                    }
                    return Ok(out);
                }
                _ => out.push(c),
            }
        }
        return Err(parse_err(line, "unterminated quoted string"));
    }
    Ok(raw.split('#').next().unwrap_or("").trim().to_string())
}

struct Entry {
    line: usize,
    key: String,
    value: String,
}

fn scan(text: &str) -> Result<Vec<Entry>> {
    let mut section: Option<String> = None;
    let mut entries: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest
                .split('#')
                .next()
                .and_then(|s| s.trim().strip_suffix(']'))
                .ok_or_else(|| parse_err(line, "malformed section header"))?
                .trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(parse_err(line, format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| parse_err(line, format!("expected 'key = value', got '{trimmed}'")))?;
        let key = key.trim();
        let home = KEYS
            .iter()
            .find(|(_, k)| *k == key)
            .map(|(s, _)| *s)
            .ok_or_else(|| parse_err(line, format!("unknown key '{key}'")))?;
        if let Some(sec) = &section {
            if sec != home {
                return Err(parse_err(line, format!("key '{key}' belongs to [{home}], not [{sec}]")));
            }
        }
        if let Some(prev) = entries.iter().find(|e| e.key == key) {
            return Err(parse_err(line, format!("key '{key}' already set on line {}", prev.line)));
        }
        entries.push(Entry {
            line,
            key: key.to_string(),
            value: clean_value(value, line)?,
        });
    }
    Ok(entries)
}

/// Parses and validates a configuration file.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_as(text, TaskKind::Image)
}

/// Like [`parse_config`], with `task` defaulting to `default_task`.
pub fn parse_config_as(text: &str, default_task: TaskKind) -> Result<RunConfig> {
    let entries = scan(text)?;
    let pick = |key: &str| entries.iter().find(|e| e.key == key);
    let lift = |e: &Entry, msg: String| parse_err(e.line, format!("invalid value '{}' for key '{}': {msg}", e.value, e.key));
    let task = match pick("task") {
        Some(e) => e.value.parse::<TaskKind>().map_err(|m| lift(e, m))?,
        None => default_task,
    };
    let style = match pick("style") {
        Some(e) => e.value.parse::<ImageStyle>().map_err(|m| lift(e, m))?,
        None => ImageStyle::Tokyo,
    };
    let mut config = RunConfig::preset(task, style);
    for e in &entries {
        if e.key != "task" && e.key != "style" {
            config.set(&e.key, &e.value).map_err(|m| lift(e, m))?;
        }
    }
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.task, TaskKind::Image);
        assert_eq!(c.model.alpha, 100.0);
        assert_eq!((c.model.n_min, c.model.c_g, c.model.sigma_min, c.model.c_f), (64, 1.5, 5.0, 2.0));
        assert_eq!(c.model.width, 96);
        assert_eq!(c.model.table_cap, 1 << 19);
        assert_eq!(c.lr, 1e-4);
    }

    #[test]
    fn sdf_preset() {
        let c = parse_config("task = sdf\n").unwrap();
        let m = &c.model;
        assert_eq!((m.alpha, m.levels, m.n_min, m.c_g, m.sigma_min, m.c_f), (45.0, 5, 8, 1.3, 5.0, 1.2));
        assert_eq!((m.input_dims, m.output_dims, m.width), (3, 1, 256));
        assert_eq!(c.batch_size, 49_152);
        assert_eq!((c.eps, c.near_sigma), (0.01, 0.01));
    }

    #[test]
    fn einstein_style() {
        let c = parse_config("[image]\nstyle = einstein\n").unwrap();
        assert_eq!((c.model.width, c.model.c_g, c.model.sigma_min, c.model.n_min), (256, 2.0, 10.0, 64));
    }

    #[test]
    fn presets_apply_before_explicit_keys_in_any_order() {
        let a = parse_config("alpha = 30\ntask = sdf\n").unwrap();
        let b = parse_config("task = sdf\nalpha = 30\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model.alpha, 30.0);
        assert_eq!(a.model.levels, 5);
    }

    #[test]
    fn bad_value_names_key_and_line() {
        let err = parse_config("# comment\n\nalpha = banana\n").unwrap_err();
        match err {
            NffbError::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("alpha"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejected_inputs() {
        for (text, line) in [
            ("alhpa = 3", 1),
            ("x", 1),
            ("[modle]", 1),
            ("[run]\nalpha = 3", 2),
            ("width = 4\nwidth = 5", 2),
            ("steps = -1", 1),
            ("deterministic = yes", 1),
            ("alpha = inf", 1),
            ("output = \"abc", 1),
            ("task = nerf", 1),
            ("[model", 1),
        ] {
            match parse_config(text) {
                Err(NffbError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(parse_config("levels = 0"), Err(NffbError::Config(_))));
    }

    #[test]
    fn grammar_details() {
        let c = parse_config(
            "[run]\nsteps = 10 # short\noutput = \"a b#c\"\n[model]\ntable_size = 2^14\nlayer_alphas = 1, 2,3,4,5,6,7,8\n[image]\npath = img.ppm\n",
        )
        .unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.output, PathBuf::from("a b#c"));
        assert_eq!(c.model.table_cap, 1 << 14);
        assert_eq!(c.model.layer_alphas.as_deref(), Some(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0][..]));
        assert_eq!(c.image, Some(PathBuf::from("img.ppm")));
    }

    #[test]
    fn input_path_requirement() {
        assert!(RunConfig::default().require_input().is_err());
        assert!(parse_config("task = sdf").unwrap().require_input().is_ok());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = parse_config("task = sdf\nshape = union\nseed = 7\nlr = 3.3e-5\n").unwrap();
        c.points = Some(PathBuf::from("with \"quote\".bin"));
        assert_eq!(parse_config(&c.to_text()).unwrap(), c);
        let d = RunConfig::preset(TaskKind::Image, ImageStyle::Einstein);
        assert_eq!(parse_config(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn shapes_from_config() {
        let c = parse_config("task = sdf\nshape = torus\n").unwrap();
        assert!(matches!(c.shape().unwrap(), Shape::Torus { .. }));
        assert!(parse_config("task = sdf\nradius = 2").is_err());
    }

    proptest! {
        #[test]
        fn parsing_is_total(text in "[ -~\n]{0,120}") {
            // any printable input yields a config or a diagnostic
            let _ = parse_config(&text);
        }

        #[test]
        fn numeric_values_round_trip(alpha in 0.001f64..1e4, width in 1usize..512, seed in proptest::num::u64::ANY) {
            let text = format!("alpha = {alpha}\nwidth = {width}\nseed = {seed}\n");
            let c = parse_config(&text).unwrap();
            prop_assert_eq!(c.model.alpha, alpha);
            prop_assert_eq!(c.model.width, width);
            prop_assert_eq!(c.model.seed, seed);
            prop_assert!(parse_config(&c.to_text()).unwrap() == c);
        }
    }
}
