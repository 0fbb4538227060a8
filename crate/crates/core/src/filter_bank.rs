//! The filter-bank network and its ablation variants.
//!
//! The full model runs a sine MLP whose layer `i` receives the Fourier-encoded
//! grid features of level `i` additively; every layer owns a linear head and
//! the field value is the sum of all head outputs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{config_err, NffbError, Result};
use crate::fourier::init_fourier;
use crate::grid::{GridLevel, GridLevelConfig};
use crate::math::{Tape, ValueId};
use crate::params::{ModelParams, ParamId};
use crate::parallel;
use crate::real::{Matrix, Real};

/// Half-width of the uniform table initialization.
pub const TABLE_INIT_RANGE: f64 = 1e-4;

/// Rows per independently recorded tape when evaluating large batches.
pub const DEFAULT_CHUNK_ROWS: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct FilterBankConfig {
    pub input_dims: usize,
    pub output_dims: usize,
    pub levels: usize,
    pub width: usize,
    pub alpha: f64,
    /// Per-layer override of `alpha`; length must equal `levels` when set.
    pub layer_alphas: Option<Vec<f64>>,
    pub n_min: u32,
    pub c_g: f64,
    pub table_cap: usize,
    pub features: usize,
    pub sigma_min: f64,
    pub c_f: f64,
    pub seed: u64,
}

impl Default for FilterBankConfig {
    fn default() -> Self {
        Self {
            input_dims: 2,
            output_dims: 3,
            levels: 8,
            width: 96,
            alpha: 100.0,
            layer_alphas: None,
            n_min: 64,
            c_g: 1.5,
            table_cap: 1 << 19,
            features: 2,
            sigma_min: 5.0,
            c_f: 2.0,
            seed: 0,
        }
    }
}

impl FilterBankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return config_err("levels must be at least 1");
        }
        if self.width == 0 {
            return config_err("width must be at least 1");
        }
        if self.output_dims == 0 {
            return config_err("output dimension must be at least 1");
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return config_err(format!("alpha must be positive, got {}", self.alpha));
        }
        if let Some(a) = &self.layer_alphas {
            if a.len() != self.levels {
                return config_err(format!("{} layer alphas given for {} levels", a.len(), self.levels));
            }
            if a.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return config_err("layer alphas must be positive");
            }
        }
        if !(self.sigma_min > 0.0) || !self.sigma_min.is_finite() {
            return config_err(format!("sigma_min must be positive, got {}", self.sigma_min));
        }
        if !(self.c_f >= 1.0) || !self.c_f.is_finite() {
            return config_err(format!("c_f must be >= 1, got {}", self.c_f));
        }
        for l in 0..self.levels {
            GridLevel::new(self.grid_config(l))?;
        }
        Ok(())
    }

    pub fn alpha_of(&self, layer: usize) -> f64 {
        self.layer_alphas.as_ref().map_or(self.alpha, |a| a[layer])
    }

    pub fn grid_config(&self, level: usize) -> GridLevelConfig {
        GridLevelConfig {
            level,
            base_resolution: self.n_min,
            growth: self.c_g,
            table_cap: self.table_cap,
            features: self.features,
            dims: self.input_dims,
        }
    }

    /// Table rows of every level.
    pub fn table_rows(&self) -> Result<Vec<usize>> {
        (0..self.levels).map(|l| Ok(GridLevel::new(self.grid_config(l))?.rows)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    OnlyGrid,
    GridFf,
    OnlyMlp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::OnlyGrid, Variant::GridFf, Variant::OnlyMlp];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::OnlyGrid => "only_grid",
            Variant::GridFf => "grid_ff",
            Variant::OnlyMlp => "only_mlp",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = NffbError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| NffbError::Config(format!("unknown variant '{s}'")))
    }
}

/// Training objective applied to the field output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Mse,
    MapeSq { eps: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Layout {
    tables: Vec<ParamId>,
    freqs: Vec<ParamId>,
    lifts: Vec<ParamId>,
    layers: Vec<Dense>,
    heads: Vec<Dense>,
    mlp_hidden: Option<Dense>,
    mlp_out: Option<Dense>,
}

/// Value ids of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct Recorded {
    pub output: ValueId,
    /// Per-level head outputs `o_i` (full variant only).
    pub level_outputs: Vec<ValueId>,
    /// Sine-layer activations `f_i`.
    pub hidden: Vec<ValueId>,
}

#[derive(Clone, Debug)]
pub struct FilterBank<T: Real> {
    config: FilterBankConfig,
    variant: Variant,
    width: usize,
    grids: Vec<GridLevel>,
    layout: Layout,
    params: ModelParams<T>,
}

/// Builds `variant` of the model described by `config`.
pub fn make_variant<T: Real>(config: &FilterBankConfig, variant: Variant) -> Result<FilterBank<T>> {
    FilterBank::build(config, variant)
}

/// Closed-form trainable-scalar count of the full model.
pub fn full_param_count(config: &FilterBankConfig) -> Result<usize> {
    let (n, d, w, l, f) = (
        config.input_dims,
        config.output_dims,
        config.width,
        config.levels,
        config.features,
    );
    let tables: usize = config.table_rows()?.iter().map(|r| r * f).sum();
    let freqs = l * w * f;
    let layers = (n * w + w) + (l - 1) * (w * w + w);
    let heads = l * (d * w + d);
    Ok(tables + freqs + layers + heads)
}

/// Trainable-scalar count of a grid-free sine MLP of `width` and `levels` layers with one head.
pub fn mlp_param_count(input_dims: usize, output_dims: usize, levels: usize, width: usize) -> usize {
    (input_dims * width + width) + (levels - 1) * (width * width + width) + output_dims * width + output_dims
}

/// Width of the grid-free MLP whose parameter count is closest to the full model.
pub fn matched_mlp_width(config: &FilterBankConfig) -> Result<usize> {
    let target = full_param_count(config)?;
    let count = |w| mlp_param_count(config.input_dims, config.output_dims, config.levels, w);
    let mut best = 1;
    let mut w = 1;
    while count(w) <= target.saturating_mul(2) && w < 1 << 20 {
        if count(w).abs_diff(target) < count(best).abs_diff(target) {
            best = w;
        }
        w += 1;
    }
    let got = count(best);
    if got.abs_diff(target) as f64 > 0.05 * target as f64 {
        return config_err(format!(
            "no MLP width matches {target} parameters within 5% ({got} at width {best})"
        ));
    }
    Ok(best)
}

fn uniform<R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

struct Builder<'a, T: Real> {
    params: ModelParams<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn push(&mut self, name: String, rows: usize, cols: usize, values: Vec<f64>) -> ParamId {
        self.params
            .push(name, rows, cols, values.into_iter().map(T::of).collect())
    }

    fn uniform(&mut self, name: String, rows: usize, cols: usize, bound: f64) -> ParamId {
        let v = uniform(self.rng, rows * cols, bound);
        self.push(name, rows, cols, v)
    }

    fn dense(&mut self, name: &str, rows: usize, cols: usize, w_bound: f64) -> Dense {
        let w = self.uniform(format!("{name}.w"), rows, cols, w_bound);
        let b = self.uniform(format!("{name}.b"), rows, 1, 1.0 / (cols as f64).sqrt());
        Dense { w, b }
    }

    fn tables(&mut self, grids: &[GridLevel]) -> Vec<ParamId> {
        grids
            .iter()
            .enumerate()
            .map(|(i, g)| self.uniform(format!("table.{i}"), g.rows, g.features(), TABLE_INIT_RANGE))
            .collect()
    }

    fn freqs(&mut self, config: &FilterBankConfig) -> Result<Vec<ParamId>> {
        (0..config.levels)
            .map(|i| {
                let layer = init_fourier::<f64, _>(
                    i,
                    config.width,
                    config.features,
                    config.sigma_min,
                    config.c_f,
                    self.rng,
                )?;
                Ok(self.push(format!("freq.{i}"), config.width, config.features, layer.freq.data))
            })
            .collect()
    }

    fn sine_layers(&mut self, config: &FilterBankConfig, width: usize) -> Vec<Dense> {
        (0..config.levels)
            .map(|i| {
                if i == 0 {
                    let fan_in = config.input_dims;
                    self.dense("layer.0", width, fan_in, 1.0 / fan_in as f64)
                } else {
                    let bound = (6.0 / width as f64).sqrt() / config.alpha_of(i);
                    self.dense(&format!("layer.{i}"), width, width, bound)
                }
            })
            .collect()
    }
}

impl<T: Real> FilterBank<T> {
    pub fn build(config: &FilterBankConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let width = match variant {
            Variant::OnlyMlp => matched_mlp_width(config)?,
            _ => config.width,
        };
        let grids = match variant {
            Variant::OnlyMlp => Vec::new(),
            _ => (0..config.levels)
                .map(|l| GridLevel::new(config.grid_config(l)))
                .collect::<Result<Vec<_>>>()?,
        };
        let mut b = Builder {
            params: ModelParams::new(),
            rng: &mut rng,
        };
        let mut layout = Layout::default();
        let head_bound = 1.0 / (width as f64).sqrt();
        let d_out = config.output_dims;
        match variant {
            Variant::Full => {
                layout.tables = b.tables(&grids);
                layout.freqs = b.freqs(config)?;
                layout.layers = b.sine_layers(config, width);
                layout.heads = (0..config.levels)
                    .map(|i| b.dense(&format!("head.{i}"), d_out, width, head_bound))
                    .collect();
            }
            Variant::OnlyGrid | Variant::GridFf => {
                layout.tables = b.tables(&grids);
                if variant == Variant::OnlyGrid {
                    let bound = 1.0 / (config.features as f64).sqrt();
                    layout.lifts = (0..config.levels)
                        .map(|i| b.uniform(format!("lift.{i}"), width, config.features, bound))
                        .collect();
                } else {
                    layout.freqs = b.freqs(config)?;
                }
                let concat = config.levels * width;
                layout.mlp_hidden = Some(b.dense("mlp.hidden", width, concat, 1.0 / (concat as f64).sqrt()));
                layout.mlp_out = Some(b.dense("mlp.out", d_out, width, head_bound));
            }
            Variant::OnlyMlp => {
                layout.layers = b.sine_layers(config, width);
                layout.heads = vec![b.dense("head.0", d_out, width, head_bound)];
            }
        }
        let params = b.params;
        Ok(Self {
            config: config.clone(),
            variant,
            width,
            grids,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &FilterBankConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Hidden width actually used (differs from the config for `only_mlp`).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grids(&self) -> &[GridLevel] {
        &self.grids
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Replaces all parameter values; the length must match.
    pub fn set_param_values(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.params.len() {
            return config_err(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            ));
        }
        self.params.as_mut_slice().copy_from_slice(values);
        Ok(())
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> FilterBank<U> {
        FilterBank {
            config: self.config.clone(),
            variant: self.variant,
            width: self.width,
            grids: self.grids.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    pub fn head_ids(&self) -> Vec<(ParamId, ParamId)> {
        self.layout.heads.iter().map(|d| (d.w, d.b)).collect()
    }

    pub fn table_ids(&self) -> &[ParamId] {
        &self.layout.tables
    }

    /// Records the forward pass of the points in `x` (`batch x input_dims`, in `[0,1]`).
    pub fn record(&self, tape: &mut Tape<'_, T>, x: ValueId) -> Result<Recorded> {
        let cols = tape.value(x).cols;
        if cols != self.config.input_dims {
            return config_err(format!(
                "model expects {}-D inputs, got {}",
                self.config.input_dims, cols
            ));
        }
        let l = &self.layout;
        match self.variant {
            Variant::Full => {
                let mut hidden = Vec::with_capacity(self.config.levels);
                let mut level_outputs = Vec::with_capacity(self.config.levels);
                let mut prev = x;
                for i in 0..self.config.levels {
                    let f = tape.sine_affine(prev, l.layers[i].w, Some(l.layers[i].b), T::of(self.config.alpha_of(i)))?;
                    let v = tape.interpolate(x, &self.grids[i], l.tables[i])?;
                    let g = tape.fourier_add(f, v, l.freqs[i])?;
                    let o = tape.affine(g, l.heads[i].w, Some(l.heads[i].b), T::one())?;
                    hidden.push(f);
                    level_outputs.push(o);
                    prev = g;
                }
                let output = tape.sum(&level_outputs)?;
                Ok(Recorded {
                    output,
                    level_outputs,
                    hidden,
                })
            }
            Variant::OnlyGrid | Variant::GridFf => {
                let mut parts = Vec::with_capacity(self.config.levels);
                for i in 0..self.config.levels {
                    let v = tape.interpolate(x, &self.grids[i], l.tables[i])?;
                    let e = if self.variant == Variant::OnlyGrid {
                        tape.affine(v, l.lifts[i], None, T::one())?
                    } else {
                        tape.fourier(v, l.freqs[i])?
                    };
                    parts.push(e);
                }
                let cat = tape.concat(&parts)?;
                let (h, o) = (l.mlp_hidden.expect("grid head"), l.mlp_out.expect("grid head"));
                let z = tape.affine(cat, h.w, Some(h.b), T::one())?;
                let a = tape.relu(z);
                let output = tape.affine(a, o.w, Some(o.b), T::one())?;
                Ok(Recorded {
                    output,
                    level_outputs: Vec::new(),
                    hidden: Vec::new(),
                })
            }
            Variant::OnlyMlp => {
                let mut hidden = Vec::with_capacity(self.config.levels);
                let mut prev = x;
                for (i, layer) in l.layers.iter().enumerate() {
                    prev = tape.sine_affine(prev, layer.w, Some(layer.b), T::of(self.config.alpha_of(i)))?;
                    hidden.push(prev);
                }
                let output = tape.affine(prev, l.heads[0].w, Some(l.heads[0].b), T::one())?;
                Ok(Recorded {
                    output,
                    level_outputs: Vec::new(),
                    hidden,
                })
            }
        }
    }

    /// Field value and per-level outputs at a single point.
    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, Vec<Vec<T>>)> {
        let (out, levels, _) = self.forward_full(&Matrix::from_vec(1, x.len(), x.to_vec()))?;
        Ok((out.data, levels.into_iter().map(|m| m.data).collect()))
    }

    /// Field values of a batch, evaluated in one recorded pass.
    pub fn forward_batch(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward_full(x)?.0)
    }

    /// Output, per-level outputs and hidden sine activations of a batch.
    pub fn forward_full(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<Matrix<T>>, Vec<Matrix<T>>)> {
        let mut tape = Tape::new(&self.params);
        let xi = tape.input(x.clone());
        let rec = self.record(&mut tape, xi)?;
        let out = tape.take_value(rec.output);
        let levels = rec.level_outputs.iter().map(|&id| tape.take_value(id)).collect();
        let hidden = rec.hidden.iter().map(|&id| tape.take_value(id)).collect();
        Ok((out, levels, hidden))
    }

    /// Field values of an arbitrarily large batch, chunked and evaluated in parallel.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let chunks = chunk_bounds(x.rows, DEFAULT_CHUNK_ROWS);
        let parts: Vec<Result<Matrix<T>>> = parallel::install(|| {
            chunks
                .par_iter()
                .map(|&(s, e)| self.forward_batch(&x.slice_rows(s, e)))
                .collect()
        });
        let mut out = Matrix::zeros(0, self.config.output_dims);
        for p in parts {
            out.data.extend(p?.data);
        }
        out.rows = x.rows;
        Ok(out)
    }

    /// Per-level outputs `o_i` of a large batch (full variant only).
    pub fn predict_levels(&self, x: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        if self.variant != Variant::Full {
            return config_err(format!("per-level outputs need the full model, not {}", self.variant));
        }
        let chunks = chunk_bounds(x.rows, DEFAULT_CHUNK_ROWS);
        let parts: Vec<Result<Vec<Matrix<T>>>> = parallel::install(|| {
            chunks
                .par_iter()
                .map(|&(s, e)| Ok(self.forward_full(&x.slice_rows(s, e))?.1))
                .collect()
        });
        let d = self.config.output_dims;
        let mut levels: Vec<Matrix<T>> = (0..self.config.levels).map(|_| Matrix::zeros(0, d)).collect();
        for p in parts {
            for (acc, m) in levels.iter_mut().zip(p?) {
                acc.data.extend(m.data);
            }
        }
        for m in &mut levels {
            m.rows = x.rows;
        }
        Ok(levels)
    }

    /// Loss and its gradient over the flat parameters for one batch.
    ///
    /// The batch is split into fixed chunks of `chunk_rows`; chunk gradients
    /// are reduced in chunk order, so the result does not depend on the
    /// number of worker threads.
    pub fn loss_and_grad(
        &self,
        x: &Matrix<T>,
        target: &Matrix<T>,
        objective: Objective,
        chunk_rows: usize,
    ) -> Result<(T, Vec<T>)> {
        if x.rows == 0 {
            return Err(NffbError::Input("loss over an empty batch".into()));
        }
        if target.rows != x.rows || target.cols != self.config.output_dims {
            return config_err("target shape does not match batch and output dimension");
        }
        let n = T::of(x.rows as f64);
        let chunks = chunk_bounds(x.rows, chunk_rows.max(1));
        let parts: Vec<Result<(T, Vec<T>)>> = parallel::install(|| {
            chunks
                .par_iter()
                .map(|&(s, e)| {
                    let weight = T::of((e - s) as f64) / n;
                    let mut tape = Tape::new(&self.params);
                    let xi = tape.input(x.slice_rows(s, e));
                    let rec = self.record(&mut tape, xi)?;
                    let t = target.slice_rows(s, e);
                    let loss = match objective {
                        Objective::Mse => tape.mse_loss(rec.output, &t)?,
                        Objective::MapeSq { eps } => tape.mape_sq_loss(rec.output, &t, T::of(eps))?,
                    };
                    let grads = tape.backward(weight)?;
                    Ok((loss * weight, grads))
                })
                .collect()
        });
        let mut total = T::zero();
        let mut grads = vec![T::zero(); self.params.len()];
        for p in parts {
            let (l, g) = p?;
            total += l;
            for (a, b) in grads.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok((total, grads))
    }

    /// Loss only, with the same chunking as [`loss_and_grad`](Self::loss_and_grad).
    pub fn loss(&self, x: &Matrix<T>, target: &Matrix<T>, objective: Objective) -> Result<T> {
        let y = self.forward_batch(x)?;
        let mut tape = Tape::new(&self.params);
        let yi = tape.input(y);
        match objective {
            Objective::Mse => tape.mse_loss(yi, target),
            Objective::MapeSq { eps } => tape.mape_sq_loss(yi, target, T::of(eps)),
        }
    }
}

pub(crate) fn chunk_bounds(rows: usize, chunk: usize) -> Vec<(usize, usize)> {
    (0..rows).step_by(chunk.max(1)).map(|s| (s, (s + chunk).min(rows))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn tiny(levels: usize, width: usize) -> FilterBankConfig {
        FilterBankConfig {
            input_dims: 2,
            output_dims: 3,
            levels,
            width,
            alpha: 10.0,
            layer_alphas: None,
            n_min: 4,
            c_g: 1.5,
            table_cap: 64,
            features: 2,
            sigma_min: 1.0,
            c_f: 1.5,
            seed: 7,
        }
    }

    fn points(n: usize, dims: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, dims, (0..n * dims).map(|_| rng.random_range(0.0..=1.0)).collect())
    }

    #[test]
    fn build_is_deterministic_for_all_variants() {
        for v in Variant::ALL {
            let a: FilterBank<f32> = make_variant(&tiny(3, 8), v).unwrap();
            let b: FilterBank<f32> = make_variant(&tiny(3, 8), v).unwrap();
            assert_eq!(a.params(), b.params(), "{v}");
        }
        let mut other = tiny(3, 8);
        other.seed = 8;
        let a: FilterBank<f32> = make_variant(&tiny(3, 8), Variant::Full).unwrap();
        let c: FilterBank<f32> = make_variant(&other, Variant::Full).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("siren".parse::<Variant>(), Err(NffbError::Config(_))));
    }

    #[test]
    fn param_count_matches_formula() {
        let cfg = FilterBankConfig {
            input_dims: 3,
            output_dims: 1,
            levels: 5,
            width: 256,
            alpha: 45.0,
            n_min: 8,
            c_g: 1.3,
            table_cap: 1 << 19,
            sigma_min: 5.0,
            c_f: 1.2,
            ..FilterBankConfig::default()
        };
        let model: FilterBank<f32> = FilterBank::build(&cfg, Variant::Full).unwrap();
        let rows: usize = [8u32, 10, 13, 17, 22].iter().map(|&r| (r as usize + 1).pow(3)).sum();
        let expected = rows * 2 + 5 * 256 * 2 + (3 * 256 + 256) + 4 * (256 * 256 + 256) + 5 * (256 + 1);
        assert_eq!(model.param_count(), expected);
        assert_eq!(full_param_count(&cfg).unwrap(), expected);
    }

    #[test]
    fn only_mlp_matches_parameter_budget() {
        for cfg in [tiny(3, 8), FilterBankConfig { levels: 6, width: 64, table_cap: 1 << 14, n_min: 16, ..FilterBankConfig::default() }] {
            let full: FilterBank<f32> = make_variant(&cfg, Variant::Full).unwrap();
            let mlp: FilterBank<f32> = make_variant(&cfg, Variant::OnlyMlp).unwrap();
            let ratio = mlp.param_count() as f64 / full.param_count() as f64;
            assert!((ratio - 1.0).abs() <= 0.05, "ratio {ratio}");
            assert!(mlp.width() > cfg.width);
        }
    }

    #[test]
    fn hidden_init_shrinks_with_alpha() {
        let max_abs = |alpha: f64| {
            let cfg = FilterBankConfig { alpha, ..tiny(2, 32) };
            let m: FilterBank<f64> = FilterBank::build(&cfg, Variant::Full).unwrap();
            let id = m.params().find("layer.1.w").unwrap();
            m.params().values(id).iter().fold(0.0f64, |a, v| a.max(v.abs()))
        };
        let bound = |alpha: f64| (6.0f64 / 32.0).sqrt() / alpha;
        assert!(max_abs(10.0) <= bound(10.0) && max_abs(10.0) > 0.8 * bound(10.0));
        assert!(max_abs(100.0) <= bound(100.0) && max_abs(100.0) > 0.8 * bound(100.0));
    }

    #[test]
    fn zero_heads_give_zero_field() {
        let mut m: FilterBank<f64> = FilterBank::build(&tiny(3, 8), Variant::Full).unwrap();
        for (w, b) in m.head_ids() {
            m.params_mut().values_mut(w).fill(0.0);
            m.params_mut().values_mut(b).fill(0.0);
        }
        let y = m.forward_batch(&points(20, 2, 1)).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_tables_reduce_to_sine_mlp() {
        let mut m: FilterBank<f64> = FilterBank::build(&tiny(2, 4), Variant::Full).unwrap();
        for id in m.table_ids().to_vec() {
            m.params_mut().values_mut(id).fill(0.0);
        }
        let x = [0.3, 0.8];
        let (y, _) = m.forward(&x).unwrap();
        // reference: plain sine MLP with summed heads
        let p = m.params();
        let mat = |n: &str| p.matrix(p.find(n).unwrap());
        let vecv = |n: &str| p.values(p.find(n).unwrap()).to_vec();
        let mut prev = x.to_vec();
        let mut total = vec![0.0; 3];
        for i in 0..2 {
            let w = mat(&format!("layer.{i}.w"));
            let z = crate::math::affine(&prev, &w, &vec![0.0; w.rows]).unwrap();
            let b = vecv(&format!("layer.{i}.b"));
            let f: Vec<f64> = z.iter().zip(&b).map(|(z, b)| (10.0 * z + b).sin()).collect();
            let o = crate::math::affine(&f, &mat(&format!("head.{i}.w")), &vecv(&format!("head.{i}.b"))).unwrap();
            for (t, v) in total.iter_mut().zip(o) {
                *t += v;
            }
            prev = f;
        }
        for (a, b) in y.iter().zip(&total) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_single_unit() {
        // One layer, one hidden unit; the second input column carries zero weight.
        let cfg = FilterBankConfig {
            output_dims: 1,
            levels: 1,
            width: 1,
            alpha: 2.0,
            n_min: 1,
            ..tiny(1, 1)
        };
        let mut m: FilterBank<f64> = FilterBank::build(&cfg, Variant::Full).unwrap();
        let set = |m: &mut FilterBank<f64>, name: &str, v: &[f64]| {
            let id = m.params().find(name).unwrap();
            m.params_mut().values_mut(id).copy_from_slice(v);
        };
        // resolution 1: four dense vertices (0,0),(1,0),(0,1),(1,1)
        set(&mut m, "table.0", &[0.0, 0.0, 0.4, -0.2, 0.0, 0.0, 0.4, -0.2]);
        set(&mut m, "freq.0", &[0.5, 0.25]);
        set(&mut m, "layer.0.w", &[0.3, 0.0]);
        set(&mut m, "layer.0.b", &[0.1]);
        set(&mut m, "head.0.w", &[1.5]);
        set(&mut m, "head.0.b", &[-0.25]);
        let x = 0.5;
        let f = (2.0 * 0.3 * x + 0.1f64).sin();
        let v = [0.4 * x, -0.2 * x];
        let gamma = (std::f64::consts::TAU * (0.5 * v[0] + 0.25 * v[1])).sin();
        let expected = 1.5 * (f + gamma) - 0.25;
        let (y, levels) = m.forward(&[x, 0.9]).unwrap();
        assert!((y[0] - expected).abs() < 1e-12);
        assert_eq!(levels[0], y);
    }

    #[test]
    fn batch_of_one_and_permutation() {
        let m: FilterBank<f32> = FilterBank::build(&tiny(3, 8), Variant::Full).unwrap();
        let x: Matrix<f32> = points(16, 2, 3).cast();
        let y = m.forward_batch(&x).unwrap();
        for r in 0..16 {
            let (one, _) = m.forward(x.row(r)).unwrap();
            assert_eq!(one.as_slice(), y.row(r));
        }
        let perm: Vec<usize> = (0..16).rev().collect();
        let yp = m.forward_batch(&x.select_rows(&perm)).unwrap();
        assert_eq!(yp, y.select_rows(&perm));
        assert_eq!(m.predict(&x).unwrap(), y);
    }

    #[test]
    fn out_of_domain_is_an_input_error() {
        let m: FilterBank<f64> = FilterBank::build(&tiny(2, 4), Variant::Full).unwrap();
        assert!(matches!(m.forward(&[1.2, 0.5]), Err(NffbError::Input(_))));
    }

    #[test]
    fn grid_variants_with_zero_tables_are_constant() {
        for v in [Variant::OnlyGrid, Variant::GridFf] {
            let mut m: FilterBank<f64> = make_variant(&tiny(3, 8), v).unwrap();
            for id in m.table_ids().to_vec() {
                m.params_mut().values_mut(id).fill(0.0);
            }
            let y = m.forward_batch(&points(10, 2, 4)).unwrap();
            for r in 1..10 {
                assert_eq!(y.row(r), y.row(0), "{v}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = FilterBankConfig {
            levels: 3,
            width: 12,
            n_min: 3,
            table_cap: 128,
            ..tiny(3, 12)
        };
        let mut m: FilterBank<f64> = FilterBank::build(&cfg, Variant::Full).unwrap();
        // larger table values exercise the Fourier path
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for id in m.table_ids().to_vec() {
            for v in m.params_mut().values_mut(id) {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let x = points(6, 2, 5);
        let y = points(6, 3, 6);
        let (_, grads) = m.loss_and_grad(&x, &y, Objective::Mse, 4).unwrap();
        let n = m.param_count();
        assert!(n >= 500, "{n}");
        let picks: Vec<usize> = (0..600).map(|_| rng.random_range(0..n)).collect();
        let h = 1e-5;
        for &k in &picks {
            let orig = m.params().as_slice()[k];
            m.params_mut().as_mut_slice()[k] = orig + h;
            let lp = m.loss(&x, &y, Objective::Mse).unwrap();
            m.params_mut().as_mut_slice()[k] = orig - h;
            let lm = m.loss(&x, &y, Objective::Mse).unwrap();
            m.params_mut().as_mut_slice()[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = grads[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7);
            assert!(rel < 1e-5, "param {k}: analytic {a}, fd {fd}");
        }
    }

    #[test]
    fn relative_loss_gradients_match_finite_differences() {
        let cfg = FilterBankConfig {
            input_dims: 3,
            output_dims: 1,
            levels: 3,
            width: 8,
            n_min: 2,
            table_cap: 64,
            alpha: 45.0,
            ..tiny(3, 8)
        };
        let mut m: FilterBank<f64> = FilterBank::build(&cfg, Variant::Full).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for id in m.table_ids().to_vec() {
            for v in m.params_mut().values_mut(id) {
                *v = rng.random_range(-0.05..0.05);
            }
        }
        let x = points(12, 3, 1);
        let mut y = Matrix::from_vec(12, 1, (0..12).map(|_| rng.random_range(-0.3..0.3)).collect());
        y.data[0] = 0.0;
        let objective = Objective::MapeSq { eps: 0.01 };
        let (_, grads) = m.loss_and_grad(&x, &y, objective, 5).unwrap();
        let h = 1e-6;
        for k in 0..m.param_count() {
            let orig = m.params().as_slice()[k];
            m.params_mut().as_mut_slice()[k] = orig + h;
            let lp = m.loss(&x, &y, objective).unwrap();
            m.params_mut().as_mut_slice()[k] = orig - h;
            let lm = m.loss(&x, &y, objective).unwrap();
            m.params_mut().as_mut_slice()[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = grads[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-5, "param {k} {:?}: analytic {a}, fd {fd}", m.params().locate(k));
        }
    }

    #[test]
    fn chunking_does_not_change_the_loss() {
        let m: FilterBank<f64> = FilterBank::build(&tiny(2, 8), Variant::Full).unwrap();
        let x = points(10, 2, 8);
        let y = points(10, 3, 9);
        let (l1, g1) = m.loss_and_grad(&x, &y, Objective::Mse, 10).unwrap();
        let (l3, g3) = m.loss_and_grad(&x, &y, Objective::Mse, 3).unwrap();
        assert!((l1 - l3).abs() < 1e-14);
        assert!((l1 - m.loss(&x, &y, Objective::Mse).unwrap()).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g3) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn structural_invariants(px in 0.0f64..=1.0, py in 0.0f64..=1.0, c in -3.0f64..3.0, zero in 0usize..3) {
            let mut m: FilterBank<f64> = FilterBank::build(&tiny(3, 8), Variant::Full).unwrap();
            let x = Matrix::from_vec(1, 2, vec![px, py]);
            let (y, levels, hidden) = m.forward_full(&x).unwrap();
            for f in &hidden {
                prop_assert!(f.data.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
            // decomposition identity in the same accumulation order
            let mut acc = levels[0].data.clone();
            for o in &levels[1..] {
                for (a, b) in acc.iter_mut().zip(&o.data) {
                    *a += *b;
                }
            }
            prop_assert_eq!(&acc, &y.data);

            let (w0, b0) = m.head_ids()[zero];
            let mut ablated = m.clone();
            ablated.params_mut().values_mut(w0).fill(0.0);
            ablated.params_mut().values_mut(b0).fill(0.0);
            let ya = ablated.forward_batch(&x).unwrap();
            for ((a, full), o) in ya.data.iter().zip(&y.data).zip(&levels[zero].data) {
                prop_assert!((full - a - o).abs() <= 1e-12 * (1.0 + full.abs()));
            }

            for (w, b) in m.head_ids() {
                m.params_mut().values_mut(w).iter_mut().for_each(|v| *v *= c);
                m.params_mut().values_mut(b).iter_mut().for_each(|v| *v *= c);
            }
            let ys = m.forward_batch(&x).unwrap();
            for (s, v) in ys.data.iter().zip(&y.data) {
                prop_assert!((s - c * v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }
    }
}
