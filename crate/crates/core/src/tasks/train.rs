//! Optimization loop shared by all tasks.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, NffbError, Result};
use crate::filter_bank::{FilterBank, Objective, DEFAULT_CHUNK_ROWS};
use crate::math::{adam_step, lr_at_with, AdamConfig, AdamState};
use crate::real::Matrix;

/// Header of the metrics CSV.
pub const CSV_HEADER: &str = "step,loss,metric,lr,wall_seconds";

const SAMPLING_SALT: u64 = 0x5eed_5a3b_1e00_0001;

pub trait Task: Sync {
    fn objective(&self) -> Objective;
    fn input_dims(&self) -> usize;
    fn output_dims(&self) -> usize;
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<(Matrix<f32>, Matrix<f32>)>;
    /// Task metric after an update; `x`, `y` are the batch just trained on.
    fn metric(&self, model: &FilterBank<f32>, x: &Matrix<f32>, y: &Matrix<f32>) -> Result<f64>;
}

/// Batch-sampling generator of `step`: independent of the init stream and
/// of every other step, so a resumed run draws the same batches.
pub fn sampling_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SAMPLING_SALT);
    rng.set_stream(step);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    /// Total step count; training resumes from the state's step.
    pub steps: u64,
    /// A row is emitted after every step divisible by this.
    pub log_every: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub chunk_rows: usize,
    /// Report zero wall time so metrics files are reproducible byte for byte.
    pub deterministic: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            log_every: 100,
            seed: 0,
            adam: AdamConfig::default(),
            chunk_rows: DEFAULT_CHUNK_ROWS,
            deterministic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: AdamState<f32>,
    /// Number of completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(params: usize) -> Self {
        Self {
            adam: AdamState::new(params),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    /// Completed steps at the time of the row.
    pub step: u64,
    pub loss: f64,
    /// PSNR in dB for images, mean relative error for distance fields.
    pub metric: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.loss, self.metric, self.lr, self.wall_seconds
        )
    }
}

/// Runs `state.step..options.steps`, passing each logged row to `sink`.
///
/// A non-finite loss or gradient aborts with a numerics error before the
/// update, so `model` and `state` hold the last good values.
pub fn train<T, F>(
    task: &T,
    model: &mut FilterBank<f32>,
    state: &mut TrainState,
    options: &TrainOptions,
    mut sink: F,
) -> Result<()>
where
    T: Task + ?Sized,
    F: FnMut(&MetricsRow) -> Result<()>,
{
    let cfg = model.config();
    if cfg.input_dims != task.input_dims() || cfg.output_dims != task.output_dims() {
        return config_err(format!(
            "model maps {}->{} dims but the task needs {}->{}",
            cfg.input_dims,
            cfg.output_dims,
            task.input_dims(),
            task.output_dims()
        ));
    }
    if state.adam.len() != model.param_count() {
        return Err(NffbError::State(format!(
            "optimizer holds {} moments for {} parameters",
            state.adam.len(),
            model.param_count()
        )));
    }
    if options.log_every == 0 {
        return config_err("log interval must be at least 1");
    }
    let start = Instant::now();
    while state.step < options.steps {
        let step = state.step;
        let (x, y) = task.sample(&mut sampling_rng(options.seed, step))?;
        let (loss, grads) = model.loss_and_grad(&x, &y, task.objective(), options.chunk_rows)?;
        if !loss.is_finite() {
            return Err(NffbError::Numerics(format!("non-finite loss {loss} at step {step}")));
        }
        let lr = lr_at_with(step, options.adam.base_lr);
        adam_step(model.params_mut().as_mut_slice(), &grads, &mut state.adam, lr, &options.adam)?;
        state.step += 1;
        if state.step % options.log_every == 0 {
            let row = MetricsRow {
                step: state.step,
                loss: f64::from(loss),
                metric: task.metric(model, &x, &y)?,
                lr,
                wall_seconds: if options.deterministic { 0.0 } else { start.elapsed().as_secs_f64() },
            };
            sink(&row)?;
        }
    }
    Ok(())
}
