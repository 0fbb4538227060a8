//! Signed-distance regression over the cube `[-1, 1]^3`.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{config_err, input_err, NffbError, Result};
use crate::filter_bank::{FilterBank, Objective};
use crate::real::Matrix;
use crate::tasks::image::Image;
use crate::tasks::train::Task;

/// Default stability constant of the relative squared loss.
pub const DEFAULT_EPS: f64 = 0.01;
/// Default standard deviation of near-surface perturbations.
pub const DEFAULT_NEAR_SIGMA: f64 = 0.01;

const SURFACE_ATTEMPTS: usize = 10_000;

type Vec3 = [f64; 3];

fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    /// Axis-aligned box.
    Cuboid { center: Vec3, half: Vec3 },
    /// Torus around the z axis.
    Torus { center: Vec3, major: f64, minor: f64 },
    /// Union of two shapes; the distance is exact outside and a lower bound inside.
    Union(Box<Shape>, Box<Shape>),
}

impl Shape {
    pub fn sphere(radius: f64) -> Self {
        Shape::Sphere {
            center: [0.0; 3],
            radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let ok = match self {
            Shape::Sphere { radius, .. } => positive(*radius),
            Shape::Cuboid { half, .. } => half.iter().all(|&h| positive(h)),
            Shape::Torus { major, minor, .. } => positive(*major) && positive(*minor),
            Shape::Union(a, b) => {
                a.validate()?;
                b.validate()?;
                true
            }
        };
        if !ok {
            return config_err(format!("shape needs positive radii and extents: {self:?}"));
        }
        let (lo, hi) = self.bounds();
        if lo.iter().chain(&hi).any(|v| v.abs() > 1.0) {
            return config_err("shape must lie inside the cube [-1, 1]^3");
        }
        Ok(())
    }

    /// Axis-aligned bounding box.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let around = |c: Vec3, h: Vec3| (sub(c, h), add(c, h));
        match self {
            Shape::Sphere { center, radius } => around(*center, [*radius; 3]),
            Shape::Cuboid { center, half } => around(*center, *half),
            Shape::Torus { center, major, minor } => around(*center, [major + minor, major + minor, *minor]),
            Shape::Union(a, b) => {
                let (la, ha) = a.bounds();
                let (lb, hb) = b.bounds();
                (
                    std::array::from_fn(|i| la[i].min(lb[i])),
                    std::array::from_fn(|i| ha[i].max(hb[i])),
                )
            }
        }
    }

    /// Surface area; for a union, the sum of the children's areas.
    fn area(&self) -> f64 {
        match self {
            Shape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Shape::Cuboid { half: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Shape::Torus { major, minor, .. } => 4.0 * PI * PI * major * minor,
            Shape::Union(a, b) => a.area() + b.area(),
        }
    }

    /// A point distributed uniformly over the surface.
    pub fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec3> {
        match self {
            Shape::Sphere { center, radius } => loop {
                let d: Vec3 = std::array::from_fn(|_| StandardNormal.sample(rng));
                let n = norm(d);
                if n > 1e-12 {
                    return Ok(add(*center, d.map(|v| v * radius / n)));
                }
            },
            Shape::Cuboid { center, half: h } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let mut pick = rng.random::<f64>() * (areas[0] + areas[1] + areas[2]);
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = i;
                        break;
                    }
                    pick -= a;
                }
                let mut p: Vec3 = std::array::from_fn(|i| rng.random_range(-h[i]..=h[i]));
                p[axis] = if rng.random::<bool>() { h[axis] } else { -h[axis] };
                Ok(add(*center, p))
            }
            Shape::Torus { center, major, minor } => {
                let theta = rng.random::<f64>() * TAU;
                // area density is proportional to the distance from the axis
                let phi = loop {
                    let phi = rng.random::<f64>() * TAU;
                    let accept = (major + minor * phi.cos()) / (major + minor);
                    if rng.random::<f64>() < accept {
                        break phi;
                    }
                };
                let rho = major + minor * phi.cos();
                Ok(add(
                    *center,
                    [rho * theta.cos(), rho * theta.sin(), minor * phi.sin()],
                ))
            }
            Shape::Union(a, b) => {
                let share = a.area() / (a.area() + b.area());
                for _ in 0..SURFACE_ATTEMPTS {
                    let (from, other) = if rng.random::<f64>() < share { (a, b) } else { (b, a) };
                    let p = from.sample_surface(rng)?;
                    if analytic_sdf(other, p) >= 0.0 {
                        return Ok(p);
                    }
                }
                config_err("union has no visible surface")
            }
        }
    }
}

/// Signed distance from `p` to `shape`; negative inside.
pub fn analytic_sdf(shape: &Shape, p: Vec3) -> f64 {
    match shape {
        Shape::Sphere { center, radius } => norm(sub(p, *center)) - radius,
        Shape::Cuboid { center, half } => {
            let d = sub(p, *center);
            let q: Vec3 = std::array::from_fn(|i| d[i].abs() - half[i]);
            let outside = norm(q.map(|v| v.max(0.0)));
            let inside = q[0].max(q[1]).max(q[2]).min(0.0);
            outside + inside
        }
        Shape::Torus { center, major, minor } => {
            let d = sub(p, *center);
            let ring = (d[0] * d[0] + d[1] * d[1]).sqrt() - major;
            (ring * ring + d[2] * d[2]).sqrt() - minor
        }
        Shape::Union(a, b) => analytic_sdf(a, p).min(analytic_sdf(b, p)),
    }
}

/// Counts `(uniform, near, on)`: `floor(b/5)`, the remainder, and `floor(b/2)`.
pub fn split_counts(batch: usize) -> (usize, usize, usize) {
    let uniform = batch / 5;
    let on = batch / 2;
    (uniform, batch - uniform - on, on)
}

/// Externally computed `(point, sdf)` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub points: Vec<[f32; 3]>,
    pub sdf: Vec<f32>,
}

impl PointSet {
    pub fn new(points: Vec<[f32; 3]>, sdf: Vec<f32>) -> Result<Self> {
        if points.len() != sdf.len() {
            return input_err("point and distance counts differ");
        }
        if points.is_empty() {
            return input_err("point set is empty");
        }
        if points.iter().flatten().chain(&sdf).any(|v| !v.is_finite()) {
            return input_err("point set contains non-finite values");
        }
        if points.iter().flatten().any(|v| v.abs() > 1.0) {
            return input_err("point set leaves the cube [-1, 1]^3");
        }
        Ok(Self { points, sdf })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Source of training labels.
#[derive(Clone, Debug, PartialEq)]
pub enum SdfOracle {
    Analytic(Shape),
    /// Records are drawn with replacement; on-surface draws come from records
    /// with `sdf == 0`, near-surface draws from `|sdf| <= 3 * near_sigma`. An
    /// empty pool falls back to all records.
    Sampled(PointSet),
}

/// A field that can be queried at world-space points of `[-1, 1]^3`.
pub trait SdfField {
    fn sdf(&self, points: &[Vec3]) -> Result<Vec<f64>>;
}

impl SdfField for Shape {
    fn sdf(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        Ok(points.iter().map(|&p| analytic_sdf(self, p)).collect())
    }
}

impl SdfField for FilterBank<f32> {
    fn sdf(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        let x = Matrix::from_vec(
            points.len(),
            3,
            points.iter().flat_map(|p| p.map(|v| to_model(v as f32))).collect(),
        );
        Ok(self.predict(&x)?.data.into_iter().map(f64::from).collect())
    }
}

/// Maps `[-1, 1]` to the model domain `[0, 1]`.
fn to_model(v: f32) -> f32 {
    ((v + 1.0) * 0.5).clamp(0.0, 1.0)
}

#[derive(Clone, Debug)]
pub struct SdfTask {
    pub oracle: SdfOracle,
    pub batch_size: usize,
    pub near_sigma: f64,
    pub eps: f64,
    pools: Option<(Vec<usize>, Vec<usize>)>,
}

impl SdfTask {
    pub fn new(oracle: SdfOracle, batch_size: usize, near_sigma: f64, eps: f64) -> Result<Self> {
        if batch_size == 0 {
            return config_err("batch size must be at least 1");
        }
        if !(near_sigma > 0.0) || !near_sigma.is_finite() {
            return config_err(format!("near-surface sigma must be positive, got {near_sigma}"));
        }
        if !(eps > 0.0) || !eps.is_finite() {
            return config_err(format!("MAPE epsilon must be positive, got {eps}"));
        }
        let pools = match &oracle {
            SdfOracle::Analytic(shape) => {
                shape.validate()?;
                None
            }
            SdfOracle::Sampled(set) => {
                let on: Vec<usize> = (0..set.len()).filter(|&i| set.sdf[i] == 0.0).collect();
                let near: Vec<usize> = (0..set.len())
                    .filter(|&i| f64::from(set.sdf[i].abs()) <= 3.0 * near_sigma)
                    .collect();
                Some((on, near))
            }
        };
        Ok(Self {
            oracle,
            batch_size,
            near_sigma,
            eps,
            pools,
        })
    }

    /// World-space points and their labels, ordered uniform, near, on.
    pub fn sample_world(&self, rng: &mut ChaCha8Rng) -> Result<(Vec<Vec3>, Vec<f64>)> {
        let (n_uniform, n_near, n_on) = split_counts(self.batch_size);
        match &self.oracle {
            SdfOracle::Analytic(shape) => {
                let mut points = Vec::with_capacity(self.batch_size);
                for _ in 0..n_uniform {
                    points.push(std::array::from_fn(|_| rng.random_range(-1.0..=1.0)));
                }
                let noise = Normal::new(0.0, self.near_sigma).map_err(|e| NffbError::Config(e.to_string()))?;
                for _ in 0..n_near {
                    let s = shape.sample_surface(rng)?;
                    let p: Vec3 = std::array::from_fn(|i| (s[i] + noise.sample(rng)).clamp(-1.0, 1.0));
                    points.push(p);
                }
                let mut labels: Vec<f64> = points.iter().map(|&p| analytic_sdf(shape, p)).collect();
                for _ in 0..n_on {
                    points.push(shape.sample_surface(rng)?);
                    labels.push(0.0);
                }
                Ok((points, labels))
            }
            SdfOracle::Sampled(set) => {
                let (on, near) = self.pools.as_ref().expect("pools exist for sampled oracles");
                let mut idx = Vec::with_capacity(self.batch_size);
                let all = set.len();
                let mut draw = |pool: &[usize], n: usize, idx: &mut Vec<usize>| {
                    for _ in 0..n {
                        idx.push(if pool.is_empty() {
                            rng.random_range(0..all)
                        } else {
                            pool[rng.random_range(0..pool.len())]
                        });
                    }
                };
                draw(&[], n_uniform, &mut idx);
                draw(near, n_near, &mut idx);
                draw(on, n_on, &mut idx);
                Ok((
                    idx.iter().map(|&i| set.points[i].map(f64::from)).collect(),
                    idx.iter().map(|&i| f64::from(set.sdf[i])).collect(),
                ))
            }
        }
    }

    /// Model-domain inputs and labels of one batch.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng) -> Result<(Matrix<f32>, Matrix<f32>)> {
        let (points, labels) = self.sample_world(rng)?;
        let x = points.iter().flat_map(|p| p.map(|v| to_model(v as f32))).collect();
        Ok((
            Matrix::from_vec(points.len(), 3, x),
            Matrix::from_vec(labels.len(), 1, labels.into_iter().map(|v| v as f32).collect()),
        ))
    }
}

/// Mean of `|y - y_gt| / sqrt(eps + y_gt^2)`.
pub fn relative_error(pred: &[f32], target: &[f32], eps: f64) -> f64 {
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| (f64::from(p) - f64::from(t)).abs() / (eps + f64::from(t) * f64::from(t)).sqrt())
        .sum();
    total / pred.len().max(1) as f64
}

impl Task for SdfTask {
    fn objective(&self) -> Objective {
        Objective::MapeSq { eps: self.eps }
    }

    fn input_dims(&self) -> usize {
        3
    }

    fn output_dims(&self) -> usize {
        1
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<(Matrix<f32>, Matrix<f32>)> {
        self.sample_batch(rng)
    }

    fn metric(&self, model: &FilterBank<f32>, x: &Matrix<f32>, y: &Matrix<f32>) -> Result<f64> {
        Ok(relative_error(&model.predict(x)?.data, &y.data, self.eps))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdfMetrics {
    /// Median `|field|` over fresh on-surface samples.
    pub surface_median: f64,
    /// Intersection over union of the inside cells of a `K^3` grid.
    pub iou: f64,
}

/// Cell centers of a `k^3` grid over the cube, x fastest.
fn grid_centers(k: usize) -> Vec<Vec3> {
    let c = |i: usize| -1.0 + (i as f64 + 0.5) * 2.0 / k as f64;
    let mut out = Vec::with_capacity(k * k * k);
    for z in 0..k {
        for y in 0..k {
            for x in 0..k {
                out.push([c(x), c(y), c(z)]);
            }
        }
    }
    out
}

/// Surface error and sign-agreement IoU of `field` against an analytic shape.
///
/// A cell is inside when its center has a negative distance. If neither field
/// has an inside cell the IoU is 1.
pub fn sdf_eval_metrics<F: SdfField + ?Sized>(
    field: &F,
    shape: &Shape,
    n_samples: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SdfMetrics> {
    if k < 2 {
        return input_err(format!("IoU grid needs K >= 2, got {k}"));
    }
    if n_samples == 0 {
        return input_err("surface error needs at least one sample");
    }
    let surface = (0..n_samples).map(|_| shape.sample_surface(rng)).collect::<Result<Vec<_>>>()?;
    let mut err: Vec<f64> = field.sdf(&surface)?.into_iter().map(f64::abs).collect();
    err.sort_by(f64::total_cmp);
    let mid = err.len() / 2;
    let surface_median = if err.len() % 2 == 1 { err[mid] } else { 0.5 * (err[mid - 1] + err[mid]) };

    let centers = grid_centers(k);
    let pred = field.sdf(&centers)?;
    let (mut both, mut either) = (0usize, 0usize);
    for (p, c) in pred.iter().zip(&centers) {
        let a = *p < 0.0;
        let b = analytic_sdf(shape, *c) < 0.0;
        both += usize::from(a && b);
        either += usize::from(a || b);
    }
    let iou = if either == 0 { 1.0 } else { both as f64 / either as f64 };
    Ok(SdfMetrics { surface_median, iou })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceAxis {
    X,
    Y,
    Z,
}

impl SliceAxis {
    pub fn name(self) -> &'static str {
        match self {
            SliceAxis::X => "x",
            SliceAxis::Y => "y",
            SliceAxis::Z => "z",
        }
    }
}

/// Renders the plane `axis = offset` at `res x res`.
///
/// Color ramp: zero is white; negative distances fade to blue `(0, 0, 1)` and
/// positive ones to red `(1, 0, 0)`, saturating at `|d| = 0.5`. Image rows run
/// from the top (high second coordinate) down.
pub fn render_sdf_slice<F: SdfField + ?Sized>(field: &F, axis: SliceAxis, offset: f64, res: usize) -> Result<Image> {
    if res == 0 {
        return input_err("slice resolution must be positive");
    }
    let c = |i: usize| -1.0 + (i as f64 + 0.5) * 2.0 / res as f64;
    let mut points = Vec::with_capacity(res * res);
    for r in 0..res {
        let v = c(res - 1 - r);
        for col in 0..res {
            let u = c(col);
            points.push(match axis {
                SliceAxis::X => [offset, u, v],
                SliceAxis::Y => [u, offset, v],
                SliceAxis::Z => [u, v, offset],
            });
        }
    }
    let data = field
        .sdf(&points)?
        .into_iter()
        .flat_map(|d| {
            let t = (d.abs() / 0.5).min(1.0) as f32;
            if d < 0.0 {
                [1.0 - t, 1.0 - t, 1.0]
            } else {
                [1.0, 1.0 - t, 1.0 - t]
            }
        })
        .collect();
    Image::new(res, res, data)
}
