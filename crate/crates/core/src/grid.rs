//! Multi-resolution feature grids with spatial hashing and n-linear interpolation.

use crate::error::{config_err, input_err, Result};
use crate::real::{Matrix, Real};

/// Per-dimension primes of the spatial hash. The first is 1 so that the
/// x coordinate passes through unchanged.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Number of grid dimensions supported (2D images, 3D volumes).
pub const MAX_DIMS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexMode {
    /// Injective row-major addressing; used when every vertex fits in the table.
    Dense,
    /// Spatial hash modulo the table size.
    Hashed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridLevelConfig {
    pub level: usize,
    pub base_resolution: u32,
    pub growth: f64,
    /// Global table capacity; a power of two.
    pub table_cap: usize,
    pub features: usize,
    pub dims: usize,
}

/// `floor(base * growth^level)`.
///
/// A 1e-9 guard absorbs representation error when the product is an exact
/// integer (e.g. `10 * 1.1^2`).
pub fn level_resolution(level: usize, base: u32, growth: f64) -> u32 {
    let exact = base as f64 * growth.powi(level as i32);
    (exact + 1e-9).floor() as u32
}

/// Lower cell vertex and interpolation weights of `x` on a grid of resolution `resolution`.
///
/// The lower vertex is clamped to `resolution - 1` so the upper vertex stays
/// on the grid; at `x = 1` this yields weight 1 toward the last vertex.
pub fn corner_coords<T: Real>(x: &[T], resolution: u32) -> Result<(Vec<u32>, Vec<T>)> {
    let mut lower = vec![0u32; x.len()];
    let mut weights = vec![T::zero(); x.len()];
    for (d, &xd) in x.iter().enumerate() {
        if !(xd >= T::zero() && xd <= T::one()) {
            return input_err(format!("coordinate {} = {} outside [0, 1]", d, xd));
        }
        let (l, w) = cell_position(xd, resolution);
        lower[d] = l;
        weights[d] = w;
    }
    Ok((lower, weights))
}

#[inline]
fn cell_position<T: Real>(xd: T, resolution: u32) -> (u32, T) {
    let scaled = xd * T::of(resolution as f64);
    let floor = scaled.floor().to_u32().unwrap_or(0);
    let lower = floor.min(resolution.saturating_sub(1));
    let w = scaled - T::of(lower as f64);
    (lower, w.max(T::zero()).min(T::one()))
}

/// Table row of integer vertex `vertex`.
///
/// Hashed mode XORs `vertex[i] * HASH_PRIMES[i]` in wrapping 32-bit arithmetic
/// and reduces modulo `rows`. Dense mode uses `sum_i vertex[i] * (resolution + 1)^i`.
pub fn hash_vertex(vertex: &[u32], rows: usize, mode: IndexMode, resolution: u32) -> usize {
    match mode {
        IndexMode::Hashed => {
            let mut h = 0u32;
            for (d, &v) in vertex.iter().enumerate() {
                h ^= v.wrapping_mul(HASH_PRIMES[d]);
            }
            (h as u64 % rows as u64) as usize
        }
        IndexMode::Dense => {
            let stride = resolution as usize + 1;
            let mut idx = 0usize;
            let mut scale = 1usize;
            for &v in vertex {
                idx += v as usize * scale;
                scale *= stride;
            }
            idx
        }
    }
}

/// One resolution level. The feature table itself lives in the model's
/// parameter store; this records how vertices map onto its rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GridLevel {
    pub config: GridLevelConfig,
    pub resolution: u32,
    pub mode: IndexMode,
    /// Rows actually allocated: `min(table_cap, (resolution + 1)^dims)`.
    pub rows: usize,
}

impl GridLevel {
    pub fn new(config: GridLevelConfig) -> Result<Self> {
        if !(2..=MAX_DIMS).contains(&config.dims) {
            return config_err(format!("grid dimension must be 2 or 3, got {}", config.dims));
        }
        if config.features == 0 {
            return config_err("grid feature dimension must be at least 1");
        }
        if config.base_resolution == 0 {
            return config_err("base resolution must be at least 1");
        }
        if !(config.growth >= 1.0) || !config.growth.is_finite() {
            return config_err(format!("grid growth factor must be >= 1, got {}", config.growth));
        }
        if !config.table_cap.is_power_of_two() {
            return config_err(format!("table size {} is not a power of two", config.table_cap));
        }
        let resolution = level_resolution(config.level, config.base_resolution, config.growth);
        if resolution == 0 || resolution > (1 << 24) {
            return config_err(format!("level {} resolution {} out of range", config.level, resolution));
        }
        let vertices = (resolution as u128 + 1).pow(config.dims as u32);
        let (mode, rows) = if vertices <= config.table_cap as u128 {
            (IndexMode::Dense, vertices as usize)
        } else {
            (IndexMode::Hashed, config.table_cap)
        };
        Ok(Self {
            config,
            resolution,
            mode,
            rows,
        })
    }

    pub fn dims(&self) -> usize {
        self.config.dims
    }

    pub fn features(&self) -> usize {
        self.config.features
    }

    pub fn corners(&self) -> usize {
        1 << self.config.dims
    }

    pub fn vertex_row(&self, vertex: &[u32]) -> usize {
        hash_vertex(vertex, self.rows, self.mode, self.resolution)
    }

    /// Table rows and weights of the `2^n` cell corners of every point.
    pub fn gather<T: Real>(&self, points: &Matrix<T>) -> Result<CornerSet<T>> {
        let dims = self.dims();
        if points.cols != dims {
            return config_err(format!("grid expects {}-D points, got {}", dims, points.cols));
        }
        let corners = self.corners();
        let mut rows = Vec::with_capacity(points.rows * corners);
        let mut weights = Vec::with_capacity(points.rows * corners);
        let mut lower = [0u32; MAX_DIMS];
        let mut frac = [T::zero(); MAX_DIMS];
        let mut vertex = [0u32; MAX_DIMS];
        for r in 0..points.rows {
            for (d, &xd) in points.row(r).iter().enumerate() {
                if !(xd >= T::zero() && xd <= T::one()) {
                    return input_err(format!("point {} coordinate {} = {} outside [0, 1]", r, d, xd));
                }
                let (l, w) = cell_position(xd, self.resolution);
                lower[d] = l;
                frac[d] = w;
            }
            for c in 0..corners {
                let mut w = T::one();
                for d in 0..dims {
                    if c >> d & 1 == 1 {
                        vertex[d] = lower[d] + 1;
                        w *= frac[d];
                    } else {
                        vertex[d] = lower[d];
                        w *= T::one() - frac[d];
                    }
                }
                rows.push(self.vertex_row(&vertex[..dims]) as u32);
                weights.push(w);
            }
        }
        Ok(CornerSet {
            points: points.rows,
            corners,
            rows,
            weights,
        })
    }
}

/// Saved corner addressing of one interpolation, reused by the backward pass.
#[derive(Clone, Debug)]
pub struct CornerSet<T> {
    pub points: usize,
    pub corners: usize,
    pub rows: Vec<u32>,
    pub weights: Vec<T>,
}

impl<T: Real> CornerSet<T> {
    /// Weighted sum of corner features; `table` is `rows x features` row-major.
    pub fn interpolate(&self, table: &[T], features: usize) -> Matrix<T> {
        let mut out = Matrix::zeros(self.points, features);
        for p in 0..self.points {
            let dst = out.row_mut(p);
            for c in 0..self.corners {
                let k = p * self.corners + c;
                let w = self.weights[k];
                let row = self.rows[k] as usize * features;
                for (o, &t) in dst.iter_mut().zip(&table[row..row + features]) {
                    *o += w * t;
                }
            }
        }
        out
    }

    /// Scatters `upstream` (points x features) into the table gradient in corner order.
    pub fn scatter(&self, upstream: &Matrix<T>, grad_table: &mut [T]) {
        let features = upstream.cols;
        for p in 0..self.points {
            let up = upstream.row(p);
            for c in 0..self.corners {
                let k = p * self.corners + c;
                let w = self.weights[k];
                let row = self.rows[k] as usize * features;
                for (g, &u) in grad_table[row..row + features].iter_mut().zip(up) {
                    *g += w * u;
                }
            }
        }
    }
}

/// Interpolated feature vector of a single point.
pub fn interpolate<T: Real>(x: &[T], level: &GridLevel, table: &[T]) -> Result<Vec<T>> {
    let points = Matrix::from_vec(1, x.len(), x.to_vec());
    let set = level.gather(&points)?;
    Ok(set.interpolate(table, level.features()).data)
}

/// Sparse table-gradient contributions `(row, weight * upstream)` of one point,
/// with colliding corners merged additively.
pub fn interpolate_backward<T: Real>(x: &[T], level: &GridLevel, upstream: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
    let points = Matrix::from_vec(1, x.len(), x.to_vec());
    let set = level.gather(&points)?;
    let mut out: Vec<(usize, Vec<T>)> = Vec::new();
    for c in 0..set.corners {
        let row = set.rows[c] as usize;
        let w = set.weights[c];
        let contrib: Vec<T> = upstream.iter().map(|&u| w * u).collect();
        match out.iter_mut().find(|(r, _)| *r == row) {
            Some((_, acc)) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
            None => out.push((row, contrib)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn level(dims: usize, base: u32, cap: usize) -> GridLevel {
        GridLevel::new(GridLevelConfig {
            level: 0,
            base_resolution: base,
            growth: 1.5,
            table_cap: cap,
            features: 2,
            dims,
        })
        .unwrap()
    }

    #[test]
    fn resolution_schedule() {
        assert_eq!(level_resolution(0, 37, 1.7), 37);
        assert_eq!(level_resolution(3, 64, 2.0), 512);
        // 8 * 1.3^4 = 22.8488
        assert_eq!(level_resolution(4, 8, 1.3), 22);
    }

    #[test]
    fn corner_coords_examples() {
        let (l, w) = corner_coords(&[0.0f64, 0.0], 7).unwrap();
        assert_eq!((l, w), (vec![0, 0], vec![0.0, 0.0]));
        let (l, w) = corner_coords(&[1.0f64, 1.0], 16).unwrap();
        assert_eq!((l, w), (vec![15, 15], vec![1.0, 1.0]));
        let (l, w) = corner_coords(&[0.3f64, 0.7], 10).unwrap();
        assert_eq!(l, vec![3, 7]);
        // 0.3 * 10 and 0.7 * 10 are not exact in binary floating point
        assert!(w[0].abs() < 1e-12 && w[1].abs() < 1e-12);
        assert!(corner_coords(&[1.5f64, 0.0], 4).is_err());
        assert!(corner_coords(&[f64::NAN, 0.0], 4).is_err());
    }

    #[test]
    fn hash_vectors() {
        assert_eq!(hash_vertex(&[0, 0], 1 << 19, IndexMode::Hashed, 0), 0);
        assert_eq!(hash_vertex(&[1, 0], 1 << 19, IndexMode::Hashed, 0), 1);
        assert_eq!(hash_vertex(&[1, 0], 2, IndexMode::Hashed, 0), 1);
        assert_eq!(hash_vertex(&[0, 1], 1 << 19, IndexMode::Hashed, 0), 489_905);
        // 3 * 2654435761 wraps to 3668339987 in u32
        assert_eq!(hash_vertex(&[0, 3, 0], 1 << 32, IndexMode::Hashed, 0), 3_668_339_987);
    }

    #[test]
    fn dense_mode_selection() {
        let l = level(2, 15, 256);
        assert_eq!(l.mode, IndexMode::Dense);
        assert_eq!(l.rows, 256);
        let l = level(2, 16, 256);
        assert_eq!(l.mode, IndexMode::Hashed);
        assert_eq!(l.rows, 256);
    }

    #[test]
    fn dense_indexing_is_injective() {
        for dims in [2usize, 3] {
            let l = level(dims, 6, 1 << 12);
            assert_eq!(l.mode, IndexMode::Dense);
            let n = l.resolution + 1;
            let mut seen = vec![false; l.rows];
            let total = (n as usize).pow(dims as u32);
            for flat in 0..total {
                let mut v = [0u32; 3];
                let mut rest = flat;
                for d in 0..dims {
                    v[d] = (rest % n as usize) as u32;
                    rest /= n as usize;
                }
                let row = l.vertex_row(&v[..dims]);
                assert!(row < l.rows && !seen[row]);
                seen[row] = true;
            }
        }
    }

    #[test]
    fn invalid_levels_rejected() {
        let mut cfg = level(2, 4, 64).config;
        cfg.table_cap = 100;
        assert!(GridLevel::new(cfg.clone()).is_err());
        cfg.table_cap = 64;
        cfg.dims = 4;
        assert!(GridLevel::new(cfg.clone()).is_err());
        cfg.dims = 2;
        cfg.features = 0;
        assert!(GridLevel::new(cfg).is_err());
    }

    #[test]
    fn vertex_returns_stored_feature() {
        let l = level(2, 4, 64);
        let table: Vec<f64> = (0..l.rows * 2).map(|i| i as f64 * 0.5).collect();
        let v = interpolate(&[0.25, 0.5], &l, &table).unwrap();
        let row = l.vertex_row(&[1, 2]);
        assert_eq!(v, vec![table[row * 2], table[row * 2 + 1]]);
    }

    #[test]
    fn constant_table_reproduced() {
        let l = level(3, 5, 1 << 16);
        let table = vec![0.375f64; l.rows * 2];
        for x in [[0.1, 0.2, 0.3], [0.99, 0.01, 0.5], [1.0, 1.0, 0.0]] {
            let v = interpolate(&x, &l, &table).unwrap();
            for c in v {
                assert!((c - 0.375).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bilinear_midpoint_blend() {
        let l = level(2, 4, 64);
        let mut table = vec![0.0f64; l.rows * 2];
        // cell [1,2] x [1,2]: (0,0) features at x-lower corners, (1,1) at x-upper corners
        for (vx, vy, val) in [(1, 1, 0.0), (2, 1, 1.0), (1, 2, 0.0), (2, 2, 1.0)] {
            let row = l.vertex_row(&[vx, vy]);
            table[row * 2] = val;
            table[row * 2 + 1] = val;
        }
        let x = [1.5 / 4.0, 1.5 / 4.0];
        let got = interpolate(&x, &l, &table).unwrap();
        // explicit four-corner weighted sum with w = (0.5, 0.5)
        let expected = 0.25 * 0.0 + 0.25 * 1.0 + 0.25 * 0.0 + 0.25 * 1.0;
        assert_eq!(got, vec![expected, expected]);
        assert_eq!(expected, 0.5);
    }

    #[test]
    fn backward_on_vertex_and_center() {
        let l = level(2, 4, 64);
        let up = [2.0f64, -1.0];
        let contrib = interpolate_backward(&[0.5, 0.25], &l, &up).unwrap();
        let full: Vec<_> = contrib.iter().filter(|(_, g)| g.iter().any(|v| *v != 0.0)).collect();
        assert_eq!(full.len(), 1);
        assert_eq!(full[0].1, vec![2.0, -1.0]);

        let contrib = interpolate_backward(&[1.5 / 4.0, 2.5 / 4.0], &l, &up).unwrap();
        assert_eq!(contrib.len(), 4);
        for (_, g) in contrib {
            assert_eq!(g, vec![0.5, -0.25]);
        }
    }

    #[test]
    fn colliding_corners_accumulate() {
        // table of 2 rows forces collisions among the 4 corners
        let l = GridLevel::new(GridLevelConfig {
            level: 0,
            base_resolution: 8,
            growth: 1.0,
            table_cap: 2,
            features: 1,
            dims: 2,
        })
        .unwrap();
        assert_eq!(l.mode, IndexMode::Hashed);
        let x = [0.3f64, 0.55];
        let contrib = interpolate_backward(&x, &l, &[1.0]).unwrap();
        assert!(contrib.len() < 4);
        // finite-difference oracle on each shared row
        let h = 1e-6;
        for (row, g) in contrib {
            let mut plus = vec![0.2f64, -0.7];
            let mut minus = plus.clone();
            plus[row] += h;
            minus[row] -= h;
            let fp = interpolate(&x, &l, &plus).unwrap()[0];
            let fm = interpolate(&x, &l, &minus).unwrap()[0];
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[0]).abs() < 1e-8, "row {row}: fd {fd} vs {}", g[0]);
        }
    }

    proptest! {
        #[test]
        fn weights_form_partition_of_unity(x in 0.0f64..=1.0, y in 0.0f64..=1.0, z in 0.0f64..=1.0, base in 1u32..40) {
            let l = level(3, base, 1 << 14);
            let set = l.gather(&Matrix::from_vec(1, 3, vec![x, y, z])).unwrap();
            let sum: f64 = set.weights.iter().sum();
            prop_assert!(set.weights.iter().all(|w| *w >= 0.0));
            prop_assert!((sum - 1.0).abs() <= 4.0 * f64::EPSILON);
            prop_assert!(set.rows.iter().all(|&r| (r as usize) < l.rows));
        }

        #[test]
        fn continuous_across_faces(k in 1u32..15, y in 0.0f64..1.0, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let l = level(2, 16, 1 << 10);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let table: Vec<f64> = (0..l.rows * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let face = k as f64 / l.resolution as f64;
            let delta = 1e-6;
            let a = interpolate(&[face - delta, y], &l, &table).unwrap();
            let b = interpolate(&[face + delta, y], &l, &table).unwrap();
            // Lipschitz bound: |dv/dx| <= 2 * max|table| * resolution per axis
            let bound = 2.0 * 1.0 * l.resolution as f64 * 2.0 * delta;
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= bound);
            }
        }

        #[test]
        fn hash_is_pure(a in any::<u32>(), b in any::<u32>(), c in any::<u32>()) {
            let rows = 1usize << 19;
            let h1 = hash_vertex(&[a, b, c], rows, IndexMode::Hashed, 0);
            let h2 = hash_vertex(&[a, b, c], rows, IndexMode::Hashed, 0);
            let manual = ((a ^ b.wrapping_mul(2_654_435_761) ^ c.wrapping_mul(805_459_861)) as usize) % rows;
            prop_assert_eq!(h1, h2);
            prop_assert_eq!(h1, manual);
        }
    }
}
