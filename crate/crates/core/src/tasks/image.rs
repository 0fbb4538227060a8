//! Image fitting with squared-error loss on sampled pixel centers.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, input_err, Result};
use crate::filter_bank::{FilterBank, Objective};
use crate::real::Matrix;
use crate::tasks::metrics::psnr;
use crate::tasks::train::Task;

/// Row-major RGB image with channel values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` interleaved values.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return input_err(format!(
                "image of {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let k = (row * self.width + col) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Copy with every channel clamped to `[0, 1]`.
    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

/// Model coordinates of pixel `(row, col)`: its center, normalized to `(0, 1)`.
pub fn pixel_coords(row: usize, col: usize, width: usize, height: usize) -> [f32; 2] {
    [
        ((col as f64 + 0.5) / width as f64) as f32,
        ((row as f64 + 0.5) / height as f64) as f32,
    ]
}

/// Model coordinates of every pixel center in row-major order.
pub fn all_pixel_coords(width: usize, height: usize) -> Matrix<f32> {
    let mut data = Vec::with_capacity(width * height * 2);
    for r in 0..height {
        for c in 0..width {
            data.extend(pixel_coords(r, c, width, height));
        }
    }
    Matrix::from_vec(width * height, 2, data)
}

/// Queries every pixel center once; predictions are returned unclamped.
pub fn render(model: &FilterBank<f32>, width: usize, height: usize) -> Result<Image> {
    if model.config().output_dims != 3 {
        return config_err("rendering needs a 3-channel model");
    }
    let y = model.predict(&all_pixel_coords(width, height))?;
    Image::new(width, height, y.data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageSampling {
    /// Independent uniform pixel indices.
    Uniform,
    /// A fresh permutation per step; the first `batch_size` pixels are used.
    Exhaustive,
}

#[derive(Clone, Debug)]
pub struct ImageTask {
    pub image: Image,
    pub batch_size: usize,
    pub sampling: ImageSampling,
}

impl ImageTask {
    pub fn new(image: Image, batch_size: usize, sampling: ImageSampling) -> Result<Self> {
        if batch_size == 0 {
            return config_err("batch size must be at least 1");
        }
        if image.pixels() == 0 {
            return input_err("image has no pixels");
        }
        if sampling == ImageSampling::Exhaustive && batch_size > image.pixels() {
            return config_err(format!(
                "exhaustive sampling needs batch <= {} pixels, got {batch_size}",
                image.pixels()
            ));
        }
        Ok(Self {
            image,
            batch_size,
            sampling,
        })
    }

    /// Coordinates and colors of one batch.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng) -> (Matrix<f32>, Matrix<f32>) {
        let n = self.image.pixels();
        let indices: Vec<usize> = match self.sampling {
            ImageSampling::Uniform => (0..self.batch_size).map(|_| rng.random_range(0..n)).collect(),
            ImageSampling::Exhaustive => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(rng);
                all.truncate(self.batch_size);
                all
            }
        };
        let (w, h) = (self.image.width, self.image.height);
        let mut coords = Vec::with_capacity(indices.len() * 2);
        let mut colors = Vec::with_capacity(indices.len() * 3);
        for &i in &indices {
            let (r, c) = (i / w, i % w);
            coords.extend(pixel_coords(r, c, w, h));
            colors.extend(self.image.pixel(r, c));
        }
        (
            Matrix::from_vec(indices.len(), 2, coords),
            Matrix::from_vec(indices.len(), 3, colors),
        )
    }

    /// PSNR of the clamped full-image render against the target.
    pub fn full_psnr(&self, model: &FilterBank<f32>) -> Result<f64> {
        let pred = render(model, self.image.width, self.image.height)?.clamped();
        psnr(&pred, &self.image, 1.0)
    }
}

impl Task for ImageTask {
    fn objective(&self) -> Objective {
        Objective::Mse
    }

    fn input_dims(&self) -> usize {
        2
    }

    fn output_dims(&self) -> usize {
        3
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<(Matrix<f32>, Matrix<f32>)> {
        Ok(self.sample_batch(rng))
    }

    fn metric(&self, model: &FilterBank<f32>, _x: &Matrix<f32>, _y: &Matrix<f32>) -> Result<f64> {
        self.full_psnr(model)
    }
}
