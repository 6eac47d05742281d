//! Supervision targets derived from point annotations, and the shared crop/flip augmentation.
//!
//! Coordinates are `(row, col)` in pixels; pixel `(i, j)` covers `[i, i+1) x [j, j+1)`
//! and is sampled at its centre `(i + 0.5, j + 0.5)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::PointAnnotation;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gaussian stamps are cut off at this many standard deviations and not renormalized.
pub const TRUNCATE_SIGMAS: f64 = 4.0;

/// Row-major `H x W` grid of values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<V> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<V>,
}

impl<V: Copy> Grid<V> {
    pub fn filled(height: usize, width: usize, value: V) -> Self {
        Grid { height, width, data: vec![value; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> V {
        self.data[row * self.width + col]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width, "crop outside grid");
        let mut data = Vec::with_capacity(height * width);
        for r in top..top + height {
            data.extend_from_slice(&self.data[r * self.width + left..r * self.width + left + width]);
        }
        Grid { height, width, data }
    }

    /// Mirror along the vertical axis (left-right).
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }
}

/// Objects per pixel; sums to the object count.
pub type DensityMap<T> = Grid<T>;
/// 1 where the density is positive, 0 elsewhere.
pub type CrowdMask = Grid<u8>;

/// Ordinal density classes in `1..=levels + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityLevelMask {
    pub grid: Grid<u32>,
    pub levels: usize,
}

impl DensityLevelMask {
    pub fn num_classes(&self) -> usize {
        self.levels + 1
    }
}

impl<T: Scalar> Grid<T> {
    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.data.clone()).expect("shape")
    }
}

/// How the min/max of the density-level quantization is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelNorm {
    /// Normalize over each training crop (levels are recomputed after cropping).
    #[default]
    PerCrop,
    /// Normalize over the whole image before cropping.
    PerImage,
}

/// One-dimensional truncated Gaussian weights: `(first index, weights)`.
fn axis_weights(centre: f64, len: usize, sigma: f64) -> (usize, Vec<f64>) {
    let radius = TRUNCATE_SIGMAS * sigma;
    let lo = ((centre - radius - 0.5).ceil().max(0.0)) as usize;
    let hi = (((centre + radius - 0.5).floor() + 1.0).max(0.0) as usize).min(len);
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
    let weights = (lo..hi.max(lo))
        .map(|i| {
            let d = i as f64 + 0.5 - centre;
            norm * (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    (lo, weights)
}

/// Sum of normalized Gaussian stamps, one per annotated point.
pub fn generate_density_map<T: Scalar>(
    points: &PointAnnotation,
    shape: (usize, usize),
    sigma: f64,
) -> Result<DensityMap<T>> {
    let (height, width) = shape;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("empty density map shape {height}x{width}")));
    }
    let mut acc = vec![0.0f64; height * width];
    for &(row, col) in &points.points {
        let (r0, wr) = axis_weights(row, height, sigma);
        let (c0, wc) = axis_weights(col, width, sigma);
        for (i, &a) in wr.iter().enumerate() {
            let line = &mut acc[(r0 + i) * width + c0..(r0 + i) * width + c0 + wc.len()];
            for (v, &b) in line.iter_mut().zip(&wc) {
                *v += a * b;
            }
        }
    }
    Ok(Grid { height, width, data: acc.into_iter().map(T::of).collect() })
}

pub fn generate_crowd_mask<T: Scalar>(density: &DensityMap<T>) -> CrowdMask {
    Grid {
        height: density.height,
        width: density.width,
        data: density.data.iter().map(|&v| u8::from(v > T::zero())).collect(),
    }
}

/// Quantizes min-max normalized density into `levels + 1` ordinal classes.
///
/// `class = min(floor(norm * levels + 1), levels + 1)`; a constant map is all class 1.
pub fn generate_density_level_mask<T: Scalar>(density: &DensityMap<T>, levels: usize) -> Result<DensityLevelMask> {
    if levels == 0 {
        return Err(Error::InvalidArgument("density levels must be at least 1".into()));
    }
    let (min, max) = density
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.to_f64_lossy();
            (lo.min(v), hi.max(v))
        });
    let top = levels as u32 + 1;
    let data = if !(max > min) {
        vec![1; density.data.len()]
    } else {
        let range = max - min;
        density
            .data
            .iter()
            .map(|v| {
                let norm = (v.to_f64_lossy() - min) / range;
                ((norm * levels as f64 + 1.0).floor() as u32).clamp(1, top)
            })
            .collect()
    };
    Ok(DensityLevelMask {
        grid: Grid { height: density.height, width: density.width, data },
        levels,
    })
}

/// Supervision targets sharing the image's spatial frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets<T> {
    pub density: DensityMap<T>,
    pub crowd: CrowdMask,
    pub levels: DensityLevelMask,
}

impl<T: Scalar> Targets<T> {
    pub fn from_points(
        points: &PointAnnotation,
        shape: (usize, usize),
        sigma: f64,
        levels: usize,
    ) -> Result<Self> {
        let density = generate_density_map(points, shape, sigma)?;
        let crowd = generate_crowd_mask(&density);
        let levels = generate_density_level_mask(&density, levels)?;
        Ok(Targets { density, crowd, levels })
    }
}

/// An image (`C x H x W`) with its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub targets: Targets<T>,
}

fn crop_image<T: Scalar>(image: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Tensor<T> {
    let (c, ih, iw) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for r in top..top + h {
            let start = (ch * ih + r) * iw + left;
            data.extend_from_slice(&image.data()[start..start + w]);
        }
    }
    Tensor::from_vec(&[c, h, w], data).expect("shape")
}

fn flip_image<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let w = image.shape()[2];
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

impl<T: Scalar> Sample<T> {
    pub fn shape(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let t = &self.targets;
        Sample {
            image: crop_image(&self.image, top, left, height, width),
            targets: Targets {
                density: t.density.crop(top, left, height, width),
                crowd: t.crowd.crop(top, left, height, width),
                levels: DensityLevelMask {
                    grid: t.levels.grid.crop(top, left, height, width),
                    levels: t.levels.levels,
                },
            },
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let t = &self.targets;
        Sample {
            image: flip_image(&self.image),
            targets: Targets {
                density: t.density.flip_horizontal(),
                crowd: t.crowd.flip_horizontal(),
                levels: DensityLevelMask { grid: t.levels.grid.flip_horizontal(), levels: t.levels.levels },
            },
        }
    }
}

/// Crops a `crop` window at a uniformly random position, then mirrors it with
/// probability `flip_p`. The same transform is applied to the image and every target.
///
/// With [`LevelNorm::PerCrop`] the level mask is recomputed from the cropped density.
pub fn random_crop_and_flip<T: Scalar, R: Rng + ?Sized>(
    sample: &Sample<T>,
    crop: (usize, usize),
    flip_p: f64,
    level_norm: LevelNorm,
    rng: &mut R,
) -> Result<Sample<T>> {
    let (h, w) = sample.shape();
    let (ch, cw) = crop;
    if ch == 0 || cw == 0 || ch > h || cw > w {
        return Err(Error::InvalidArgument(format!("crop {ch}x{cw} does not fit image {h}x{w}")));
    }
    if !(0.0..=1.0).contains(&flip_p) {
        return Err(Error::InvalidArgument(format!("flip probability {flip_p} outside [0, 1]")));
    }
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let flip = rng.random::<f64>() < flip_p;
    let mut out = sample.crop(top, left, ch, cw);
    if flip {
        out = out.flip_horizontal();
    }
    if level_norm == LevelNorm::PerCrop {
        out.targets.levels = generate_density_level_mask(&out.targets.density, sample.targets.levels.levels)?;
    }
    Ok(out)
}
