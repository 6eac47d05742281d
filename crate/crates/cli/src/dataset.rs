//! Image loading and sample preparation.

use std::path::Path;

use anyhow::{Context, Result};
use auxcount_core::annotation::ManifestEntry;
use auxcount_core::groundtruth::{generate_density_level_mask, DensityLevelMask, Grid, Sample, Targets};
use auxcount_core::{Scalar, Tensor};
use image::RgbImage;

/// Per-channel normalization applied to 0..1 pixel values.
pub const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const STD: [f64; 3] = [0.229, 0.224, 0.225];

pub fn image_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let v = (px.0[c] as f64 / 255.0 - MEAN[c]) / STD[c];
            data[(c * h + y as usize) * w + x as usize] = T::of(v);
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("image shape")
}

pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).with_context(|| format!("loading image {}", path.display()))?;
    Ok(image_to_tensor(&img.to_rgb8()))
}

/// Zero-pads image and targets on the bottom/right up to at least `min_h x min_w`.
pub fn pad_sample<T: Scalar>(sample: &Sample<T>, min_h: usize, min_w: usize) -> Sample<T> {
    let (h, w) = sample.shape();
    if h >= min_h && w >= min_w {
        return sample.clone();
    }
    let (ph, pw) = (h.max(min_h), w.max(min_w));
    fn pad<V: Copy>(g: &Grid<V>, ph: usize, pw: usize, fill: V) -> Grid<V> {
        let mut out = Grid::filled(ph, pw, fill);
        for r in 0..g.height {
            out.data[r * pw..r * pw + g.width].copy_from_slice(&g.data[r * g.width..(r + 1) * g.width]);
        }
        out
    }
    let mut image = Tensor::zeros(&[3, ph, pw]);
    for c in 0..3 {
        for r in 0..h {
            let src = (c * h + r) * w;
            let dst = (c * ph + r) * pw;
            image.data_mut()[dst..dst + w].copy_from_slice(&sample.image.data()[src..src + w]);
        }
    }
    let t = &sample.targets;
    Sample {
        image,
        targets: Targets {
            density: pad(&t.density, ph, pw, T::zero()),
            crowd: pad(&t.crowd, ph, pw, 0),
            levels: DensityLevelMask { grid: pad(&t.levels.grid, ph, pw, 1), levels: t.levels.levels },
        },
    }
}

/// Loaded images with full-resolution targets.
pub struct Dataset<T> {
    pub ids: Vec<String>,
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn load(entries: &[&ManifestEntry], sigma: f64, levels: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(entries.len());
        let mut samples = Vec::with_capacity(entries.len());
        for e in entries {
            let image: Tensor<T> = load_image(&e.image_path)?;
            let shape = (image.shape()[1], image.shape()[2]);
            let targets = Targets::from_points(&e.annotation, shape, sigma, levels)
                .with_context(|| format!("building targets for {}", e.image_id()))?;
            ids.push(e.image_id().to_string());
            samples.push(Sample { image, targets });
        }
        Ok(Dataset { ids, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Ground-truth count of each image, as the sum of its density map.
    pub fn counts(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.targets.density.sum().to_f64_lossy()).collect()
    }
}

/// Level mask of a full image, normalized over that image.
pub fn image_levels<T: Scalar>(sample: &Sample<T>, levels: usize) -> Result<DensityLevelMask> {
    Ok(generate_density_level_mask(&sample.targets.density, levels)?)
}
