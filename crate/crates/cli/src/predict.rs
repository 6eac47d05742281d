//! Batch prediction over a directory of images.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use auxcount_core::annotation::{crowd_to_gray, density_to_gray, levels_to_gray, save_prediction, PredictedMasks};
use auxcount_core::model::{CountingModel, ImagePrediction};
use auxcount_core::Scalar;
use image::{imageops, GrayImage, Rgb, RgbImage};

use crate::checkpoint::Checkpoint;
use crate::dataset::image_to_tensor;

const EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn gray_to_rgb(g: &GrayImage) -> RgbImage {
    RgbImage::from_fn(g.width(), g.height(), |x, y| {
        let v = g.get_pixel(x, y).0[0];
        Rgb([v, v, v])
    })
}

/// Side-by-side strip: input, density, and whichever masks exist.
pub fn panel<T: Scalar>(input: &RgbImage, p: &ImagePrediction<T>) -> RgbImage {
    let mut tiles = vec![input.clone(), gray_to_rgb(&density_to_gray(&p.density))];
    if let Some(c) = &p.crowd {
        tiles.push(gray_to_rgb(&crowd_to_gray(c)));
    }
    if let Some(l) = &p.levels {
        tiles.push(gray_to_rgb(&levels_to_gray(l)));
    }
    let (w, h) = (input.width(), input.height());
    let mut out = RgbImage::new(w * tiles.len() as u32, h);
    for (i, t) in tiles.iter().enumerate() {
        imageops::replace(&mut out, t, (i as u32 * w) as i64, 0);
    }
    out
}

/// Predicted count of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct CountRow {
    pub image_id: String,
    pub count: f64,
}

/// Runs `model` on every image of `images`, writing density maps, masks, panels and
/// `counts.csv` to `out_dir`.
pub fn predict_dir<T: Scalar>(model: &CountingModel<T>, images: &Path, out_dir: &Path) -> Result<Vec<CountRow>> {
    let files = list_images(images)?;
    if files.is_empty() {
        bail!("no images found in {}", images.display());
    }
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut rows = Vec::with_capacity(files.len());
    for path in &files {
        let id = path.file_stem().and_then(|s| s.to_str()).context("image name is not UTF-8")?.to_string();
        let rgb = image::open(path).with_context(|| format!("loading image {}", path.display()))?.to_rgb8();
        let p = model.predict_image(&image_to_tensor::<T>(&rgb)).with_context(|| format!("predicting {id}"))?;
        let masks = match (&p.crowd, &p.levels) {
            (Some(crowd), Some(levels)) => Some(PredictedMasks { crowd: crowd.clone(), levels: levels.clone() }),
            _ => None,
        };
        save_prediction(&id, &p.density, masks.as_ref(), out_dir)?;
        let panel_path = out_dir.join(format!("{id}_panel.png"));
        panel(&rgb, &p).save(&panel_path).with_context(|| format!("writing {}", panel_path.display()))?;
        log::info!("{id}: {:.2}", p.count);
        rows.push(CountRow { image_id: id, count: p.count });
    }
    let mut csv = String::from("image_id,count\n");
    for r in &rows {
        csv.push_str(&format!("{},{:.4}\n", r.image_id, r.count));
    }
    fs::write(out_dir.join("counts.csv"), csv)?;
    Ok(rows)
}

/// Loads an f32 checkpoint and predicts a directory.
pub fn predict(ckpt: &Path, images: &Path, out_dir: &Path) -> Result<Vec<CountRow>> {
    let model = Checkpoint::<f32>::load(ckpt)?.model()?;
    predict_dir(&model, images, out_dir)
}
