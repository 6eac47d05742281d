//! Evaluation of a model on a manifest split.

use std::path::Path;

use anyhow::{bail, Context, Result};
use auxcount_core::annotation::{load_manifest, Split};
use auxcount_core::metrics::{IouAccumulator, MetricsReport};
use auxcount_core::model::CountingModel;
use auxcount_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{image_levels, Dataset};

/// GAME levels included in every report.
pub const GAME_LEVELS: [u32; 4] = [0, 1, 2, 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub predicted: f64,
    pub actual: f64,
}

/// Predicts every image and scores counts, GAME and both auxiliary IoUs.
pub fn evaluate_dataset<T: Scalar>(model: &CountingModel<T>, data: &Dataset<T>) -> Result<(MetricsReport, Vec<ImageResult>)> {
    if data.is_empty() {
        bail!("cannot evaluate an empty split");
    }
    let levels = model.config.levels;
    let mut preds = Vec::with_capacity(data.len());
    let mut gts = Vec::with_capacity(data.len());
    let mut per_image = Vec::with_capacity(data.len());
    let mut iou_cs = IouAccumulator::new(&[1]);
    let classes: Vec<u32> = (1..=levels as u32 + 1).collect();
    let mut iou_ds = IouAccumulator::new(&classes);
    let (mut any_cs, mut any_ds) = (false, false);
    for (id, sample) in data.ids.iter().zip(&data.samples) {
        let p = model.predict_image(&sample.image).with_context(|| format!("predicting {id}"))?;
        if let Some(crowd) = &p.crowd {
            let pred: Vec<u32> = crowd.data.iter().map(|&v| v as u32).collect();
            let gt: Vec<u32> = sample.targets.crowd.data.iter().map(|&v| v as u32).collect();
            iou_cs.add(&pred, &gt)?;
            any_cs = true;
        }
        if let Some(lv) = &p.levels {
            iou_ds.add(&lv.grid.data, &image_levels(sample, levels)?.grid.data)?;
            any_ds = true;
        }
        per_image.push(ImageResult {
            image_id: id.clone(),
            predicted: p.count,
            actual: sample.targets.density.sum().to_f64_lossy(),
        });
        preds.push(p.density);
        gts.push(sample.targets.density.clone());
    }
    let mut report = MetricsReport::from_maps(&preds, &gts, &GAME_LEVELS, 1.0)?;
    report.iou_cs = if any_cs { iou_cs.value().ok() } else { None };
    report.iou_ds = if any_ds { iou_ds.value().ok() } else { None };
    Ok((report, per_image))
}

/// Loads a checkpoint and evaluates it on `split` of its manifest (or `manifest`).
pub fn evaluate(ckpt: &Path, split: Split, manifest: Option<&Path>) -> Result<MetricsReport> {
    let ck = Checkpoint::<f32>::load(ckpt)?;
    let model = ck.model()?;
    let manifest_path = manifest.unwrap_or(&ck.config.data.manifest);
    let manifest = load_manifest(manifest_path)?;
    let entries = manifest.split(split);
    if entries.is_empty() {
        bail!("split `{split}` of {} is empty", manifest_path.display());
    }
    let data = Dataset::<f32>::load(&entries, ck.config.data.sigma, ck.config.model.levels)?;
    Ok(evaluate_dataset(&model, &data)?.0)
}
