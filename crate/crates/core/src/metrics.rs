//! Counting and segmentation metrics. Everything is accumulated in `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groundtruth::Grid;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountPair {
    pub predicted: f64,
    pub actual: f64,
}

/// Sum over `rows x cols`, row-major.
fn region_sum<T: Scalar>(map: &Grid<T>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
    let mut total = 0.0;
    for r in rows {
        for v in &map.data[r * map.width + cols.start..r * map.width + cols.end] {
            total += v.to_f64_lossy();
        }
    }
    total
}

/// Count of a density map: the plain sum of its values.
pub fn map_count<T: Scalar>(map: &Grid<T>) -> f64 {
    region_sum(map, 0..map.height, 0..map.width)
}

pub fn mae_rmse(pairs: &[CountPair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Empty("count pairs"));
    }
    let n = pairs.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for p in pairs {
        let e = p.predicted - p.actual;
        abs += e.abs();
        sq += e * e;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// Tile boundaries `floor(k * n / parts)` for `k = 0..=parts`.
fn bounds(n: usize, parts: usize) -> Vec<usize> {
    (0..=parts).map(|k| k * n / parts).collect()
}

/// Sum of per-tile absolute count errors over a `2^L x 2^L` partition of one image.
pub fn game_image<T: Scalar>(pred: &Grid<T>, gt: &Grid<T>, level: u32) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("GAME: {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let parts = 1usize.checked_shl(level).filter(|&p| p <= pred.height && p <= pred.width).ok_or_else(|| {
        Error::InvalidArgument(format!("a {}x{} map cannot be split into 2^{level} tiles per side", pred.height, pred.width))
    })?;
    let rb = bounds(pred.height, parts);
    let cb = bounds(pred.width, parts);
    let mut total = 0.0;
    for r in rb.windows(2) {
        for c in cb.windows(2) {
            total += (region_sum(pred, r[0]..r[1], c[0]..c[1]) - region_sum(gt, r[0]..r[1], c[0]..c[1])).abs();
        }
    }
    Ok(total)
}

/// Grid average mean absolute error at level `L`, averaged over images.
pub fn game<T: Scalar>(preds: &[Grid<T>], gts: &[Grid<T>], level: u32) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("density maps"));
    }
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += game_image(p, g, level)?;
    }
    Ok(total / preds.len() as f64)
}

/// Intersection and union counts per class, accumulated over images.
#[derive(Clone, Debug, PartialEq)]
pub struct IouAccumulator {
    pub classes: Vec<u32>,
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(classes: &[u32]) -> Self {
        IouAccumulator { classes: classes.to_vec(), intersection: vec![0; classes.len()], union: vec![0; classes.len()] }
    }

    pub fn add(&mut self, pred: &[u32], gt: &[u32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("IoU: {} vs {} labels", pred.len(), gt.len())));
        }
        for (i, &c) in self.classes.iter().enumerate() {
            for (&p, &g) in pred.iter().zip(gt) {
                let (a, b) = (p == c, g == c);
                self.intersection[i] += u64::from(a && b);
                self.union[i] += u64::from(a || b);
            }
        }
        Ok(())
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn value(&self) -> Result<f64> {
        let ious: Vec<f64> = self
            .intersection
            .iter()
            .zip(&self.union)
            .filter(|(_, &u)| u > 0)
            .map(|(&i, &u)| i as f64 / u as f64)
            .collect();
        if ious.is_empty() {
            return Err(Error::Empty("IoU classes with a non-empty union"));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Mean-over-classes IoU of two label maps.
pub fn mask_iou(pred: &[u32], gt: &[u32], classes: &[u32]) -> Result<f64> {
    let mut acc = IouAccumulator::new(classes);
    acc.add(pred, gt)?;
    acc.value()
}

/// Binary labels from probabilities: 1 where `p >= 0.5`.
pub fn threshold<T: Scalar>(probs: &[T]) -> Vec<u32> {
    probs.iter().map(|&p| u32::from(p >= T::of(0.5))).collect()
}

/// 1-based argmax over `classes` planes of `plane` pixels each.
pub fn argmax_classes<T: Scalar>(probs: &[T], classes: usize, plane: usize) -> Vec<u32> {
    (0..plane)
        .map(|px| {
            let mut best = 0;
            for c in 1..classes {
                if probs[c * plane + px] > probs[best * plane + px] {
                    best = c;
                }
            }
            best as u32 + 1
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_images: usize,
    pub mae: f64,
    pub rmse: f64,
    /// GAME value by level.
    pub game: BTreeMap<u32, f64>,
    pub iou_cs: Option<f64>,
    pub iou_ds: Option<f64>,
}

impl MetricsReport {
    /// Counting metrics for paired density maps; counts are map sums divided by `scale`.
    pub fn from_maps<T: Scalar>(preds: &[Grid<T>], gts: &[Grid<T>], levels: &[u32], scale: f64) -> Result<Self> {
        if preds.len() != gts.len() {
            return Err(Error::InvalidArgument(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
        }
        let rescale = |m: &Grid<T>| Grid { height: m.height, width: m.width, data: m.data.iter().map(|v| v.to_f64_lossy() / scale).collect() };
        let preds: Vec<Grid<f64>> = preds.iter().map(rescale).collect();
        let gts: Vec<Grid<f64>> = gts.iter().map(rescale).collect();
        let pairs: Vec<CountPair> =
            preds.iter().zip(&gts).map(|(p, g)| CountPair { predicted: map_count(p), actual: map_count(g) }).collect();
        let (mae, rmse) = mae_rmse(&pairs)?;
        let mut game_map = BTreeMap::new();
        for &l in levels {
            game_map.insert(l, game(&preds, &gts, l)?);
        }
        Ok(MetricsReport { n_images: pairs.len(), mae, rmse, game: game_map, iou_cs: None, iou_ds: None })
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>12}", "metric", "value");
        let _ = writeln!(out, "{:<12} {:>12}", "images", self.n_images);
        let _ = writeln!(out, "{:<12} {:>12.4}", "MAE", self.mae);
        let _ = writeln!(out, "{:<12} {:>12.4}", "RMSE", self.rmse);
        for (l, v) in &self.game {
            let _ = writeln!(out, "{:<12} {:>12.4}", format!("GAME({l})"), v);
        }
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(out, "{:<12} {:>12}", "IoU crowd", fmt(self.iou_cs));
        let _ = writeln!(out, "{:<12} {:>12}", "IoU levels", fmt(self.iou_ds));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize, data: Vec<f64>) -> Grid<f64> {
        Grid { height: h, width: w, data }
    }

    fn random_grid(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Grid<f64> {
        grid(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn mae_rmse_examples() {
        let pairs = [CountPair { predicted: 3.0, actual: 4.0 }, CountPair { predicted: 5.0, actual: 4.0 }];
        assert_eq!(mae_rmse(&pairs).unwrap(), (1.0, 1.0));
        let perfect = [CountPair { predicted: 7.5, actual: 7.5 }];
        assert_eq!(mae_rmse(&perfect).unwrap(), (0.0, 0.0));
        assert!(mae_rmse(&[]).is_err());
    }

    #[test]
    fn game_quadrants_by_hand() {
        let pred = grid(4, 4, (0..16).map(|i| i as f64).collect());
        let gt = grid(4, 4, vec![1.0; 16]);
        // Quadrant sums of 0..16 laid out row-major: 10, 18, 42, 50; truth 4 each.
        let expected = 6.0 + 14.0 + 38.0 + 46.0;
        assert_eq!(game_image(&pred, &gt, 1).unwrap(), expected);
        assert_eq!(game(&[pred.clone()], &[gt.clone()], 0).unwrap(), (120.0f64 - 16.0).abs());
        assert!(game_image(&pred, &gt, 3).is_err());
        assert_eq!(game(&[pred.clone()], &[pred], 2).unwrap(), 0.0);
    }

    #[test]
    fn uneven_tiles_cover_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_grid(7, 5, &mut rng);
        let zero = grid(7, 5, vec![0.0; 35]);
        assert!((game_image(&p, &zero, 2).unwrap() - map_count(&p)).abs() < 1e-12);
    }

    #[test]
    fn iou_examples() {
        let a = [1, 1, 0, 0];
        assert_eq!(mask_iou(&a, &a, &[1]).unwrap(), 1.0);
        assert_eq!(mask_iou(&[1, 0, 0, 0], &[0, 1, 0, 0], &[1]).unwrap(), 0.0);
        assert!(mask_iou(&[0, 0], &[0, 0], &[1]).is_err());
        // Class 3 never appears and is skipped.
        assert_eq!(mask_iou(&[1, 2, 2], &[1, 2, 1], &[1, 2, 3]).unwrap(), (0.5 + 0.5) / 2.0);
    }

    #[test]
    fn label_helpers() {
        assert_eq!(threshold(&[0.2f32, 0.5, 0.9]), vec![0, 1, 1]);
        let probs = [0.1, 0.7, 0.6, 0.2, 0.3, 0.1];
        assert_eq!(argmax_classes(&probs, 3, 2), vec![2, 1]);
    }

    #[test]
    fn report_round_trip_and_game_zero() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let preds: Vec<_> = (0..5).map(|_| random_grid(16, 16, &mut rng)).collect();
        let gts: Vec<_> = (0..5).map(|_| random_grid(16, 16, &mut rng)).collect();
        let mut r = MetricsReport::from_maps(&preds, &gts, &[0, 1, 2, 3], 1.0).unwrap();
        assert_eq!(r.game[&0], r.mae);
        assert!(r.rmse >= r.mae);
        r.iou_cs = Some(0.25);
        let path = dir.path().join("report.json");
        r.save(&path).unwrap();
        assert_eq!(MetricsReport::load(&path).unwrap(), r);
        assert!(r.table().contains("GAME(3)"));
    }

    proptest! {
        #[test]
        fn game_is_monotone_and_permutation_invariant(seed in 0u64..500, h in 8usize..20, w in 8usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds: Vec<_> = (0..3).map(|_| random_grid(h, w, &mut rng)).collect();
            let gts: Vec<_> = (0..3).map(|_| random_grid(h, w, &mut rng)).collect();
            let values: Vec<f64> = (0..4).map(|l| game(&preds, &gts, l).unwrap()).collect();
            for pair in values.windows(2) {
                prop_assert!(pair[1] >= pair[0] - 1e-12);
            }
            let rev_p: Vec<_> = preds.iter().rev().cloned().collect();
            let rev_g: Vec<_> = gts.iter().rev().cloned().collect();
            prop_assert!((game(&rev_p, &rev_g, 2).unwrap() - values[2]).abs() < 1e-12);
        }
    }
}
