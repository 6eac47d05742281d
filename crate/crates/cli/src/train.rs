//! Training loop.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use auxcount_core::annotation::{load_manifest, Split};
use auxcount_core::groundtruth::random_crop_and_flip;
use auxcount_core::losses::LossComponents;
use auxcount_core::model::{collate, CountingModel};
use auxcount_core::nn::{update_running_stats, Adam};
use auxcount_core::{Error as CoreError, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, EpochRecord};
use crate::config::RunConfig;
use crate::dataset::{pad_sample, Dataset};
use crate::evaluate::evaluate_dataset;
use crate::schedule::cosine_lr;

/// One optimizer step as written to `train_log.jsonl`.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub loss: LossComponents<f64>,
}

pub struct TrainOutcome<T> {
    pub model: CountingModel<T>,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_val_mae: Option<f64>,
    /// Best-by-validation checkpoint (the last one when there is no validation split).
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Where a run writes its artifacts; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainIo {
    pub output_dir: Option<PathBuf>,
}

fn checkpoint<T: Scalar>(
    config: &RunConfig,
    model: &CountingModel<T>,
    adam: &Adam<T>,
    epoch: usize,
    step: usize,
    best: Option<f64>,
    history: &[EpochRecord],
) -> Checkpoint<T> {
    Checkpoint {
        config: config.clone(),
        epoch,
        step,
        best_val_mae: best,
        history: history.to_vec(),
        params: model.store.named(),
        adam: Some(adam.clone()),
    }
}

/// Copies `trunk.*` tensors from a checkpoint into `model`.
pub fn load_pretrained_trunk<T: Scalar>(model: &mut CountingModel<T>, path: &std::path::Path) -> Result<usize> {
    let ck = Checkpoint::<T>::load(path)?;
    let trunk: Vec<_> = ck.params.into_iter().filter(|(n, _)| n.starts_with("trunk.")).collect();
    if trunk.is_empty() {
        bail!("{} holds no trunk parameters", path.display());
    }
    model.store.load_named(&trunk).context("pretrained trunk does not match the configured widths")?;
    Ok(trunk.len())
}

/// Trains on the configured manifest's train split, validating on its val split.
pub fn train<T: Scalar>(config: &RunConfig) -> Result<TrainOutcome<T>> {
    let manifest = load_manifest(&config.data.manifest)?;
    let train_entries = manifest.split(Split::Train);
    if train_entries.is_empty() {
        bail!("the training split of {} is empty", config.data.manifest.display());
    }
    let levels = config.model.levels;
    let train_set = Dataset::<T>::load(&train_entries, config.data.sigma, levels)?;
    let val_entries = manifest.split(Split::Val);
    let val_set = if val_entries.is_empty() { None } else { Some(Dataset::<T>::load(&val_entries, config.data.sigma, levels)?) };
    let io = TrainIo { output_dir: Some(config.output_dir.clone()) };
    train_on(config, &train_set, val_set.as_ref(), &io)
}

/// Training on already loaded data.
pub fn train_on<T: Scalar>(
    config: &RunConfig,
    train_set: &Dataset<T>,
    val_set: Option<&Dataset<T>>,
    io: &TrainIo,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_set.is_empty() {
        bail!("the training set is empty");
    }
    let o = &config.optim;
    let mut model = CountingModel::<T>::new(&config.model, o.seed)?;
    if let Some(p) = &config.pretrained_path {
        let n = load_pretrained_trunk(&mut model, p)?;
        log::info!("initialized {n} trunk tensors from {}", p.display());
    }
    let mut adam = Adam::new(&model.store, o.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed ^ 0x5EED_DA7A);
    let side = config.model.input_size;
    let padded: Vec<_> = train_set.samples.iter().map(|s| pad_sample(s, side, side)).collect();
    let per_epoch = padded.len().div_ceil(o.batch_size);
    let total_steps = (o.epochs * per_epoch).min(o.max_iterations.unwrap_or(usize::MAX));
    let epochs = total_steps.div_ceil(per_epoch);

    let mut log_file = match &io.output_dir {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("config.toml"), config.to_toml())?;
            Some(fs::File::create(dir.join("train_log.jsonl"))?)
        }
        None => None,
    };
    let ckpt_path = |name: &str| io.output_dir.as_ref().map(|d| d.join(name));
    let last_path = ckpt_path("last.ckpt");
    let best_path = ckpt_path("best.ckpt");
    let mut saved_last = false;

    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut best: Option<f64> = None;
    let mut best_saved = None;
    let mut step = 0;
    log::info!(
        "training {} parameters on {} images for {total_steps} steps ({epochs} epochs)",
        model.num_parameters(),
        padded.len()
    );
    for epoch in 0..epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..padded.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = LossComponents::<f64>::default();
        let mut total_sum = 0.0;
        let mut n_steps = 0;
        let mut lr = o.lr;
        for chunk in order.chunks(o.batch_size) {
            if step >= total_steps {
                break;
            }
            let crops = chunk
                .iter()
                .map(|&i| random_crop_and_flip(&padded[i], (side, side), config.data.flip_p, config.data.level_norm, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let (images, targets) = collate(&crops, config.model.density_scale)?;
            lr = cosine_lr(step, total_steps, o.lr, o.lr_min);
            let out = match model.loss_and_grads(&images, &targets, &config.loss) {
                Ok(out) => out,
                Err(e @ CoreError::NonFiniteLoss(_)) => {
                    let good = if saved_last { last_path.as_ref().map(|p| p.display().to_string()) } else { None };
                    bail!(
                        "training aborted at epoch {epoch}, step {step}: {e}; last good checkpoint: {}",
                        good.unwrap_or_else(|| "none".into())
                    );
                }
                Err(e) => return Err(e.into()),
            };
            adam.update(&mut model.store, &out.grads, lr);
            update_running_stats(&mut model.store, &out.batch_stats, T::of(o.bn_momentum));
            let comps = out.components.to_f64();
            let record = StepRecord { epoch, step, lr, total: out.total.to_f64_lossy(), loss: comps };
            log::debug!("step {step} lr {lr:.3e} loss {:.5} {:?}", record.total, comps);
            if let Some(f) = log_file.as_mut() {
                serde_json::to_writer(&mut *f, &record)?;
                f.write_all(b"\n")?;
            }
            total_sum += record.total;
            sums.dp += comps.dp;
            sums.cs = comps.cs.map(|v| v + sums.cs.unwrap_or(0.0));
            sums.ds = comps.ds.map(|v| v + sums.ds.unwrap_or(0.0));
            sums.dcd = comps.dcd.map(|v| v + sums.dcd.unwrap_or(0.0));
            steps.push(record);
            step += 1;
            n_steps += 1;
        }
        let k = n_steps.max(1) as f64;
        let mean = LossComponents { cs: sums.cs.map(|v| v / k), ds: sums.ds.map(|v| v / k), dp: sums.dp / k, dcd: sums.dcd.map(|v| v / k) };
        let train_seconds = started.elapsed().as_secs_f64();
        let is_last = epoch + 1 == epochs;
        let validate = val_set.is_some_and(|v| !v.is_empty());
        let (val_mae, val_rmse) = if validate {
            let (r, _) = evaluate_dataset(&model, val_set.expect("checked"))?;
            (Some(r.mae), Some(r.rmse))
        } else {
            (None, None)
        };
        let record = EpochRecord { epoch, steps: n_steps, lr, loss_total: total_sum / k, loss: mean, train_seconds, val_mae, val_rmse };
        log::info!(
            "epoch {epoch}: loss {:.5} (dp {:.5}) {}in {train_seconds:.1}s",
            record.loss_total,
            mean.dp,
            val_mae.map_or(String::new(), |m| format!("val MAE {m:.3} "))
        );
        history.push(record);
        let improved = match (val_mae, best) {
            (Some(m), Some(b)) => m < b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = val_mae;
        }
        let every = (epoch + 1) % o.checkpoint_every.max(1) == 0;
        if let Some(p) = &last_path {
            if every || is_last {
                checkpoint(config, &model, &adam, epoch, step, best, &history).save(p)?;
                saved_last = true;
            }
        }
        if let Some(p) = &best_path {
            if improved || (!validate && is_last) {
                checkpoint(config, &model, &adam, epoch, step, best, &history).save(p)?;
                best_saved = Some(p.clone());
            }
        }
    }
    if let Some(dir) = &io.output_dir {
        fs::write(dir.join("history.json"), serde_json::to_string_pretty(&history)?)?;
    }
    Ok(TrainOutcome {
        model,
        history,
        steps,
        best_val_mae: best,
        best_checkpoint: best_saved,
        last_checkpoint: if saved_last { last_path } else { None },
    })
}
