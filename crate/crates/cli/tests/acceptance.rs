//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and exits non-zero if
//! any fails. Pass criterion ids (`AC3 AC7`) as arguments to run a subset.

use std::time::Instant;

use anyhow::{ensure, Result};
use auxcount::config::RunConfig;
use auxcount::dataset::{pad_sample, Dataset};
use auxcount::evaluate::evaluate_dataset;
use auxcount::synth::{make_synthetic, SynthConfig};
use auxcount::train::{train_on, TrainIo};
use auxcount::checkpoint::Checkpoint;
use auxcount_core::annotation::{PointAnnotation, Split};
use auxcount_core::backbone::BackboneConfig;
use auxcount_core::gcn::{GcnConfig, GcnModule};
use auxcount_core::groundtruth::{generate_crowd_mask, generate_density_level_mask, generate_density_map, Grid, Targets};
use auxcount_core::losses::{loss_cs, loss_dcd, loss_dp, loss_ds, DcdKernelBank, DcdReduction, LossConfig, PROB_EPS};
use auxcount_core::metrics::{game, map_count, mae_rmse, CountPair};
use auxcount_core::model::{collate, CountingModel, ModelConfig, Preset};
use auxcount_core::nn::{update_running_stats, Adam, Mode, ParamStore, Session};
use auxcount_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and budgets.
const AC1_REL_TOL: f64 = 1e-6;
const AC1_MAX_SECONDS: f64 = 10.0;
const AC2_TOL: f64 = 1e-6;
const AC3_TOL: f64 = 1e-5;
const AC3_INIT_RATIO: f64 = 1e-2;
const AC4_REL_TOL: f64 = 1e-3;
const AC4_STEP: f64 = 3e-5;
const AC4_COORDS: usize = 50;
const AC4_FLOOR: f64 = 1e-7;
const AC4_MAX_KINKS: usize = 10;
const AC5_MASS_TOL: f64 = 1e-3;
const AC6_TOL: f64 = 1e-9;
const AC7_MAX_ITERS: usize = 2000;
const AC7_MAE_FRACTION: f64 = 0.05;
const AC7_EVAL_EVERY: usize = 100;
const AC7_LR: f64 = 1e-4;
const AC8_SEEDS: [u64; 3] = [0, 1, 2];
const AC8_EPOCHS: usize = 60;

struct Outcome {
    pass: bool,
    detail: String,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Direct evaluation of the contrastive loss: eight centre-minus-neighbour differences of the
/// residual at distance `d`, zero outside the map, squared and averaged over interior pixels.
fn dcd_oracle(m: &[f64], g: &[f64], h: usize, w: usize, d: usize, border: usize) -> f64 {
    let r = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            let i = y as usize * w + x as usize;
            m[i] - g[i]
        }
    };
    let d = d as isize;
    let mut total = 0.0;
    let mut n = 0usize;
    for y in border..h - border {
        for x in border..w - border {
            n += 1;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (y, x) = (y as isize, x as isize);
                    let v = r(y, x) - r(y + dy * d, x + dx * d);
                    total += v * v;
                }
            }
        }
    }
    total / n as f64
}

fn t4(data: Vec<f64>, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_vec(&[1, c, h, w], data).unwrap()
}

fn ac1() -> Result<Outcome> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (h, w, lc) = (8, 8, 5);
    let bank = DcdKernelBank::new(2)?;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rand_map(&mut rng, h, w);
        let g = rand_map(&mut rng, h, w);
        let got = loss_dcd(&t4(m.clone(), 1, h, w), &t4(g.clone(), 1, h, w), &bank, DcdReduction::Mean, 0)?;
        worst = worst.max(rel(got, dcd_oracle(&m, &g, h, w, 2, 0)));

        let dp = loss_dp(&t4(m.clone(), 1, h, w), &t4(g.clone(), 1, h, w))?;
        let dp_ref = m.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (h * w) as f64;
        worst = worst.max(rel(dp, dp_ref));

        let p: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.001..0.999)).collect();
        let mask: Vec<f64> = (0..h * w).map(|_| f64::from(rng.random::<bool>())).collect();
        let cs = loss_cs(&t4(p.clone(), 1, h, w), &t4(mask.clone(), 1, h, w))?;
        let cs_ref = -p.iter().zip(&mask).map(|(&p, &t)| t * p.ln() + (1.0 - t) * (1.0 - p).ln()).sum::<f64>() / (h * w) as f64;
        worst = worst.max(rel(cs, cs_ref));

        let mut probs = vec![0.0; lc * h * w];
        let mut labels = vec![0u32; h * w];
        for px in 0..h * w {
            let raw: Vec<f64> = (0..lc).map(|_| rng.random_range(0.05..1.0)).collect();
            let z: f64 = raw.iter().sum();
            for c in 0..lc {
                probs[c * h * w + px] = raw[c] / z;
            }
            labels[px] = rng.random_range(1..=lc as u32);
        }
        let ds = loss_ds(&t4(probs.clone(), lc, h, w), &labels)?;
        let ds_ref = -labels
            .iter()
            .enumerate()
            .map(|(px, &l)| probs[(l as usize - 1) * h * w + px].max(PROB_EPS).ln())
            .sum::<f64>()
            / (h * w) as f64;
        worst = worst.max(rel(ds, ds_ref));
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(Outcome {
        pass: worst < AC1_REL_TOL && secs < AC1_MAX_SECONDS,
        detail: format!("max relative error {worst:.2e} (tol {AC1_REL_TOL:.0e}), {secs:.2}s (limit {AC1_MAX_SECONDS}s)"),
    })
}

fn ac2() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (h, w, d) = (12, 12, 2);
    let bank = DcdKernelBank::new(d)?;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rand_map(&mut rng, h, w);
        let g = rand_map(&mut rng, h, w);
        let c: f64 = rng.random_range(-10.0..10.0);
        let shifted: Vec<f64> = m.iter().map(|v| v + c).collect();
        let base = loss_dcd(&t4(m, 1, h, w), &t4(g.clone(), 1, h, w), &bank, DcdReduction::Mean, d)?;
        let moved = loss_dcd(&t4(shifted, 1, h, w), &t4(g, 1, h, w), &bank, DcdReduction::Mean, d)?;
        worst = worst.max((base - moved).abs());
    }
    Ok(Outcome { pass: worst < AC2_TOL, detail: format!("max |difference| {worst:.2e} (tol {AC2_TOL:.0e}), border {d}") })
}

fn softmax_probs(rng: &mut ChaCha8Rng, lc: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; lc * p];
    for px in 0..p {
        let raw: Vec<f64> = (0..lc).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect();
        let z: f64 = raw.iter().sum();
        for c in 0..lc {
            out[c * p + px] = raw[c] / z;
        }
    }
    out
}

/// Loop evaluation of the reasoning module at pool 1.
fn gcn_oracle(store: &ParamStore<f64>, g: &GcnModule, f: &[f64], cs: &[f64], ds: &[f64], c: usize, lc: usize, p: usize) -> Vec<f64> {
    let k = g.config.num_vertices;
    let w = |id| store.get(id).data().to_vec();
    let conv = |conv: &auxcount_core::nn::Conv2d, input: &[f64], cin: usize, cout: usize| {
        let wt = w(conv.weight);
        let b = w(conv.bias.unwrap());
        let mut out = vec![0.0; cout * p];
        for o in 0..cout {
            for px in 0..p {
                out[o * p + px] = b[o] + (0..cin).map(|i| wt[o * cin + i] * input[i * p + px]).sum::<f64>();
            }
        }
        out
    };
    let e = conv(&g.epsilon, ds, lc, lc);
    let b = conv(&g.beta, ds, lc, lc);
    let mut dep = vec![0.0; p * p];
    for i in 0..p {
        let logits: Vec<f64> = (0..p).map(|j| (0..lc).map(|l| e[l * p + i] * b[l * p + j]).sum()).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
        for j in 0..p {
            dep[i * p + j] = (logits[j] - mx).exp() / z;
        }
    }
    let masked: Vec<f64> = (0..c * p).map(|i| f[i] * cs[i % p]).collect();
    let u = conv(&g.mu, &masked, c, k);
    let mut v = vec![0.0; k * p];
    for kk in 0..k {
        for i in 0..p {
            v[kk * p + i] = (0..p).map(|j| u[kk * p + j] * dep[i * p + j]).sum();
        }
    }
    let a = w(g.adjacency);
    let wd = w(g.vertex_weight);
    let mut t = vec![0.0; k * p];
    for kk in 0..k {
        for i in 0..p {
            t[kk * p + i] = (0..p).map(|j| v[kk * p + j] * (f64::from(u8::from(i == j)) - a[i * p + j])).sum();
        }
    }
    let mut vp = vec![0.0; k * p];
    for kk in 0..k {
        for i in 0..p {
            vp[kk * p + i] = (0..k).map(|j| wd[j * k + kk] * t[j * p + i]).sum::<f64>().max(0.0);
        }
    }
    let delta = conv(&g.sigma, &vp, k, c);
    f.iter().zip(&delta).map(|(a, b)| a + b).collect()
}

fn ac3() -> Result<Outcome> {
    let (c, hw, k, lc) = (4, 4, 3, 5);
    let p = hw * hw;
    let mut worst: f64 = 0.0;
    let mut identity_max: f64 = 0.0;
    let mut ratio_max: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut store = ParamStore::<f64>::new();
        let cfg = GcnConfig { num_vertices: k, gcn_pool: 1, ..Default::default() };
        let g = GcnModule::new(&mut store, &cfg, c, lc, (hw, hw), &mut rng)?;
        // Default init is near zero; use O(1) graph weights so the oracle sees a real signal.
        let init_store = store.clone();
        *store.get_mut(g.adjacency) = Tensor::randn(&[p, p], 0.3, &mut rng);
        *store.get_mut(g.vertex_weight) = Tensor::randn(&[k, k], 1.0, &mut rng);
        for conv in [&g.epsilon, &g.beta, &g.mu, &g.sigma] {
            let b = conv.bias.unwrap();
            let n = store.get(b).numel();
            *store.get_mut(b) = Tensor::randn(&[n], 0.5, &mut rng);
        }
        let f: Vec<f64> = (0..c * p).map(|_| rng.random_range(0.0..2.0)).collect();
        let cs: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..1.0)).collect();
        let ds = softmax_probs(&mut rng, lc, p);

        let run = |store: &ParamStore<f64>| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut s = Session::new(store, Mode::Eval);
            let fv = s.input(t4(f.clone(), c, hw, hw));
            let csv = s.input(t4(cs.clone(), 1, hw, hw));
            let dsv = s.input(t4(ds.clone(), lc, hw, hw));
            let dep = g.compute_dependency(&mut s, dsv)?;
            let v = g.project_vertices(&mut s, fv, csv, dep)?;
            let vp = g.graph_convolve(&mut s, v)?;
            let out = g.forward(&mut s, fv, csv, dsv)?;
            Ok((s.value(out).data().to_vec(), s.value(vp).data().to_vec()))
        };
        let (got, _) = run(&store)?;
        let want = gcn_oracle(&store, &g, &f, &cs, &ds, c, lc, p);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }

        let mut eye_store = store.clone();
        *eye_store.get_mut(g.adjacency) = Tensor::eye(p);
        let (_, vp) = run(&eye_store)?;
        identity_max = identity_max.max(vp.iter().fold(0.0, |m, v| m.max(v.abs())));

        let (init_out, _) = run(&init_store)?;
        let diff: f64 = init_out.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        ratio_max = ratio_max.max(diff / norm);
    }
    Ok(Outcome {
        pass: worst < AC3_TOL && identity_max == 0.0 && ratio_max < AC3_INIT_RATIO,
        detail: format!(
            "oracle error {worst:.2e} (tol {AC3_TOL:.0e}); A=I max |V'| {identity_max:e}; init ratio {ratio_max:.2e} (< {AC3_INIT_RATIO:.0e})"
        ),
    })
}

fn tiny_model_config(input: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { trunk_width_div: 16, fuse_channels: 8, branch_channels: 4, gate_reduction: 2, ..Default::default() },
        gcn: GcnConfig { num_vertices: 4, gcn_pool: 2, adjacency_init_std: 0.1, vertex_weight_init_std: 0.5 },
        input_size: input,
        ..Default::default()
    }
}

fn random_batch<T: auxcount_core::Scalar>(n: usize, side: usize, seed: u64, cfg: &ModelConfig) -> Result<(Tensor<T>, auxcount_core::losses::BatchTargets<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let points = (0..6 + 3 * i)
                .map(|_| (rng.random_range(2.0..side as f64 - 2.0), rng.random_range(2.0..side as f64 - 2.0)))
                .collect();
            let ann = PointAnnotation { image_id: format!("r{i}"), points };
            Ok(auxcount_core::groundtruth::Sample {
                image: Tensor::randn(&[3, side, side], 1.0, &mut rng),
                targets: Targets::from_points(&ann, (side, side), 2.0, cfg.levels)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collate(&samples, cfg.density_scale)?)
}

fn ac4() -> Result<Outcome> {
    let cfg = tiny_model_config(32);
    let mut model = CountingModel::<f64>::new(&cfg, 4)?;
    // The density head starts at zero weight, which blocks every gradient above it; give it
    // positive weights so the check covers the density branch and the graph module too.
    let head = model.heads.density.weight;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let n = model.store.get(head).numel();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    model.store.get_mut(head).data_mut().copy_from_slice(&w);
    let (images, targets) = random_batch::<f64>(2, 32, 44, &cfg)?;
    let loss = LossConfig::default();
    let step = model.loss_and_grads(&images, &targets, &loss)?;
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut checked = 0;
    let mut nonzero = 0;
    let mut skipped = 0;
    while checked < AC4_COORDS && skipped <= AC4_MAX_KINKS {
        // A random tensor, then a random entry, so small tensors are sampled too.
        let (id, grad) = &step.grads[rng.random_range(0..step.grads.len())];
        let id = *id;
        let i = rng.random_range(0..grad.numel());
        let analytic = grad.data()[i];
        let orig = model.store.get(id).data()[i];
        let mut at = |delta: f64| -> Result<f64> {
            model.store.get_mut(id).data_mut()[i] = orig + delta;
            Ok(model.loss(&images, &targets, &loss, Mode::Train)?.0)
        };
        let h = AC4_STEP;
        let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
        model.store.get_mut(id).data_mut()[i] = orig;
        let c1 = (p1 - m1) / (2.0 * h);
        let c2 = (p2 - m2) / (4.0 * h);
        // Central differences at h and 2h agree closely on smooth stretches; when they do
        // not, a ReLU or max-pool switch lies inside the stencil and the point is resampled.
        if (c1 - c2).abs() > AC4_REL_TOL * c1.abs().max(c2.abs()).max(AC4_FLOOR) {
            skipped += 1;
            continue;
        }
        // Richardson extrapolation of the two (fourth-order accurate).
        let numeric = (4.0 * c1 - c2) / 3.0;
        // Relative error against the larger magnitude, with an absolute floor for
        // coordinates whose gradient is numerically zero.
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(AC4_FLOOR);
        if err > worst {
            worst = err;
            worst_name = format!("{}[{i}]", model.store.name(id));
        }
        nonzero += usize::from(analytic != 0.0);
        checked += 1;
    }
    Ok(Outcome {
        pass: worst < AC4_REL_TOL && checked == AC4_COORDS,
        detail: format!("{checked} coordinates ({nonzero} with non-zero gradient, {skipped} resampled at kinks), worst relative error {worst:.2e} at {worst_name} (tol {AC4_REL_TOL:.0e})"),
    })
}

fn ac5() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut mass_worst: f64 = 0.0;
    let mut masks_ok = true;
    let mut bounds_ok = true;
    for trial in 0..50 {
        let (h, w) = (rng.random_range(48..96usize), rng.random_range(48..96usize));
        let sigma: f64 = rng.random_range(1.0..4.0);
        let margin = 4.0 * sigma + 1.0;
        let n = rng.random_range(1..40);
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(margin..h as f64 - margin), rng.random_range(margin..w as f64 - margin)))
            .collect();
        let ann = PointAnnotation { image_id: format!("t{trial}"), points };
        let density: Grid<f64> = generate_density_map(&ann, (h, w), sigma)?;
        let sum: f64 = density.data.iter().sum();
        mass_worst = mass_worst.max((sum - n as f64).abs() / n as f64);

        let crowd = generate_crowd_mask(&density);
        masks_ok &= crowd.data.iter().zip(&density.data).all(|(&m, &d)| m == u8::from(d > 0.0));

        let levels = rng.random_range(1..8usize);
        let mask = generate_density_level_mask(&density, levels)?;
        let (lo, hi) = density.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for (&cls, &d) in mask.grid.data.iter().zip(&density.data) {
            let norm = (d - lo) / (hi - lo);
            let want = ((norm * levels as f64).floor() as u32 + 1).min(levels as u32 + 1);
            masks_ok &= cls == want;
            if d == lo {
                bounds_ok &= cls == 1;
            }
            if d == hi {
                bounds_ok &= cls == levels as u32 + 1;
            }
        }
    }
    Ok(Outcome {
        pass: mass_worst < AC5_MASS_TOL && masks_ok && bounds_ok,
        detail: format!(
            "max relative mass error {mass_worst:.2e} (tol {AC5_MASS_TOL:.0e}); mask oracles {}; boundary classes {}",
            if masks_ok { "equal" } else { "DIFFER" },
            if bounds_ok { "ok" } else { "WRONG" }
        ),
    })
}

fn ac6() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let grid = |rng: &mut ChaCha8Rng, h: usize, w: usize| Grid::<f64> {
        height: h,
        width: w,
        data: (0..h * w).map(|_| rng.random_range(0.0..0.05)).collect(),
    };
    let (h, w) = (32, 40);
    let preds: Vec<_> = (0..50).map(|_| grid(&mut rng, h, w)).collect();
    let gts: Vec<_> = (0..50).map(|_| grid(&mut rng, h, w)).collect();
    let pairs: Vec<CountPair> =
        preds.iter().zip(&gts).map(|(p, g)| CountPair { predicted: map_count(p), actual: map_count(g) }).collect();
    let (mae, rmse) = mae_rmse(&pairs)?;
    let game0 = game(&preds, &gts, 0)?;
    let exact = game0 == mae;

    let mut monotone = true;
    let mut prev = game0;
    for level in 1..=4 {
        let g = game(&preds, &gts, level)?;
        monotone &= g >= prev - 1e-12;
        prev = g;
    }

    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for (p, g) in preds.iter().zip(&gts) {
        let mut pc = 0.0;
        let mut gc = 0.0;
        for r in 0..h {
            for c in 0..w {
                pc += p.data[r * w + c];
                gc += g.data[r * w + c];
            }
        }
        abs_sum += (pc - gc).abs();
        sq_sum += (pc - gc) * (pc - gc);
    }
    let mae_ref = abs_sum / 50.0;
    let rmse_ref = (sq_sum / 50.0).sqrt();
    let err = (mae - mae_ref).abs().max((rmse - rmse_ref).abs());
    Ok(Outcome {
        pass: exact && monotone && err < AC6_TOL,
        detail: format!(
            "GAME(0) {} MAE; GAME monotone over L=0..4: {monotone}; MAE/RMSE oracle error {err:.1e} (tol {AC6_TOL:.0e})",
            if exact { "==" } else { "!=" }
        ),
    })
}

fn synthetic(n: usize, size: usize, val_fraction: f64, seed: u64) -> Result<(tempfile::TempDir, Dataset<f32>, Option<Dataset<f32>>)> {
    let dir = tempfile::tempdir()?;
    let cfg = SynthConfig { n, size, val_fraction, seed, ..Default::default() };
    let m = make_synthetic(&cfg, dir.path())?;
    let train = Dataset::load(&m.split(Split::Train), 4.0, 4)?;
    let val_entries = m.split(Split::Val);
    let val = if val_entries.is_empty() { None } else { Some(Dataset::load(&val_entries, 4.0, 4)?) };
    Ok((dir, train, val))
}

fn ac7() -> Result<Outcome> {
    let started = Instant::now();
    let (_dir, data, _) = synthetic(4, 128, 0.0, 7)?;
    let mut cfg = RunConfig::default();
    cfg.model.gcn.gcn_pool = 4;
    let mut model = CountingModel::<f32>::new(&cfg.model, 0)?;
    let mut adam = Adam::new(&model.store, cfg.optim.adam);
    let samples: Vec<_> = data.samples.iter().map(|s| pad_sample(s, 128, 128)).collect();
    let mean = data.counts().iter().sum::<f64>() / data.len() as f64;
    let mut best = f64::INFINITY;
    let mut iters = 0;
    for it in 0..AC7_MAX_ITERS {
        let (x, targets) = collate(std::slice::from_ref(&samples[it % samples.len()]), cfg.model.density_scale)?;
        let out = model.loss_and_grads(&x, &targets, &cfg.loss)?;
        adam.update(&mut model.store, &out.grads, AC7_LR);
        update_running_stats(&mut model.store, &out.batch_stats, cfg.optim.bn_momentum as f32);
        iters = it + 1;
        if iters % AC7_EVAL_EVERY == 0 {
            let (report, _) = evaluate_dataset(&model, &data)?;
            best = best.min(report.mae);
            if report.mae < AC7_MAE_FRACTION * mean {
                break;
            }
        }
    }
    Ok(Outcome {
        pass: best < AC7_MAE_FRACTION * mean,
        detail: format!(
            "{} params, {iters} iterations, train MAE {best:.3} vs limit {:.3} ({:.1}% of mean count {mean:.2}), {:.0}s",
            model.num_parameters(),
            AC7_MAE_FRACTION * mean,
            100.0 * best / mean,
            started.elapsed().as_secs_f64()
        ),
    })
}

fn ablation_config(preset: Preset, seed: u64) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    c.preset = Some(preset);
    c.model.backbone.trunk_width_div = 8;
    c.model.input_size = 64;
    c.model.gcn.gcn_pool = 4;
    c.optim.lr = 1e-3;
    c.optim.lr_min = 1e-5;
    c.optim.epochs = AC8_EPOCHS;
    c.optim.batch_size = 8;
    c.optim.seed = seed;
    c.resolve()?;
    Ok(c)
}

fn ac8() -> Result<Outcome> {
    let started = Instant::now();
    let (_dir, train, val) = synthetic(64, 64, 0.25, 8)?;
    let val = val.expect("validation split");
    let presets = [Preset::SingleColumn, Preset::BothAuxiliary, Preset::Full];
    let mut means = Vec::new();
    let mut lines = Vec::new();
    for preset in presets {
        let mut maes = Vec::new();
        for seed in AC8_SEEDS {
            let out = train_on(&ablation_config(preset, seed)?, &train, Some(&val), &TrainIo::default())?;
            maes.push(out.history.last().and_then(|r| r.val_mae).expect("validated every epoch"));
        }
        let mean = maes.iter().sum::<f64>() / maes.len() as f64;
        lines.push(format!("{preset:?}: {mean:.3} {maes:.3?}"));
        means.push(mean);
    }
    Ok(Outcome {
        pass: means[0] >= means[1] && means[1] >= means[2],
        detail: format!("val MAE means {}; {:.0}s", lines.join(", "), started.elapsed().as_secs_f64()),
    })
}

fn ac9() -> Result<Outcome> {
    let (dir, train, _) = synthetic(6, 32, 0.0, 9)?;
    let mut cfg = RunConfig::default();
    cfg.model = tiny_model_config(32);
    cfg.optim.epochs = 1;
    cfg.optim.batch_size = 2;
    cfg.optim.lr = 1e-3;
    cfg.optim.seed = 99;
    cfg.output_dir = dir.path().join("run");
    let trace = |out: &auxcount::train::TrainOutcome<f32>| -> Vec<f64> { out.steps.iter().filter(|s| s.epoch == 0).map(|s| s.total).collect() };
    let a = train_on(&cfg, &train, None, &TrainIo::default())?;
    let b = train_on(&cfg, &train, None, &TrainIo { output_dir: Some(cfg.output_dir.clone()) })?;
    let same_trace = trace(&a) == trace(&b) && !trace(&a).is_empty();

    let path = b.last_checkpoint.clone().expect("checkpoint written");
    let restored = Checkpoint::<f32>::load(&path)?.model()?;
    let (images, _) = random_batch::<f32>(3, 32, 909, &cfg.model)?;
    let before = b.model.infer_batch(&images)?;
    let after = restored.infer_batch(&images)?;
    let same_forward = before.0 == after.0 && before.1 == after.1 && before.2 == after.2;
    ensure!(before.0.all_finite(), "non-finite forward output");
    Ok(Outcome {
        pass: same_trace && same_forward,
        detail: format!(
            "first-epoch trace of {} steps {}; checkpoint forward outputs {}",
            trace(&a).len(),
            if same_trace { "identical" } else { "DIFFERS" },
            if same_forward { "bit-identical" } else { "DIFFER" }
        ),
    })
}

type Criterion = (&'static str, &'static str, fn() -> Result<Outcome>);

fn main() {
    let criteria: [Criterion; 9] = [
        ("AC1", "loss oracle equivalence", ac1),
        ("AC2", "constant-offset invariance of the contrastive loss", ac2),
        ("AC3", "graph reasoning oracle", ac3),
        ("AC4", "full-model gradient check", ac4),
        ("AC5", "ground-truth invariants", ac5),
        ("AC6", "metric identities", ac6),
        ("AC7", "tiny overfit", ac7),
        ("AC8", "ablation ordering", ac8),
        ("AC9", "determinism and persistence", ac9),
    ];
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC")).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.iter().any(|s| s == id) {
            continue;
        }
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        failed += usize::from(!pass);
        println!("[{}] {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
