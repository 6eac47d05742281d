//! The full counting network: backbone, heads and optional graph reasoning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BranchFeatures, BranchLayout, GateOverrides};
use crate::error::{Error, Result};
use crate::gcn::{GcnConfig, GcnModule};
use crate::graph::Var;
use crate::groundtruth::{CrowdMask, DensityLevelMask, DensityMap, Grid, Sample};
use crate::heads::{Heads, TaskPredictions};
use crate::losses::{build_objective, BatchTargets, LossComponents, LossConfig, Objective};
use crate::metrics;
use crate::nn::{BatchStats, Mode, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Structural switches used by the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub crowd_seg: bool,
    pub density_seg: bool,
    /// Attention gates and CS -> DS -> DM chaining.
    pub adaptive: bool,
    /// Graph reasoning; needs both auxiliary branches.
    pub gcn: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { crowd_seg: true, density_seg: true, adaptive: true, gcn: true }
    }
}

/// Named ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    SingleColumn,
    CrowdSeg,
    DensitySeg,
    BothAuxiliary,
    AdaptiveCrowdSeg,
    AdaptiveDensitySeg,
    BothAdaptiveAuxiliary,
    Full,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::SingleColumn,
        Preset::CrowdSeg,
        Preset::DensitySeg,
        Preset::BothAuxiliary,
        Preset::AdaptiveCrowdSeg,
        Preset::AdaptiveDensitySeg,
        Preset::BothAdaptiveAuxiliary,
        Preset::Full,
    ];

    pub fn ablation(self) -> AblationConfig {
        let (crowd_seg, density_seg, adaptive, gcn) = match self {
            Preset::SingleColumn => (false, false, false, false),
            Preset::CrowdSeg => (true, false, false, false),
            Preset::DensitySeg => (false, true, false, false),
            Preset::BothAuxiliary => (true, true, false, false),
            Preset::AdaptiveCrowdSeg => (true, false, true, false),
            Preset::AdaptiveDensitySeg => (false, true, true, false),
            Preset::BothAdaptiveAuxiliary => (true, true, true, false),
            Preset::Full => (true, true, true, true),
        };
        AblationConfig { crowd_seg, density_seg, adaptive, gcn }
    }

    /// Applies the variant's structure and loss switches.
    pub fn apply(self, model: &mut ModelConfig, loss: &mut LossConfig) {
        model.ablation = self.ablation();
        let single = self == Preset::SingleColumn;
        loss.no_dcd = single;
        loss.no_lcs = single;
        loss.no_lds = single;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub gcn: GcnConfig,
    /// Number of density levels `L`; the level head has `L + 1` classes.
    pub levels: usize,
    /// Side of the square training input. Graph reasoning is built for this size and larger
    /// images are processed in tiles of it.
    pub input_size: usize,
    /// Density targets are multiplied by this; counts divide it back out.
    pub density_scale: f64,
    pub ablation: AblationConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            gcn: GcnConfig::default(),
            levels: 4,
            input_size: 128,
            density_scale: 100.0,
            ablation: AblationConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn level_classes(&self) -> usize {
        self.levels + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.levels == 0 {
            return bad("levels must be positive".into());
        }
        if !(self.density_scale.is_finite() && self.density_scale > 0.0) {
            return bad(format!("density_scale must be positive, got {}", self.density_scale));
        }
        let m = self.backbone.input_multiple();
        if self.input_size == 0 || self.input_size % m != 0 {
            return bad(format!("input_size {} must be a positive multiple of {m}", self.input_size));
        }
        let a = &self.ablation;
        if a.gcn && !(a.crowd_seg && a.density_seg) {
            return bad("graph reasoning needs both auxiliary branches".into());
        }
        if a.gcn {
            let branch = self.input_size / self.backbone.fused_stride();
            if self.gcn.gcn_pool == 0 || branch % self.gcn.gcn_pool != 0 {
                return bad(format!("branch resolution {branch} is not divisible by gcn_pool {}", self.gcn.gcn_pool));
            }
        }
        Ok(())
    }
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub features: BranchFeatures,
    /// Density features after graph reasoning (equal to `features.dm` without it).
    pub f_dm_prime: Var,
    /// Heads at branch resolution.
    pub low: TaskPredictions,
    /// Heads resized to the input resolution.
    pub m_cs: Option<Var>,
    pub m_ds: Option<Var>,
    pub m_d: Var,
}

/// Per-image inference result at the image's own resolution.
#[derive(Clone, Debug)]
pub struct ImagePrediction<T> {
    /// Density in objects per pixel (the density scale divided out).
    pub density: DensityMap<T>,
    pub crowd: Option<CrowdMask>,
    pub levels: Option<DensityLevelMask>,
    pub count: f64,
}

/// Stacks samples into an image batch and scaled targets.
pub fn collate<T: Scalar>(samples: &[Sample<T>], density_scale: f64) -> Result<(Tensor<T>, BatchTargets<T>)> {
    let first = samples.first().ok_or(Error::Empty("batch"))?;
    let (h, w) = first.shape();
    let c = first.image.shape()[0];
    let mut images = Vec::with_capacity(samples.len());
    let mut density = Vec::with_capacity(samples.len() * h * w);
    let mut crowd = Vec::with_capacity(samples.len() * h * w);
    let mut levels = Vec::with_capacity(samples.len() * h * w);
    let scale = T::of(density_scale);
    for s in samples {
        if s.shape() != (h, w) {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", s.shape(), (h, w))));
        }
        images.push(s.image.clone().reshape(&[1, c, h, w])?);
        density.extend(s.targets.density.data.iter().map(|&v| v * scale));
        crowd.extend(s.targets.crowd.data.iter().map(|&v| T::from_usize_lossy(v as usize)));
        levels.extend_from_slice(&s.targets.levels.grid.data);
    }
    let n = samples.len();
    Ok((
        Tensor::stack(&images)?,
        BatchTargets {
            density: Tensor::from_vec(&[n, 1, h, w], density)?,
            crowd: Tensor::from_vec(&[n, 1, h, w], crowd)?,
            levels,
        },
    ))
}

/// Result of one differentiated training pass.
pub struct StepOutput<T> {
    pub components: LossComponents<T>,
    pub total: T,
    pub grads: Vec<(ParamId, Tensor<T>)>,
    pub batch_stats: Vec<BatchStats<T>>,
}

#[derive(Clone, Debug)]
pub struct CountingModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub gcn: Option<GcnModule>,
    pub heads: Heads,
}

impl<T: Scalar> CountingModel<T> {
    /// Builds a randomly initialized model; the same seed gives the same weights.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = config.ablation;
        let layout = BranchLayout { crowd_seg: a.crowd_seg, density_seg: a.density_seg, adaptive: a.adaptive };
        let backbone = Backbone::new(&mut store, &config.backbone, layout, &mut rng)?;
        let c = config.backbone.branch_channels;
        let lc = config.level_classes();
        let heads = Heads::new(&mut store, c, lc, a.crowd_seg, a.density_seg, &mut rng);
        let gcn = if a.gcn {
            let side = config.input_size / config.backbone.fused_stride();
            Some(GcnModule::new(&mut store, &config.gcn, c, lc, (side, side), &mut rng)?)
        } else {
            None
        };
        Ok(CountingModel { config: config.clone(), store, backbone, gcn, heads })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.ids().filter(|&id| self.store.is_trainable(id)).map(|id| self.store.get(id).numel()).sum()
    }

    /// Forward pass for an `N x 3 x H x W` input.
    pub fn forward(&self, s: &mut Session<'_, T>, x: Var, overrides: &GateOverrides) -> Result<ForwardOutput> {
        let (_, _, h, w) = s.value(x).dims4();
        if self.gcn.is_some() && (h, w) != (self.config.input_size, self.config.input_size) {
            return Err(Error::Shape(format!(
                "this model takes {0}x{0} inputs, got {h}x{w}",
                self.config.input_size
            )));
        }
        let features = self.backbone.forward(s, x, overrides)?;
        let m_cs_low = match features.cs {
            Some(f) => self.heads.crowd(s, f)?,
            None => None,
        };
        let m_ds_low = match features.ds {
            Some(f) => self.heads.levels(s, f)?,
            None => None,
        };
        let f_dm_prime = match (&self.gcn, m_cs_low, m_ds_low) {
            (Some(g), Some(cs), Some(ds)) => g.forward(s, features.dm, cs, ds)?,
            _ => features.dm,
        };
        let m_d_low = self.heads.density(s, f_dm_prime)?;
        let m_cs = m_cs_low.map(|v| s.graph.upsample(v, h, w));
        let m_ds = m_ds_low.map(|v| s.graph.upsample(v, h, w));
        let m_d = s.graph.upsample(m_d_low, h, w);
        Ok(ForwardOutput {
            features,
            f_dm_prime,
            low: TaskPredictions { m_cs: m_cs_low, m_ds: m_ds_low, m_d: m_d_low },
            m_cs,
            m_ds,
            m_d,
        })
    }

    pub fn objective(
        &self,
        s: &mut Session<'_, T>,
        out: &ForwardOutput,
        targets: &BatchTargets<T>,
        loss: &LossConfig,
    ) -> Result<Objective> {
        build_objective(&mut s.graph, out.m_cs, out.m_ds, out.m_d, targets, loss)
    }

    /// Loss value only, in the given mode.
    pub fn loss(&self, images: &Tensor<T>, targets: &BatchTargets<T>, loss: &LossConfig, mode: Mode) -> Result<(T, LossComponents<T>)> {
        let mut s = Session::new(&self.store, mode);
        let x = s.input(images.clone());
        let out = self.forward(&mut s, x, &GateOverrides::default())?;
        let obj = self.objective(&mut s, &out, targets, loss)?;
        Ok((s.value(obj.total).data()[0], obj.components(&s.graph)))
    }

    /// Training-mode loss with parameter gradients and observed batch statistics.
    pub fn loss_and_grads(&self, images: &Tensor<T>, targets: &BatchTargets<T>, loss: &LossConfig) -> Result<StepOutput<T>> {
        let mut s = Session::new(&self.store, Mode::Train);
        let x = s.input(images.clone());
        let out = self.forward(&mut s, x, &GateOverrides::default())?;
        let obj = self.objective(&mut s, &out, targets, loss)?;
        Ok(StepOutput {
            components: obj.components(&s.graph),
            total: s.value(obj.total).data()[0],
            grads: s.gradients(obj.total),
            batch_stats: s.batch_stats(),
        })
    }

    /// Inference on a batch whose size the model accepts directly. Returns the input-resolution
    /// density (scale divided out), crowd and level probabilities.
    pub fn infer_batch(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>, Option<Tensor<T>>)> {
        let mut s = Session::new(&self.store, Mode::Eval);
        let x = s.input(images.clone());
        let out = self.forward(&mut s, x, &GateOverrides::default())?;
        let inv = T::one() / T::of(self.config.density_scale);
        let density = s.value(out.m_d).map(|v| v * inv);
        let cs = out.m_cs.map(|v| s.value(v).clone());
        let ds = out.m_ds.map(|v| s.value(v).clone());
        Ok((density, cs, ds))
    }

    /// Side of the square tiles used for whole-image inference, if the model needs them.
    fn tile(&self) -> Option<usize> {
        self.gcn.as_ref().map(|_| self.config.input_size)
    }

    /// Predicts one `3 x H x W` image of any size. Models with graph reasoning see
    /// zero-padded tiles of the training size; others see the image padded to the trunk's
    /// stride.
    pub fn predict_image(&self, image: &Tensor<T>) -> Result<ImagePrediction<T>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!("expected a 3 x H x W image, got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        let m = self.config.backbone.input_multiple();
        let (th, tw) = match self.tile() {
            Some(t) => (t, t),
            None => (h.div_ceil(m) * m, w.div_ceil(m) * m),
        };
        let lc = self.config.level_classes();
        let mut density = vec![T::zero(); h * w];
        let mut crowd_p: Option<Vec<T>> = None;
        let mut level_p: Option<Vec<T>> = None;
        for top in (0..h).step_by(th) {
            for left in (0..w).step_by(tw) {
                let mut tile = Tensor::zeros(&[1, 3, th, tw]);
                let (vh, vw) = ((h - top).min(th), (w - left).min(tw));
                for c in 0..3 {
                    for r in 0..vh {
                        let src = (c * h + top + r) * w + left;
                        let dst = (c * th + r) * tw;
                        tile.data_mut()[dst..dst + vw].copy_from_slice(&image.data()[src..src + vw]);
                    }
                }
                let (d, cs, ds) = self.infer_batch(&tile)?;
                let put = |dst: &mut [T], src: &[T], channels: usize| {
                    for c in 0..channels {
                        for r in 0..vh {
                            let s0 = (c * th + r) * tw;
                            let d0 = (c * h + top + r) * w + left;
                            dst[d0..d0 + vw].copy_from_slice(&src[s0..s0 + vw]);
                        }
                    }
                };
                put(&mut density, d.data(), 1);
                if let Some(cs) = cs {
                    put(crowd_p.get_or_insert_with(|| vec![T::zero(); h * w]), cs.data(), 1);
                }
                if let Some(ds) = ds {
                    put(level_p.get_or_insert_with(|| vec![T::zero(); lc * h * w]), ds.data(), lc);
                }
            }
        }
        let density = Grid { height: h, width: w, data: density };
        let count = metrics::map_count(&density);
        let crowd = crowd_p.map(|p| Grid { height: h, width: w, data: metrics::threshold(&p).into_iter().map(|v| v as u8).collect() });
        let levels = level_p.map(|p| DensityLevelMask {
            grid: Grid { height: h, width: w, data: metrics::argmax_classes(&p, lc, h * w) },
            levels: self.config.levels,
        });
        Ok(ImagePrediction { density, crowd, levels, count })
    }
}
