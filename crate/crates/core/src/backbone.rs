//! Shared feature extractor: a truncated VGG-16 trunk, feature-fuse blocks, and the three
//! attention-gated task branches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{BatchNorm, Conv2d, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Convolution widths of the first ten VGG-16 convolutions.
pub const VGG16_WIDTHS: [usize; 10] = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512];

/// A 2x2 max pool follows these convolutions (1-based).
pub const VGG16_POOL_AFTER: [usize; 3] = [2, 4, 7];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trunk {
    #[default]
    Vgg16Truncated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub trunk: Trunk,
    /// Divides every trunk width; 1 keeps the VGG-16 widths.
    pub trunk_width_div: usize,
    /// Batch normalization after each trunk convolution.
    pub trunk_batch_norm: bool,
    /// Trunk convolutions (1-based) whose outputs are fused, shallow to deep.
    pub fuse_stages: Vec<usize>,
    /// Channels of the fused map, which is also the branch input width.
    pub fuse_channels: usize,
    /// Output channels of each task branch.
    pub branch_channels: usize,
    /// Squeeze ratio inside the attention gates.
    pub gate_reduction: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            trunk: Trunk::Vgg16Truncated,
            trunk_width_div: 1,
            trunk_batch_norm: false,
            fuse_stages: vec![4, 7, 10],
            fuse_channels: 64,
            branch_channels: 32,
            gate_reduction: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.fuse_stages.len() < 2 {
            return bad(format!("at least two fuse stages are needed, got {:?}", self.fuse_stages));
        }
        if self.fuse_stages.windows(2).any(|w| w[0] >= w[1]) || self.fuse_stages.iter().any(|&s| s == 0 || s > 10) {
            return bad(format!("fuse stages must be increasing within 1..=10, got {:?}", self.fuse_stages));
        }
        if self.trunk_width_div == 0 || self.fuse_channels == 0 || self.branch_channels == 0 || self.gate_reduction == 0 {
            return bad("backbone widths and ratios must be positive".into());
        }
        Ok(())
    }

    pub fn trunk_widths(&self) -> Vec<usize> {
        VGG16_WIDTHS.iter().map(|w| (w / self.trunk_width_div).max(1)).collect()
    }

    /// Downsampling factor of the output of trunk convolution `stage` (1-based).
    pub fn stage_stride(stage: usize) -> usize {
        1 << VGG16_POOL_AFTER.iter().filter(|&&p| p < stage).count()
    }

    /// Overall input-to-fused-map stride.
    pub fn fused_stride(&self) -> usize {
        Self::stage_stride(self.fuse_stages[0])
    }

    /// Inputs must be divisible by this.
    pub fn input_multiple(&self) -> usize {
        Self::stage_stride(*self.fuse_stages.last().expect("validated"))
    }
}

/// Squeeze-and-excitation style channel gate.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub squeeze: Conv2d,
    pub norm: BatchNorm,
    pub excite: Conv2d,
}

impl AttentionGate {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = (channels / reduction).max(1);
        AttentionGate {
            squeeze: Conv2d::new(store, &format!("{name}.squeeze"), channels, hidden, 1, rng),
            norm: BatchNorm::new(store, &format!("{name}.bn"), hidden),
            excite: Conv2d::new(store, &format!("{name}.excite"), hidden, channels, 1, rng),
        }
    }

    /// Per-channel gate values in `(0, 1)`, shape `N x C x 1 x 1`.
    pub fn gate<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let pooled = s.graph.global_avg_pool(x);
        let h = self.squeeze.forward(s, pooled)?;
        let h = self.norm.forward(s, h);
        let h = s.graph.relu(h);
        let h = self.excite.forward(s, h)?;
        Ok(s.graph.sigmoid(h))
    }

    /// Gates `x`; `fixed` replaces the learned gate by a constant.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, fixed: Option<f64>) -> Result<Var> {
        let g = match fixed {
            Some(v) => {
                let (n, c, _, _) = s.value(x).dims4();
                s.input(Tensor::full(&[n, c, 1, 1], T::of(v)))
            }
            None => self.gate(s, x)?,
        };
        s.graph.mul_bcast(x, g)
    }
}

/// Replaces branch gates by constants; used to probe branch dependencies.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateOverrides {
    pub cs: Option<f64>,
    pub ds: Option<f64>,
    pub dm: Option<f64>,
}

/// Two-convolution task branch, optionally fed with earlier branch outputs.
#[derive(Clone, Debug)]
pub struct Branch {
    pub gate: Option<AttentionGate>,
    pub reduce: Conv2d,
    pub conv: Conv2d,
}

impl Branch {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &BackboneConfig,
        extra_inputs: usize,
        gated: bool,
        rng: &mut R,
    ) -> Self {
        let f = cfg.fuse_channels;
        let c = cfg.branch_channels;
        Branch {
            gate: gated.then(|| AttentionGate::new(store, &format!("{name}.gate"), f, cfg.gate_reduction, rng)),
            reduce: Conv2d::new(store, &format!("{name}.reduce"), f + extra_inputs * c, c, 1, rng),
            conv: Conv2d::new(store, &format!("{name}.conv"), c, c, 3, rng),
        }
    }

    fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        fused: Var,
        prior: &[Var],
        fixed: Option<f64>,
    ) -> Result<Var> {
        let x = match &self.gate {
            Some(g) => g.forward(s, fused, fixed)?,
            None => fused,
        };
        let x = if prior.is_empty() {
            x
        } else {
            let mut parts = vec![x];
            parts.extend_from_slice(prior);
            s.graph.concat(&parts)?
        };
        let x = self.reduce.forward(s, x)?;
        let x = s.graph.relu(x);
        let x = self.conv.forward(s, x)?;
        Ok(s.graph.relu(x))
    }
}

#[derive(Clone, Debug)]
struct FuseBlock {
    channel_match: Conv2d,
    conv: Conv2d,
}

/// Which branches exist and how they are wired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchLayout {
    pub crowd_seg: bool,
    pub density_seg: bool,
    /// Attention gates plus the CS -> DS -> DM feature chaining.
    pub adaptive: bool,
}

/// Branch outputs; auxiliary features are absent when their branch is disabled.
#[derive(Clone, Copy, Debug)]
pub struct BranchFeatures {
    pub cs: Option<Var>,
    pub ds: Option<Var>,
    pub dm: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub layout: BranchLayout,
    trunk: Vec<(Conv2d, Option<BatchNorm>)>,
    fuse: Vec<FuseBlock>,
    pub cs: Option<Branch>,
    pub ds: Option<Branch>,
    pub dm: Branch,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &BackboneConfig,
        layout: BranchLayout,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let widths = config.trunk_widths();
        let deepest = *config.fuse_stages.last().expect("validated");
        let mut trunk = Vec::with_capacity(deepest);
        let mut in_c = 3;
        for (i, &w) in widths.iter().take(deepest).enumerate() {
            let conv = Conv2d::new(store, &format!("trunk.conv{}", i + 1), in_c, w, 3, rng);
            let bn = config.trunk_batch_norm.then(|| BatchNorm::new(store, &format!("trunk.bn{}", i + 1), w));
            trunk.push((conv, bn));
            in_c = w;
        }
        let f = config.fuse_channels;
        let mut fuse = Vec::new();
        let mut deep_c = widths[deepest - 1];
        for (k, &stage) in config.fuse_stages.iter().rev().skip(1).enumerate() {
            fuse.push(FuseBlock {
                channel_match: Conv2d::new(store, &format!("ffb{k}.match"), deep_c, f, 1, rng),
                conv: Conv2d::new(store, &format!("ffb{k}.conv"), f + widths[stage - 1], f, 3, rng),
            });
            deep_c = f;
        }
        let a = layout.adaptive;
        let cs = layout.crowd_seg.then(|| Branch::new(store, "branch_cs", config, 0, a, rng));
        let ds_extra = usize::from(a && layout.crowd_seg);
        let ds = layout.density_seg.then(|| Branch::new(store, "branch_ds", config, ds_extra, a, rng));
        let dm_extra = if a { usize::from(layout.crowd_seg) + usize::from(layout.density_seg) } else { 0 };
        let dm = Branch::new(store, "branch_dm", config, dm_extra, a, rng);
        Ok(Backbone { config: config.clone(), layout, trunk, fuse, cs, ds, dm })
    }

    /// Runs the trunk and returns the tapped stage outputs, shallow to deep.
    pub fn trunk_forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Vec<Var>> {
        let shape = s.graph.shape(x).to_vec();
        let m = self.config.input_multiple();
        if shape.len() != 4 || shape[1] != 3 || shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(Error::Shape(format!("trunk needs N x 3 x H x W with H, W divisible by {m}, got {shape:?}")));
        }
        let mut taps = Vec::new();
        let mut h = x;
        for (i, (conv, bn)) in self.trunk.iter().enumerate() {
            let stage = i + 1;
            h = conv.forward(s, h)?;
            if let Some(bn) = bn {
                h = bn.forward(s, h);
            }
            h = s.graph.relu(h);
            if self.config.fuse_stages.contains(&stage) {
                taps.push(h);
            }
            if VGG16_POOL_AFTER.contains(&stage) && stage < self.trunk.len() {
                h = s.graph.max_pool2(h)?;
            }
        }
        Ok(taps)
    }

    /// Fuses stages deep to shallow; the result has the shallowest stage's resolution.
    pub fn ffb_fuse<T: Scalar>(&self, s: &mut Session<'_, T>, stages: &[Var]) -> Result<Var> {
        if stages.len() < 2 || stages.len() != self.fuse.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "feature fusion expects {} stages, got {}",
                self.fuse.len() + 1,
                stages.len()
            )));
        }
        let mut deep = *stages.last().expect("non-empty");
        for (block, &shallow) in self.fuse.iter().zip(stages.iter().rev().skip(1)) {
            let (n, _, h, w) = s.value(shallow).dims4();
            if s.value(deep).dims4().0 != n {
                return Err(Error::Shape("feature fusion: batch sizes differ".into()));
            }
            // A 1x1 convolution commutes with bilinear resizing, so match channels first.
            let matched = block.channel_match.forward(s, deep)?;
            let up = s.graph.upsample(matched, h, w);
            let cat = s.graph.concat(&[up, shallow])?;
            let conv = block.conv.forward(s, cat)?;
            deep = s.graph.relu(conv);
        }
        Ok(deep)
    }

    /// Runs the branches in the order CS, DS, DM.
    pub fn branch_forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        fused: Var,
        overrides: &GateOverrides,
    ) -> Result<BranchFeatures> {
        let chain = self.layout.adaptive;
        let cs = match &self.cs {
            Some(b) => Some(b.forward(s, fused, &[], overrides.cs)?),
            None => None,
        };
        let ds = match &self.ds {
            Some(b) => {
                let prior: Vec<Var> = if chain { cs.into_iter().collect() } else { Vec::new() };
                Some(b.forward(s, fused, &prior, overrides.ds)?)
            }
            None => None,
        };
        let prior: Vec<Var> = if chain { cs.into_iter().chain(ds).collect() } else { Vec::new() };
        let dm = self.dm.forward(s, fused, &prior, overrides.dm)?;
        Ok(BranchFeatures { cs, ds, dm })
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        overrides: &GateOverrides,
    ) -> Result<BranchFeatures> {
        let stages = self.trunk_forward(s, x)?;
        let fused = self.ffb_fuse(s, &stages)?;
        self.branch_forward(s, fused, overrides)
    }
}
