//! Training objective: crowd BCE, level CCE, density MSE and the dilated contrastive
//! density loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{self, ConvGeom, NEIGHBOUR_OFFSETS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the cross-entropies.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcdReduction {
    /// Divide by the number of contributing pixels.
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub dcd_dilation: usize,
    pub dcd_reduction: DcdReduction,
    /// Pixels this close to an edge are left out of the contrastive loss.
    pub dcd_border: usize,
    pub no_dcd: bool,
    pub no_lcs: bool,
    pub no_lds: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            dcd_dilation: 2,
            dcd_reduction: DcdReduction::Mean,
            dcd_border: 0,
            no_dcd: false,
            no_lcs: false,
            no_lds: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.dcd_dilation) {
            return Err(Error::InvalidArgument(format!("dcd_dilation must be in 1..=4, got {}", self.dcd_dilation)));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::InvalidArgument(format!("gamma must be finite and non-negative, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Eight 3x3 difference kernels: `+1` at the centre and `-1` at one neighbour, applied
/// with the given dilation.
#[derive(Clone, Debug, PartialEq)]
pub struct DcdKernelBank {
    pub dilation: usize,
    pub kernels: [[[i8; 3]; 3]; 8],
}

impl DcdKernelBank {
    pub fn new(dilation: usize) -> Result<Self> {
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be positive".into()));
        }
        let mut kernels = [[[0i8; 3]; 3]; 8];
        for (k, (oy, ox)) in kernels.iter_mut().zip(NEIGHBOUR_OFFSETS) {
            k[1][1] = 1;
            k[(1 + oy) as usize][(1 + ox) as usize] = -1;
        }
        let bank = DcdKernelBank { dilation, kernels };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = Vec::new();
        for k in &self.kernels {
            let flat: Vec<i8> = k.iter().flatten().copied().collect();
            let plus = flat.iter().filter(|&&v| v == 1).count();
            let minus: Vec<usize> = (0..9).filter(|&i| flat[i] == -1).collect();
            let zeros = flat.iter().filter(|&&v| v == 0).count();
            if k[1][1] != 1 || plus != 1 || minus.len() != 1 || zeros != 7 || seen.contains(&minus[0]) {
                return Err(Error::InvalidArgument(format!("invalid contrastive kernel {k:?}")));
            }
            seen.push(minus[0]);
        }
        Ok(())
    }

    /// Offsets of the non-zero taps of each kernel relative to its centre, in pixels.
    pub fn taps(&self) -> Vec<[(isize, isize, i8); 2]> {
        let d = self.dilation as isize;
        self.kernels
            .iter()
            .map(|k| {
                let mut out = [(0, 0, 0); 2];
                let mut n = 0;
                for (y, row) in k.iter().enumerate() {
                    for (x, &v) in row.iter().enumerate() {
                        if v != 0 {
                            out[n] = ((y as isize - 1) * d, (x as isize - 1) * d, v);
                            n += 1;
                        }
                    }
                }
                out
            })
            .collect()
    }

    pub fn receptive_field(&self) -> usize {
        2 * self.dilation + 1
    }

    /// `8 x 1 x 3 x 3` weight tensor.
    pub fn weight<T: Scalar>(&self) -> Tensor<T> {
        let data = self.kernels.iter().flatten().flatten().map(|&v| T::of(v as f64)).collect();
        Tensor::from_vec(&[8, 1, 3, 3], data).expect("bank shape")
    }
}

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean binary cross-entropy of crowd probabilities against a 0/1 mask.
pub fn loss_cs<T: Scalar>(m_cs: &Tensor<T>, mask: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let p = g.constant(m_cs.clone());
    let l = g.bce_mean(p, mask, T::of(PROB_EPS))?;
    Ok(g.value(l).data()[0])
}

/// Mean categorical cross-entropy against 1-based level labels.
pub fn loss_ds<T: Scalar>(m_ds: &Tensor<T>, labels: &[u32]) -> Result<T> {
    let mut g = Graph::new();
    let p = g.constant(m_ds.clone());
    let l = g.cce_mean(p, labels, T::of(PROB_EPS))?;
    Ok(g.value(l).data()[0])
}

/// Mean squared pixel error.
pub fn loss_dp<T: Scalar>(m_d: &Tensor<T>, density: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let p = g.constant(m_d.clone());
    let l = g.mse_mean(p, density)?;
    Ok(g.value(l).data()[0])
}

/// Contrastive density loss evaluated by convolving the residual with the kernel bank.
pub fn loss_dcd<T: Scalar>(
    m_d: &Tensor<T>,
    density: &Tensor<T>,
    bank: &DcdKernelBank,
    reduction: DcdReduction,
    border: usize,
) -> Result<T> {
    check_same(m_d, density, "dcd")?;
    bank.validate()?;
    let (n, c, h, w) = m_d.dims4();
    let mut r = m_d.clone();
    for (v, t) in r.data_mut().iter_mut().zip(density.data()) {
        *v -= *t;
    }
    let r = r.reshape(&[n * c, 1, h, w])?;
    let geom = ConvGeom { pad: bank.dilation, dilation: bank.dilation };
    let resp = kernels::conv2d_forward(&r, &bank.weight(), None, geom);
    let (y0, y1) = (border.min(h), h.saturating_sub(border));
    let (x0, x1) = (border.min(w), w.saturating_sub(border));
    let mut total = T::zero();
    for plane in resp.data().chunks(h * w) {
        for y in y0..y1 {
            for x in x0..x1 {
                let v = plane[y * w + x];
                total += v * v;
            }
        }
    }
    let pixels = n * c * y1.saturating_sub(y0) * x1.saturating_sub(x0);
    Ok(match reduction {
        DcdReduction::Mean if pixels > 0 => total / T::from_usize_lossy(pixels),
        _ => total,
    })
}

/// Per-term loss values; disabled terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents<T> {
    pub cs: Option<T>,
    pub ds: Option<T>,
    pub dp: T,
    pub dcd: Option<T>,
}

impl<T: Scalar> LossComponents<T> {
    pub fn check_finite(&self) -> Result<()> {
        let named = [("L_CS", self.cs), ("L_DS", self.ds), ("L_Dp", Some(self.dp)), ("L_DCD", self.dcd)];
        for (name, v) in named {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss(name));
            }
        }
        Ok(())
    }

    pub fn to_f64(&self) -> LossComponents<f64> {
        LossComponents {
            cs: self.cs.map(T::to_f64_lossy),
            ds: self.ds.map(T::to_f64_lossy),
            dp: self.dp.to_f64_lossy(),
            dcd: self.dcd.map(T::to_f64_lossy),
        }
    }
}

/// `L_CS + L_DS + gamma * (L_Dp + L_DCD)` over the enabled terms.
pub fn loss_total<T: Scalar>(c: &LossComponents<T>, gamma: T) -> Result<T> {
    c.check_finite()?;
    let zero = T::zero();
    Ok(c.cs.unwrap_or(zero) + c.ds.unwrap_or(zero) + gamma * (c.dp + c.dcd.unwrap_or(zero)))
}

/// Targets for a batch at input resolution.
#[derive(Clone, Debug)]
pub struct BatchTargets<T> {
    /// `N x 1 x H x W`, already multiplied by the density scale.
    pub density: Tensor<T>,
    /// `N x 1 x H x W` of 0/1.
    pub crowd: Tensor<T>,
    /// `N * H * W` 1-based level classes.
    pub levels: Vec<u32>,
}

/// Graph nodes of the objective.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub cs: Option<Var>,
    pub ds: Option<Var>,
    pub dp: Var,
    pub dcd: Option<Var>,
    pub total: Var,
}

impl Objective {
    pub fn components<T: Scalar>(&self, g: &Graph<T>) -> LossComponents<T> {
        let v = |x: Var| g.value(x).data()[0];
        LossComponents { cs: self.cs.map(v), ds: self.ds.map(v), dp: v(self.dp), dcd: self.dcd.map(v) }
    }
}

/// Builds the objective on the tape. Auxiliary terms are skipped when their prediction is
/// absent or the matching flag is set.
pub fn build_objective<T: Scalar>(
    g: &mut Graph<T>,
    m_cs: Option<Var>,
    m_ds: Option<Var>,
    m_d: Var,
    targets: &BatchTargets<T>,
    cfg: &LossConfig,
) -> Result<Objective> {
    let eps = T::of(PROB_EPS);
    let cs = match m_cs {
        Some(p) if !cfg.no_lcs => Some(g.bce_mean(p, &targets.crowd, eps)?),
        _ => None,
    };
    let ds = match m_ds {
        Some(p) if !cfg.no_lds => Some(g.cce_mean(p, &targets.levels, eps)?),
        _ => None,
    };
    let dp = g.mse_mean(m_d, &targets.density)?;
    let dcd = if cfg.no_dcd {
        None
    } else {
        let mean = cfg.dcd_reduction == DcdReduction::Mean;
        Some(g.dcd(m_d, &targets.density, cfg.dcd_dilation, cfg.dcd_border, mean)?)
    };
    let objective = Objective { cs, ds, dp, dcd, total: dp };
    objective.components(g).check_finite()?;
    let gamma = T::of(cfg.gamma);
    let mut terms: Vec<(Var, T)> = Vec::new();
    terms.extend(cs.map(|v| (v, T::one())));
    terms.extend(ds.map(|v| (v, T::one())));
    terms.push((dp, gamma));
    terms.extend(dcd.map(|v| (v, gamma)));
    Ok(Objective { total: g.weighted_sum(&terms), ..objective })
}
