//! Prediction heads: crowd probability, density-level probabilities and density.

use rand::Rng;

use crate::error::Result;
use crate::graph::Var;
use crate::nn::{Conv2d, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Head outputs at branch resolution.
#[derive(Clone, Copy, Debug)]
pub struct TaskPredictions {
    /// `N x 1 x H x W` crowd probability.
    pub m_cs: Option<Var>,
    /// `N x Lc x H x W` level probabilities, softmax over channels.
    pub m_ds: Option<Var>,
    /// `N x 1 x H x W` non-negative density.
    pub m_d: Var,
}

pub const DENSITY_BIAS_INIT: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct Heads {
    pub cs: Option<Conv2d>,
    pub ds: Option<Conv2d>,
    pub density: Conv2d,
    pub level_classes: usize,
}

impl Heads {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        channels: usize,
        level_classes: usize,
        crowd_seg: bool,
        density_seg: bool,
        rng: &mut R,
    ) -> Self {
        let cs = crowd_seg.then(|| Conv2d::new(store, "head_cs", channels, 1, 1, rng));
        let ds = density_seg.then(|| Conv2d::new(store, "head_ds", channels, level_classes, 1, rng));
        // A randomly initialized 1x1 conv on non-negative features often starts negative at
        // every pixel, leaving the ReLU output dead; start flat at a small positive value.
        let weight = Tensor::zeros(&[1, channels, 1, 1]);
        let density = Conv2d::with_weight(store, "head_density", weight, 0, 1);
        if let Some(b) = density.bias {
            *store.get_mut(b) = Tensor::full(&[1], T::of(DENSITY_BIAS_INIT));
        }
        Heads { cs, ds, density, level_classes }
    }

    pub fn crowd<T: Scalar>(&self, s: &mut Session<'_, T>, f_cs: Var) -> Result<Option<Var>> {
        match &self.cs {
            Some(conv) => {
                let logits = conv.forward(s, f_cs)?;
                Ok(Some(s.graph.sigmoid(logits)))
            }
            None => Ok(None),
        }
    }

    pub fn levels<T: Scalar>(&self, s: &mut Session<'_, T>, f_ds: Var) -> Result<Option<Var>> {
        match &self.ds {
            Some(conv) => {
                let logits = conv.forward(s, f_ds)?;
                Ok(Some(s.graph.softmax(logits, 1)))
            }
            None => Ok(None),
        }
    }

    pub fn density<T: Scalar>(&self, s: &mut Session<'_, T>, f_dm: Var) -> Result<Var> {
        let d = self.density.forward(s, f_dm)?;
        Ok(s.graph.relu(d))
    }

    /// All heads at once; branches without a head are ignored.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        f_cs: Option<Var>,
        f_ds: Option<Var>,
        f_dm: Var,
    ) -> Result<TaskPredictions> {
        let m_cs = match f_cs {
            Some(f) => self.crowd(s, f)?,
            None => None,
        };
        let m_ds = match f_ds {
            Some(f) => self.levels(s, f)?,
            None => None,
        };
        Ok(TaskPredictions { m_cs, m_ds, m_d: self.density(s, f_dm)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_features_give_half_and_uniform() {
        let mut store = ParamStore::<f64>::new();
        let heads = Heads::new(&mut store, 6, 5, true, true, &mut ChaCha8Rng::seed_from_u64(0));
        let mut s = Session::new(&store, Mode::Eval);
        let f = s.input(Tensor::zeros(&[1, 6, 3, 3]));
        let p = heads.forward(&mut s, Some(f), Some(f), f).unwrap();
        assert!(s.value(p.m_cs.unwrap()).data().iter().all(|&v| v == 0.5));
        assert!(s.value(p.m_ds.unwrap()).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(s.value(p.m_d).data().iter().all(|&v| v == DENSITY_BIAS_INIT));
    }

    #[test]
    fn head_ranges() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let heads = Heads::new(&mut store, 6, 5, true, true, &mut rng);
        let mut s = Session::new(&store, Mode::Eval);
        let f = s.input(Tensor::randn(&[2, 6, 4, 4], 2.0, &mut rng));
        let p = heads.forward(&mut s, Some(f), Some(f), f).unwrap();
        assert!(s.value(p.m_cs.unwrap()).data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(s.value(p.m_d).data().iter().all(|&v| v >= 0.0));
        let ds = s.value(p.m_ds.unwrap());
        for item in 0..2 {
            for px in 0..16 {
                let total: f64 = (0..5).map(|c| ds.data()[(item * 5 + c) * 16 + px]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn disabled_heads_are_absent() {
        let mut store = ParamStore::<f32>::new();
        let heads = Heads::new(&mut store, 4, 5, false, false, &mut ChaCha8Rng::seed_from_u64(0));
        let mut s = Session::new(&store, Mode::Eval);
        let f = s.input(Tensor::zeros(&[1, 4, 2, 2]));
        let p = heads.forward(&mut s, Some(f), Some(f), f).unwrap();
        assert!(p.m_cs.is_none() && p.m_ds.is_none());
    }
}
