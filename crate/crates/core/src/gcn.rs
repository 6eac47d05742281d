//! Graph reasoning over the density branch, guided by the crowd and density-level
//! predictions.
//!
//! With `P = h * w` pixels at the reasoning resolution:
//!
//! * `D = softmax_rows(eps(M_DS)^T beta(M_DS))`, a `P x P` dependency matrix.
//! * `V = mu(f_DM * M_CS) D^T`, `K x P` vertex features.
//! * `V' = ReLU(W^T V (I - A)^T)`, which is `(I - A) V^T W` in pixel-major layout.
//! * `f_DM' = f_DM + up(sigma(V'))`.
//!
//! Inputs are average-pooled by `gcn_pool` first and the correction is resized back
//! bilinearly, so `A` is sized for one fixed branch resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Conv2d, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcnConfig {
    /// Number of graph vertices `K`.
    pub num_vertices: usize,
    /// Average-pool factor applied before reasoning.
    pub gcn_pool: usize,
    pub adjacency_init_std: f64,
    pub vertex_weight_init_std: f64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig { num_vertices: 16, gcn_pool: 4, adjacency_init_std: 1e-3, vertex_weight_init_std: 1e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct GcnModule {
    pub config: GcnConfig,
    /// Reasoning resolution `(h, w)`.
    pub grid: (usize, usize),
    pub epsilon: Conv2d,
    pub beta: Conv2d,
    pub mu: Conv2d,
    pub adjacency: ParamId,
    pub vertex_weight: ParamId,
    pub sigma: Conv2d,
}

impl GcnModule {
    /// `branch_hw` is the branch resolution; it must be divisible by `gcn_pool`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &GcnConfig,
        feature_channels: usize,
        level_classes: usize,
        branch_hw: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let k = config.gcn_pool;
        if k == 0 || config.num_vertices == 0 || branch_hw.0 % k != 0 || branch_hw.1 % k != 0 {
            return Err(Error::InvalidArgument(format!(
                "branch resolution {branch_hw:?} is not divisible by gcn_pool {k}"
            )));
        }
        let grid = (branch_hw.0 / k, branch_hw.1 / k);
        let p = grid.0 * grid.1;
        let kv = config.num_vertices;
        Ok(GcnModule {
            config: config.clone(),
            grid,
            epsilon: Conv2d::new(store, "gcn.epsilon", level_classes, level_classes, 1, rng),
            beta: Conv2d::new(store, "gcn.beta", level_classes, level_classes, 1, rng),
            mu: Conv2d::new(store, "gcn.mu", feature_channels, kv, 1, rng),
            adjacency: store.add("gcn.adjacency", Tensor::randn(&[p, p], config.adjacency_init_std, rng)),
            vertex_weight: store.add("gcn.vertex_weight", Tensor::randn(&[kv, kv], config.vertex_weight_init_std, rng)),
            sigma: Conv2d::new(store, "gcn.sigma", kv, feature_channels, 1, rng),
        })
    }

    fn pixels(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Row-stochastic `N x P x P` dependency matrix from pooled level probabilities.
    pub fn compute_dependency<T: Scalar>(&self, s: &mut Session<'_, T>, m_ds: Var) -> Result<Var> {
        let (n, lc, _, _) = s.value(m_ds).dims4();
        let p = self.pixels();
        let e = self.epsilon.forward(s, m_ds)?;
        let e = s.graph.reshape(e, &[n, lc, p])?;
        let b = self.beta.forward(s, m_ds)?;
        let b = s.graph.reshape(b, &[n, lc, p])?;
        let logits = s.graph.bmm(e, b, true, false)?;
        Ok(s.graph.softmax(logits, 2))
    }

    /// `N x K x P` vertex features.
    pub fn project_vertices<T: Scalar>(&self, s: &mut Session<'_, T>, f_dm: Var, m_cs: Var, dep: Var) -> Result<Var> {
        let n = s.value(f_dm).dims4().0;
        let masked = s.graph.mul_bcast(f_dm, m_cs)?;
        let u = self.mu.forward(s, masked)?;
        let u = s.graph.reshape(u, &[n, self.config.num_vertices, self.pixels()])?;
        s.graph.bmm(u, dep, false, true)
    }

    pub fn graph_convolve<T: Scalar>(&self, s: &mut Session<'_, T>, v: Var) -> Result<Var> {
        let p = self.pixels();
        let eye = s.input(Tensor::eye(p));
        let a = s.p(self.adjacency);
        let laplacian = s.graph.sub(eye, a)?;
        let t = s.graph.bmm(v, laplacian, false, true)?;
        let w = s.p(self.vertex_weight);
        let out = s.graph.bmm(w, t, true, false)?;
        Ok(s.graph.relu(out))
    }

    /// `f_DM + up(sigma(V'))` at the resolution of `f_dm`.
    pub fn reproject<T: Scalar>(&self, s: &mut Session<'_, T>, v: Var, f_dm: Var) -> Result<Var> {
        let (n, _, h, w) = s.value(f_dm).dims4();
        let v = s.graph.reshape(v, &[n, self.config.num_vertices, self.grid.0, self.grid.1])?;
        let delta = self.sigma.forward(s, v)?;
        let delta = s.graph.upsample(delta, h, w);
        s.graph.add(f_dm, delta)
    }

    /// Full module at branch resolution: returns `f_DM'`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, f_dm: Var, m_cs: Var, m_ds: Var) -> Result<Var> {
        let (_, _, h, w) = s.value(f_dm).dims4();
        let k = self.config.gcn_pool;
        if (h / k, w / k) != self.grid || h % k != 0 || w % k != 0 {
            return Err(Error::Shape(format!(
                "graph reasoning was built for {:?} after pooling by {k}, got {h}x{w}",
                self.grid
            )));
        }
        let f = s.graph.avg_pool(f_dm, k)?;
        let cs = s.graph.avg_pool(m_cs, k)?;
        let ds = s.graph.avg_pool(m_ds, k)?;
        let dep = self.compute_dependency(s, ds)?;
        let v = self.project_vertices(s, f, cs, dep)?;
        let v = self.graph_convolve(s, v)?;
        self.reproject(s, v, f_dm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn module(pool: usize, hw: usize) -> (ParamStore<f64>, GcnModule) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = GcnConfig { num_vertices: 3, gcn_pool: pool, ..Default::default() };
        let m = GcnModule::new(&mut store, &cfg, 4, 5, (hw, hw), &mut rng).unwrap();
        (store, m)
    }

    fn probs(n: usize, lc: usize, hw: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t: Tensor<f64> = Tensor::randn(&[n, lc, hw, hw], 1.0, &mut rng);
        let plane = hw * hw;
        for item in 0..n {
            for px in 0..plane {
                let idx = |c: usize| (item * lc + c) * plane + px;
                let z: f64 = (0..lc).map(|c| t.data()[idx(c)].exp()).sum();
                for c in 0..lc {
                    let v = t.data()[idx(c)].exp() / z;
                    t.data_mut()[idx(c)] = v;
                }
            }
        }
        t
    }

    #[test]
    fn dependency_rows_are_stochastic() {
        let (store, m) = module(1, 4);
        let mut s = Session::new(&store, Mode::Eval);
        let ds = s.input(probs(2, 5, 4, 1));
        let d = m.compute_dependency(&mut s, ds).unwrap();
        assert_eq!(s.value(d).shape(), &[2, 16, 16]);
        for row in s.value(d).data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn constant_levels_give_uniform_dependency() {
        let (store, m) = module(1, 4);
        let mut s = Session::new(&store, Mode::Eval);
        let ds = s.input(Tensor::full(&[1, 5, 4, 4], 0.2));
        let d = m.compute_dependency(&mut s, ds).unwrap();
        assert!(s.value(d).data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn single_pixel_dependency_is_one() {
        let (store, m) = module(4, 4);
        let mut s = Session::new(&store, Mode::Eval);
        let ds = s.input(probs(1, 5, 1, 2));
        let d = m.compute_dependency(&mut s, ds).unwrap();
        assert_eq!(s.value(d).data(), &[1.0]);
    }

    #[test]
    fn zero_mask_annihilates_vertices() {
        let (mut store, m) = module(1, 4);
        store.get_mut(m.mu.bias.unwrap()).data_mut().fill(0.0);
        let mut s = Session::new(&store, Mode::Eval);
        let f = s.input(Tensor::randn(&[1, 4, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let cs = s.input(Tensor::zeros(&[1, 1, 4, 4]));
        let ds = s.input(probs(1, 5, 4, 4));
        let d = m.compute_dependency(&mut s, ds).unwrap();
        let v = m.project_vertices(&mut s, f, cs, d).unwrap();
        assert_eq!(s.value(v).shape(), &[1, 3, 16]);
        assert!(s.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_adjacency_zeroes_the_graph_output() {
        let (mut store, m) = module(1, 4);
        *store.get_mut(m.adjacency) = Tensor::eye(16);
        let mut s = Session::new(&store, Mode::Eval);
        let v = s.input(Tensor::randn(&[2, 3, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(5)));
        let out = m.graph_convolve(&mut s, v).unwrap();
        assert!(s.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_adjacency_identity_weight_is_relu() {
        let (mut store, m) = module(1, 4);
        *store.get_mut(m.adjacency) = Tensor::zeros(&[16, 16]);
        *store.get_mut(m.vertex_weight) = Tensor::eye(3);
        let mut s = Session::new(&store, Mode::Eval);
        let vt = Tensor::randn(&[1, 3, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let v = s.input(vt.clone());
        let out = m.graph_convolve(&mut s, v).unwrap();
        assert_eq!(s.value(out), &vt.map(|x| x.max(0.0)));
    }

    #[test]
    fn zero_vertices_leave_features_unchanged() {
        let (mut store, m) = module(2, 4);
        store.get_mut(m.sigma.bias.unwrap()).data_mut().fill(0.0);
        let mut s = Session::new(&store, Mode::Eval);
        let ft = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let f = s.input(ft.clone());
        let v = s.input(Tensor::zeros(&[1, 3, 4]));
        let out = m.reproject(&mut s, v, f).unwrap();
        assert_eq!(s.value(out), &ft);
    }

    #[test]
    fn initialization_is_near_identity() {
        let (store, m) = module(2, 8);
        let mut s = Session::new(&store, Mode::Eval);
        let ft = Tensor::randn(&[1, 4, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(8)).map(f64::abs);
        let f = s.input(ft.clone());
        let cs = s.input(Tensor::full(&[1, 1, 8, 8], 0.7));
        let ds = s.input(probs(1, 5, 8, 9));
        let out = m.forward(&mut s, f, cs, ds).unwrap();
        let change = s.value(out).max_abs_diff(&ft);
        assert!(change / ft.norm() < 1e-2, "relative change {}", change / ft.norm());
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let (store, m) = module(2, 8);
        let mut s = Session::new(&store, Mode::Eval);
        let f = s.input(Tensor::zeros(&[1, 4, 4, 4]));
        let cs = s.input(Tensor::zeros(&[1, 1, 4, 4]));
        let ds = s.input(Tensor::zeros(&[1, 5, 4, 4]));
        assert!(m.forward(&mut s, f, cs, ds).is_err());
        let mut store = ParamStore::<f64>::new();
        let cfg = GcnConfig { gcn_pool: 3, ..Default::default() };
        assert!(GcnModule::new(&mut store, &cfg, 4, 5, (8, 8), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
