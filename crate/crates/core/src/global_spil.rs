//! Global self-attention over the sampled centroids.
//!
//! ```text
//! a_ij = θ(x_i)ᵀ γ(x_j) / √D + Z_ij
//! α_i  = softmax_j(a_i·)
//! u_i  = Σ_j α_ij (δ(x_j) + η(c_i − c_j))
//! y_i  = MLP(u_i + x_i) + x_i
//! ```
//!
//! `Z` is a learned `N × N` score offset and `η` embeds the relative 3D
//! position of two centroids. Each of `Z`, the position term, and the
//! residual path can be switched off.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpilError};
use crate::layers::{Linear, Mlp};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::sampling::Point3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalSpilConfig {
    pub dim: usize,
    pub n_points: usize,
    #[serde(default = "yes")]
    pub use_z: bool,
    #[serde(default = "yes")]
    pub use_position: bool,
    #[serde(default = "yes")]
    pub use_residual: bool,
}

fn yes() -> bool {
    true
}

impl GlobalSpilConfig {
    pub fn new(dim: usize, n_points: usize) -> Self {
        GlobalSpilConfig {
            dim,
            n_points,
            use_z: true,
            use_position: true,
            use_residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_points == 0 {
            return Err(SpilError::Config(format!("global layer needs dim, n_points >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GlobalSpil {
    pub config: GlobalSpilConfig,
    pub theta: Linear,
    pub gamma: Linear,
    pub delta: Linear,
    /// `N × N`, zero-initialized.
    pub z: ParamId,
    pub eta: Mlp,
    pub out_mlp: Mlp,
}

/// Attention matrix recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct GlobalTrace {
    pub attention: Tensor,
}

/// `N × N × 3` tensor of `c_i − c_j`.
fn pairwise_differences(coords: &[Point3]) -> Tensor {
    let n = coords.len();
    let mut data = Vec::with_capacity(n * n * 3);
    for ci in coords {
        for cj in coords {
            data.extend([ci[0] - cj[0], ci[1] - cj[1], ci[2] - cj[2]]);
        }
    }
    Tensor::new(vec![n, n, 3], data).expect("n x n x 3")
}

impl GlobalSpil {
    pub fn new(store: &mut ParamStore, name: &str, config: GlobalSpilConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let theta = Linear::new(store, &format!("{name}.theta"), d, d, rng);
        let gamma = Linear::new(store, &format!("{name}.gamma"), d, d, rng);
        let delta = Linear::new(store, &format!("{name}.delta"), d, d, rng);
        let z = store.register(format!("{name}.z"), Tensor::zeros(&[config.n_points, config.n_points]));
        let eta = Mlp::new(store, &format!("{name}.eta"), &[3, d, d], false, rng);
        let out_mlp = Mlp::new(store, &format!("{name}.out"), &[d, d, d], false, rng);
        Ok(GlobalSpil {
            config,
            theta,
            gamma,
            delta,
            z,
            eta,
            out_mlp,
        })
    }

    /// `ξ[i][j] = η(c_i − c_j)`, shape `N × N × D`.
    pub fn pairwise_position_encoding<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        coords: &[Point3],
    ) -> Result<Var<'g>> {
        let diff = g.constant(pairwise_differences(coords));
        self.eta.forward(g, store, diff)
    }

    /// `features`: `N × D`, index-aligned with `coords`. Returns `N × D`.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        coords: &[Point3],
        features: Var<'g>,
        trace: Option<&mut GlobalTrace>,
    ) -> Result<Var<'g>> {
        let cfg = &self.config;
        let shape = features.shape();
        let n = coords.len();
        if shape != [n, cfg.dim] {
            return Err(SpilError::Shape {
                op: "global_attention_forward",
                lhs: shape,
                rhs: vec![n, cfg.dim],
            });
        }
        if cfg.use_z && n != cfg.n_points {
            return Err(SpilError::Shape {
                op: "global_attention_forward (Z offset)",
                lhs: vec![n, n],
                rhs: vec![cfg.n_points, cfg.n_points],
            });
        }

        let q = self.theta.forward(g, store, features)?;
        let k = self.gamma.forward(g, store, features)?;
        let mut scores = q.matmul(&k.transpose()?)?.scale(1.0 / (cfg.dim as f64).sqrt());
        if cfg.use_z {
            scores = scores.add(&g.param(store, self.z))?;
        }
        let alpha = scores.softmax_lastdim()?;
        if let Some(t) = trace {
            t.attention = alpha.value().clone();
        }

        let values = self.delta.forward(g, store, features)?;
        let mut u = alpha.matmul(&values)?;
        if cfg.use_position {
            let xi = self.pairwise_position_encoding(g, store, coords)?;
            let pos = alpha.reshape(&[n, 1, n])?.matmul(&xi)?.reshape(&[n, cfg.dim])?;
            u = u.add(&pos)?;
        }
        if cfg.use_residual {
            self.out_mlp.forward(g, store, u.add(&features)?)?.add(&features)
        } else {
            self.out_mlp.forward(g, store, u)
        }
    }
}
