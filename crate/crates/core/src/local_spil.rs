//! Local interaction layer: per-neighborhood interaction weights from feature
//! similarity and position relations, multi-head updates, and max-pooling to
//! one feature vector per centroid.
//!
//! For a neighborhood of `K` points with embedded features `X` (`K × C′`),
//! each head computes
//!
//! ```text
//! R^F_ij = relu(φ(x_i))ᵀ relu(θ(x_j))
//! W_ij   = R^L_ij · exp(R^F_ij) / Σ_j R^L_ij · exp(R^F_ij)
//! out    = relu(W · X · M)
//! ```
//!
//! where `R^L` is one of three position relations ([`PositionVariant`]). Head
//! outputs are concatenated along the feature axis and max-pooled over `K`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpilError};
use crate::layers::{Linear, Mlp};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::sampling::{distance, Neighborhood, Point3};

/// Added to the distance in the spanning relation so coincident points
/// (common when padding repeats the centroid) stay finite.
pub const SPANNING_EPS: f64 = 1e-6;

/// Rows whose unnormalized weight mass falls below this use uniform weights.
pub const FALLBACK_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionVariant {
    /// `−ln σ(D)`: decays with distance, no parameters.
    Spacing,
    /// `relu(ψ(M₁(p_i) − M₂(p_j))) / (D + ε)`.
    Spanning,
    /// `0` for same-frame pairs farther apart than `d` in the image plane,
    /// otherwise `relu(ψ(M₁(p_i) ‖ M₂(p_j)))`.
    Masking,
}

impl std::str::FromStr for PositionVariant {
    type Err = SpilError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spacing" => Ok(PositionVariant::Spacing),
            "spanning" => Ok(PositionVariant::Spanning),
            "masking" => Ok(PositionVariant::Masking),
            other => Err(SpilError::Config(format!(
                "unknown position variant `{other}` (expected spacing, spanning or masking)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalSpilConfig {
    pub in_dim: usize,
    pub embed_dim: usize,
    pub head_out_dim: usize,
    pub num_heads: usize,
    pub variant: PositionVariant,
    /// Same-frame spatial masking threshold (masking only).
    #[serde(default = "default_mask_d")]
    pub mask_d: f64,
    #[serde(default = "default_pos_hidden")]
    pub pos_hidden: usize,
    /// Depth of the `M₁`/`M₂` position perceptrons.
    #[serde(default = "default_pos_layers")]
    pub pos_layers: usize,
}

fn default_mask_d() -> f64 {
    0.04
}

fn default_pos_hidden() -> usize {
    16
}

fn default_pos_layers() -> usize {
    2
}

impl LocalSpilConfig {
    pub fn new(in_dim: usize, embed_dim: usize, head_out_dim: usize, num_heads: usize) -> Self {
        LocalSpilConfig {
            in_dim,
            embed_dim,
            head_out_dim,
            num_heads,
            variant: PositionVariant::Masking,
            mask_d: default_mask_d(),
            pos_hidden: default_pos_hidden(),
            pos_layers: default_pos_layers(),
        }
    }

    pub fn with_variant(mut self, variant: PositionVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn out_dim(&self) -> usize {
        self.num_heads * self.head_out_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.embed_dim == 0 || self.head_out_dim == 0 || self.num_heads == 0 {
            return Err(SpilError::Config(format!("local layer widths must be positive: {self:?}")));
        }
        if self.variant == PositionVariant::Masking && !(self.mask_d > 0.0) {
            return Err(SpilError::Config(format!("mask threshold d must be > 0, got {}", self.mask_d)));
        }
        if self.variant != PositionVariant::Spacing && (self.pos_hidden == 0 || self.pos_layers == 0) {
            return Err(SpilError::Config("position network needs pos_hidden, pos_layers >= 1".into()));
        }
        Ok(())
    }
}

/// Learned position relation of one head. `ψ` is linear, so it is applied to
/// each side separately and the halves are summed pairwise; this equals `ψ`
/// on the difference (spanning) or the concatenation (masking) without
/// materializing `K × K × h` pair features.
#[derive(Clone, Debug)]
pub struct PositionNet {
    pub m1: Mlp,
    pub m2: Mlp,
    /// Spanning: the single `h → 1` map. Masking: the `M₁` half of `2h → 1`.
    pub psi_i: Linear,
    /// Masking only: the `M₂` half of `ψ`.
    pub psi_j: Option<ParamId>,
}

impl PositionNet {
    fn new(store: &mut ParamStore, name: &str, cfg: &LocalSpilConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.pos_hidden;
        let dims: Vec<usize> = std::iter::once(3).chain(std::iter::repeat(h).take(cfg.pos_layers)).collect();
        let m1 = Mlp::new(store, &format!("{name}.m1"), &dims, true, rng);
        let m2 = Mlp::new(store, &format!("{name}.m2"), &dims, true, rng);
        match cfg.variant {
            PositionVariant::Spanning => PositionNet {
                m1,
                m2,
                psi_i: Linear::new(store, &format!("{name}.psi"), h, 1, rng),
                psi_j: None,
            },
            _ => {
                // both halves drawn with the fan-in of the full 2h → 1 map
                let w = crate::layers::kaiming_uniform(2 * h, 1, rng);
                let (wi, wj) = w.data().split_at(h);
                let psi_i = Linear::new(store, &format!("{name}.psi_i"), h, 1, rng);
                *store.value_mut(psi_i.weight) = Tensor::new(vec![h, 1], wi.to_vec()).expect("h x 1");
                let psi_j = store.register(
                    format!("{name}.psi_j.w"),
                    Tensor::new(vec![h, 1], wj.to_vec()).expect("h x 1"),
                );
                PositionNet {
                    m1,
                    m2,
                    psi_i,
                    psi_j: Some(psi_j),
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub phi: Linear,
    pub theta: Linear,
    /// `C′ × head_out_dim` update matrix.
    pub m: ParamId,
    pub pos: Option<PositionNet>,
}

/// Parameters and configuration of one local layer.
#[derive(Clone, Debug)]
pub struct LocalSpil {
    pub config: LocalSpilConfig,
    pub embed: Linear,
    pub heads: Vec<HeadWeights>,
}

/// Coordinate-only pair quantities of a batch of neighborhoods, `N × K × K`.
struct PairGeometry {
    dist: Tensor,
    planar: Tensor,
    same_frame: Vec<bool>,
}

impl PairGeometry {
    fn new(coords: &[Point3], n: usize, k: usize) -> Self {
        let mut dist = Vec::with_capacity(n * k * k);
        let mut planar = Vec::with_capacity(n * k * k);
        let mut same_frame = Vec::with_capacity(n * k * k);
        for b in 0..n {
            let group = &coords[b * k..(b + 1) * k];
            for pi in group {
                for pj in group {
                    dist.push(distance(pi, pj));
                    planar.push(((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2)).sqrt());
                    same_frame.push((pi[2] - pj[2]).abs() < 0.5);
                }
            }
        }
        PairGeometry {
            dist: Tensor::new(vec![n, k, k], dist).expect("n x k x k"),
            planar: Tensor::new(vec![n, k, k], planar).expect("n x k x k"),
            same_frame,
        }
    }

    fn spacing(&self) -> Tensor {
        self.dist.map(spacing_from_distance)
    }

    fn inverse_distance(&self) -> Tensor {
        self.dist.map(|d| 1.0 / (d + SPANNING_EPS))
    }

    /// `0` where a same-frame pair is farther than `d` in the image plane.
    fn keep_mask(&self, d: f64) -> Tensor {
        let data = self
            .planar
            .data()
            .iter()
            .zip(&self.same_frame)
            .map(|(&p, &same)| if same && p > d { 0.0 } else { 1.0 })
            .collect();
        Tensor::new(self.planar.shape().to_vec(), data).expect("mask shape")
    }
}

/// `−ln σ(D) = ln(1 + e^{−D})`.
fn spacing_from_distance(d: f64) -> f64 {
    (-d).exp().ln_1p()
}

/// Spacing relation between two points.
pub fn position_spacing(pi: &Point3, pj: &Point3) -> f64 {
    spacing_from_distance(distance(pi, pj))
}

/// `R^F` for a batch: `x` is `N × K × C′` (already embedded), output `N × K × K`.
pub fn feature_relation_batch<'g>(
    g: &'g Graph,
    store: &ParamStore,
    head: &HeadWeights,
    x: Var<'g>,
) -> Result<Var<'g>> {
    let phi = head.phi.forward(g, store, x)?.relu();
    let theta = head.theta.forward(g, store, x)?.relu();
    phi.matmul(&theta.transpose()?)
}

fn learned_position<'g>(
    g: &'g Graph,
    store: &ParamStore,
    net: &PositionNet,
    variant: PositionVariant,
    coords: Var<'g>,
) -> Result<Var<'g>> {
    let hi = net.m1.forward(g, store, coords)?;
    let hj = net.m2.forward(g, store, coords)?;
    let a = net.psi_i.forward(g, store, hi)?;
    let b = match (variant, net.psi_j) {
        (PositionVariant::Masking, Some(w)) => hj.matmul(&g.param(store, w))?,
        _ => hj.matmul(&g.param(store, net.psi_i.weight))?,
    };
    let bt = b.transpose()?;
    let pre = match variant {
        PositionVariant::Spanning => a.sub(&bt)?,
        _ => a.add(&bt)?,
    };
    Ok(pre.relu())
}

/// `R^L` for a batch of neighborhoods, `N × K × K`. `coords` holds `N·K`
/// member coordinates, neighborhood-major.
fn position_relation_batch<'g>(
    g: &'g Graph,
    store: &ParamStore,
    cfg: &LocalSpilConfig,
    head: &HeadWeights,
    coords: &[Point3],
    geom: &PairGeometry,
    n: usize,
    k: usize,
) -> Result<Var<'g>> {
    if cfg.variant == PositionVariant::Spacing {
        return Ok(g.constant(geom.spacing()));
    }
    let net = head.pos.as_ref().ok_or_else(|| SpilError::Config("head has no position network".into()))?;
    let flat: Vec<f64> = coords.iter().flatten().copied().collect();
    let pts = g.constant(Tensor::new(vec![n, k, 3], flat)?);
    let learned = learned_position(g, store, net, cfg.variant, pts)?;
    let factor = match cfg.variant {
        PositionVariant::Spanning => geom.inverse_distance(),
        _ => geom.keep_mask(cfg.mask_d),
    };
    learned.mul(&g.constant(factor))
}

/// Row-normalized interaction weights from `R^L ≥ 0` and `R^F`, both
/// `… × K × K`. Rows with (shifted) mass below [`FALLBACK_THRESHOLD`] become
/// uniform `1/K` and pass no gradient.
pub fn interaction_weights_batch<'g>(g: &'g Graph, rl: Var<'g>, rf: Var<'g>) -> Result<Var<'g>> {
    let shape = rf.shape();
    let rank = shape.len();
    let k = shape[rank - 1];
    let mut row_shape = shape.clone();
    row_shape[rank - 1] = 1;

    // the row max cancels in the ratio, so it is taken as a constant
    let shift = rf.max_axis(rank - 1)?.detach().reshape(&row_shape)?;
    let mass = rl.mul(&rf.sub(&shift)?.exp())?;
    let total = mass.sum_axis(rank - 1)?.reshape(&row_shape)?;
    let fallback = total.value().map(|s| if s < FALLBACK_THRESHOLD { 1.0 } else { 0.0 });
    if fallback.data().iter().all(|&f| f == 0.0) {
        return mass.div(&total);
    }
    let keep = g.constant(fallback.map(|f| 1.0 - f));
    let uniform = g.constant(fallback.map(|f| f / k as f64));
    let fb = g.constant(fallback);
    mass.mul(&keep)?.div(&total.add(&fb)?)?.add(&uniform)
}

/// `relu(W · X · M)` with `W: … × K × K`, `X: … × K × C′`, `M: C′ × d`.
pub fn head_update_batch<'g>(w: Var<'g>, x: Var<'g>, m: Var<'g>) -> Result<Var<'g>> {
    Ok(w.matmul(&x)?.matmul(&m)?.relu())
}

/// Value-level [`interaction_weights_batch`].
pub fn interaction_weights(rl: &Tensor, rf: &Tensor) -> Result<Tensor> {
    if rl.shape() != rf.shape() || rl.rank() < 2 {
        return Err(SpilError::Shape {
            op: "interaction_weights",
            lhs: rl.shape().to_vec(),
            rhs: rf.shape().to_vec(),
        });
    }
    let g = Graph::new();
    let w = interaction_weights_batch(&g, g.constant(rl.clone()), g.constant(rf.clone()))?;
    let out = w.value().clone();
    Ok(out)
}

/// Value-level [`head_update_batch`].
pub fn head_update(w: &Tensor, x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let y = head_update_batch(g.constant(w.clone()), g.constant(x.clone()), g.constant(m.clone()))?;
    let out = y.value().clone();
    Ok(out)
}

/// Per-head interaction weights recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct LocalTrace {
    /// One `N × K × K` tensor per head.
    pub head_weights: Vec<Tensor>,
}

impl LocalSpil {
    pub fn new(store: &mut ParamStore, name: &str, config: LocalSpilConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let embed = Linear::new(store, &format!("{name}.g"), config.in_dim, config.embed_dim, rng);
        let c = config.embed_dim;
        let heads = (0..config.num_heads)
            .map(|h| {
                let prefix = format!("{name}.head{h}");
                let phi = Linear::new(store, &format!("{prefix}.phi"), c, c, rng);
                let theta = Linear::new(store, &format!("{prefix}.theta"), c, c, rng);
                let m = store.register(
                    format!("{prefix}.m"),
                    crate::layers::kaiming_uniform(c, config.head_out_dim, rng),
                );
                let pos = (config.variant != PositionVariant::Spacing)
                    .then(|| PositionNet::new(store, &format!("{prefix}.pos"), &config, rng));
                HeadWeights { phi, theta, m, pos }
            })
            .collect();
        Ok(LocalSpil { config, embed, heads })
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim()
    }

    /// `features`: `N × K × C` grouped input features; `coords`: the `N·K`
    /// member coordinates in the same order. Returns `N × (H·d)`.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        features: Var<'g>,
        coords: &[Point3],
        trace: Option<&mut LocalTrace>,
    ) -> Result<Var<'g>> {
        let shape = features.shape();
        if shape.len() != 3 || shape[2] != self.config.in_dim || coords.len() != shape[0] * shape[1] {
            return Err(SpilError::Shape {
                op: "local_spil_forward",
                lhs: shape,
                rhs: vec![coords.len(), self.config.in_dim],
            });
        }
        let (n, k) = (shape[0], shape[1]);
        let geom = PairGeometry::new(coords, n, k);
        let x = self.embed.forward(g, store, features)?;

        let mut outputs = Vec::with_capacity(self.heads.len());
        let mut recorded = Vec::new();
        for head in &self.heads {
            let rf = feature_relation_batch(g, store, head, x)?;
            let rl = position_relation_batch(g, store, &self.config, head, coords, &geom, n, k)?;
            let w = interaction_weights_batch(g, rl, rf)?;
            if trace.is_some() {
                recorded.push(w.value().clone());
            }
            outputs.push(head_update_batch(w, x, g.param(store, head.m))?);
        }
        if let Some(t) = trace {
            t.head_weights = recorded;
        }
        let joined = if outputs.len() == 1 { outputs[0] } else { g.concat(&outputs, 2)? };
        joined.max_axis(1)
    }

    /// Runs the layer on prebuilt neighborhoods with constant features.
    pub fn forward_neighborhoods<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        neighborhoods: &[Neighborhood],
    ) -> Result<Var<'g>> {
        let first = neighborhoods.first().ok_or(SpilError::EmptyInput("local_spil_forward"))?;
        let (k, c) = (first.member_features.shape()[0], first.member_features.shape()[1]);
        let mut data = Vec::with_capacity(neighborhoods.len() * k * c);
        let mut coords = Vec::with_capacity(neighborhoods.len() * k);
        for nb in neighborhoods {
            if nb.member_features.shape() != [k, c] {
                return Err(SpilError::Shape {
                    op: "local_spil_forward",
                    lhs: vec![k, c],
                    rhs: nb.member_features.shape().to_vec(),
                });
            }
            data.extend_from_slice(nb.member_features.data());
            coords.extend_from_slice(&nb.member_coords);
        }
        let features = g.constant(Tensor::new(vec![neighborhoods.len(), k, c], data)?);
        self.forward(g, store, features, &coords, None)
    }

    /// `R^F(f_i, f_j)` for two already-embedded feature vectors.
    pub fn feature_relation(&self, store: &ParamStore, head: usize, fi: &[f64], fj: &[f64]) -> Result<f64> {
        let c = fi.len();
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, c], [fi, fj].concat())?);
        let rf = feature_relation_batch(&g, store, &self.heads[head], x)?;
        let v = rf.value().at(&[0, 0, 1]);
        Ok(v)
    }

    /// `R^L(p_i, p_j)` for one head under the configured variant.
    pub fn position_relation(&self, store: &ParamStore, head: usize, pi: &Point3, pj: &Point3) -> Result<f64> {
        let coords = [*pi, *pj];
        let geom = PairGeometry::new(&coords, 1, 2);
        let g = Graph::new();
        let rl = position_relation_batch(&g, store, &self.config, &self.heads[head], &coords, &geom, 1, 2)?;
        let v = rl.value().at(&[0, 0, 1]);
        Ok(v)
    }
}
