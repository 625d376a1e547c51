use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, SpilError};
use crate::global_spil::{GlobalSpil, GlobalTrace};
use crate::ingest::SkeletonPointCloud;
use crate::layers::Linear;
use crate::local_spil::{LocalSpil, LocalTrace};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::sampling::{ball_query, farthest_point_sample, Point3};

use super::config::{NetworkConfig, StageConfig};

#[derive(Clone, Debug)]
pub struct Stage {
    pub config: StageConfig,
    pub local: LocalSpil,
    pub global: Option<GlobalSpil>,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub norm: Option<PooledNorm>,
    pub hidden: Option<Linear>,
    pub out: Linear,
}

/// Per-channel mean and variance of the pooled feature, used to standardize
/// it before the classifier outside training. Both are buffers, refreshed
/// by [`SpilNetwork::calibrate`] rather than by gradient.
#[derive(Clone, Debug)]
pub struct PooledNorm {
    pub mean: ParamId,
    pub var: ParamId,
}

/// The stacked network together with its parameters.
#[derive(Clone, Debug)]
pub struct SpilNetwork {
    pub config: NetworkConfig,
    pub params: ParamStore,
    pub stages: Vec<Stage>,
    pub classifier: Classifier,
}

/// Train mode draws the FPS start, the input resampling and the dropout
/// mask from the given generator; eval mode is deterministic.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

/// Intermediate values of one stage, recorded on request.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub centroid_coords: Vec<Point3>,
    /// `N·K` member coordinates, neighborhood-major.
    pub member_coords: Vec<Point3>,
    pub k: usize,
    pub local: LocalTrace,
    pub global: Option<GlobalTrace>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub stages: Vec<StageTrace>,
}

/// FNV-1a, used to give every clip a stable eval-time resampling seed.
fn stable_hash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Point indices bringing `len` points to exactly `target`: a random
/// subset when long; every point plus uniform draws with replacement when
/// short.
pub fn resample_indices(len: usize, target: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len >= target {
        sample(rng, len, target).into_vec()
    } else {
        let mut picked: Vec<usize> = (0..len).collect();
        picked.extend((len..target).map(|_| rng.gen_range(0..len)));
        picked
    }
}

/// Shrinks the initial output layer so that an untrained network predicts
/// close to 50/50.
const OUTPUT_INIT_SCALE: f64 = 0.01;

const NORM_EPS: f64 = 1e-5;

/// Per-channel mean and biased variance of a set of equal-length rows.
fn channel_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let var = (0..d)
        .map(|j| rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n)
        .collect();
    (mean, var)
}

/// Builds a network with fresh parameters; identical `(cfg, seed)` give
/// bit-identical parameters.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<SpilNetwork> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for (i, sc) in cfg.stages.iter().enumerate() {
        let local = LocalSpil::new(&mut params, &format!("stage{i}.local"), sc.local.clone(), &mut rng)?;
        let global = if sc.use_global {
            Some(GlobalSpil::new(&mut params, &format!("stage{i}.global"), sc.global.clone(), &mut rng)?)
        } else {
            None
        };
        stages.push(Stage {
            config: sc.clone(),
            local,
            global,
        });
    }
    let pooled = cfg.pooled_dim();
    let norm = cfg.normalize_pooled.then(|| PooledNorm {
        mean: params.register_buffer("classifier.norm.mean", Tensor::zeros(&[pooled])),
        var: params.register_buffer("classifier.norm.var", Tensor::full(&[pooled], 1.0)),
    });
    let (hidden, out_in) = if cfg.classifier_hidden > 0 {
        (
            Some(Linear::new(&mut params, "classifier.hidden", pooled, cfg.classifier_hidden, &mut rng)),
            cfg.classifier_hidden,
        )
    } else {
        (None, pooled)
    };
    let out = Linear::new(&mut params, "classifier.out", out_in, cfg.num_classes, &mut rng);
    let w = params.value_mut(out.weight);
    *w = w.map(|v| v * OUTPUT_INIT_SCALE);
    Ok(SpilNetwork {
        config: cfg.clone(),
        params,
        stages,
        classifier: Classifier { norm, hidden, out },
    })
}

impl SpilNetwork {
    /// Fixes the cloud at `input_points` points and returns coordinates and
    /// selected initial features.
    fn prepare_input(&self, cloud: &SkeletonPointCloud, rng: &mut impl Rng) -> Result<(Vec<Point3>, Tensor)> {
        if cloud.is_empty() {
            return Err(SpilError::EmptyCloud(cloud.video_id.clone()));
        }
        let picks = resample_indices(cloud.len(), self.config.input_points, rng);
        let feat = self.config.initial_features;
        let coords = picks.iter().map(|&i| cloud.points[i]).collect();
        let data: Vec<f64> = picks.iter().flat_map(|&i| feat.select(&cloud.features[i]).to_vec()).collect();
        let features = Tensor::new(vec![picks.len(), feat.width()], data)?;
        Ok((coords, features))
    }

    /// Globally pooled feature, shape `[pooled_dim]`.
    pub fn pooled_features<'g>(
        &self,
        g: &'g Graph,
        cloud: &SkeletonPointCloud,
        mode: &mut Mode<'_>,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Var<'g>> {
        let store = &self.params;
        let (mut coords, input) = match mode {
            Mode::Eval => self.prepare_input(cloud, &mut ChaCha8Rng::seed_from_u64(stable_hash(&cloud.video_id)))?,
            Mode::Train(rng) => self.prepare_input(cloud, *rng)?,
        };
        let mut features = g.constant(input);

        for (si, stage) in self.stages.iter().enumerate() {
            let sc = &stage.config;
            let start = match mode {
                Mode::Eval => 0,
                Mode::Train(rng) => rng.gen_range(0..coords.len()),
            };
            let centroids = farthest_point_sample(&coords, sc.n_centroids, start)?;
            let groups = ball_query(&coords, &centroids, self.config.radius(si), sc.k_neighbors);
            let flat: Vec<usize> = groups.iter().flatten().copied().collect();
            let member_coords: Vec<Point3> = flat.iter().map(|&i| coords[i]).collect();
            let channels = features.shape()[1];
            let grouped = features
                .index_select(&flat)?
                .reshape(&[sc.n_centroids, sc.k_neighbors, channels])?;

            let mut local_trace = LocalTrace { head_weights: vec![] };
            let want_trace = trace.is_some();
            let mut out = stage.local.forward(
                g,
                store,
                grouped,
                &member_coords,
                want_trace.then_some(&mut local_trace),
            )?;
            let mut global_trace = None;
            if let Some(global) = &stage.global {
                let mut gt = GlobalTrace {
                    attention: Tensor::zeros(&[1]),
                };
                out = global.forward(g, store, &centroids.coords, out, want_trace.then_some(&mut gt))?;
                global_trace = want_trace.then_some(gt);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.stages.push(StageTrace {
                    centroid_coords: centroids.coords.clone(),
                    member_coords,
                    k: sc.k_neighbors,
                    local: local_trace,
                    global: global_trace,
                });
            }
            coords = centroids.coords;
            features = out;
        }
        features.mean_axis(0)
    }

    /// Class logits, shape `[2]`. The pooled-feature normalization uses the
    /// stored statistics in both modes.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        cloud: &SkeletonPointCloud,
        mut mode: Mode<'_>,
        trace: Option<&mut ForwardTrace>,
    ) -> Result<Var<'g>> {
        let pooled = self.pooled_features(g, cloud, &mut mode, trace)?;
        let width = pooled.shape()[0];
        let dropout = match mode {
            Mode::Eval => None,
            Mode::Train(rng) => Some(rng),
        };
        self.head(g, pooled.reshape(&[1, width])?, false, dropout)?
            .reshape(&[self.config.num_classes])
    }

    /// Classifier over a batch of pooled features `[B, D]`, returning logits
    /// `[B, 2]`. With `batch_stats` (and `B > 1`) the normalization uses the
    /// batch's own per-channel mean and variance; otherwise the stored
    /// statistics. Dropout is applied when a generator is given.
    pub fn head<'g>(
        &self,
        g: &'g Graph,
        pooled: Var<'g>,
        batch_stats: bool,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'g>> {
        let store = &self.params;
        let mut h = pooled;
        if let Some(norm) = &self.classifier.norm {
            h = if batch_stats && h.shape()[0] > 1 {
                let centered = h.sub(&h.mean_axis(0)?)?;
                let var = centered.mul(&centered)?.mean_axis(0)?;
                let inv_std = var.add(&g.constant(Tensor::scalar(NORM_EPS)))?.ln().scale(-0.5).exp();
                centered.mul(&inv_std)?
            } else {
                let mean = g.constant(store.value(norm.mean).clone());
                let inv_std = g.constant(store.value(norm.var).map(|v| 1.0 / (v + NORM_EPS).sqrt()));
                h.sub(&mean)?.mul(&inv_std)?
            };
        }
        if let Some(hidden) = &self.classifier.hidden {
            h = hidden.forward(g, store, h)?.relu();
        }
        if let Some(rng) = dropout {
            let rate = self.config.dropout_rate;
            if rate > 0.0 {
                let shape = h.shape();
                let keep = 1.0 / (1.0 - rate);
                let n = shape.iter().product();
                let mask: Vec<f64> = (0..n).map(|_| if rng.gen_bool(rate) { 0.0 } else { keep }).collect();
                h = h.mul(&g.constant(Tensor::new(shape, mask)?))?;
            }
        }
        self.classifier.out.forward(g, store, h)
    }

    /// Eval-mode logits as plain numbers.
    pub fn predict(&self, cloud: &SkeletonPointCloud) -> Result<Vec<f64>> {
        let g = Graph::new();
        let logits = self.forward(&g, cloud, Mode::Eval, None)?;
        let out = logits.value().data().to_vec();
        Ok(out)
    }

    /// Sets the stored pooled-feature statistics to the eval-mode statistics
    /// of `data`.
    pub fn calibrate(&mut self, data: &[SkeletonPointCloud]) -> Result<()> {
        let Some(norm) = self.classifier.norm.clone() else {
            return Ok(());
        };
        if data.is_empty() {
            return Err(SpilError::EmptyInput("calibration set"));
        }
        let pooled: Vec<Vec<f64>> = data
            .par_iter()
            .map(|c| {
                let g = Graph::new();
                let f = self.pooled_features(&g, c, &mut Mode::Eval, None)?;
                let v = f.value().data().to_vec();
                Ok(v)
            })
            .collect::<Result<_>>()?;
        let (mean, var) = channel_stats(&pooled);
        let d = mean.len();
        *self.params.value_mut(norm.mean) = Tensor::new(vec![d], mean)?;
        *self.params.value_mut(norm.var) = Tensor::new(vec![d], var)?;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}

/// Binary cross-entropy on `Ŷ = softmax(logits)[1]`, clamped to
/// `[1e-7, 1 − 1e-7]`; the clamp passes no gradient when active.
pub fn bce_loss<'g>(g: &'g Graph, logits: Var<'g>, label: u8) -> Result<Var<'g>> {
    const CLAMP: f64 = 1e-7;
    let probs = logits.softmax_lastdim()?;
    let pick = g.constant(Tensor::from_vec(vec![0.0, 1.0]));
    let mut p = probs.mul(&pick)?.sum_all()?;
    let raw = p.value().item();
    if !(CLAMP..=1.0 - CLAMP).contains(&raw) {
        p = p.scale(0.0).add(&g.constant(Tensor::scalar(raw.clamp(CLAMP, 1.0 - CLAMP))))?;
    }
    let one = g.constant(Tensor::scalar(1.0));
    let loss = if label == 1 { p.ln() } else { one.sub(&p)?.ln() };
    Ok(loss.scale(-1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_for(logits: [f64; 2], label: u8) -> f64 {
        let g = Graph::new();
        let l = g.input(Tensor::from_vec(logits.to_vec()));
        let v = bce_loss(&g, l, label).unwrap().value().item();
        v
    }

    #[test]
    fn bce_uninformative_is_ln2() {
        assert!((loss_for([0.0, 0.0], 1) - 2f64.ln()).abs() < 1e-12);
        assert!((loss_for([0.3, 0.3], 0) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_confident_correct_is_clamped_near_zero() {
        let v = loss_for([-40.0, 40.0], 1);
        assert!((v - 1e-7).abs() < 1e-12, "{v}");
        let v = loss_for([40.0, -40.0], 1);
        assert!((v - (1e7f64).ln()).abs() < 1e-6, "{v}");
    }

    #[test]
    fn resample_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let up = resample_indices(5, 12, &mut rng);
        assert_eq!(up.len(), 12);
        assert_eq!(&up[..5], &[0, 1, 2, 3, 4]);
        assert!(up.iter().all(|&i| i < 5));
        let down = resample_indices(100, 10, &mut rng);
        assert_eq!(down.len(), 10);
        let mut distinct = down.clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 10);
        assert!(down.iter().all(|&i| i < 100));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_network(&NetworkConfig::desk(), 3).unwrap();
        let b = build_network(&NetworkConfig::desk(), 3).unwrap();
        for ((_, p), (_, q)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
        let c = build_network(&NetworkConfig::desk(), 4).unwrap();
        assert_ne!(a.params.get(a.params.id("classifier.out.w").unwrap()).value, c.params.get(c.params.id("classifier.out.w").unwrap()).value);
    }
}
