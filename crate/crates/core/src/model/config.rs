use serde::{Deserialize, Serialize};

use crate::error::{Result, SpilError};
use crate::global_spil::GlobalSpilConfig;
use crate::local_spil::{LocalSpilConfig, PositionVariant};

/// Which per-joint initial features feed the first stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialFeatures {
    Confidence,
    Parts,
    Both,
}

impl InitialFeatures {
    pub fn width(self) -> usize {
        match self {
            InitialFeatures::Both => 2,
            _ => 1,
        }
    }

    /// Picks the active columns from a `(confidence, part constant)` pair.
    pub fn select(self, f: &[f64; 2]) -> &[f64] {
        match self {
            InitialFeatures::Confidence => &f[..1],
            InitialFeatures::Parts => &f[1..],
            InitialFeatures::Both => &f[..],
        }
    }
}

impl std::str::FromStr for InitialFeatures {
    type Err = SpilError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "confidence" => Ok(InitialFeatures::Confidence),
            "parts" => Ok(InitialFeatures::Parts),
            "both" => Ok(InitialFeatures::Both),
            other => Err(SpilError::Config(format!(
                "unknown initial features `{other}` (expected confidence, parts or both)"
            ))),
        }
    }
}

/// One sampling → grouping → local layer → global layer block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub n_centroids: usize,
    pub k_neighbors: usize,
    /// Ball-query radius in units of `t_frame`.
    pub radius_factor: f64,
    pub local: LocalSpilConfig,
    pub global: GlobalSpilConfig,
    #[serde(default = "enabled")]
    pub use_global: bool,
}

fn enabled() -> bool {
    true
}

impl StageConfig {
    pub fn new(n_centroids: usize, k_neighbors: usize, radius_factor: f64, local: LocalSpilConfig) -> Self {
        let global = GlobalSpilConfig::new(local.out_dim(), n_centroids);
        StageConfig {
            n_centroids,
            k_neighbors,
            radius_factor,
            local,
            global,
            use_global: true,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.local.out_dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_points: usize,
    pub t_frame: usize,
    pub stages: Vec<StageConfig>,
    pub classifier_hidden: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub initial_features: InitialFeatures,
    /// Standardize the pooled feature per channel before the classifier:
    /// batch statistics while training, training-set statistics otherwise.
    #[serde(default = "enabled")]
    pub normalize_pooled: bool,
}

impl Default for NetworkConfig {
    /// Three-stage pyramid over 2048 points ending in a 1024-wide feature.
    fn default() -> Self {
        let stage = |n, r, c_in, c_embed, head_out| {
            StageConfig::new(n, 32, r, LocalSpilConfig::new(c_in, c_embed, head_out, 8))
        };
        NetworkConfig {
            input_points: 2048,
            t_frame: 5,
            stages: vec![
                stage(512, 0.8, 2, 64, 16),
                stage(128, 0.6, 128, 128, 32),
                stage(32, 0.4, 256, 256, 128),
            ],
            classifier_hidden: 256,
            dropout_rate: 0.4,
            num_classes: 2,
            initial_features: InitialFeatures::Both,
            normalize_pooled: true,
        }
    }
}

impl NetworkConfig {
    /// Single-stage network over 256 points, small enough to train on one
    /// CPU core in minutes.
    pub fn desk() -> Self {
        NetworkConfig {
            input_points: 256,
            t_frame: 5,
            stages: vec![StageConfig::new(32, 16, 0.8, LocalSpilConfig::new(2, 16, 8, 4))],
            classifier_hidden: 32,
            dropout_rate: 0.4,
            num_classes: 2,
            initial_features: InitialFeatures::Both,
            normalize_pooled: true,
        }
    }

    pub fn radius(&self, stage: usize) -> f64 {
        self.stages[stage].radius_factor * self.t_frame as f64
    }

    /// Width of the globally pooled feature.
    pub fn pooled_dim(&self) -> usize {
        self.stages.last().map_or(0, StageConfig::out_dim)
    }

    pub fn set_variant(&mut self, variant: PositionVariant) {
        for s in &mut self.stages {
            s.local.variant = variant;
        }
    }

    pub fn set_mask_d(&mut self, d: f64) {
        for s in &mut self.stages {
            s.local.mask_d = d;
        }
    }

    /// Changes the head count of every stage while keeping each stage's
    /// output width.
    pub fn set_heads(&mut self, heads: usize) -> Result<()> {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let width = s.local.out_dim();
            if heads == 0 || width % heads != 0 {
                return Err(SpilError::Config(format!(
                    "stage {i}: output width {width} is not divisible by {heads} heads"
                )));
            }
            s.local.num_heads = heads;
            s.local.head_out_dim = width / heads;
        }
        Ok(())
    }

    pub fn set_initial_features(&mut self, features: InitialFeatures) {
        self.initial_features = features;
        if let Some(s) = self.stages.first_mut() {
            s.local.in_dim = features.width();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SpilError::Config(msg));
        if self.stages.is_empty() {
            return fail("network needs at least one stage".into());
        }
        if self.input_points == 0 || self.t_frame == 0 {
            return fail("input_points and t_frame must be positive".into());
        }
        if self.num_classes != 2 {
            return fail(format!("only binary classification is supported, got {} classes", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout rate {} must lie in [0, 1)", self.dropout_rate));
        }
        let mut width = self.initial_features.width();
        for (i, s) in self.stages.iter().enumerate() {
            s.local.validate().map_err(|e| SpilError::Config(format!("stage {i}: {e}")))?;
            if s.local.in_dim != width {
                return fail(format!(
                    "stage {i}: local in_dim {} does not match incoming feature width {width}",
                    s.local.in_dim
                ));
            }
            if s.n_centroids == 0 || s.k_neighbors == 0 || !(s.radius_factor > 0.0) {
                return fail(format!("stage {i}: n_centroids, k_neighbors and radius_factor must be positive"));
            }
            width = s.out_dim();
            if s.use_global {
                s.global.validate().map_err(|e| SpilError::Config(format!("stage {i}: {e}")))?;
                if s.global.dim != width {
                    return fail(format!(
                        "stage {i}: global dim {} does not match local output width {width}",
                        s.global.dim
                    ));
                }
                if s.global.n_points != s.n_centroids {
                    return fail(format!(
                        "stage {i}: global n_points {} does not match n_centroids {}",
                        s.global.n_points, s.n_centroids
                    ));
                }
            }
        }
        Ok(())
    }
}
