use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpilError};
use crate::ingest::{augment_with_rng, AugmentConfig};
use crate::ingest::SkeletonPointCloud;
use crate::numerics::{sgd_momentum_step, Graph, OptimizerState, ParamId, Tensor};

use super::network::{bce_loss, Mode, SpilNetwork};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            learning_rate: 0.001,
            momentum: 0.9,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SpilError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(SpilError::Config(format!(
                "learning rate {} must be >= 0 and momentum {} in [0, 1)",
                self.learning_rate, self.momentum
            )));
        }
        Ok(())
    }
}

/// Per-epoch training record. `wall_seconds` is not serialized so that
/// metrics files are reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n_samples: usize,
    /// Accuracy on label 0 and label 1; `None` when a class is absent.
    pub per_class_acc: [Option<f64>; 2],
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SHUFFLE_SLOT: u64 = u64::MAX;
const DROPOUT_SLOT: u64 = 1 << 63;

fn stream_seed(seed: u64, epoch: u64, slot: u64) -> u64 {
    mix(mix(mix(seed) ^ epoch) ^ slot)
}

fn predicted_label(logits: &[f64]) -> u8 {
    u8::from(logits[1] > logits[0])
}

/// Backbone forward of one training sample, kept alive until its gradient
/// seed is known.
struct BackboneForward {
    graph: Graph,
    pooled_node: usize,
    pooled: Vec<f64>,
}

fn backbone_forward(net: &SpilNetwork, cloud: &SkeletonPointCloud, cfg: &TrainConfig, seed: u64) -> Result<BackboneForward> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let augmented;
    let input = if cfg.augment.enabled {
        augmented = augment_with_rng(cloud, &cfg.augment, &mut rng);
        &augmented
    } else {
        cloud
    };
    let graph = Graph::new();
    let (pooled_node, pooled) = {
        let p = net.pooled_features(&graph, input, &mut Mode::Train(&mut rng), None)?;
        let v = p.value().data().to_vec();
        (p.index(), v)
    };
    Ok(BackboneForward {
        graph,
        pooled_node,
        pooled,
    })
}

fn backbone_backward(f: BackboneForward, seed: Vec<f64>) -> Result<Vec<(ParamId, Vec<f64>)>> {
    let g = &f.graph;
    let pooled = g.var(f.pooled_node);
    let n = seed.len();
    let loss = pooled.mul(&g.constant(Tensor::new(vec![n], seed)?))?.sum_all()?;
    Ok(g.backward(loss)?.param_grads())
}

struct BatchOutcome {
    loss_sum: f64,
    correct: usize,
}

/// Leaves the gradient of the mean batch loss in `net.params`. Backbones run
/// per sample in parallel; the classifier runs once over the whole batch so
/// that the pooled-feature normalization sees batch statistics. Gradients
/// are summed in sample order.
fn batch_gradients(
    net: &mut SpilNetwork,
    data: &[SkeletonPointCloud],
    batch: &[usize],
    cfg: &TrainConfig,
    epoch: u64,
    batch_index: u64,
) -> Result<BatchOutcome> {
    let model: &SpilNetwork = net;
    let forwards: Vec<BackboneForward> = batch
        .par_iter()
        .map(|&i| backbone_forward(model, &data[i], cfg, stream_seed(cfg.seed, epoch, i as u64)))
        .collect::<Result<_>>()?;

    let b = batch.len();
    let d = forwards[0].pooled.len();
    let head_graph = Graph::new();
    let pooled = head_graph.input(Tensor::new(
        vec![b, d],
        forwards.iter().flat_map(|f| f.pooled.iter().copied()).collect(),
    )?);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch, DROPOUT_SLOT ^ batch_index));
    let logits = model.head(&head_graph, pooled, true, Some(&mut dropout_rng))?;
    let mut outcome = BatchOutcome { loss_sum: 0.0, correct: 0 };
    let mut total = None;
    for (row, &i) in batch.iter().enumerate() {
        let label = data[i].label;
        let sample_logits = logits.index_select(&[row])?.reshape(&[2])?;
        outcome.correct += usize::from(predicted_label(sample_logits.value().data()) == label);
        let loss = bce_loss(&head_graph, sample_logits, label)?;
        outcome.loss_sum += loss.value().item();
        total = Some(match total {
            None => loss,
            Some(t) => loss.add(&t)?,
        });
    }
    let mean = total.expect("non-empty batch").scale(1.0 / b as f64);
    let head_grads = head_graph.backward(mean)?;
    let seeds = head_grads
        .get(pooled)
        .ok_or_else(|| SpilError::Backward("pooled features received no gradient".into()))?;

    let backbone: Vec<Vec<(ParamId, Vec<f64>)>> = forwards
        .into_par_iter()
        .zip(seeds.data().par_chunks(d))
        .map(|(f, seed)| backbone_backward(f, seed.to_vec()))
        .collect::<Result<_>>()?;

    net.params.zero_grads();
    for (id, g) in head_grads.param_grads() {
        net.params.accumulate_grad(id, &g);
    }
    for grads in &backbone {
        for (id, g) in grads {
            net.params.accumulate_grad(*id, g);
        }
    }
    Ok(outcome)
}

/// Mini-batch SGD with momentum on the mean BCE of each batch. The result
/// does not depend on the thread count.
pub fn train(
    net: &mut SpilNetwork,
    data: &[SkeletonPointCloud],
    val: Option<&[SkeletonPointCloud]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Metrics),
) -> Result<Vec<Metrics>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(SpilError::EmptyInput("training set"));
    }
    let mut state = OptimizerState::new(&net.params, cfg.learning_rate, cfg.momentum)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch as u64, SHUFFLE_SLOT)));

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let out = batch_gradients(net, data, batch, cfg, epoch as u64, bi as u64)?;
            sgd_momentum_step(&mut net.params, &mut state)?;
            loss_sum += out.loss_sum;
            correct += out.correct;
        }
        net.calibrate(data)?;

        let val_acc = match val {
            Some(v) if !v.is_empty() => Some(evaluate(net, v)?.accuracy),
            _ => None,
        };
        let m = Metrics {
            epoch: epoch + 1,
            train_loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            val_acc,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

/// Eval-mode predicted labels, in input order.
pub fn predict_labels(net: &SpilNetwork, data: &[SkeletonPointCloud]) -> Result<Vec<u8>> {
    data.par_iter()
        .map(|c| net.predict(c).map(|l| predicted_label(&l)))
        .collect()
}

pub fn evaluate(net: &SpilNetwork, data: &[SkeletonPointCloud]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(SpilError::EmptyInput("evaluation set"));
    }
    let predicted = predict_labels(net, data)?;
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for (c, p) in data.iter().zip(&predicted) {
        let y = usize::from(c.label);
        totals[y] += 1;
        hits[y] += usize::from(*p == c.label);
    }
    let per_class = |y: usize| (totals[y] > 0).then(|| hits[y] as f64 / totals[y] as f64);
    Ok(EvalReport {
        accuracy: (hits[0] + hits[1]) as f64 / data.len() as f64,
        n_samples: data.len(),
        per_class_acc: [per_class(0), per_class(1)],
    })
}

/// Mean eval-mode loss.
pub fn mean_loss(net: &SpilNetwork, data: &[SkeletonPointCloud]) -> Result<f64> {
    if data.is_empty() {
        return Err(SpilError::EmptyInput("loss set"));
    }
    let losses: Vec<f64> = data
        .par_iter()
        .map(|c| {
            let g = Graph::new();
            let logits = net.forward(&g, c, Mode::Eval, None)?;
            let v = bce_loss(&g, logits, c.label)?.value().item();
            Ok(v)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
