use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use spil::ingest::{build_point_cloud, generate_synthetic, parse_pose_file, write_pose_file, SkeletonPointCloud};
use spil::local_spil::PositionVariant;
use spil::model::{
    build_network, evaluate, load_network, save_network, train, ForwardTrace, Metrics, Mode, SpilNetwork,
};
use spil::numerics::Graph;
use spil::SpilError;

use crate::config::RunConfig;
use crate::data::{load_clouds, write_clouds, write_json};
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const REPORT_FILE: &str = "report.json";
pub const WEIGHTS_FILE: &str = "weights.json";
pub const ABLATION_FILE: &str = "ablation.json";

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| SpilError::io(dir, e).into())
}

pub fn synth(out: &Path, n: usize, seed: u64) -> CliResult<()> {
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_pose_file(out, &generate_synthetic(n, seed))?;
    Ok(())
}

/// Pose sequences in, point clouds out.
pub fn convert(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<usize> {
    let clouds = parse_pose_file(data)?
        .iter()
        .map(|s| build_point_cloud(s, &cfg.part_constants, cfg.conf_threshold))
        .collect::<Result<Vec<_>, _>>()?;
    write_clouds(out, &clouds)?;
    Ok(clouds.len())
}

#[derive(Serialize)]
struct Timing {
    epoch_seconds: Vec<f64>,
    total_seconds: f64,
}

/// Trains one network and writes config, metrics, timing and checkpoint
/// into `out`.
pub fn run_train(cfg: &RunConfig, out: &Path) -> CliResult<Vec<Metrics>> {
    let train_path = cfg
        .data
        .train
        .as_deref()
        .ok_or_else(|| CliError::Usage("no training data: pass --data or set data.train".into()))?;
    let data = load_clouds(train_path, cfg)?;
    let val = cfg.data.val.as_deref().map(|p| load_clouds(p, cfg)).transpose()?;

    create_dir(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let mut net = build_network(&cfg.network, cfg.train.seed)?;

    let metrics_path = out.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| SpilError::io(&metrics_path, e))?;
    let mut writer = BufWriter::new(file);
    let mut write_error = None;
    let history = train(&mut net, &data, val.as_deref(), &cfg.train, |m| {
        eprintln!(
            "epoch {:>4}  loss {:.4}  train_acc {:.4}{}  {:.2}s",
            m.epoch,
            m.train_loss,
            m.train_acc,
            m.val_acc.map(|v| format!("  val_acc {v:.4}")).unwrap_or_default(),
            m.wall_seconds
        );
        if write_error.is_none() {
            let line = serde_json::to_string(m).expect("metrics serialize");
            if let Err(e) = writeln!(writer, "{line}").and_then(|_| writer.flush()) {
                write_error = Some(e);
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(SpilError::io(&metrics_path, e).into());
    }
    drop(writer);

    save_network(&net, &out.join(CHECKPOINT_DIR))?;
    let epoch_seconds: Vec<f64> = history.iter().map(|m| m.wall_seconds).collect();
    let timing = Timing {
        total_seconds: epoch_seconds.iter().sum(),
        epoch_seconds,
    };
    write_json(&out.join(TIMING_FILE), &timing)?;
    Ok(history)
}

/// Directory for `report.json` when none is given: the run directory that
/// holds the checkpoint.
pub fn default_report_dir(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf()
}

/// Ingest settings for evaluating a checkpoint: an explicit config file,
/// else the config echoed next to the checkpoint, else the defaults.
pub fn eval_config(checkpoint: &Path, explicit: Option<&Path>) -> CliResult<RunConfig> {
    if let Some(path) = explicit {
        return Ok(RunConfig::load(path)?);
    }
    let echoed = default_report_dir(checkpoint).join(CONFIG_FILE);
    if echoed.is_file() {
        return Ok(RunConfig::load(&echoed)?);
    }
    Ok(RunConfig::default())
}

pub fn run_eval(checkpoint: &Path, data: &Path, cfg: &RunConfig, out: &Path) -> CliResult<f64> {
    let net = load_network(checkpoint)?;
    let clouds = load_clouds(data, cfg)?;
    let report = evaluate(&net, &clouds)?;
    create_dir(out)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report.accuracy)
}

#[derive(Debug, Serialize)]
pub struct NeighborWeight {
    pub coords: [f64; 3],
    pub weight: f64,
}

#[derive(Debug, Serialize)]
pub struct CentroidWeights {
    pub centroid: [f64; 3],
    pub neighbors: Vec<NeighborWeight>,
}

#[derive(Debug, Serialize)]
pub struct WeightDump {
    pub video_id: String,
    pub layer: usize,
    pub centroids: Vec<CentroidWeights>,
}

/// Head-averaged interaction weights of each centroid toward its
/// neighbors, for the first sample of `data` in eval mode.
pub fn inspect_weights(net: &SpilNetwork, cloud: &SkeletonPointCloud, layer: usize, top_k: usize) -> CliResult<WeightDump> {
    let stages = net.stages.len();
    if layer >= stages {
        return Err(CliError::Usage(format!("layer {layer} out of range: the network has {stages} stage(s)")));
    }
    let g = Graph::new();
    let mut trace = ForwardTrace::default();
    net.pooled_features(&g, cloud, &mut Mode::Eval, Some(&mut trace))?;
    let st = &trace.stages[layer];
    let k = st.k;
    let heads = &st.local.head_weights;
    if heads.is_empty() {
        return Err(CliError::Internal("forward trace recorded no interaction weights".into()));
    }
    let centroids = st
        .centroid_coords
        .iter()
        .enumerate()
        .map(|(n, c)| {
            // Row 0 belongs to the centroid itself.
            let mut neighbors: Vec<NeighborWeight> = (0..k)
                .map(|j| {
                    let w = heads.iter().map(|h| h.data()[(n * k) * k + j]).sum::<f64>() / heads.len() as f64;
                    NeighborWeight {
                        coords: st.member_coords[n * k + j],
                        weight: w,
                    }
                })
                .collect();
            neighbors.sort_by(|a, b| b.weight.total_cmp(&a.weight));
            neighbors.truncate(top_k);
            CentroidWeights { centroid: *c, neighbors }
        })
        .collect();
    Ok(WeightDump {
        video_id: cloud.video_id.clone(),
        layer,
        centroids,
    })
}

pub fn run_inspect(checkpoint: &Path, data: &Path, cfg: &RunConfig, layer: usize, top_k: usize, out: &Path) -> CliResult<()> {
    let net = load_network(checkpoint)?;
    let clouds = load_clouds(data, cfg)?;
    let dump = inspect_weights(&net, &clouds[0], layer, top_k)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(out, &dump)?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub variant: PositionVariant,
    pub final_train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Trains one run per position variant under otherwise identical settings,
/// each in `out/<variant>`, and writes a summary table.
pub fn run_ablate(base: &RunConfig, variants: &[PositionVariant], out: &Path) -> CliResult<Vec<AblationRow>> {
    create_dir(out)?;
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut cfg = base.clone();
        cfg.network.set_variant(variant);
        let name = serde_json::to_value(variant).map_err(SpilError::from)?;
        let dir = out.join(name.as_str().unwrap_or("variant"));
        eprintln!("== {}", dir.display());
        let history = run_train(&cfg, &dir)?;
        let net = load_network(&dir.join(CHECKPOINT_DIR))?;
        let train_set = load_clouds(cfg.data.train.as_deref().expect("checked by run_train"), &cfg)?;
        let train_accuracy = evaluate(&net, &train_set)?.accuracy;
        rows.push(AblationRow {
            variant,
            final_train_loss: history.last().map_or(f64::NAN, |m| m.train_loss),
            train_accuracy,
            val_accuracy: history.last().and_then(|m| m.val_acc),
        });
    }
    write_json(&out.join(ABLATION_FILE), &rows)?;
    Ok(rows)
}
