//! Acceptance criteria 1–9. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test -p spil-cli --test acceptance -- 2 5`.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spil::global_spil::{GlobalSpil, GlobalSpilConfig};
use spil::ingest::{build_point_cloud, generate_synthetic, PartConstants, SkeletonPointCloud, DEFAULT_CONF_THRESHOLD};
use spil::local_spil::{LocalSpil, LocalSpilConfig, LocalTrace, PositionVariant};
use spil::model::{
    bce_loss, build_network, evaluate, mean_loss, train, Mode, NetworkConfig, SpilNetwork, StageConfig, TrainConfig,
};
use spil::numerics::{check_parameter_gradients, finite_difference_check, Graph, ParamStore, Tensor, Var};
use spil::sampling::{farthest_point_sample, Point3};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn random_coords(n: usize, frames: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| [rng.gen(), rng.gen(), rng.gen_range(0..frames) as f64])
        .collect()
}

fn readout<'g>(y: Var<'g>) -> spil::Result<Var<'g>> {
    let w = uniform(&y.shape(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(77));
    y.mul(&y.graph().constant(w))?.sum_all()
}

fn jitter_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable && p.name.ends_with(".b"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = uniform(&shape, -0.1, 0.1, rng);
    }
}

fn clouds(n: usize, seed: u64) -> Vec<SkeletonPointCloud> {
    generate_synthetic(n, seed)
        .iter()
        .map(|s| build_point_cloud(s, &PartConstants::default(), DEFAULT_CONF_THRESHOLD).unwrap())
        .collect()
}

/// Worst error of one primitive over ten random points.
fn primitive<F>(draw: impl Fn(&mut ChaCha8Rng) -> Tensor, f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> spil::Result<Var<'g>>,
{
    (0..10u64)
        .map(|s| finite_difference_check(&f, &draw(&mut ChaCha8Rng::seed_from_u64(s)), 1e-5).unwrap())
        .fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let c = uniform(&[3, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(100));
    let b = uniform(&[4, 2], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(101));
    let any = |r: &mut ChaCha8Rng| uniform(&[3, 4], -1.0, 1.0, r);
    let kink_free = |r: &mut ChaCha8Rng| {
        uniform(&[3, 4], 0.1, 1.0, r).map(|v| if (v * 1e4) as u64 % 2 == 0 { v } else { -v })
    };
    let positive = |r: &mut ChaCha8Rng| uniform(&[3, 4], 0.5, 3.0, r);
    let smooth = [
        ("matmul", primitive(any, |g, x| readout(x.matmul(&g.constant(b.clone()))?))),
        ("add", primitive(any, |g, x| readout(x.add(&g.constant(c.clone()))?))),
        ("mul", primitive(any, |g, x| readout(x.mul(&g.constant(c.clone()))?))),
        ("concat", primitive(any, |g, x| readout(g.concat(&[x, g.constant(c.clone())], 1)?))),
        ("relu", primitive(kink_free, |_, x| readout(x.relu()))),
        ("sigmoid", primitive(any, |_, x| readout(x.sigmoid()))),
        ("log", primitive(positive, |_, x| readout(x.ln()))),
        ("exp", primitive(any, |_, x| readout(x.exp()))),
        ("softmax_lastdim", primitive(any, |_, x| readout(x.softmax_lastdim()?))),
        ("reduce_mean", primitive(any, |_, x| readout(x.mean_axis(1)?))),
        (
            "broadcast",
            primitive(|r| uniform(&[1, 4], -1.0, 1.0, r), |_, x| readout(x.broadcast_to(&[3, 4])?)),
        ),
    ];
    let reduce_max = primitive(any, |_, x| readout(x.max_axis(1)?));
    let (worst_name, worst) = smooth.iter().fold(("", 0.0), |a, &(n, e)| if e > a.1 { (n, e) } else { a });

    let mut local = LocalSpilConfig::new(2, 8, 4, 2);
    local.pos_hidden = 8;
    let cfg = NetworkConfig {
        input_points: 16,
        stages: vec![StageConfig::new(4, 4, 0.8, local)],
        classifier_hidden: 8,
        dropout_rate: 0.0,
        ..NetworkConfig::desk()
    };
    let mut net = build_network(&cfg, 1).unwrap();
    let w = net.classifier.out.weight;
    *net.params.value_mut(w) = net.params.value(w).map(|v| v * 100.0);
    jitter_biases(&mut net.params, &mut ChaCha8Rng::seed_from_u64(2));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = SkeletonPointCloud {
        video_id: "micro".into(),
        points: random_coords(16, 4, &mut rng),
        features: (0..16).map(|_| [rng.gen_range(0.3..1.0), rng.gen_range(0.1..1.0)]).collect(),
        label: 1,
        num_frames: 4,
    };
    let checks = check_parameter_gradients(
        &net.params,
        |g, s| {
            let mut probe: SpilNetwork = net.clone();
            probe.params = s.clone();
            let logits = probe.forward(g, &cloud, Mode::Eval, None)?;
            bce_loss(g, logits, cloud.label)
        },
        1e-5,
    )
    .unwrap();
    let network = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let has_z = checks.iter().any(|c| c.name.ends_with(".z"));
    let has_eta = checks.iter().any(|c| c.name.contains(".eta."));
    let secs = started.elapsed().as_secs_f64();
    check(
        worst < 1e-6 && reduce_max < 1e-4 && network < 1e-4 && has_z && has_eta && secs < 120.0,
        format!(
            "primitives max {worst:.1e} ({worst_name}) < 1e-6; reduce_max {reduce_max:.1e} < 1e-4; \
             micro network {network:.1e} < 1e-4 over {} tensors incl. Z={has_z} eta={has_eta}; {secs:.1}s < 120s",
            checks.len()
        ),
    )
}

fn criterion_2() -> Outcome {
    let (n, k) = (1000, 8);
    let mut report = Vec::new();
    let mut ok = true;
    for (vi, variant) in [PositionVariant::Spacing, PositionVariant::Spanning, PositionVariant::Masking]
        .into_iter()
        .enumerate()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(20 + vi as u64);
        let mut store = ParamStore::new();
        let layer = LocalSpil::new(&mut store, "local", LocalSpilConfig::new(2, 8, 4, 2).with_variant(variant), &mut rng)
            .unwrap();
        // a quarter of the neighborhoods are collapsed onto one frame and a
        // tiny patch, the rest spread over four frames
        let coords: Vec<Point3> = (0..n)
            .flat_map(|b| {
                let tight = b % 4 == 0;
                (0..k)
                    .map(|_| {
                        if tight {
                            [0.5 + rng.gen_range(0.0..1e-3), 0.5, 0.0]
                        } else {
                            [rng.gen(), rng.gen(), rng.gen_range(0..4) as f64]
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let g = Graph::new();
        let x = g.constant(uniform(&[n, k, 2], -1.0, 1.0, &mut rng));
        let mut trace = LocalTrace { head_weights: vec![] };
        layer.forward(&g, &store, x, &coords, Some(&mut trace)).unwrap();
        let (mut worst, mut fallbacks, mut negative) = (0.0f64, 0usize, 0usize);
        for w in &trace.head_weights {
            negative += w.data().iter().filter(|&&v| v < 0.0).count();
            for row in w.data().chunks(k) {
                if row.iter().all(|&v| v == 1.0 / k as f64) {
                    fallbacks += 1;
                } else {
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
        ok &= worst <= 1e-9 && negative == 0;
        report.push(format!("{variant:?}: max |Σ−1| {worst:.1e}, {fallbacks} uniform rows"));
    }
    check(
        ok,
        format!("{} neighborhoods x 3 variants, all W >= 0; {}", n, report.join("; ")),
    )
}

fn criterion_3() -> Outcome {
    let d = 0.04;
    let fixture: Vec<Point3> = vec![
        [0.10, 0.10, 0.0],
        [0.12, 0.11, 0.0],
        [0.50, 0.50, 0.0],
        [0.52, 0.53, 0.0],
        [0.00, 0.90, 0.0],
        [0.04, 0.90, 0.0],
        [0.10, 0.10, 1.0],
        [0.30, 0.70, 1.0],
        [0.31, 0.70, 1.0],
        [0.90, 0.90, 1.0],
    ];
    let k = fixture.len();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut store = ParamStore::new();
    let mut cfg = LocalSpilConfig::new(2, 6, 3, 2).with_variant(PositionVariant::Masking);
    cfg.mask_d = d;
    let mut layer = LocalSpil::new(&mut store, "local", cfg, &mut rng).unwrap();
    let feats = uniform(&[1, k, 2], -1.0, 1.0, &mut rng);
    let g = Graph::new();
    let mut trace = LocalTrace { head_weights: vec![] };
    layer
        .forward(&g, &store, g.constant(feats.clone()), &fixture, Some(&mut trace))
        .unwrap();
    let embedded = layer.embed.forward(&g, &store, g.constant(feats.reshape(vec![k, 2]).unwrap())).unwrap().value().clone();
    let uniform_row = |w: &Tensor, i: usize| (0..k).all(|j| w.at(&[0, i, j]) == 1.0 / k as f64);

    let mut unmasked = layer.clone();
    unmasked.config.mask_d = f64::MAX;
    let (mut masked_pairs, mut fallback_pairs, mut cross_pairs, mut cross_nonzero, mut violations) =
        (0, 0, 0, 0, Vec::new());
    for head in 0..layer.heads.len() {
        for i in 0..k {
            for j in 0..k {
                let (pi, pj) = (&fixture[i], &fixture[j]);
                let planar = ((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2)).sqrt();
                let same = pi[2] == pj[2];
                let rl = layer.position_relation(&store, head, pi, pj).unwrap();
                let free = unmasked.position_relation(&store, head, pi, pj).unwrap();
                let w = trace.head_weights[head].at(&[0, i, j]);
                if same && planar > d {
                    masked_pairs += 1;
                    let rf = layer.feature_relation(&store, head, embedded.row(i), embedded.row(j)).unwrap();
                    let pre = rl * rf.exp();
                    // rows whose weights all vanish are uniform by the fallback rule
                    let fallback = uniform_row(&trace.head_weights[head], i);
                    fallback_pairs += usize::from(fallback);
                    if pre != 0.0 || (w != 0.0 && !fallback) {
                        violations.push(format!("head {head} ({i},{j}) R^L·exp(R^F)={pre} W={w}"));
                    }
                } else {
                    if rl.to_bits() != free.to_bits() {
                        violations.push(format!("head {head} ({i},{j}) masked unexpectedly"));
                    }
                    if !same {
                        cross_pairs += 1;
                        cross_nonzero += usize::from(rl > 0.0);
                    }
                }
            }
        }
    }
    layer.config.mask_d = d;
    check(
        violations.is_empty() && masked_pairs > 0 && cross_nonzero > 0,
        format!(
            "{masked_pairs} same-frame pairs beyond d with exactly zero pre-normalization weight \
             ({fallback_pairs} in zero-sum rows, uniform by fallback); {cross_pairs} cross-frame pairs unmasked \
             ({cross_nonzero} with nonzero R^L){}",
            if violations.is_empty() { String::new() } else { format!("; violations: {violations:?}") }
        ),
    )
}

fn fps_reference(coords: &[Point3], n: usize, start: usize) -> Vec<usize> {
    let sq = |a: &Point3, b: &Point3| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
    let mut picks = vec![start];
    while picks.len() < n.min(coords.len()) {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..coords.len()).filter(|i| !picks.contains(i)) {
            let d = picks.iter().map(|&p| sq(&coords[i], &coords[p])).fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        picks.push(best.unwrap().0);
    }
    (0..n).map(|t| picks[t % picks.len()]).collect()
}

fn criterion_4() -> Outcome {
    let (mut mismatches, mut tie_sets) = (0, 0);
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(1..=10);
        let grid = seed % 2 == 0;
        let coords: Vec<Point3> = (0..m)
            .map(|_| {
                if grid {
                    [rng.gen_range(0..3) as f64, rng.gen_range(0..3) as f64, rng.gen_range(0..2) as f64]
                } else {
                    [rng.gen(), rng.gen(), rng.gen_range(0.0..4.0)]
                }
            })
            .collect();
        tie_sets += usize::from(grid);
        let start = rng.gen_range(0..m);
        for n in 1..=m + 2 {
            if farthest_point_sample(&coords, n, start).unwrap().indices != fps_reference(&coords, n, start) {
                mismatches += 1;
            }
        }
    }
    check(
        mismatches == 0,
        format!("1000 point sets (M <= 10, {tie_sets} on a tie-heavy grid), every n up to M+2: {mismatches} mismatches"),
    )
}

fn criterion_5() -> Outcome {
    let (n, d) = (8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut store = ParamStore::new();
    let mut layer = GlobalSpil::new(&mut store, "global", GlobalSpilConfig::new(d, n), &mut rng).unwrap();
    jitter_biases(&mut store, &mut rng);
    let coords = random_coords(n, 4, &mut rng);
    let x = uniform(&[n, d], -1.0, 1.0, &mut rng);
    let g = Graph::new();

    let with_zero_z = layer.forward(&g, &store, &coords, g.constant(x.clone()), None).unwrap().value().clone();
    layer.config.use_z = false;
    let base = layer.forward(&g, &store, &coords, g.constant(x.clone()), None).unwrap().value().clone();
    let bit_equal = with_zero_z
        .data()
        .iter()
        .zip(base.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|_| rng.gen::<u32>());
        let pc: Vec<Point3> = perm.iter().map(|&i| coords[i]).collect();
        let px = g.constant(x.clone()).index_select(&perm).unwrap();
        let y = layer.forward(&g, &store, &pc, px, None).unwrap().value().clone();
        for (r, &p) in perm.iter().enumerate() {
            for c in 0..d {
                worst = worst.max((y.at(&[r, c]) - base.at(&[p, c])).abs());
            }
        }
    }
    check(
        worst < 1e-9 && bit_equal,
        format!("100 permutations without Z: max deviation {worst:.1e} < 1e-9; zero Z bit-equal to no Z: {bit_equal}"),
    )
}

struct DeskRun {
    train_acc: f64,
    held_acc: f64,
    seconds: f64,
}

fn desk_run(variant: PositionVariant, train_set: &[SkeletonPointCloud], held: &[SkeletonPointCloud]) -> DeskRun {
    let started = Instant::now();
    let mut cfg = NetworkConfig::desk();
    cfg.set_variant(variant);
    let tc = TrainConfig {
        epochs: 200,
        seed: 0,
        ..TrainConfig::default()
    };
    let mut net = build_network(&cfg, tc.seed).unwrap();
    train(&mut net, train_set, None, &tc, |_| {}).unwrap();
    DeskRun {
        train_acc: evaluate(&net, train_set).unwrap().accuracy,
        held_acc: evaluate(&net, held).unwrap().accuracy,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn criterion_6() -> Outcome {
    let train_set = clouds(64, 1);
    let held = clouds(32, 2);
    let masking = desk_run(PositionVariant::Masking, &train_set, &held);
    let spacing = desk_run(PositionVariant::Spacing, &train_set, &held);
    let minutes = (masking.seconds + spacing.seconds) / 60.0;
    check(
        masking.train_acc >= 0.95 && masking.held_acc >= 0.80 && masking.held_acc >= spacing.held_acc && minutes <= 30.0,
        format!(
            "200 epochs, {} threads: masking train {:.4} >= 0.95, held-out {:.4} >= 0.80; \
             spacing train {:.4}, held-out {:.4} <= masking; {minutes:.1} min <= 30",
            rayon::current_num_threads(),
            masking.train_acc,
            masking.held_acc,
            spacing.train_acc,
            spacing.held_acc
        ),
    )
}

fn run_cli(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_spil"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    run_cli(&["synth", "--out", "data.jsonl", "--n", "16", "--seed", "7"], d)?;
    for (out, threads) in [("a", "1"), ("b", "4")] {
        run_cli(
            &[
                "train", "--preset", "desk", "--data", "data.jsonl", "--out", out, "--epochs", "4", "--seed", "11",
                "--threads", threads,
            ],
            d,
        )?;
    }
    let same = |f: &str| fs::read(d.join("a").join(f)).ok() == fs::read(d.join("b").join(f)).ok();
    let metrics = same("metrics.jsonl");
    let params = same("checkpoint/params.bin");
    check(
        metrics && params,
        format!("two seeded runs (1 and 4 threads): metrics.jsonl identical {metrics}, params.bin identical {params}"),
    )
}

fn criterion_8() -> Outcome {
    let cfg = NetworkConfig::default();
    let net = build_network(&cfg, 0).unwrap();
    let cloud = &clouds(1, 3)[0];
    let g = Graph::new();
    let pooled = net.pooled_features(&g, cloud, &mut Mode::Eval, None).unwrap().shape();

    let mut stage_ok = true;
    let mut widths = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    for s in &cfg.stages {
        let mut store = ParamStore::new();
        let layer = LocalSpil::new(&mut store, "l", s.local.clone(), &mut rng).unwrap();
        let (n, k) = (3, 5);
        let g = Graph::new();
        let x = g.constant(uniform(&[n, k, s.local.in_dim], -1.0, 1.0, &mut rng));
        let out = layer.forward(&g, &store, x, &random_coords(n * k, 2, &mut rng), None).unwrap().shape();
        let expected = s.local.num_heads * s.local.head_out_dim;
        stage_ok &= out == [n, expected];
        widths.push(format!("{}x{}={}", s.local.num_heads, s.local.head_out_dim, out[1]));
    }
    check(
        pooled == [1024] && stage_ok,
        format!("pooled feature {pooled:?} == [1024]; stage widths H*head_out_dim: {}", widths.join(", ")),
    )
}

fn criterion_9() -> Outcome {
    let data = clouds(64, 1);
    let balanced = data.iter().filter(|c| c.label == 1).count() * 2 == data.len();
    let untrained = mean_loss(&build_network(&NetworkConfig::desk(), 0).unwrap(), &data).unwrap();
    let g = Graph::new();
    let half = bce_loss(&g, g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()), 1)
        .unwrap()
        .value()
        .item();
    let ln2 = std::f64::consts::LN_2;
    check(
        balanced && (untrained - ln2).abs() <= 0.15 && (half - 0.6931).abs() <= 1e-4,
        format!("untrained balanced BCE {untrained:.4} = ln 2 ± 0.15; bce(Y=1, 0.5) = {half:.6} = 0.6931 ± 1e-4"),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient fidelity", criterion_1),
        (2, "weight normalization", criterion_2),
        (3, "masking semantics", criterion_3),
        (4, "FPS oracle equivalence", criterion_4),
        (5, "global permutation equivariance", criterion_5),
        (6, "desk-scale learning", criterion_6),
        (7, "determinism", criterion_7),
        (8, "shape contracts", criterion_8),
        (9, "loss sanity", criterion_9),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
