//! Toy two-person pose sequences for desk-scale experiments.
//!
//! Label 1: two skeletons close in on each other while wrists (and often one
//! ankle) swing toward the other body with a short period and large
//! amplitude. Label 0: two skeletons walking or idling apart with slow,
//! small limb swings. Both classes share frame count, person count, and the
//! confidence distribution, so point counts carry no label information.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::pose::{Frame, Person, PoseSequence, NUM_JOINTS};

const FRAME_WIDTH: f64 = 320.0;
const FRAME_HEIGHT: f64 = 240.0;
const NUM_FRAMES: usize = 16;
const MISSED_JOINT_PROB: f64 = 0.03;

/// Standing pose in units of body height, origin at the hip centre, `y` down,
/// `x` pointing toward the body's front.
const TEMPLATE: [[f64; 2]; NUM_JOINTS] = [
    [0.02, -0.45],
    [0.0, -0.35],
    [-0.02, -0.33],
    [-0.03, -0.18],
    [-0.02, -0.05],
    [0.02, -0.33],
    [0.03, -0.18],
    [0.02, -0.05],
    [-0.02, 0.0],
    [-0.01, 0.22],
    [-0.02, 0.45],
    [0.02, 0.0],
    [0.01, 0.22],
    [0.02, 0.45],
    [0.03, -0.47],
    [0.04, -0.47],
    [0.0, -0.46],
    [0.02, -0.46],
];

const R_ELBOW: usize = 3;
const R_WRIST: usize = 4;
const L_ELBOW: usize = 6;
const L_WRIST: usize = 7;
const R_KNEE: usize = 9;
const R_ANKLE: usize = 10;
const L_KNEE: usize = 12;
const L_ANKLE: usize = 13;

/// Per-limb periodic displacement: `(joint, amplitude_x, amplitude_y, period, phase)`.
/// Displacement along x is one-sided (`0..=amp`) when `strike` is set.
struct Swing {
    joint: usize,
    amp_x: f64,
    amp_y: f64,
    period: f64,
    phase: f64,
    strike: bool,
}

struct Actor {
    height: f64,
    facing: f64,
    start: [f64; 2],
    end: [f64; 2],
    swings: Vec<Swing>,
}

impl Actor {
    fn centre(&self, progress: f64) -> [f64; 2] {
        [
            self.start[0] + (self.end[0] - self.start[0]) * progress,
            self.start[1] + (self.end[1] - self.start[1]) * progress,
        ]
    }

    fn joints(&self, t: f64, progress: f64, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<[f64; 3]> {
        let c = self.centre(progress);
        let mut offsets: Vec<[f64; 2]> = TEMPLATE
            .iter()
            .map(|&[x, y]| [x * self.facing * self.height, y * self.height])
            .collect();
        for s in &self.swings {
            let wave = (2.0 * PI * t / s.period + s.phase).sin();
            let along = if s.strike { 0.5 * (1.0 + wave) } else { wave };
            offsets[s.joint][0] += self.facing * s.amp_x * self.height * along;
            offsets[s.joint][1] += s.amp_y * self.height * wave;
        }
        offsets
            .into_iter()
            .map(|[dx, dy]| {
                let conf = if rng.gen_bool(MISSED_JOINT_PROB) {
                    0.0
                } else {
                    rng.gen_range(0.4..=1.0)
                };
                [
                    (c[0] + dx + noise.sample(rng)).clamp(0.0, FRAME_WIDTH),
                    (c[1] + dy + noise.sample(rng)).clamp(0.0, FRAME_HEIGHT),
                    conf,
                ]
            })
            .collect()
    }
}

fn limb_swings(rng: &mut ChaCha8Rng, amp: f64, period: f64) -> Vec<Swing> {
    let phase = rng.gen_range(0.0..2.0 * PI);
    let mut swings = Vec::new();
    for (joint, scale, shift) in [
        (R_WRIST, 1.0, 0.0),
        (R_ELBOW, 0.5, 0.0),
        (L_WRIST, 1.0, PI),
        (L_ELBOW, 0.5, PI),
        (R_ANKLE, 1.0, PI),
        (R_KNEE, 0.5, PI),
        (L_ANKLE, 1.0, 0.0),
        (L_KNEE, 0.5, 0.0),
    ] {
        swings.push(Swing {
            joint,
            amp_x: amp * scale,
            amp_y: 0.1 * amp * scale,
            period,
            phase: phase + shift,
            strike: false,
        });
    }
    swings
}

fn attack_swings(rng: &mut ChaCha8Rng) -> Vec<Swing> {
    let mut swings = Vec::new();
    for (wrist, elbow) in [(R_WRIST, R_ELBOW), (L_WRIST, L_ELBOW)] {
        let amp = rng.gen_range(0.22..0.32);
        let period = rng.gen_range(2.0..4.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let lift = rng.gen_range(0.05..0.15);
        swings.push(Swing {
            joint: wrist,
            amp_x: amp,
            amp_y: lift,
            period,
            phase,
            strike: true,
        });
        swings.push(Swing {
            joint: elbow,
            amp_x: 0.5 * amp,
            amp_y: 0.5 * lift,
            period,
            phase,
            strike: true,
        });
    }
    if rng.gen_bool(0.6) {
        let (ankle, knee) = if rng.gen_bool(0.5) { (R_ANKLE, R_KNEE) } else { (L_ANKLE, L_KNEE) };
        let amp = rng.gen_range(0.15..0.25);
        let period = rng.gen_range(3.0..5.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        swings.push(Swing {
            joint: ankle,
            amp_x: amp,
            amp_y: -0.3 * amp,
            period,
            phase,
            strike: true,
        });
        swings.push(Swing {
            joint: knee,
            amp_x: 0.5 * amp,
            amp_y: -0.15 * amp,
            period,
            phase,
            strike: true,
        });
    }
    swings
}

fn violent_pair(rng: &mut ChaCha8Rng) -> [Actor; 2] {
    let mid = rng.gen_range(0.35..0.65) * FRAME_WIDTH;
    let gap_start = rng.gen_range(0.28..0.42) * FRAME_WIDTH;
    let gap_end = rng.gen_range(0.08..0.14) * FRAME_WIDTH;
    let y = rng.gen_range(0.45..0.6) * FRAME_HEIGHT;
    let dy = rng.gen_range(-0.05..0.05) * FRAME_HEIGHT;
    let both_fight = rng.gen_bool(0.5);
    let left_swings = attack_swings(rng);
    let right_swings = if both_fight {
        attack_swings(rng)
    } else {
        let amp = rng.gen_range(0.03..0.06);
        let period = rng.gen_range(3.0..6.0);
        limb_swings(rng, amp, period)
    };
    [
        Actor {
            height: rng.gen_range(70.0..100.0),
            facing: 1.0,
            start: [mid - gap_start / 2.0, y],
            end: [mid - gap_end / 2.0, y + dy],
            swings: left_swings,
        },
        Actor {
            height: rng.gen_range(70.0..100.0),
            facing: -1.0,
            start: [mid + gap_start / 2.0, y + dy],
            end: [mid + gap_end / 2.0, y + 2.0 * dy],
            swings: right_swings,
        },
    ]
}

fn calm_pair(rng: &mut ChaCha8Rng) -> [Actor; 2] {
    let walking = rng.gen_bool(0.6);
    let actor = |x0: f64, rng: &mut ChaCha8Rng| {
        let y = rng.gen_range(0.45..0.6) * FRAME_HEIGHT;
        let (vx, amp, period) = if walking {
            (
                rng.gen_range(0.8..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                rng.gen_range(0.06..0.1),
                rng.gen_range(10.0..16.0),
            )
        } else {
            (0.0, rng.gen_range(0.01..0.03), rng.gen_range(12.0..20.0))
        };
        let travel = vx * (NUM_FRAMES - 1) as f64;
        Actor {
            height: rng.gen_range(70.0..100.0),
            facing: if vx < 0.0 { -1.0 } else { 1.0 },
            start: [x0, y],
            end: [x0 + travel, y + rng.gen_range(-3.0..3.0)],
            swings: limb_swings(rng, amp, period),
        }
    };
    let left = actor(rng.gen_range(0.12..0.3) * FRAME_WIDTH, rng);
    let right = actor(rng.gen_range(0.7..0.88) * FRAME_WIDTH, rng);
    [left, right]
}

/// Balanced synthetic set: even indices are label 0, odd indices label 1.
/// Deterministic in `(n_samples, seed)`.
pub fn generate_synthetic(n_samples: usize, seed: u64) -> Vec<PoseSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n_samples)
        .map(|i| {
            let label = (i % 2) as u8;
            let actors = if label == 1 { violent_pair(&mut rng) } else { calm_pair(&mut rng) };
            let t0 = rng.gen_range(0..100u64);
            let frames = (0..NUM_FRAMES)
                .map(|k| {
                    // fights close the gap in the first 60% of the clip
                    let progress = if label == 1 {
                        (k as f64 / (0.6 * NUM_FRAMES as f64)).min(1.0)
                    } else {
                        k as f64 / (NUM_FRAMES - 1) as f64
                    };
                    let persons = actors
                        .iter()
                        .map(|a| Person {
                            joints: a.joints(k as f64, progress, &mut rng, &noise),
                        })
                        .collect();
                    Frame {
                        t: t0 + k as u64,
                        persons,
                    }
                })
                .collect();
            PoseSequence {
                video_id: format!("synth-{seed}-{i:05}"),
                label,
                frame_width: FRAME_WIDTH,
                frame_height: FRAME_HEIGHT,
                frames,
            }
        })
        .collect()
}
