//! Pose-sequence ingestion and conversion to skeleton point clouds.

mod augment;
mod pose;
mod synth;

pub use augment::{augment, augment_with_rng, AugmentConfig};
pub use pose::{
    parse_pose_file, parse_pose_lines, write_pose_file, write_pose_lines, Frame, Person, PoseSequence,
    NUM_JOINTS,
};
pub use synth::generate_synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpilError};

/// Coarse body regions of the 18-joint skeleton.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Head,
    Hands,
    Feet,
    CentralBody,
}

/// Part owning each joint index, in the 18-joint kinetics ordering
/// (nose, neck, r-shoulder, r-elbow, r-wrist, l-shoulder, l-elbow, l-wrist,
/// r-hip, r-knee, r-ankle, l-hip, l-knee, l-ankle, r-eye, l-eye, r-ear,
/// l-ear). Elbows and knees travel with their hand or foot.
pub const JOINT_PARTS: [BodyPart; NUM_JOINTS] = {
    use BodyPart::*;
    [
        Head, CentralBody, CentralBody, Hands, Hands, CentralBody, Hands, Hands, CentralBody, Feet, Feet,
        CentralBody, Feet, Feet, Head, Head, Head, Head,
    ]
};

pub fn body_part(joint: usize) -> BodyPart {
    JOINT_PARTS[joint]
}

/// Initial feature constant for each body part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartConstants {
    pub head: f64,
    pub hands: f64,
    pub feet: f64,
    pub central_body: f64,
}

impl Default for PartConstants {
    fn default() -> Self {
        PartConstants {
            head: 0.2,
            hands: 0.8,
            feet: 0.6,
            central_body: 0.4,
        }
    }
}

impl PartConstants {
    pub fn of(&self, part: BodyPart) -> f64 {
        match part {
            BodyPart::Head => self.head,
            BodyPart::Hands => self.hands,
            BodyPart::Feet => self.feet,
            BodyPart::CentralBody => self.central_body,
        }
    }

    pub fn for_joint(&self, joint: usize) -> f64 {
        self.of(body_part(joint))
    }
}

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.05;

/// Every detected joint of a clip as a point `(x, y, frame)` with its
/// initial features `(confidence, part constant)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonPointCloud {
    pub video_id: String,
    pub points: Vec<[f64; 3]>,
    pub features: Vec<[f64; 2]>,
    pub label: u8,
    pub num_frames: usize,
}

impl SkeletonPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Flattens a pose sequence into a point cloud. `x`/`y` are divided by the
/// frame size (and clamped to `[0, 1]`); `z` is the 0-based position of the
/// frame within the sequence. Joints below `conf_threshold` are dropped.
pub fn build_point_cloud(
    seq: &PoseSequence,
    constants: &PartConstants,
    conf_threshold: f64,
) -> Result<SkeletonPointCloud> {
    let mut points = Vec::new();
    let mut features = Vec::new();
    for (z, frame) in seq.frames.iter().enumerate() {
        for person in &frame.persons {
            for (j, &[x, y, conf]) in person.joints.iter().enumerate() {
                if conf < conf_threshold {
                    continue;
                }
                points.push([
                    (x / seq.frame_width).clamp(0.0, 1.0),
                    (y / seq.frame_height).clamp(0.0, 1.0),
                    z as f64,
                ]);
                features.push([conf, constants.for_joint(j)]);
            }
        }
    }
    if points.is_empty() {
        return Err(SpilError::EmptyCloud(seq.video_id.clone()));
    }
    Ok(SkeletonPointCloud {
        video_id: seq.video_id.clone(),
        points,
        features,
        label: seq.label,
        num_frames: seq.frames.len(),
    })
}
