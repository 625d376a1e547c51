use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpilError};

pub const NUM_JOINTS: usize = 18;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Person {
    /// `[x, y, confidence]` per joint, pixel coordinates.
    pub joints: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: u64,
    pub persons: Vec<Person>,
}

/// One clip's worth of detected skeletons; one line of a pose file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    pub video_id: String,
    pub label: u8,
    pub frame_width: f64,
    pub frame_height: f64,
    pub frames: Vec<Frame>,
}

impl PoseSequence {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| {
            Err(SpilError::Validation {
                video_id: self.video_id.clone(),
                message,
            })
        };
        if self.label > 1 {
            return fail(format!("label must be 0 or 1, found {}", self.label));
        }
        if !(self.frame_width > 0.0 && self.frame_width.is_finite())
            || !(self.frame_height > 0.0 && self.frame_height.is_finite())
        {
            return fail(format!(
                "frame size must be positive, found {}x{}",
                self.frame_width, self.frame_height
            ));
        }
        if self.frames.is_empty() {
            return fail("sequence has no frames".into());
        }
        for pair in self.frames.windows(2) {
            if pair[1].t <= pair[0].t {
                return fail(format!(
                    "frame indices must be strictly increasing, found t={} after t={}",
                    pair[1].t, pair[0].t
                ));
            }
        }
        for frame in &self.frames {
            for (p, person) in frame.persons.iter().enumerate() {
                if person.joints.len() != NUM_JOINTS {
                    return fail(format!(
                        "expected 18 joints, found {} (frame t={}, person {p})",
                        person.joints.len(),
                        frame.t
                    ));
                }
                for (j, &[x, y, c]) in person.joints.iter().enumerate() {
                    if !(0.0..=1.0).contains(&c) || !x.is_finite() || !y.is_finite() {
                        return fail(format!(
                            "joint {j} of person {p} at t={} is invalid: [{x}, {y}, {c}]",
                            frame.t
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parses JSON-lines pose data; blank lines are skipped.
pub fn parse_pose_lines(reader: impl BufRead) -> Result<Vec<PoseSequence>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SpilError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: PoseSequence = serde_json::from_str(&line).map_err(|e| SpilError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        seq.validate()?;
        out.push(seq);
    }
    Ok(out)
}

pub fn parse_pose_file(path: impl AsRef<Path>) -> Result<Vec<PoseSequence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| SpilError::io(path, e))?;
    parse_pose_lines(BufReader::new(file))
}

pub fn write_pose_lines(mut writer: impl Write, seqs: &[PoseSequence]) -> std::io::Result<()> {
    for seq in seqs {
        serde_json::to_writer(&mut writer, seq)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn write_pose_file(path: impl AsRef<Path>, seqs: &[PoseSequence]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| SpilError::io(path, e))?;
    write_pose_lines(BufWriter::new(file), seqs).map_err(|e| SpilError::io(path, e))
}
