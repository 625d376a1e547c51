use std::fs::{self, File};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde_json::Value;
use spil::ingest::{build_point_cloud, parse_pose_lines, SkeletonPointCloud};
use spil::SpilError;

use crate::config::RunConfig;

/// Reads a JSON-lines file of either pose sequences or point clouds. The
/// first non-empty line decides: a record with a `points` field marks a
/// point-cloud file.
pub fn load_clouds(path: &Path, cfg: &RunConfig) -> Result<Vec<SkeletonPointCloud>, SpilError> {
    let text = fs::read_to_string(path).map_err(|e| SpilError::io(path, e))?;
    let is_cloud_file = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| serde_json::from_str::<Value>(l).ok())
        .is_some_and(|v| v.get("points").is_some());
    let clouds = if is_cloud_file {
        parse_cloud_lines(text.as_bytes())?
    } else {
        parse_pose_lines(text.as_bytes())?
            .iter()
            .map(|s| build_point_cloud(s, &cfg.part_constants, cfg.conf_threshold))
            .collect::<Result<_, _>>()?
    };
    if clouds.is_empty() {
        return Err(SpilError::EmptyInput("data file has no records"));
    }
    Ok(clouds)
}

fn parse_cloud_lines(reader: impl BufRead) -> Result<Vec<SkeletonPointCloud>, SpilError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SpilError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let cloud: SkeletonPointCloud = serde_json::from_str(&line).map_err(|e| SpilError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        validate_cloud(&cloud)?;
        out.push(cloud);
    }
    Ok(out)
}

fn validate_cloud(c: &SkeletonPointCloud) -> Result<(), SpilError> {
    let fail = |message: String| {
        Err(SpilError::Validation {
            video_id: c.video_id.clone(),
            message,
        })
    };
    if c.is_empty() {
        return Err(SpilError::EmptyCloud(c.video_id.clone()));
    }
    if c.points.len() != c.features.len() {
        return fail(format!("{} points but {} feature rows", c.points.len(), c.features.len()));
    }
    if c.label > 1 {
        return fail(format!("label {} is not 0 or 1", c.label));
    }
    if c.points.iter().flatten().chain(c.features.iter().flatten()).any(|v| !v.is_finite()) {
        return fail("non-finite coordinate or feature".into());
    }
    Ok(())
}

pub fn write_clouds(path: &Path, clouds: &[SkeletonPointCloud]) -> Result<(), SpilError> {
    let file = File::create(path).map_err(|e| SpilError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for c in clouds {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n").map_err(|e| SpilError::io(path, e))?;
    }
    w.flush().map_err(|e| SpilError::io(path, e))
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), SpilError> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| SpilError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use spil::ingest::{generate_synthetic, write_pose_file};

    #[test]
    fn pose_and_cloud_files_load_alike() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let poses = dir.path().join("p.jsonl");
        write_pose_file(&poses, &generate_synthetic(4, 2)).unwrap();
        let from_poses = load_clouds(&poses, &cfg).unwrap();
        let clouds = dir.path().join("c.jsonl");
        write_clouds(&clouds, &from_poses).unwrap();
        assert_eq!(load_clouds(&clouds, &cfg).unwrap(), from_poses);
    }

    #[test]
    fn mismatched_features_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            r#"{"video_id":"a","points":[[0,0,0]],"features":[],"label":0,"num_frames":1}"#,
        )
        .unwrap();
        let err = load_clouds(&path, &RunConfig::default()).unwrap_err();
        assert!(matches!(err, SpilError::Validation { .. }), "{err}");
    }

    #[test]
    fn bad_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"video_id\":\"a\",\"points\":[[0,0,0]],\"features\":[[1,0]],\"label\":0,\"num_frames\":1}\n{oops\n",
        )
        .unwrap();
        let err = load_clouds(&path, &RunConfig::default()).unwrap_err();
        assert!(matches!(err, SpilError::Parse { line: 2, .. }), "{err}");
    }
}
