use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use spil::ingest::{PartConstants, DEFAULT_CONF_THRESHOLD};
use spil::model::{NetworkConfig, TrainConfig};
use spil::SpilError;

use crate::error::CliError;

/// Starting point before the config file and overrides are applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Three stages over 2048 points, ending in a 1024-wide feature.
    Paper,
    /// One small stage over 256 points; trains on a laptop CPU in minutes.
    Desk,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
}

/// Everything a run needs, resolved from preset, config file and flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub part_constants: PartConstants,
    /// Joints with a lower confidence are dropped when building clouds.
    pub conf_threshold: f64,
    pub data: DataPaths,
    /// Worker threads; `None` uses every core.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_preset(Preset::Paper)
    }
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        let network = match preset {
            Preset::Paper => NetworkConfig::default(),
            Preset::Desk => NetworkConfig::desk(),
        };
        RunConfig {
            network,
            train: TrainConfig::default(),
            part_constants: PartConstants::default(),
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            data: DataPaths::default(),
            threads: None,
        }
    }

    /// Preset, then the JSON file merged over it, then `overrides` as
    /// `(dotted.path, value)` pairs.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut tree = serde_json::to_value(RunConfig::from_preset(preset)).map_err(SpilError::from)?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| SpilError::io(path, e))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| SpilError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, patch);
        }
        for (key, raw) in overrides {
            set_path(&mut tree, key, raw)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| SpilError::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SpilError> {
        self.network.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(SpilError::Config(format!(
                "conf_threshold {} must lie in [0, 1]",
                self.conf_threshold
            )));
        }
        if self.threads == Some(0) {
            return Err(SpilError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), SpilError> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| SpilError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, SpilError> {
        let text = fs::read_to_string(path).map_err(|e| SpilError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key,
/// everything else is replaced.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets one leaf. The value is read as JSON when it parses, and as a plain
/// string otherwise, so `--network.dropout_rate 0.3` and
/// `--network.initial_features parts` both work. Numeric path segments
/// index into lists.
fn set_path(tree: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = tree;
    for part in key.split('.') {
        let next = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => usize::from_str(part).ok().and_then(|i| items.get_mut(i)),
            _ => None,
        };
        node = next.ok_or_else(|| CliError::Usage(format!("unknown configuration key `{key}`")))?;
    }
    *node = value;
    Ok(())
}

/// Reads trailing `--dotted.key value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("unexpected argument `{flag}`")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let value = it
            .next()
            .ok_or_else(|| CliError::Usage(format!("missing value for `{flag}`")))?;
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use spil::local_spil::PositionVariant;
    use spil::model::InitialFeatures;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn dotted_overrides_reach_leaves() {
        let cfg = RunConfig::resolve(
            Preset::Desk,
            None,
            &pairs(&[
                ("network.dropout_rate", "0.3"),
                ("train.epochs", "7"),
                ("network.stages.0.local.variant", "spacing"),
                ("network.initial_features", "both"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.network.dropout_rate, 0.3);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.network.stages[0].local.variant, PositionVariant::Spacing);
        assert_eq!(cfg.network.initial_features, InitialFeatures::Both);
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let err = RunConfig::resolve(Preset::Desk, None, &pairs(&[("train.nope", "1")])).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }

    #[test]
    fn bad_value_is_config_error() {
        let err = RunConfig::resolve(Preset::Desk, None, &pairs(&[("train.epochs", "-3")])).unwrap_err();
        assert!(matches!(err, CliError::Spil(SpilError::Config(_))), "{err}");
    }

    #[test]
    fn file_merges_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"learning_rate": 0.01}, "conf_threshold": 0.2}"#).unwrap();
        let cfg = RunConfig::resolve(Preset::Desk, Some(&path), &[]).unwrap();
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.conf_threshold, 0.2);
        assert_eq!(cfg.network, NetworkConfig::desk());
    }

    #[test]
    fn echoed_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = RunConfig::resolve(Preset::Paper, None, &pairs(&[("threads", "2")])).unwrap();
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
        let again = RunConfig::resolve(Preset::Desk, Some(&path), &[]).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn override_parsing() {
        let args: Vec<String> = ["--a.b", "1", "--c=x"].iter().map(|s| s.to_string()).collect();
        assert_eq!(parse_overrides(&args).unwrap(), pairs(&[("a.b", "1"), ("c", "x")]));
        assert!(parse_overrides(&["--a".to_string()]).is_err());
        assert!(parse_overrides(&["a".to_string()]).is_err());
    }
}
