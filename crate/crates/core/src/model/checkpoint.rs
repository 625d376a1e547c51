use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpilError};
use crate::numerics::Tensor;

use super::config::NetworkConfig;
use super::network::{build_network, SpilNetwork};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A trained network's configuration and parameters, in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub config: NetworkConfig,
    pub parameters: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: NetworkConfig,
    parameters: Vec<ManifestEntry>,
}

impl ModelCheckpoint {
    pub fn from_network(net: &SpilNetwork) -> Self {
        let parameters = net
            .params
            .ids_by_name()
            .into_iter()
            .map(|id| {
                let p = net.params.get(id);
                ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                }
            })
            .collect();
        ModelCheckpoint {
            format_version: FORMAT_VERSION,
            config: net.config.clone(),
            parameters,
        }
    }

    /// Writes `manifest.json` and `params.bin` (little-endian f64) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| SpilError::io(dir, e))?;
        let manifest = Manifest {
            format_version: self.format_version,
            config: self.config.clone(),
            parameters: self
                .parameters
                .iter()
                .map(|p| ManifestEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| SpilError::io(&path, e))?;
        let bytes: Vec<u8> = self
            .parameters
            .iter()
            .flat_map(|p| p.data.iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        let path = dir.join(PARAMS_FILE);
        fs::write(&path, bytes).map_err(|e| SpilError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| SpilError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(SpilError::FormatVersion {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let path = dir.join(PARAMS_FILE);
        let bytes = fs::read(&path).map_err(|e| SpilError::io(&path, e))?;
        let expected: usize = manifest.parameters.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if bytes.len() != expected * 8 {
            return Err(SpilError::Checkpoint(format!(
                "{} holds {} bytes but the manifest describes {} values ({} bytes)",
                path.display(),
                bytes.len(),
                expected,
                expected * 8
            )));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut parameters = Vec::with_capacity(manifest.parameters.len());
        for entry in manifest.parameters {
            let n = entry.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
                return Err(SpilError::Checkpoint(format!("parameter `{}` holds non-finite value {bad}", entry.name)));
            }
            parameters.push(ParamRecord {
                name: entry.name,
                shape: entry.shape,
                data,
            });
        }
        Ok(ModelCheckpoint {
            format_version: manifest.format_version,
            config: manifest.config,
            parameters,
        })
    }

    /// Rebuilds the network; every parameter must be present with its
    /// expected shape.
    pub fn into_network(self) -> Result<SpilNetwork> {
        let mut net = build_network(&self.config, 0)?;
        if self.parameters.len() != net.params.len() {
            return Err(SpilError::Checkpoint(format!(
                "checkpoint has {} parameters, network expects {}",
                self.parameters.len(),
                net.params.len()
            )));
        }
        for p in self.parameters {
            let id = net
                .params
                .id(&p.name)
                .ok_or_else(|| SpilError::Checkpoint(format!("unknown parameter `{}`", p.name)))?;
            let current = net.params.value(id).shape().to_vec();
            if current != p.shape {
                return Err(SpilError::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, network expects {:?}",
                    p.name, p.shape, current
                )));
            }
            *net.params.value_mut(id) = Tensor::new(p.shape, p.data)?;
        }
        Ok(net)
    }
}

pub fn save_network(net: &SpilNetwork, dir: &Path) -> Result<()> {
    ModelCheckpoint::from_network(net).save(dir)
}

pub fn load_network(dir: &Path) -> Result<SpilNetwork> {
    ModelCheckpoint::load(dir)?.into_network()
}
