//! Checkpoint directories: one STF1 file per parameter (and per momentum
//! slot) plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Parameter;
use crate::error::{Error, Result};
use crate::nn::{NetConfig, SegNetwork};
use crate::optim::Sgd;
use crate::stf::{self, Dtype};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub momentum: f64,
    /// Velocity file per parameter, in parameter order.
    pub slots: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingState {
    pub iter: usize,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: NetConfig,
    pub parameters: Vec<String>,
    pub training_state: TrainingState,
}

pub struct Checkpoint {
    pub net: SegNetwork,
    pub optimizer: Option<Sgd>,
    pub iter: usize,
}

fn file_name(param: &str) -> String {
    format!("{param}.stf")
}

fn slot_name(param: &str) -> String {
    format!("{param}.velocity.stf")
}

pub fn save(dir: &Path, net: &SegNetwork, optimizer: Option<&Sgd>, iter: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in net.params() {
        stf::write_tensor(dir.join(file_name(&p.name)), p.value(), Dtype::F64)?;
    }
    let optimizer = match optimizer {
        Some(opt) => {
            let mut slots = Vec::new();
            for (p, v) in net.params().iter().zip(opt.velocity()) {
                let name = slot_name(&p.name);
                stf::write_tensor(dir.join(&name), v, Dtype::F64)?;
                slots.push(name);
            }
            Some(OptimizerState {
                momentum: opt.momentum,
                slots,
            })
        }
        None => None,
    };
    let manifest = Manifest {
        config: net.config().clone(),
        parameters: net.params().iter().map(|p| p.name.clone()).collect(),
        training_state: TrainingState { iter, optimizer },
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let params = manifest
        .parameters
        .iter()
        .map(|name| Ok(Parameter::new(name.clone(), stf::read_tensor(dir.join(file_name(name)))?)))
        .collect::<Result<Vec<_>>>()?;
    let net = SegNetwork::from_parameters(manifest.config.clone(), params)?;
    let optimizer = match &manifest.training_state.optimizer {
        Some(state) => {
            if state.slots.len() != net.params().len() {
                return Err(Error::Config(format!(
                    "{}: {} optimizer slots for {} parameters",
                    dir.display(),
                    state.slots.len(),
                    net.params().len()
                )));
            }
            let velocity = state
                .slots
                .iter()
                .map(|s| stf::read_tensor(dir.join(s)))
                .collect::<Result<Vec<_>>>()?;
            Some(Sgd::from_velocity(velocity, state.momentum))
        }
        None => None,
    };
    Ok(Checkpoint {
        net,
        optimizer,
        iter: manifest.training_state.iter,
    })
}
