//! Model definition: reference attention, spatial filtering, the full
//! network, and the training / evaluation pipeline around it.

pub mod bench;
pub mod mam;
pub mod net;
pub mod pipeline;
pub mod safm;
pub mod synthetic;

pub use bench::{run_bench, run_bench_with, BenchConfig, BenchRow};
pub use net::{
    check_model_gradients, forward_sr_exec, init_params, CheckSetup, ModelConfig, ScaleOffsets,
};

use crate::error::{Error, Result};
use crate::tensor::{serial, ParamStore};
use std::path::Path;

/// Architecture config plus its parameter store, the unit that checkpoints.
#[derive(Clone, Debug)]
pub struct MrefsrModel {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl MrefsrModel {
    /// Freshly initialized model, deterministic in the seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let store = init_params(&config, seed)?;
        Ok(MrefsrModel { config, store })
    }

    /// Writes config and parameter values. Optimizer moments are not
    /// persisted; a loaded model starts its step count at zero.
    pub fn save(&self, path: &Path) -> Result<()> {
        let config_json = serde_json::to_string(&self.config)
            .map_err(|e| Error::Serial(format!("config encode failed: {e}")))?;
        serial::save_model(path, &config_json, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config_json, tensors) = serial::load_model(path)?;
        let config: ModelConfig = serde_json::from_str(&config_json)
            .map_err(|e| Error::Serial(format!("config decode failed: {e}")))?;
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, t) in tensors {
            store.insert(&name, t)?;
        }
        let expect = init_params(&config, 0)?;
        for name in expect.names() {
            let want = expect.value(name)?.shape();
            let got = store
                .value(name)
                .map_err(|_| Error::Serial(format!("checkpoint missing parameter {name}")))?
                .shape();
            if got != want {
                return Err(Error::Serial(format!(
                    "checkpoint parameter {name} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        if store.len() != expect.len() {
            return Err(Error::Serial(format!(
                "checkpoint holds {} parameters, config implies {}",
                store.len(),
                expect.len()
            )));
        }
        Ok(MrefsrModel { config, store })
    }
}
