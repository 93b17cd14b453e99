//! Versioned model checkpoint file (JSON). Stores layout, parameter values,
//! the output clamp and the init seed; write/read round-trips bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MlpModel;
use crate::param::{ParamLayout, ParameterVector};

const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    dims: Vec<usize>,
    seed: u64,
    clamp: f64,
    layout: ParamLayout,
    values: Vec<f64>,
}

pub fn save_model(model: &MlpModel, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        schema_version: SCHEMA_VERSION,
        dims: model.dims().to_vec(),
        seed: model.init_seed(),
        clamp: model.clamp(),
        layout: (*model.layout()).clone(),
        values: model.get_parameters().into_values(),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    let file: CheckpointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::integrity(format!(
            "unsupported checkpoint schema version {}",
            file.schema_version
        )));
    }
    let mut model = MlpModel::new(&file.dims, file.seed)?;
    if *model.layout() != file.layout {
        return Err(Error::integrity("checkpoint layout disagrees with its dims"));
    }
    if file.clamp != model.clamp() {
        return Err(Error::integrity(format!(
            "checkpoint clamp {} is not supported by this build",
            file.clamp
        )));
    }
    let params = ParameterVector::from_values(model.layout(), file.values)
        .map_err(|_| Error::integrity("checkpoint value count disagrees with its layout"))?;
    model.set_parameters(&params)?;
    Ok(model)
}
