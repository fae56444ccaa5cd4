//! Model files: one JSON document holding a metadata block followed by
//! every weight tensor as a nested list of rows. Floats are written with 17
//! significant digits, so a load reproduces every weight bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

use super::{FusionError, LayerSizes, ModalitySpec, Model, Pooling, Topology};

pub const MODEL_FORMAT_VERSION: &str = "gethr-v1";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: String,
    topology: String,
    modalities: Vec<ModalitySpec>,
    classes: Vec<String>,
    pooling: Pooling,
    layers: LayerSizes,
    weights: BTreeMap<String, Vec<Vec<f64>>>,
}

/// JSON formatter that prints every float in `{:.16e}` form.
#[derive(Default)]
pub(crate) struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub(crate) fn to_json_full_precision<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision);
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

pub fn model_to_json(model: &Model) -> Result<String, FusionError> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION.to_string(),
        topology: model.topology().to_string(),
        modalities: model.modalities(),
        classes: model.classes.clone(),
        pooling: model.pooling(),
        layers: model.sizes(),
        weights: model
            .tensors()
            .into_iter()
            .map(|t| (t.name.clone(), t.value.to_rows()))
            .collect(),
    };
    to_json_full_precision(&file).map_err(|e| FusionError::Format(e.to_string()))
}

pub fn model_from_json(text: &str) -> Result<Model, FusionError> {
    let mut file: ModelFile = serde_json::from_str(text).map_err(|e| FusionError::Format(e.to_string()))?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(FusionError::Format(format!(
            "unsupported format version `{}` (expected `{MODEL_FORMAT_VERSION}`)",
            file.format_version
        )));
    }
    let topology: Topology = file.topology.parse()?;
    let mut model = Model::new(
        &topology,
        &file.modalities,
        file.classes,
        &file.layers,
        file.pooling,
        None,
    )?;
    for tensor in model.tensors_mut() {
        let rows = file
            .weights
            .remove(&tensor.name)
            .ok_or_else(|| FusionError::Format(format!("missing weight `{}`", tensor.name)))?;
        let value =
            Matrix::from_rows(&rows).map_err(|e| FusionError::Format(format!("weight `{}`: {e}", tensor.name)))?;
        if value.shape() != tensor.shape() {
            return Err(FusionError::Format(format!(
                "weight `{}` has shape {:?}, expected {:?}",
                tensor.name,
                value.shape(),
                tensor.shape()
            )));
        }
        tensor.value = value;
    }
    if let Some(extra) = file.weights.keys().next() {
        return Err(FusionError::Format(format!("unexpected weight `{extra}`")));
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), FusionError> {
    fs::write(path, model_to_json(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model, FusionError> {
    model_from_json(&fs::read_to_string(path)?)
}
