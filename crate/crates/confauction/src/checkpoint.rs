//! Versioned `CONFAUCTION-NET-v1` checkpoint container.
//!
//! A checkpoint is a JSON document with a magic header, a kind tag, and the
//! serialized parameters at full precision; mechanism checkpoints bundle
//! both networks plus the architecture spec (and n, m), estimator
//! checkpoints carry the mode tag.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimatorParams;
use crate::mechanism::MechanismParams;
use crate::scalar::Scalar;

pub const MAGIC: &str = "CONFAUCTION-NET-v1";

const KIND_MECHANISM: &str = "mechanism";
const KIND_ESTIMATOR: &str = "estimator";

#[derive(Serialize, Deserialize)]
struct Container<P> {
    magic: String,
    kind: String,
    payload: P,
}

fn save<P: Serialize>(path: &Path, kind: &str, payload: &P) -> Result<()> {
    let container = Container {
        magic: MAGIC.to_string(),
        kind: kind.to_string(),
        payload,
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &container)?;
    Ok(())
}

fn load<P: DeserializeOwned>(path: &Path, kind: &str) -> Result<P> {
    let file = std::fs::File::open(path)?;
    let container: Container<P> = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if container.magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}, expected {MAGIC:?}",
            path.display(),
            container.magic
        )));
    }
    if container.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{}: kind {:?}, expected {kind:?}",
            path.display(),
            container.kind
        )));
    }
    Ok(container.payload)
}

pub fn save_mechanism<T: Scalar>(path: &Path, params: &MechanismParams<T>) -> Result<()> {
    save(path, KIND_MECHANISM, params)
}

pub fn load_mechanism<T: Scalar>(path: &Path) -> Result<MechanismParams<T>> {
    load(path, KIND_MECHANISM)
}

pub fn save_estimator<T: Scalar>(path: &Path, params: &EstimatorParams<T>) -> Result<()> {
    save(path, KIND_ESTIMATOR, params)
}

pub fn load_estimator<T: Scalar>(path: &Path) -> Result<EstimatorParams<T>> {
    load(path, KIND_ESTIMATOR)
}
