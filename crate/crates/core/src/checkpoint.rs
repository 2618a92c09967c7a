//! Versioned JSON checkpoints of the full training state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainState;

pub const CHECKPOINT_SCHEMA: &str = "ins-mil-ckpt/v1";

#[derive(Serialize, Deserialize)]
struct Envelope<S> {
    schema: String,
    state: S,
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(
        &mut w,
        &Envelope {
            schema: CHECKPOINT_SCHEMA.to_string(),
            state,
        },
    )?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<serde_json::Value> = serde_json::from_reader(BufReader::new(file))?;
    if env.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Schema {
            record: 0,
            reason: format!("checkpoint schema {:?}, expected {CHECKPOINT_SCHEMA:?}", env.schema),
        });
    }
    Ok(serde_json::from_value(env.state)?)
}
