//! Small feed-forward networks with hand-written back-propagation.
//!
//! The policy network maps a flattened state to `3J + 1` logits (softmax
//! head); the value network has the same body and a single linear output.
//! Both are plain [`Network`]s; the head only changes how the raw output is
//! read.

mod adam;
mod loss;
mod network;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use loss::{
    cross_entropy, cross_entropy_grad, entropy, entropy_grad, log_prob_grad, masked_softmax, softmax,
};
pub use network::{Dense, ForwardCache, Gradients, Head, Network};

use crate::error::{Error, Result};
use crate::num::Scalar;

/// Action probabilities for one input.
pub fn forward_policy<T: Scalar>(net: &Network<T>, input: &[T]) -> Result<Vec<T>> {
    Ok(softmax(&net.forward(input)?))
}

/// Value estimate for one input.
pub fn forward_value<T: Scalar>(net: &Network<T>, input: &[T]) -> Result<T> {
    Ok(net.forward(input)?[0])
}

pub const CHECKPOINT_FORMAT: &str = "dlsched-network";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
struct Checkpoint<T> {
    format: String,
    version: u32,
    network: Network<T>,
}

/// Writes `net` as a versioned JSON record (row-major weights).
pub fn save_network<T: Scalar + Serialize>(net: &Network<T>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_network(net, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_network<T: Scalar + Serialize, W: Write>(net: &Network<T>, out: W) -> Result<()> {
    let ck = Checkpoint { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, network: net.clone() };
    serde_json::to_writer(out, &ck)?;
    Ok(())
}

pub fn load_network<T: Scalar + DeserializeOwned>(path: &Path) -> Result<Network<T>> {
    let ck: Checkpoint<T> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            ck.format,
            ck.version
        )));
    }
    ck.network.validate()?;
    Ok(ck.network)
}
