//! Versioned JSON checkpoints.
//!
//! ```json
//! {"format": "dap-network", "version": 1, "kind": "classifier", "network": {...}}
//! ```
//! Floats are written with shortest round-trip formatting, so loading a
//! checkpoint reproduces the saved parameters bit for bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::network::Network;
use crate::error::{Error, Result};

pub const FORMAT: &str = "dap-network";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    kind: String,
    #[serde(flatten)]
    body: T,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkBody {
    network: Network,
}

pub fn to_json<T: Serialize>(kind: &str, body: &T) -> Result<String> {
    let env = Envelope {
        format: FORMAT.to_string(),
        version: VERSION,
        kind: kind.to_string(),
        body,
    };
    Ok(serde_json::to_string_pretty(&env)?)
}

pub fn from_json<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if env.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", env.format)));
    }
    if env.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", env.version)));
    }
    if env.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", env.kind)));
    }
    Ok(env.body)
}

pub fn network_to_json(net: &Network) -> Result<String> {
    to_json("network", &NetworkBody { network: net.clone() })
}

pub fn network_from_json(text: &str) -> Result<Network> {
    let body: NetworkBody = from_json("network", text)?;
    // re-run structural validation on untrusted input
    Network::with_mask(body.network.layers().to_vec(), body.network.trainable_mask().to_vec())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_network(path: &Path, net: &Network) -> Result<()> {
    write_text(path, &network_to_json(net)?)
}

pub fn load_network(path: &Path) -> Result<Network> {
    network_from_json(&read_text(path)?)
}
