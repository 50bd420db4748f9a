//! Checkpoint directory: `manifest.toml` plus little-endian f32 blobs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Config, RngState};
use crate::conv_lstm::ConvLstmParams;
use crate::error::{Error, Result};
use crate::io::{f32_blob, parse_f32_blob, read_to_string, write_atomic};
use crate::models::{NetConfig, SegmentationNet, TinyNet};

pub const CHECKPOINT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.toml";
const NET_BLOB: &str = "segnet.f32";
const NET_MOMENTUM_BLOB: &str = "segnet_momentum.f32";
const LSTM_BLOB: &str = "convlstm.f32";
const LSTM_MOMENTUM_BLOB: &str = "convlstm_momentum.f32";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub role: Role,
    /// Completed iterations.
    pub iteration: usize,
    pub max_iterations: usize,
    pub config: Config,
    pub net: TinyNet,
    pub net_momentum: Vec<f64>,
    pub lstm: Option<ConvLstmParams>,
    pub lstm_momentum: Option<Vec<f64>>,
    pub rng: RngState,
    /// Parameter digest of the frozen teacher a student was trained with.
    pub teacher_digest: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    role: Role,
    iteration: usize,
    max_iterations: usize,
    net: NetConfig,
    net_params: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    lstm_hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lstm_kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    teacher_digest: Option<String>,
    rng: RngState,
    config: Config,
}

/// SHA-256 of the f32 parameter blob of a network.
pub fn param_digest(net: &TinyNet) -> String {
    hex::encode(Sha256::digest(f32_blob(&net.flatten())))
}

impl Checkpoint {
    pub fn digest(&self) -> String {
        param_digest(&self.net)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        write_atomic(&dir.join(NET_BLOB), &f32_blob(&self.net.flatten()))?;
        write_atomic(&dir.join(NET_MOMENTUM_BLOB), &f32_blob(&self.net_momentum))?;
        if let (Some(lstm), Some(m)) = (&self.lstm, &self.lstm_momentum) {
            write_atomic(&dir.join(LSTM_BLOB), &f32_blob(&lstm.flatten()))?;
            write_atomic(&dir.join(LSTM_MOMENTUM_BLOB), &f32_blob(m))?;
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            role: self.role,
            iteration: self.iteration,
            max_iterations: self.max_iterations,
            net: self.net.config().clone(),
            net_params: self.net.param_count(),
            lstm_hidden: self.lstm.as_ref().map(ConvLstmParams::hidden),
            lstm_kernel: self.lstm.as_ref().map(ConvLstmParams::kernel),
            teacher_digest: self.teacher_digest.clone(),
            rng: self.rng.clone(),
            config: self.config.clone(),
        };
        let text = toml::to_string(&manifest).expect("manifest serialises");
        // the manifest goes last so a readable manifest implies complete blobs
        write_atomic(&dir.join(MANIFEST), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = read_to_string(&path)?;
        let version = toml::from_str::<toml::Table>(&text)
            .map_err(|e| Error::format(&path, e.message()))?
            .get("format_version")
            .and_then(toml::Value::as_integer);
        match version {
            Some(v) if v == CHECKPOINT_VERSION as i64 => {}
            Some(v) => {
                return Err(Error::Version {
                    found: u32::try_from(v).unwrap_or(u32::MAX),
                    expected: CHECKPOINT_VERSION,
                })
            }
            None => return Err(Error::format(&path, "missing format_version")),
        }
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.message()))?;
        m.config.validate()?;
        let mut net = TinyNet::zeros(m.net.clone())?;
        if net.param_count() != m.net_params {
            return Err(Error::format(
                &path,
                "parameter count disagrees with the network shape",
            ));
        }
        let read = |name: &str, n: usize| -> Result<Vec<f64>> {
            let p = dir.join(name);
            let bytes = std::fs::read(&p).map_err(Error::io(&p))?;
            parse_f32_blob(&bytes, n, &p)
        };
        net.load_flat(&read(NET_BLOB, m.net_params)?)?;
        let net_momentum = read(NET_MOMENTUM_BLOB, m.net_params)?;
        let (lstm, lstm_momentum) = match (m.lstm_hidden, m.lstm_kernel) {
            (Some(h), Some(k)) => {
                let mut p = ConvLstmParams::zeros(h, k)?;
                let n = p.param_count();
                p.load_flat(&read(LSTM_BLOB, n)?)?;
                (Some(p), Some(read(LSTM_MOMENTUM_BLOB, n)?))
            }
            (None, None) => (None, None),
            _ => return Err(Error::format(&path, "incomplete ConvLSTM shape")),
        };
        Ok(Self {
            role: m.role,
            iteration: m.iteration,
            max_iterations: m.max_iterations,
            config: m.config,
            net,
            net_momentum,
            lstm,
            lstm_momentum,
            rng: m.rng,
            teacher_digest: m.teacher_digest,
        })
    }
}
