//! Checkpoint persistence. A `.ampck` file is a magic tag, a length-prefixed
//! JSON manifest, then every tensor as little-endian 64-bit floats: params in
//! declaration order, batchnorm running means and variances, and optionally
//! the optimizer moment buffers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{CsError, Result};
use crate::model::{NetConfig, Network};
use crate::tape::BnState;
use crate::tensor::Tensor;
use crate::train::EpochLoss;

const MAGIC: &[u8; 8] = b"AMPCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    /// Position in the payload, counted in 64-bit values.
    offset: usize,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct BnMeta {
    name: String,
    channels: usize,
    /// Position of the running mean; the variance follows immediately.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamMeta {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: NetConfig,
    epoch: usize,
    history: Vec<EpochLoss>,
    params: Vec<TensorMeta>,
    bn: Vec<BnMeta>,
    adam: Option<AdamMeta>,
}

#[derive(Debug)]
pub struct Loaded {
    pub net: Network,
    pub adam: Option<Adam>,
    pub epoch: usize,
    pub history: Vec<EpochLoss>,
}

pub fn save(
    path: &Path,
    net: &Network,
    adam: Option<&Adam>,
    epoch: usize,
    history: &[EpochLoss],
) -> Result<()> {
    let mut cursor = 0usize;
    let params_meta = net
        .params()
        .iter()
        .map(|p| {
            let meta = TensorMeta {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: cursor,
                trainable: p.trainable,
            };
            cursor += p.value.numel();
            meta
        })
        .collect();
    let bn_meta = net
        .bn_states()
        .iter()
        .map(|(n, s)| {
            let meta = BnMeta {
                name: n.clone(),
                channels: s.running_mean.len(),
                offset: cursor,
            };
            cursor += 2 * s.running_mean.len();
            meta
        })
        .collect();
    let manifest = Manifest {
        version: VERSION,
        config: net.config,
        epoch,
        history: history.to_vec(),
        params: params_meta,
        bn: bn_meta,
        adam: adam.map(|a| {
            let c = a.config();
            AdamMeta {
                step: a.step_count(),
                lr: c.lr,
                beta1: c.beta1,
                beta2: c.beta2,
                eps: c.eps,
            }
        }),
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| CsError::data(format!("manifest encode: {e}")))?;

    let mut payload: Vec<f64> = Vec::new();
    for p in net.params() {
        payload.extend_from_slice(p.value.data());
    }
    for (_, s) in net.bn_states() {
        payload.extend_from_slice(&s.running_mean);
        payload.extend_from_slice(&s.running_var);
    }
    if let Some(a) = adam {
        let total: usize = net.params().iter().map(|p| p.value.numel()).sum();
        let (m, v) = a.moments();
        // Before the first step the lazy moment buffers are empty; persist
        // them as the zeros they stand for.
        if m.is_empty() {
            payload.extend(std::iter::repeat(0.0).take(2 * total));
        } else {
            payload.extend_from_slice(&m);
            payload.extend_from_slice(&v);
        }
    }

    let mut bytes = Vec::with_capacity(16 + json.len() + payload.len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| CsError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes =
        fs::read(path).map_err(|e| CsError::Io(format!("{}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CsError::data(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + json_len {
        return Err(CsError::data(format!(
            "{}: truncated manifest",
            path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + json_len])
        .map_err(|e| CsError::data(format!("{}: manifest decode: {e}", path.display())))?;
    if manifest.version != VERSION {
        return Err(CsError::data(format!(
            "{}: checkpoint version {} unsupported (want {VERSION})",
            path.display(),
            manifest.version
        )));
    }

    let mut net = Network::init(manifest.config, 0)?;
    if manifest.params.len() != net.params().len() {
        return Err(CsError::data(format!(
            "{}: checkpoint lists {} tensors, model defines {}",
            path.display(),
            manifest.params.len(),
            net.params().len()
        )));
    }
    if manifest.bn.len() != net.bn_states().len() {
        return Err(CsError::data(format!(
            "{}: checkpoint lists {} batchnorm states, model defines {}",
            path.display(),
            manifest.bn.len(),
            net.bn_states().len()
        )));
    }

    let raw = &bytes[16 + json_len..];
    if raw.len() % 8 != 0 {
        return Err(CsError::data(format!(
            "{}: payload length {} is not a multiple of 8",
            path.display(),
            raw.len()
        )));
    }
    let floats: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let param_total: usize = manifest.params.iter().map(|m| m.shape.iter().product::<usize>()).sum();
    let bn_total: usize = manifest.bn.iter().map(|m| 2 * m.channels).sum();
    let adam_total = if manifest.adam.is_some() { 2 * param_total } else { 0 };
    if floats.len() != param_total + bn_total + adam_total {
        return Err(CsError::data(format!(
            "{}: payload holds {} values, manifest requires {}",
            path.display(),
            floats.len(),
            param_total + bn_total + adam_total
        )));
    }

    let mut off = 0;
    for meta in &manifest.params {
        if meta.offset != off {
            return Err(CsError::data(format!(
                "{}: tensor {} claims offset {}, payload cursor is {off}",
                path.display(),
                meta.name,
                meta.offset
            )));
        }
        let n: usize = meta.shape.iter().product();
        let value = Tensor::from_vec(&meta.shape, floats[off..off + n].to_vec())?;
        net.set_param(&meta.name, value)
            .map_err(|e| CsError::data(format!("{}: {e}", path.display())))?;
        if !meta.trainable {
            net.freeze(&meta.name)?;
        }
        off += n;
    }
    for meta in &manifest.bn {
        if meta.offset != off {
            return Err(CsError::data(format!(
                "{}: batchnorm {} claims offset {}, payload cursor is {off}",
                path.display(),
                meta.name,
                meta.offset
            )));
        }
        let c = meta.channels;
        let state = BnState {
            running_mean: floats[off..off + c].to_vec(),
            running_var: floats[off + c..off + 2 * c].to_vec(),
        };
        net.set_bn(&meta.name, state)
            .map_err(|e| CsError::data(format!("{}: {e}", path.display())))?;
        off += 2 * c;
    }
    let adam = match &manifest.adam {
        Some(meta) => {
            let mut a = Adam::new(AdamConfig {
                lr: meta.lr,
                beta1: meta.beta1,
                beta2: meta.beta2,
                eps: meta.eps,
            });
            let m = &floats[off..off + param_total];
            let v = &floats[off + param_total..off + 2 * param_total];
            a.restore(net.params(), m, v, meta.step)?;
            Some(a)
        }
        None => None,
    };

    Ok(Loaded {
        net,
        adam,
        epoch: manifest.epoch,
        history: manifest.history,
    })
}
