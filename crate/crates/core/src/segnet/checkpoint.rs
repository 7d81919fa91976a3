//! Single-file checkpoint container:
//!
//! ```text
//! b"MFSG" | u32 format version | u64 header length | JSON header | tensor data
//! ```
//!
//! All integers and tensor elements are little-endian; tensors are stored
//! contiguously in header order, in the scalar type named by `dtype`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig, SegnetError};
use crate::nn::{AdamConfig, AdamState, Float};

pub const MAGIC: &[u8; 4] = b"MFSG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// A restored network with its optimizer state and free-form metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub network: Network<F>,
    pub optimizer: Option<AdamState<F>>,
    pub metadata: serde_json::Value,
}

fn dtype<F>() -> &'static str {
    if std::mem::size_of::<F>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SegnetError + '_ {
    move |source| SegnetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Tensors in storage order: parameters, batch-norm running statistics, then
/// Adam moments.
fn collect<F: Float>(net: &Network<F>, optimizer: Option<&AdamState<F>>) -> Vec<(String, ArrayD<F>)> {
    let mut out: Vec<(String, ArrayD<F>)> = net
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.value.clone()))
        .collect();
    for (name, u) in net.units() {
        if let Some(bn) = &u.bn {
            out.push((format!("{name}.bn.running_mean"), bn.running_mean.clone().into_dyn()));
            out.push((format!("{name}.bn.running_var"), bn.running_var.clone().into_dyn()));
        }
    }
    if let Some(state) = optimizer {
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, m) in names.iter().zip(&state.m) {
            out.push((format!("adam.m.{name}"), m.clone()));
        }
        for (name, v) in names.iter().zip(&state.v) {
            out.push((format!("adam.v.{name}"), v.clone()));
        }
    }
    out
}

pub fn save_checkpoint<F: Float>(
    path: &Path,
    net: &Network<F>,
    optimizer: Option<&AdamState<F>>,
    metadata: serde_json::Value,
) -> Result<(), SegnetError> {
    let tensors = collect(net, optimizer);
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: dtype::<F>().to_string(),
        config: net.config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, a)| TensorEntry {
                name: name.clone(),
                shape: a.shape().to_vec(),
            })
            .collect(),
        optimizer: optimizer.map(|s| OptimizerHeader {
            config: s.config,
            step: s.step,
        }),
        metadata,
    };
    let json = serde_json::to_vec(&header).map_err(|e| SegnetError::Checkpoint(e.to_string()))?;
    // Write to a sibling temp file and rename so a crash never leaves a
    // truncated checkpoint behind.
    let tmp = path.with_extension("tmp");
    let err = io_err(&tmp);
    let mut w = BufWriter::new(File::create(&tmp).map_err(&err)?);
    w.write_all(MAGIC).map_err(&err)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(&err)?;
    w.write_u64::<LittleEndian>(json.len() as u64).map_err(&err)?;
    w.write_all(&json).map_err(&err)?;
    let single = dtype::<F>() == "f32";
    for (_, a) in &tensors {
        for &x in a.iter() {
            let x = x.to_f64().expect("finite scalar");
            if single {
                w.write_f32::<LittleEndian>(x as f32).map_err(&err)?;
            } else {
                w.write_f64::<LittleEndian>(x).map_err(&err)?;
            }
        }
    }
    w.into_inner()
        .map_err(|e| err(e.into_error()))?
        .sync_all()
        .map_err(&err)?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint<F: Float>(path: &Path) -> Result<Checkpoint<F>, SegnetError> {
    let err = io_err(path);
    let bad = |msg: String| SegnetError::Checkpoint(format!("{}: {msg}", path.display()));
    let mut r = BufReader::new(File::open(path).map_err(&err)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(&err)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(&err)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = r.read_u64::<LittleEndian>().map_err(&err)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(&err)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    if header.dtype != dtype::<F>() {
        return Err(bad(format!("stored as {}, requested {}", header.dtype, dtype::<F>())));
    }
    let single = header.dtype == "f32";
    let mut stored = std::collections::HashMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let x = if single {
                r.read_f32::<LittleEndian>().map_err(&err)? as f64
            } else {
                r.read_f64::<LittleEndian>().map_err(&err)?
            };
            data.push(F::of(x));
        }
        let a = ArrayD::from_shape_vec(IxDyn(&entry.shape), data).map_err(|e| bad(e.to_string()))?;
        stored.insert(entry.name.clone(), a);
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<ArrayD<F>, SegnetError> {
        let a = stored.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if a.shape() != shape {
            return Err(bad(format!("tensor {name} has shape {:?}, expected {shape:?}", a.shape())));
        }
        Ok(a)
    };

    // Rebuild the architecture, then overwrite every tensor.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut net = Network::<F>::build(&header.config, &mut rng)?;
    let mut names = Vec::new();
    for (name, p) in net.named_params_mut() {
        p.value = take(&name, p.value.shape())?;
        names.push(name);
    }
    for (name, u) in net.units_mut() {
        if let Some(bn) = &mut u.bn {
            let c = bn.channels();
            bn.running_mean = take(&format!("{name}.bn.running_mean"), &[c])?
                .into_dimensionality()
                .expect("rank 1");
            bn.running_var = take(&format!("{name}.bn.running_var"), &[c])?
                .into_dimensionality()
                .expect("rank 1");
        }
    }
    let optimizer = match header.optimizer {
        None => None,
        Some(opt) => {
            let mut state = AdamState::new(opt.config);
            state.step = opt.step;
            let shapes: Vec<Vec<usize>> = net.named_params().iter().map(|(_, p)| p.value.shape().to_vec()).collect();
            if opt.step > 0 {
                for (name, shape) in names.iter().zip(&shapes) {
                    state.m.push(take(&format!("adam.m.{name}"), shape)?);
                }
                for (name, shape) in names.iter().zip(&shapes) {
                    state.v.push(take(&format!("adam.v.{name}"), shape)?);
                }
            }
            Some(state)
        }
    };
    if let Some(extra) = stored.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        network: net,
        optimizer,
        metadata: header.metadata,
    })
}
