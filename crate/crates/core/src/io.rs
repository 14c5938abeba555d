//! On-disk artifacts: the binary tensor container, JSON config loading with
//! strict validation, run manifests with dataset fingerprints, and training
//! checkpoints (parameter tensors + optimizer moments + rng position).
//!
//! Tensor files are fully validated header-first; the payload is never
//! allocated before the dims have been checked for overflow and against the
//! actual file length.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::synthgen::GenConfig;
use crate::trainer::{AdamState, Model, RunState, TrainConfig, GROUPS};
use crate::spatial::GridSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const TENSOR_MAGIC: [u8; 4] = *b"SPCY";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
pub const DTYPE_F64: u32 = 2;
/// More axes than any artifact uses; a header claiming more is malformed.
const MAX_NDIM: u32 = 16;
/// Payload cap (1 TiB); dims whose product exceeds this are rejected
/// before any allocation.
const MAX_PAYLOAD_BYTES: u64 = 1 << 40;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn write_all(w: &mut impl Write, path: &Path, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(|e| Error::io(path_str(path), e))
}

/// Writes `tensor` with the given dtype code. 32-bit payloads round each
/// value to the nearest representable float.
fn write_tensor_dtype(path: &Path, tensor: &Tensor, dtype: u32) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    write_all(&mut w, path, &TENSOR_MAGIC)?;
    write_all(&mut w, path, &TENSOR_VERSION.to_le_bytes())?;
    write_all(&mut w, path, &dtype.to_le_bytes())?;
    write_all(&mut w, path, &(tensor.shape().len() as u32).to_le_bytes())?;
    for &dim in tensor.shape() {
        write_all(&mut w, path, &(dim as u64).to_le_bytes())?;
    }
    match dtype {
        DTYPE_F64 => {
            for &v in tensor.data() {
                write_all(&mut w, path, &v.to_le_bytes())?;
            }
        }
        DTYPE_F32 => {
            for &v in tensor.data() {
                write_all(&mut w, path, &(v as f32).to_le_bytes())?;
            }
        }
        other => return Err(Error::Validation(format!("unknown dtype code {other}"))),
    }
    w.flush().map_err(|e| Error::io(path_str(path), e))
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    write_tensor_dtype(path, tensor, DTYPE_F64)
}

pub fn write_tensor_f32(path: &Path, tensor: &Tensor) -> Result<()> {
    write_tensor_dtype(path, tensor, DTYPE_F32)
}

fn read_exact(r: &mut impl Read, path: &Path, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::format(path_str(path), format!("truncated {what}")))
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, path, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor, validating the complete header (magic, version, dtype,
/// dims, payload length) before allocating the payload.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, path, &mut magic, "header")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::format(path_str(path), format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r, path, "header")?;
    if version != TENSOR_VERSION {
        return Err(Error::format(path_str(path), format!("unsupported version {version}")));
    }
    let dtype = read_u32(&mut r, path, "header")?;
    let elem_size: u64 = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return Err(Error::format(path_str(path), format!("unknown dtype code {other}"))),
    };
    let ndim = read_u32(&mut r, path, "header")?;
    if ndim > MAX_NDIM {
        return Err(Error::format(path_str(path), format!("ndim {ndim} exceeds the {MAX_NDIM}-axis limit")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    let mut numel: u64 = 1;
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        read_exact(&mut r, path, &mut b, "dims")?;
        let dim = u64::from_le_bytes(b);
        numel = numel
            .checked_mul(dim)
            .filter(|&n| n.checked_mul(elem_size).is_some_and(|bytes| bytes <= MAX_PAYLOAD_BYTES))
            .ok_or_else(|| Error::format(path_str(path), format!("dims overflow: {dim} overflows the payload size")))?;
        dims.push(dim as usize);
    }
    let numel = numel as usize;
    let mut data = Vec::with_capacity(numel);
    match dtype {
        DTYPE_F64 => {
            let mut b = [0u8; 8];
            for _ in 0..numel {
                read_exact(&mut r, path, &mut b, "payload")?;
                data.push(f64::from_le_bytes(b));
            }
        }
        _ => {
            let mut b = [0u8; 4];
            for _ in 0..numel {
                read_exact(&mut r, path, &mut b, "payload")?;
                data.push(f32::from_le_bytes(b) as f64);
            }
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path_str(path), e))? != 0 {
        return Err(Error::format(path_str(path), "trailing bytes after payload".to_string()));
    }
    Tensor::from_vec(dims, data)
}

/// 64-bit FNV-1a over a byte stream.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// FNV-1a fingerprint of a file's bytes, streamed in chunks.
pub fn fingerprint_file(path: &Path) -> Result<u64> {
    let file = File::open(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut r = BufReader::new(file);
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut buf = [0u8; 8192];
    loop {
        let n = r.read(&mut buf).map_err(|e| Error::io(path_str(path), e))?;
        if n == 0 {
            return Ok(hash);
        }
        for &b in &buf[..n] {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// Describes one generated dataset or training run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Software version that wrote the artifacts.
    pub version: String,
    pub seed: u64,
    /// FNV-1a 64 of the observations file, as 16 hex digits.
    pub fingerprint: String,
    /// File inventory relative to the manifest's directory.
    pub files: Vec<String>,
    /// Echo of the config that produced the artifacts.
    pub config: serde_json::Value,
    /// Free-form metadata (format version, metric conventions, ...).
    pub metadata: serde_json::Value,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path_str(&path), e))
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path_str(&path), e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path_str(&path), e.to_string()))
}

/// Checks the manifest invariants: every inventoried file exists and the
/// fingerprint matches the observations file when one is listed.
pub fn verify_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    for name in &manifest.files {
        let path = dir.join(name);
        if !path.exists() {
            return Err(Error::Validation(format!("manifest lists missing file {}", path.display())));
        }
        if name == OBSERVATIONS_FILE {
            let got = format!("{:016x}", fingerprint_file(&path)?);
            if got != manifest.fingerprint {
                return Err(Error::Validation(format!(
                    "observation fingerprint mismatch: manifest {} vs file {got}",
                    manifest.fingerprint
                )));
            }
        }
    }
    Ok(())
}

pub const OBSERVATIONS_FILE: &str = "observations.spcy";
pub const LATENTS_FILE: &str = "latents.spcy";
pub const GRAPH_FILE: &str = "graph.spcy";

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path_str(path), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Loads and validates a training config; unknown keys are rejected with
/// the offending name, defaults fill omitted keys.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let cfg: TrainConfig = read_json_file(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads and validates a generator config.
pub fn load_gen_config(path: &Path) -> Result<GenConfig> {
    let cfg: GenConfig = read_json_file(path)?;
    cfg.validate()?;
    Ok(cfg)
}

pub const CHECKPOINT_STATE_FILE: &str = "state.json";
const GROUP_NAMES: [&str; 5] = ["graph", "scm", "encoder", "factors", "decoder"];

/// Scalar training state saved alongside the parameter tensors. Non-finite
/// sentinels (`h_prev` starts at infinity, `best_val` at negative infinity)
/// are stored as `None` since JSON has no non-finite numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
    lambda_al: f64,
    c_al: f64,
    h_prev: Option<f64>,
    outer_step: usize,
    global_step: u64,
    epoch: usize,
    best_val: Option<f64>,
    /// Per group: number of moment tensors and the step count.
    adam: Vec<(usize, u64)>,
}

fn tensor_file(dir: &Path, stem: &str, index: usize) -> PathBuf {
    dir.join(format!("{stem}.{index}.spcy"))
}

/// Writes the full run state into `dir`: every parameter tensor under
/// `{group}.{i}.spcy`, Adam moments under `adam.{group}.{m|v}.{i}.spcy`,
/// the nonlinear-residual statistics, and the scalars in `state.json`.
pub fn save_checkpoint(dir: &Path, state: &mut RunState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(path_str(dir), e))?;
    let mut adam = Vec::with_capacity(GROUPS.len());
    for (gi, &group) in GROUPS.iter().enumerate() {
        for (i, tensor) in state.model.collect_group(group).iter().enumerate() {
            write_tensor(&tensor_file(dir, GROUP_NAMES[gi], i), tensor)?;
        }
        let (m, v, t) = state.adam[gi].parts();
        for (i, tensor) in m.iter().enumerate() {
            write_tensor(&tensor_file(dir, &format!("adam.{}.m", GROUP_NAMES[gi]), i), tensor)?;
        }
        for (i, tensor) in v.iter().enumerate() {
            write_tensor(&tensor_file(dir, &format!("adam.{}.v", GROUP_NAMES[gi]), i), tensor)?;
        }
        adam.push((m.len(), t));
    }
    write_tensor(&dir.join("noise_stats.mean.spcy"), &state.model.noise_stats.mean)?;
    write_tensor(&dir.join("noise_stats.std.spcy"), &state.model.noise_stats.std)?;
    let scalars = CheckpointState {
        seed: state.rng.get_seed().to_vec(),
        stream: state.rng.get_stream(),
        word_pos: state.rng.get_word_pos().to_string(),
        lambda_al: state.lambda_al,
        c_al: state.c_al,
        h_prev: state.h_prev.is_finite().then_some(state.h_prev),
        outer_step: state.outer_step,
        global_step: state.global_step,
        epoch: state.epoch,
        best_val: state.best_val.is_finite().then_some(state.best_val),
        adam,
    };
    let path = dir.join(CHECKPOINT_STATE_FILE);
    let text = serde_json::to_string_pretty(&scalars)
        .map_err(|e| Error::Config(format!("checkpoint serialization: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path_str(&path), e))
}

/// Rebuilds a run state saved by [`save_checkpoint`]. The config and grid
/// must describe the same architecture; tensor shapes are checked when the
/// parameters are restored.
pub fn load_checkpoint(dir: &Path, cfg: &TrainConfig, grid: GridSpec) -> Result<RunState> {
    let scalars: CheckpointState = read_json_file(&dir.join(CHECKPOINT_STATE_FILE))?;
    if scalars.seed.len() != 32 {
        return Err(Error::Validation(format!("rng seed has {} bytes, expected 32", scalars.seed.len())));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&scalars.seed);
    let mut rng = ChaCha20Rng::from_seed(seed);
    rng.set_stream(scalars.stream);
    let word_pos: u128 = scalars
        .word_pos
        .parse()
        .map_err(|_| Error::Validation(format!("bad rng word position {:?}", scalars.word_pos)))?;
    rng.set_word_pos(word_pos);

    // Skeleton with throwaway init; every tensor is overwritten below.
    let mut init_rng = ChaCha20Rng::seed_from_u64(0);
    let mut model = Model::new(&cfg.model_spec(grid)?, &mut init_rng)?;
    let mut groups = Vec::with_capacity(GROUPS.len());
    for (gi, &group) in GROUPS.iter().enumerate() {
        let count = model.collect_group(group).len();
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            tensors.push(read_tensor(&tensor_file(dir, GROUP_NAMES[gi], i))?);
        }
        groups.push(tensors);
    }
    model.restore_all(&groups)?;
    model.noise_stats.mean = read_tensor(&dir.join("noise_stats.mean.spcy"))?;
    model.noise_stats.std = read_tensor(&dir.join("noise_stats.std.spcy"))?;

    if scalars.adam.len() != GROUPS.len() {
        return Err(Error::Validation(format!("checkpoint has {} optimizer groups, expected {}", scalars.adam.len(), GROUPS.len())));
    }
    let mut adam = Vec::with_capacity(GROUPS.len());
    for (gi, &(count, t)) in scalars.adam.iter().enumerate() {
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for i in 0..count {
            m.push(read_tensor(&tensor_file(dir, &format!("adam.{}.m", GROUP_NAMES[gi]), i))?);
            v.push(read_tensor(&tensor_file(dir, &format!("adam.{}.v", GROUP_NAMES[gi]), i))?);
        }
        adam.push(AdamState::from_parts(m, v, t));
    }

    Ok(RunState {
        model,
        adam,
        lambda_al: scalars.lambda_al,
        c_al: scalars.c_al,
        h_prev: scalars.h_prev.unwrap_or(f64::INFINITY),
        outer_step: scalars.outer_step,
        global_step: scalars.global_step,
        epoch: scalars.epoch,
        best_val: scalars.best_val.unwrap_or(f64::NEG_INFINITY),
        rng,
    })
}
