//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!   magic "VMF1"
//!   u32 config byte length, then the config as UTF-8 `key = value` lines
//!   u32 parameter count
//!   per parameter: u32 name length, name bytes, u32 rank, u64 * rank dims,
//!   f64 * numel values
//!
//! Values are stored as 64-bit floats regardless of the engine precision.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, VarmaFormer};
use crate::error::{Error, Result};
use crate::Real;

const MAGIC: &[u8; 4] = b"VMF1";

pub fn config_to_text(cfg: &ModelConfig) -> String {
    format!(
        "lookback = {}\nhorizon = {}\npatch_len = {}\nd_model = {}\nn_layers = {}\nn_heads = {}\nffn_width = {}\np = {}\nq = {}\nalpha = {}\nbeta = {}\nmask_rate = {}\nve_atten = {}\nalpha_trainable = {}\n",
        cfg.lookback,
        cfg.horizon,
        cfg.patch_len,
        cfg.d_model,
        cfg.n_layers,
        cfg.n_heads,
        cfg.ffn_width,
        cfg.ar_order,
        cfg.ma_order,
        cfg.alpha,
        cfg.beta,
        cfg.mask_rate,
        cfg.ve_atten,
        cfg.alpha_trainable
    )
}

pub fn config_from_text(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::CheckpointFormat(format!("config line {} has no '=': {line:?}", i + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |msg: &str| Error::CheckpointFormat(format!("config key {key}: {msg} ({value:?})"));
        macro_rules! parse {
            ($t:ty) => {
                value.parse::<$t>().map_err(|_| bad("unparseable"))?
            };
        }
        match key {
            "lookback" => cfg.lookback = parse!(usize),
            "horizon" => cfg.horizon = parse!(usize),
            "patch_len" => cfg.patch_len = parse!(usize),
            "d_model" => cfg.d_model = parse!(usize),
            "n_layers" => cfg.n_layers = parse!(usize),
            "n_heads" => cfg.n_heads = parse!(usize),
            "ffn_width" => cfg.ffn_width = parse!(usize),
            "p" => cfg.ar_order = parse!(usize),
            "q" => cfg.ma_order = parse!(usize),
            "alpha" => cfg.alpha = parse!(Real),
            "beta" => cfg.beta = parse!(Real),
            "mask_rate" => cfg.mask_rate = parse!(Real),
            "ve_atten" => cfg.ve_atten = parse!(bool),
            "alpha_trainable" => cfg.alpha_trainable = parse!(bool),
            other => {
                return Err(Error::CheckpointFormat(format!(
                    "unknown config key {other:?}"
                )))
            }
        }
    }
    Ok(cfg)
}

pub fn save(model: &VarmaFormer, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let config = config_to_text(model.config());
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    let entries = model.params().export();
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, shape, data) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in &shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&(v as f64).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn load(path: &Path) -> Result<VarmaFormer> {
    let mut r = BufReader::new(File::open(path).map_err(|_| {
        Error::DatasetNotFound(format!("checkpoint {}", path.display()))
    })?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let config_len = read_u32(&mut r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| Error::CheckpointFormat("config is not UTF-8".to_string()))?;
    let cfg = config_from_text(&config_text)?;
    let model = VarmaFormer::new(cfg, 0)?;

    let count = read_u32(&mut r)? as usize;
    let mut seen: HashSet<String> = HashSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::CheckpointFormat("parameter name is not UTF-8".to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf) as Real);
        }
        let param = model
            .params()
            .get(&name)
            .ok_or_else(|| Error::CheckpointFormat(format!("unexpected parameter {name:?}")))?;
        if param.shape() != shape {
            return Err(Error::CheckpointFormat(format!(
                "parameter {name:?} has shape {shape:?}, model expects {:?}",
                param.shape()
            )));
        }
        param.set_data(data)?;
        seen.insert(name);
    }
    if seen.len() != model.params().len() {
        let missing: Vec<String> = model
            .params()
            .iter()
            .map(|p| p.name().to_string())
            .filter(|n| !seen.contains(n))
            .collect();
        return Err(Error::CheckpointFormat(format!(
            "checkpoint is missing parameters: {missing:?}"
        )));
    }
    Ok(model)
}
