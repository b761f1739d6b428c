//! Checkpoint serialization.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "BNNC" | version u32 | header_len u32 | header (UTF-8 key=value lines)
//! | record_count u32 | records... | crc32 u32
//! record := name_len u32 | name | dtype u8 | rank u8 | dims u64 x rank | payload
//! dtype  := 0 raw f64 | 1 packed binary (64 weights per word, MSB-first) | 2 raw f32
//! ```
//!
//! The trailing CRC-32 covers every byte after the magic. Training
//! checkpoints store master weights (and optionally optimizer velocities) as
//! f64. Deployment checkpoints drop masters and optimizer state: binary
//! layers are stored bit-packed and the full-precision residue as f32,
//! which realizes the inference-model storage accounting on disk.

use std::fs;
use std::path::Path;

use crate::entropy::{EntropyConfig, EntropyScope};
use crate::error::{Error, Result};
use crate::model::{build_model, Arch, Model, ModelConfig};
use crate::quant::QuantConfig;
use crate::tensor::Tensor;
use crate::train::OptimizerState;

pub const MAGIC: [u8; 4] = *b"BNNC";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_PACKED: u8 = 1;
const DTYPE_F32: u8 = 2;

fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaveMeta {
    pub epoch: u64,
    pub val_acc: Option<f64>,
    /// Deployment form: packed binary layers, f32 residue, no optimizer.
    pub deployment: bool,
    pub entropy: Option<EntropyConfig>,
}

impl Default for SaveMeta {
    fn default() -> Self {
        SaveMeta { epoch: 0, val_acc: None, deployment: false, entropy: None }
    }
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
    pub meta: SaveMeta,
}

fn format_floats(xs: &[f64]) -> String {
    xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad float '{v}' in header"))))
        .collect()
}

fn build_header(model: &Model, meta: &SaveMeta, opt: Option<&OptimizerState>) -> String {
    let c = &model.config;
    let mut lines = vec![
        "format=bicap-checkpoint".to_string(),
        format!("arch={}", c.arch.id()),
        format!("classes={}", c.num_classes),
        format!("width_den={}", c.width_den),
        format!("in_channels={}", c.in_channels),
        format!("binarize={}", c.binarize as u8),
        format!("act_bits={}", c.quant.activation_bits),
        format!("k={}", c.quant.k),
        format!("ste_clip={}", c.quant.ste_clip),
        format!("per_layer_scale={}", c.quant.per_layer_scale as u8),
        format!("epoch={}", meta.epoch),
        format!("deployment={}", meta.deployment as u8),
    ];
    match &model.norm_stats {
        Some((mean, std)) => {
            lines.push(format!("norm_mean={}", format_floats(mean)));
            lines.push(format!("norm_std={}", format_floats(std)));
        }
        None => {
            lines.push("norm_mean=none".to_string());
            lines.push("norm_std=none".to_string());
        }
    }
    match &meta.entropy {
        Some(e) => {
            lines.push("entropy=1".to_string());
            lines.push(format!("he={}", e.target));
            lines.push(format!("lambda={}", e.lambda));
            lines.push(format!("entropy_k={}", e.k));
            let scope = match &e.scope {
                EntropyScope::AllBinaryConv => "all".to_string(),
                EntropyScope::Layers(names) => names.join(","),
            };
            lines.push(format!("entropy_scope={scope}"));
        }
        None => lines.push("entropy=0".to_string()),
    }
    match meta.val_acc {
        Some(acc) => lines.push(format!("val_acc={acc}")),
        None => lines.push("val_acc=none".to_string()),
    }
    match opt {
        Some(o) if !meta.deployment => {
            lines.push("has_optimizer=1".to_string());
            lines.push(format!("opt_step={}", o.step));
        }
        _ => lines.push("has_optimizer=0".to_string()),
    }
    lines.join("\n")
}

fn push_record(out: &mut Vec<u8>, name: &str, dtype: u8, shape: &[usize], payload: &[u8]) -> Result<()> {
    if name.is_empty() {
        return Err(Error::Format("refusing to save an unnamed parameter".into()));
    }
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(payload);
    Ok(())
}

fn f64_payload(t: &Tensor) -> Vec<u8> {
    let mut p = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        p.extend_from_slice(&v.to_le_bytes());
    }
    p
}

fn f32_payload(t: &Tensor) -> Vec<u8> {
    let mut p = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        p.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    p
}

fn packed_payload(t: &Tensor) -> Result<Vec<u8>> {
    let pf = crate::bitpack::pack(t)?;
    let mut p = Vec::with_capacity(pf.words.len() * 8);
    for w in &pf.words {
        p.extend_from_slice(&w.to_le_bytes());
    }
    Ok(p)
}

/// Serialize the model (plus optional optimizer state) to `path`; returns
/// the byte count written.
pub fn save_checkpoint(
    model: &Model,
    optimizer: Option<&OptimizerState>,
    meta: &SaveMeta,
    path: &Path,
) -> Result<u64> {
    let header = build_header(model, meta, optimizer);

    let mut records: Vec<(String, u8, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut record_err = None;
    model.for_each_param(|pm, t| {
        if record_err.is_some() {
            return;
        }
        let res = if meta.deployment && pm.binary_weight {
            // Store the binarized view; masters are dropped in deployment form.
            let lw_binary = t.map(|w| if w >= 0.0 { 1.0 } else { -1.0 });
            packed_payload(&lw_binary).map(|p| (DTYPE_PACKED, p))
        } else if meta.deployment {
            Ok((DTYPE_F32, f32_payload(t)))
        } else {
            Ok((DTYPE_F64, f64_payload(t)))
        };
        match res {
            Ok((dtype, payload)) => records.push((pm.name, dtype, t.shape().to_vec(), payload)),
            Err(e) => record_err = Some(e),
        }
    });
    if let Some(e) = record_err {
        return Err(e);
    }
    model.for_each_buffer(|name, t| {
        let (dtype, payload) =
            if meta.deployment { (DTYPE_F32, f32_payload(t)) } else { (DTYPE_F64, f64_payload(t)) };
        records.push((name, dtype, t.shape().to_vec(), payload));
    });
    if let (Some(opt), false) = (optimizer, meta.deployment) {
        let mut names = Vec::new();
        model.for_each_param(|pm, _| names.push(pm.name));
        if names.len() != opt.velocities.len() {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        for (name, v) in names.iter().zip(&opt.velocities) {
            records.push((format!("opt.v.{name}"), DTYPE_F64, v.shape().to_vec(), f64_payload(v)));
        }
    }

    let mut body = Vec::new();
    body.extend_from_slice(&VERSION.to_le_bytes());
    body.extend_from_slice(&(header.len() as u32).to_le_bytes());
    body.extend_from_slice(header.as_bytes());
    body.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, dtype, shape, payload) in &records {
        push_record(&mut body, name, *dtype, shape, payload)?;
    }
    let crc = crc32(&body);

    let mut file = Vec::with_capacity(4 + body.len() + 4);
    file.extend_from_slice(&MAGIC);
    file.extend_from_slice(&body);
    file.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, &file)?;
    Ok(file.len() as u64)
}

/// Convert to deployment form and save: packed binary layers, f32 residue.
pub fn save_deployment(model: &Model, meta: &SaveMeta, path: &Path) -> Result<u64> {
    let meta = SaveMeta { deployment: true, ..meta.clone() };
    save_checkpoint(model, None, &meta, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn header_map(header: &str) -> Result<std::collections::BTreeMap<String, String>> {
    let mut map = std::collections::BTreeMap::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed header line '{line}'")))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn header_get<'m>(map: &'m std::collections::BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    map.get(key).map(|s| s.as_str()).ok_or_else(|| Error::Format(format!("header missing '{key}'")))
}

/// Load a checkpoint and rebuild the model (and optimizer state when
/// present). The loaded model is forward-equivalent to the saved one; for
/// deployment checkpoints the masters are restored as the stored `{-1,+1}`
/// weights.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 12 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic: not a bicap checkpoint".into()));
    }
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let body = &bytes[4..bytes.len() - 4];
    if crc32(body) != stored_crc {
        return Err(Error::Format("checksum mismatch (file corrupted or truncated)".into()));
    }

    let mut r = Reader { bytes: body, pos: 0 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let header_len = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(header_len)?)
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let map = header_map(header)?;

    let config = ModelConfig {
        arch: Arch::from_id(header_get(&map, "arch")?)?,
        num_classes: header_get(&map, "classes")?.parse().map_err(|_| Error::Format("bad classes".into()))?,
        width_den: header_get(&map, "width_den")?.parse().map_err(|_| Error::Format("bad width_den".into()))?,
        in_channels: header_get(&map, "in_channels")?.parse().map_err(|_| Error::Format("bad in_channels".into()))?,
        binarize: header_get(&map, "binarize")? == "1",
        quant: QuantConfig {
            activation_bits: header_get(&map, "act_bits")?.parse().map_err(|_| Error::Format("bad act_bits".into()))?,
            k: header_get(&map, "k")?.parse().map_err(|_| Error::Format("bad k".into()))?,
            ste_clip: header_get(&map, "ste_clip")?.parse().map_err(|_| Error::Format("bad ste_clip".into()))?,
            per_layer_scale: header_get(&map, "per_layer_scale")? == "1",
        },
    };
    let deployment = header_get(&map, "deployment")? == "1";
    let epoch: u64 = header_get(&map, "epoch")?.parse().map_err(|_| Error::Format("bad epoch".into()))?;
    let val_acc = match header_get(&map, "val_acc")? {
        "none" => None,
        v => Some(v.parse().map_err(|_| Error::Format("bad val_acc".into()))?),
    };
    let entropy = if header_get(&map, "entropy")? == "1" {
        let scope = match header_get(&map, "entropy_scope")? {
            "all" => EntropyScope::AllBinaryConv,
            names => EntropyScope::Layers(names.split(',').map(str::to_string).collect()),
        };
        Some(EntropyConfig {
            target: header_get(&map, "he")?.parse().map_err(|_| Error::Format("bad he".into()))?,
            lambda: header_get(&map, "lambda")?.parse().map_err(|_| Error::Format("bad lambda".into()))?,
            k: header_get(&map, "entropy_k")?.parse().map_err(|_| Error::Format("bad entropy_k".into()))?,
            scope,
        })
    } else {
        None
    };
    let norm_stats = match (header_get(&map, "norm_mean")?, header_get(&map, "norm_std")?) {
        ("none", _) | (_, "none") => None,
        (m, s) => Some((parse_floats(m)?, parse_floats(s)?)),
    };

    let record_count = r.u32()? as usize;
    let mut records: std::collections::BTreeMap<String, Tensor> = std::collections::BTreeMap::new();
    for _ in 0..record_count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let numel: usize = dims.iter().product();
        let tensor = match dtype {
            DTYPE_F64 => {
                let raw = r.take(numel * 8)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(&dims, data)?
            }
            DTYPE_F32 => {
                let raw = r.take(numel * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                Tensor::from_vec(&dims, data)?
            }
            DTYPE_PACKED => {
                let words_raw = r.take(numel.div_ceil(64) * 8)?;
                let words: Vec<u64> =
                    words_raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
                let pf = crate::bitpack::PackedFilter { words, n: numel, shape: dims.clone() };
                crate::bitpack::unpack(&pf)
            }
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        };
        if records.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate record '{name}'")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }

    // Rebuild the model and fill every registry slot from the records.
    let mut model = build_model(&config, 0)?;
    model.norm_stats = norm_stats;
    let mut missing: Vec<String> = Vec::new();
    let mut consumed = 0usize;
    model.for_each_param_mut(|pm, t| match records.get(&pm.name) {
        Some(rec) if rec.shape() == t.shape() => {
            *t = rec.clone();
            consumed += 1;
        }
        Some(_) => missing.push(format!("{} (shape mismatch)", pm.name)),
        None => missing.push(pm.name),
    });
    model.for_each_buffer_mut(|name, t| match records.get(&name) {
        Some(rec) if rec.shape() == t.shape() => {
            *t = rec.clone();
            consumed += 1;
        }
        Some(_) => missing.push(format!("{name} (shape mismatch)")),
        None => missing.push(name),
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!("checkpoint is missing tensors: {}", missing.join(", "))));
    }
    model.refresh_weights()?;

    let optimizer = if header_get(&map, "has_optimizer")? == "1" {
        let step: u64 =
            header_get(&map, "opt_step")?.parse().map_err(|_| Error::Format("bad opt_step".into()))?;
        let mut velocities = Vec::new();
        let mut verr: Option<Error> = None;
        model.for_each_param(|pm, t| {
            if verr.is_some() {
                return;
            }
            match records.get(&format!("opt.v.{}", pm.name)) {
                Some(rec) if rec.shape() == t.shape() => velocities.push(rec.clone()),
                _ => verr = Some(Error::Format(format!("missing optimizer state for '{}'", pm.name))),
            }
        });
        if let Some(e) = verr {
            return Err(e);
        }
        consumed += velocities.len();
        Some(OptimizerState { velocities, step })
    } else {
        None
    };
    if consumed != records.len() {
        return Err(Error::Format(format!(
            "checkpoint contains {} unexpected tensor(s)",
            records.len() - consumed
        )));
    }

    Ok(LoadedCheckpoint { model, optimizer, meta: SaveMeta { epoch, val_acc, deployment, entropy } })
}
