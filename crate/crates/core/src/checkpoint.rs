//! Checkpoint persistence.
//!
//! A checkpoint directory holds one safetensors blob per network
//! (parameters plus Adam moments), the config snapshot, optional text
//! attachments, and `manifest.txt` with the phase tag, counters, RNG stream
//! positions and a SHA-256 per file. The manifest is written last, so a
//! directory without one is an incomplete checkpoint.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use fbnet_autograd::{AdamState, ParamSet, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::config::{Config, Phase};
use crate::error::{Error, Result};
use crate::rng::StreamState;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
const FORMAT: &str = "fbnet-checkpoint 1";

/// Parameters of one network with its optimizer state, if it has one.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub params: ParamSet,
    pub adam: Option<AdamState>,
}

impl NetworkState {
    pub fn frozen(params: ParamSet) -> Self {
        Self { params, adam: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub iteration: u64,
    pub config: Config,
    pub networks: BTreeMap<String, NetworkState>,
    pub rng: BTreeMap<String, StreamState>,
    /// Free-form `key value` pairs (single-line values).
    pub info: BTreeMap<String, String>,
    /// Named text files stored verbatim.
    pub attachments: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(phase: Phase, iteration: u64, config: Config) -> Self {
        Self {
            phase,
            iteration,
            config,
            networks: BTreeMap::new(),
            rng: BTreeMap::new(),
            info: BTreeMap::new(),
            attachments: BTreeMap::new(),
        }
    }

    pub fn network(&self, name: &str) -> Result<&NetworkState> {
        self.networks
            .get(name)
            .ok_or_else(|| Error::Integrity { blob: format!("{name}.safetensors"), message: "network missing from checkpoint".into() })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a parameter set (names, shapes and exact bit patterns).
pub fn param_digest(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn f64_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Serializes named `f64` tensors into a safetensors buffer.
pub fn encode_tensors(tensors: &BTreeMap<String, &Tensor>, metadata: HashMap<String, String>) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> =
        tensors.iter().map(|(k, t)| (k.clone(), f64_bytes(t), t.shape().to_vec())).collect();
    let views = bytes
        .iter()
        .map(|(k, b, s)| TensorView::new(Dtype::F64, s.clone(), b).map(|v| (k.clone(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Data(format!("tensor encoding failed: {e}")))?;
    safetensors::serialize(views, Some(metadata)).map_err(|e| Error::Data(format!("tensor encoding failed: {e}")))
}

/// Inverse of [`encode_tensors`]; failures name `blob`.
pub fn decode_tensors(bytes: &[u8], blob: &str) -> Result<(BTreeMap<String, Tensor>, HashMap<String, String>)> {
    let bad = |m: String| Error::Integrity { blob: blob.to_string(), message: m };
    let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(bad(format!("tensor `{name}` has dtype {:?}, expected F64", view.dtype())));
        }
        let data = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        out.insert(name, Tensor::new(view.shape(), data));
    }
    Ok((out, meta.metadata().clone().unwrap_or_default()))
}

fn encode_network(net: &NetworkState) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    for (k, t) in net.params.iter() {
        tensors.insert(format!("param/{k}"), t);
    }
    let mut meta = HashMap::new();
    if let Some(adam) = &net.adam {
        meta.insert("adam_step".to_string(), adam.step.to_string());
        for (k, t) in adam.m.iter() {
            tensors.insert(format!("adam_m/{k}"), t);
        }
        for (k, t) in adam.v.iter() {
            tensors.insert(format!("adam_v/{k}"), t);
        }
    }
    encode_tensors(&tensors, meta)
}

fn decode_network(bytes: &[u8], blob: &str) -> Result<NetworkState> {
    let (tensors, meta) = decode_tensors(bytes, blob)?;
    let mut params = ParamSet::new();
    let mut adam = meta
        .get("adam_step")
        .map(|s| {
            s.parse::<u64>()
                .map(|step| AdamState { step, ..Default::default() })
                .map_err(|_| Error::Integrity { blob: blob.into(), message: "bad adam_step".into() })
        })
        .transpose()?;
    for (k, t) in tensors {
        if let Some(name) = k.strip_prefix("param/") {
            params.insert(name, t);
        } else if let (Some(name), Some(a)) = (k.strip_prefix("adam_m/"), adam.as_mut()) {
            a.m.insert(name, t);
        } else if let (Some(name), Some(a)) = (k.strip_prefix("adam_v/"), adam.as_mut()) {
            a.v.insert(name, t);
        } else {
            return Err(Error::Integrity { blob: blob.into(), message: format!("unexpected tensor `{k}`") });
        }
    }
    Ok(NetworkState { params, adam })
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    let mut lines = vec![
        format!("format {FORMAT}"),
        format!("phase {}", ckpt.phase),
        format!("iteration {}", ckpt.iteration),
    ];
    for (k, v) in &ckpt.info {
        if !valid_name(k) || v.contains('\n') {
            return Err(Error::Data(format!("checkpoint info `{k}` must be a simple key with a single-line value")));
        }
        lines.push(format!("info {k} {v}"));
    }
    for (label, s) in &ckpt.rng {
        lines.push(format!("rng {label} {} {} {}", s.seed, s.stream, s.word_pos));
    }
    let config = ckpt.config.to_toml_string();
    write(&dir.join(CONFIG_SNAPSHOT), config.as_bytes())?;
    lines.push(format!("file config {CONFIG_SNAPSHOT} {}", sha256_hex(config.as_bytes())));
    for (name, net) in &ckpt.networks {
        if !valid_name(name) {
            return Err(Error::Data(format!("invalid network name `{name}`")));
        }
        let file = format!("{name}.safetensors");
        let bytes = encode_network(net)?;
        write(&dir.join(&file), &bytes)?;
        lines.push(format!("file network {file} {}", sha256_hex(&bytes)));
    }
    for (name, text) in &ckpt.attachments {
        if !valid_name(name) {
            return Err(Error::Data(format!("invalid attachment name `{name}`")));
        }
        write(&dir.join(name), text.as_bytes())?;
        lines.push(format!("file attachment {name} {}", sha256_hex(text.as_bytes())));
    }
    lines.push(String::new());
    write(&manifest_path, lines.join("\n").as_bytes())
}

/// Reads a checkpoint. With `requested` given and different from the
/// stored snapshot, a warning is logged and the snapshot is used.
pub fn load_checkpoint(dir: &Path, requested: Option<&Config>) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::Integrity {
        blob: MANIFEST.into(),
        message: format!("cannot read {}: {e} (incomplete or missing checkpoint)", manifest_path.display()),
    })?;
    let bad = |m: String| Error::Integrity { blob: MANIFEST.into(), message: m };
    let mut phase = None;
    let mut iteration = None;
    let mut config = None;
    let mut format_ok = false;
    let mut ckpt_networks = BTreeMap::new();
    let mut rng = BTreeMap::new();
    let mut info = BTreeMap::new();
    let mut attachments = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (key, rest) = line.split_once(' ').ok_or_else(|| bad(format!("malformed line `{line}`")))?;
        match key {
            "format" => format_ok = rest == FORMAT,
            "phase" => phase = Some(rest.parse::<Phase>().map_err(|e| bad(e.to_string()))?),
            "iteration" => iteration = Some(rest.parse::<u64>().map_err(|_| bad("bad iteration".into()))?),
            "info" => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                info.insert(k.to_string(), v.to_string());
            }
            "rng" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(bad(format!("malformed rng line `{line}`")));
                }
                let stream = f[2].parse().map_err(|_| bad("bad rng stream".into()))?;
                rng.insert(f[0].to_string(), StreamState { seed: f[1].into(), stream, word_pos: f[3].into() });
            }
            "file" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 3 {
                    return Err(bad(format!("malformed file line `{line}`")));
                }
                let (kind, file, digest) = (f[0], f[1], f[2]);
                let path = dir.join(file);
                let bytes = std::fs::read(&path)
                    .map_err(|e| Error::Integrity { blob: file.into(), message: format!("cannot read: {e}") })?;
                if sha256_hex(&bytes) != digest {
                    return Err(Error::Integrity { blob: file.into(), message: "checksum mismatch".into() });
                }
                let as_text = || {
                    String::from_utf8(bytes.clone())
                        .map_err(|_| Error::Integrity { blob: file.into(), message: "not UTF-8".into() })
                };
                match kind {
                    "config" => {
                        config = Some(Config::from_toml_str(&as_text()?).map_err(|e| Error::Integrity {
                            blob: file.into(),
                            message: e.to_string(),
                        })?)
                    }
                    "network" => {
                        let name = file.strip_suffix(".safetensors").unwrap_or(file).to_string();
                        ckpt_networks.insert(name, decode_network(&bytes, file)?);
                    }
                    "attachment" => {
                        attachments.insert(file.to_string(), as_text()?);
                    }
                    other => return Err(bad(format!("unknown file kind `{other}`"))),
                }
            }
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
    }
    if !format_ok {
        return Err(bad("missing or unsupported format line".into()));
    }
    let config = config.ok_or_else(|| bad("no config snapshot listed".into()))?;
    if let Some(req) = requested {
        if req != &config {
            log::warn!("requested config differs from the checkpoint snapshot in {}; using the snapshot", dir.display());
        }
    }
    Ok(Checkpoint {
        phase: phase.ok_or_else(|| bad("missing phase".into()))?,
        iteration: iteration.ok_or_else(|| bad("missing iteration".into()))?,
        config,
        networks: ckpt_networks,
        rng,
        info,
        attachments,
    })
}
