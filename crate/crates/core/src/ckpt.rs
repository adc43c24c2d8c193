//! Checkpoint persistence: a checkpoint is a directory holding a UTF-8
//! key/value manifest plus one raw little-endian `f64` file per tensor.
//!
//! The container round-trips bit-exactly (including negative zero and
//! subnormals), and saving is deterministic: the same logical content always
//! produces byte-identical files. Every checkpoint carries a content id —
//! a hash over its metadata and tensor payloads — that is recorded in the
//! manifest, verified on load, and quoted in evaluation reports so that two
//! runs can be checked for using the same weights.
//!
//! On top of the generic container sit bridges for the two things the
//! pipeline persists: quantizer codebooks and models. A model checkpoint
//! records the full [`ModelConfig`] (including which modules are enabled) in
//! its manifest, so loading rebuilds the exact architecture and consumers
//! can refuse a checkpoint whose configuration differs from the one they
//! were asked to run.

use std::collections::HashMap;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, SemanticEncoder};
use crate::rvq::Codebooks;
use crate::tensor::Tensor;

/// Manifest value identifying the container revision.
const FORMAT: &str = "remask-checkpoint-1";
const MANIFEST_FILE: &str = "manifest.txt";
const KIND_KEY: &str = "kind";
const CODEBOOK_KIND: &str = "codebooks";
const MODEL_KIND: &str = "model";
/// Tensor name for the frozen semantic projection, which lives outside the
/// trainable parameter set.
const FROZEN_PROJ: &str = "frozen.semantic.proj";

/// In-memory checkpoint: ordered metadata plus named tensors.
///
/// Order is part of the identity — it is preserved through save/load, so a
/// reloaded checkpoint re-saves byte-identically.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a metadata entry. Keys are unique; values are single-line.
    pub fn add_meta(&mut self, key: impl Into<String>, value: impl Into<String>) -> Result<()> {
        let (key, value) = (key.into(), value.into());
        check_name("metadata key", &key)?;
        check_value(&key, &value)?;
        if self.meta.iter().any(|(k, _)| *k == key) {
            return Err(Error::checkpoint(format!("duplicate metadata key {key:?}")));
        }
        self.meta.push((key, value));
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::checkpoint(format!("manifest is missing key {key:?}")))
    }

    pub fn meta_entries(&self) -> &[(String, String)] {
        &self.meta
    }

    /// Appends a named tensor. Names are unique.
    pub fn add_tensor(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        check_name("tensor name", &name)?;
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::checkpoint(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn require_tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| Error::checkpoint(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn tensor_entries(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    /// Content id: a stable hash over metadata and tensor payloads (names,
    /// shapes, and exact bit patterns). Identical content yields an identical
    /// id across runs and platforms.
    pub fn id(&self) -> String {
        let mut h = FnvHasher::default();
        h.write(FORMAT.as_bytes());
        h.write(&[0]);
        for (k, v) in &self.meta {
            h.write(k.as_bytes());
            h.write(&[0]);
            h.write(v.as_bytes());
            h.write(&[0]);
        }
        for (name, t) in &self.tensors {
            h.write(name.as_bytes());
            h.write(&[0]);
            h.write(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                h.write(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.write(&v.to_le_bytes());
            }
        }
        format!("{:016x}", h.finish())
    }

    /// Writes the checkpoint into `dir` (created if absent): one binary file
    /// per tensor, then the manifest last so a finished directory always has
    /// a complete manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)
            .map_err(|e| Error::checkpoint(format!("cannot create {}: {e}", dir.display())))?;
        let mut man = String::new();
        man.push_str(&format!("format = {FORMAT}\n"));
        man.push_str(&format!("id = {}\n", self.id()));
        man.push_str(&format!("tensors = {}\n", self.tensors.len()));
        for (k, v) in &self.meta {
            man.push_str(&format!("meta.{k} = {v}\n"));
        }
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            let file = tensor_file(i);
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            man.push_str(&format!("tensor.{i}.name = {name}\n"));
            man.push_str(&format!("tensor.{i}.shape = {}\n", dims.join(" ")));
            man.push_str(&format!("tensor.{i}.dtype = f64\n"));
            man.push_str(&format!("tensor.{i}.file = {file}\n"));
            let path = dir.join(&file);
            fs::write(&path, tensor_bytes(t))
                .map_err(|e| Error::checkpoint(format!("cannot write {}: {e}", path.display())))?;
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, man)
            .map_err(|e| Error::checkpoint(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }

    /// Reads a checkpoint directory, verifying the manifest grammar, the
    /// per-tensor file sizes, and the recorded content id.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::checkpoint(format!("cannot read {}: {e}", path.display())))?;

        let mut format_line: Option<String> = None;
        let mut id_line: Option<String> = None;
        let mut count_line: Option<String> = None;
        let mut ck = Checkpoint::new();
        let mut fields: HashMap<usize, HashMap<String, String>> = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once(" = ") else {
                return Err(Error::checkpoint(format!(
                    "manifest line {n}: expected `key = value`, got {line:?}"
                )));
            };
            if let Some(rest) = key.strip_prefix("meta.") {
                ck.add_meta(rest, value)?;
            } else if let Some(rest) = key.strip_prefix("tensor.") {
                let Some((index, field)) = rest.split_once('.') else {
                    return Err(Error::checkpoint(format!(
                        "manifest line {n}: malformed tensor key {key:?}"
                    )));
                };
                let index: usize = index.parse().map_err(|_| {
                    Error::checkpoint(format!("manifest line {n}: bad tensor index in {key:?}"))
                })?;
                if !matches!(field, "name" | "shape" | "dtype" | "file") {
                    return Err(Error::checkpoint(format!(
                        "manifest line {n}: unrecognized tensor field {field:?}"
                    )));
                }
                let slot = fields.entry(index).or_default();
                if slot.insert(field.to_string(), value.to_string()).is_some() {
                    return Err(Error::checkpoint(format!(
                        "manifest line {n}: duplicate key {key:?}"
                    )));
                }
            } else {
                let slot = match key {
                    "format" => &mut format_line,
                    "id" => &mut id_line,
                    "tensors" => &mut count_line,
                    _ => {
                        return Err(Error::checkpoint(format!(
                            "manifest line {n}: unrecognized key {key:?}"
                        )))
                    }
                };
                if slot.replace(value.to_string()).is_some() {
                    return Err(Error::checkpoint(format!(
                        "manifest line {n}: duplicate key {key:?}"
                    )));
                }
            }
        }

        let format = format_line
            .ok_or_else(|| Error::checkpoint("manifest is missing the format line"))?;
        if format != FORMAT {
            return Err(Error::checkpoint(format!(
                "unsupported checkpoint format {format:?} (this build reads {FORMAT:?})"
            )));
        }
        let recorded_id =
            id_line.ok_or_else(|| Error::checkpoint("manifest is missing the id line"))?;
        let count: usize = count_line
            .ok_or_else(|| Error::checkpoint("manifest is missing the tensors line"))?
            .parse()
            .map_err(|_| Error::checkpoint("manifest tensors line is not a count"))?;
        if let Some(extra) = fields.keys().find(|&&i| i >= count) {
            return Err(Error::checkpoint(format!(
                "manifest declares {count} tensors but describes tensor {extra}"
            )));
        }

        for i in 0..count {
            let slot = fields.remove(&i).ok_or_else(|| {
                Error::checkpoint(format!("manifest describes no tensor {i} of {count}"))
            })?;
            let get = |field: &str| {
                slot.get(field).cloned().ok_or_else(|| {
                    Error::checkpoint(format!("manifest tensor {i} is missing its {field}"))
                })
            };
            let name = get("name")?;
            let dtype = get("dtype")?;
            if dtype != "f64" {
                return Err(Error::checkpoint(format!(
                    "tensor {name:?} has dtype {dtype:?}; this build reads f64 only"
                )));
            }
            let shape: Vec<usize> = get("shape")?
                .split_whitespace()
                .map(|d| {
                    d.parse().map_err(|_| {
                        Error::checkpoint(format!("tensor {name:?} has a bad dimension {d:?}"))
                    })
                })
                .collect::<Result<_>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| {
                    Error::checkpoint(format!("tensor {name:?} shape {shape:?} overflows"))
                })?;
            let file = get("file")?;
            check_name("tensor file", &file)?;
            let path = dir.join(&file);
            let bytes = fs::read(&path)
                .map_err(|e| Error::checkpoint(format!("cannot read {}: {e}", path.display())))?;
            if bytes.len() != numel * 8 {
                return Err(Error::checkpoint(format!(
                    "tensor {name:?}: {file} holds {} bytes, shape {shape:?} needs {}",
                    bytes.len(),
                    numel * 8
                )));
            }
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            ck.add_tensor(name, Tensor::from_vec(&shape, data)?)?;
        }

        let actual_id = ck.id();
        if actual_id != recorded_id {
            return Err(Error::checkpoint(format!(
                "checkpoint content does not match its manifest id \
                 (recorded {recorded_id}, recomputed {actual_id}); \
                 the directory is corrupt or was edited"
            )));
        }
        Ok(ck)
    }
}

fn tensor_file(index: usize) -> String {
    format!("tensor-{index:04}.bin")
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn check_name(what: &str, name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(Error::checkpoint(format!(
            "invalid {what} {name:?}: use ASCII letters, digits, '.', '_', '-'"
        )))
    }
}

fn check_value(key: &str, value: &str) -> Result<()> {
    if value.chars().any(|c| c.is_control()) || value.trim() != value {
        return Err(Error::checkpoint(format!(
            "metadata value for {key:?} must be a single trimmed line, got {value:?}"
        )));
    }
    Ok(())
}

fn expect_kind(ck: &Checkpoint, want: &str) -> Result<()> {
    let kind = ck.require_meta(KIND_KEY)?;
    if kind != want {
        return Err(Error::checkpoint(format!(
            "expected a {want} checkpoint, found kind {kind:?}"
        )));
    }
    Ok(())
}

fn meta_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    let v = ck.require_meta(key)?;
    v.parse().map_err(|_| {
        Error::checkpoint(format!("manifest key {key:?}: {v:?} is not a non-negative integer"))
    })
}

fn meta_bool(ck: &Checkpoint, key: &str) -> Result<bool> {
    match ck.require_meta(key)? {
        "true" => Ok(true),
        "false" => Ok(false),
        v => Err(Error::checkpoint(format!(
            "manifest key {key:?}: {v:?} is not `true` or `false`"
        ))),
    }
}

fn check_finite(what: &str, t: &Tensor) -> Result<()> {
    if t.is_all_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "{what} contains non-finite values; refusing to checkpoint it"
        )))
    }
}

/// The model configuration as named printable fields, in declaration order.
/// Single source of truth for manifest serialization and for diffing.
fn config_fields(cfg: &ModelConfig) -> [(&'static str, String); 15] {
    [
        ("frames", cfg.frames.to_string()),
        ("stages", cfg.stages.to_string()),
        ("codebook_size", cfg.codebook_size.to_string()),
        ("width", cfg.width.to_string()),
        ("semantic_width", cfg.semantic_width.to_string()),
        ("frame_width", cfg.frame_width.to_string()),
        ("heads", cfg.heads.to_string()),
        ("discrete_blocks", cfg.discrete_blocks.to_string()),
        ("continuous_blocks", cfg.continuous_blocks.to_string()),
        ("semantic_blocks", cfg.semantic_blocks.to_string()),
        ("ffn_mult", cfg.ffn_mult.to_string()),
        ("discrete_enabled", cfg.discrete_enabled.to_string()),
        ("continuous_enabled", cfg.continuous_enabled.to_string()),
        ("semantic_enabled", cfg.semantic_enabled.to_string()),
        ("critic_enabled", cfg.critic_enabled.to_string()),
    ]
}

/// Lists the fields on which two model configurations differ, as
/// `name: left vs right` strings (empty when they match). Callers quote this
/// when refusing to run a checkpoint under an incompatible configuration.
pub fn model_config_diff(left: &ModelConfig, right: &ModelConfig) -> Vec<String> {
    config_fields(left)
        .iter()
        .zip(config_fields(right).iter())
        .filter(|(a, b)| a.1 != b.1)
        .map(|((name, a), (_, b))| format!("{name}: {a} vs {b}"))
        .collect()
}

fn config_from_meta(ck: &Checkpoint) -> Result<ModelConfig> {
    Ok(ModelConfig {
        frames: meta_usize(ck, "model.frames")?,
        stages: meta_usize(ck, "model.stages")?,
        codebook_size: meta_usize(ck, "model.codebook_size")?,
        width: meta_usize(ck, "model.width")?,
        semantic_width: meta_usize(ck, "model.semantic_width")?,
        frame_width: meta_usize(ck, "model.frame_width")?,
        heads: meta_usize(ck, "model.heads")?,
        discrete_blocks: meta_usize(ck, "model.discrete_blocks")?,
        continuous_blocks: meta_usize(ck, "model.continuous_blocks")?,
        semantic_blocks: meta_usize(ck, "model.semantic_blocks")?,
        ffn_mult: meta_usize(ck, "model.ffn_mult")?,
        discrete_enabled: meta_bool(ck, "model.discrete_enabled")?,
        continuous_enabled: meta_bool(ck, "model.continuous_enabled")?,
        semantic_enabled: meta_bool(ck, "model.semantic_enabled")?,
        critic_enabled: meta_bool(ck, "model.critic_enabled")?,
    })
}

/// Persists trained codebooks. `extra_meta` lets the caller record
/// provenance (seed, corpus, training options). Returns the content id.
pub fn save_codebooks(
    dir: &Path,
    cb: &Codebooks,
    extra_meta: &[(String, String)],
) -> Result<String> {
    let mut ck = Checkpoint::new();
    ck.add_meta(KIND_KEY, CODEBOOK_KIND)?;
    ck.add_meta("codebook.stages", cb.stage_count().to_string())?;
    ck.add_meta("codebook.size", cb.codebook_size().to_string())?;
    ck.add_meta("codebook.dim", cb.dim().to_string())?;
    for (k, v) in extra_meta {
        ck.add_meta(k.clone(), v.clone())?;
    }
    for (c, stage) in cb.stages().iter().enumerate() {
        check_finite(&format!("codebook stage {c}"), stage)?;
        ck.add_tensor(format!("codebook.stage{c}"), stage.clone())?;
    }
    ck.save(dir)?;
    Ok(ck.id())
}

/// Loads codebooks saved by [`save_codebooks`], returning them together with
/// the raw container (for metadata and the content id).
pub fn load_codebooks(dir: &Path) -> Result<(Codebooks, Checkpoint)> {
    let ck = Checkpoint::load(dir)?;
    expect_kind(&ck, CODEBOOK_KIND)?;
    let stages = meta_usize(&ck, "codebook.stages")?;
    if ck.tensor_count() != stages {
        return Err(Error::checkpoint(format!(
            "codebook checkpoint holds {} tensors but declares {stages} stages",
            ck.tensor_count()
        )));
    }
    let mut v = Vec::with_capacity(stages);
    for c in 0..stages {
        v.push(ck.require_tensor(&format!("codebook.stage{c}"))?.clone());
    }
    let cb = Codebooks::new(v)?;
    let (size, dim) = (meta_usize(&ck, "codebook.size")?, meta_usize(&ck, "codebook.dim")?);
    if cb.codebook_size() != size || cb.dim() != dim {
        return Err(Error::checkpoint(format!(
            "codebook checkpoint declares {size} codewords of width {dim} but its \
             tensors are {}x{}",
            cb.codebook_size(),
            cb.dim()
        )));
    }
    Ok((cb, ck))
}

/// Persists a model: the full configuration (including module-enable flags)
/// in the manifest, every trainable parameter, and the frozen semantic
/// projection. Refuses to checkpoint non-finite weights. Returns the
/// content id.
pub fn save_model(dir: &Path, model: &Model, extra_meta: &[(String, String)]) -> Result<String> {
    let mut ck = Checkpoint::new();
    ck.add_meta(KIND_KEY, MODEL_KIND)?;
    for (name, value) in config_fields(model.config()) {
        ck.add_meta(format!("model.{name}"), value)?;
    }
    for (k, v) in extra_meta {
        ck.add_meta(k.clone(), v.clone())?;
    }
    for (_, name, tensor) in model.params().iter() {
        check_finite(&format!("parameter {name:?}"), tensor)?;
        ck.add_tensor(format!("param.{name}"), tensor.clone())?;
    }
    ck.add_tensor(FROZEN_PROJ, model.semantic_encoder().proj().clone())?;
    ck.save(dir)?;
    Ok(ck.id())
}

/// Loads a model saved by [`save_model`]: rebuilds the architecture from the
/// recorded configuration, then restores every parameter by name (shapes
/// verified) and the frozen semantic projection. The checkpoint must hold
/// exactly the tensors the configuration implies — no more, no fewer.
pub fn load_model(dir: &Path) -> Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(dir)?;
    expect_kind(&ck, MODEL_KIND)?;
    let cfg = config_from_meta(&ck)?;
    let mut model = Model::new(cfg, 0)?;
    let expected = model.params().len() + 1;
    if ck.tensor_count() != expected {
        return Err(Error::checkpoint(format!(
            "model checkpoint holds {} tensors, its configuration implies {expected}",
            ck.tensor_count()
        )));
    }
    for id in 0..model.params().len() {
        let name = model.params().name(id).to_string();
        let stored = ck.require_tensor(&format!("param.{name}"))?;
        let have = model.params().tensor(id).shape();
        if stored.shape() != have {
            return Err(Error::checkpoint(format!(
                "parameter {name:?}: checkpoint shape {:?} does not match model shape {have:?}",
                stored.shape()
            )));
        }
        *model.params_mut().tensor_mut(id) = stored.clone();
    }
    let proj = ck.require_tensor(FROZEN_PROJ)?.clone();
    model.set_semantic_encoder(SemanticEncoder::from_proj(proj)?)?;
    Ok((model, ck))
}
