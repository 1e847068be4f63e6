//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json     format version, model config, taxonomy, heads, task specs
//! <dir>/params.bin        every parameter, keyed by hierarchical name
//! <dir>/optimizer.bin     Adam moments (only with a train state)
//! <dir>/train_state.json  step, schedule, RNG streams, data cursors, metrics log
//! ```
//!
//! `*.bin` files are tensor containers: the 8-byte magic `SKNTTNS1`, a
//! little-endian `u64` header length, a JSON header listing
//! `{"name", "shape"}` entries in order, then every tensor's data as
//! little-endian `f64`. Loading restores every value bit for bit.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, LinearDecay, Moments};
use crate::skills::{TaskSpec, TaskType, Taxonomy};
use crate::tensor::Tensor;
use crate::trainer::{MetricRecord, TaskCursor, TrainState};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SKNTTNS1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub task_id: String,
    pub task_type: TaskType,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub taxonomy: Taxonomy,
    pub seed: u64,
    pub heads: Vec<HeadEntry>,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_tensors<'a>(
    path: impl AsRef<Path>,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let header: Vec<TensorHeader> = tensors
        .iter()
        .map(|(n, t)| TensorHeader {
            name: n.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, t) in &tensors {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ckpt_err(format!(
            "{} is not a tensor container",
            path.display()
        )));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| ckpt_err("header too large"))?;
    let mut header = vec![0u8; len];
    input.read_exact(&mut header)?;
    let header: Vec<TensorHeader> = serde_json::from_slice(&header)?;
    let mut out = Vec::with_capacity(header.len());
    let mut buf = [0u8; 8];
    for h in header {
        let n: usize = h.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((h.name, Tensor::new(h.shape, data)?));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ckpt_err(format!("{} has trailing bytes", path.display())));
    }
    Ok(out)
}

/// Serializable part of a [`TrainState`]; Adam moments go to a container.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    step: u64,
    schedule: LinearDecay,
    beta1: f64,
    beta2: f64,
    eps: f64,
    moment_steps: BTreeMap<String, u64>,
    rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    cursors: Vec<TaskCursor>,
    history: Vec<MetricRecord>,
}

/// Heads in the order their parameters were created, so a loaded model lays
/// out its store exactly like the saved one.
fn heads_in_store_order(model: &Model) -> Vec<HeadEntry> {
    let specs: Vec<(&str, TaskType, usize)> = model.head_specs().collect();
    let mut out: Vec<HeadEntry> = Vec::with_capacity(specs.len());
    for (_, p) in model.store.iter() {
        let owner = specs
            .iter()
            .filter(|(id, ..)| p.name.starts_with(&format!("head.{id}.")))
            .max_by_key(|(id, ..)| id.len());
        if let Some(&(id, task_type, num_classes)) = owner {
            if !out.iter().any(|h| h.task_id == id) {
                out.push(HeadEntry {
                    task_id: id.to_string(),
                    task_type,
                    num_classes,
                });
            }
        }
    }
    out
}

/// Writes `model` (and optionally a train state) into `dir`, creating it.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &Model,
    tasks: &[TaskSpec],
    state: Option<&TrainState>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        taxonomy: model.taxonomy.clone(),
        seed: model.seed(),
        heads: heads_in_store_order(model),
        tasks: tasks.to_vec(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    write_tensors(
        dir.join("params.bin"),
        model.store.iter().map(|(_, p)| (p.name.as_str(), &p.value)),
    )?;
    let optimizer = dir.join("optimizer.bin");
    let state_path = dir.join("train_state.json");
    match state {
        Some(s) => {
            let moments: Vec<(String, Tensor)> = s
                .adam
                .moments
                .iter()
                .flat_map(|(name, m)| {
                    [
                        (format!("{name}/m"), Tensor::vector(m.m.clone())),
                        (format!("{name}/v"), Tensor::vector(m.v.clone())),
                    ]
                })
                .collect();
            write_tensors(&optimizer, moments.iter().map(|(n, t)| (n.as_str(), t)))?;
            let file = StateFile {
                step: s.step,
                schedule: s.schedule,
                beta1: s.adam.beta1,
                beta2: s.adam.beta2,
                eps: s.adam.eps,
                moment_steps: s
                    .adam
                    .moments
                    .iter()
                    .map(|(k, m)| (k.clone(), m.steps))
                    .collect(),
                rng: s.rng.clone(),
                noise_rng: s.noise_rng.clone(),
                cursors: s.cursors.clone(),
                history: s.history.clone(),
            };
            fs::write(&state_path, serde_json::to_vec(&file)?)?;
        }
        None => {
            for stale in [&optimizer, &state_path] {
                if stale.exists() {
                    fs::remove_file(stale)?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let bytes = fs::read(dir.as_ref().join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ckpt_err(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads a model, its manifest and the train state if one was saved.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, Manifest, Option<TrainState>)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(&manifest.config, &manifest.taxonomy, &[], manifest.seed)?;
    for h in &manifest.heads {
        model.add_head(&h.task_id, h.task_type, h.num_classes)?;
    }
    let values = read_tensors(dir.join("params.bin"))?;
    if values.len() != model.store.len() {
        return Err(ckpt_err(format!(
            "checkpoint holds {} parameters, the model has {}",
            values.len(),
            model.store.len()
        )));
    }
    for (name, value) in values {
        let id = model
            .store
            .id(&name)
            .map_err(|_| ckpt_err(format!("unexpected parameter `{name}`")))?;
        let slot = model.store.value_mut(id);
        if slot.shape() != value.shape() {
            return Err(ckpt_err(format!("shape mismatch for `{name}`")));
        }
        *slot = value;
    }

    let state_path = dir.join("train_state.json");
    if !state_path.exists() {
        return Ok((model, manifest, None));
    }
    let file: StateFile = serde_json::from_slice(&fs::read(&state_path)?)?;
    let mut tensors: BTreeMap<String, Tensor> = read_tensors(dir.join("optimizer.bin"))?
        .into_iter()
        .collect();
    let mut moments = BTreeMap::new();
    for (name, steps) in file.moment_steps {
        let mut take = |suffix: &str| {
            tensors
                .remove(&format!("{name}/{suffix}"))
                .map(Tensor::into_data)
                .ok_or_else(|| ckpt_err(format!("missing optimizer moment `{name}/{suffix}`")))
        };
        let m = take("m")?;
        let v = take("v")?;
        moments.insert(name, Moments { m, v, steps });
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(ckpt_err(format!("unexpected optimizer entry `{extra}`")));
    }
    let state = TrainState {
        step: file.step,
        schedule: file.schedule,
        adam: Adam {
            beta1: file.beta1,
            beta2: file.beta2,
            eps: file.eps,
            moments,
        },
        rng: file.rng,
        noise_rng: file.noise_rng,
        cursors: file.cursors,
        history: file.history,
    };
    Ok((model, manifest, Some(state)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_container_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let a = Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::scalar(std::f64::consts::PI);
        write_tensors(&path, [("a", &a), ("b", &b)]).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back[0].0, "a");
        assert!(back[0].1.bitwise_eq(&a) && back[1].1.bitwise_eq(&b));
        fs::write(&path, b"garbage!").unwrap();
        assert!(read_tensors(&path).is_err());
    }
}
