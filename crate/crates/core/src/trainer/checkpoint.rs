//! Checkpoint directory: `manifest.json`, `weights.bin`, `state.bin`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LossRecord, TrainConfig, TrainState, Trainer};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{Generator, Stage};
use crate::nn::ParamStore;
use crate::numerics::{DType, Real, RmsPropConfig, RmsPropState, Tensor};

pub const CHECKPOINT_FORMAT: &str = "onestep-sr-checkpoint/1";
const STATE_MAGIC: &[u8; 8] = b"OSRSTATE";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub state: TrainState<T>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: DType,
    stage: Stage,
    config_digest: String,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
    weights_sha256: String,
    state_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateMeta {
    stage: Stage,
    iteration: u64,
    seed: u64,
    history: Vec<LossRecord>,
    frozen_digest: Option<String>,
    rmsprop: RmsPropConfig,
    g_opt: Vec<(String, Vec<usize>)>,
    d_opt: Vec<(String, Vec<usize>)>,
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn push_tensor<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    for v in t.data() {
        v.write_le(out);
    }
}

fn read_tensor<T: Real>(bytes: &[u8], shape: &[usize], what: &str) -> Result<Tensor<T>> {
    let size = T::DTYPE.size_of();
    let n: usize = shape.iter().product();
    if bytes.len() != n * size {
        return Err(Error::Checkpoint(format!(
            "{what}: expected {} bytes, found {}",
            n * size,
            bytes.len()
        )));
    }
    Tensor::new(shape, bytes.chunks_exact(size).map(T::read_le).collect())
}

impl<T: Real> Trainer<T> {
    /// Snapshot for saving. Stage-1 snapshots carry the stage-2-ready generator.
    pub fn checkpoint(&self) -> Result<Checkpoint<T>> {
        let gen = match self.state.stage {
            Stage::Pretrain => self.stage1_generator()?,
            Stage::Faa => self.gen.clone(),
        };
        Ok(Checkpoint {
            config: self.config.clone(),
            gen,
            disc: self.disc.clone(),
            state: self.state.clone(),
        })
    }

    /// Continues a run from a checkpoint of the same stage.
    pub fn resume(ck: Checkpoint<T>) -> Result<Self> {
        let schedule = crate::scheduler::NoiseSchedule::fitted(ck.config.prior_timestep)?;
        Ok(Self {
            config: ck.config,
            schedule,
            gen: ck.gen,
            disc: ck.disc,
            state: ck.state,
        })
    }
}

pub fn save_checkpoint<T: Real>(ck: &Checkpoint<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut weights = Vec::new();
    let mut tensors = Vec::new();
    let groups: [(&str, &ParamStore<T>); 2] = [("gen", &ck.gen.params), ("disc", &ck.disc.params)];
    for (group, store) in groups {
        for (name, t) in store.iter() {
            let offset = weights.len() as u64;
            push_tensor(t, &mut weights);
            tensors.push(TensorEntry {
                name: format!("{group}/{name}"),
                shape: t.shape().to_vec(),
                offset,
                nbytes: weights.len() as u64 - offset,
            });
        }
    }

    let st = &ck.state;
    let rmsprop = st
        .g_opt
        .values()
        .chain(st.d_opt.values())
        .next()
        .map(|s| s.config)
        .unwrap_or_default();
    let meta = StateMeta {
        stage: st.stage,
        iteration: st.iteration,
        seed: st.seed,
        history: st.history.clone(),
        frozen_digest: st.frozen_digest.clone(),
        rmsprop,
        g_opt: st.g_opt.iter().map(|(k, s)| (k.clone(), s.square_avg.shape().to_vec())).collect(),
        d_opt: st.d_opt.iter().map(|(k, s)| (k.clone(), s.square_avg.shape().to_vec())).collect(),
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut state = STATE_MAGIC.to_vec();
    state.extend((meta_json.len() as u64).to_le_bytes());
    state.extend(&meta_json);
    for s in st.g_opt.values().chain(st.d_opt.values()) {
        push_tensor(&s.square_avg, &mut state);
    }

    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        dtype: T::DTYPE,
        stage: st.stage,
        config_digest: ck.config.architecture_digest(),
        config: ck.config.clone(),
        tensors,
        weights_sha256: hex(&weights),
        state_sha256: hex(&state),
    };
    fs::write(dir.join("weights.bin"), &weights)?;
    fs::write(dir.join("state.bin"), &state)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Element type a checkpoint was stored with, read from its manifest.
pub fn checkpoint_dtype(dir: &Path) -> Result<DType> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    Ok(manifest.dtype)
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<Checkpoint<T>> {
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", dir.display()));
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(bad(format!(
            "format {:?} is not supported (expected {CHECKPOINT_FORMAT:?})",
            manifest.format
        )));
    }
    if manifest.dtype != T::DTYPE {
        return Err(bad(format!(
            "stored as {:?} but {:?} was requested",
            manifest.dtype,
            T::DTYPE
        )));
    }
    if manifest.config.architecture_digest() != manifest.config_digest {
        return Err(bad("config digest does not match the stored config".into()));
    }
    let weights = fs::read(dir.join("weights.bin"))?;
    if hex(&weights) != manifest.weights_sha256 {
        return Err(bad("weights.bin digest mismatch (file corrupted or replaced)".into()));
    }
    let state = fs::read(dir.join("state.bin"))?;
    if hex(&state) != manifest.state_sha256 {
        return Err(bad("state.bin digest mismatch (file corrupted or replaced)".into()));
    }

    let config = manifest.config;
    config.validate()?;
    let mut gen = Generator::<T> {
        config: config.generator(),
        params: ParamStore::new(),
    };
    let mut disc = Discriminator::<T> {
        config: config.discriminator(),
        params: ParamStore::new(),
    };
    for e in &manifest.tensors {
        let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
        if end > weights.len() {
            return Err(bad(format!("tensor {} extends past weights.bin", e.name)));
        }
        let t = read_tensor(&weights[start..end], &e.shape, &e.name)?;
        match e.name.split_once('/') {
            Some(("gen", n)) => gen.params.insert(n, t),
            Some(("disc", n)) => disc.params.insert(n, t),
            _ => return Err(bad(format!("unknown tensor group in {}", e.name))),
        }
    }

    if state.len() < 16 || &state[..8] != STATE_MAGIC {
        return Err(bad("state.bin has no state header".into()));
    }
    let meta_len = u64::from_le_bytes(state[8..16].try_into().expect("8 bytes")) as usize;
    let meta_end = 16 + meta_len;
    if meta_end > state.len() {
        return Err(bad("state.bin header truncated".into()));
    }
    let meta: StateMeta = serde_json::from_slice(&state[16..meta_end])?;
    let mut pos = meta_end;
    let size = T::DTYPE.size_of();
    let mut take = |list: &[(String, Vec<usize>)]| -> Result<IndexMap<String, RmsPropState<T>>> {
        list.iter()
            .map(|(name, shape)| {
                let n = shape.iter().product::<usize>() * size;
                if pos + n > state.len() {
                    return Err(bad(format!("optimizer state for {name} truncated")));
                }
                let t = read_tensor(&state[pos..pos + n], shape, name)?;
                pos += n;
                Ok((
                    name.clone(),
                    RmsPropState {
                        config: meta.rmsprop,
                        square_avg: t,
                    },
                ))
            })
            .collect()
    };
    let g_opt = take(&meta.g_opt)?;
    let d_opt = take(&meta.d_opt)?;
    if pos != state.len() {
        return Err(bad("trailing bytes in state.bin".into()));
    }
    Ok(Checkpoint {
        config,
        gen,
        disc,
        state: TrainState {
            stage: meta.stage,
            iteration: meta.iteration,
            g_opt,
            d_opt,
            seed: meta.seed,
            history: meta.history,
            frozen_digest: meta.frozen_digest,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact_and_corruption_is_caught() {
        let t = Trainer::<f64>::new_pretrain(tiny_config(Stage::Pretrain)).unwrap();
        let ck = t.checkpoint().unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ck, dir.path()).unwrap();
        assert_eq!(load_checkpoint::<f64>(dir.path()).unwrap(), ck);
        assert!(load_checkpoint::<f32>(dir.path()).is_err());

        let p = dir.path().join("weights.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[10] ^= 1;
        fs::write(&p, bytes).unwrap();
        let err = load_checkpoint::<f64>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("digest"), "{err}");
    }
}
