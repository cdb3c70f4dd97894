//! On-disk training state: `manifest.json` plus `tensors.bin`, a flat array
//! of little-endian f32 values holding the parameters followed by the two
//! Adam moment buffers.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::ImportanceSampler;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::{Model, ModelConfig};
use crate::scalar::Real;
use crate::training::{AdamW, TrainConfig, TrainState};

pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset in values (not bytes) into each of the three sections.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub adam_t: u64,
    /// Values per section; the file holds three sections.
    pub section_len: usize,
    pub tensors: Vec<TensorEntry>,
    pub sampler: ImportanceSampler,
}

fn flat<T: Real>(mats: &[Mat<T>]) -> impl Iterator<Item = f32> + '_ {
    mats.iter().flat_map(|m| m.data.iter().map(|x| x.to_f64_lossy() as f32))
}

pub fn save<T: Real>(state: &TrainState<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let store = &state.model.store;
    let mut offset = 0;
    let tensors = store
        .names()
        .iter()
        .zip(store.mats())
        .map(|(name, m)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: [m.rows, m.cols],
                offset,
            };
            offset += m.data.len();
            e
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT,
        model: state.model.config,
        train: state.config,
        step: state.step,
        adam_t: state.optimizer.t,
        section_len: offset,
        tensors,
        sampler: state.sampler.clone(),
    };
    let mut w = BufWriter::new(fs::File::create(dir.join(TENSORS))?);
    for x in flat(store.mats())
        .chain(flat(&state.optimizer.m))
        .chain(flat(&state.optimizer.v))
    {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::config(e.to_string()))?;
    fs::write(dir.join(MANIFEST), json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::config(format!("manifest: {e}")))?;
    if m.format != FORMAT {
        return Err(Error::config(format!("unsupported checkpoint format {}", m.format)));
    }
    Ok(m)
}

pub fn load<T: Real>(dir: &Path) -> Result<TrainState<T>> {
    let manifest = read_manifest(dir)?;
    let bytes = fs::read(dir.join(TENSORS))?;
    let n = manifest.section_len;
    if bytes.len() != 3 * n * 4 {
        return Err(Error::config(format!(
            "tensor file holds {} bytes, manifest expects {}",
            bytes.len(),
            3 * n * 4
        )));
    }
    let values: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();

    let mut model = Model::<T>::new(manifest.model, 0)?;
    let store = &model.store;
    let layout_ok = store.len() == manifest.tensors.len()
        && store.names().iter().zip(store.mats()).zip(&manifest.tensors).all(|((name, m), e)| {
            *name == e.name && [m.rows, m.cols] == e.shape
        });
    if !layout_ok || store.n_scalars() != n {
        return Err(Error::config("checkpoint tensors do not match the model layout"));
    }
    model.store.load_flat(&values[..n])?;
    let mut optimizer = AdamW::new(&model.store);
    let mut scratch = model.store.clone();
    scratch.load_flat(&values[n..2 * n])?;
    optimizer.m = scratch.mats().to_vec();
    scratch.load_flat(&values[2 * n..])?;
    optimizer.v = scratch.mats().to_vec();
    optimizer.t = manifest.adam_t;
    if manifest.sampler.steps() != model.schedule.steps {
        return Err(Error::config("sampler size differs from the diffusion step count"));
    }
    Ok(TrainState {
        model,
        optimizer,
        sampler: manifest.sampler,
        step: manifest.step,
        config: manifest.train,
    })
}

/// Loads only the model weights.
pub fn load_model<T: Real>(dir: &Path) -> Result<Model<T>> {
    load(dir).map(|s| s.model)
}
