//! Safetensors checkpoints holding model weights, optimizer moments, the
//! run config and the training cursor (epoch, iteration, rng position).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::PmmModel;
use crate::optim::Adam;

pub const FORMAT_VERSION: &str = "1";

const MODEL_PREFIX: &str = "model.";
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Scalar training state stored in the checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CursorState {
    /// Epochs completed.
    pub epoch: usize,
    pub iteration: usize,
    /// `-inf` until the first evaluation; JSON stores that as null.
    #[serde(deserialize_with = "null_as_neg_infinity")]
    pub best_metric: f64,
    pub adam_step: u64,
    pub rng: RngState,
    pub num_classes: usize,
}

fn null_as_neg_infinity<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Config,
    pub cursor: CursorState,
    pub tensors: HashMap<String, Tensor>,
}

pub fn save(path: &Path, model: &PmmModel, optim: &Adam, config: &Config, cursor: &CursorState) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, var) in model.store.all() {
        tensors.insert(format!("{MODEL_PREFIX}{name}"), var.as_tensor().detach());
    }
    for (name, t) in &optim.m {
        tensors.insert(format!("{M_PREFIX}{name}"), t.clone());
    }
    for (name, t) in &optim.v {
        tensors.insert(format!("{V_PREFIX}{name}"), t.clone());
    }
    let metadata = HashMap::from([
        ("format_version".to_string(), FORMAT_VERSION.to_string()),
        ("config".to_string(), config.to_toml_string()),
        ("cursor".to_string(), serde_json::to_string(cursor)?),
    ]);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    // write then rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(tensors.iter(), Some(metadata), &tmp)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("missing header metadata".into()))?;
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("missing header field `{k}`")))
    };
    let version = field("format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let config = Config::from_toml_str(field("config")?)?;
    let cursor: CursorState = serde_json::from_str(field("cursor")?)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok(Checkpoint { config, cursor, tensors })
}

impl Checkpoint {
    /// Copies weights and buffers into `model`. Every model tensor must be
    /// present with the same shape.
    pub fn restore_model(&self, model: &PmmModel) -> Result<()> {
        for (name, var) in model.store.all() {
            let t = self
                .tensors
                .get(&format!("{MODEL_PREFIX}{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}` is {:?} in the checkpoint but {:?} in the model",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        let extra = self
            .tensors
            .keys()
            .filter_map(|k| k.strip_prefix(MODEL_PREFIX))
            .find(|k| model.store.get(k).is_none());
        if let Some(k) = extra {
            return Err(Error::ShapeMismatch(format!("checkpoint tensor `{k}` has no place in the model")));
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, optim: &mut Adam) {
        optim.step = self.cursor.adam_step;
        optim.m.clear();
        optim.v.clear();
        for (k, t) in &self.tensors {
            if let Some(name) = k.strip_prefix(M_PREFIX) {
                optim.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(V_PREFIX) {
                optim.v.insert(name.to_string(), t.clone());
            }
        }
    }

    /// Builds the model described by the stored config and loads it.
    pub fn model(&self) -> Result<PmmModel> {
        let model = PmmModel::new(&self.config, self.cursor.num_classes)?;
        self.restore_model(&model)?;
        Ok(model)
    }
}
