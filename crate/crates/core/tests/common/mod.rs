#![allow(dead_code)]

use std::path::Path;

use pmm::datapipe::{generate_synthetic_dataset, SyntheticSpec};
use pmm::Config;

/// Synthetic preset shrunk to a few seconds of work: 96x32 inputs
/// (a 6x2 feature map, two 3x2 blocks), 6 identities, batches of 8.
pub fn tiny_config(dir: &Path) -> Config {
    let mut c = Config::preset("synthetic").unwrap();
    c.output_dir = dir.join("run");
    c.dataset.root = dir.join("data");
    c.dataset.resolution = [96, 32];
    c.dataset.pad = 2;
    c.synthetic.num_ids = 6;
    c.synthetic.imgs_per_id = 4;
    c.sampler.p = 4;
    c.sampler.q = 2;
    c.sampler.batch_size = 8;
    c.sampler.iters_per_epoch = Some(2);
    c.model.embed_dim = 16;
    c.model.precision = pmm::config::Precision::F64;
    c.mix.k = 1;
    c.optim.epochs = 2;
    c.optim.warmup_epochs = 1;
    c.eval.every = 100;
    c.validate().unwrap();
    c
}

pub fn write_dataset(config: &Config) {
    let [h, w] = config.dataset.resolution;
    let spec = SyntheticSpec {
        num_ids: config.synthetic.num_ids,
        imgs_per_id: config.synthetic.imgs_per_id,
        num_cams: config.synthetic.num_cams,
        resolution: (h, w),
    };
    generate_synthetic_dataset(&config.dataset.root, spec, config.seed).unwrap();
}

pub fn bits(t: &candle_core::Tensor) -> Vec<u64> {
    t.to_dtype(candle_core::DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

/// Every parameter and buffer, by name, as bit patterns.
pub fn snapshot(model: &pmm::model::PmmModel) -> Vec<(String, Vec<u64>)> {
    model
        .store
        .all()
        .map(|(name, var)| (name.clone(), bits(var.as_tensor())))
        .collect()
}
