#![allow(dead_code)]

use std::path::Path;

use gangealing::checkpoint;
use gangealing::config::TrainConfig;
use gangealing::datapipe::save_png;
use gangealing::generator::Generator;
use gangealing::keypoints::{Keypoint, KeypointSet};
use gangealing::trainer::Model;

pub const RES: usize = 32;

pub fn small_model() -> Model {
    let cfg = TrainConfig::from_kv_text("resolution = 32\npca_pool = 300\nwidths = 8, 12\nhidden = 16\ntotal_steps = 3\nbatch = 2\nanneal_steps = 2\n").unwrap();
    Model::init(cfg).unwrap()
}

/// Fresh checkpoint in `dir/ckpt` and `n` generator renders in `dir/images`.
pub fn fixture(dir: &Path, n: usize) -> Model {
    let model = small_model();
    checkpoint::save(&model, &dir.join("ckpt")).unwrap();
    let images = dir.join("images");
    std::fs::create_dir_all(&images).unwrap();
    for i in 0..n {
        let g = &model.generator;
        save_png(&g.synthesize(&g.sample_latent(i as u64)).unwrap(), &images.join(format!("toy{i:02}.png"))).unwrap();
    }
    model
}

pub fn points() -> KeypointSet {
    KeypointSet::new(vec![
        Keypoint { x: 3.0, y: 4.0, visible: true },
        Keypoint { x: 16.0, y: 16.0, visible: true },
        Keypoint { x: 28.5, y: 7.25, visible: true },
        Keypoint { x: 10.0, y: 30.0, visible: false },
    ])
}

/// Largest pixel distance between corresponding visible points.
pub fn max_gap(a: &[Keypoint], b: &[Keypoint]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).filter(|(p, _)| p.visible).map(|(p, q)| (p.x - q.x).hypot(p.y - q.y)).fold(0.0, f64::max)
}
