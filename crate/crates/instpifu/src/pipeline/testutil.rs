//! Shared fixtures for pipeline tests: a deliberately small run
//! configuration and matching toy corpora so whole train/eval cycles finish
//! in seconds.

use std::path::Path;

use crate::pipeline::RunConfig;
use crate::scenegen::dataset::{generate_corpus, Corpus};
use crate::scenegen::scene::SceneSpec;

/// A run configuration shrunk until a full epoch is a few tens of
/// milliseconds. The relative shapes (gate narrower than hidden, background
/// cheaper than objects) mirror the real presets.
pub(crate) fn tiny_config(dataset: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::desk(dataset, out);
    cfg.encoder.l_c = 8;
    cfg.encoder.d_g = 8;
    cfg.object.roi = 4;
    cfg.object.hidden = 16;
    cfg.object.gate_hidden = 12;
    cfg.background.hidden = 16;
    cfg.optim.epochs = 3;
    cfg.optim.batch_size = 2;
    cfg.points_per_instance = 16;
    cfg.background_points = 64;
    cfg.mc_res = 16;
    cfg.background_mc_res = 16;
    cfg.metrics.eval_points = 256;
    cfg.metrics.icp_iters = 8;
    cfg
}

/// Small occlusion corpus with a 50/50 train/test split.
pub(crate) fn object_corpus(root: &Path, scenes: usize) -> Corpus {
    generate_corpus(root, &SceneSpec::default(), 11, scenes, 0.5, "unit").unwrap()
}

/// Small empty-room corpus; every scene has a curved alcove candidate.
pub(crate) fn room_corpus(root: &Path, scenes: usize) -> Corpus {
    generate_corpus(root, &SceneSpec::background_rooms(), 5, scenes, 0.34, "rooms").unwrap()
}

/// Content hash of a file on disk, for byte-identity assertions.
pub(crate) fn file_sha(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).unwrap();
    format!("{:x}", Sha256::digest(&bytes))
}
