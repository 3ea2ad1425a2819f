//! Gradient training of the instance and background occupancy models over
//! a scene corpus: per-scene tapes, gradient accumulation across the
//! batch, Adam with a stepped learning-rate schedule, per-epoch loss
//! logging, and checkpointing. Runs are bit-deterministic for a fixed
//! config.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::background::{
    background_forward_tape, loss_background_node, register_background_nets, Frustum,
};
use crate::checkpoint::save_checkpoint;
use crate::geometry::V3;
use crate::instpifu::{
    encode_image_tape, loss_object_node, object_forward_on_map, register_object_nets, Ablation,
};
use crate::nn::{scale_grads, sum_grads, Adam, ParamStore, Tape};
use crate::pipeline::{model_stamp, RunConfig, TrainTarget};
use crate::sampling::{mix_seed, sample_training_points, Frame};
use crate::scenegen::dataset::{adapter_ingest, Corpus};
use crate::scenegen::scene::{mask_to_roi_grid, SceneRecord};
use crate::{Error, NetReal, Result};

/// Mean losses over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss per scene.
    pub loss: f64,
    /// Occupancy component.
    pub occupancy: f64,
    /// Mask component (zero when the mask head is off).
    pub mask: f64,
    pub steps: usize,
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub target: TrainTarget,
    pub ablation: Ablation,
    pub epochs: Vec<EpochStats>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

/// Opens the configured corpus, through its adapter when one is set.
pub(crate) fn open_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.adapter {
        Some(a) => adapter_ingest(&cfg.dataset, a),
        None => Corpus::open(&cfg.dataset),
    }
}

/// Trains the configured target on the train split. The resolved config is
/// persisted next to the outputs before the first step; checkpoints land
/// in the output directory with the model stamp embedded.
pub fn train(config: &RunConfig) -> Result<TrainReport> {
    let cfg = config.resolved()?;
    let corpus = open_corpus(&cfg)?;
    let split = corpus.split(&cfg.train_split)?.to_vec();
    if split.is_empty() {
        return Err(Error::Config(format!(
            "train split {:?} is empty",
            cfg.train_split
        )));
    }
    cfg.persist(&cfg.out)?;

    let mut store = ParamStore::<NetReal>::new();
    match cfg.target {
        TrainTarget::Objects => register_object_nets(&mut store, &cfg.encoder, &cfg.object)?,
        TrainTarget::Background => {
            register_background_nets(&mut store, &cfg.encoder, &cfg.background)?
        }
    }
    let stamp = model_stamp(&cfg);
    let mut opt = Adam::new(cfg.optim.lr, store.len());
    let mut epochs: Vec<EpochStats> = Vec::new();
    let mut checkpoints: Vec<PathBuf> = Vec::new();

    for epoch in 1..=cfg.optim.epochs {
        opt.lr = cfg.optim.lr_at(epoch);
        let mut order = split.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.optim.seed,
            epoch as u64,
        )));

        let mut steps = 0usize;
        let (mut sum_loss, mut sum_occ, mut sum_mask) = (0.0, 0.0, 0.0);
        let mut scenes_used = 0usize;
        for batch in order.chunks(cfg.optim.batch_size) {
            steps += 1;
            let mut acc: Vec<Option<ArrayD<NetReal>>> = vec![None; store.len()];
            let mut used = 0usize;
            for &scene_idx in batch {
                let record = corpus.load_scene(scene_idx)?;
                if cfg.target == TrainTarget::Objects && record.instances.is_empty() {
                    continue;
                }
                let out = match cfg.target {
                    TrainTarget::Objects => {
                        scene_gradients(&cfg, &store, &corpus, &record, epoch, scene_idx)?
                    }
                    TrainTarget::Background => {
                        room_gradients(&cfg, &store, &record, epoch, scene_idx)?
                    }
                };
                if !out.loss.is_finite() {
                    persist_failure(&cfg.out, epoch, steps, batch, &record.id)?;
                    return Err(Error::NonFiniteLoss { epoch, step: steps });
                }
                sum_loss += out.loss;
                sum_occ += out.occupancy;
                sum_mask += out.mask;
                acc = sum_grads(acc, [out.grads]);
                used += 1;
            }
            if used == 0 {
                continue;
            }
            scale_grads(&mut acc, 1.0 / used as f64);
            opt.step(&mut store, &acc);
            scenes_used += used;
        }

        let denom = scenes_used.max(1) as f64;
        epochs.push(EpochStats {
            epoch,
            lr: opt.lr,
            loss: sum_loss / denom,
            occupancy: sum_occ / denom,
            mask: sum_mask / denom,
            steps,
        });
        write_json(&cfg.out.join("loss-log.json"), &epochs)?;

        if epoch == cfg.optim.epochs || cfg.optim.checkpoint_epochs.contains(&epoch) {
            let path = cfg.out.join(format!("ckpt-{epoch:03}.ipfc"));
            save_checkpoint(&path, &store, &stamp)?;
            checkpoints.push(path);
        }
    }

    let final_checkpoint = cfg.out.join("model.ipfc");
    save_checkpoint(&final_checkpoint, &store, &stamp)?;
    let report = TrainReport {
        target: cfg.target,
        ablation: cfg.ablation,
        epochs,
        checkpoints,
        final_checkpoint,
    };
    write_json(&cfg.out.join("train-report.json"), &report)?;
    Ok(report)
}

struct SceneGrads {
    loss: f64,
    occupancy: f64,
    mask: f64,
    grads: Vec<Option<ArrayD<NetReal>>>,
}

/// One taped forward/backward over every instance of a scene. The image is
/// encoded once; instance losses are averaged into the scene loss.
fn scene_gradients(
    cfg: &RunConfig,
    store: &ParamStore<NetReal>,
    corpus: &Corpus,
    record: &SceneRecord,
    epoch: usize,
    scene_idx: usize,
) -> Result<SceneGrads> {
    let camera = record.camera.cast::<NetReal>();
    let mut t = Tape::new(store);
    let map = encode_image_tape(&mut t, store, &cfg.encoder, &record.image)?;

    let mut totals = Vec::with_capacity(record.instances.len());
    let mut occ_nodes = Vec::with_capacity(record.instances.len());
    let mut mask_nodes = Vec::new();
    for (i, inst) in record.instances.iter().enumerate() {
        let pose = inst.pose.cast::<NetReal>();
        let bbox = inst.bbox.cast::<NetReal>();
        let seed = query_seed(cfg.optim.seed, epoch, scene_idx, i);
        let (points, labels) = instance_queries(cfg, inst, &pose, seed, i as u32)?;
        let mask_gt: Option<Array2<NetReal>> = if cfg.object.ablation.uses_mask() {
            let amodal = inst.amodal.as_ref().ok_or_else(|| Error::MissingAmodal {
                adapter: corpus.provenance().to_string(),
                scene: record.id.clone(),
                instance: i,
            })?;
            Some(mask_to_roi_grid(amodal, &inst.bbox, cfg.object.roi))
        } else {
            None
        };
        let out = object_forward_on_map(
            &mut t,
            store,
            &cfg.encoder,
            &cfg.object,
            &record.image,
            map,
            &bbox,
            &pose,
            &camera,
            &points,
        )?;
        let (total, occ, mask) = loss_object_node(
            &mut t,
            out.occupancy,
            &labels,
            out.mask,
            mask_gt.as_ref(),
            cfg.object.lambda_mask as NetReal,
        );
        totals.push(total);
        occ_nodes.push(occ);
        mask_nodes.extend(mask);
    }

    let mut loss = totals[0];
    for &n in &totals[1..] {
        loss = t.add(loss, n);
    }
    let loss = t.scale(loss, 1.0 / totals.len() as f32);
    let grads = t.backward(loss);
    let mean = |nodes: &[crate::nn::NodeId]| {
        if nodes.is_empty() {
            0.0
        } else {
            nodes.iter().map(|&n| t.scalar(n) as f64).sum::<f64>() / nodes.len() as f64
        }
    };
    Ok(SceneGrads {
        loss: t.scalar(loss) as f64,
        occupancy: mean(&occ_nodes),
        mask: mean(&mask_nodes),
        grads: grads.param_grads,
    })
}

/// Canonical-frame occupancy queries for one instance, filtered to points
/// the camera can see (matching the forward's own visibility rule).
fn instance_queries(
    cfg: &RunConfig,
    inst: &crate::scenegen::scene::SceneInstance,
    pose: &crate::geometry::InstancePose<NetReal>,
    seed: u64,
    instance_id: u32,
) -> Result<(Vec<V3<NetReal>>, Vec<NetReal>)> {
    let (lo, hi) = inst.mesh.bounds()?;
    let pad = 3.0 * cfg.sample_sigma + 0.1;
    let bounds = (
        [lo[0] - pad, lo[1] - pad, lo[2] - pad],
        [hi[0] + pad, hi[1] + pad, hi[2] + pad],
    );
    let sb = sample_training_points(
        &inst.mesh,
        cfg.points_per_instance,
        cfg.sample_sigma,
        bounds,
        seed,
        Frame::Canonical,
        instance_id,
    )?;
    let mut points = Vec::with_capacity(sb.points.len());
    let mut labels = Vec::with_capacity(sb.points.len());
    for (p, &l) in sb.points.iter().zip(&sb.labels) {
        let q: V3<NetReal> = [p[0], p[1], p[2]];
        if pose.canonical_to_camera(q)[2] <= 0.0 {
            continue;
        }
        points.push(q);
        labels.push(l as NetReal);
    }
    if points.is_empty() {
        return Err(Error::AllPointsBehindCamera);
    }
    Ok((points, labels))
}

/// One taped forward/backward of the background field over a room scene.
fn room_gradients(
    cfg: &RunConfig,
    store: &ParamStore<NetReal>,
    record: &SceneRecord,
    epoch: usize,
    scene_idx: usize,
) -> Result<SceneGrads> {
    let camera = record.camera.cast::<NetReal>();
    let frustum = Frustum {
        camera: camera.clone(),
        near: cfg.background.near,
        far: cfg.background.far,
    };
    let (lo, hi) = record.room.mesh.bounds()?;
    let pad = 3.0 * cfg.background_sigma + 0.1;
    let bounds = (
        [lo[0] - pad, lo[1] - pad, lo[2] - pad],
        [hi[0] + pad, hi[1] + pad, hi[2] + pad],
    );
    let seed = query_seed(cfg.optim.seed, epoch, scene_idx, 0);
    let sb = sample_training_points(
        &record.room.mesh,
        cfg.background_points,
        cfg.background_sigma,
        bounds,
        seed,
        Frame::Camera,
        u32::MAX,
    )?;
    let mut points: Vec<V3<NetReal>> = Vec::with_capacity(sb.points.len());
    let mut labels: Vec<NetReal> = Vec::with_capacity(sb.points.len());
    for (p, &l) in sb.points.iter().zip(&sb.labels) {
        let q: V3<NetReal> = [p[0], p[1], p[2]];
        if !frustum.contains(q) {
            continue;
        }
        points.push(q);
        labels.push(l as NetReal);
    }
    if points.len() < 8 {
        return Err(Error::Config(format!(
            "scene {} leaves only {} in-frustum background queries",
            record.id,
            points.len()
        )));
    }

    let mut t = Tape::new(store);
    let pred = background_forward_tape(
        &mut t,
        store,
        &cfg.encoder,
        &cfg.background,
        &record.image,
        &camera,
        &points,
    )?;
    let loss = loss_background_node(&mut t, pred, &labels);
    let grads = t.backward(loss);
    Ok(SceneGrads {
        loss: t.scalar(loss) as f64,
        occupancy: t.scalar(loss) as f64,
        mask: 0.0,
        grads: grads.param_grads,
    })
}

fn query_seed(base: u64, epoch: usize, scene_idx: usize, instance: usize) -> u64 {
    mix_seed(
        mix_seed(mix_seed(base, 0x7261_696E), epoch as u64),
        ((scene_idx as u64) << 8) ^ instance as u64,
    )
}

fn persist_failure(
    out: &Path,
    epoch: usize,
    step: usize,
    batch: &[usize],
    offending_scene: &str,
) -> Result<()> {
    let payload = serde_json::json!({
        "epoch": epoch,
        "step": step,
        "scene_indices": batch,
        "offending_scene": offending_scene,
    });
    write_json(&out.join("failure.json"), &payload)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::testutil::{file_sha, object_corpus, room_corpus, tiny_config};

    #[test]
    fn a_few_epochs_of_object_training_descend() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        object_corpus(&data, 4);
        let cfg = tiny_config(&data, &dir.path().join("run"));
        let report = train(&cfg).unwrap();
        assert_eq!(report.epochs.len(), 3);
        let first = report.epochs.first().unwrap().loss;
        let last = report.epochs.last().unwrap().loss;
        assert!(
            last < first,
            "loss should descend, went {first} -> {last}"
        );
        assert!(report.final_checkpoint.exists());
        assert!(cfg.out.join("config.json").exists());
        assert!(cfg.out.join("loss-log.json").exists());
        assert!(cfg.out.join("train-report.json").exists());
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        object_corpus(&data, 4);
        let mut a = tiny_config(&data, &dir.path().join("a"));
        a.optim.epochs = 2;
        let mut b = a.clone();
        b.out = dir.path().join("b");
        let ra = train(&a).unwrap();
        let rb = train(&b).unwrap();
        for (ea, eb) in ra.epochs.iter().zip(&rb.epochs) {
            assert!((ea.loss - eb.loss).abs() <= 1e-5 * ea.loss.abs().max(1.0));
        }
        assert_eq!(
            file_sha(&ra.final_checkpoint),
            file_sha(&rb.final_checkpoint)
        );
    }

    #[test]
    fn full_training_without_amodal_masks_fails_fast() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        object_corpus(&data, 2);
        let mut cfg = tiny_config(&data, &dir.path().join("run"));
        cfg.adapter = Some("synthetic-noamodal".into());
        cfg.optim.epochs = 1;
        let err = train(&cfg).unwrap_err();
        match err {
            Error::MissingAmodal {
                adapter,
                scene,
                instance,
            } => {
                assert_eq!(adapter, "synthetic-noamodal");
                assert!(scene.starts_with("scene-"), "{scene}");
                assert!(instance < 6);
            }
            other => panic!("expected MissingAmodal, got {other}"),
        }

        // The mask-free ablation trains fine on the same corpus.
        let mut baseline = tiny_config(&data, &dir.path().join("baseline"));
        baseline.adapter = Some("synthetic-noamodal".into());
        baseline.ablation = Ablation::Baseline;
        baseline.optim.epochs = 1;
        train(&baseline).unwrap();
    }

    #[test]
    fn background_training_descends_on_a_room_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("rooms");
        room_corpus(&data, 3);
        let mut cfg = tiny_config(&data, &dir.path().join("run"));
        cfg.target = TrainTarget::Background;
        cfg.optim.epochs = 3;
        cfg.optim.batch_size = 3;
        let report = train(&cfg).unwrap();
        assert!(report.epochs.last().unwrap().loss < report.epochs.first().unwrap().loss);
        assert!(report.final_checkpoint.exists());
    }
}
