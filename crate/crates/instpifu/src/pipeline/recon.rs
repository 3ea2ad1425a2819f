//! Scene reconstruction from trained checkpoints: per-instance meshes
//! extracted in the canonical frame, posed into the camera frame, plus the
//! background room surface, exported as per-part and composite OBJ files.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::background::RoomField;
use crate::checkpoint::load_checkpoint;
use crate::features::{extract_local_features, FeatureMap};
use crate::geometry::{Box2D, Camera, InstancePose, V3};
use crate::instpifu::{decode_points, instance_global, roi_align, P_ENC};
use crate::mesh::TriMesh;
use crate::meshing::marching_cubes_refined;
use crate::nn::ParamStore;
use crate::pipeline::train::write_json;
use crate::pipeline::{check_stamp, RunConfig, TrainTarget};
use crate::sampling::mix_seed;
use crate::scenegen::primitives::Category;
use crate::scenegen::scene::SceneRecord;
use crate::{Error, Mesh64, NetReal, Result};

/// Half-extent of the canonical marching-cubes domain; every canonical
/// primitive fits well inside it.
const CANONICAL_DOMAIN: f64 = 1.5;
/// Occupancy is forced to zero outside this radius so the level set always
/// closes inside the domain.
const CANONICAL_WINDOW: f64 = 1.4;

/// Where reconstruction takes its 2-d instance boxes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoxSource {
    /// Ground-truth boxes from the scene record.
    Gt,
    /// Ground-truth boxes with every edge jittered uniformly in
    /// `[-pixels, pixels]`.
    Perturbed { pixels: f64, seed: u64 },
    /// A JSON file holding one `[x0, y0, x1, y1]` row per instance.
    File(PathBuf),
}

impl BoxSource {
    /// Parses a command-line spec: `gt`, `perturbed`, `perturbed:PX`, or
    /// `file:PATH`.
    pub fn parse(s: &str) -> Result<BoxSource> {
        if s == "gt" {
            return Ok(BoxSource::Gt);
        }
        if s == "perturbed" {
            return Ok(BoxSource::Perturbed {
                pixels: 2.0,
                seed: 0,
            });
        }
        if let Some(px) = s.strip_prefix("perturbed:") {
            let pixels: f64 = px
                .parse()
                .map_err(|_| Error::Config(format!("bad jitter amount {px:?}")))?;
            return Ok(BoxSource::Perturbed { pixels, seed: 0 });
        }
        if let Some(path) = s.strip_prefix("file:") {
            return Ok(BoxSource::File(path.into()));
        }
        Err(Error::Config(format!(
            "box source must be gt, perturbed[:PX], or file:PATH, got {s:?}"
        )))
    }
}

/// Resolves the box source against one scene. Jitter is deterministic per
/// scene; a box file must cover every instance.
pub(crate) fn resolve_boxes(record: &SceneRecord, src: &BoxSource) -> Result<Vec<Box2D<f64>>> {
    let (w, h) = (record.camera.width, record.camera.height);
    match src {
        BoxSource::Gt => Ok(record.instances.iter().map(|i| i.bbox.clone()).collect()),
        BoxSource::Perturbed { pixels, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(*seed, record.seed));
            record
                .instances
                .iter()
                .map(|inst| {
                    let mut j = || {
                        if *pixels > 0.0 {
                            rng.gen_range(-pixels..=*pixels)
                        } else {
                            0.0
                        }
                    };
                    let b = &inst.bbox;
                    let mut x0 = (b.x0 + j()).clamp(0.0, w as f64 - 1.0);
                    let mut y0 = (b.y0 + j()).clamp(0.0, h as f64 - 1.0);
                    let mut x1 = (b.x1 + j()).clamp(0.0, w as f64);
                    let mut y1 = (b.y1 + j()).clamp(0.0, h as f64);
                    if x1 < x0 + 1.0 {
                        x1 = (x0 + 1.0).min(w as f64);
                        x0 = x1 - 1.0;
                    }
                    if y1 < y0 + 1.0 {
                        y1 = (y0 + 1.0).min(h as f64);
                        y0 = y1 - 1.0;
                    }
                    Ok(Box2D::new(x0, y0, x1, y1, w, h))
                })
                .collect()
        }
        BoxSource::File(path) => {
            let rows: Vec<[f64; 4]> = serde_json::from_slice(&fs::read(path)?)?;
            if rows.len() < record.instances.len() {
                return Err(Error::Config(format!(
                    "box file {} lists {} boxes but scene {} has {} instances; \
                     instance {} has no box",
                    path.display(),
                    rows.len(),
                    record.id,
                    record.instances.len(),
                    rows.len()
                )));
            }
            Ok(rows
                .iter()
                .take(record.instances.len())
                .map(|&[x0, y0, x1, y1]| Box2D::new(x0, y0, x1, y1, w, h))
                .collect())
        }
    }
}

/// Picks a band-refinement split for a target resolution: the largest
/// factor whose coarse level still resolves the lattice.
pub(crate) fn mc_levels(res: usize) -> (usize, usize) {
    for factor in [4usize, 3, 2] {
        if res % factor == 0 && res / factor >= 8 {
            return (res / factor, factor);
        }
    }
    (res, 1)
}

/// Extracts one instance's 0.5 level set over the canonical domain.
#[allow(clippy::too_many_arguments)]
pub(crate) fn reconstruct_instance(
    store: &ParamStore<NetReal>,
    cfg: &RunConfig,
    map: &FeatureMap<NetReal>,
    image: &Array3<NetReal>,
    bbox: &Box2D<NetReal>,
    pose: &InstancePose<NetReal>,
    camera: &Camera<NetReal>,
) -> Result<Mesh64> {
    let (roi, ginst) = if cfg.object.ablation.uses_global() {
        let r = roi_align(map, bbox, cfg.object.roi, 0)?;
        let g = instance_global(store, &cfg.encoder, image, bbox, &r)?;
        (Some(r), Some(g))
    } else {
        (None, None)
    };
    let (coarse, factor) = mc_levels(cfg.mc_res);
    let mut field = |pts: &[V3<f64>]| -> Result<Vec<f64>> {
        let q: Vec<V3<NetReal>> = pts
            .iter()
            .map(|p| [p[0] as NetReal, p[1] as NetReal, p[2] as NetReal])
            .collect();
        let out = decode_points(
            store,
            &cfg.object,
            map,
            roi.as_ref(),
            ginst.as_ref(),
            pose,
            camera,
            &q,
        )?;
        Ok(pts
            .iter()
            .zip(out.occupancy)
            .map(|(p, o)| {
                if p.iter().any(|c| c.abs() > CANONICAL_WINDOW) {
                    0.0
                } else {
                    o as f64
                }
            })
            .collect())
    };
    marching_cubes_refined(
        &mut field,
        coarse,
        factor,
        [-CANONICAL_DOMAIN; 3],
        [CANONICAL_DOMAIN; 3],
        0.5,
    )
}

/// Extracts the room surface over the clipped camera frustum.
pub(crate) fn background_mesh(field: &RoomField<'_, NetReal>, res: usize) -> Result<Mesh64> {
    let frustum = field.frustum();
    let (lo, hi) = frustum.aabb();
    let (coarse, factor) = mc_levels(res);
    let mut f = |pts: &[V3<f64>]| -> Result<Vec<f64>> {
        let mut vals = vec![0.0; pts.len()];
        let mut inside_idx = Vec::new();
        let mut inside_pts: Vec<V3<NetReal>> = Vec::new();
        for (i, p) in pts.iter().enumerate() {
            let q = [p[0] as NetReal, p[1] as NetReal, p[2] as NetReal];
            if frustum.contains(q) {
                inside_idx.push(i);
                inside_pts.push(q);
            }
        }
        if !inside_pts.is_empty() {
            let out = field.evaluate_many(&inside_pts)?;
            for (i, o) in inside_idx.into_iter().zip(out.occupancy) {
                vals[i] = o as f64;
            }
        }
        Ok(vals)
    };
    marching_cubes_refined(&mut f, coarse, factor, lo, hi, 0.5)
}

/// One reconstructed instance: the camera-frame mesh plus the canonical
/// bounds it was extracted under.
#[derive(Debug, Clone)]
pub struct InstanceRecon {
    pub index: usize,
    pub category: Category,
    /// Camera-frame surface.
    pub mesh: Mesh64,
    /// Bounds of the extraction in the canonical frame, before posing.
    pub canonical_bounds: (V3<f64>, V3<f64>),
}

/// A reconstructed scene. All meshes are in the camera frame.
#[derive(Debug, Clone)]
pub struct SceneReconstruction {
    pub scene: String,
    /// Coordinate frame of every exported mesh.
    pub frame: &'static str,
    pub background: Option<Mesh64>,
    pub instances: Vec<InstanceRecon>,
    /// Checkpoints, box source, and resolutions that produced this.
    pub provenance: serde_json::Value,
}

/// Reconstructs one scene from the configured checkpoints. Instances need
/// `object_checkpoint`; the background surface is added when
/// `background_checkpoint` is set. An empty instance list is fine.
pub fn reconstruct(
    config: &RunConfig,
    record: &SceneRecord,
    boxes: &BoxSource,
) -> Result<SceneReconstruction> {
    let cfg = config.resolved()?;
    let camera = record.camera.cast::<NetReal>();
    let resolved_boxes = resolve_boxes(record, boxes)?;

    let mut instances = Vec::with_capacity(record.instances.len());
    if !record.instances.is_empty() {
        let ckpt = cfg.object_checkpoint.as_ref().ok_or_else(|| {
            Error::Config("reconstruction of instances needs object_checkpoint".into())
        })?;
        let (store, header) = load_checkpoint::<NetReal>(ckpt)?;
        let mut as_objects = cfg.clone();
        as_objects.target = TrainTarget::Objects;
        check_stamp(&header, &as_objects)?;
        let map = extract_local_features(&store, &cfg.encoder, P_ENC, &record.image)?;
        for (i, inst) in record.instances.iter().enumerate() {
            let bbox = resolved_boxes[i].cast::<NetReal>();
            let pose = inst.pose.cast::<NetReal>();
            let canonical = reconstruct_instance(
                &store,
                &cfg,
                &map,
                &record.image,
                &bbox,
                &pose,
                &camera,
            )
            .map_err(|e| match e {
                Error::EmptySurface => Error::Config(format!(
                    "instance {i} of scene {} decodes to an empty 0.5 level set",
                    record.id
                )),
                other => other,
            })?;
            canonical.check_watertight()?;
            let canonical_bounds = canonical.bounds()?;
            let mesh = canonical.map_vertices(|p| inst.pose.canonical_to_camera(p));
            instances.push(InstanceRecon {
                index: i,
                category: inst.category,
                mesh,
                canonical_bounds,
            });
        }
    }

    let background = match &cfg.background_checkpoint {
        Some(ckpt) => {
            let (store, header) = load_checkpoint::<NetReal>(ckpt)?;
            let mut as_background = cfg.clone();
            as_background.target = TrainTarget::Background;
            check_stamp(&header, &as_background)?;
            let field = RoomField::prepare(
                &store,
                &cfg.encoder,
                &cfg.background,
                &record.image,
                camera.clone(),
            )?;
            Some(background_mesh(&field, cfg.background_mc_res)?)
        }
        None => None,
    };

    let provenance = serde_json::json!({
        "object_checkpoint": cfg.object_checkpoint,
        "background_checkpoint": cfg.background_checkpoint,
        "boxes": boxes,
        "mc_res": cfg.mc_res,
        "background_mc_res": cfg.background_mc_res,
    });
    Ok(SceneReconstruction {
        scene: record.id.clone(),
        frame: "camera",
        background,
        instances,
        provenance,
    })
}

/// Writes per-part OBJs, the composite OBJ, and a JSON sidecar describing
/// the parts into `dir`.
pub fn export_reconstruction(recon: &SceneReconstruction, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut composite = TriMesh::<f64> {
        vertices: Vec::new(),
        faces: Vec::new(),
    };
    let mut parts = Vec::new();
    if let Some(bg) = &recon.background {
        bg.write_obj_file(&dir.join("background.obj"))?;
        composite.append(bg);
        parts.push(serde_json::json!({
            "file": "background.obj",
            "kind": "background",
        }));
    }
    for inst in &recon.instances {
        let name = format!("instance-{:02}.obj", inst.index);
        inst.mesh.write_obj_file(&dir.join(&name))?;
        composite.append(&inst.mesh);
        parts.push(serde_json::json!({
            "file": name,
            "kind": "instance",
            "index": inst.index,
            "category": inst.category,
            "canonical_bounds": inst.canonical_bounds,
        }));
    }
    if !composite.vertices.is_empty() {
        composite.write_obj_file(&dir.join("composite.obj"))?;
    }
    let sidecar = serde_json::json!({
        "scene": recon.scene,
        "frame": recon.frame,
        "parts": parts,
        "provenance": recon.provenance,
    });
    write_json(&dir.join("reconstruction.json"), &sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::testutil::{object_corpus, room_corpus, tiny_config};
    use crate::pipeline::{train, TrainTarget};
    use crate::scenegen::dataset::Corpus;

    #[test]
    fn perturbed_boxes_stay_inside_the_image_and_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        object_corpus(&data, 2);
        let corpus = Corpus::open(&data).unwrap();
        let record = corpus.load_scene(0).unwrap();
        let src = BoxSource::Perturbed {
            pixels: 2.0,
            seed: 9,
        };
        let a = resolve_boxes(&record, &src).unwrap();
        let b = resolve_boxes(&record, &src).unwrap();
        assert_eq!(a.len(), record.instances.len());
        for (ba, bb) in a.iter().zip(&b) {
            assert_eq!((ba.x0, ba.y0, ba.x1, ba.y1), (bb.x0, bb.y0, bb.x1, bb.y1));
        }
        for (jittered, inst) in a.iter().zip(&record.instances) {
            assert!(jittered.x0 >= 0.0 && jittered.x1 <= record.camera.width as f64);
            assert!(jittered.y0 >= 0.0 && jittered.y1 <= record.camera.height as f64);
            assert!(jittered.width() >= 1.0 && jittered.height() >= 1.0);
            assert!((jittered.x0 - inst.bbox.x0).abs() <= 2.0 + 1e-9);
            assert!((jittered.y1 - inst.bbox.y1).abs() <= 2.0 + 1e-9);
        }
    }

    #[test]
    fn a_box_file_missing_an_instance_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        object_corpus(&data, 2);
        let corpus = Corpus::open(&data).unwrap();
        let record = corpus.load_scene(0).unwrap();
        assert_eq!(record.instances.len(), 2);
        let path = dir.path().join("boxes.json");
        std::fs::write(&path, b"[[1.0, 2.0, 30.0, 40.0]]").unwrap();
        let err = resolve_boxes(&record, &BoxSource::File(path)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("instance 1"), "{msg}");
    }

    #[test]
    fn box_source_specs_parse() {
        assert_eq!(BoxSource::parse("gt").unwrap(), BoxSource::Gt);
        assert_eq!(
            BoxSource::parse("perturbed").unwrap(),
            BoxSource::Perturbed {
                pixels: 2.0,
                seed: 0
            }
        );
        assert_eq!(
            BoxSource::parse("perturbed:3.5").unwrap(),
            BoxSource::Perturbed {
                pixels: 3.5,
                seed: 0
            }
        );
        assert_eq!(
            BoxSource::parse("file:/tmp/b.json").unwrap(),
            BoxSource::File("/tmp/b.json".into())
        );
        assert!(BoxSource::parse("oracle").is_err());
    }

    #[test]
    fn refinement_levels_cover_common_resolutions() {
        assert_eq!(mc_levels(64), (16, 4));
        assert_eq!(mc_levels(96), (24, 4));
        assert_eq!(mc_levels(16), (8, 2));
        assert_eq!(mc_levels(256), (64, 4));
        assert_eq!(mc_levels(9), (9, 1));
    }

    #[test]
    fn reconstruction_exports_every_part_and_keeps_frames_separate() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        object_corpus(&data, 3);
        let rooms = dir.path().join("rooms");
        room_corpus(&rooms, 2);

        let mut obj_cfg = tiny_config(&data, &dir.path().join("obj"));
        obj_cfg.optim.epochs = 6;
        obj_cfg.optim.batch_size = 3;
        let obj_report = train(&obj_cfg).unwrap();

        let mut bg_cfg = tiny_config(&rooms, &dir.path().join("bg"));
        bg_cfg.target = TrainTarget::Background;
        bg_cfg.optim.epochs = 4;
        let bg_report = train(&bg_cfg).unwrap();

        let mut cfg = tiny_config(&data, &dir.path().join("recon"));
        cfg.object_checkpoint = Some(obj_report.final_checkpoint);
        cfg.background_checkpoint = Some(bg_report.final_checkpoint);
        let corpus = Corpus::open(&data).unwrap();
        let record = corpus.load_scene(0).unwrap();
        let recon = reconstruct(&cfg, &record, &BoxSource::Gt).unwrap();

        assert_eq!(recon.frame, "camera");
        assert_eq!(recon.instances.len(), record.instances.len());
        for inst in &recon.instances {
            // Mapping the exported part back to the canonical frame must
            // reproduce the extraction bounds exactly: frames not mixed.
            let pose = &record.instances[inst.index].pose;
            let back = inst.mesh.map_vertices(|p| pose.camera_to_canonical(p));
            let (lo, hi) = back.bounds().unwrap();
            for a in 0..3 {
                assert!((lo[a] - inst.canonical_bounds.0[a]).abs() < 1e-6);
                assert!((hi[a] - inst.canonical_bounds.1[a]).abs() < 1e-6);
            }
        }

        let out = dir.path().join("export");
        export_reconstruction(&recon, &out).unwrap();
        assert!(out.join("background.obj").exists());
        assert!(out.join("instance-00.obj").exists());
        assert!(out.join("instance-01.obj").exists());
        assert!(out.join("composite.obj").exists());
        assert!(out.join("reconstruction.json").exists());

        let composite = TriMesh::<f64>::read_obj_file(&out.join("composite.obj")).unwrap();
        let n_parts = recon.instances.len() + 1;
        assert!(composite.split_components().len() >= n_parts);
    }

    #[test]
    fn empty_scenes_reconstruct_background_only() {
        let dir = tempfile::tempdir().unwrap();
        let rooms = dir.path().join("rooms");
        room_corpus(&rooms, 2);
        let mut bg_cfg = tiny_config(&rooms, &dir.path().join("bg"));
        bg_cfg.target = TrainTarget::Background;
        bg_cfg.optim.epochs = 3;
        let report = train(&bg_cfg).unwrap();

        let mut cfg = tiny_config(&rooms, &dir.path().join("recon"));
        cfg.background_checkpoint = Some(report.final_checkpoint);
        let corpus = Corpus::open(&rooms).unwrap();
        let record = corpus.load_scene(0).unwrap();
        let recon = reconstruct(&cfg, &record, &BoxSource::Gt).unwrap();
        assert!(recon.instances.is_empty());
        assert!(recon.background.is_some());
        let out = dir.path().join("export");
        export_reconstruction(&recon, &out).unwrap();
        assert!(out.join("background.obj").exists());
        assert!(out.join("composite.obj").exists());
    }
}
