//! Room-background occupancy in the camera frame.
//!
//! The background field decodes `[local feature at the projection,
//! whole-image global feature, PE(z / far)]` to an occupancy, with no RoI
//! and no category: one field for everything that is not an instance.
//! Reconstruction is confined to the camera frustum clipped to
//! `[near, far]`; the mesh wrapper evaluates the field only there and
//! reports empty space elsewhere.

use crate::features::{
    encode_global, extract_local_features, global_head_forward, hourglass_forward,
    register_global_head, register_hourglass, EncoderConfig, FeatureMap, GlobalFeature,
    GlobalInput,
};
use crate::geometry::{Camera, V3};
use crate::instpifu::{
    decoder_eval_rows, decoder_forward, mse_slice, pe_eval_rows, pe_forward, register_decoder,
    repeat_row, PE_DIM,
};
use crate::mesh::TriMesh;
use crate::meshing::marching_cubes_field;
use crate::nn::{param_seed, NodeId, ParamStore, Tape};
use crate::sampling::{Frame, SampleBatch};
use crate::{Error, Result, Scalar};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

/// Parameter-name prefixes of the background model's subnetworks.
pub const B_ENC: &str = "enc";
pub const B_GLOBAL: &str = "g";
pub const B_DEC: &str = "dec";

/// Hyperparameters of the background field beyond the shared encoder
/// settings: the frustum depth range and the scene image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundConfig {
    /// Frustum near plane (camera depth, meters).
    pub near: f64,
    /// Frustum far plane; also the depth normalizer.
    pub far: f64,
    /// Scene image height fed to the encoder.
    pub scene_h: usize,
    /// Scene image width.
    pub scene_w: usize,
    /// Occupancy-decoder hidden width.
    pub hidden: usize,
    /// Base seed for parameter initialization.
    pub seed: u64,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            near: 0.1,
            far: 12.0,
            scene_h: 64,
            scene_w: 64,
            hidden: 128,
            seed: 0,
        }
    }
}

impl BackgroundConfig {
    /// Full-scale scene input (484x648).
    pub fn paper_scale() -> Self {
        BackgroundConfig {
            scene_h: 484,
            scene_w: 648,
            ..BackgroundConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Config(format!(
                "frustum range [{}, {}] must satisfy 0 < near < far",
                self.near, self.far
            )));
        }
        if self.scene_h == 0 || self.scene_w == 0 || self.hidden == 0 {
            return Err(Error::Config("scene size and width must be positive".into()));
        }
        Ok(())
    }

    /// Decoder input width for the given encoder settings.
    pub fn decoder_in(&self, enc: &EncoderConfig) -> usize {
        enc.l_c + enc.d_g + PE_DIM
    }
}

/// Registers the background field: local encoder, whole-image global head
/// (pool + FCs), occupancy decoder.
pub fn register_background_nets<S: Scalar>(
    store: &mut ParamStore<S>,
    enc: &EncoderConfig,
    cfg: &BackgroundConfig,
) -> Result<()> {
    enc.validate()?;
    cfg.validate()?;
    register_hourglass(store, enc, B_ENC)?;
    register_global_head(store, enc.l_c, enc.d_g, B_GLOBAL, param_seed(enc.seed, 505))?;
    register_decoder(
        store,
        cfg.decoder_in(enc),
        cfg.hidden,
        B_DEC,
        param_seed(cfg.seed, 606),
    )?;
    Ok(())
}

/// View frustum clipped to `[near, far]` camera depth.
#[derive(Debug, Clone)]
pub struct Frustum<S: Scalar> {
    pub camera: Camera<S>,
    pub near: f64,
    pub far: f64,
}

impl<S: Scalar> Frustum<S> {
    pub fn new(camera: Camera<S>, cfg: &BackgroundConfig) -> Self {
        Frustum {
            camera,
            near: cfg.near,
            far: cfg.far,
        }
    }

    /// Whether a camera-frame point lies inside the clipped frustum.
    pub fn contains(&self, p: V3<S>) -> bool {
        let z = p[2].to_f();
        if !(z >= self.near && z <= self.far) {
            return false;
        }
        let Ok([u, v]) = self.camera.project(p) else {
            return false;
        };
        let (u, v) = (u.to_f(), v.to_f());
        u >= 0.0 && u <= self.camera.width as f64 && v >= 0.0 && v <= self.camera.height as f64
    }

    /// Axis-aligned bounds of the frustum: the hull of its eight corners,
    /// padded by one part in a thousand so boundary surfaces get a full
    /// marching-cubes cell.
    pub fn aabb(&self) -> (V3<f64>, V3<f64>) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &z in &[self.near, self.far] {
            for &(px, py) in &[
                (0.0, 0.0),
                (self.camera.width as f64, 0.0),
                (0.0, self.camera.height as f64),
                (self.camera.width as f64, self.camera.height as f64),
            ] {
                let x = (px - self.camera.cx.to_f()) * z / self.camera.fx.to_f();
                let y = (py - self.camera.cy.to_f()) * z / self.camera.fy.to_f();
                for (a, c) in [x, y, z].into_iter().enumerate() {
                    lo[a] = lo[a].min(c);
                    hi[a] = hi[a].max(c);
                }
            }
        }
        let pad = |l: f64, h: f64| (h - l).max(1e-6) * 1e-3;
        for a in 0..3 {
            let p = pad(lo[a], hi[a]);
            lo[a] -= p;
            hi[a] += p;
        }
        (lo, hi)
    }
}

/// A trained background field bound to one scene image: the encoded
/// feature map, the pooled whole-image feature, and the camera, ready for
/// repeated point evaluation.
pub struct RoomField<'a, S: Scalar> {
    pub store: &'a ParamStore<S>,
    pub cfg: BackgroundConfig,
    pub map: FeatureMap<S>,
    pub global: GlobalFeature<S>,
    pub camera: Camera<S>,
}

impl<'a, S: Scalar> RoomField<'a, S> {
    /// Encodes the scene image once and captures everything point
    /// evaluation needs.
    pub fn prepare(
        store: &'a ParamStore<S>,
        enc: &EncoderConfig,
        cfg: &BackgroundConfig,
        image: &ndarray::Array3<S>,
        camera: Camera<S>,
    ) -> Result<Self> {
        cfg.validate()?;
        let (_, h, w) = image.dim();
        if (h, w) != (cfg.scene_h, cfg.scene_w) {
            return Err(Error::Shape(format!(
                "scene image is {w}x{h}, config expects {}x{}",
                cfg.scene_w, cfg.scene_h
            )));
        }
        let map = extract_local_features(store, enc, B_ENC, image)?;
        let global = encode_global(store, enc, B_GLOBAL, GlobalInput::Map(&map))?;
        Ok(RoomField {
            store,
            cfg: cfg.clone(),
            map,
            global,
            camera,
        })
    }

    pub fn frustum(&self) -> Frustum<S> {
        Frustum {
            camera: self.camera.clone(),
            near: self.cfg.near,
            far: self.cfg.far,
        }
    }

    /// Occupancies for camera-frame points. Points with depth outside
    /// `(0, far]` are excluded: occupancy 0 and a set flag.
    pub fn evaluate_many(&self, points: &[V3<S>]) -> Result<BackgroundForward<S>> {
        decode_room_points(
            self.store,
            &self.cfg,
            &self.map,
            &self.global,
            &self.camera,
            points,
        )
    }

    /// Single-point convenience wrapper; outside-domain points read as
    /// empty space.
    pub fn occupancy(&self, p: V3<S>) -> S {
        match self.evaluate_many(std::slice::from_ref(&p)) {
            Ok(out) => out.occupancy[0],
            Err(_) => S::zero(),
        }
    }

    /// Extracts the 0.5 level set over the clipped frustum at the given
    /// grid resolution. Space outside the frustum reads as empty, so the
    /// surface is closed along the frustum boundary.
    pub fn extract_mesh(&self, resolution: usize) -> Result<TriMesh<f64>> {
        let fr = self.frustum();
        let (lo, hi) = fr.aabb();
        marching_cubes_field(
            |p| {
                let ps = [S::from_f(p[0]), S::from_f(p[1]), S::from_f(p[2])];
                if !fr.contains(ps) {
                    return 0.0;
                }
                self.occupancy(ps).to_f()
            },
            resolution,
            lo,
            hi,
            0.5,
        )
    }
}

/// Result of evaluating the background field on a point batch.
#[derive(Debug, Clone)]
pub struct BackgroundForward<S: Scalar> {
    /// One occupancy per input point, in [0, 1]; exactly 0 for excluded
    /// points.
    pub occupancy: Vec<S>,
    /// Per-point exclusion flags (depth outside `(0, far]`).
    pub excluded: Vec<bool>,
}

fn decode_room_points<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &BackgroundConfig,
    map: &FeatureMap<S>,
    global: &GlobalFeature<S>,
    camera: &Camera<S>,
    points: &[V3<S>],
) -> Result<BackgroundForward<S>> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet {
            op: "decode_room_points",
        });
    }
    let n = points.len();
    let l_c = map.channels();
    let mut excluded = vec![false; n];
    let mut occupancy = vec![S::zero(); n];
    let mut visible: Vec<usize> = Vec::with_capacity(n);
    let mut locals: Vec<S> = Vec::new();
    let mut zs: Vec<S> = Vec::with_capacity(n);
    for (i, &p) in points.iter().enumerate() {
        let depth = p[2].to_f();
        if !(depth > 0.0 && depth <= cfg.far) {
            excluded[i] = true;
            continue;
        }
        let [u, v] = camera.project(p)?;
        locals.extend(map.sample(u, v));
        zs.push(p[2] / S::from_f(cfg.far));
        visible.push(i);
    }
    if visible.is_empty() {
        return Err(Error::AllPointsBehindCamera);
    }
    // Depth normalization must land in [0, 1] for every decoded point.
    assert!(
        zs.iter().all(|z| (0.0..=1.0).contains(&z.to_f())),
        "depth / far outside [0, 1]"
    );
    let m = visible.len();
    let locals = Array2::from_shape_vec((m, l_c), locals).expect("row count");
    let parts = [
        locals,
        repeat_row(&global.values, m),
        pe_eval_rows(&zs),
    ];
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let rows = ndarray::concatenate(Axis(1), &views).expect("row match");
    let occ = decoder_eval_rows(store, B_DEC, &rows);
    for (row, &i) in visible.iter().enumerate() {
        occupancy[i] = occ[row];
    }
    Ok(BackgroundForward {
        occupancy,
        excluded,
    })
}

/// Full eval pipeline: encode the scene image, then decode the batch's
/// camera-frame points.
pub fn background_forward<S: Scalar>(
    store: &ParamStore<S>,
    enc: &EncoderConfig,
    cfg: &BackgroundConfig,
    image: &ndarray::Array3<S>,
    camera: &Camera<S>,
    batch: &SampleBatch,
) -> Result<BackgroundForward<S>> {
    if batch.frame != Frame::Camera {
        return Err(Error::Config(
            "background decoding expects camera-frame points".into(),
        ));
    }
    let field = RoomField::prepare(store, enc, cfg, image, camera.clone())?;
    let points: Vec<V3<S>> = batch
        .points
        .iter()
        .map(|p| [S::from_f(p[0] as f64), S::from_f(p[1] as f64), S::from_f(p[2] as f64)])
        .collect();
    field.evaluate_many(&points)
}

/// Taped training forward. Every point must have depth in `(0, far]`
/// (callers filter, as with the instance model).
pub fn background_forward_tape<S: Scalar>(
    t: &mut Tape<S>,
    store: &ParamStore<S>,
    enc: &EncoderConfig,
    cfg: &BackgroundConfig,
    image: &ndarray::Array3<S>,
    camera: &Camera<S>,
    points: &[V3<S>],
) -> Result<NodeId> {
    enc.validate()?;
    cfg.validate()?;
    if points.is_empty() {
        return Err(Error::EmptyPointSet {
            op: "background_forward_tape",
        });
    }
    let (c, h, w) = image.dim();
    if c != 3 || h % enc.stride != 0 || w % enc.stride != 0 {
        return Err(Error::Shape(format!(
            "image {w}x{h} incompatible with stride {}",
            enc.stride
        )));
    }
    let n = points.len();
    let mut coords: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut zs: Vec<S> = Vec::with_capacity(n);
    for &p in points {
        let depth = p[2].to_f();
        if !(depth > 0.0 && depth <= cfg.far) {
            return Err(Error::BehindCamera { z: depth });
        }
        let [u, v] = camera.project(p)?;
        let s = enc.stride as f64;
        coords.push([u.to_f() / s - 0.5, v.to_f() / s - 0.5]);
        zs.push(p[2] / S::from_f(cfg.far));
    }
    let x4 = image
        .view()
        .insert_axis(Axis(0))
        .to_owned()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("4-d image");
    let xi = t.input(x4.into_dyn());
    let fmap = hourglass_forward(t, store, enc, B_ENC, xi);
    let pooled = t.gap(fmap);
    let g_row = global_head_forward(t, store, B_GLOBAL, pooled);
    let f3 = t.reshape(fmap, &[enc.l_c, h / enc.stride, w / enc.stride]);
    let locals = t.gather(f3, &coords);
    let ones = t.input2(Array2::<S>::ones((n, 1)));
    let g_rows = t.matmul(ones, g_row);
    let rows = t.concat(1, locals, g_rows);
    let zcol = t.input2(Array2::from_shape_vec((n, 1), zs).expect("column"));
    let pe = pe_forward(t, zcol);
    let rows = t.concat(1, rows, pe);
    Ok(decoder_forward(t, store, B_DEC, rows))
}

/// Mean-squared occupancy loss for the background field.
pub fn loss_background<S: Scalar>(pred: &[S], gt: &[S]) -> Result<S> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "occupancy shapes differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(mse_slice(pred, gt))
}

/// Taped counterpart of [`loss_background`].
pub fn loss_background_node<S: Scalar>(t: &mut Tape<S>, pred: NodeId, gt: &[S]) -> NodeId {
    let target =
        ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[gt.len(), 1]), gt.to_vec())
            .expect("column target");
    t.mse_to(pred, target)
}
