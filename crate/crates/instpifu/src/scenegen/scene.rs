//! Scene composition: rooms populated with posed primitive instances,
//! rendered to images with exact ground-truth boxes, masks, and meshes.
//! Generation is rejection sampling under hard placement predicates plus an
//! optional projected-occlusion target between a designated instance pair.

use crate::geometry::{Box2D, Camera, InstancePose, V3};
use crate::mesh::TriMesh;
use crate::sampling::mix_seed;
use crate::scenegen::primitives::{Category, Shape};
use crate::scenegen::raster::{quantize_image, rasterize, DrawItem, RasterOutput, ID_NONE, ID_ROOM};
use crate::scenegen::rooms::{build_room, RoomShell, RoomSpec};
use crate::{Error, Result};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Near plane used for every scene rasterization.
pub const NEAR_PLANE: f64 = 0.05;
/// Albedo of the room shell.
pub const ROOM_ALBEDO: [f32; 3] = [0.75, 0.73, 0.70];
/// Clearance between an instance's bounds and the room walls.
const ROOM_MARGIN: f64 = 0.05;
/// Clearance between two instances' bounds.
const PAIR_MARGIN: f64 = 0.02;
/// Minimum fraction of the occluded instance that must stay visible.
const MIN_REAR_VISIBLE: f64 = 0.15;

/// Requested projected occlusion between two instances (indices into the
/// spec's category list). `front` must end up nearer the camera and cover
/// at least `min_fraction` of `rear`'s amodal silhouette.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionTarget {
    pub front: usize,
    pub rear: usize,
    pub min_fraction: f64,
}

/// Scene randomization contract. Deterministic given a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// Instance categories in record order; empty generates a bare room.
    pub categories: Vec<Category>,
    pub occlusion: Option<OcclusionTarget>,
    pub width: u32,
    pub height: u32,
    /// Focal length in pixels (same for both axes, principal point centered).
    pub focal: f64,
    pub room: RoomSpec,
    /// Isotropic instance scale range; each axis gets a further ±15% jitter.
    pub scale_range: (f64, f64),
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            categories: vec![Category::Sphere, Category::Box],
            occlusion: Some(OcclusionTarget {
                front: 0,
                rear: 1,
                min_fraction: 0.3,
            }),
            width: 64,
            height: 64,
            focal: 40.0,
            room: RoomSpec::default(),
            scale_range: (0.35, 0.65),
            max_attempts: 1000,
        }
    }
}

impl SceneSpec {
    /// The occlusion-study scene: a sphere in front of a box, overlapping
    /// by at least 30% of the box's silhouette.
    pub fn sphere_occludes_cube() -> Self {
        SceneSpec::default()
    }

    /// Bare alcove rooms for the background-field study.
    pub fn background_rooms() -> Self {
        SceneSpec {
            categories: Vec::new(),
            occlusion: None,
            room: RoomSpec::always_alcove(),
            ..SceneSpec::default()
        }
    }

    /// 256x256 images with proportionally longer focal length.
    pub fn paper_scale(mut self) -> Self {
        self.width *= 4;
        self.height *= 4;
        self.focal *= 4.0;
        self
    }

    pub fn camera(&self) -> Camera<f64> {
        Camera::frontal(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.len() > 6 {
            return Err(Error::Config("at most 6 instances per scene".into()));
        }
        if self.width < 16 || self.height < 16 || !(self.focal > 0.0) {
            return Err(Error::Config("image must be >= 16px with positive focal".into()));
        }
        if let Some(t) = self.occlusion {
            if t.front == t.rear
                || t.front >= self.categories.len()
                || t.rear >= self.categories.len()
            {
                return Err(Error::Config("occlusion target indices invalid".into()));
            }
            if !(0.0..1.0).contains(&t.min_fraction) {
                return Err(Error::Config("occlusion fraction outside [0, 1)".into()));
            }
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.1 >= self.scale_range.0) {
            return Err(Error::Config("scale range must be positive and ordered".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be >= 1".into()));
        }
        self.room.validate()
    }
}

/// One placed instance with its exact ground truth.
#[derive(Debug, Clone)]
pub struct SceneInstance {
    /// Canonical-frame surface mesh.
    pub mesh: TriMesh<f64>,
    pub pose: InstancePose<f64>,
    pub category: Category,
    /// Exact projected bounds of the posed mesh.
    pub bbox: Box2D<f64>,
    /// Silhouette of the instance rendered alone; absent when the source
    /// corpus does not provide amodal supervision.
    pub amodal: Option<Array2<f32>>,
    /// Visible pixels in the composite image.
    pub modal: Array2<f32>,
}

/// A realized projected-occlusion relation: `front` covers `fraction` of
/// `rear`'s amodal silhouette.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionPair {
    pub front: usize,
    pub rear: usize,
    pub fraction: f64,
}

/// A fully specified scene: geometry, camera, render, and ground truth.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub id: String,
    pub room: RoomShell,
    pub instances: Vec<SceneInstance>,
    pub camera: Camera<f64>,
    /// `(3, h, w)` quantized linear color.
    pub image: Array3<f32>,
    pub seed: u64,
    /// Where the record came from ("synthetic" for generated scenes).
    pub provenance: String,
    /// All instance pairs whose silhouettes overlap, front listed first.
    pub occlusion: Vec<OcclusionPair>,
}

struct Placed {
    mesh: TriMesh<f64>,
    posed: TriMesh<f64>,
    pose: InstancePose<f64>,
    category: Category,
    aabb: (V3<f64>, V3<f64>),
    bbox: Box2D<f64>,
}

/// Poses the mesh and validates it against the room and image; `None`
/// rejects the proposal.
fn try_place(
    mesh: &TriMesh<f64>,
    category: Category,
    pose: InstancePose<f64>,
    camera: &Camera<f64>,
    room: &RoomShell,
) -> Option<Placed> {
    let posed = mesh.map_vertices(|v| pose.canonical_to_camera(v));
    let (lo, hi) = posed.bounds().ok()?;
    let inside = lo[0] >= -room.half_width + ROOM_MARGIN
        && hi[0] <= room.half_width - ROOM_MARGIN
        && lo[1] >= -room.half_height + ROOM_MARGIN
        && hi[1] <= room.half_height - ROOM_MARGIN
        && lo[2] >= -room.behind + ROOM_MARGIN
        && hi[2] <= room.depth - ROOM_MARGIN;
    if !inside {
        return None;
    }
    let mut u_lo = f64::INFINITY;
    let mut u_hi = f64::NEG_INFINITY;
    let mut v_lo = f64::INFINITY;
    let mut v_hi = f64::NEG_INFINITY;
    for &p in &posed.vertices {
        let [u, v] = camera.project(p).ok()?;
        u_lo = u_lo.min(u);
        u_hi = u_hi.max(u);
        v_lo = v_lo.min(v);
        v_hi = v_hi.max(v);
    }
    // Projection maps segments to segments, so vertex extremes are the
    // exact projected bounds of the whole surface.
    let in_image = u_lo >= 1.0
        && v_lo >= 1.0
        && u_hi <= camera.width as f64 - 1.0
        && v_hi <= camera.height as f64 - 1.0;
    if !in_image {
        return None;
    }
    Some(Placed {
        mesh: mesh.clone(),
        posed,
        pose,
        category,
        aabb: (lo, hi),
        bbox: Box2D::new(u_lo, v_lo, u_hi, v_hi, camera.width, camera.height),
    })
}

fn aabbs_disjoint(a: &(V3<f64>, V3<f64>), b: &(V3<f64>, V3<f64>), margin: f64) -> bool {
    (0..3).any(|k| a.1[k] + margin <= b.0[k] || b.1[k] + margin <= a.0[k])
}

/// Conservative half-extent of a scaled, yawed canonical mesh, used only to
/// pick center sampling ranges; the exact predicate runs in `try_place`.
fn rough_extent(mesh: &TriMesh<f64>, scale: V3<f64>, yaw: f64) -> V3<f64> {
    let pose = InstancePose::new([0.0, 0.0, 0.0], scale, yaw, 0);
    let posed = mesh.map_vertices(|v| pose.canonical_to_camera(v));
    let (lo, hi) = posed.bounds().expect("canonical meshes are non-empty");
    [
        lo[0].abs().max(hi[0].abs()),
        lo[1].abs().max(hi[1].abs()),
        lo[2].abs().max(hi[2].abs()),
    ]
}

fn mask_of(raster: &RasterOutput, id: u32) -> Array2<f32> {
    raster.ids.mapv(|v| if v == id { 1.0 } else { 0.0 })
}

fn mask_area(mask: &Array2<f32>) -> f64 {
    mask.iter().map(|&v| v as f64).sum()
}

fn overlap_count(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x * y) as f64).sum()
}

/// Generates one scene. Deterministic given `(seed, spec)`; placement is
/// rejection sampling with independently seeded attempts, so acceptance at
/// attempt `k` never perturbs anything downstream.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SceneRecord> {
    spec.validate()?;
    let camera = spec.camera();
    let mut room_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
    let room = build_room(&spec.room, &mut room_rng)?;

    let placed = if spec.categories.is_empty() {
        Vec::new()
    } else {
        place_instances(seed, spec, &camera, &room)?
    };

    // Composite pass: room first, instances by record index. The z-buffer
    // makes the draw order irrelevant.
    let mut items = vec![DrawItem {
        mesh: &room.mesh,
        id: ID_ROOM,
        albedo: ROOM_ALBEDO,
    }];
    for (i, p) in placed.iter().enumerate() {
        items.push(DrawItem {
            mesh: &p.posed,
            id: i as u32,
            albedo: p.category.albedo(),
        });
    }
    let full = rasterize(&camera, &items, NEAR_PLANE);
    let image = quantize_image(&full.color);

    let amodal: Vec<Array2<f32>> = placed
        .iter()
        .map(|p| {
            let alone = rasterize(
                &camera,
                &[DrawItem { mesh: &p.posed, id: 0, albedo: [1.0; 3] }],
                NEAR_PLANE,
            );
            mask_of(&alone, 0)
        })
        .collect();

    let mut occlusion = Vec::new();
    for i in 0..placed.len() {
        for j in (i + 1)..placed.len() {
            let (front, rear) = if placed[i].pose.center[2] <= placed[j].pose.center[2] {
                (i, j)
            } else {
                (j, i)
            };
            let rear_area = mask_area(&amodal[rear]);
            if rear_area == 0.0 {
                continue;
            }
            let fraction = overlap_count(&amodal[front], &amodal[rear]) / rear_area;
            if fraction > 0.0 {
                occlusion.push(OcclusionPair { front, rear, fraction });
            }
        }
    }

    let instances = placed
        .into_iter()
        .zip(amodal)
        .enumerate()
        .map(|(i, (p, am))| SceneInstance {
            mesh: p.mesh,
            pose: p.pose,
            category: p.category,
            bbox: p.bbox,
            amodal: Some(am),
            modal: mask_of(&full, i as u32),
        })
        .collect();

    Ok(SceneRecord {
        id: format!("s{seed:016x}"),
        room,
        instances,
        camera,
        image,
        seed,
        provenance: "synthetic".into(),
        occlusion,
    })
}

/// One placement attempt per iteration; every constraint failure falls
/// through to a freshly seeded attempt.
fn place_instances(
    seed: u64,
    spec: &SceneSpec,
    camera: &Camera<f64>,
    room: &RoomShell,
) -> Result<Vec<Placed>> {
    for attempt in 0..spec.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x10000 + attempt as u64));
        if let Some(placed) = attempt_placement(spec, camera, room, &mut rng) {
            return Ok(placed);
        }
    }
    Err(Error::PlacementFailed {
        attempts: spec.max_attempts,
        target: spec.occlusion.map_or(0.0, |t| t.min_fraction),
    })
}

fn attempt_placement(
    spec: &SceneSpec,
    camera: &Camera<f64>,
    room: &RoomShell,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Placed>> {
    let n = spec.categories.len();
    let meshes: Vec<(Category, TriMesh<f64>)> = spec
        .categories
        .iter()
        .map(|&c| (c, Shape::sample(c, rng).mesh()))
        .collect();
    let scales: Vec<V3<f64>> = (0..n)
        .map(|_| {
            let base = rng.gen_range(spec.scale_range.0..=spec.scale_range.1);
            [
                base * rng.gen_range(0.85..=1.15),
                base * rng.gen_range(0.85..=1.15),
                base * rng.gen_range(0.85..=1.15),
            ]
        })
        .collect();
    let yaws: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();

    // Placement order: occluded pair first (rear, then pixel-targeted
    // front), remaining instances afterwards.
    let mut order: Vec<usize> = Vec::with_capacity(n);
    if let Some(t) = spec.occlusion {
        order.push(t.rear);
        order.push(t.front);
    }
    for i in 0..n {
        if !order.contains(&i) {
            order.push(i);
        }
    }

    let mut placed: Vec<Option<Placed>> = (0..n).map(|_| None).collect();
    let far_z_cap = room.depth - 0.2;
    for &i in &order {
        let category = meshes[i].0;
        let mesh = &meshes[i].1;
        let ext = rough_extent(mesh, scales[i], yaws[i]);
        let role = match spec.occlusion {
            Some(t) if t.front == i => Role::Front(t.rear),
            Some(t) if t.rear == i => Role::Rear,
            _ => Role::Free,
        };
        let z = match role {
            Role::Front(_) => rng.gen_range(1.5..=2.3),
            Role::Rear => {
                let hi = far_z_cap - ext[2];
                if hi <= 3.4 {
                    return None;
                }
                rng.gen_range(3.4..=hi.min(4.5))
            }
            Role::Free => {
                let hi = far_z_cap - ext[2];
                if hi <= 1.8 {
                    return None;
                }
                rng.gen_range(1.8..=hi.min(4.5))
            }
        };
        let (x, y) = match role {
            Role::Front(rear) => {
                // Aim the center at the middle region of the rear's
                // projected box so the silhouettes overlap.
                let rb = &placed[rear].as_ref()?.bbox;
                let u = rng.gen_range(rb.x0 + 0.2 * rb.width()..=rb.x1 - 0.2 * rb.width());
                let v = rng.gen_range(rb.y0 + 0.2 * rb.height()..=rb.y1 - 0.2 * rb.height());
                ((u - camera.cx) * z / camera.fx, (v - camera.cy) * z / camera.fy)
            }
            _ => {
                let x_max = (room.half_width - ROOM_MARGIN - ext[0]).min(0.9);
                let y_max = (room.half_height - ROOM_MARGIN - ext[1]).min(0.3);
                if x_max <= 0.0 || y_max <= 0.0 {
                    return None;
                }
                (rng.gen_range(-x_max..=x_max), rng.gen_range(-y_max..=y_max))
            }
        };
        let pose = InstancePose::new([x, y, z], scales[i], yaws[i], category.id());
        let cand = try_place(mesh, category, pose, camera, room)?;
        for other in placed.iter().flatten() {
            if !aabbs_disjoint(&cand.aabb, &other.aabb, PAIR_MARGIN) {
                return None;
            }
        }
        placed[i] = Some(cand);
    }
    let placed: Vec<Placed> = placed.into_iter().map(|p| p.unwrap()).collect();

    if let Some(t) = spec.occlusion {
        if placed[t.front].pose.center[2] >= placed[t.rear].pose.center[2] {
            return None;
        }
        let render_alone = |i: usize| {
            let out = rasterize(
                camera,
                &[DrawItem { mesh: &placed[i].posed, id: 0, albedo: [1.0; 3] }],
                NEAR_PLANE,
            );
            mask_of(&out, 0)
        };
        let front = render_alone(t.front);
        let rear = render_alone(t.rear);
        let rear_area = mask_area(&rear);
        if rear_area == 0.0 {
            return None;
        }
        if overlap_count(&front, &rear) / rear_area < t.min_fraction {
            return None;
        }
        // The occluded instance must keep enough visible pixels to anchor
        // its image features.
        let mut items = vec![DrawItem { mesh: &room.mesh, id: ID_ROOM, albedo: ROOM_ALBEDO }];
        for (i, p) in placed.iter().enumerate() {
            items.push(DrawItem { mesh: &p.posed, id: i as u32, albedo: [1.0; 3] });
        }
        let full = rasterize(camera, &items, NEAR_PLANE);
        let visible = mask_area(&mask_of(&full, t.rear as u32));
        if visible / rear_area < MIN_REAR_VISIBLE {
            return None;
        }
    }
    Some(placed)
}

enum Role {
    Front(usize),
    Rear,
    Free,
}

/// What `render` draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RenderMode {
    /// Room plus all instances, shaded and quantized like the stored image.
    Shaded,
    /// White union silhouette of all instances, no room.
    Silhouette,
    /// White silhouette of one instance with every occluder removed.
    Amodal(u32),
}

/// Re-renders a record. `Shaded` reproduces `record.image` exactly. An
/// out-of-range `Amodal` index yields an empty mask.
pub fn render(record: &SceneRecord, mode: RenderMode) -> Array3<f32> {
    let posed: Vec<TriMesh<f64>> = record
        .instances
        .iter()
        .map(|inst| inst.mesh.map_vertices(|v| inst.pose.canonical_to_camera(v)))
        .collect();
    match mode {
        RenderMode::Shaded => {
            let mut items = vec![DrawItem {
                mesh: &record.room.mesh,
                id: ID_ROOM,
                albedo: ROOM_ALBEDO,
            }];
            for (i, (m, inst)) in posed.iter().zip(&record.instances).enumerate() {
                items.push(DrawItem { mesh: m, id: i as u32, albedo: inst.category.albedo() });
            }
            quantize_image(&rasterize(&record.camera, &items, NEAR_PLANE).color)
        }
        RenderMode::Silhouette => {
            let items: Vec<DrawItem<'_>> = posed
                .iter()
                .map(|m| DrawItem { mesh: m, id: 0, albedo: [1.0; 3] })
                .collect();
            let out = rasterize(&record.camera, &items, NEAR_PLANE);
            mask_image(&out.ids.mapv(|v| if v != ID_NONE { 1.0 } else { 0.0 }))
        }
        RenderMode::Amodal(k) => {
            let mask = match posed.get(k as usize) {
                Some(m) => {
                    let out = rasterize(
                        &record.camera,
                        &[DrawItem { mesh: m, id: 0, albedo: [1.0; 3] }],
                        NEAR_PLANE,
                    );
                    mask_of(&out, 0)
                }
                None => Array2::zeros((record.camera.height as usize, record.camera.width as usize)),
            };
            mask_image(&mask)
        }
    }
}

fn mask_image(mask: &Array2<f32>) -> Array3<f32> {
    let (h, w) = mask.dim();
    Array3::from_shape_fn((3, h, w), |(_, y, x)| mask[(y, x)])
}

/// Resamples an image-space mask onto the RoI grid of `bbox`, bilinearly at
/// the same cell centers `roi_align` reads, for use as a mask target.
pub fn mask_to_roi_grid(mask: &Array2<f32>, bbox: &Box2D<f64>, roi: usize) -> Array2<f32> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((roi, roi), |(i, j)| {
        let u = bbox.x0 + (j as f64 + 0.5) / roi as f64 * bbox.width();
        let v = bbox.y0 + (i as f64 + 0.5) / roi as f64 * bbox.height();
        // Pixel centers sit at integer + 0.5.
        let gu = (u - 0.5).clamp(0.0, (w - 1) as f64);
        let gv = (v - 0.5).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (gu.floor() as usize, gv.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fu, fv) = ((gu - x0 as f64) as f32, (gv - y0 as f64) as f32);
        mask[(y0, x0)] * (1.0 - fu) * (1.0 - fv)
            + mask[(y0, x1)] * fu * (1.0 - fv)
            + mask[(y1, x0)] * (1.0 - fu) * fv
            + mask[(y1, x1)] * fu * fv
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::primitives::icosphere;

    #[test]
    fn sphere_occludes_cube_meets_the_overlap_target() {
        let spec = SceneSpec::sphere_occludes_cube();
        for seed in 0..6u64 {
            let rec = generate_scene(seed, &spec).unwrap();
            assert_eq!(rec.instances.len(), 2);
            assert_eq!(rec.instances[0].category, Category::Sphere);
            assert_eq!(rec.instances[1].category, Category::Box);
            let pair = rec
                .occlusion
                .iter()
                .find(|p| p.front == 0 && p.rear == 1)
                .expect("target pair recorded");
            assert!(pair.fraction >= 0.3, "overlap {} below target", pair.fraction);
        }
    }

    #[test]
    fn modal_masks_never_exceed_amodal_masks() {
        let rec = generate_scene(11, &SceneSpec::sphere_occludes_cube()).unwrap();
        for inst in &rec.instances {
            let am = inst.amodal.as_ref().unwrap();
            for (m, a) in inst.modal.iter().zip(am.iter()) {
                assert!(m <= a, "modal pixel outside amodal mask");
            }
        }
    }

    #[test]
    fn boxes_bound_the_amodal_silhouette_tightly() {
        let rec = generate_scene(3, &SceneSpec::sphere_occludes_cube()).unwrap();
        for inst in &rec.instances {
            let am = inst.amodal.as_ref().unwrap();
            let mut u_lo = f64::INFINITY;
            let mut u_hi = f64::NEG_INFINITY;
            let mut v_lo = f64::INFINITY;
            let mut v_hi = f64::NEG_INFINITY;
            for ((y, x), &m) in am.indexed_iter() {
                if m > 0.0 {
                    u_lo = u_lo.min(x as f64 + 0.5);
                    u_hi = u_hi.max(x as f64 + 0.5);
                    v_lo = v_lo.min(y as f64 + 0.5);
                    v_hi = v_hi.max(y as f64 + 0.5);
                }
            }
            // Covered pixel centers lie strictly inside the exact bounds,
            // and reach within 2 px of every edge.
            assert!(u_lo >= inst.bbox.x0 && u_hi <= inst.bbox.x1);
            assert!(v_lo >= inst.bbox.y0 && v_hi <= inst.bbox.y1);
            assert!(u_lo - inst.bbox.x0 < 2.0 && inst.bbox.x1 - u_hi < 2.0);
            assert!(v_lo - inst.bbox.y0 < 2.0 && inst.bbox.y1 - v_hi < 2.0);
        }
    }

    #[test]
    fn composite_agrees_with_per_item_depth_buffers() {
        let rec = generate_scene(5, &SceneSpec::sphere_occludes_cube()).unwrap();
        let posed: Vec<TriMesh<f64>> = rec
            .instances
            .iter()
            .map(|i| i.mesh.map_vertices(|v| i.pose.canonical_to_camera(v)))
            .collect();
        let mut items = vec![DrawItem { mesh: &rec.room.mesh, id: ID_ROOM, albedo: ROOM_ALBEDO }];
        for (i, m) in posed.iter().enumerate() {
            items.push(DrawItem { mesh: m, id: i as u32, albedo: [1.0; 3] });
        }
        let full = rasterize(&rec.camera, &items, NEAR_PLANE);
        let alone: Vec<RasterOutput> = items
            .iter()
            .map(|it| {
                rasterize(
                    &rec.camera,
                    &[DrawItem { mesh: it.mesh, id: it.id, albedo: it.albedo }],
                    NEAR_PLANE,
                )
            })
            .collect();
        for y in 0..rec.camera.height as usize {
            for x in 0..rec.camera.width as usize {
                let (mut best, mut best_id) = (f64::INFINITY, ID_NONE);
                for a in &alone {
                    if a.depth[(y, x)] < best {
                        best = a.depth[(y, x)];
                        best_id = a.ids[(y, x)];
                    }
                }
                assert_ne!(full.ids[(y, x)], ID_NONE, "camera inside a closed room");
                assert_eq!(full.ids[(y, x)], best_id, "front item wins pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::sphere_occludes_cube();
        let a = generate_scene(42, &spec).unwrap();
        let b = generate_scene(42, &spec).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.room.mesh.vertices, b.room.mesh.vertices);
        for (x, y) in a.instances.iter().zip(&b.instances) {
            assert_eq!(x.pose.center, y.pose.center);
            assert_eq!(x.pose.yaw, y.pose.yaw);
            assert_eq!(x.mesh.vertices, y.mesh.vertices);
            assert_eq!(x.amodal, y.amodal);
            assert_eq!(x.modal, y.modal);
            assert_eq!(x.bbox.x0, y.bbox.x0);
        }
    }

    #[test]
    fn empty_spec_yields_a_background_only_scene() {
        let rec = generate_scene(9, &SceneSpec::background_rooms()).unwrap();
        assert!(rec.instances.is_empty());
        assert!(rec.room.has_alcove);
        let shaded = render(&rec, RenderMode::Shaded);
        assert_eq!(shaded, rec.image);
        let sil = render(&rec, RenderMode::Silhouette);
        assert!(sil.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn amodal_render_contains_the_modal_mask() {
        let rec = generate_scene(17, &SceneSpec::sphere_occludes_cube()).unwrap();
        for (i, inst) in rec.instances.iter().enumerate() {
            let img = render(&rec, RenderMode::Amodal(i as u32));
            for ((y, x), &m) in inst.modal.indexed_iter() {
                if m > 0.5 {
                    assert!(img[(0, y, x)] > 0.5, "amodal must cover visible pixel");
                }
            }
        }
        let empty = render(&rec, RenderMode::Amodal(99));
        assert!(empty.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn silhouette_area_of_a_centered_sphere_matches_the_disk() {
        // Hand-built record: one finely tessellated sphere dead ahead at
        // r << Z (the disk-area model ignores the perspective bulge of a
        // sphere's silhouette, which grows as (r/Z)^2) on a 256px image so
        // pixel quantization stays in the noise.
        let spec = SceneSpec {
            categories: Vec::new(),
            occlusion: None,
            room: RoomSpec {
                half_width: (3.0, 3.0),
                half_height: (1.7, 1.7),
                depth: (6.0, 6.0),
                alcove_probability: 0.0,
                ..RoomSpec::default()
            },
            ..SceneSpec::default()
        }
        .paper_scale();
        let mut rec = generate_scene(1, &spec).unwrap();
        let r = 0.6;
        let z = 4.0;
        rec.instances.push(SceneInstance {
            mesh: icosphere(4),
            pose: InstancePose::new([0.0, 0.0, z], [r, r, r], 0.0, Category::Sphere.id()),
            category: Category::Sphere,
            bbox: Box2D::new(0.0, 0.0, 256.0, 256.0, 256, 256),
            amodal: None,
            modal: Array2::zeros((256, 256)),
        });
        let sil = render(&rec, RenderMode::Silhouette);
        let count: f64 = sil.iter().map(|&v| v as f64).sum::<f64>() / 3.0;
        let expected = std::f64::consts::PI * (rec.camera.fx * r / z).powi(2);
        let rel = (count - expected).abs() / expected;
        assert!(rel < 0.05, "disk area off by {:.1}% ({} vs {})", rel * 100.0, count, expected);
    }

    #[test]
    fn infeasible_specs_fail_with_placement_error() {
        let spec = SceneSpec {
            scale_range: (2.5, 2.6),
            max_attempts: 40,
            ..SceneSpec::sphere_occludes_cube()
        };
        match generate_scene(0, &spec) {
            Err(Error::PlacementFailed { .. }) => {}
            other => panic!("expected placement failure, got {other:?}"),
        }
    }

    #[test]
    fn roi_mask_targets_follow_the_box_quadrants() {
        // Mask covering the left half of the box region.
        let mut mask = Array2::<f32>::zeros((64, 64));
        for y in 16..48 {
            for x in 8..24 {
                mask[(y, x)] = 1.0;
            }
        }
        let bbox = Box2D::new(8.0, 16.0, 40.0, 48.0, 64, 64);
        let grid = mask_to_roi_grid(&mask, &bbox, 16);
        // Left columns solid, right columns empty.
        assert!(grid[(8, 2)] > 0.95);
        assert!(grid[(8, 13)] < 0.05);
        assert!(grid.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
