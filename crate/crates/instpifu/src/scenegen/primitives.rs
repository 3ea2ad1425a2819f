//! The 9 primitive object categories: canonical watertight meshes plus
//! analytic membership tests used as ground-truth oracles in tests.
//!
//! Every generated mesh is canonical by construction: AABB centred at the
//! origin, longest half-extent 1 (up to tessellation slack on curved
//! shapes), outward-facing faces.

use crate::geometry::V3;
use crate::mesh::TriMesh;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Object category vocabulary. Discriminants are the category ids used for
/// one-hot codes and per-category metric rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Sphere = 0,
    Box = 1,
    Cylinder = 2,
    Torus = 3,
    Capsule = 4,
    LPrism = 5,
    Wedge = 6,
    Ellipsoid = 7,
    Tube = 8,
}

impl Category {
    pub const ALL: [Category; 9] = [
        Category::Sphere,
        Category::Box,
        Category::Cylinder,
        Category::Torus,
        Category::Capsule,
        Category::LPrism,
        Category::Wedge,
        Category::Ellipsoid,
        Category::Tube,
    ];

    pub const COUNT: usize = 9;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Category> {
        Category::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Sphere => "sphere",
            Category::Box => "box",
            Category::Cylinder => "cylinder",
            Category::Torus => "torus",
            Category::Capsule => "capsule",
            Category::LPrism => "l-prism",
            Category::Wedge => "wedge",
            Category::Ellipsoid => "ellipsoid",
            Category::Tube => "tube",
        }
    }

    pub fn from_name(name: &str) -> Option<Category> {
        Category::ALL.iter().copied().find(|c| c.name() == name)
    }

    /// Flat-shading albedo, chosen distinct per category.
    pub fn albedo(self) -> [f32; 3] {
        match self {
            Category::Sphere => [0.90, 0.30, 0.25],
            Category::Box => [0.25, 0.55, 0.90],
            Category::Cylinder => [0.30, 0.80, 0.40],
            Category::Torus => [0.85, 0.70, 0.20],
            Category::Capsule => [0.70, 0.35, 0.80],
            Category::LPrism => [0.25, 0.75, 0.75],
            Category::Wedge => [0.90, 0.50, 0.15],
            Category::Ellipsoid => [0.55, 0.55, 0.95],
            Category::Tube => [0.60, 0.60, 0.30],
        }
    }
}

/// A concrete shape: category plus the parameters that vary per instance.
/// All parameter ranges keep the canonical AABB centred with longest
/// half-extent 1, so the category code alone never determines geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Icosphere of radius 1.
    Sphere { subdiv: u32 },
    /// Half-extents `(hx, hy, 1)`.
    Box { hx: f64, hy: f64 },
    /// Radius `r`, half-height 1, axis y.
    Cylinder { r: f64, seg: usize },
    /// Minor radius `r`, major radius `1 - r`, axis y.
    Torus { r: f64, seg_u: usize, seg_v: usize },
    /// Radius `r`, cylindrical half-height `1 - r`, axis y.
    Capsule { r: f64, seg: usize, rings: usize },
    /// `[-1,1]^2` cross-section with the `(+x, +y)` corner rectangle beyond
    /// `cut` removed, extruded to `|z| <= hz`.
    LPrism { cut: [f64; 2], hz: f64 },
    /// Right-triangle cross-section `x >= -1, y >= -1, x + y <= 0`,
    /// extruded to `|z| <= hz`.
    Wedge { hz: f64 },
    /// Semi-axes `(a, b, 1)`.
    Ellipsoid { a: f64, b: f64, subdiv: u32 },
    /// Annulus `ri <= sqrt(x^2+z^2) <= 1`, `|y| <= hy`, axis y.
    Tube { ri: f64, hy: f64, seg: usize },
}

impl Shape {
    pub fn category(&self) -> Category {
        match self {
            Shape::Sphere { .. } => Category::Sphere,
            Shape::Box { .. } => Category::Box,
            Shape::Cylinder { .. } => Category::Cylinder,
            Shape::Torus { .. } => Category::Torus,
            Shape::Capsule { .. } => Category::Capsule,
            Shape::LPrism { .. } => Category::LPrism,
            Shape::Wedge { .. } => Category::Wedge,
            Shape::Ellipsoid { .. } => Category::Ellipsoid,
            Shape::Tube { .. } => Category::Tube,
        }
    }

    /// Draws per-instance shape parameters at dataset tessellation quality.
    pub fn sample(category: Category, rng: &mut ChaCha8Rng) -> Shape {
        match category {
            Category::Sphere => Shape::Sphere { subdiv: 3 },
            Category::Box => Shape::Box {
                hx: rng.gen_range(0.35..1.0),
                hy: rng.gen_range(0.35..1.0),
            },
            Category::Cylinder => Shape::Cylinder {
                r: rng.gen_range(0.35..1.0),
                seg: 32,
            },
            Category::Torus => Shape::Torus {
                r: rng.gen_range(0.15..0.35),
                seg_u: 28,
                seg_v: 14,
            },
            Category::Capsule => Shape::Capsule {
                r: rng.gen_range(0.35..0.75),
                seg: 24,
                rings: 6,
            },
            Category::LPrism => Shape::LPrism {
                cut: [rng.gen_range(-0.2..0.5), rng.gen_range(-0.2..0.5)],
                hz: rng.gen_range(0.4..1.0),
            },
            Category::Wedge => Shape::Wedge {
                hz: rng.gen_range(0.4..1.0),
            },
            Category::Ellipsoid => Shape::Ellipsoid {
                a: rng.gen_range(0.45..1.0),
                b: rng.gen_range(0.45..1.0),
                subdiv: 3,
            },
            Category::Tube => Shape::Tube {
                ri: rng.gen_range(0.4..0.7),
                hy: rng.gen_range(0.35..0.9),
                seg: 28,
            },
        }
    }

    /// Canonical mesh for the shape, watertight and outward-facing.
    pub fn mesh(&self) -> TriMesh<f64> {
        let m = match *self {
            Shape::Sphere { subdiv } => icosphere(subdiv),
            Shape::Box { hx, hy } => TriMesh::cuboid(hx, hy, 1.0),
            Shape::Cylinder { r, seg } => {
                lathe_open(&[(0.0, -1.0), (r, -1.0), (r, 1.0), (0.0, 1.0)], seg)
            }
            Shape::Torus { r, seg_u, seg_v } => {
                let big = 1.0 - r;
                let profile: Vec<(f64, f64)> = (0..seg_v)
                    .map(|j| {
                        let a = 2.0 * std::f64::consts::PI * j as f64 / seg_v as f64;
                        (big + r * a.cos(), r * a.sin())
                    })
                    .collect();
                lathe_closed(&profile, seg_u)
            }
            Shape::Capsule { r, seg, rings } => {
                let h = 1.0 - r;
                let mut profile = vec![(0.0, -1.0)];
                for k in 1..=rings {
                    let a = -std::f64::consts::FRAC_PI_2
                        + std::f64::consts::FRAC_PI_2 * k as f64 / rings as f64;
                    profile.push((r * a.cos(), -h + r * a.sin()));
                }
                for k in 0..rings {
                    let a = std::f64::consts::FRAC_PI_2 * k as f64 / rings as f64;
                    profile.push((r * a.cos(), h + r * a.sin()));
                }
                profile.push((0.0, 1.0));
                lathe_open(&profile, seg)
            }
            Shape::LPrism { cut, hz } => {
                let [cx, cy] = cut;
                let poly = [
                    [-1.0, -1.0],
                    [1.0, -1.0],
                    [1.0, cy],
                    [cx, cy],
                    [cx, 1.0],
                    [-1.0, 1.0],
                ];
                extrude_polygon(&poly, hz)
            }
            Shape::Wedge { hz } => {
                extrude_polygon(&[[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]], hz)
            }
            Shape::Ellipsoid { a, b, subdiv } => icosphere(subdiv).scaled([a, b, 1.0]),
            Shape::Tube { ri, hy, seg } => lathe_closed(
                &[(ri, -hy), (1.0, -hy), (1.0, hy), (ri, hy)],
                seg,
            ),
        };
        ensure_outward(m)
    }

    /// Analytic membership in the canonical frame (the smooth solid, not
    /// the tessellation).
    pub fn contains(&self, p: V3<f64>) -> bool {
        let [x, y, z] = p;
        match *self {
            Shape::Sphere { .. } => x * x + y * y + z * z <= 1.0,
            Shape::Box { hx, hy } => x.abs() <= hx && y.abs() <= hy && z.abs() <= 1.0,
            Shape::Cylinder { r, .. } => y.abs() <= 1.0 && x * x + z * z <= r * r,
            Shape::Torus { r, .. } => {
                let big = 1.0 - r;
                let q = (x * x + z * z).sqrt() - big;
                q * q + y * y <= r * r
            }
            Shape::Capsule { r, .. } => {
                let h = 1.0 - r;
                let dy = (y.abs() - h).max(0.0);
                x * x + z * z + dy * dy <= r * r
            }
            Shape::LPrism { cut, hz } => {
                x.abs() <= 1.0
                    && y.abs() <= 1.0
                    && z.abs() <= hz
                    && !(x > cut[0] && y > cut[1])
            }
            Shape::Wedge { hz } => x >= -1.0 && y >= -1.0 && x + y <= 0.0 && z.abs() <= hz,
            Shape::Ellipsoid { a, b, .. } => {
                let (u, v) = (x / a, y / b);
                u * u + v * v + z * z <= 1.0
            }
            Shape::Tube { ri, hy, .. } => {
                let r2 = x * x + z * z;
                y.abs() <= hy && r2 >= ri * ri && r2 <= 1.0
            }
        }
    }

    /// Exact distance to the analytic boundary, where a closed form is
    /// simple (sphere, box, cylinder). Used to exclude the tessellation
    /// band when checking the parity oracle against analytic membership.
    pub fn surface_distance(&self, p: V3<f64>) -> Option<f64> {
        let [x, y, z] = p;
        match *self {
            Shape::Sphere { .. } => Some(((x * x + y * y + z * z).sqrt() - 1.0).abs()),
            Shape::Box { hx, hy } => {
                let q = [x.abs() - hx, y.abs() - hy, z.abs() - 1.0];
                let outside =
                    (q[0].max(0.0).powi(2) + q[1].max(0.0).powi(2) + q[2].max(0.0).powi(2))
                        .sqrt();
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                Some((outside + inside).abs())
            }
            Shape::Cylinder { r, .. } => {
                let dr = (x * x + z * z).sqrt() - r;
                let dy = y.abs() - 1.0;
                let sd = if dr > 0.0 || dy > 0.0 {
                    (dr.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt()
                } else {
                    dr.max(dy)
                };
                Some(sd.abs())
            }
            _ => None,
        }
    }

    /// Upper bound on the deviation between the tessellated surface and the
    /// analytic boundary (sagitta of the largest facet). Zero for exact
    /// polyhedra.
    pub fn tessellation_error(&self) -> f64 {
        match *self {
            Shape::Sphere { subdiv } | Shape::Ellipsoid { subdiv, .. } => {
                // Icosahedron edge arc is about 1.107 rad, halved per level.
                let arc = 1.107 / (1u32 << subdiv) as f64;
                arc * arc / 8.0 * 1.001 + 1e-9
            }
            Shape::Box { .. } | Shape::LPrism { .. } | Shape::Wedge { .. } => 0.0,
            Shape::Cylinder { seg, .. } | Shape::Tube { seg, .. } => {
                sagitta(1.0, seg)
            }
            Shape::Torus { r, seg_u, seg_v } => sagitta(1.0 - r + r, seg_u) + sagitta(r, seg_v),
            Shape::Capsule { r, seg, rings } => {
                let ring_arc = std::f64::consts::FRAC_PI_2 / rings as f64;
                sagitta(r, seg).max(r * ring_arc * ring_arc / 8.0) + 1e-9
            }
        }
    }
}

/// Chord sagitta of a circle of radius `r` split into `seg` segments.
fn sagitta(r: f64, seg: usize) -> f64 {
    let half = std::f64::consts::PI / seg as f64;
    r * (1.0 - half.cos()) * 1.001 + 1e-9
}

/// Flips the mesh if its signed volume is negative, so a coherently wound
/// closed surface always ends up outward-facing.
fn ensure_outward(m: TriMesh<f64>) -> TriMesh<f64> {
    if m.signed_volume() < 0.0 {
        m.flipped()
    } else {
        m
    }
}

/// Unit icosphere: icosahedron subdivided `subdiv` times, vertices projected
/// to the unit sphere.
pub fn icosphere(subdiv: u32) -> TriMesh<f64> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let inv = 1.0 / (1.0 + phi * phi).sqrt();
    let mut vertices: Vec<V3<f64>> = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ]
    .iter()
    .map(|v| [v[0] * inv, v[1] * inv, v[2] * inv])
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdiv {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let mut mid = |u: usize, v: usize, vertices: &mut Vec<V3<f64>>| -> usize {
                let key = (u.min(v), u.max(v));
                *midpoints.entry(key).or_insert_with(|| {
                    let p = [
                        (vertices[u][0] + vertices[v][0]) * 0.5,
                        (vertices[u][1] + vertices[v][1]) * 0.5,
                        (vertices[u][2] + vertices[v][2]) * 0.5,
                    ];
                    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                    vertices.push([p[0] / n, p[1] / n, p[2] / n]);
                    vertices.len() - 1
                })
            };
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    TriMesh { vertices, faces }
}

/// Surface of revolution around the y axis from an open profile
/// `(radius, y)`; the first and last profile points must have radius 0
/// (poles), all interior radii must be positive.
pub fn lathe_open(profile: &[(f64, f64)], seg: usize) -> TriMesh<f64> {
    assert!(profile.len() >= 3 && seg >= 3);
    assert!(profile[0].0 == 0.0 && profile[profile.len() - 1].0 == 0.0);
    let inner = &profile[1..profile.len() - 1];
    assert!(inner.iter().all(|&(r, _)| r > 0.0));
    let mut vertices: Vec<V3<f64>> = Vec::new();
    let south = {
        vertices.push([0.0, profile[0].1, 0.0]);
        0usize
    };
    let ring0 = vertices.len();
    for &(r, y) in inner {
        for i in 0..seg {
            let a = 2.0 * std::f64::consts::PI * i as f64 / seg as f64;
            vertices.push([r * a.cos(), y, r * a.sin()]);
        }
    }
    let north = {
        vertices.push([0.0, profile[profile.len() - 1].1, 0.0]);
        vertices.len() - 1
    };
    let ring = |k: usize, i: usize| ring0 + k * seg + (i % seg);
    let mut faces = Vec::new();
    for i in 0..seg {
        faces.push([south, ring(0, i + 1), ring(0, i)]);
    }
    for k in 0..inner.len() - 1 {
        for i in 0..seg {
            let (a, b) = (ring(k, i), ring(k, i + 1));
            let (c, d) = (ring(k + 1, i + 1), ring(k + 1, i));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    let last = inner.len() - 1;
    for i in 0..seg {
        faces.push([north, ring(last, i), ring(last, i + 1)]);
    }
    TriMesh { vertices, faces }
}

/// Surface of revolution around the y axis from a closed profile loop
/// (torus topology). All radii must be positive.
pub fn lathe_closed(profile: &[(f64, f64)], seg: usize) -> TriMesh<f64> {
    assert!(profile.len() >= 3 && seg >= 3);
    assert!(profile.iter().all(|&(r, _)| r > 0.0));
    let m = profile.len();
    let mut vertices: Vec<V3<f64>> = Vec::with_capacity(m * seg);
    for &(r, y) in profile {
        for i in 0..seg {
            let a = 2.0 * std::f64::consts::PI * i as f64 / seg as f64;
            vertices.push([r * a.cos(), y, r * a.sin()]);
        }
    }
    let at = |k: usize, i: usize| (k % m) * seg + (i % seg);
    let mut faces = Vec::with_capacity(m * seg * 2);
    for k in 0..m {
        for i in 0..seg {
            let (a, b) = (at(k, i), at(k, i + 1));
            let (c, d) = (at(k + 1, i + 1), at(k + 1, i));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    TriMesh { vertices, faces }
}

/// Signed area of a simple polygon (positive = counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        s += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    s * 0.5
}

fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn point_in_triangle(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let d1 = cross2(a, b, p);
    let d2 = cross2(b, c, p);
    let d3 = cross2(c, a, p);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// Ear-clipping triangulation of a simple counter-clockwise polygon
/// (handles reflex vertices, e.g. L-shapes and alcove bumps).
pub fn triangulate_polygon(poly: &[[f64; 2]]) -> Vec<[usize; 3]> {
    let n = poly.len();
    assert!(n >= 3, "polygon needs at least 3 vertices");
    assert!(
        polygon_area(poly) > 0.0,
        "polygon must be counter-clockwise"
    );
    let scale = polygon_area(poly).abs().sqrt();
    let eps = 1e-12 * scale * scale;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n - 2);
    let mut guard = 0usize;
    while idx.len() > 3 {
        let m = idx.len();
        let mut clipped = false;
        for k in 0..m {
            let (ip, ic, in_) = (idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]);
            let (a, b, c) = (poly[ip], poly[ic], poly[in_]);
            if cross2(a, b, c) <= eps {
                continue; // reflex or degenerate corner
            }
            let blocked = idx.iter().any(|&o| {
                o != ip && o != ic && o != in_ && point_in_triangle(poly[o], a, b, c)
            });
            if !blocked {
                out.push([ip, ic, in_]);
                idx.remove(k);
                clipped = true;
                break;
            }
        }
        assert!(clipped, "no ear found; polygon is not simple");
        guard += 1;
        assert!(guard <= n * n, "ear clipping failed to terminate");
    }
    out.push([idx[0], idx[1], idx[2]]);
    out
}

/// Extrudes a counter-clockwise polygon along z to `|z| <= hz`, capped and
/// outward-facing.
pub fn extrude_polygon(poly: &[[f64; 2]], hz: f64) -> TriMesh<f64> {
    assert!(hz > 0.0);
    let n = poly.len();
    let tris = triangulate_polygon(poly);
    let mut vertices = Vec::with_capacity(2 * n);
    for &[x, y] in poly {
        vertices.push([x, y, -hz]);
    }
    for &[x, y] in poly {
        vertices.push([x, y, hz]);
    }
    let mut faces = Vec::with_capacity(4 * n);
    for &[a, b, c] in &tris {
        faces.push([a, c, b]); // bottom cap, -z outward
        faces.push([n + a, n + b, n + c]); // top cap, +z outward
    }
    for i in 0..n {
        let j = (i + 1) % n;
        faces.push([i, j, n + j]);
        faces.push([i, n + j, n + i]);
    }
    TriMesh { vertices, faces }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::MeshOccupancy;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn sample_all_shapes(seed: u64) -> Vec<Shape> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Category::ALL
            .iter()
            .map(|&c| Shape::sample(c, &mut rng))
            .collect()
    }

    #[test]
    fn category_ids_and_names_round_trip() {
        for (i, &c) in Category::ALL.iter().enumerate() {
            assert_eq!(c.id(), i);
            assert_eq!(Category::from_id(i), Some(c));
            assert_eq!(Category::from_name(c.name()), Some(c));
        }
        assert_eq!(Category::from_id(9), None);
    }

    #[test]
    fn all_shapes_are_watertight_canonical_and_outward() {
        for shape in sample_all_shapes(41) {
            let m = shape.mesh();
            m.check_watertight()
                .unwrap_or_else(|e| panic!("{:?}: {e}", shape.category()));
            assert!(
                m.signed_volume() > 0.0,
                "{:?} not outward",
                shape.category()
            );
            let (lo, hi) = m.bounds().unwrap();
            let mut longest = 0.0_f64;
            for k in 0..3 {
                assert!(hi[k] <= 1.0 + 1e-9 && lo[k] >= -1.0 - 1e-9);
                // AABB centred at the origin.
                assert_abs_diff_eq!(hi[k] + lo[k], 0.0, epsilon = 1e-9);
                longest = longest.max(hi[k]);
            }
            assert!(
                longest > 0.98,
                "{:?} longest half-extent {longest}",
                shape.category()
            );
        }
    }

    #[test]
    fn shape_sampling_is_deterministic() {
        let a = sample_all_shapes(7);
        let b = sample_all_shapes(7);
        assert_eq!(a, b);
    }

    #[test]
    fn icosphere_volume_and_area_approach_the_sphere() {
        let m = icosphere(4);
        assert_eq!(m.faces.len(), 20 * 4usize.pow(4));
        m.check_watertight().unwrap();
        let v = m.signed_volume();
        let sphere_v = 4.0 / 3.0 * std::f64::consts::PI;
        assert!(v > 0.995 * sphere_v && v < sphere_v, "volume {v}");
        let a = m.area();
        let sphere_a = 4.0 * std::f64::consts::PI;
        assert!(a > 0.995 * sphere_a && a < sphere_a, "area {a}");
    }

    #[test]
    fn parity_oracle_matches_analytic_sphere_membership() {
        let shape = Shape::Sphere { subdiv: 4 };
        let occ = MeshOccupancy::build(&shape.mesh()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut checked = 0usize;
        let mut agree = 0usize;
        for _ in 0..10_000 {
            let p: V3<f64> = [
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
            ];
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if (r - 1.0).abs() <= 0.01 {
                continue;
            }
            checked += 1;
            if occ.contains(p, 1) == (r < 1.0) {
                agree += 1;
            }
        }
        assert!(
            agree as f64 >= 0.999 * checked as f64,
            "{agree}/{checked} agreements"
        );
    }

    #[test]
    fn parity_oracle_matches_analytic_membership_outside_tessellation_band() {
        // Shapes with an exact distance: no disagreement allowed outside
        // the declared tessellation band.
        let exact = [
            Shape::Sphere { subdiv: 3 },
            Shape::Box { hx: 0.6, hy: 0.8 },
            Shape::Cylinder { r: 0.7, seg: 48 },
        ];
        for shape in exact {
            let band = shape.tessellation_error().max(1e-9);
            let occ = MeshOccupancy::build(&shape.mesh()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut checked = 0usize;
            for _ in 0..3000 {
                let p: V3<f64> = [
                    rng.gen_range(-1.2..1.2),
                    rng.gen_range(-1.2..1.2),
                    rng.gen_range(-1.2..1.2),
                ];
                if shape.surface_distance(p).unwrap() <= band {
                    continue;
                }
                checked += 1;
                assert_eq!(
                    occ.contains(p, 5),
                    shape.contains(p),
                    "{:?} at {p:?}",
                    shape.category()
                );
            }
            assert!(checked > 2000, "band excluded too many points");
        }
    }

    #[test]
    fn parity_oracle_close_to_analytic_for_curved_shapes() {
        // Tessellated approximations may disagree only inside a thin
        // surface band; bound the overall disagreement rate.
        for shape in sample_all_shapes(17) {
            let occ = MeshOccupancy::build(&shape.mesh()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let mut disagree = 0usize;
            let n = 2000;
            for _ in 0..n {
                let p: V3<f64> = [
                    rng.gen_range(-1.1..1.1),
                    rng.gen_range(-1.1..1.1),
                    rng.gen_range(-1.1..1.1),
                ];
                if occ.contains(p, 2) != shape.contains(p) {
                    disagree += 1;
                }
            }
            assert!(
                disagree as f64 <= 0.05 * n as f64,
                "{:?}: {disagree}/{n} disagreements",
                shape.category()
            );
        }
    }

    #[test]
    fn mesh_volume_close_to_analytic_volume() {
        // Monte-Carlo analytic volume vs mesh signed volume, loose bound.
        for shape in sample_all_shapes(3) {
            let mesh_v = shape.mesh().signed_volume();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let n = 20_000;
            let mut inside = 0usize;
            for _ in 0..n {
                let p: V3<f64> = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                if shape.contains(p) {
                    inside += 1;
                }
            }
            let analytic_v = 8.0 * inside as f64 / n as f64;
            assert!(
                (mesh_v - analytic_v).abs() <= 0.05 * analytic_v.max(0.1),
                "{:?}: mesh {mesh_v}, analytic {analytic_v}",
                shape.category()
            );
        }
    }

    #[test]
    fn l_polygon_triangulation_preserves_area() {
        let poly = [
            [-1.0, -1.0],
            [1.0, -1.0],
            [1.0, 0.2],
            [0.3, 0.2],
            [0.3, 1.0],
            [-1.0, 1.0],
        ];
        let tris = triangulate_polygon(&poly);
        assert_eq!(tris.len(), poly.len() - 2);
        let mut area = 0.0;
        for &[a, b, c] in &tris {
            area += cross2(poly[a], poly[b], poly[c]) * 0.5;
        }
        assert_abs_diff_eq!(area, polygon_area(&poly), epsilon = 1e-12);
    }

    #[test]
    fn bumpy_polygon_extrudes_watertight() {
        // Square with a semicircular bump: the alcove-room cross-section.
        let mut poly: Vec<[f64; 2]> = vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0]];
        // Bump outward from the top edge between x = 0.5 and x = -0.5.
        for k in 0..=16 {
            let a = std::f64::consts::PI * k as f64 / 16.0;
            poly.push([0.5 * a.cos(), 1.0 + 0.5 * a.sin()]);
        }
        poly.push([-1.0, 1.0]);
        let m = extrude_polygon(&poly, 0.8);
        m.check_watertight().unwrap();
        assert!(m.signed_volume() > 0.0);
        let expected = polygon_area(&poly) * 1.6;
        assert_abs_diff_eq!(m.signed_volume(), expected, epsilon = 1e-9);
    }
}
