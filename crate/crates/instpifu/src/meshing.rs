//! Marching cubes over scalar occupancy fields.
//!
//! The 256-entry case table is generated at startup rather than transcribed:
//! for every corner-occupancy pattern, marching squares runs on each of the
//! six cube faces and the resulting directed segments are sewn into closed
//! loops and fan-triangulated. Face contours depend only on the face's four
//! corner labels, so adjacent cells always agree on their shared face and
//! the output is watertight whenever the level set stays inside the grid.
//!
//! Ambiguity rule (fixed, value-independent): on a face whose diagonal
//! corners are inside, the inside corners are kept *separated* (two cutting
//! segments, never a connecting band). A corner is inside iff
//! `value > level`; ties count as outside.

use crate::geometry::V3;
use crate::mesh::TriMesh;
use crate::{Error, Result};
use rayon::prelude::*;
use std::collections::HashMap;
use std::sync::OnceLock;

/// Cube corner `c` sits at offset `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
/// The 12 cube edges as (corner, corner) pairs; the second corner differs
/// from the first along exactly one axis.
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Face corner cycles, counter-clockwise as seen from outside the cube.
const FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2], // -x
    [1, 3, 7, 5], // +x
    [0, 1, 5, 4], // -y
    [2, 6, 7, 3], // +y
    [0, 2, 3, 1], // -z
    [4, 5, 7, 6], // +z
];

fn edge_id(a: usize, b: usize) -> u8 {
    let key = (a.min(b), a.max(b));
    EDGES
        .iter()
        .position(|&(u, v)| (u, v) == key)
        .expect("corner pair is a cube edge") as u8
}

/// Directed contour segments of one face (tail edge -> head edge), with the
/// inside region on the left when viewed from outside the cube.
fn face_segments(cycle: [usize; 4], mask: u8, out: &mut Vec<(u8, u8)>) {
    let inside = |k: usize| mask >> cycle[k & 3] & 1 == 1;
    let e = |k: usize| edge_id(cycle[k & 3], cycle[(k + 1) & 3]);
    let bits: u8 = (0..4).map(|k| (inside(k) as u8) << k).sum();
    match bits.count_ones() {
        0 | 4 => {}
        1 => {
            let i = bits.trailing_zeros() as usize;
            out.push((e(i), e(i + 3)));
        }
        3 => {
            let j = (!bits & 0xF).trailing_zeros() as usize;
            out.push((e(j + 3), e(j)));
        }
        2 => {
            if bits == 0b0011 || bits == 0b0110 || bits == 0b1100 || bits == 0b1001 {
                // Adjacent pair starting at i.
                let i = match bits {
                    0b0011 => 0,
                    0b0110 => 1,
                    0b1100 => 2,
                    _ => 3,
                };
                out.push((e(i + 1), e(i + 3)));
            } else {
                // Diagonal pair: keep the inside corners separated.
                let i = if bits == 0b0101 { 0 } else { 1 };
                out.push((e(i), e(i + 3)));
                out.push((e(i + 2), e(i + 1)));
            }
        }
        _ => unreachable!(),
    }
}

/// Closed contour loops (as edge-id cycles) for each of the 256 occupancy
/// patterns. Loops are triangulated at extraction time: length-3 loops
/// directly, longer loops from a cell-local centroid vertex. A centroid
/// (rather than a fan diagonal) is required for correctness: two adjacent
/// cells can otherwise emit the *same* diagonal between two shared-face
/// vertices, producing a non-manifold edge.
fn build_table() -> Vec<Vec<Vec<u8>>> {
    (0..256u16)
        .map(|mask| {
            let mask = mask as u8;
            let mut segs: Vec<(u8, u8)> = Vec::new();
            for cycle in FACES {
                face_segments(cycle, mask, &mut segs);
            }
            let mut next = [u8::MAX; 12];
            let mut head_seen = [false; 12];
            for &(tail, head) in &segs {
                assert!(
                    next[tail as usize] == u8::MAX && !head_seen[head as usize],
                    "case {mask:#010b}: crossing edge reused"
                );
                next[tail as usize] = head;
                head_seen[head as usize] = true;
            }
            let mut loops = Vec::new();
            let mut visited = [false; 12];
            for start in 0..12u8 {
                if next[start as usize] == u8::MAX || visited[start as usize] {
                    continue;
                }
                let mut loop_edges = vec![start];
                let mut cur = next[start as usize];
                visited[start as usize] = true;
                while cur != start {
                    assert!(
                        next[cur as usize] != u8::MAX && !visited[cur as usize],
                        "case {mask:#010b}: open contour"
                    );
                    visited[cur as usize] = true;
                    loop_edges.push(cur);
                    cur = next[cur as usize];
                }
                assert!(loop_edges.len() >= 3, "case {mask:#010b}: degenerate loop");
                loops.push(loop_edges);
            }
            loops
        })
        .collect()
}

fn table() -> &'static [Vec<Vec<u8>>] {
    static TABLE: OnceLock<Vec<Vec<Vec<u8>>>> = OnceLock::new();
    TABLE.get_or_init(build_table)
}

/// Scalar field sampled at the vertices of a regular grid over an AABB.
/// `res` counts cells per axis, so values hold `(res+1)^3` entries in
/// x-fastest order.
#[derive(Debug, Clone)]
pub struct GridField {
    pub res: [usize; 3],
    pub lo: V3<f64>,
    pub hi: V3<f64>,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn vertex_counts(&self) -> [usize; 3] {
        [self.res[0] + 1, self.res[1] + 1, self.res[2] + 1]
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        let [nx, ny, _] = self.vertex_counts();
        self.values[(k * ny + j) * nx + i]
    }

    pub fn vertex_pos(&self, i: usize, j: usize, k: usize) -> V3<f64> {
        let t = |idx: usize, axis: usize| {
            self.lo[axis]
                + (self.hi[axis] - self.lo[axis]) * idx as f64 / self.res[axis] as f64
        };
        [t(i, 0), t(j, 1), t(k, 2)]
    }

    pub fn cell_size(&self) -> V3<f64> {
        [
            (self.hi[0] - self.lo[0]) / self.res[0] as f64,
            (self.hi[1] - self.lo[1]) / self.res[1] as f64,
            (self.hi[2] - self.lo[2]) / self.res[2] as f64,
        ]
    }

    /// Evaluates `f` at every grid vertex, parallel over z-slices. The
    /// result does not depend on the parallel schedule.
    pub fn evaluate(
        f: impl Fn(V3<f64>) -> f64 + Sync,
        res: [usize; 3],
        lo: V3<f64>,
        hi: V3<f64>,
    ) -> Result<GridField> {
        if res.iter().any(|&r| r == 0) {
            return Err(Error::Config("grid resolution must be positive".into()));
        }
        if (0..3).any(|a| !(hi[a] > lo[a])) {
            return Err(Error::Config(format!(
                "degenerate grid bounds lo={lo:?} hi={hi:?}"
            )));
        }
        let [nx, ny, nz] = [res[0] + 1, res[1] + 1, res[2] + 1];
        let probe = GridField {
            res,
            lo,
            hi,
            values: Vec::new(),
        };
        let values: Vec<f64> = (0..nz)
            .into_par_iter()
            .flat_map_iter(|k| {
                let probe = &probe;
                let f = &f;
                (0..ny).flat_map(move |j| {
                    (0..nx).map(move |i| f(probe.vertex_pos(i, j, k)))
                })
            })
            .collect();
        Ok(GridField {
            res,
            lo,
            hi,
            values,
        })
    }
}

/// Extracts the `level` isosurface as a triangle mesh with vertices linearly
/// interpolated along sign-change edges. Fails with [`Error::EmptySurface`]
/// when the field never crosses the level.
pub fn marching_cubes(grid: &GridField, level: f64) -> Result<TriMesh<f64>> {
    let table = table();
    let [nx, ny, _nz] = grid.vertex_counts();
    let mut vertices: Vec<V3<f64>> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    // Interpolated vertex per crossing grid edge, keyed by the edge's lower
    // vertex index and axis; shared across cells so the mesh is sewn.
    let mut edge_vertex: HashMap<(u32, u8), u32> = HashMap::new();
    let corner_offset = |c: usize| -> (usize, usize, usize) { (c & 1, c >> 1 & 1, c >> 2 & 1) };
    for k in 0..grid.res[2] {
        for j in 0..grid.res[1] {
            for i in 0..grid.res[0] {
                let mut vals = [0f64; 8];
                let mut mask = 0usize;
                for c in 0..8 {
                    let (dx, dy, dz) = corner_offset(c);
                    let v = grid.value(i + dx, j + dy, k + dz);
                    vals[c] = v;
                    if v > level {
                        mask |= 1 << c;
                    }
                }
                if mask == 0 || mask == 0xFF {
                    continue;
                }
                let mut cell_vertex = [u32::MAX; 12];
                for (eid, &(a, b)) in EDGES.iter().enumerate() {
                    let (va, vb) = (vals[a], vals[b]);
                    let (ia, ib) = (mask >> a & 1, mask >> b & 1);
                    if ia == ib {
                        continue;
                    }
                    let (ax, ay, az) = corner_offset(a);
                    let axis = match (
                        corner_offset(b).0 - ax,
                        corner_offset(b).1 - ay,
                        corner_offset(b).2 - az,
                    ) {
                        (1, 0, 0) => 0u8,
                        (0, 1, 0) => 1,
                        _ => 2,
                    };
                    let base = (((k + az) * ny + (j + ay)) * nx + (i + ax)) as u32;
                    let vid = *edge_vertex.entry((base, axis)).or_insert_with(|| {
                        let t = (level - va) / (vb - va);
                        let pa = grid.vertex_pos(i + ax, j + ay, k + az);
                        let (bx, by, bz) = corner_offset(b);
                        let pb = grid.vertex_pos(i + bx, j + by, k + bz);
                        vertices.push([
                            pa[0] + (pb[0] - pa[0]) * t,
                            pa[1] + (pb[1] - pa[1]) * t,
                            pa[2] + (pb[2] - pa[2]) * t,
                        ]);
                        (vertices.len() - 1) as u32
                    });
                    cell_vertex[eid] = vid;
                }
                for lp in &table[mask] {
                    // Contour loops run counterclockwise seen from inside, so
                    // emitted triangles reverse them to face outward.
                    if lp.len() == 3 {
                        faces.push([
                            cell_vertex[lp[0] as usize] as usize,
                            cell_vertex[lp[2] as usize] as usize,
                            cell_vertex[lp[1] as usize] as usize,
                        ]);
                        continue;
                    }
                    // Longer loops fan from a cell-local centroid: a fan
                    // diagonal between two shared-face vertices could
                    // coincide with a neighbor cell's diagonal and break
                    // manifoldness, while centroid spokes are private.
                    let mut cen = [0f64; 3];
                    for &e in lp {
                        let p = vertices[cell_vertex[e as usize] as usize];
                        for (c, x) in cen.iter_mut().zip(p) {
                            *c += x;
                        }
                    }
                    let inv = 1.0 / lp.len() as f64;
                    vertices.push(cen.map(|c| c * inv));
                    let cid = vertices.len() - 1;
                    for k in 0..lp.len() {
                        let a = cell_vertex[lp[(k + 1) % lp.len()] as usize] as usize;
                        let b = cell_vertex[lp[k] as usize] as usize;
                        faces.push([cid, a, b]);
                    }
                }
            }
        }
    }
    if faces.is_empty() {
        return Err(Error::EmptySurface);
    }
    Ok(TriMesh { vertices, faces })
}

/// Evaluates the field densely and extracts the isosurface. `res` is cells
/// per axis and must be at least 8.
pub fn marching_cubes_field(
    f: impl Fn(V3<f64>) -> f64 + Sync,
    res: usize,
    lo: V3<f64>,
    hi: V3<f64>,
    level: f64,
) -> Result<TriMesh<f64>> {
    if res < 8 {
        return Err(Error::Config(format!(
            "marching cubes resolution must be >= 8, got {res}"
        )));
    }
    let grid = GridField::evaluate(f, [res, res, res], lo, hi)?;
    marching_cubes(&grid, level)
}

fn eval_chunked(
    f: &mut dyn FnMut(&[V3<f64>]) -> Result<Vec<f64>>,
    pts: &[V3<f64>],
) -> Result<Vec<f64>> {
    const CHUNK: usize = 16384;
    let mut out = Vec::with_capacity(pts.len());
    for c in pts.chunks(CHUNK) {
        let v = f(c)?;
        if v.len() != c.len() {
            return Err(Error::Shape(format!(
                "field returned {} values for {} points",
                v.len(),
                c.len()
            )));
        }
        out.extend(v);
    }
    Ok(out)
}

/// Two-level isosurface extraction through a batched field, for fields
/// whose per-point evaluation is expensive unless amortized over large
/// batches. A coarse lattice of `coarse` cells per axis finds the cells
/// whose corner values straddle `level`; those cells plus a one-cell
/// dilation are evaluated at the fine resolution `coarse * factor`, and
/// every other fine vertex is filled by trilinear interpolation of the
/// coarse values. Interpolation keeps same-side regions same-side, so the
/// extracted surface equals the dense fine extraction wherever the coarse
/// lattice sees the crossing; features thinner than a coarse cell can be
/// missed, which sets the floor on `coarse`.
pub fn marching_cubes_refined(
    f: &mut dyn FnMut(&[V3<f64>]) -> Result<Vec<f64>>,
    coarse: usize,
    factor: usize,
    lo: V3<f64>,
    hi: V3<f64>,
    level: f64,
) -> Result<TriMesh<f64>> {
    if coarse < 8 || factor == 0 {
        return Err(Error::Config(format!(
            "refined marching cubes needs coarse >= 8 and factor >= 1, got {coarse} x{factor}"
        )));
    }
    let pos = |n: usize, axis: usize, i: usize| {
        lo[axis] + (hi[axis] - lo[axis]) * i as f64 / n as f64
    };

    let nc = coarse + 1;
    let mut coarse_pts = Vec::with_capacity(nc * nc * nc);
    for k in 0..nc {
        for j in 0..nc {
            for i in 0..nc {
                coarse_pts.push([pos(coarse, 0, i), pos(coarse, 1, j), pos(coarse, 2, k)]);
            }
        }
    }
    let coarse_vals = eval_chunked(f, &coarse_pts)?;
    if factor == 1 {
        let grid = GridField {
            res: [coarse; 3],
            lo,
            hi,
            values: coarse_vals,
        };
        return marching_cubes(&grid, level);
    }

    let cat = |i: usize, j: usize, k: usize| (k * nc + j) * nc + i;
    let cell_at = |i: usize, j: usize, k: usize| (k * coarse + j) * coarse + i;
    let mut straddles = vec![false; coarse * coarse * coarse];
    for k in 0..coarse {
        for j in 0..coarse {
            for i in 0..coarse {
                let mut mn = f64::INFINITY;
                let mut mx = f64::NEG_INFINITY;
                for dk in 0..2 {
                    for dj in 0..2 {
                        for di in 0..2 {
                            let v = coarse_vals[cat(i + di, j + dj, k + dk)];
                            mn = mn.min(v);
                            mx = mx.max(v);
                        }
                    }
                }
                if mn <= level && level <= mx {
                    straddles[cell_at(i, j, k)] = true;
                }
            }
        }
    }
    let mut marked = straddles.clone();
    for k in 0..coarse {
        for j in 0..coarse {
            for i in 0..coarse {
                if !straddles[cell_at(i, j, k)] {
                    continue;
                }
                for dk in k.saturating_sub(1)..(k + 2).min(coarse) {
                    for dj in j.saturating_sub(1)..(j + 2).min(coarse) {
                        for di in i.saturating_sub(1)..(i + 2).min(coarse) {
                            marked[cell_at(di, dj, dk)] = true;
                        }
                    }
                }
            }
        }
    }

    let res = coarse * factor;
    let nf = res + 1;
    let fat = |i: usize, j: usize, k: usize| (k * nf + j) * nf + i;
    let mut needed = vec![false; nf * nf * nf];
    for k in 0..coarse {
        for j in 0..coarse {
            for i in 0..coarse {
                if !marked[cell_at(i, j, k)] {
                    continue;
                }
                for dk in 0..=factor {
                    for dj in 0..=factor {
                        for di in 0..=factor {
                            needed[fat(i * factor + di, j * factor + dj, k * factor + dk)] =
                                true;
                        }
                    }
                }
            }
        }
    }

    let mut fine_pts = Vec::new();
    let mut fine_idx = Vec::new();
    for k in 0..nf {
        for j in 0..nf {
            for i in 0..nf {
                if needed[fat(i, j, k)] {
                    fine_pts.push([pos(res, 0, i), pos(res, 1, j), pos(res, 2, k)]);
                    fine_idx.push(fat(i, j, k));
                }
            }
        }
    }
    let fine_vals = eval_chunked(f, &fine_pts)?;

    let mut values = vec![0.0; nf * nf * nf];
    for (idx, v) in fine_idx.into_iter().zip(fine_vals) {
        values[idx] = v;
    }
    // Everything off the band: trilinear in the owning coarse cell.
    let frac = |i: usize| {
        let c = (i / factor).min(coarse - 1);
        (c, (i as f64 - (c * factor) as f64) / factor as f64)
    };
    for k in 0..nf {
        let (ck, w) = frac(k);
        for j in 0..nf {
            let (cj, v) = frac(j);
            for i in 0..nf {
                if needed[fat(i, j, k)] {
                    continue;
                }
                let (ci, u) = frac(i);
                let mut acc = 0.0;
                for dk in 0..2 {
                    let ww = if dk == 0 { 1.0 - w } else { w };
                    for dj in 0..2 {
                        let wv = if dj == 0 { 1.0 - v } else { v };
                        for di in 0..2 {
                            let wu = if di == 0 { 1.0 - u } else { u };
                            acc += ww * wv * wu * coarse_vals[cat(ci + di, cj + dj, ck + dk)];
                        }
                    }
                }
                values[fat(i, j, k)] = acc;
            }
        }
    }

    let grid = GridField {
        res: [res; 3],
        lo,
        hi,
        values,
    };
    marching_cubes(&grid, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::norm3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_covers_every_case_with_closed_loops() {
        let t = table();
        assert_eq!(t.len(), 256);
        assert!(t[0].is_empty() && t[255].is_empty());
        for case in t {
            for lp in case {
                assert!(lp.len() >= 3 && lp.len() <= 12);
            }
        }
        // Single-corner cases cut off one triangular loop.
        for c in 0..8 {
            assert_eq!(t[1usize << c].len(), 1);
            assert_eq!(t[1usize << c][0].len(), 3);
            assert_eq!(t[(!(1usize << c)) & 0xFF].len(), 1);
            assert_eq!(t[(!(1usize << c)) & 0xFF][0].len(), 3);
        }
    }

    #[test]
    fn linear_sphere_field_meshes_accurately() {
        let f = |p: V3<f64>| 0.5 + (0.4 - norm3(p));
        let m = marching_cubes_field(f, 64, [-1.0; 3], [1.0; 3], 0.5).unwrap();
        m.check_watertight().unwrap();
        assert!(m.signed_volume() > 0.0, "normals must face outward");
        let sphere_v = 4.0 / 3.0 * std::f64::consts::PI * 0.4f64.powi(3);
        let v = m.signed_volume();
        assert!(
            (v - sphere_v).abs() < 0.02 * sphere_v,
            "volume {v} vs {sphere_v}"
        );
        for p in &m.vertices {
            let r = norm3(*p);
            assert!((r - 0.4).abs() < 0.004, "vertex radius {r}");
        }
    }

    #[test]
    fn binary_sphere_field_keeps_vertices_within_two_voxels() {
        let f = |p: V3<f64>| if norm3(p) < 0.4 { 1.0 } else { 0.0 };
        let m = marching_cubes_field(f, 128, [-1.0; 3], [1.0; 3], 0.5).unwrap();
        m.check_watertight().unwrap();
        let voxel = 2.0 / 128.0;
        for p in &m.vertices {
            let r = norm3(*p);
            assert!(
                (r - 0.4).abs() <= 2.0 * voxel,
                "vertex radius {r} outside 0.4 +- {}",
                2.0 * voxel
            );
        }
    }

    #[test]
    fn constant_fields_are_flagged_empty() {
        let one = marching_cubes_field(|_| 1.0, 16, [-1.0; 3], [1.0; 3], 0.5);
        assert!(matches!(one, Err(Error::EmptySurface)));
        let zero = marching_cubes_field(|_| 0.0, 16, [-1.0; 3], [1.0; 3], 0.5);
        assert!(matches!(zero, Err(Error::EmptySurface)));
    }

    #[test]
    fn half_space_field_yields_a_plane_within_one_cell() {
        let f = |p: V3<f64>| if p[0] < 0.0 { 1.0 } else { 0.0 };
        let m = marching_cubes_field(f, 16, [-1.0; 3], [1.0; 3], 0.5).unwrap();
        let cell = 2.0 / 16.0;
        assert!(!m.faces.is_empty());
        for p in &m.vertices {
            assert!(p[0].abs() <= cell, "vertex x {} beyond one cell", p[0]);
        }
    }

    #[test]
    fn resolution_below_eight_is_rejected() {
        let r = marching_cubes_field(|_| 0.0, 7, [-1.0; 3], [1.0; 3], 0.5);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn extraction_is_deterministic() {
        let f = |p: V3<f64>| 0.5 + (0.45 - norm3(p));
        let a = marching_cubes_field(f, 24, [-1.0; 3], [1.0; 3], 0.5).unwrap();
        let b = marching_cubes_field(f, 24, [-1.0; 3], [1.0; 3], 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_binary_fields_always_mesh_watertight() {
        // Random interior occupancy with a zeroed boundary shell exercises
        // a wide sweep of table cases, including every ambiguous face.
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let res = [7usize, 7, 7];
            let [nx, ny, nz] = [8usize, 8, 8];
            let mut values = vec![0.0f64; nx * ny * nz];
            for k in 1..nz - 1 {
                for j in 1..ny - 1 {
                    for i in 1..nx - 1 {
                        values[(k * ny + j) * nx + i] = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                    }
                }
            }
            let grid = GridField {
                res,
                lo: [-1.0; 3],
                hi: [1.0; 3],
                values,
            };
            match marching_cubes(&grid, 0.5) {
                Ok(m) => {
                    m.check_watertight()
                        .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
                    assert!(m.signed_volume() > 0.0, "seed {seed}: inward volume");
                }
                Err(Error::EmptySurface) => {}
                Err(e) => panic!("seed {seed}: {e}"),
            }
        }
    }

    #[test]
    fn random_smooth_fields_always_mesh_watertight() {
        // Blob centers and widths are bounded so the summed field stays below
        // the level on the grid boundary (5 * exp(-0.36 / 0.125) < 0.5);
        // otherwise the isosurface would legitimately exit the grid open.
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let blobs: Vec<(V3<f64>, f64)> = (0..5)
                .map(|_| {
                    (
                        [
                            rng.gen_range(-0.4..0.4),
                            rng.gen_range(-0.4..0.4),
                            rng.gen_range(-0.4..0.4),
                        ],
                        rng.gen_range(0.1..0.25),
                    )
                })
                .collect();
            let f = |p: V3<f64>| {
                blobs
                    .iter()
                    .map(|&(c, s)| {
                        let d2 = (p[0] - c[0]).powi(2)
                            + (p[1] - c[1]).powi(2)
                            + (p[2] - c[2]).powi(2);
                        (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum::<f64>()
            };
            let m = marching_cubes_field(f, 20, [-1.0; 3], [1.0; 3], 0.5).unwrap();
            m.check_watertight()
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            assert!(m.signed_volume() > 0.0);
        }
    }

    // Saturating shell: 0.5 level at radius 0.7, smooth on the coarse scale.
    fn shell(p: V3<f64>) -> f64 {
        1.0 / (1.0 + ((norm3(p) - 0.7) * 24.0).exp())
    }

    #[test]
    fn refined_extraction_matches_dense_extraction_on_a_smooth_field() {
        let (lo, hi) = ([-1.0; 3], [1.0; 3]);
        let dense = marching_cubes_field(shell, 48, lo, hi, 0.5).unwrap();
        let calls = std::cell::Cell::new(0usize);
        let mut f = |pts: &[V3<f64>]| -> Result<Vec<f64>> {
            calls.set(calls.get() + pts.len());
            Ok(pts.iter().map(|&p| shell(p)).collect())
        };
        let refined = marching_cubes_refined(&mut f, 12, 4, lo, hi, 0.5).unwrap();
        assert_eq!(dense.vertices, refined.vertices);
        assert_eq!(dense.faces, refined.faces);
        let dense_evals = 49usize.pow(3);
        assert!(
            calls.get() * 3 < dense_evals * 2,
            "band evaluation used {} of {dense_evals} lattice points",
            calls.get()
        );
    }

    #[test]
    fn refined_extraction_propagates_field_errors() {
        let mut f =
            |_: &[V3<f64>]| -> Result<Vec<f64>> { Err(Error::Config("field exploded".into())) };
        let err = marching_cubes_refined(&mut f, 8, 2, [-1.0; 3], [1.0; 3], 0.5);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn unit_factor_refinement_reduces_to_the_dense_grid() {
        let mut f = |pts: &[V3<f64>]| -> Result<Vec<f64>> {
            Ok(pts.iter().map(|&p| shell(p)).collect())
        };
        let refined = marching_cubes_refined(&mut f, 16, 1, [-1.0; 3], [1.0; 3], 0.5).unwrap();
        let dense = marching_cubes_field(shell, 16, [-1.0; 3], [1.0; 3], 0.5).unwrap();
        assert_eq!(dense.vertices, refined.vertices);
        assert_eq!(dense.faces, refined.faces);
    }
}
