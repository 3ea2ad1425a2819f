//! Ground-truth occupancy labelling and training-point sampling.
//!
//! Occupancy of a watertight mesh is decided by ray-crossing parity. A cast
//! that grazes an edge, vertex or coplanar face is flagged suspicious and
//! retried with a fresh random direction, so labels are well defined for
//! every point not exactly on the surface. Sampling runs in `f64`: parity
//! decisions near tessellated surfaces are not reliable in single precision.

use crate::geometry::{add3, cross3, dot3, norm3, norm3_sq, scale3, sub3, V3};
use crate::mesh::TriMesh;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::{Path, PathBuf};

/// Coordinate frame a sample batch lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// Per-instance canonical frame (object decoders).
    Canonical,
    /// Camera frame (room decoder).
    Camera,
}

/// Labelled occupancy samples for one instance or room.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// Query points, `n x 3`, in `frame` coordinates.
    pub points: Vec<[f32; 3]>,
    /// Ground-truth occupancy in `{0, 1}`.
    pub labels: Vec<u8>,
    pub frame: Frame,
    pub instance_id: u32,
    pub seed: u64,
}

const MAX_RECASTS: usize = 32;

/// Splitmix-style mix of a base seed and an index, used to give every query
/// point an independent, order-free random stream.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_unit_dir(rng: &mut ChaCha8Rng) -> V3<f64> {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2 = norm3_sq(v);
        if n2 > 1e-4 && n2 <= 1.0 {
            return scale3(v, 1.0 / n2.sqrt());
        }
    }
}

enum Hit {
    Miss,
    Cross,
    Suspicious,
}

/// Watertight-mesh membership oracle with a uniform-grid ray accelerator.
pub struct MeshOccupancy {
    mesh: TriMesh<f64>,
    grid_lo: V3<f64>,
    cell: V3<f64>,
    res: [usize; 3],
    /// Triangle ids per cell, row-major over (x, y, z).
    cells: Vec<Vec<u32>>,
    diag: f64,
}

impl MeshOccupancy {
    /// Validates watertightness and builds the acceleration grid.
    pub fn build(mesh: &TriMesh<f64>) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::EmptyMesh);
        }
        mesh.check_watertight()?;
        let (lo, hi) = mesh.bounds()?;
        let extent = sub3(hi, lo);
        let diag = norm3(extent).max(f64::MIN_POSITIVE);
        // Pad so every triangle is strictly interior to the grid.
        let pad = 1e-9 * diag + 1e-300;
        let grid_lo = sub3(lo, [pad; 3]);
        let grid_hi = add3(hi, [pad; 3]);
        let span = sub3(grid_hi, grid_lo);
        let r = ((mesh.faces.len() as f64 / 4.0).cbrt().ceil() as usize).clamp(2, 48);
        let res = [r, r, r];
        let cell = [
            span[0] / r as f64,
            span[1] / r as f64,
            span[2] / r as f64,
        ];
        let mut cells: Vec<Vec<u32>> = vec![Vec::new(); r * r * r];
        for (ti, _) in mesh.faces.iter().enumerate() {
            let [a, b, c] = mesh.face_vertices(ti);
            let mut tlo = a;
            let mut thi = a;
            for p in [b, c] {
                for k in 0..3 {
                    tlo[k] = tlo[k].min(p[k]);
                    thi[k] = thi[k].max(p[k]);
                }
            }
            let mut i0 = [0usize; 3];
            let mut i1 = [0usize; 3];
            for k in 0..3 {
                i0[k] = (((tlo[k] - grid_lo[k]) / cell[k]).floor() as isize).clamp(0, r as isize - 1)
                    as usize;
                i1[k] = (((thi[k] - grid_lo[k]) / cell[k]).floor() as isize).clamp(0, r as isize - 1)
                    as usize;
            }
            for x in i0[0]..=i1[0] {
                for y in i0[1]..=i1[1] {
                    for z in i0[2]..=i1[2] {
                        cells[(z * r + y) * r + x].push(ti as u32);
                    }
                }
            }
        }
        Ok(MeshOccupancy {
            mesh: mesh.clone(),
            grid_lo,
            cell,
            res,
            cells,
            diag,
        })
    }

    pub fn mesh(&self) -> &TriMesh<f64> {
        &self.mesh
    }

    fn intersect(&self, orig: V3<f64>, dir: V3<f64>, tri: usize) -> Hit {
        let [a, b, c] = self.mesh.face_vertices(tri);
        let e1 = sub3(b, a);
        let e2 = sub3(c, a);
        let n = cross3(e1, e2);
        let det = dot3(dir, n);
        let n_len = norm3(n);
        if det.abs() <= 1e-9 * n_len {
            // Ray (nearly) parallel to the plane: only a problem if the
            // origin sits essentially on that plane.
            let dist = dot3(sub3(orig, a), n) / n_len.max(f64::MIN_POSITIVE);
            return if dist.abs() < 1e-9 * self.diag {
                Hit::Suspicious
            } else {
                Hit::Miss
            };
        }
        let pv = cross3(dir, e2);
        let inv = 1.0 / dot3(e1, pv);
        let tv = sub3(orig, a);
        let u = dot3(tv, pv) * inv;
        let sv = cross3(tv, e1);
        let v = dot3(dir, sv) * inv;
        let t = dot3(e2, sv) * inv;
        const EB: f64 = 1e-9;
        let eps_t = 1e-12 * self.diag;
        let plausible = u > -EB && v > -EB && u + v < 1.0 + EB;
        if t <= eps_t {
            // Behind or on the origin; on-surface origins are degenerate.
            return if t > -eps_t && plausible {
                Hit::Suspicious
            } else {
                Hit::Miss
            };
        }
        let inside = u >= 0.0 && v >= 0.0 && u + v <= 1.0;
        let near_boundary = u.abs() < EB
            || v.abs() < EB
            || (1.0 - u - v).abs() < EB;
        if near_boundary && plausible {
            return Hit::Suspicious;
        }
        if inside {
            Hit::Cross
        } else {
            Hit::Miss
        }
    }

    /// Counts surface crossings of the full ray `orig + t*dir, t > 0`.
    /// Returns the count and whether any degenerate hit was seen (in which
    /// case the count must not be trusted).
    fn cast(&self, orig: V3<f64>, dir: V3<f64>, stamps: &mut [u32], gen: u32) -> (usize, bool) {
        let r = self.res;
        let grid_hi = [
            self.grid_lo[0] + self.cell[0] * r[0] as f64,
            self.grid_lo[1] + self.cell[1] * r[1] as f64,
            self.grid_lo[2] + self.cell[2] * r[2] as f64,
        ];
        // Clip the ray to the grid box.
        let mut t0 = 0.0_f64;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if dir[k].abs() < 1e-300 {
                if orig[k] < self.grid_lo[k] || orig[k] > grid_hi[k] {
                    return (0, false);
                }
            } else {
                let ta = (self.grid_lo[k] - orig[k]) / dir[k];
                let tb = (grid_hi[k] - orig[k]) / dir[k];
                let (ta, tb) = if ta <= tb { (ta, tb) } else { (tb, ta) };
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
        }
        if t0 > t1 {
            return (0, false);
        }
        let entry = add3(orig, scale3(dir, t0));
        let mut idx = [0isize; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        let mut step = [0isize; 3];
        for k in 0..3 {
            idx[k] = (((entry[k] - self.grid_lo[k]) / self.cell[k]).floor() as isize)
                .clamp(0, r[k] as isize - 1);
            if dir[k] > 0.0 {
                step[k] = 1;
                let boundary = self.grid_lo[k] + (idx[k] + 1) as f64 * self.cell[k];
                t_max[k] = (boundary - orig[k]) / dir[k];
                t_delta[k] = self.cell[k] / dir[k];
            } else if dir[k] < 0.0 {
                step[k] = -1;
                let boundary = self.grid_lo[k] + idx[k] as f64 * self.cell[k];
                t_max[k] = (boundary - orig[k]) / dir[k];
                t_delta[k] = self.cell[k] / -dir[k];
            }
        }
        let mut crossings = 0usize;
        loop {
            let ci = (idx[2] as usize * r[1] + idx[1] as usize) * r[0] + idx[0] as usize;
            for &ti in &self.cells[ci] {
                let ti = ti as usize;
                if stamps[ti] == gen {
                    continue;
                }
                stamps[ti] = gen;
                match self.intersect(orig, dir, ti) {
                    Hit::Cross => crossings += 1,
                    Hit::Suspicious => return (crossings, true),
                    Hit::Miss => {}
                }
            }
            let k = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            idx[k] += step[k];
            if idx[k] < 0 || idx[k] >= r[k] as isize {
                break;
            }
            t_max[k] += t_delta[k];
        }
        (crossings, false)
    }

    fn contains_with(&self, p: V3<f64>, rng: &mut ChaCha8Rng, stamps: &mut Vec<u32>, gen: &mut u32) -> bool {
        if stamps.len() != self.mesh.faces.len() {
            *stamps = vec![0; self.mesh.faces.len()];
            *gen = 0;
        }
        let mut last = false;
        for _ in 0..MAX_RECASTS {
            *gen += 1;
            let dir = random_unit_dir(rng);
            let (crossings, suspicious) = self.cast(p, dir, stamps, *gen);
            last = crossings % 2 == 1;
            if !suspicious {
                return last;
            }
        }
        last
    }

    /// Membership of a single point, seeded for reproducibility.
    pub fn contains(&self, p: V3<f64>, seed: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stamps = Vec::new();
        let mut gen = 0;
        self.contains_with(p, &mut rng, &mut stamps, &mut gen)
    }

    /// Labels a point set. Every point gets an independent random stream
    /// derived from `(seed, index)`, so the result is identical under any
    /// parallel schedule.
    pub fn label_points(&self, points: &[V3<f64>], seed: u64) -> Vec<u8> {
        points
            .par_iter()
            .enumerate()
            .map_init(
                || (Vec::new(), 0u32),
                |(stamps, gen), (i, &p)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
                    self.contains_with(p, &mut rng, stamps, gen) as u8
                },
            )
            .collect()
    }
}

/// One-shot membership query (Eq. "inside = 1" convention). Validates the
/// mesh on every call; build a [`MeshOccupancy`] to amortise that.
pub fn occupancy_oracle(mesh: &TriMesh<f64>, x: V3<f64>) -> Result<u8> {
    let occ = MeshOccupancy::build(mesh)?;
    Ok(occ.contains(x, 0x5EED) as u8)
}

/// Draws `k` points area-uniformly over the mesh surface. Deterministic for
/// a given seed.
pub fn sample_surface_points(mesh: &TriMesh<f64>, k: usize, seed: u64) -> Result<Vec<V3<f64>>> {
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if k == 0 {
        return Err(Error::Config("surface sample count must be > 0".into()));
    }
    let mut cum = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0_f64;
    for i in 0..mesh.faces.len() {
        total += mesh.face_area(i);
        cum.push(total);
    }
    if total <= 0.0 {
        return Err(Error::malformed("mesh", "zero surface area"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let r = rng.gen::<f64>() * total;
        let fi = cum.partition_point(|&c| c < r).min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.face_vertices(fi);
        let r1: f64 = rng.gen();
        let r2: f64 = rng.gen();
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        out.push(add3(
            add3(scale3(a, wa), scale3(b, wb)),
            scale3(c, wc),
        ));
    }
    Ok(out)
}

fn normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 1e-300 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    let a = 2.0 * std::f64::consts::PI * u2;
    (r * a.cos(), r * a.sin())
}

fn normal3(rng: &mut ChaCha8Rng) -> V3<f64> {
    let (a, b) = normal_pair(rng);
    let (c, _) = normal_pair(rng);
    [a, b, c]
}

/// Training-point sampler: `n/2` surface samples perturbed by Gaussian noise
/// of std `sigma` plus `n/2` points uniform in `bounds`, labelled by the
/// occupancy oracle. Reuses a prebuilt oracle.
pub fn sample_training_points_with(
    occ: &MeshOccupancy,
    n: usize,
    sigma: f64,
    bounds: (V3<f64>, V3<f64>),
    seed: u64,
    frame: Frame,
    instance_id: u32,
) -> Result<SampleBatch> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::Config(format!(
            "training sample count must be even and positive, got {n}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
    }
    let (lo, hi) = bounds;
    if (0..3).any(|k| !(hi[k] > lo[k])) {
        return Err(Error::Config(format!(
            "degenerate sampling bounds lo={lo:?} hi={hi:?}"
        )));
    }
    let half = n / 2;
    let surface = sample_surface_points(occ.mesh(), half, mix_seed(seed, 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
    let mut points: Vec<V3<f64>> = Vec::with_capacity(n);
    for p in surface {
        points.push(add3(p, scale3(normal3(&mut rng), sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 3));
    for _ in 0..half {
        points.push([
            rng.gen_range(lo[0]..hi[0]),
            rng.gen_range(lo[1]..hi[1]),
            rng.gen_range(lo[2]..hi[2]),
        ]);
    }
    let labels = occ.label_points(&points, mix_seed(seed, 4));
    Ok(SampleBatch {
        points: points
            .into_iter()
            .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
            .collect(),
        labels,
        frame,
        instance_id,
        seed,
    })
}

/// [`sample_training_points_with`] plus oracle construction (validates
/// watertightness).
pub fn sample_training_points(
    mesh: &TriMesh<f64>,
    n: usize,
    sigma: f64,
    bounds: (V3<f64>, V3<f64>),
    seed: u64,
    frame: Frame,
    instance_id: u32,
) -> Result<SampleBatch> {
    let occ = MeshOccupancy::build(mesh)?;
    sample_training_points_with(&occ, n, sigma, bounds, seed, frame, instance_id)
}

/// JSON sidecar written next to a sample-batch binary.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SampleBatchSidecar {
    pub version: u32,
    pub count: usize,
    pub point_shape: [usize; 2],
    pub point_dtype: String,
    pub label_dtype: String,
    pub frame: Frame,
    pub instance_id: u32,
    pub seed: u64,
    pub data_file: String,
}

pub const SAMPLE_BATCH_VERSION: u32 = 1;

/// Writes `{base}.bin` (points as little-endian f32 rows, then labels as
/// bytes) and `{base}.json`.
pub fn write_sample_batch(base: &Path, batch: &SampleBatch) -> Result<()> {
    if batch.points.len() != batch.labels.len() {
        return Err(Error::Shape(format!(
            "batch has {} points but {} labels",
            batch.points.len(),
            batch.labels.len()
        )));
    }
    let bin_path = base.with_extension("bin");
    let mut bin = Vec::with_capacity(batch.points.len() * 13);
    for p in &batch.points {
        for &c in p {
            bin.extend_from_slice(&c.to_le_bytes());
        }
    }
    bin.extend_from_slice(&batch.labels);
    std::fs::write(&bin_path, bin)?;
    let sidecar = SampleBatchSidecar {
        version: SAMPLE_BATCH_VERSION,
        count: batch.points.len(),
        point_shape: [batch.points.len(), 3],
        point_dtype: "f32".into(),
        label_dtype: "u8".into(),
        frame: batch.frame,
        instance_id: batch.instance_id,
        seed: batch.seed,
        data_file: bin_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let json = serde_json::to_vec_pretty(&sidecar)?;
    std::fs::write(base.with_extension("json"), json)?;
    Ok(())
}

pub fn read_sample_batch(base: &Path) -> Result<SampleBatch> {
    let sidecar: SampleBatchSidecar =
        serde_json::from_slice(&std::fs::read(base.with_extension("json"))?)?;
    if sidecar.version != SAMPLE_BATCH_VERSION {
        return Err(Error::ManifestVersion {
            found: sidecar.version,
            supported: SAMPLE_BATCH_VERSION,
        });
    }
    if sidecar.point_dtype != "f32" || sidecar.label_dtype != "u8" {
        return Err(Error::malformed(
            "sample batch sidecar",
            format!(
                "unsupported dtypes {}/{}",
                sidecar.point_dtype, sidecar.label_dtype
            ),
        ));
    }
    if sidecar.point_shape != [sidecar.count, 3] {
        return Err(Error::malformed(
            "sample batch sidecar",
            "point_shape inconsistent with count".to_string(),
        ));
    }
    let bin_path: PathBuf = base.with_extension("bin");
    let mut bin = Vec::new();
    std::fs::File::open(&bin_path)?.read_to_end(&mut bin)?;
    let expect = sidecar.count * 12 + sidecar.count;
    if bin.len() != expect {
        return Err(Error::malformed(
            "sample batch binary",
            format!("{}: expected {expect} bytes, found {}", bin_path.display(), bin.len()),
        ));
    }
    let mut points = Vec::with_capacity(sidecar.count);
    for i in 0..sidecar.count {
        let mut p = [0f32; 3];
        for (k, slot) in p.iter_mut().enumerate() {
            let off = (i * 3 + k) * 4;
            *slot = f32::from_le_bytes(bin[off..off + 4].try_into().unwrap());
        }
        points.push(p);
    }
    let labels = bin[sidecar.count * 12..].to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::malformed(
            "sample batch binary",
            format!("label {bad} outside {{0, 1}}"),
        ));
    }
    Ok(SampleBatch {
        points,
        labels,
        frame: sidecar.frame,
        instance_id: sidecar.instance_id,
        seed: sidecar.seed,
    })
}
