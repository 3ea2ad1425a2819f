//! Deterministic software rasterizer: z-buffer, per-pixel instance ids,
//! flat shading with a fixed directional light. Geometry is camera-frame;
//! triangles are clipped against the near plane and projected through the
//! pinhole camera.

use crate::geometry::{Camera, V3};
use crate::mesh::TriMesh;
use ndarray::{Array2, Array3};

/// Id written where no geometry covers a pixel.
pub const ID_NONE: u32 = u32::MAX;
/// Id reserved for the room shell.
pub const ID_ROOM: u32 = u32::MAX - 1;

/// Shading constants: two-sided Lambert with a fixed ambient floor.
pub const AMBIENT: f32 = 0.35;
const LIGHT: V3<f64> = [0.32, -0.55, -0.77];

/// One mesh to draw: camera-frame geometry, the id to write into the id
/// buffer, and a flat albedo.
pub struct DrawItem<'a> {
    pub mesh: &'a TriMesh<f64>,
    pub id: u32,
    pub albedo: [f32; 3],
}

/// Frame buffers produced by one rasterization pass.
pub struct RasterOutput {
    /// `(3, h, w)` linear color in [0, 1].
    pub color: Array3<f32>,
    /// Camera-frame depth per pixel; `f64::INFINITY` where empty.
    pub depth: Array2<f64>,
    /// Instance id per pixel; `ID_NONE` where empty.
    pub ids: Array2<u32>,
}

fn normalize(v: V3<f64>) -> V3<f64> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn sub(a: V3<f64>, b: V3<f64>) -> V3<f64> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: V3<f64>, b: V3<f64>) -> V3<f64> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: V3<f64>, b: V3<f64>) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Clips a camera-frame triangle against `z >= near`; returns 0, 1, or 2
/// triangles.
fn clip_near(tri: [V3<f64>; 3], near: f64) -> Vec<[V3<f64>; 3]> {
    let inside: Vec<bool> = tri.iter().map(|p| p[2] >= near).collect();
    let n_in = inside.iter().filter(|&&b| b).count();
    if n_in == 3 {
        return vec![tri];
    }
    if n_in == 0 {
        return vec![];
    }
    // Sutherland-Hodgman against the single plane.
    let mut poly: Vec<V3<f64>> = Vec::with_capacity(4);
    for i in 0..3 {
        let j = (i + 1) % 3;
        let (a, b) = (tri[i], tri[j]);
        if inside[i] {
            poly.push(a);
        }
        if inside[i] != inside[j] {
            let t = (near - a[2]) / (b[2] - a[2]);
            poly.push([
                a[0] + t * (b[0] - a[0]),
                a[1] + t * (b[1] - a[1]),
                near,
            ]);
        }
    }
    match poly.len() {
        3 => vec![[poly[0], poly[1], poly[2]]],
        4 => vec![[poly[0], poly[1], poly[2]], [poly[0], poly[2], poly[3]]],
        _ => vec![],
    }
}

/// Renders the draw list in order. Depth resolves overlap; equal depth
/// keeps the earlier item, so output is independent of nothing but the
/// list order, which callers keep fixed.
pub fn rasterize(camera: &Camera<f64>, items: &[DrawItem<'_>], near: f64) -> RasterOutput {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut color = Array3::<f32>::zeros((3, h, w));
    let mut depth = Array2::<f64>::from_elem((h, w), f64::INFINITY);
    let mut ids = Array2::<u32>::from_elem((h, w), ID_NONE);
    let light = normalize(LIGHT);
    for item in items {
        for fi in 0..item.mesh.faces.len() {
            let tri = item.mesh.face_vertices(fi);
            for t in clip_near(tri, near) {
                // Flat shade from the unclipped winding; clipping preserves
                // the plane, so recomputing from the clipped triangle is
                // equivalent up to degenerate slivers.
                let n = cross(sub(t[1], t[0]), sub(t[2], t[0]));
                let nn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if !(nn > 0.0) {
                    continue;
                }
                let lambert = (dot(n, light) / nn).abs() as f32;
                let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
                let px: Vec<[f64; 3]> = t
                    .iter()
                    .map(|&p| {
                        let u = camera.fx * p[0] / p[2] + camera.cx;
                        let v = camera.fy * p[1] / p[2] + camera.cy;
                        [u, v, 1.0 / p[2]]
                    })
                    .collect();
                draw_triangle(
                    &px, shade, item, w, h, &mut color, &mut depth, &mut ids,
                );
            }
        }
    }
    RasterOutput { color, depth, ids }
}

#[allow(clippy::too_many_arguments)]
fn draw_triangle(
    px: &[[f64; 3]],
    shade: f32,
    item: &DrawItem<'_>,
    w: usize,
    h: usize,
    color: &mut Array3<f32>,
    depth: &mut Array2<f64>,
    ids: &mut Array2<u32>,
) {
    let (a, b, c) = (px[0], px[1], px[2]);
    let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    if area == 0.0 {
        return;
    }
    let min_x = a[0].min(b[0]).min(c[0]).floor().max(0.0) as usize;
    let max_x = (a[0].max(b[0]).max(c[0]).ceil() as isize).min(w as isize) as usize;
    let min_y = a[1].min(b[1]).min(c[1]).floor().max(0.0) as usize;
    let max_y = (a[1].max(b[1]).max(c[1]).ceil() as isize).min(h as isize) as usize;
    if max_x <= min_x || max_y <= min_y {
        return;
    }
    for y in min_y..max_y {
        let py = y as f64 + 0.5;
        for x in min_x..max_x {
            let pxc = x as f64 + 0.5;
            let w0 = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (pxc - a[0]);
            let w1 = (c[0] - b[0]) * (py - b[1]) - (c[1] - b[1]) * (pxc - b[0]);
            let w2 = (a[0] - c[0]) * (py - c[1]) - (a[1] - c[1]) * (pxc - c[0]);
            let inside = (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0)
                || (w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0);
            if !inside {
                continue;
            }
            // Screen-space barycentric interpolation of 1/z is exact for
            // perspective projection.
            let (ba, bb, bc) = (w1 / area, w2 / area, w0 / area);
            let inv_z = ba * a[2] + bb * b[2] + bc * c[2];
            if !(inv_z > 0.0) {
                continue;
            }
            let z = 1.0 / inv_z;
            if z < depth[(y, x)] {
                depth[(y, x)] = z;
                ids[(y, x)] = item.id;
                for ch in 0..3 {
                    color[(ch, y, x)] = (item.albedo[ch] * shade).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Quantizes a linear color buffer to 8-bit and back, so in-memory images
/// match their PNG round trip exactly.
pub fn quantize_image(color: &Array3<f32>) -> Array3<f32> {
    color.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::TriMesh;

    fn camera() -> Camera<f64> {
        Camera::frontal(64.0, 64.0, 32.0, 32.0, 64, 64)
    }

    #[test]
    fn front_square_wins_the_depth_test_everywhere_it_covers() {
        // Two axis-aligned squares straddling the optical axis.
        let square = |z: f64, half: f64| {
            TriMesh::new(
                vec![
                    [-half, -half, z],
                    [half, -half, z],
                    [half, half, z],
                    [-half, half, z],
                ],
                vec![[0, 1, 2], [0, 2, 3]],
            )
            .unwrap()
        };
        // far projects to u, v in [8, 56]; near to [16, 48].
        let far = square(4.0, 1.5);
        let near = square(2.0, 0.5);
        let out = rasterize(
            &camera(),
            &[
                DrawItem { mesh: &far, id: 1, albedo: [1.0, 0.0, 0.0] },
                DrawItem { mesh: &near, id: 2, albedo: [0.0, 1.0, 0.0] },
            ],
            0.05,
        );
        // Image center: near square at z = 2.
        assert_eq!(out.ids[(32, 32)], 2);
        assert!((out.depth[(32, 32)] - 2.0).abs() < 1e-9);
        // Off-center but inside the far square only.
        assert_eq!(out.ids[(32, 52)], 1);
        assert!((out.depth[(32, 52)] - 4.0).abs() < 1e-9);
        // Outside both.
        assert_eq!(out.ids[(1, 1)], ID_NONE);
        assert!(out.depth[(1, 1)].is_infinite());
    }

    #[test]
    fn draw_order_does_not_change_the_result() {
        let tri_a = TriMesh::new(
            vec![[-1.0, -1.0, 3.0], [1.2, -0.8, 3.0], [0.0, 1.1, 3.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let tri_b = TriMesh::new(
            vec![[-0.8, -1.2, 2.2], [1.0, -1.0, 2.4], [0.2, 0.9, 2.3]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let items_ab = [
            DrawItem { mesh: &tri_a, id: 0, albedo: [0.8, 0.2, 0.1] },
            DrawItem { mesh: &tri_b, id: 1, albedo: [0.1, 0.2, 0.8] },
        ];
        let items_ba = [
            DrawItem { mesh: &tri_b, id: 1, albedo: [0.1, 0.2, 0.8] },
            DrawItem { mesh: &tri_a, id: 0, albedo: [0.8, 0.2, 0.1] },
        ];
        let a = rasterize(&camera(), &items_ab, 0.05);
        let b = rasterize(&camera(), &items_ba, 0.05);
        assert_eq!(a.ids, b.ids);
        assert_eq!(a.color, b.color);
    }

    #[test]
    fn near_plane_clipping_keeps_the_visible_part() {
        // A triangle crossing the near plane: one vertex behind the camera.
        let tri = TriMesh::new(
            vec![[0.0, -0.5, -1.0], [0.5, 0.5, 3.0], [-0.5, 0.5, 3.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let out = rasterize(
            &camera(),
            &[DrawItem { mesh: &tri, id: 5, albedo: [1.0; 3] }],
            0.1,
        );
        let covered = out.ids.iter().filter(|&&i| i == 5).count();
        assert!(covered > 0, "clipped triangle still rasterizes");
        for y in 0..64 {
            for x in 0..64 {
                if out.ids[(y, x)] == 5 {
                    assert!(out.depth[(y, x)] >= 0.1 - 1e-12);
                }
            }
        }
    }

    #[test]
    fn fully_behind_geometry_rasterizes_nothing() {
        let tri = TriMesh::new(
            vec![[0.0, 0.0, -2.0], [1.0, 0.0, -2.0], [0.0, 1.0, -2.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let out = rasterize(
            &camera(),
            &[DrawItem { mesh: &tri, id: 3, albedo: [1.0; 3] }],
            0.1,
        );
        assert!(out.ids.iter().all(|&i| i == ID_NONE));
    }

    #[test]
    fn shading_respects_the_ambient_floor_and_unit_range() {
        let sphere = crate::scenegen::primitives::icosphere(2).translated([0.0, 0.0, 3.0]);
        let out = rasterize(
            &camera(),
            &[DrawItem { mesh: &sphere, id: 0, albedo: [1.0, 1.0, 1.0] }],
            0.05,
        );
        let mut seen = 0;
        for y in 0..64 {
            for x in 0..64 {
                if out.ids[(y, x)] == 0 {
                    seen += 1;
                    let v = out.color[(0, y, x)];
                    assert!(v >= AMBIENT - 1e-6 && v <= 1.0);
                }
            }
        }
        assert!(seen > 100);
    }

    #[test]
    fn quantization_is_idempotent() {
        let img = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| {
            (c as f32 * 0.21 + y as f32 * 0.07 + x as f32 * 0.013).fract()
        });
        let q = quantize_image(&img);
        assert_eq!(quantize_image(&q), q);
        for (a, b) in img.iter().zip(q.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
    }
}
