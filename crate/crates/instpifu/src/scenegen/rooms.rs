//! Procedural room shells: closed extruded solids the camera sits inside,
//! optionally with a semicircular alcove bulging out of the back wall so
//! the background field has to model a non-planar surface.

use crate::mesh::TriMesh;
use crate::scenegen::primitives::extrude_polygon;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Minimum fraction of shell area the curved alcove must cover.
pub const MIN_NONPLANAR_FRACTION: f64 = 0.05;

/// Randomization ranges for room construction. All lengths in meters,
/// camera at the origin looking along +z, y pointing down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoomSpec {
    /// Half-width range (x extent is `[-hw, hw]`).
    pub half_width: (f64, f64),
    /// Half-height range (y extent is `[-hh, hh]`).
    pub half_height: (f64, f64),
    /// Back-wall depth range (z of the far wall).
    pub depth: (f64, f64),
    /// Distance of the wall behind the camera (z = -behind).
    pub behind: f64,
    /// Probability of carving an alcove into the back wall.
    pub alcove_probability: f64,
    /// Alcove radius as a fraction of the room half-width. The radius is
    /// grown past this range when needed to reach MIN_NONPLANAR_FRACTION.
    pub alcove_radius_frac: (f64, f64),
    /// Arc segments of the alcove profile.
    pub alcove_segments: usize,
}

impl Default for RoomSpec {
    fn default() -> Self {
        RoomSpec {
            half_width: (2.2, 3.2),
            half_height: (1.2, 1.6),
            depth: (5.0, 7.0),
            behind: 1.0,
            alcove_probability: 0.5,
            alcove_radius_frac: (0.3, 0.45),
            alcove_segments: 12,
        }
    }
}

impl RoomSpec {
    /// Every room gets an alcove (background-field corpora).
    pub fn always_alcove() -> Self {
        RoomSpec {
            alcove_probability: 1.0,
            ..RoomSpec::default()
        }
    }

    /// Plain cuboid rooms only.
    pub fn never_alcove() -> Self {
        RoomSpec {
            alcove_probability: 0.0,
            ..RoomSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0 > 0.0 && r.1 >= r.0;
        if !(ordered(self.half_width)
            && ordered(self.half_height)
            && ordered(self.depth)
            && self.behind > 0.0)
        {
            return Err(Error::Config("room ranges must be positive and ordered".into()));
        }
        if !(0.0..=1.0).contains(&self.alcove_probability) {
            return Err(Error::Config("alcove probability outside [0, 1]".into()));
        }
        if !(ordered(self.alcove_radius_frac) && self.alcove_radius_frac.1 < 0.9) {
            return Err(Error::Config("alcove radius fraction outside (0, 0.9)".into()));
        }
        if self.alcove_segments < 4 {
            return Err(Error::Config("alcove needs >= 4 segments".into()));
        }
        Ok(())
    }
}

/// A built room: closed outward-facing solid shell, camera inside.
#[derive(Debug, Clone)]
pub struct RoomShell {
    pub mesh: TriMesh<f64>,
    /// Extents of the rectangular part (excludes the alcove bulge):
    /// x in `[-half_width, half_width]`, y in `[-half_height, half_height]`,
    /// z in `[-behind, depth]`.
    pub half_width: f64,
    pub half_height: f64,
    pub depth: f64,
    pub behind: f64,
    /// Area of the curved alcove facets; 0 for plain cuboid rooms.
    pub nonplanar_area: f64,
    pub has_alcove: bool,
}

impl RoomShell {
    /// Fraction of the shell surface that is non-planar.
    pub fn nonplanar_fraction(&self) -> f64 {
        self.nonplanar_area / self.mesh.area()
    }
}

/// Extrudes the floor-plan profile into the shell. The alcove, when present,
/// is a semicircle of radius `r` centered at `cx` bulging past the back wall.
fn build_shell(
    hw: f64,
    hh: f64,
    depth: f64,
    behind: f64,
    alcove: Option<(f64, f64, usize)>,
) -> (TriMesh<f64>, f64) {
    // Counter-clockwise in (x, z): right along the near wall, up the +x
    // side, then the far edge right to left with the arc spliced in.
    let mut profile: Vec<[f64; 2]> = vec![[-hw, -behind], [hw, -behind], [hw, depth]];
    let mut arc_len = 0.0;
    if let Some((cx, r, segments)) = alcove {
        let mut prev = [cx + r, depth];
        for s in 0..=segments {
            let theta = std::f64::consts::PI * s as f64 / segments as f64;
            let p = [cx + r * theta.cos(), depth + r * theta.sin()];
            if s > 0 {
                arc_len += ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt();
            }
            profile.push(p);
            prev = p;
        }
    }
    profile.push([-hw, depth]);

    // Extrude along the vertical, then rotate (profile z -> scene z,
    // extrusion axis -> -y) keeping orientation (det +1) so faces stay
    // outward.
    let extruded = extrude_polygon(&profile, hh);
    let mesh = extruded.map_vertices(|[px, pz, pv]| [px, -pv, pz]);
    (mesh, arc_len * 2.0 * hh)
}

/// Builds a room shell from a spec. Deterministic given the RNG state.
/// Alcove rooms are guaranteed to carry at least MIN_NONPLANAR_FRACTION of
/// their area on the curved facets; the radius grows past the sampled value
/// when a wide, shallow room would otherwise fall short.
pub fn build_room(spec: &RoomSpec, rng: &mut ChaCha8Rng) -> Result<RoomShell> {
    spec.validate()?;
    let hw = rng.gen_range(spec.half_width.0..=spec.half_width.1);
    let hh = rng.gen_range(spec.half_height.0..=spec.half_height.1);
    let depth = rng.gen_range(spec.depth.0..=spec.depth.1);
    let with_alcove = rng.gen_range(0.0..1.0) < spec.alcove_probability;
    let mut radius = rng.gen_range(spec.alcove_radius_frac.0..=spec.alcove_radius_frac.1) * hw;
    let center_draw = rng.gen_range(-1.0..=1.0);
    let max_radius = hw - 0.12;

    if !with_alcove {
        let (mesh, _) = build_shell(hw, hh, depth, spec.behind, None);
        mesh.check_watertight()?;
        return Ok(RoomShell {
            mesh,
            half_width: hw,
            half_height: hh,
            depth,
            behind: spec.behind,
            nonplanar_area: 0.0,
            has_alcove: false,
        });
    }

    for _ in 0..24 {
        let max_off = (hw - radius - 0.1).max(0.0);
        let cx = center_draw * max_off;
        let (mesh, nonplanar_area) =
            build_shell(hw, hh, depth, spec.behind, Some((cx, radius, spec.alcove_segments)));
        if nonplanar_area >= MIN_NONPLANAR_FRACTION * mesh.area() {
            mesh.check_watertight()?;
            return Ok(RoomShell {
                mesh,
                half_width: hw,
                half_height: hh,
                depth,
                behind: spec.behind,
                nonplanar_area,
                has_alcove: true,
            });
        }
        if radius >= max_radius {
            break;
        }
        radius = (radius * 1.2).min(max_radius);
    }
    Err(Error::Config(format!(
        "alcove cannot reach {:.0}% non-planar area in a {:.2}x{:.2}x{:.2} room",
        MIN_NONPLANAR_FRACTION * 100.0,
        2.0 * hw,
        2.0 * hh,
        depth + spec.behind
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::occupancy_oracle;
    use rand::SeedableRng;

    #[test]
    fn rooms_are_watertight_and_contain_the_camera_origin() {
        for seed in 0..12u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let room = build_room(&RoomSpec::default(), &mut rng).unwrap();
            room.mesh.check_watertight().unwrap();
            assert_eq!(occupancy_oracle(&room.mesh, [0.0, 0.0, 0.0]).unwrap(), 1);
            assert_eq!(
                occupancy_oracle(&room.mesh, [0.0, 0.0, room.depth + 5.0]).unwrap(),
                0
            );
        }
    }

    #[test]
    fn alcove_rooms_carry_enough_nonplanar_area() {
        for seed in 0..16u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let room = build_room(&RoomSpec::always_alcove(), &mut rng).unwrap();
            assert!(room.has_alcove);
            assert!(
                room.nonplanar_fraction() >= MIN_NONPLANAR_FRACTION,
                "nonplanar fraction {} too small",
                room.nonplanar_fraction()
            );
        }
    }

    #[test]
    fn wide_shallow_rooms_grow_the_alcove_to_the_area_floor() {
        // Ranges chosen so the sampled radius alone cannot reach the floor.
        let spec = RoomSpec {
            half_width: (3.2, 3.2),
            half_height: (1.2, 1.2),
            depth: (7.0, 7.0),
            alcove_probability: 1.0,
            alcove_radius_frac: (0.1, 0.12),
            ..RoomSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let room = build_room(&spec, &mut rng).unwrap();
        assert!(room.nonplanar_fraction() >= MIN_NONPLANAR_FRACTION);
    }

    #[test]
    fn cuboid_rooms_have_no_curved_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let room = build_room(&RoomSpec::never_alcove(), &mut rng).unwrap();
        assert!(!room.has_alcove);
        assert_eq!(room.nonplanar_area, 0.0);
        // 4 profile corners -> box: 2x2 cap triangles + 4x2 wall triangles.
        assert_eq!(room.mesh.faces.len(), 12);
    }

    #[test]
    fn alcove_points_are_inside_the_shell_beyond_the_back_wall() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let room = build_room(&RoomSpec::always_alcove(), &mut rng).unwrap();
        // Some point slightly beyond the back wall must be interior (the
        // alcove mouth), while the corners beyond the wall stay exterior.
        let mut inside = 0;
        for i in 0..200 {
            let x = -room.half_width + (i as f64 / 199.0) * 2.0 * room.half_width;
            let p = [x, 0.0, room.depth + 0.05];
            inside += occupancy_oracle(&room.mesh, p).unwrap() as usize;
        }
        assert!(inside > 0, "no interior point beyond the back wall");
        assert!(inside < 200, "entire line beyond the wall reads interior");
    }

    #[test]
    fn construction_is_deterministic_in_the_rng_stream() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            build_room(&RoomSpec::default(), &mut rng).unwrap()
        };
        let a = build();
        let b = build();
        assert_eq!(a.mesh.vertices, b.mesh.vertices);
        assert_eq!(a.mesh.faces, b.mesh.faces);
        assert_eq!(a.nonplanar_area, b.nonplanar_area);
    }
}
