//! Camera model, instance poses and the frame conventions everything else
//! builds on.
//!
//! Frames:
//! - **World**: right-handed, `y` up. Scene layouts are authored here.
//! - **Camera**: `x` right, `y` down, `z` forward (into the scene). All
//!   network inputs, instance poses and reconstructions live here.
//! - **Canonical**: per-instance unit frame; the mesh is centred at the
//!   origin with its longest half-extent scaled to 1. Instance occupancy is
//!   decoded here.
//!
//! A camera with pitch `beta = 0` and roll `gamma = 0` looks along world
//! `-z`; positive pitch tilts the view downward.

use crate::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};

/// Column vector in R^3.
pub type V3<S> = [S; 3];
/// Row-major 3x3 matrix.
pub type M3<S> = [[S; 3]; 3];

pub fn add3<S: Scalar>(a: V3<S>, b: V3<S>) -> V3<S> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3<S: Scalar>(a: V3<S>, b: V3<S>) -> V3<S> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Componentwise product.
pub fn mul3<S: Scalar>(a: V3<S>, b: V3<S>) -> V3<S> {
    [a[0] * b[0], a[1] * b[1], a[2] * b[2]]
}

pub fn scale3<S: Scalar>(a: V3<S>, k: S) -> V3<S> {
    [a[0] * k, a[1] * k, a[2] * k]
}

pub fn dot3<S: Scalar>(a: V3<S>, b: V3<S>) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3<S: Scalar>(a: V3<S>, b: V3<S>) -> V3<S> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3_sq<S: Scalar>(a: V3<S>) -> S {
    dot3(a, a)
}

pub fn norm3<S: Scalar>(a: V3<S>) -> S {
    norm3_sq(a).sqrt()
}

pub fn dist3_sq<S: Scalar>(a: V3<S>, b: V3<S>) -> S {
    norm3_sq(sub3(a, b))
}

/// Unit vector along `a`; `a` must be nonzero.
pub fn normalize3<S: Scalar>(a: V3<S>) -> V3<S> {
    let n = norm3(a);
    debug_assert!(n > S::zero(), "normalize3 of zero vector");
    scale3(a, S::one() / n)
}

pub fn mat_vec<S: Scalar>(m: &M3<S>, v: V3<S>) -> V3<S> {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

pub fn mat_mul<S: Scalar>(a: &M3<S>, b: &M3<S>) -> M3<S> {
    let bt = transpose3(b);
    [
        [dot3(a[0], bt[0]), dot3(a[0], bt[1]), dot3(a[0], bt[2])],
        [dot3(a[1], bt[0]), dot3(a[1], bt[1]), dot3(a[1], bt[2])],
        [dot3(a[2], bt[0]), dot3(a[2], bt[1]), dot3(a[2], bt[2])],
    ]
}

pub fn transpose3<S: Scalar>(m: &M3<S>) -> M3<S> {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn det3<S: Scalar>(m: &M3<S>) -> S {
    dot3(m[0], cross3(m[1], m[2]))
}

pub fn identity3<S: Scalar>() -> M3<S> {
    let (o, z) = (S::one(), S::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

/// Rotation about the x axis; maps +y toward +z for positive angles.
pub fn rot_x<S: Scalar>(a: S) -> M3<S> {
    let (c, s) = (a.cos(), a.sin());
    let (o, z) = (S::one(), S::zero());
    [[o, z, z], [z, c, -s], [z, s, c]]
}

/// Rotation about the y axis; maps +z toward +x for positive angles.
pub fn rot_y<S: Scalar>(a: S) -> M3<S> {
    let (c, s) = (a.cos(), a.sin());
    let (o, z) = (S::one(), S::zero());
    [[c, z, s], [z, o, z], [-s, z, c]]
}

/// Rotation about the z axis; maps +x toward +y for positive angles.
pub fn rot_z<S: Scalar>(a: S) -> M3<S> {
    let (c, s) = (a.cos(), a.sin());
    let (o, z) = (S::one(), S::zero());
    [[c, -s, z], [s, c, z], [z, z, o]]
}

/// Pinhole camera with pitch/roll extrinsics.
///
/// World-to-camera mapping is `x_cam = R x_world + t`. Pixel coordinates
/// put `(0, 0)` at the top-left corner; `u` grows right, `v` grows down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera<S: Scalar> {
    pub fx: S,
    pub fy: S,
    pub cx: S,
    pub cy: S,
    pub width: u32,
    pub height: u32,
    /// World-to-camera rotation (row-major).
    pub r: M3<S>,
    /// World-to-camera translation.
    pub t: V3<S>,
}

impl<S: Scalar> Camera<S> {
    /// Builds the world-to-camera rotation for a pitch of `beta` and a roll
    /// of `gamma` (radians). At `beta = gamma = 0` the camera looks along
    /// world `-z` with world `+y` pointing up in the image.
    pub fn rotation(beta: S, gamma: S) -> M3<S> {
        // Base flip: world (x, y, z) -> camera (x, -y, -z). Determinant +1.
        let o = S::one();
        let z = S::zero();
        let base: M3<S> = [[o, z, z], [z, -o, z], [z, z, -o]];
        mat_mul(&rot_z(gamma), &mat_mul(&rot_x(beta), &base))
    }

    /// Camera posed at `center` (world frame) with the given pitch and roll.
    pub fn with_pose(
        fx: S,
        fy: S,
        cx: S,
        cy: S,
        width: u32,
        height: u32,
        beta: S,
        gamma: S,
        center: V3<S>,
    ) -> Self {
        let r = Self::rotation(beta, gamma);
        let t = scale3(mat_vec(&r, center), -S::one());
        Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            r,
            t,
        }
    }

    /// Camera whose frame *is* the scene frame (identity extrinsics). Used
    /// for scenes authored directly in camera coordinates.
    pub fn frontal(fx: S, fy: S, cx: S, cy: S, width: u32, height: u32) -> Self {
        Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            r: identity3(),
            t: [S::zero(); 3],
        }
    }

    pub fn world_to_camera(&self, x: V3<S>) -> V3<S> {
        add3(mat_vec(&self.r, x), self.t)
    }

    pub fn camera_to_world(&self, x: V3<S>) -> V3<S> {
        mat_vec(&transpose3(&self.r), sub3(x, self.t))
    }

    /// Projects a camera-frame point to pixel coordinates. Points at or
    /// behind the image plane are an error, not a silent extrapolation.
    pub fn project(&self, x_cam: V3<S>) -> Result<[S; 2]> {
        if x_cam[2] <= S::zero() {
            return Err(Error::BehindCamera {
                z: x_cam[2].to_f(),
            });
        }
        Ok([
            self.fx * x_cam[0] / x_cam[2] + self.cx,
            self.fy * x_cam[1] / x_cam[2] + self.cy,
        ])
    }

    /// Unit-length camera-frame ray direction through pixel `(u, v)`.
    pub fn pixel_ray(&self, u: S, v: S) -> V3<S> {
        normalize3([(u - self.cx) / self.fx, (v - self.cy) / self.fy, S::one()])
    }

    /// True when the camera-frame point lies inside the viewing frustum:
    /// depth within `[near, far]` and projection within the image bounds
    /// (borders inclusive).
    pub fn frustum_contains(&self, x_cam: V3<S>, near: S, far: S) -> bool {
        if x_cam[2] < near || x_cam[2] > far || x_cam[2] <= S::zero() {
            return false;
        }
        let u = self.fx * x_cam[0] / x_cam[2] + self.cx;
        let v = self.fy * x_cam[1] / x_cam[2] + self.cy;
        u >= S::zero()
            && u <= S::from_us(self.width as usize)
            && v >= S::zero()
            && v <= S::from_us(self.height as usize)
    }

    /// Camera-frame corner directions and depth range of the frustum,
    /// returned as an axis-aligned bounding box of the 8 frustum corners.
    pub fn frustum_aabb(&self, near: S, far: S) -> ([S; 3], [S; 3]) {
        let mut lo = [S::infinity(); 3];
        let mut hi = [S::neg_infinity(); 3];
        for &z in &[near, far] {
            for &u in &[S::zero(), S::from_us(self.width as usize)] {
                for &v in &[S::zero(), S::from_us(self.height as usize)] {
                    let p = [
                        (u - self.cx) / self.fx * z,
                        (v - self.cy) / self.fy * z,
                        z,
                    ];
                    for k in 0..3 {
                        lo[k] = lo[k].min(p[k]);
                        hi[k] = hi[k].max(p[k]);
                    }
                }
            }
        }
        (lo, hi)
    }

    /// Casts to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Camera<T> {
        let c = |v: S| T::from_f(v.to_f());
        Camera {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            width: self.width,
            height: self.height,
            r: self.r.map(|row| row.map(c)),
            t: self.t.map(c),
        }
    }
}

/// Axis-aligned 2D box in pixel coordinates, clipped to the image on
/// construction. Degenerate boxes (zero width or height after clipping)
/// are representable and report `is_empty`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D<S: Scalar> {
    pub x0: S,
    pub y0: S,
    pub x1: S,
    pub y1: S,
}

impl<S: Scalar> Box2D<S> {
    /// Orders the corners and clips them to `[0, width] x [0, height]`.
    pub fn new(x0: S, y0: S, x1: S, y1: S, width: u32, height: u32) -> Self {
        let w = S::from_us(width as usize);
        let h = S::from_us(height as usize);
        let clamp = |v: S, hi: S| v.max(S::zero()).min(hi);
        let (ax, bx) = if x0 <= x1 { (x0, x1) } else { (x1, x0) };
        let (ay, by) = if y0 <= y1 { (y0, y1) } else { (y1, y0) };
        Box2D {
            x0: clamp(ax, w),
            y0: clamp(ay, h),
            x1: clamp(bx, w),
            y1: clamp(by, h),
        }
    }

    pub fn center(&self) -> [S; 2] {
        let half = S::from_f(0.5);
        [(self.x0 + self.x1) * half, (self.y0 + self.y1) * half]
    }

    pub fn width(&self) -> S {
        self.x1 - self.x0
    }

    pub fn height(&self) -> S {
        self.y1 - self.y0
    }

    pub fn area(&self) -> S {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.width() <= S::zero() || self.height() <= S::zero()
    }

    pub fn contains(&self, u: S, v: S) -> bool {
        u >= self.x0 && u <= self.x1 && v >= self.y0 && v <= self.y1
    }

    pub fn cast<T: Scalar>(&self) -> Box2D<T> {
        let c = |v: S| T::from_f(v.to_f());
        Box2D {
            x0: c(self.x0),
            y0: c(self.y0),
            x1: c(self.x1),
            y1: c(self.y1),
        }
    }
}

/// Maps an image pixel coordinate into the continuous coordinate system of
/// an `w_r x h_r` RoI grid over `bbox`. `(x0, y0)` maps to `(0, 0)` and
/// `(x1, y1)` to `(w_r, h_r)`; coordinates outside the box extrapolate
/// linearly (feature sampling clamps at the grid border).
pub fn roi_uv<S: Scalar>(bbox: &Box2D<S>, u: S, v: S, w_r: usize, h_r: usize) -> [S; 2] {
    debug_assert!(!bbox.is_empty(), "roi_uv over an empty box");
    [
        (u - bbox.x0) / bbox.width() * S::from_us(w_r),
        (v - bbox.y0) / bbox.height() * S::from_us(h_r),
    ]
}

/// Camera-frame pose of one object instance.
///
/// The canonical-to-camera map is `R_yaw(yaw) * diag(scale) * x + center`:
/// anisotropic scaling happens in the canonical axes, then a rotation about
/// the camera `y` axis (the gravity axis of an upright camera).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePose<S: Scalar> {
    /// Object centre in the camera frame.
    pub center: V3<S>,
    /// Per-axis half-extents applied to the canonical mesh.
    pub scale: V3<S>,
    /// Rotation about the camera `y` axis, in `[-pi, pi)`.
    pub yaw: S,
    pub category_id: usize,
}

impl<S: Scalar> InstancePose<S> {
    pub fn new(center: V3<S>, scale: V3<S>, yaw: S, category_id: usize) -> Self {
        InstancePose {
            center,
            scale,
            yaw: wrap_angle(yaw),
            category_id,
        }
    }

    pub fn canonical_to_camera(&self, x: V3<S>) -> V3<S> {
        add3(mat_vec(&rot_y(self.yaw), mul3(self.scale, x)), self.center)
    }

    pub fn camera_to_canonical(&self, x: V3<S>) -> V3<S> {
        let local = mat_vec(&rot_y(-self.yaw), sub3(x, self.center));
        [
            local[0] / self.scale[0],
            local[1] / self.scale[1],
            local[2] / self.scale[2],
        ]
    }

    /// Normalised depth of a camera-frame point relative to the instance:
    /// `(Z - c_z) / c_z`. The decoder consumes this instead of raw depth.
    pub fn relative_depth(&self, x_cam: V3<S>) -> S {
        (x_cam[2] - self.center[2]) / self.center[2]
    }

    pub fn cast<T: Scalar>(&self) -> InstancePose<T> {
        let c = |v: S| T::from_f(v.to_f());
        InstancePose {
            center: self.center.map(c),
            scale: self.scale.map(c),
            yaw: c(self.yaw),
            category_id: self.category_id,
        }
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle<S: Scalar>(a: S) -> S {
    let pi = S::from_f(std::f64::consts::PI);
    let two_pi = pi + pi;
    let mut w = (a + pi) % two_pi;
    if w < S::zero() {
        w = w + two_pi;
    }
    w - pi
}

/// Recovers an instance pose from its detected 2D box and depth: the centre
/// is placed `depth` along the viewing ray through the box centre shifted by
/// `delta` pixels. Scale, yaw and category come from the detector head.
pub fn pose_from_projection<S: Scalar>(
    camera: &Camera<S>,
    bbox: &Box2D<S>,
    depth: S,
    delta: [S; 2],
    scale: V3<S>,
    yaw: S,
    category_id: usize,
) -> Result<InstancePose<S>> {
    if depth <= S::zero() {
        return Err(Error::BehindCamera { z: depth.to_f() });
    }
    if bbox.is_empty() {
        return Err(Error::malformed("box2d", "empty box has no centre ray"));
    }
    let c = bbox.center();
    let dir = camera.pixel_ray(c[0] + delta[0], c[1] + delta[1]);
    Ok(InstancePose::new(
        scale3(dir, depth),
        scale,
        yaw,
        category_id,
    ))
}
