//! Minimal 3-D geometry: vectors and yaw-oriented boxes with exact
//! ray intersection and point containment.

use crate::real::Real;
use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[T; 3]", into = "[T; 3]")]
pub struct Vec3<T: Real> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Self {
        self * (T::one() / self.norm())
    }

    /// Rotate about the +z axis by `yaw` radians.
    pub fn rot_z(self, yaw: T) -> Self {
        let (s, c) = (yaw.sin(), yaw.cos());
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }
}

impl<T: Real> From<[T; 3]> for Vec3<T> {
    fn from(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl<T: Real> From<Vec3<T>> for [T; 3] {
    fn from(v: Vec3<T>) -> Self {
        [v.x, v.y, v.z]
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

/// A cuboid rotated by `yaw` about +z around its center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3<T: Real> {
    pub center: Vec3<T>,
    pub yaw: T,
    pub half_extents: Vec3<T>,
}

impl<T: Real> Box3<T> {
    pub fn new(center: Vec3<T>, yaw: T, half_extents: Vec3<T>) -> Self {
        Self { center, yaw, half_extents }
    }

    fn to_local(&self, p: Vec3<T>) -> Vec3<T> {
        (p - self.center).rot_z(-self.yaw)
    }

    /// Containment with `<=` on faces.
    pub fn contains(&self, p: Vec3<T>) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.half_extents.x
            && l.y.abs() <= self.half_extents.y
            && l.z.abs() <= self.half_extents.z
    }

    /// Nearest intersection of the ray `origin + t * dir` (`dir` unit length)
    /// with the box surface; returns `(t, outward unit normal)` for t > 0.
    pub fn raycast(&self, origin: Vec3<T>, dir: Vec3<T>) -> Option<(T, Vec3<T>)> {
        let o = self.to_local(origin);
        let d = dir.rot_z(-self.yaw);
        let o_ax = [o.x, o.y, o.z];
        let d_ax = [d.x, d.y, d.z];
        let h_ax = [self.half_extents.x, self.half_extents.y, self.half_extents.z];

        let mut t_near = T::neg_infinity();
        let mut t_far = T::infinity();
        let mut near_axis = 0usize;
        let mut near_sign = T::one();
        for ax in 0..3 {
            if d_ax[ax] == T::zero() {
                if o_ax[ax].abs() > h_ax[ax] {
                    return None;
                }
                continue;
            }
            let inv = T::one() / d_ax[ax];
            let mut t0 = (-h_ax[ax] - o_ax[ax]) * inv;
            let mut t1 = (h_ax[ax] - o_ax[ax]) * inv;
            let mut sign = -T::one();
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
                sign = T::one();
            }
            if t0 > t_near {
                t_near = t0;
                near_axis = ax;
                near_sign = sign;
            }
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        // Entry point only; rays starting inside the box do not report a hit.
        if t_near <= T::zero() || !t_near.is_finite() {
            return None;
        }
        let mut n_local = Vec3::zero();
        match near_axis {
            0 => n_local.x = near_sign,
            1 => n_local.y = near_sign,
            _ => n_local.z = near_sign,
        }
        Some((t_near, n_local.rot_z(self.yaw)))
    }
}
