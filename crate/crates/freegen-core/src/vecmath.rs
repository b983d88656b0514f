//! Minimal fixed-size linear algebra. Hand-rolled rather than pulled in as a
//! dependency because the backward passes need derivative formulas (rotation
//! w.r.t. quaternion, symmetric 2x2 inverses) that generic crates don't
//! expose, and the forward ops are a page of code.

use core::ops::{Add, AddAssign, Mul, Neg, Sub};

use crate::fmath;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    #[inline]
    pub fn new(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3 { x, y, z }
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm(self) -> f64 {
        fmath::sqrt(self.dot(self))
    }

    #[inline]
    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    #[inline]
    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 =
        Mat3 { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };

    #[inline]
    pub fn zero() -> Mat3 {
        Mat3 { m: [[0.0; 3]; 3] }
    }

    pub fn from_rows(r0: [f64; 3], r1: [f64; 3], r2: [f64; 3]) -> Mat3 {
        Mat3 { m: [r0, r1, r2] }
    }

    pub fn diag(d: Vec3) -> Mat3 {
        let mut out = Mat3::zero();
        out.m[0][0] = d.x;
        out.m[1][1] = d.y;
        out.m[2][2] = d.z;
        out
    }

    #[inline]
    pub fn transpose(&self) -> Mat3 {
        let m = &self.m;
        Mat3::from_rows(
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = Mat3::zero();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += self.m[i][k] * o.m[k][j];
                }
                out.m[i][j] = acc;
            }
        }
        out
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(
            self.m[0][0] * v.x + self.m[0][1] * v.y + self.m[0][2] * v.z,
            self.m[1][0] * v.x + self.m[1][1] * v.y + self.m[1][2] * v.z,
            self.m[2][0] * v.x + self.m[2][1] * v.y + self.m[2][2] * v.z,
        )
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut out = *self;
        for row in out.m.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        out
    }

    pub fn add_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = *self;
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] += o.m[i][j];
            }
        }
        out
    }

    /// Frobenius inner product, the contraction used when chaining matrix
    /// derivatives: sum_ij a_ij * b_ij.
    pub fn frob_dot(&self, o: &Mat3) -> f64 {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += self.m[i][j] * o.m[i][j];
            }
        }
        acc
    }
}

/// Quaternion in (w, x, y, z) order. Not kept normalized; consumers that need
/// a rotation normalize explicitly so the derivative of that normalization is
/// part of the differentiated graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    #[inline]
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Quat {
        Quat { w, x, y, z }
    }

    #[inline]
    pub fn norm(self) -> f64 {
        fmath::sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)
    }

    #[inline]
    pub fn normalized(self) -> Quat {
        let inv = 1.0 / self.norm();
        Quat::new(self.w * inv, self.x * inv, self.y * inv, self.z * inv)
    }

    /// Rotation about `axis` (need not be unit) by `angle` radians.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Quat {
        let half = 0.5 * angle;
        let a = axis.normalized() * fmath::sin(half);
        Quat::new(fmath::cos(half), a.x, a.y, a.z)
    }

    /// Hamilton product self * o.
    pub fn mul_quat(self, o: Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Rotation matrix of the *normalized* quaternion.
    pub fn rotation_matrix(self) -> Mat3 {
        let q = self.normalized();
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        Mat3::from_rows(
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        )
    }

    /// dR/d(w,x,y,z) at the *unit* quaternion `self` (caller normalizes
    /// first). Chain through [`Quat::normalization_backward`] to reach the raw
    /// parameters.
    pub fn rotation_matrix_jacobian(self) -> [Mat3; 4] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let dw = Mat3::from_rows([0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]).scale(2.0);
        let dx = Mat3::from_rows([0.0, y, z], [y, -2.0 * x, -w], [z, w, -2.0 * x]).scale(2.0);
        let dy = Mat3::from_rows([-2.0 * y, x, w], [x, 0.0, z], [-w, z, -2.0 * y]).scale(2.0);
        let dz = Mat3::from_rows([-2.0 * z, -w, x], [w, -2.0 * z, y], [x, y, 0.0]).scale(2.0);
        [dw, dx, dy, dz]
    }

    /// Pulls a gradient w.r.t. the normalized quaternion back to the raw one:
    /// d(q/|q|)/dq = (I - u u^T) / |q| with u = q/|q|.
    pub fn normalization_backward(self, grad_unit: [f64; 4]) -> [f64; 4] {
        let n = self.norm();
        let u = [self.w / n, self.x / n, self.y / n, self.z / n];
        let proj = grad_unit[0] * u[0] + grad_unit[1] * u[1] + grad_unit[2] * u[2] + grad_unit[3] * u[3];
        [
            (grad_unit[0] - proj * u[0]) / n,
            (grad_unit[1] - proj * u[1]) / n,
            (grad_unit[2] - proj * u[2]) / n,
            (grad_unit[3] - proj * u[3]) / n,
        ]
    }

    #[inline]
    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

/// Symmetric 2x2 matrix, stored as (xx, xy, yy).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Sym2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Sym2 {
    #[inline]
    pub fn new(a: f64, b: f64, c: f64) -> Sym2 {
        Sym2 { a, b, c }
    }

    #[inline]
    pub fn det(self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    /// Inverse; caller guarantees the determinant is positive (covariances
    /// here always carry a +0.3 diagonal floor).
    #[inline]
    pub fn inverse(self) -> Sym2 {
        let inv_det = 1.0 / self.det();
        Sym2::new(self.c * inv_det, -self.b * inv_det, self.a * inv_det)
    }

    /// Larger eigenvalue; used for conservative splat extents.
    pub fn max_eigenvalue(self) -> f64 {
        let mid = 0.5 * (self.a + self.c);
        let diff = 0.5 * (self.a - self.c);
        mid + fmath::sqrt(diff * diff + self.b * self.b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let q = Quat::new(0.3, -0.5, 0.7, 0.2);
        let r = q.rotation_matrix();
        let rtr = r.transpose().mul_mat(&r);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(approx(rtr.m[i][j], want, 1e-12), "rtr[{i}][{j}] = {}", rtr.m[i][j]);
            }
        }
    }

    #[test]
    fn identity_quat_gives_identity_matrix() {
        let r = Quat::IDENTITY.rotation_matrix();
        assert_eq!(r, Mat3::IDENTITY);
    }

    #[test]
    fn quarter_turn_about_y() {
        // +90 deg about +y maps +z to +x.
        let q = Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), core::f64::consts::FRAC_PI_2);
        let v = q.rotation_matrix().mul_vec(Vec3::new(0.0, 0.0, 1.0));
        assert!(approx(v.x, 1.0, 1e-12) && approx(v.y, 0.0, 1e-12) && approx(v.z, 0.0, 1e-12));
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        // Differentiate each entry of R(q/|q|) w.r.t. the raw components and
        // compare against the analytic jacobian + normalization pullback.
        let q = Quat::new(0.9, -0.2, 0.35, 0.1);
        let h = 1e-6;
        let unit = q.normalized();
        let jac = unit.rotation_matrix_jacobian();
        for i in 0..3 {
            for j in 0..3 {
                // Analytic: gradient of entry (i, j) w.r.t. unit quat, pulled back.
                let g_unit = [jac[0].m[i][j], jac[1].m[i][j], jac[2].m[i][j], jac[3].m[i][j]];
                let g_raw = q.normalization_backward(g_unit);
                let comps: Vec<f64> = (0..4)
                    .map(|k| {
                        let mut qp = q.to_array();
                        let mut qm = q.to_array();
                        qp[k] += h;
                        qm[k] -= h;
                        let rp = Quat::new(qp[0], qp[1], qp[2], qp[3]).rotation_matrix();
                        let rm = Quat::new(qm[0], qm[1], qm[2], qm[3]).rotation_matrix();
                        (rp.m[i][j] - rm.m[i][j]) / (2.0 * h)
                    })
                    .collect();
                for k in 0..4 {
                    assert!(
                        approx(g_raw[k], comps[k], 1e-6),
                        "entry ({i},{j}) component {k}: analytic {} vs fd {}",
                        g_raw[k],
                        comps[k]
                    );
                }
            }
        }
    }

    #[test]
    fn sym2_inverse_roundtrip() {
        let s = Sym2::new(2.5, 0.4, 1.2);
        let inv = s.inverse();
        // s * inv should be the identity.
        let m00 = s.a * inv.a + s.b * inv.b;
        let m01 = s.a * inv.b + s.b * inv.c;
        let m11 = s.b * inv.b + s.c * inv.c;
        assert!(approx(m00, 1.0, 1e-12));
        assert!(approx(m01, 0.0, 1e-12));
        assert!(approx(m11, 1.0, 1e-12));
    }

    #[test]
    fn sym2_max_eigenvalue_dominates_quadratic_form() {
        let s = Sym2::new(3.0, 1.1, 2.0);
        let lam = s.max_eigenvalue();
        // Rayleigh quotient along a few directions never exceeds the max eigenvalue.
        for k in 0..8 {
            let th = k as f64 * 0.7;
            let (x, y) = (crate::fmath::cos(th), crate::fmath::sin(th));
            let q = s.a * x * x + 2.0 * s.b * x * y + s.c * y * y;
            assert!(q <= lam + 1e-12);
        }
    }
}
