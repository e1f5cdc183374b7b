//! Minimal fixed-size 3D linear algebra over a generic scalar.

use crate::scalar::{real, Real};

/// 3-vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3<S: Real = f64>(pub [S; 3]);

impl<S: Real> Vec3<S> {
    #[inline]
    pub fn new(x: S, y: S, z: S) -> Self {
        Vec3([x, y, z])
    }

    #[inline]
    pub fn zero() -> Self {
        Vec3([S::zero(); 3])
    }

    #[inline]
    pub fn x(&self) -> S {
        self.0[0]
    }

    #[inline]
    pub fn y(&self) -> S {
        self.0[1]
    }

    #[inline]
    pub fn z(&self) -> S {
        self.0[2]
    }

    #[inline]
    pub fn add(&self, o: &Vec3<S>) -> Vec3<S> {
        Vec3([
            self.0[0] + o.0[0],
            self.0[1] + o.0[1],
            self.0[2] + o.0[2],
        ])
    }

    #[inline]
    pub fn sub(&self, o: &Vec3<S>) -> Vec3<S> {
        Vec3([
            self.0[0] - o.0[0],
            self.0[1] - o.0[1],
            self.0[2] - o.0[2],
        ])
    }

    #[inline]
    pub fn scale(&self, a: S) -> Vec3<S> {
        Vec3([self.0[0] * a, self.0[1] * a, self.0[2] * a])
    }

    #[inline]
    pub fn dot(&self, o: &Vec3<S>) -> S {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    #[inline]
    pub fn norm(&self) -> S {
        self.dot(self).sqrt()
    }

    pub fn cross(&self, o: &Vec3<S>) -> Vec3<S> {
        Vec3([
            self.0[1] * o.0[2] - self.0[2] * o.0[1],
            self.0[2] * o.0[0] - self.0[0] * o.0[2],
            self.0[0] * o.0[1] - self.0[1] * o.0[0],
        ])
    }

    pub fn normalized(&self) -> Vec3<S> {
        let n = self.norm();
        self.scale(S::one() / n)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<S: Real = f64>(pub [[S; 3]; 3]);

impl<S: Real> Mat3<S> {
    pub fn identity() -> Self {
        let mut m = [[S::zero(); 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = S::one();
        }
        Mat3(m)
    }

    pub fn zeros() -> Self {
        Mat3([[S::zero(); 3]; 3])
    }

    pub fn mul(&self, o: &Mat3<S>) -> Mat3<S> {
        let mut out = [[S::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = S::zero();
                for (k, ok) in o.0.iter().enumerate() {
                    acc = acc + self.0[i][k] * ok[j];
                }
                out[i][j] = acc;
            }
        }
        Mat3(out)
    }

    pub fn mul_vec(&self, v: &Vec3<S>) -> Vec3<S> {
        let mut out = [S::zero(); 3];
        for (i, row) in self.0.iter().enumerate() {
            out[i] = row[0] * v.0[0] + row[1] * v.0[1] + row[2] * v.0[2];
        }
        Vec3(out)
    }

    pub fn transpose(&self) -> Mat3<S> {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> S {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn trace(&self) -> S {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    /// Max absolute deviation of `self^T self` from the identity.
    pub fn orthonormality_defect(&self) -> S {
        let g = self.transpose().mul(self);
        let mut worst = S::zero();
        for (i, row) in g.0.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let target = if i == j { S::one() } else { S::zero() };
                let d = (v - target).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }

    pub fn is_rotation(&self, tol: S) -> bool {
        self.orthonormality_defect() <= tol && (self.det() - S::one()).abs() <= tol
    }
}

/// Rotation about the x axis.
pub fn rot_x<S: Real>(angle: S) -> Mat3<S> {
    let (s, c) = angle.sin_cos();
    Mat3([
        [S::one(), S::zero(), S::zero()],
        [S::zero(), c, -s],
        [S::zero(), s, c],
    ])
}

/// Rotation about the y axis.
pub fn rot_y<S: Real>(angle: S) -> Mat3<S> {
    let (s, c) = angle.sin_cos();
    Mat3([
        [c, S::zero(), s],
        [S::zero(), S::one(), S::zero()],
        [-s, S::zero(), c],
    ])
}

/// Rotation about the z axis.
pub fn rot_z<S: Real>(angle: S) -> Mat3<S> {
    let (s, c) = angle.sin_cos();
    Mat3([
        [c, -s, S::zero()],
        [s, c, S::zero()],
        [S::zero(), S::zero(), S::one()],
    ])
}

pub fn drot_x<S: Real>(angle: S) -> Mat3<S> {
    let (s, c) = angle.sin_cos();
    Mat3([
        [S::zero(), S::zero(), S::zero()],
        [S::zero(), -s, -c],
        [S::zero(), c, -s],
    ])
}

pub fn drot_y<S: Real>(angle: S) -> Mat3<S> {
    let (s, c) = angle.sin_cos();
    Mat3([
        [-s, S::zero(), c],
        [S::zero(), S::zero(), S::zero()],
        [-c, S::zero(), -s],
    ])
}

pub fn drot_z<S: Real>(angle: S) -> Mat3<S> {
    let (s, c) = angle.sin_cos();
    Mat3([
        [-s, -c, S::zero()],
        [c, -s, S::zero()],
        [S::zero(), S::zero(), S::zero()],
    ])
}

/// Rotation by `angle` about a unit `axis` (Rodrigues form).
pub fn rotation_about_axis<S: Real>(axis: &Vec3<S>, angle: S) -> Mat3<S> {
    let u = axis.normalized();
    let (s, c) = angle.sin_cos();
    let one_c = S::one() - c;
    let (x, y, z) = (u.x(), u.y(), u.z());
    Mat3([
        [
            c + x * x * one_c,
            x * y * one_c - z * s,
            x * z * one_c + y * s,
        ],
        [
            y * x * one_c + z * s,
            c + y * y * one_c,
            y * z * one_c - x * s,
        ],
        [
            z * x * one_c - y * s,
            z * y * one_c + x * s,
            c + z * z * one_c,
        ],
    ])
}

pub fn vec3_from_f64<S: Real>(v: [f64; 3]) -> Vec3<S> {
    Vec3([real(v[0]), real(v[1]), real(v[2])])
}
