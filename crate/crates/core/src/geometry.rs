//! Small fixed-size linear algebra generic over [`Real`], so rigid-body
//! compositions can be recorded on the AD tape.

use crate::ad::Real;

#[derive(Clone, Copy, Debug)]
pub struct Vec3<T>(pub [T; 3]);

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug)]
pub struct Mat3<T>(pub [[T; 3]; 3]);

impl<T: Real> Vec3<T> {
    pub fn from_f64(like: T, v: [f64; 3]) -> Self {
        Vec3([like.lift(v[0]), like.lift(v[1]), like.lift(v[2])])
    }

    pub fn value(&self) -> [f64; 3] {
        [self.0[0].value(), self.0[1].value(), self.0[2].value()]
    }

    pub fn add(&self, o: &Self) -> Self {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }

    pub fn add_const(&self, c: [f64; 3]) -> Self {
        Vec3([self.0[0] + c[0], self.0[1] + c[1], self.0[2] + c[2]])
    }
}

impl<T: Real> Mat3<T> {
    pub fn identity(like: T) -> Self {
        let z = like.lift(0.0);
        let o = like.lift(1.0);
        Mat3([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn from_f64(like: T, m: [[f64; 3]; 3]) -> Self {
        Mat3(m.map(|row| row.map(|v| like.lift(v))))
    }

    pub fn value(&self) -> [[f64; 3]; 3] {
        self.0.map(|row| row.map(|v| v.value()))
    }

    fn column(&self, j: usize) -> [T; 3] {
        [self.0[0][j], self.0[1][j], self.0[2][j]]
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let cols = [o.column(0), o.column(1), o.column(2)];
        Mat3(std::array::from_fn(|i| {
            std::array::from_fn(|j| T::dot(&self.0[i], &cols[j]))
        }))
    }

    pub fn mul_vec(&self, v: &Vec3<T>) -> Vec3<T> {
        Vec3(std::array::from_fn(|i| T::dot(&self.0[i], &v.0)))
    }

    /// `origin + self · v` for a constant vector `v`, one fused node per row.
    pub fn transform_const(&self, origin: &Vec3<T>, v: [f64; 3]) -> Vec3<T> {
        Vec3(std::array::from_fn(|i| {
            let row = &self.0[i];
            T::affine(0.0, &[1.0, v[0], v[1], v[2]], &[origin.0[i], row[0], row[1], row[2]])
        }))
    }

    /// `origin + self · v`, one fused node per row.
    pub fn transform(&self, origin: &Vec3<T>, v: &Vec3<T>) -> Vec3<T> {
        let one = origin.0[0].lift(1.0);
        Vec3(std::array::from_fn(|i| {
            let row = &self.0[i];
            T::dot(&[row[0], row[1], row[2], origin.0[i]], &[v.0[0], v.0[1], v.0[2], one])
        }))
    }

    /// Rotation by `angle` about the unit `axis` (Rodrigues). Every entry is
    /// affine in `(cos θ, sin θ)` with constant coefficients.
    pub fn axis_angle(axis: [f64; 3], angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let [x, y, z] = axis;
        let outer = [[x * x, x * y, x * z], [y * x, y * y, y * z], [z * x, z * y, z * z]];
        // [a]x
        let cross = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
        Mat3(std::array::from_fn(|i| {
            std::array::from_fn(|j| {
                let id = if i == j { 1.0 } else { 0.0 };
                // R = c I + (1 - c) a aᵀ + s [a]x
                T::affine(outer[i][j], &[id - outer[i][j], cross[i][j]], &[c, s])
            })
        }))
    }
}

/// Intrinsic X-Y-Z rotation `Rx(rx) · Ry(ry) · Rz(rz)`.
pub fn euler_xyz<T: Real>(rx: T, ry: T, rz: T) -> Mat3<T> {
    let x = Mat3::axis_angle([1.0, 0.0, 0.0], rx);
    let y = Mat3::axis_angle([0.0, 1.0, 0.0], ry);
    let z = Mat3::axis_angle([0.0, 0.0, 1.0], rz);
    x.mul_mat(&y).mul_mat(&z)
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn quaternion_to_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Unit quaternion `[w, x, y, z]` of a proper rotation matrix.
pub fn matrix_to_quaternion(m: [[f64; 3]; 3]) -> [f64; 4] {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

pub fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_angle_quarter_turn_about_z() {
        let r = Mat3::axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2).value();
        let v = [r[0][0], r[1][0], r[2][0]];
        assert!((v[0]).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15 && v[2].abs() < 1e-15);
    }

    #[test]
    fn quaternion_round_trip() {
        let m = euler_xyz(0.3, -1.1, 2.0).value();
        let q = matrix_to_quaternion(m);
        let back = quaternion_to_matrix(q);
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[i][j] - back[i][j]).abs() < 1e-12);
            }
        }
    }
}
