//! Small fixed-size math shared by every other module: quaternions,
//! triangle-local frames and real spherical harmonics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Triangles with area below this are rejected when building a frame.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

/// Rotation quaternion stored as `(w, x, y, z)`.
///
/// Values held in a [`crate::scene::GaussianSet`] are raw optimizer state and
/// may drift away from unit length; call [`Quat::normalized`] before using
/// one as a rotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let axis = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, axis.x * s, axis.y * s, axis.z * s)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    /// Sign-flipped so that `w >= 0`.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            Self::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            *self
        }
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(&self, other: &Quat) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Hamilton product `self ⊗ rhs` (apply `rhs` first, then `self`).
    pub fn mul(&self, rhs: &Quat) -> Quat {
        let (a, b) = (self, rhs);
        Quat::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Vector-Jacobian product of [`Quat::mul`]: given `g = dL/d(self ⊗ rhs)`,
    /// returns `(dL/dself, dL/drhs)`.
    pub fn mul_vjp(&self, rhs: &Quat, g: &[f64; 4]) -> ([f64; 4], [f64; 4]) {
        let (a, b) = (self, rhs);
        let [gw, gx, gy, gz] = *g;
        let d_rhs = [
            a.w * gw + a.x * gx + a.y * gy + a.z * gz,
            -a.x * gw + a.w * gx + a.z * gy - a.y * gz,
            -a.y * gw - a.z * gx + a.w * gy + a.x * gz,
            -a.z * gw + a.y * gx - a.x * gy + a.w * gz,
        ];
        let d_self = [
            b.w * gw + b.x * gx + b.y * gy + b.z * gz,
            -b.x * gw + b.w * gx - b.z * gy + b.y * gz,
            -b.y * gw + b.z * gx + b.w * gy - b.x * gz,
            -b.z * gw - b.y * gx + b.x * gy + b.w * gz,
        ];
        (d_self, d_rhs)
    }

    /// Rotation matrix of a unit quaternion. The polynomial form is used as is,
    /// so the input must already be normalized.
    pub fn to_matrix(&self) -> Matrix3<f64> {
        let Quat { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Gradient of a scalar through [`Quat::to_matrix`]: `dL/dq` given `dL/dR`.
    pub fn to_matrix_vjp(&self, g: &Matrix3<f64>) -> [f64; 4] {
        let Quat { w, x, y, z } = *self;
        let g = |r: usize, c: usize| g[(r, c)];
        let dw = 2.0
            * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
        let dx = 2.0
            * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1))
            - 4.0 * x * (g(1, 1) + g(2, 2));
        let dy = 2.0
            * (x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1))
            - 4.0 * y * (g(0, 0) + g(2, 2));
        let dz = 2.0
            * (-w * g(0, 1) + x * g(0, 2) + w * g(1, 0) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
            - 4.0 * z * (g(0, 0) + g(1, 1));
        [dw, dx, dy, dz]
    }

    /// Quaternion of a proper rotation matrix, in canonical (`w >= 0`) form.
    pub fn from_matrix(m: &Matrix3<f64>) -> Quat {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quat::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quat::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalized().canonical()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.to_matrix() * v
    }
}

/// Backward pass of `q / |q|`: maps `dL/d(q̂)` to `dL/dq`.
pub fn normalize_vjp(q: &Quat, g: &[f64; 4]) -> [f64; 4] {
    let n = q.norm();
    let u = q.to_array().map(|c| c / n);
    let proj: f64 = (0..4).map(|i| u[i] * g[i]).sum();
    [0, 1, 2, 3].map(|i| (g[i] - u[i] * proj) / n)
}

/// Orthonormal frame attached to a triangle: origin at the vertex mean,
/// tangent along the first edge, normal from the edge cross product.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangleFrame {
    pub origin: Vector3<f64>,
    pub tangent: Vector3<f64>,
    pub bitangent: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl TriangleFrame {
    /// Columns `[i | j | k]`.
    pub fn basis(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.tangent, self.bitangent, self.normal])
    }

    pub fn to_world(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.origin + self.tangent * local.x + self.bitangent * local.y + self.normal * local.z
    }

    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let d = p - self.origin;
        Vector3::new(d.dot(&self.tangent), d.dot(&self.bitangent), d.dot(&self.normal))
    }
}

pub fn triangle_area(v0: &Vector3<f64>, v1: &Vector3<f64>, v2: &Vector3<f64>) -> f64 {
    0.5 * (v1 - v0).cross(&(v2 - v0)).norm()
}

pub fn triangle_frame(
    v0: &Vector3<f64>,
    v1: &Vector3<f64>,
    v2: &Vector3<f64>,
) -> Result<TriangleFrame> {
    let e1 = v1 - v0;
    let cross = e1.cross(&(v2 - v0));
    let area = 0.5 * cross.norm();
    if !(area > MIN_TRIANGLE_AREA) {
        return Err(Error::DegenerateTriangle { face: None, area });
    }
    let tangent = e1.normalize();
    let normal = cross / (2.0 * area);
    let bitangent = normal.cross(&tangent);
    Ok(TriangleFrame {
        origin: (v0 + v1 + v2) / 3.0,
        tangent,
        bitangent,
        normal,
    })
}

/// Rotation carrying the canonical frame onto the posed one, `B_posed · B_canonicalᵀ`.
pub fn frame_rotation_matrix(canonical: &TriangleFrame, posed: &TriangleFrame) -> Matrix3<f64> {
    posed.basis() * canonical.basis().transpose()
}

pub fn frame_rotation_quaternion(canonical: &TriangleFrame, posed: &TriangleFrame) -> Quat {
    Quat::from_matrix(&frame_rotation_matrix(canonical, posed))
}

// Real spherical harmonics in the ordering used by most splatting renderers.

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: usize = 3;

/// Basis functions per color channel for a given degree, `(degree + 1)²`.
pub const fn sh_basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Total coefficient count for RGB, `3 · (degree + 1)²`.
pub const fn sh_coeff_count(degree: usize) -> usize {
    3 * sh_basis_count(degree)
}

/// Evaluates the basis up to `degree` at a unit direction, writing into the
/// first `(degree + 1)²` entries. When `grad` is given it also receives the
/// derivative of each basis function with respect to the (unnormalized)
/// direction components.
pub fn sh_basis(
    degree: usize,
    dir: &Vector3<f64>,
    out: &mut [f64; 16],
    mut grad: Option<&mut [[f64; 3]; 16]>,
) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = SH_C0;
    if let Some(g) = grad.as_deref_mut() {
        *g = [[0.0; 3]; 16];
    }
    if degree == 0 {
        return;
    }
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if let Some(g) = grad.as_deref_mut() {
        g[1] = [0.0, -SH_C1, 0.0];
        g[2] = [0.0, 0.0, SH_C1];
        g[3] = [-SH_C1, 0.0, 0.0];
    }
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let c = SH_C2;
    out[4] = c[0] * x * y;
    out[5] = c[1] * y * z;
    out[6] = c[2] * (2.0 * zz - xx - yy);
    out[7] = c[3] * x * z;
    out[8] = c[4] * (xx - yy);
    if let Some(g) = grad.as_deref_mut() {
        g[4] = [c[0] * y, c[0] * x, 0.0];
        g[5] = [0.0, c[1] * z, c[1] * y];
        g[6] = [-2.0 * c[2] * x, -2.0 * c[2] * y, 4.0 * c[2] * z];
        g[7] = [c[3] * z, 0.0, c[3] * x];
        g[8] = [2.0 * c[4] * x, -2.0 * c[4] * y, 0.0];
    }
    if degree == 2 {
        return;
    }
    let c = SH_C3;
    out[9] = c[0] * y * (3.0 * xx - yy);
    out[10] = c[1] * x * y * z;
    out[11] = c[2] * y * (4.0 * zz - xx - yy);
    out[12] = c[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = c[4] * x * (4.0 * zz - xx - yy);
    out[14] = c[5] * z * (xx - yy);
    out[15] = c[6] * x * (xx - 3.0 * yy);
    if let Some(g) = grad {
        g[9] = [6.0 * c[0] * x * y, c[0] * (3.0 * xx - 3.0 * yy), 0.0];
        g[10] = [c[1] * y * z, c[1] * x * z, c[1] * x * y];
        g[11] = [
            -2.0 * c[2] * x * y,
            c[2] * (4.0 * zz - xx - 3.0 * yy),
            8.0 * c[2] * y * z,
        ];
        g[12] = [
            -6.0 * c[3] * x * z,
            -6.0 * c[3] * y * z,
            c[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ];
        g[13] = [
            c[4] * (4.0 * zz - 3.0 * xx - yy),
            -2.0 * c[4] * x * y,
            8.0 * c[4] * x * z,
        ];
        g[14] = [2.0 * c[5] * x * z, -2.0 * c[5] * y * z, c[5] * (xx - yy)];
        g[15] = [c[6] * (3.0 * xx - 3.0 * yy), -6.0 * c[6] * x * y, 0.0];
    }
}

/// Color from coefficient-major SH (`coeffs[k * 3 + channel]`).
pub fn eval_sh(degree: usize, coeffs: &[f64], dir: &Vector3<f64>) -> [f64; 3] {
    debug_assert_eq!(coeffs.len(), sh_coeff_count(degree));
    let mut basis = [0.0; 16];
    sh_basis(degree, dir, &mut basis, None);
    let mut rgb = [0.0; 3];
    for (k, b) in basis.iter().take(sh_basis_count(degree)).enumerate() {
        for (c, out) in rgb.iter_mut().enumerate() {
            *out += coeffs[k * 3 + c] * b;
        }
    }
    rgb
}

/// Owned SH coefficient block for a single Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct ShCoeffs {
    pub degree: usize,
    pub coeffs: Vec<f64>,
}

impl ShCoeffs {
    pub fn zeros(degree: usize) -> Self {
        Self {
            degree,
            coeffs: vec![0.0; sh_coeff_count(degree)],
        }
    }

    /// Coefficients whose view-independent band reproduces `rgb`.
    pub fn from_rgb(degree: usize, rgb: [f64; 3]) -> Self {
        let mut sh = Self::zeros(degree);
        for c in 0..3 {
            sh.coeffs[c] = rgb[c] / SH_C0;
        }
        sh
    }

    pub fn eval(&self, dir: &Vector3<f64>) -> [f64; 3] {
        eval_sh(self.degree, &self.coeffs, dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn close(a: &Vector3<f64>, b: &Vector3<f64>, tol: f64) -> bool {
        (a - b).amax() <= tol
    }

    #[test]
    fn right_triangle_frame() {
        let f = triangle_frame(&v(0., 0., 0.), &v(1., 0., 0.), &v(0., 1., 0.)).unwrap();
        assert!(close(&f.origin, &v(1. / 3., 1. / 3., 0.), 1e-15));
        assert_eq!(f.tangent, v(1., 0., 0.));
        assert_eq!(f.normal, v(0., 0., 1.));
        assert!(close(&f.bitangent, &v(0., 1., 0.), 1e-15));
    }

    #[test]
    fn equilateral_origin() {
        let f = triangle_frame(&v(0., 0., 0.), &v(1., 0., 0.), &v(0.5, 0.866, 0.)).unwrap();
        assert!(close(&f.origin, &v(0.5, 0.2887, 0.), 1e-4));
    }

    #[test]
    fn degenerate_rejected() {
        let err = triangle_frame(&v(0., 0., 0.), &v(1., 0., 0.), &v(2., 0., 0.)).unwrap_err();
        assert!(matches!(err, Error::DegenerateTriangle { .. }));
        let tiny = triangle_frame(&v(0., 0., 0.), &v(1e-7, 0., 0.), &v(0., 1e-7, 0.));
        assert!(tiny.is_err());
    }

    #[test]
    fn frame_rotation_identity_and_quarter_turn() {
        let a = triangle_frame(&v(0., 0., 0.), &v(1., 0., 0.), &v(0., 1., 0.)).unwrap();
        let q = frame_rotation_quaternion(&a, &a);
        assert!((q.w - 1.0).abs() < 1e-12 && q.x.abs() < 1e-12);

        let rz = Quat::from_axis_angle(&v(0., 0., 1.), std::f64::consts::FRAC_PI_2);
        let r = rz.to_matrix();
        let b = triangle_frame(&(r * v(0., 0., 0.)), &(r * v(1., 0., 0.)), &(r * v(0., 1., 0.)))
            .unwrap();
        let q = frame_rotation_quaternion(&a, &b);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((q.w - h).abs() < 1e-12 && (q.z - h).abs() < 1e-12);
        assert!(q.x.abs() < 1e-12 && q.y.abs() < 1e-12);
    }

    #[test]
    fn degree_zero_sh() {
        let sh = ShCoeffs {
            degree: 0,
            coeffs: vec![1.0; 3],
        };
        for c in sh.eval(&v(0.3, -0.4, 0.866)) {
            assert!((c - 0.28209).abs() < 1e-5);
        }
        assert_eq!(ShCoeffs::zeros(0).eval(&v(0., 0., 1.)), [0.0; 3]);
    }

    #[test]
    fn degree_one_sh_flips_with_z() {
        let mut sh = ShCoeffs::zeros(1);
        // basis index 2 is the z-linear term
        for c in 0..3 {
            sh.coeffs[2 * 3 + c] = 0.7 + c as f64;
        }
        sh.coeffs[0] = 0.2;
        let up = sh.eval(&v(0., 0., 1.));
        let down = sh.eval(&v(0., 0., -1.));
        for c in 0..3 {
            let expected = 2.0 * sh.coeffs[2 * 3 + c] * SH_C1;
            assert!((up[c] - down[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn sh_basis_gradient_matches_finite_differences() {
        let dir = v(0.31, -0.52, 0.79);
        let mut basis = [0.0; 16];
        let mut grad = [[0.0; 3]; 16];
        sh_basis(3, &dir, &mut basis, Some(&mut grad));
        let h = 1e-6;
        for axis in 0..3 {
            let mut dp = dir;
            let mut dm = dir;
            dp[axis] += h;
            dm[axis] -= h;
            let (mut bp, mut bm) = ([0.0; 16], [0.0; 16]);
            sh_basis(3, &dp, &mut bp, None);
            sh_basis(3, &dm, &mut bm, None);
            for k in 0..16 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - grad[k][axis]).abs() < 1e-8, "basis {k} axis {axis}");
            }
        }
    }

    #[test]
    fn to_matrix_vjp_matches_finite_differences() {
        let q = Quat::new(0.3, -0.5, 0.7, 0.2);
        let g = Matrix3::new(0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, -0.8, 0.9);
        let analytic = q.to_matrix_vjp(&g);
        let h = 1e-6;
        for i in 0..4 {
            let mut p = q.to_array();
            let mut m = q.to_array();
            p[i] += h;
            m[i] -= h;
            let fp = Quat::from_array(p).to_matrix().component_mul(&g).sum();
            let fm = Quat::from_array(m).to_matrix().component_mul(&g).sum();
            assert!(((fp - fm) / (2.0 * h) - analytic[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn mul_vjp_matches_finite_differences() {
        let a = Quat::new(0.3, -0.5, 0.7, 0.2);
        let b = Quat::new(-0.1, 0.4, 0.2, 0.9);
        let g = [0.3, -0.7, 0.2, 0.5];
        let f = |a: Quat, b: Quat| {
            let p = a.mul(&b).to_array();
            (0..4).map(|i| p[i] * g[i]).sum::<f64>()
        };
        let (da, db) = a.mul_vjp(&b, &g);
        let h = 1e-6;
        for i in 0..4 {
            let mut p = a.to_array();
            let mut m = a.to_array();
            p[i] += h;
            m[i] -= h;
            let fd = (f(Quat::from_array(p), b) - f(Quat::from_array(m), b)) / (2.0 * h);
            assert!((fd - da[i]).abs() < 1e-9);
            let mut p = b.to_array();
            let mut m = b.to_array();
            p[i] += h;
            m[i] -= h;
            let fd = (f(a, Quat::from_array(p)) - f(a, Quat::from_array(m))) / (2.0 * h);
            assert!((fd - db[i]).abs() < 1e-9);
        }
    }

    fn arb_quat() -> impl Strategy<Value = Quat> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-zero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| Quat::new(w, x, y, z).normalized())
    }

    fn arb_vec() -> impl Strategy<Value = Vector3<f64>> {
        (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| v(x, y, z))
    }

    proptest! {
        #[test]
        fn quaternion_matrix_round_trip(q in arb_quat()) {
            let back = Quat::from_matrix(&q.to_matrix());
            let q = q.canonical();
            let err = (0..4).map(|i| (back.to_array()[i] - q.to_array()[i]).abs()).fold(0.0, f64::max);
            // w ≈ 0 leaves the sign ambiguous
            let flipped = Quat::new(-q.w, -q.x, -q.y, -q.z);
            let err_flipped = (0..4).map(|i| (back.to_array()[i] - flipped.to_array()[i]).abs()).fold(0.0, f64::max);
            prop_assert!(err.min(err_flipped) <= 1e-9);
            prop_assert!((back.norm() - 1.0).abs() <= 1e-9);
            prop_assert!(back.w >= 0.0);
        }

        #[test]
        fn frame_is_orthonormal_and_rotation_equivariant(
            a in arb_vec(), b in arb_vec(), c in arb_vec(), q in arb_quat(), t in arb_vec()
        ) {
            prop_assume!(triangle_area(&a, &b, &c) > 1e-3);
            let f = triangle_frame(&a, &b, &c).unwrap();
            prop_assert!(f.tangent.dot(&f.bitangent).abs() < 1e-7);
            prop_assert!(f.tangent.dot(&f.normal).abs() < 1e-7);
            prop_assert!(f.bitangent.dot(&f.normal).abs() < 1e-7);
            prop_assert!((f.tangent.cross(&f.bitangent) - f.normal).amax() < 1e-7);

            let r = q.to_matrix();
            let g = triangle_frame(&(r * a + t), &(r * b + t), &(r * c + t)).unwrap();
            prop_assert!((g.tangent - r * f.tangent).amax() < 1e-9);
            prop_assert!((g.normal - r * f.normal).amax() < 1e-9);
            prop_assert!((g.origin - (r * f.origin + t)).amax() < 1e-9);

            // recovered rotation maps the canonical basis onto the posed one
            let rec = frame_rotation_quaternion(&f, &g).to_matrix();
            prop_assert!((rec - r).amax() < 1e-6);
            prop_assert!((rec * f.bitangent - g.bitangent).amax() < 1e-6);
        }

        #[test]
        fn frame_translation_invariance(a in arb_vec(), b in arb_vec(), c in arb_vec(), t in arb_vec()) {
            prop_assume!(triangle_area(&a, &b, &c) > 1e-3);
            let f = triangle_frame(&a, &b, &c).unwrap();
            let g = triangle_frame(&(a + t), &(b + t), &(c + t)).unwrap();
            prop_assert!((f.tangent - g.tangent).amax() < 1e-12);
            prop_assert!((f.normal - g.normal).amax() < 1e-12);
            prop_assert!((g.origin - f.origin - t).amax() < 1e-12);
        }

        #[test]
        fn degree_zero_is_view_independent(d1 in arb_vec(), d2 in arb_vec(), c in prop::array::uniform3(-2.0..2.0f64)) {
            prop_assume!(d1.norm() > 1e-3 && d2.norm() > 1e-3);
            let sh = ShCoeffs { degree: 0, coeffs: c.to_vec() };
            let a = sh.eval(&d1.normalize());
            let b = sh.eval(&d2.normalize());
            prop_assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        }
    }
}
