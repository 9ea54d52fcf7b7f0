//! Complex 2×2 matrices.
//!
//! Everything in the cocycle and reducibility code is 2×2, so a fixed
//! layout with inlined arithmetic beats a general linear-algebra crate here.

use num_complex::Complex64;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// Row-major complex 2×2 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2(pub [[Complex64; 2]; 2]);

impl Mat2 {
    pub const ZERO: Mat2 = Mat2([[ZERO, ZERO], [ZERO, ZERO]]);
    pub const IDENTITY: Mat2 = Mat2([[ONE, ZERO], [ZERO, ONE]]);

    pub fn new(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> Self {
        Mat2([[a, b], [c, d]])
    }

    pub fn real(a: f64, b: f64, c: f64, d: f64) -> Self {
        Mat2([[Complex64::new(a, 0.0), Complex64::new(b, 0.0)], [Complex64::new(c, 0.0), Complex64::new(d, 0.0)]])
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.0[i][j]
    }

    pub fn det(&self) -> Complex64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn trace(&self) -> Complex64 {
        self.0[0][0] + self.0[1][1]
    }

    /// Adjugate; equals the inverse when `det == 1`.
    pub fn adj(&self) -> Self {
        let [[a, b], [c, d]] = self.0;
        Mat2([[d, -b], [-c, a]])
    }

    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if det.norm() == 0.0 {
            return None;
        }
        Some(self.adj().scale(det.inv()))
    }

    pub fn conj(&self) -> Self {
        let m = &self.0;
        Mat2([[m[0][0].conj(), m[0][1].conj()], [m[1][0].conj(), m[1][1].conj()]])
    }

    pub fn scale(&self, s: Complex64) -> Self {
        let m = &self.0;
        Mat2([[m[0][0] * s, m[0][1] * s], [m[1][0] * s, m[1][1] * s]])
    }

    pub fn scale_re(&self, s: f64) -> Self {
        self.scale(Complex64::new(s, 0.0))
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().flat_map(|r| r.iter()).map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest imaginary part of any entry.
    pub fn max_imag(&self) -> f64 {
        self.0.iter().flat_map(|r| r.iter()).map(|z| z.im.abs()).fold(0.0, f64::max)
    }

    pub fn re_parts(&self) -> [[f64; 2]; 2] {
        let m = &self.0;
        [[m[0][0].re, m[0][1].re], [m[1][0].re, m[1][1].re]]
    }

    pub fn mul_vec(&self, v: [Complex64; 2]) -> [Complex64; 2] {
        let m = &self.0;
        [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    #[inline]
    fn add(self, o: Mat2) -> Mat2 {
        let (a, b) = (&self.0, &o.0);
        Mat2([[a[0][0] + b[0][0], a[0][1] + b[0][1]], [a[1][0] + b[1][0], a[1][1] + b[1][1]]])
    }
}

impl AddAssign for Mat2 {
    #[inline]
    fn add_assign(&mut self, o: Mat2) {
        for i in 0..2 {
            for j in 0..2 {
                self.0[i][j] += o.0[i][j];
            }
        }
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    #[inline]
    fn sub(self, o: Mat2) -> Mat2 {
        self + (-o)
    }
}

impl SubAssign for Mat2 {
    #[inline]
    fn sub_assign(&mut self, o: Mat2) {
        for i in 0..2 {
            for j in 0..2 {
                self.0[i][j] -= o.0[i][j];
            }
        }
    }
}

impl Neg for Mat2 {
    type Output = Mat2;
    #[inline]
    fn neg(self) -> Mat2 {
        let m = &self.0;
        Mat2([[-m[0][0], -m[0][1]], [-m[1][0], -m[1][1]]])
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    #[inline]
    fn mul(self, o: Mat2) -> Mat2 {
        let (a, b) = (&self.0, &o.0);
        Mat2([
            [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
            [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
        ])
    }
}

impl Mul<Complex64> for Mat2 {
    type Output = Mat2;
    #[inline]
    fn mul(self, s: Complex64) -> Mat2 {
        self.scale(s)
    }
}
