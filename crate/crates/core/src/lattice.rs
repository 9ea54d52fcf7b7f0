//! Integer lattice points `k ∈ Z^d` used as Fourier mode labels.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::{Add, Neg, Sub};

/// Largest torus dimension supported by [`Mode`].
pub const MAX_DIM: usize = 4;

/// A lattice vector with at most [`MAX_DIM`] components; unused trailing
/// components are zero.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Mode(pub [i32; MAX_DIM]);

impl Mode {
    pub const ZERO: Mode = Mode([0; MAX_DIM]);

    /// Panics if `k.len() > MAX_DIM`.
    pub fn from_slice(k: &[i32]) -> Self {
        assert!(k.len() <= MAX_DIM, "lattice dimension {} > {MAX_DIM}", k.len());
        let mut m = [0; MAX_DIM];
        m[..k.len()].copy_from_slice(k);
        Mode(m)
    }

    pub fn unit(axis: usize) -> Self {
        let mut m = [0; MAX_DIM];
        m[axis] = 1;
        Mode(m)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    /// Max-norm `|k|`.
    pub fn norm(&self) -> i32 {
        self.0.iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    pub fn l1(&self) -> i32 {
        self.0.iter().map(|c| c.abs()).sum()
    }

    /// `⟨k, ω⟩` for a frequency vector of length `d ≤ MAX_DIM`.
    #[inline]
    pub fn dot(&self, omega: &[f64]) -> f64 {
        omega.iter().zip(self.0.iter()).map(|(w, &k)| w * k as f64).sum()
    }

    pub fn scale(&self, s: i32) -> Self {
        let mut m = self.0;
        m.iter_mut().for_each(|c| *c *= s);
        Mode(m)
    }

    /// Exact halving; `None` when some component is odd.
    pub fn halve(&self) -> Option<Self> {
        if self.0.iter().any(|c| c % 2 != 0) {
            return None;
        }
        let mut m = self.0;
        m.iter_mut().for_each(|c| *c /= 2);
        Some(Mode(m))
    }

    pub fn components(&self, d: usize) -> &[i32] {
        &self.0[..d]
    }
}

impl Add for Mode {
    type Output = Mode;
    #[inline]
    fn add(self, o: Mode) -> Mode {
        let mut m = self.0;
        for (a, b) in m.iter_mut().zip(o.0.iter()) {
            *a += b;
        }
        Mode(m)
    }
}

impl Sub for Mode {
    type Output = Mode;
    #[inline]
    fn sub(self, o: Mode) -> Mode {
        self + (-o)
    }
}

impl Neg for Mode {
    type Output = Mode;
    #[inline]
    fn neg(self) -> Mode {
        self.scale(-1)
    }
}

impl fmt::Debug for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // trailing zeros are noise for d < MAX_DIM
        let last = self.0.iter().rposition(|&c| c != 0).map_or(1, |i| i + 1);
        write!(f, "{:?}", &self.0[..last])
    }
}

/// All `k ∈ Z^d` with `|k|_∞ ≤ radius`, in lexicographic order.
pub fn box_points(d: usize, radius: i32) -> Vec<Mode> {
    assert!(d >= 1 && d <= MAX_DIM);
    let side = (2 * radius + 1) as usize;
    let total = side.pow(d as u32);
    let mut out = Vec::with_capacity(total);
    for mut idx in 0..total {
        let mut m = [0; MAX_DIM];
        for c in m.iter_mut().take(d).rev() {
            *c = (idx % side) as i32 - radius;
            idx /= side;
        }
        out.push(Mode(m));
    }
    out
}

/// Semicolon-joined components, the CSV encoding of a label.
pub fn format_mode(k: &Mode, d: usize) -> String {
    k.components(d).iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
}
