//! Quadrature helpers shared by the transform and the CLI.

/// Trapezoid weights on a sorted, possibly nonuniform grid.
pub fn trapezoid_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let h = 0.5 * (x[i + 1] - x[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    w
}

/// `∫_a^b g(ρ) cos(Mρ) dρ` for `g` piecewise linear through `(x_i, g_i)`,
/// exact panel by panel.
pub fn filon_cos(x: &[f64], g: &[f64], m: f64) -> f64 {
    assert_eq!(x.len(), g.len());
    if m == 0.0 {
        return trapezoid_weights(x).iter().zip(g).map(|(w, v)| w * v).sum();
    }
    let mut acc = 0.0;
    for i in 0..x.len().saturating_sub(1) {
        let (a, b) = (x[i], x[i + 1]);
        let h = b - a;
        if h <= 0.0 {
            continue;
        }
        let slope = (g[i + 1] - g[i]) / h;
        let (sa, ca) = (m * a).sin_cos();
        let (sb, cb) = (m * b).sin_cos();
        acc += (g[i + 1] * sb - g[i] * sa) / m + slope * (cb - ca) / (m * m);
    }
    acc
}

/// Splits indices into maximal runs where `keep` holds.
pub fn runs(keep: &[bool]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &k) in keep.iter().chain(std::iter::once(&false)).enumerate() {
        match (k, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    out
}
