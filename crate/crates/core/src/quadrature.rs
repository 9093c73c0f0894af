//! Composite Gauss–Legendre quadrature with square-root substitution at
//! endpoints where the integrand has an inverse-square-root singularity (the
//! Milstein density at its support bound).

use std::sync::LazyLock;

const ORDER: usize = 16;

/// Nodes and weights of the 16-point rule on `[-1, 1]`.
static RULE: LazyLock<([f64; ORDER], [f64; ORDER])> = LazyLock::new(legendre_rule);

fn legendre_rule() -> ([f64; ORDER], [f64; ORDER]) {
    let n = ORDER;
    let mut nodes = [0.0; ORDER];
    let mut weights = [0.0; ORDER];
    for i in 0..n {
        // Chebyshev initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// `∫_a^b f` with `panels` equal Gauss–Legendre panels. The endpoints are
/// never evaluated.
pub fn gauss_legendre<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, panels: usize) -> f64 {
    if !(b > a) {
        return 0.0;
    }
    let (nodes, weights) = &*RULE;
    let panels = panels.max(1);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for k in 0..panels {
        let lo = a + k as f64 * h;
        let mid = lo + 0.5 * h;
        let mut s = 0.0;
        for (x, w) in nodes.iter().zip(weights) {
            s += w * f(mid + 0.5 * h * x);
        }
        total += 0.5 * h * s;
    }
    total
}

/// Adaptive `∫_a^b f`: a 16-node panel is accepted when it agrees with the sum
/// of its two halves to `abs_tol` (split proportionally between halves).
pub fn adaptive_gauss_legendre<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, abs_tol: f64, max_depth: usize) -> f64 {
    fn panel<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> f64 {
        let (nodes, weights) = &*RULE;
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        let mut s = 0.0;
        for (x, w) in nodes.iter().zip(weights) {
            s += w * f(mid + half * x);
        }
        half * s
    }
    fn recurse<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, whole: f64, tol: f64, depth: usize) -> f64 {
        let m = 0.5 * (a + b);
        let left = panel(f, a, m);
        let right = panel(f, m, b);
        let both = left + right;
        if depth == 0 || (both - whole).abs() <= tol {
            return both;
        }
        recurse(f, a, m, left, 0.5 * tol, depth - 1) + recurse(f, m, b, right, 0.5 * tol, depth - 1)
    }
    if !(b > a) {
        return 0.0;
    }
    let whole = panel(&mut f, a, b);
    recurse(&mut f, a, b, whole, abs_tol, max_depth)
}

/// `∫_a^b f` where `f` may blow up like `1/√(y − a)` at `a` and/or
/// `1/√(b − y)` at `b`. Each singular end is regularised by `y = end ± u²`.
pub fn integrate_singular<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    singular_lo: bool,
    singular_hi: bool,
    panels: usize,
) -> f64 {
    if !(b > a) {
        return 0.0;
    }
    match (singular_lo, singular_hi) {
        (false, false) => gauss_legendre(f, a, b, panels),
        (true, false) => {
            gauss_legendre(|u| 2.0 * u * f(a + u * u), 0.0, (b - a).sqrt(), panels)
        }
        (false, true) => {
            gauss_legendre(|u| 2.0 * u * f(b - u * u), 0.0, (b - a).sqrt(), panels)
        }
        (true, true) => {
            let mid = 0.5 * (a + b);
            let half = panels.div_ceil(2);
            let r = (mid - a).sqrt();
            gauss_legendre(|u| 2.0 * u * f(a + u * u), 0.0, r, half)
                + gauss_legendre(|u| 2.0 * u * f(b - u * u), 0.0, r, half)
        }
    }
}
