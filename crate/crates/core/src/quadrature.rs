//! Composite Gauss–Legendre integration against a Gaussian density, with
//! panel boundaries placed at the integrand's kinks.

use std::sync::OnceLock;

const ORDER: usize = 12;
const Z_LIMIT: f64 = 12.0;
const PANEL_WIDTH: f64 = 0.5;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Nodes and weights on [-1, 1], found by Newton iteration on P_n.
fn gauss_legendre() -> &'static ([f64; ORDER], [f64; ORDER]) {
    static RULE: OnceLock<([f64; ORDER], [f64; ORDER])> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = ORDER;
        let mut nodes = [0.0; ORDER];
        let mut weights = [0.0; ORDER];
        for i in 0..n {
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
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}

/// E[f(mean + sd·Z)] for Z ~ N(0, 1). `kinks` are points (in x units) where
/// `f` is not smooth; panels never straddle them.
pub fn gaussian_expectation<F: Fn(f64) -> f64>(mean: f64, sd: f64, kinks: &[f64], f: F) -> f64 {
    if sd == 0.0 {
        return f(mean);
    }
    let mut cuts: Vec<f64> = kinks
        .iter()
        .map(|k| (k - mean) / sd)
        .filter(|z| z.abs() < Z_LIMIT)
        .collect();
    cuts.push(-Z_LIMIT);
    cuts.push(Z_LIMIT);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let (nodes, weights) = gauss_legendre();
    let mut total = 0.0;
    for seg in cuts.windows(2) {
        let (lo, hi) = (seg[0], seg[1]);
        let panels = ((hi - lo) / PANEL_WIDTH).ceil().max(1.0) as usize;
        let h = (hi - lo) / panels as f64;
        for p in 0..panels {
            let a = lo + p as f64 * h;
            let half = 0.5 * h;
            let mid = a + half;
            for (t, w) in nodes.iter().zip(weights) {
                let z = mid + half * t;
                total += w * half * INV_SQRT_2PI * (-0.5 * z * z).exp() * f(mean + sd * z);
            }
        }
    }
    total
}
