//! Gauss–Legendre and Chebyshev–Gauss–Lobatto node sets.

use std::f64::consts::PI;

/// Default number of Gauss–Legendre nodes used for inner products.
pub const DEFAULT_NODES: usize = 64;

/// Gauss–Legendre rule with `n` nodes mapped to `[a, b]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize, a: f64, b: f64) -> Self {
        assert!(n > 0, "quadrature needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for i in 0..n.div_ceil(2) {
            // Newton on P_n starting from the Chebyshev-like guess
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = mid - half * x;
            nodes[n - 1 - i] = mid + half * x;
            weights[i] = w * half;
            weights[n - 1 - i] = w * half;
        }
        Self { nodes, weights }
    }

    /// Integrates a scalar function.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Chebyshev–Gauss–Lobatto points on `[a, b]`, ascending, endpoints included.
pub fn chebyshev_lobatto(n_points: usize, a: f64, b: f64) -> Vec<f64> {
    if n_points == 1 {
        return vec![0.5 * (a + b)];
    }
    let m = (n_points - 1) as f64;
    (0..n_points)
        .map(|k| {
            let x = -(PI * k as f64 / m).cos();
            0.5 * (a + b) + 0.5 * (b - a) * x
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_exactly() {
        let gl = GaussLegendre::new(64, 0.0, 1.0);
        for p in 0..100 {
            let exact = 1.0 / (p as f64 + 1.0);
            let got = gl.integrate(|x| x.powi(p));
            assert!((got - exact).abs() < 1e-14, "degree {p}: {got} vs {exact}");
        }
        let w: f64 = gl.weights.iter().sum();
        assert!((w - 1.0).abs() < 1e-14);
    }

    #[test]
    fn small_rules() {
        let gl = GaussLegendre::new(3, -1.0, 1.0);
        assert!((gl.nodes[0] + (0.6f64).sqrt()).abs() < 1e-15);
        assert!((gl.weights[1] - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn lobatto_endpoints() {
        let x = chebyshev_lobatto(9, 0.0, 1.0);
        assert_eq!(x.len(), 9);
        assert!(x[0].abs() < 1e-15 && (x[8] - 1.0).abs() < 1e-15);
        assert!((x[4] - 0.5).abs() < 1e-15);
        assert!(x.windows(2).all(|w| w[0] < w[1]));
    }
}
