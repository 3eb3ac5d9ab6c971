//! Orthogonal polynomial bases on `[a, b]` and conversion to monomials.

use crate::poly::{Interval, PolyMatrix, Vars};
use nalgebra::DMatrix;

fn to_reference(domain: Interval, s: f64) -> f64 {
    2.0 * (s - domain.a()) / domain.len() - 1.0
}

/// `T_0(x̂), …, T_k(x̂)` with `x̂` the image of `s` in `[-1, 1]`.
pub fn chebyshev_values(k_max: usize, domain: Interval, s: f64) -> Vec<f64> {
    let x = to_reference(domain, s);
    let mut out = Vec::with_capacity(k_max + 1);
    out.push(1.0);
    if k_max >= 1 {
        out.push(x);
    }
    for k in 2..=k_max {
        let next = 2.0 * x * out[k - 1] - out[k - 2];
        out.push(next);
    }
    out
}

/// Legendre polynomials on `[a, b]`, normalized to unit `L2[a, b]` norm.
pub fn legendre_values(k_max: usize, domain: Interval, s: f64) -> Vec<f64> {
    let x = to_reference(domain, s);
    let mut p = Vec::with_capacity(k_max + 1);
    p.push(1.0);
    if k_max >= 1 {
        p.push(x);
    }
    for k in 2..=k_max {
        let kf = k as f64;
        let next = ((2.0 * kf - 1.0) * x * p[k - 1] - (kf - 1.0) * p[k - 2]) / kf;
        p.push(next);
    }
    p.iter().enumerate().map(|(k, v)| v * ((2.0 * k as f64 + 1.0) / domain.len()).sqrt()).collect()
}

/// Monomial coefficients (in `s`) of `T_k(x̂(s))` for `k = 0..=k_max`.
/// Row `k` holds the coefficients of `s^0 … s^k_max`.
pub fn chebyshev_monomials(k_max: usize, domain: Interval) -> DMatrix<f64> {
    // x̂ = α s + β
    let alpha = 2.0 / domain.len();
    let beta = -2.0 * domain.a() / domain.len() - 1.0;
    let mut rows: Vec<Vec<f64>> = vec![vec![0.0; k_max + 1]; k_max + 1];
    rows[0][0] = 1.0;
    if k_max >= 1 {
        rows[1][0] = beta;
        rows[1][1] = alpha;
    }
    for k in 2..=k_max {
        let mut next = vec![0.0; k_max + 1];
        for i in 0..=k_max {
            let c = rows[k - 1][i];
            if c != 0.0 {
                next[i] += 2.0 * beta * c;
                if i < k_max {
                    next[i + 1] += 2.0 * alpha * c;
                }
            }
            next[i] -= rows[k - 2][i];
        }
        rows[k] = next;
    }
    DMatrix::from_fn(k_max + 1, k_max + 1, |k, i| rows[k][i])
}

/// Chebyshev coefficients of `s^e` for `e = 0..=k_max`; row `e` holds the
/// coefficients of `T_0 … T_k_max`. Inverse of [`chebyshev_monomials`].
pub fn monomial_chebyshev(k_max: usize, domain: Interval) -> DMatrix<f64> {
    let mid = 0.5 * (domain.a() + domain.b());
    let half = 0.5 * domain.len();
    let mut out = DMatrix::zeros(k_max + 1, k_max + 1);
    out[(0, 0)] = 1.0;
    for e in 1..=k_max {
        for k in 0..e {
            let c = out[(e - 1, k)];
            if c == 0.0 {
                continue;
            }
            out[(e, k)] += mid * c;
            if k == 0 {
                out[(e, 1)] += half * c;
            } else {
                out[(e, k + 1)] += 0.5 * half * c;
                out[(e, k - 1)] += 0.5 * half * c;
            }
        }
    }
    out
}

/// Scalar Chebyshev basis function `T_k` on the domain as a 1×1 polynomial.
pub fn chebyshev_poly(k: usize, domain: Interval) -> PolyMatrix {
    let mono = chebyshev_monomials(k, domain);
    let terms: Vec<(u32, u32, f64)> = (0..=k).map(|i| (i as u32, 0, mono[(k, i)])).collect();
    PolyMatrix::scalar(Vars::S, domain, &terms).expect("degree within cap")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_conversion_inverts_chebyshev_expansion() {
        let d = Interval::new(-0.5, 2.0).unwrap();
        let prod = chebyshev_monomials(9, d) * monomial_chebyshev(9, d);
        assert!((prod - DMatrix::<f64>::identity(10, 10)).amax() < 1e-9);
    }
    use crate::quadrature::GaussLegendre;

    #[test]
    fn legendre_is_orthonormal() {
        let d = Interval::new(0.0, 2.0).unwrap();
        let gl = GaussLegendre::new(40, 0.0, 2.0);
        for i in 0..12 {
            for j in 0..12 {
                let ip = gl.integrate(|s| {
                    let v = legendre_values(12, d, s);
                    v[i] * v[j]
                });
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chebyshev_monomial_expansion_matches_recurrence() {
        let d = Interval::unit();
        let mono = chebyshev_monomials(8, d);
        for &s in &[0.0, 0.13, 0.5, 0.77, 1.0] {
            let v = chebyshev_values(8, d, s);
            for k in 0..=8 {
                let m: f64 = (0..=8).map(|i| mono[(k, i)] * s.powi(i as i32)).sum();
                assert!((m - v[k]).abs() < 1e-10, "k={k} s={s}");
            }
        }
        let t2 = chebyshev_poly(2, d);
        assert!((t2.eval_s(0.25).unwrap()[(0, 0)] - (-0.5)).abs() < 1e-14);
    }
}
