//! Gaussian expectations by quadrature.
//!
//! [`QuadratureRule::gauss_hermite`] builds the probabilists' Gauss–Hermite
//! rule, so `Σ wᵢ f(xᵢ) ≈ E[f(ξ)]` for `ξ ~ N(0, 1)`. Integrands with a kink
//! converge slowly under that rule; [`QuadratureRule::split_at`] builds a
//! panel rule whose nodes straddle the kink instead.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Half-width of the interval covered by split rules; the normal tail mass
/// beyond it is below 1e-32.
pub const SPLIT_RANGE: f64 = 12.0;

const NEWTON_TOL: f64 = 1e-15;
const MAX_NEWTON: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Gauss–Hermite rule with `order` nodes for the standard normal density.
    pub fn gauss_hermite(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("quadrature order must be positive"));
        }
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let pim4 = PI.powf(-0.25);
        let nf = n as f64;
        let m = n.div_ceil(2);
        let mut z = 0.0;
        // Roots of the physicists' polynomial, largest first, with the
        // classical asymptotic starting guesses refined by Newton steps.
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..MAX_NEWTON {
                let (p1, p2) = orthonormal_hermite(n, z, pim4);
                pp = (2.0 * nf).sqrt() * p2;
                let dz = p1 / pp;
                z -= dz;
                if dz.abs() <= NEWTON_TOL * z.abs().max(1.0) {
                    let (_, p2) = orthonormal_hermite(n, z, pim4);
                    pp = (2.0 * nf).sqrt() * p2;
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        if n % 2 == 1 {
            nodes[m - 1] = 0.0;
        }
        // physicists' weight e^{-t^2} -> standard normal
        let scale = 2f64.sqrt();
        let norm = PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = nodes
            .iter()
            .zip(&weights)
            .map(|(&t, &w)| (t * scale, w / norm))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(QuadratureRule {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        })
    }

    /// A rule for `E[f(ξ)]` made of two Gauss–Legendre panels of `self.order()`
    /// nodes meeting at `point`, over `[-SPLIT_RANGE, SPLIT_RANGE]`. The
    /// standard normal density is folded into the weights.
    pub fn split_at(&self, point: f64) -> QuadratureRule {
        let (gl_nodes, gl_weights) = gauss_legendre(self.order());
        let mut nodes = Vec::with_capacity(2 * self.order());
        let mut weights = Vec::with_capacity(2 * self.order());
        let mut panel = |a: f64, b: f64| {
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (&x, &w) in gl_nodes.iter().zip(&gl_weights) {
                let t = mid + half * x;
                nodes.push(t);
                weights.push(half * w * standard_normal_pdf(t));
            }
        };
        if point > -SPLIT_RANGE && point < SPLIT_RANGE {
            panel(-SPLIT_RANGE, point);
            panel(point, SPLIT_RANGE);
        } else {
            panel(-SPLIT_RANGE, SPLIT_RANGE);
        }
        QuadratureRule { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Returns `(p_n(z), p_{n-1}(z))` of the orthonormal Hermite recurrence.
fn orthonormal_hermite(n: usize, z: f64, p0: f64) -> (f64, f64) {
    let mut p1 = p0;
    let mut p2 = 0.0;
    for j in 1..=n {
        let jf = j as f64;
        let p3 = p2;
        p2 = p1;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, p2)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, ascending.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order;
    let nf = n as f64;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 1.0;
        for _ in 0..MAX_NEWTON {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let jf = j as f64;
                let p3 = p2;
                p2 = p1;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= NEWTON_TOL {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    (nodes, weights)
}

pub fn standard_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// E[ξ^k] for the standard normal: (k-1)!! for even k, 0 otherwise.
    fn normal_moment(k: u32) -> f64 {
        if k % 2 == 1 {
            return 0.0;
        }
        (1..k).step_by(2).map(|v| v as f64).product()
    }

    #[test]
    fn weights_sum_to_one() {
        for order in [1, 2, 5, 30, 64] {
            let rule = QuadratureRule::gauss_hermite(order).unwrap();
            assert_eq!(rule.order(), order);
            assert!((rule.weights().iter().sum::<f64>() - 1.0).abs() < 1e-13, "order {order}");
            assert!(rule.weights().iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn exact_on_low_degree_monomials() {
        for order in [2, 3, 7, 10, 30] {
            let rule = QuadratureRule::gauss_hermite(order).unwrap();
            for k in 0..(2 * order as u32) {
                let got = rule.expect(|x| x.powi(k as i32));
                let want = normal_moment(k);
                // odd moments cancel; measure them against E|ξ|^k
                let scale = rule.expect(|x| x.abs().powi(k as i32)).max(1.0);
                let tol = 1e-10 * scale;
                assert!((got - want).abs() <= tol, "order {order} degree {k}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn two_point_rule() {
        let rule = QuadratureRule::gauss_hermite(2).unwrap();
        assert!((rule.nodes()[0] + 1.0).abs() < 1e-14);
        assert!((rule.nodes()[1] - 1.0).abs() < 1e-14);
        assert!((rule.weights()[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn zero_order_is_rejected() {
        assert!(QuadratureRule::gauss_hermite(0).is_err());
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        for k in 0..16 {
            let got: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
            let want = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert!((got - want).abs() < 1e-13, "degree {k}");
        }
    }

    #[test]
    fn split_rule_handles_kinks() {
        let rule = QuadratureRule::gauss_hermite(30).unwrap().split_at(0.0);
        let mean = rule.expect(|x| x.max(0.0));
        assert!((mean - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-13);
        assert!((rule.expect(|_| 1.0) - 1.0).abs() < 1e-13);
        let shifted = QuadratureRule::gauss_hermite(30).unwrap().split_at(0.7);
        assert!((shifted.expect(|x| x * x) - 1.0).abs() < 1e-12);
    }
}
