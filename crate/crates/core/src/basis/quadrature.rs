//! Quadrature rules on segments and triangles.
//!
//! Triangle rules are conical products (collapsed Gauss-Legendre) mapped
//! affinely to the physical cell; segment rules are Gauss-Legendre.

use nalgebra::Point2;

/// Quadrature points and weights in physical coordinates.
#[derive(Debug, Clone)]
pub struct QuadRule {
    pub points: Vec<Point2<f64>>,
    pub weights: Vec<f64>,
}

impl QuadRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Integrates `f` over the rule.
    pub fn integrate<F: Fn(&Point2<f64>) -> f64>(&self, f: F) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * f(p))
            .sum()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Gauss-Legendre nodes and weights on [0, 1].
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "at least one quadrature node is required");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
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
        // map [-1,1] -> [0,1]
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

/// Value and derivative of the Legendre polynomial `P_n` at `x` in [-1, 1].
pub fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p0 = 1.0;
    let mut p1 = x;
    for j in 2..=n {
        let jf = j as f64;
        let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Legendre polynomial values `P_0..=P_n` at `x`.
pub fn legendre_values(n: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(1.0);
    if n >= 1 {
        out.push(x);
    }
    for j in 2..=n {
        let jf = j as f64;
        let v = ((2.0 * jf - 1.0) * x * out[j - 1] - (jf - 1.0) * out[j - 2]) / jf;
        out.push(v);
    }
    out
}

/// Rule on the segment `[a, b]` exact for polynomials of degree `exactness`.
pub fn segment_rule(a: &Point2<f64>, b: &Point2<f64>, exactness: usize) -> QuadRule {
    let n = exactness / 2 + 1;
    let (s, w) = gauss_legendre_unit(n);
    let len = (b - a).norm();
    QuadRule {
        points: s.iter().map(|&t| a + (b - a) * t).collect(),
        weights: w.iter().map(|&wi| wi * len).collect(),
    }
}

/// Rule on the triangle `(a, b, c)` exact for total degree `exactness`.
///
/// Collapsed coordinates `x = u`, `y = v (1 - u)` on the reference triangle;
/// the Jacobian `(1 - u)` raises the degree in `u` by one.
pub fn triangle_rule(verts: &[Point2<f64>; 3], exactness: usize) -> QuadRule {
    let n = (exactness + 2).div_ceil(2);
    let (s, w) = gauss_legendre_unit(n);
    let [a, b, c] = verts;
    let e1 = b - a;
    let e2 = c - a;
    let area2 = (e1.x * e2.y - e1.y * e2.x).abs();
    let mut points = Vec::with_capacity(n * n);
    let mut weights = Vec::with_capacity(n * n);
    for (ui, wu) in s.iter().zip(&w) {
        for (vi, wv) in s.iter().zip(&w) {
            let xi = *ui;
            let eta = vi * (1.0 - ui);
            points.push(a + e1 * xi + e2 * eta);
            weights.push(wu * wv * (1.0 - ui) * area2);
        }
    }
    QuadRule { points, weights }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_triangle() -> [Point2<f64>; 3] {
        [
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 1.0),
        ]
    }

    // ∫_{ref triangle} x^a y^b = a! b! / (a+b+2)!
    fn monomial_integral(a: u32, b: u32) -> f64 {
        let f = |n: u32| (1..=n).map(f64::from).product::<f64>();
        f(a) * f(b) / f(a + b + 2)
    }

    #[test]
    fn gauss_legendre_weights_sum_to_one() {
        for n in 1..12 {
            let (x, w) = gauss_legendre_unit(n);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(w.iter().all(|&wi| wi > 0.0));
            assert!(x.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn triangle_rule_is_exact_for_declared_degree() {
        for q in 0..=12 {
            let rule = triangle_rule(&unit_triangle(), q);
            assert!(rule.weights.iter().all(|&w| w > 0.0));
            for a in 0..=q as u32 {
                for b in 0..=(q as u32 - a) {
                    let got = rule.integrate(|p| p.x.powi(a as i32) * p.y.powi(b as i32));
                    let exact = monomial_integral(a, b);
                    assert!(
                        ((got - exact) / exact).abs() < 1e-12,
                        "q={q} a={a} b={b}: {got} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn segment_rule_exactness() {
        let a = Point2::new(0.0, 0.0);
        let b = Point2::new(1.0, 0.0);
        for q in 0..=12 {
            let rule = segment_rule(&a, &b, q);
            for p in 0..=q {
                let got = rule.integrate(|x| x.x.powi(p as i32));
                assert!((got - 1.0 / (p as f64 + 1.0)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn weights_sum_to_measure_on_skewed_triangle() {
        let t: [Point2<f64>; 3] = [
            Point2::new(0.3, -0.2),
            Point2::new(2.1, 0.4),
            Point2::new(-0.5, 1.7),
        ];
        let area: f64 = 0.5 * (t[1] - t[0]).perp(&(t[2] - t[0])).abs();
        let rule = triangle_rule(&t, 8);
        assert!((rule.total_weight() - area).abs() / area < 1e-13);
    }
}
