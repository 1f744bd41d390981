//! Standard chart fixtures shared by tests, benches and the CLI selftest.

use nalgebra::DMatrix;

use crate::connection::BundleConnection;
use crate::geometry::BoxDomain;

/// Unit round sphere in colatitude/longitude coordinates `(theta, phi)`:
/// `Gamma^theta_{phi phi} = -sin theta cos theta`,
/// `Gamma^phi_{theta phi} = Gamma^phi_{phi theta} = cot theta`.
/// The chart box keeps clear of the poles and allows full longitude loops.
pub fn sphere_connection() -> BundleConnection {
    let domain = BoxDomain::new(vec![(0.2, std::f64::consts::PI - 0.2), (-6.8, 6.8)]).unwrap();
    let zero = "0";
    let gamma = vec![
        // upper index theta
        vec![vec![zero, zero], vec![zero, "-sin(x1)*cos(x1)"]],
        // upper index phi
        vec![vec![zero, "cos(x1)/sin(x1)"], vec!["cos(x1)/sin(x1)", zero]],
    ];
    BundleConnection::from_christoffel_strs(2, &gamma, domain).unwrap()
}

/// Radius-`a` round sphere in arclength-style coordinates `(u, w)` with
/// metric `du^2 + sin(u/a)^2 dw^2`; at `u = a pi/2` the metric is the
/// identity, so curvature operator entries read off the sectional curvature
/// `1/a^2` directly.
pub fn sphere_connection_radius(a: f64) -> BundleConnection {
    let domain = BoxDomain::new(vec![
        (0.2 * a, (std::f64::consts::PI - 0.2) * a),
        (-6.8 * a, 6.8 * a),
    ])
    .unwrap();
    let g_uww = format!("-sin(x1/{a})*cos(x1/{a})/{a}");
    let g_wuw = format!("cos(x1/{a})/({a}*sin(x1/{a}))");
    let gamma = vec![
        vec![vec!["0", "0"], vec!["0", g_uww.as_str()]],
        vec![vec!["0", g_wuw.as_str()], vec![g_wuw.as_str(), "0"]],
    ];
    BundleConnection::from_christoffel_strs(2, &gamma, domain).unwrap()
}

/// Unit sphere in stereographic coordinates (projection from the south
/// pole): conformal metric `lambda^2 (dx1^2 + dx2^2)` with
/// `lambda = 2 / (1 + x1^2 + x2^2)`. Smooth across the north pole (origin),
/// so paths through the pole stay regular in this chart.
pub fn stereographic_sphere_connection() -> BundleConnection {
    let domain = BoxDomain::new(vec![(-1.3, 1.3), (-1.3, 1.3)]).unwrap();
    // d_a log lambda = -2 x_a / (1 + x1^2 + x2^2)
    let p1 = "-2*x1/(1 + x1^2 + x2^2)";
    let p2 = "-2*x2/(1 + x1^2 + x2^2)";
    let m_p1 = "2*x1/(1 + x1^2 + x2^2)";
    let m_p2 = "2*x2/(1 + x1^2 + x2^2)";
    let gamma = vec![
        vec![vec![p1, p2], vec![p2, m_p1]],
        vec![vec![m_p2, p1], vec![p1, p2]],
    ];
    BundleConnection::from_christoffel_strs(2, &gamma, domain).unwrap()
}

/// Flat tangent connection on `[-1, 1]^n`.
pub fn flat_connection(n: usize) -> BundleConnection {
    BundleConnection::flat(n, n, BoxDomain::new(vec![(-1.0, 1.0); n]).unwrap(), true).unwrap()
}

/// Symmetric connection on `R^2` whose curvature has nonzero trace
/// (`Gamma^1_{11} = x2`, so `R_12 = [[-1, 0], [0, 0]]`): no semi-Riemannian
/// metric is parallel for it, since `g`-antisymmetric operators are
/// traceless.
pub fn trace_obstructed_connection() -> BundleConnection {
    let domain = BoxDomain::new(vec![(-1.0, 1.0), (-1.0, 1.0)]).unwrap();
    let gamma = vec![
        vec![vec!["x2", "0"], vec!["0", "0"]],
        vec![vec!["0", "0"], vec!["0", "0"]],
    ];
    BundleConnection::from_christoffel_strs(2, &gamma, domain).unwrap()
}

/// Round-sphere metric matrix `diag(1, sin^2 theta)` at colatitude `theta`.
pub fn sphere_metric_at(theta: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, theta.sin().powi(2)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_charts_are_torsion_free() {
        for conn in [
            sphere_connection(),
            sphere_connection_radius(2.0),
            stereographic_sphere_connection(),
        ] {
            let t = conn.torsion().unwrap();
            let val = t.eval_at(&[0.7, 0.3]).unwrap();
            assert!(val.max_abs() < 1e-15);
        }
    }

    #[test]
    fn stereographic_chart_has_unit_curvature_at_origin() {
        // At the origin lambda = 2, metric = 4 I; R(e1,e2)e2 = K g_22 e1, so
        // the operator R_12 is [[0, 4], [-4, 0]] and K = 4 / g_22 = 1.
        let conn = stereographic_sphere_connection();
        let r = conn.curvature().eval_at(&[0.0, 0.0]).unwrap();
        let op = r.operator(&[0, 1]);
        assert!((op[(0, 1)] - 4.0).abs() < 1e-12);
        assert!((op[(1, 0)] + 4.0).abs() < 1e-12);
        let g22 = 4.0;
        assert!((op[(0, 1)] / g22 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn arclength_chart_reads_off_sectional_curvature() {
        for a in [1.0, 2.0] {
            let conn = sphere_connection_radius(a);
            let u0 = a * std::f64::consts::FRAC_PI_2;
            let r = conn.curvature().eval_at(&[u0, 0.0]).unwrap();
            let op = r.operator(&[0, 1]);
            assert!((op[(0, 1)] - 1.0 / (a * a)).abs() < 1e-12);
            assert!((op[(1, 0)] + 1.0 / (a * a)).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_obstruction_is_present() {
        let conn = trace_obstructed_connection();
        let r = conn.curvature().eval_at(&[0.4, 0.3]).unwrap();
        let op = r.operator(&[0, 1]);
        assert!((op.trace() + 1.0).abs() < 1e-14);
    }
}
