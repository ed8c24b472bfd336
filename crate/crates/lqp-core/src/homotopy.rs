//! Cone and averaged homotopy operators on the ball, the homotopy identity
//! T d + d T = I, and the Riesz-kernel norm bound for the induced
//! L^p -> L^q map.

use std::sync::Arc;

use crate::forms::{derivative_at_point, lp_norm, multi_indices, DifferentialForm};
use crate::geometry::{
    ChartDomain, DiagonalMetric, DomainKind, Exponent, ExponentPair, Grid, ScalarField,
};
use crate::quad;
use crate::{LqpError, Result};

/// Step for the pointwise derivative used when checking the identity.
const RESIDUAL_FD_STEP: f64 = 1e-3;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Base-point specification of the homotopy: a single cone vertex or a
/// weighted average of vertices with positive weights summing to one.
#[derive(Debug, Clone)]
pub enum BaseSpec {
    Point(Vec<f64>),
    Averaged {
        nodes: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct HomotopyConfig {
    pub base: BaseSpec,
    /// Gauss order of the radial quadrature on [0, 1].
    pub radial_order: usize,
}

impl HomotopyConfig {
    pub fn point(a: Vec<f64>) -> Self {
        HomotopyConfig {
            base: BaseSpec::Point(a),
            radial_order: 32,
        }
    }

    /// Average of cone vertices over a disc: tensor Gauss nodes inside
    /// radius `radius` around `center`, weighted by a smooth bump and
    /// normalized to total weight one.
    pub fn averaged_disc(center: Vec<f64>, radius: f64, per_axis: usize) -> Result<Self> {
        let n = center.len();
        let rule = quad::gauss_on(-radius, radius, per_axis);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut counter = vec![0usize; n];
        'outer: loop {
            let offset: Vec<f64> = counter.iter().map(|&i| rule.nodes[i]).collect();
            let r2: f64 = offset.iter().map(|v| v * v).sum::<f64>() / (radius * radius);
            if r2 < 1.0 {
                let bump = (-1.0 / (1.0 - r2)).exp();
                let wq: f64 = counter.iter().map(|&i| rule.weights[i]).product();
                nodes.push(center.iter().zip(&offset).map(|(c, o)| c + o).collect());
                weights.push(bump * wq);
            }
            let mut ax = n;
            loop {
                if ax == 0 {
                    break 'outer;
                }
                ax -= 1;
                counter[ax] += 1;
                if counter[ax] < rule.len() {
                    break;
                }
                counter[ax] = 0;
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(LqpError::InvalidArgument(
                "averaged base has no interior nodes".into(),
            ));
        }
        for w in &mut weights {
            *w /= total;
        }
        Ok(HomotopyConfig {
            base: BaseSpec::Averaged { nodes, weights },
            radial_order: 32,
        })
    }

    pub fn averaged_explicit(nodes: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if nodes.len() != weights.len() || nodes.is_empty() {
            return Err(LqpError::InvalidArgument("node/weight length mismatch".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| w <= 0.0) || (total - 1.0).abs() > 1e-10 {
            return Err(LqpError::InvalidArgument(
                "base weights must be positive and sum to one".into(),
            ));
        }
        Ok(HomotopyConfig {
            base: BaseSpec::Averaged { nodes, weights },
            radial_order: 32,
        })
    }

    pub fn with_radial_order(mut self, order: usize) -> Self {
        self.radial_order = order;
        self
    }

    fn base_nodes(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        match &self.base {
            BaseSpec::Point(a) => (vec![a.clone()], vec![1.0]),
            BaseSpec::Averaged { nodes, weights } => (nodes.clone(), weights.clone()),
        }
    }
}

fn check_base_inside(domain: &ChartDomain, a: &[f64]) -> Result<()> {
    match domain.kind {
        DomainKind::Ball { .. } => {
            let r: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r < 1.0 {
                Ok(())
            } else {
                Err(LqpError::InvalidArgument(format!(
                    "base point lies outside the open ball (|a| = {r})"
                )))
            }
        }
        _ => Err(LqpError::Unsupported(
            "homotopy operators are implemented on ball charts".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Cone and averaged operators
// ---------------------------------------------------------------------------

/// Cone homotopy with vertex a:
/// (K_a w)(x; v...) = integral_0^1 t^{k-1} w(a + t(x-a); x-a, v...) dt.
pub fn cone_homotopy(
    theta: &DifferentialForm,
    a: &[f64],
    radial_order: usize,
) -> Result<DifferentialForm> {
    let k = theta.degree;
    if k == 0 {
        return Err(LqpError::DegreeMismatch("cone homotopy needs degree >= 1".into()));
    }
    check_base_inside(&theta.domain, a)?;
    let n = theta.domain.dim;
    let rule = Arc::new(quad::gauss_on(0.0, 1.0, radial_order));
    let in_idx = multi_indices(n, k);
    let out_idx = multi_indices(n, k - 1);
    let src = Arc::new(theta.clone());
    let a: Arc<Vec<f64>> = Arc::new(a.to_vec());

    let coeffs: Vec<ScalarField> = out_idx
        .iter()
        .map(|j_index| {
            // contributions: directions i not in J, channel I = J u {i},
            // sign = parity of the insertion position of i in I
            let mut terms = Vec::new();
            for i in 0..n {
                if j_index.contains(&i) {
                    continue;
                }
                let mut merged = j_index.clone();
                let pos = merged.iter().position(|&m| m > i).unwrap_or(merged.len());
                merged.insert(pos, i);
                let c = in_idx.iter().position(|ix| *ix == merged).unwrap();
                let sign = if pos % 2 == 0 { 1.0 } else { -1.0 };
                terms.push((i, sign, c));
            }
            let src = src.clone();
            let a = a.clone();
            let rule = rule.clone();
            let kf = (k - 1) as i32;
            Arc::new(move |x: &[f64]| {
                let dir: Vec<f64> = x.iter().zip(a.iter()).map(|(xi, ai)| xi - ai).collect();
                let mut acc = 0.0;
                let mut pt = vec![0.0; dir.len()];
                for &(i, sign, c) in &terms {
                    let mut integral = 0.0;
                    for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
                        for (p, (ai, di)) in pt.iter_mut().zip(a.iter().zip(&dir)) {
                            *p = ai + t * di;
                        }
                        integral += w * t.powi(kf) * src.eval_channel(c, &pt);
                    }
                    acc += sign * dir[i] * integral;
                }
                acc
            }) as ScalarField
        })
        .collect();
    DifferentialForm::analytic(theta.domain.clone(), k - 1, coeffs)
}

/// Averaged homotopy: sum of cone operators over the base nodes. A point
/// base reduces to the plain cone operator.
pub fn averaged_homotopy(
    theta: &DifferentialForm,
    config: &HomotopyConfig,
) -> Result<DifferentialForm> {
    let (nodes, weights) = config.base_nodes();
    if nodes.len() == 1 {
        return cone_homotopy(theta, &nodes[0], config.radial_order);
    }
    let cones: Vec<DifferentialForm> = nodes
        .iter()
        .map(|a| cone_homotopy(theta, a, config.radial_order))
        .collect::<Result<_>>()?;
    let mut acc = cones[0].scale(weights[0]);
    for (cone, &w) in cones.iter().zip(&weights).skip(1) {
        acc = acc.linear_combination(1.0, cone, w)?;
    }
    Ok(acc)
}

/// Sup over grid nodes of |T(d theta) + d(T theta) - theta|, coefficientwise.
/// Requires an attached exact differential so that the first term carries no
/// differentiation error; the middle d is an independent pointwise stencil.
pub fn homotopy_residual(
    theta: &DifferentialForm,
    config: &HomotopyConfig,
    grid: &Grid,
) -> Result<f64> {
    if !theta.has_exact_differential() && theta.degree < theta.domain.dim {
        return Err(LqpError::InvalidArgument(
            "homotopy residual needs an analytic form with attached differential".into(),
        ));
    }
    let k = theta.degree;
    let n = theta.domain.dim;
    let t_dtheta = if k < n {
        let dtheta = crate::forms::exterior_derivative(theta)?;
        Some(averaged_homotopy(&dtheta, config)?)
    } else {
        None
    };
    let t_theta = averaged_homotopy(theta, config)?;
    let mut worst = 0.0f64;
    for (x, _) in grid.iter_nodes() {
        let mut res = theta.eval(&x).iter().map(|v| -v).collect::<Vec<f64>>();
        if let Some(td) = &t_dtheta {
            for (r, v) in res.iter_mut().zip(td.eval(&x)) {
                *r += v;
            }
        }
        let dtt = derivative_at_point(&t_theta, &x, RESIDUAL_FD_STEP);
        for (r, v) in res.iter_mut().zip(dtt) {
            *r += v;
        }
        for v in res {
            worst = worst.max(v.abs());
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Riesz kernel bound
// ---------------------------------------------------------------------------

/// Admissibility of the convolution estimate behind the L^p -> L^q bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Admissibility {
    /// 1/p - 1/q < 1/n: the kernel norm is finite and computed.
    Strict,
    /// 1/p - 1/q = 1/n with p > 1: bounded, but without an explicit constant.
    Boundary,
    /// 1/p - 1/q > 1/n: the bound fails (compare the ball witness).
    Inadmissible,
}

/// The Young-exponent bookkeeping for the kernel |x|^{1-n}.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RieszBound {
    pub s: f64,
    /// L^s norm of |x|^{1-n} over the ball of the given diameter; present
    /// only in the strict case.
    pub kernel_norm: Option<f64>,
    pub admissibility: Admissibility,
}

impl RieszBound {
    pub fn admissible(&self) -> bool {
        self.admissibility != Admissibility::Inadmissible
    }
}

fn sphere_area(n: usize) -> f64 {
    match n {
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI,
        _ => unimplemented!("sphere area beyond dimension 3"),
    }
}

/// Bound data for T: L^p -> L^q on a convex domain of the given diameter.
/// s solves 1/p + 1/s = 1 + 1/q; the kernel norm is the closed-form
/// integral of |x|^{(1-n)s} over the ball of that diameter.
pub fn riesz_bound(n: usize, pair: &ExponentPair, diameter: f64) -> Result<RieszBound> {
    let inv_s = 1.0 + pair.q.recip() - pair.p.recip();
    if inv_s <= 0.0 {
        return Err(LqpError::InvalidExponent(format!(
            "Young exponent undefined: 1 + 1/q - 1/p = {inv_s} <= 0"
        )));
    }
    let s = 1.0 / inv_s;
    let gap = pair.sobolev_gap();
    let critical = 1.0 / n as f64;
    // s(1 - n) > -n is equivalent to 1/p - 1/q < 1/n
    let margin = s * (1.0 - n as f64) + n as f64;
    let admissibility = if (gap - critical).abs() <= 1e-12 {
        if pair.p.value() > 1.0 {
            Admissibility::Boundary
        } else {
            Admissibility::Inadmissible
        }
    } else if gap < critical {
        Admissibility::Strict
    } else {
        Admissibility::Inadmissible
    };
    let kernel_norm = if admissibility == Admissibility::Strict {
        let radius = 0.5 * diameter;
        let mass = sphere_area(n) * radius.powf(margin) / margin;
        Some(mass.powf(1.0 / s))
    } else {
        None
    };
    Ok(RieszBound {
        s,
        kernel_norm,
        admissibility,
    })
}

// ---------------------------------------------------------------------------
// Poincare primitive
// ---------------------------------------------------------------------------

/// A primitive with norm control: eta = T omega with d eta = omega and the
/// measured ratio ||eta||_q / ||omega||_p.
#[derive(Debug)]
pub struct PrimitiveReport {
    pub eta: DifferentialForm,
    pub ratio: f64,
    pub kernel_norm: f64,
    pub identity_residual: f64,
}

/// Produce a primitive of a closed form with L^q control, rejecting
/// exponents outside the bounded range.
pub fn poincare_primitive(
    omega: &DifferentialForm,
    pair: &ExponentPair,
    config: &HomotopyConfig,
    grid: &Grid,
    metric: &DiagonalMetric,
    closedness_tol: f64,
) -> Result<PrimitiveReport> {
    let n = omega.domain.dim;
    let bound = riesz_bound(n, pair, 2.0)?;
    if !bound.admissible() {
        return Err(LqpError::ExponentsNotAdmissible {
            gap: pair.sobolev_gap(),
            critical: 1.0 / n as f64,
        });
    }
    // closedness: use the attached differential when present, otherwise a
    // pointwise stencil on a probe subset
    let mut closed_defect = 0.0f64;
    if omega.degree < n {
        if omega.has_exact_differential() {
            let d = crate::forms::exterior_derivative(omega)?;
            for (x, _) in grid.iter_nodes().step_by(7) {
                for v in d.eval(&x) {
                    closed_defect = closed_defect.max(v.abs());
                }
            }
        } else {
            for (x, _) in grid.iter_nodes().step_by(7) {
                for v in derivative_at_point(omega, &x, RESIDUAL_FD_STEP) {
                    closed_defect = closed_defect.max(v.abs());
                }
            }
        }
    }
    if closed_defect > closedness_tol {
        return Err(LqpError::InvalidArgument(format!(
            "form is not closed: |d omega| = {closed_defect} > {closedness_tol}"
        )));
    }
    let eta = averaged_homotopy(omega, config)?;
    let mut residual = 0.0f64;
    for (x, _) in grid.iter_nodes().step_by(5) {
        let d_eta = derivative_at_point(&eta, &x, RESIDUAL_FD_STEP);
        for (de, v) in d_eta.iter().zip(omega.eval(&x)) {
            residual = residual.max((de - v).abs());
        }
    }
    let num = lp_norm(&eta, metric, grid, pair.q).value;
    let den = lp_norm(omega, metric, grid, pair.p).value;
    let kernel_norm = bound.kernel_norm.unwrap_or(f64::NAN);
    Ok(PrimitiveReport {
        eta,
        ratio: if den > 0.0 { num / den } else { 0.0 },
        kernel_norm,
        identity_residual: residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::{exterior_derivative, DifferentialForm, InterpOrder};
    use crate::geometry::build_grid;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn ball2() -> ChartDomain {
        ChartDomain::ball(2).unwrap()
    }

    #[test]
    fn cone_of_basis_one_form_is_coordinate() {
        // K_0(dx^1) = x^1
        let dx1 = DifferentialForm::constant(ball2(), 1, &[1.0, 0.0]).unwrap();
        let k = cone_homotopy(&dx1, &[0.0, 0.0], 32).unwrap();
        assert_eq!(k.degree, 0);
        for pt in [[0.3, 0.7], [-0.5, 0.2], [0.0, 0.0]] {
            assert_abs_diff_eq!(k.eval(&pt)[0], pt[0], epsilon = 1e-13);
        }
    }

    #[test]
    fn cone_of_area_form_is_rotated_radial() {
        // K_0(dx^1 ^ dx^2) = (x^1 dx^2 - x^2 dx^1) / 2, and d returns the input
        let area = DifferentialForm::constant(ball2(), 2, &[1.0]).unwrap();
        let k = cone_homotopy(&area, &[0.0, 0.0], 32).unwrap();
        for pt in [[0.4, 0.1], [-0.2, -0.6]] {
            let v = k.eval(&pt);
            assert_abs_diff_eq!(v[0], -0.5 * pt[1], epsilon = 1e-13);
            assert_abs_diff_eq!(v[1], 0.5 * pt[0], epsilon = 1e-13);
        }
        let dk = derivative_at_point(&k, &[0.25, -0.33], 1e-3);
        assert_abs_diff_eq!(dk[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn cone_is_linear_and_zero_on_zero() {
        let zero = DifferentialForm::zero(ball2(), 1).unwrap();
        let k = cone_homotopy(&zero, &[0.1, 0.0], 32).unwrap();
        assert_abs_diff_eq!(k.eval(&[0.5, 0.5])[0], 0.0, epsilon = 1e-15);

        let a = DifferentialForm::analytic(
            ball2(),
            1,
            vec![
                Arc::new(|x: &[f64]| x[0].sin()) as ScalarField,
                Arc::new(|x: &[f64]| x[1] * x[0]) as ScalarField,
            ],
        )
        .unwrap();
        let b = DifferentialForm::analytic(
            ball2(),
            1,
            vec![
                Arc::new(|x: &[f64]| x[1].cos()) as ScalarField,
                Arc::new(|x: &[f64]| x[0] - x[1]) as ScalarField,
            ],
        )
        .unwrap();
        let combo = a.linear_combination(2.0, &b, -3.0).unwrap();
        let lhs = cone_homotopy(&combo, &[0.0, 0.1], 24).unwrap();
        let ka = cone_homotopy(&a, &[0.0, 0.1], 24).unwrap();
        let kb = cone_homotopy(&b, &[0.0, 0.1], 24).unwrap();
        let pt = [0.3, -0.4];
        assert_abs_diff_eq!(
            lhs.eval(&pt)[0],
            2.0 * ka.eval(&pt)[0] - 3.0 * kb.eval(&pt)[0],
            epsilon = 1e-12
        );
    }

    #[test]
    fn degree_zero_and_outside_base_are_rejected() {
        let f = DifferentialForm::constant(ball2(), 0, &[1.0]).unwrap();
        assert!(cone_homotopy(&f, &[0.0, 0.0], 8).is_err());
        let dx1 = DifferentialForm::constant(ball2(), 1, &[1.0, 0.0]).unwrap();
        assert!(cone_homotopy(&dx1, &[1.5, 0.0], 8).is_err());
    }

    #[test]
    fn point_base_average_reduces_to_cone() {
        let theta = DifferentialForm::analytic(
            ball2(),
            1,
            vec![
                Arc::new(|x: &[f64]| x[0] * x[1]) as ScalarField,
                Arc::new(|x: &[f64]| x[0] + 0.2) as ScalarField,
            ],
        )
        .unwrap();
        let config = HomotopyConfig::point(vec![0.05, -0.1]);
        let avg = averaged_homotopy(&theta, &config).unwrap();
        let cone = cone_homotopy(&theta, &[0.05, -0.1], 32).unwrap();
        let pt = [0.6, 0.2];
        assert_eq!(avg.eval(&pt)[0].to_bits(), cone.eval(&pt)[0].to_bits());
    }

    #[test]
    fn four_node_average_still_inverts_d_on_constants() {
        let area = DifferentialForm::constant(ball2(), 2, &[1.0]).unwrap();
        let nodes = vec![
            vec![0.2, 0.0],
            vec![-0.2, 0.0],
            vec![0.0, 0.2],
            vec![0.0, -0.2],
        ];
        let config = HomotopyConfig::averaged_explicit(nodes, vec![0.25; 4]).unwrap();
        let t = averaged_homotopy(&area, &config).unwrap();
        for pt in [[0.3, 0.3], [-0.1, 0.6]] {
            let dt = derivative_at_point(&t, &pt, 1e-3);
            assert_abs_diff_eq!(dt[0], 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn residual_small_for_polynomials_and_drops_with_order() {
        let dom = ball2();
        let grid = build_grid(&dom, &[12, 16], None).unwrap();
        let theta = DifferentialForm::analytic(
            dom.clone(),
            1,
            vec![
                Arc::new(|x: &[f64]| x[0] * x[0] * x[1]) as ScalarField,
                Arc::new(|x: &[f64]| x[1] * x[0]) as ScalarField,
            ],
        )
        .unwrap()
        .with_exact_differential(
            DifferentialForm::analytic(
                dom.clone(),
                2,
                vec![Arc::new(|x: &[f64]| x[1] - x[0] * x[0]) as ScalarField],
            )
            .unwrap(),
        )
        .unwrap();
        let config = HomotopyConfig::point(vec![0.0, 0.0]);
        let res = homotopy_residual(&theta, &config, &grid).unwrap();
        assert!(res <= 1e-10, "polynomial residual {res}");

        // oscillatory non-closed form: order 16 underresolves, order 32 resolves
        let osc = DifferentialForm::analytic(
            dom.clone(),
            1,
            vec![
                Arc::new(|x: &[f64]| (45.0 * x[1]).sin()) as ScalarField,
                Arc::new(|_: &[f64]| 0.0) as ScalarField,
            ],
        )
        .unwrap()
        .with_exact_differential(
            DifferentialForm::analytic(
                dom,
                2,
                vec![Arc::new(|x: &[f64]| -45.0 * (45.0 * x[1]).cos()) as ScalarField],
            )
            .unwrap(),
        )
        .unwrap();
        let coarse = homotopy_residual(
            &osc,
            &HomotopyConfig::point(vec![0.0, 0.0]).with_radial_order(16),
            &grid,
        )
        .unwrap();
        let fine = homotopy_residual(
            &osc,
            &HomotopyConfig::point(vec![0.0, 0.0]).with_radial_order(32),
            &grid,
        )
        .unwrap();
        assert!(
            coarse / fine >= 100.0,
            "expected two orders of magnitude, got {coarse} / {fine}"
        );
    }

    #[test]
    fn closed_forms_reduce_residual_to_primitive_check() {
        // theta closed: T d theta = 0, so the residual is |d(T theta) - theta|
        let dom = ball2();
        let grid = build_grid(&dom, &[10, 12], None).unwrap();
        let closed = DifferentialForm::constant(dom, 1, &[0.4, -0.3]).unwrap();
        let config = HomotopyConfig::point(vec![0.0, 0.0]);
        let res = homotopy_residual(&closed, &config, &grid).unwrap();
        assert!(res <= 1e-10, "closed-form residual {res}");
    }

    #[test]
    fn riesz_bound_cases() {
        // n=2, p=q=2: s=1, kernel over the radius-1 ball = 2 pi
        let pair = ExponentPair::finite(2.0, 2.0).unwrap();
        let b = riesz_bound(2, &pair, 2.0).unwrap();
        assert_abs_diff_eq!(b.s, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            b.kernel_norm.unwrap(),
            2.0 * std::f64::consts::PI,
            epsilon = 1e-12
        );
        assert_eq!(b.admissibility, Admissibility::Strict);

        // n=2, p=4/3, q=8: s = 8/3, s(1-n) = -8/3 < -2: inadmissible
        let pair = ExponentPair::finite(4.0 / 3.0, 8.0).unwrap();
        let b = riesz_bound(2, &pair, 2.0).unwrap();
        assert_abs_diff_eq!(b.s, 8.0 / 3.0, epsilon = 1e-12);
        assert_eq!(b.admissibility, Admissibility::Inadmissible);
        assert!(b.kernel_norm.is_none());

        // boundary: p=2, q=infinity on n=2 with p > 1
        let pair = ExponentPair::new(Exponent::finite(2.0), Exponent::INFINITY).unwrap();
        let b = riesz_bound(2, &pair, 2.0).unwrap();
        assert_eq!(b.admissibility, Admissibility::Boundary);
    }

    #[test]
    fn primitive_of_area_form_has_controlled_ratio() {
        let dom = ball2();
        let grid = build_grid(&dom, &[32, 32], Some(2.0)).unwrap();
        let metric = DiagonalMetric::euclidean(2);
        let omega = DifferentialForm::constant(dom.clone(), 2, &[1.0]).unwrap();
        let pair = ExponentPair::finite(2.0, 2.0).unwrap();
        let config = HomotopyConfig::point(vec![0.0, 0.0]);
        let report = poincare_primitive(&omega, &pair, &config, &grid, &metric, 1e-9).unwrap();
        assert!(report.identity_residual <= 1e-9);
        assert!(report.ratio <= report.kernel_norm);

        // gauge freedom: a primitive of d(poly) differs from poly by a
        // closed form, so d of it still returns d(poly)
        let poly = DifferentialForm::analytic(
            dom.clone(),
            0,
            vec![Arc::new(|x: &[f64]| x[0] * x[0] - x[1]) as ScalarField],
        )
        .unwrap();
        let dpoly = exterior_derivative(&poly).unwrap();
        let eta = averaged_homotopy(&dpoly, &config).unwrap();
        for pt in [[0.2, 0.3], [-0.4, 0.5]] {
            let d_eta = derivative_at_point(&eta, &pt, 1e-3);
            for (a, b) in d_eta.iter().zip(dpoly.eval(&pt)) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
            }
        }

        // inadmissible exponents are rejected with the witness pointer
        let bad = ExponentPair::finite(4.0 / 3.0, 8.0).unwrap();
        let err = poincare_primitive(&omega, &bad, &config, &grid, &metric, 1e-9);
        assert!(matches!(err, Err(LqpError::ExponentsNotAdmissible { .. })));
    }

    #[test]
    fn averaged_operator_is_lp_lq_bounded_by_kernel_norm() {
        // random sampled forms: ||T theta||_q <= kernel_norm ||theta||_p
        let dom = ball2();
        let grid = Arc::new(build_grid(&dom, &[24, 32], Some(2.0)).unwrap());
        let metric = DiagonalMetric::euclidean(2);
        let config = HomotopyConfig::averaged_disc(vec![0.0, 0.0], 0.3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for pair in [
            ExponentPair::finite(2.0, 2.0).unwrap(),
            ExponentPair::finite(2.0, 3.0).unwrap(),
            ExponentPair::finite(1.5, 2.0).unwrap(),
        ] {
            let bound = riesz_bound(2, &pair, 2.0).unwrap();
            let c = bound.kernel_norm.unwrap();
            for _ in 0..3 {
                let a: f64 = rng.gen_range(-1.0..1.0);
                let b: f64 = rng.gen_range(-1.0..1.0);
                let theta = DifferentialForm::analytic(
                    dom.clone(),
                    1,
                    vec![
                        Arc::new(move |x: &[f64]| a * (3.0 * x[0]).sin() + b) as ScalarField,
                        Arc::new(move |x: &[f64]| b * (2.0 * x[1]).cos()) as ScalarField,
                    ],
                )
                .unwrap()
                .sample(grid.clone(), InterpOrder::Cubic)
                .unwrap();
                let t = averaged_homotopy(&theta, &config).unwrap();
                let nt = lp_norm(&t, &metric, &grid, pair.q).value;
                let n0 = lp_norm(&theta, &metric, &grid, pair.p).value;
                assert!(
                    nt <= c * n0 * (1.0 + 1e-10),
                    "bound violated: {nt} > {c} * {n0}"
                );
            }
        }
    }

    #[test]
    fn degree_chain_identity_holds_with_pairwise_admissible_exponents() {
        // (r, p, q) pairwise admissible: the identity on degree k composes
        // T: L^r -> L^p on degree k+1 with T: L^p -> L^q on degree k
        let dom = ball2();
        let grid = build_grid(&dom, &[10, 12], None).unwrap();
        let r_to_p = ExponentPair::finite(2.0, 2.5).unwrap();
        let p_to_q = ExponentPair::finite(2.5, 3.0).unwrap();
        assert!(riesz_bound(2, &r_to_p, 2.0).unwrap().admissible());
        assert!(riesz_bound(2, &p_to_q, 2.0).unwrap().admissible());
        let theta = DifferentialForm::analytic(
            dom.clone(),
            1,
            vec![
                Arc::new(|x: &[f64]| (x[0] + 2.0 * x[1]).sin()) as ScalarField,
                Arc::new(|x: &[f64]| (x[0] * x[1]).cos()) as ScalarField,
            ],
        )
        .unwrap()
        .with_exact_differential(
            DifferentialForm::analytic(
                dom,
                2,
                vec![Arc::new(|x: &[f64]| {
                    -x[1] * (x[0] * x[1]).sin() - 2.0 * (x[0] + 2.0 * x[1]).cos()
                }) as ScalarField],
            )
            .unwrap(),
        )
        .unwrap();
        let config = HomotopyConfig::point(vec![0.0, 0.0]);
        let res = homotopy_residual(&theta, &config, &grid).unwrap();
        assert!(res <= 1e-8, "chain identity residual {res}");
    }
}
