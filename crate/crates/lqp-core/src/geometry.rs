//! Model domains, diagonal Riemannian metrics, quadrature grids and the
//! exponent bookkeeping behind the Sobolev conditions.

use std::fmt;
use std::sync::Arc;

use crate::quad;
use crate::{LqpError, Result};

/// A scalar field on a chart, evaluated at chart coordinates.
pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

// ---------------------------------------------------------------------------
// Exponents
// ---------------------------------------------------------------------------

/// A Lebesgue exponent in [1, infinity]. The reciprocal is stored alongside
/// the value so that conjugation satisfies 1/p + 1/p' = 1 bit-exactly
/// (symbolically for infinity, where the reciprocal is 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exponent {
    value: f64,
    recip: f64,
}

impl Exponent {
    pub const INFINITY: Exponent = Exponent {
        value: f64::INFINITY,
        recip: 0.0,
    };

    pub fn finite(p: f64) -> Self {
        Exponent {
            value: p,
            recip: 1.0 / p,
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// 1/p, with 1/infinity = 0 exactly.
    pub fn recip(&self) -> f64 {
        self.recip
    }

    /// Hoelder conjugate p' with 1/p + 1/p' = 1; conjugate of 1 is infinity.
    pub fn conjugate(&self) -> Exponent {
        if !self.value.is_finite() {
            Exponent::finite(1.0)
        } else if self.value == 1.0 {
            Exponent::INFINITY
        } else {
            Exponent {
                value: self.value / (self.value - 1.0),
                recip: 1.0 - self.recip,
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }

    fn validate(&self) -> Result<()> {
        if (self.value >= 1.0 && self.value.is_finite()) || self.value == f64::INFINITY {
            Ok(())
        } else {
            Err(LqpError::InvalidExponent(format!(
                "exponent {} outside [1, infinity]",
                self.value
            )))
        }
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.value.is_finite() {
            write!(f, "{}", self.value)
        } else {
            write!(f, "inf")
        }
    }
}

/// The pair (p, q) with its conjugates and the Young exponent s defined by
/// 1/s = 1 + 1/q - 1/p (populated only when that quantity is positive).
#[derive(Debug, Clone, Copy)]
pub struct ExponentPair {
    pub p: Exponent,
    pub q: Exponent,
    /// True when p = 1 or q = 1; the endpoint cases the statements admit
    /// only with care.
    pub at_endpoint: bool,
}

impl ExponentPair {
    pub fn new(p: Exponent, q: Exponent) -> Result<Self> {
        p.validate()?;
        q.validate()?;
        let at_endpoint = p.value() == 1.0 || q.value() == 1.0;
        Ok(ExponentPair { p, q, at_endpoint })
    }

    pub fn finite(p: f64, q: f64) -> Result<Self> {
        Self::new(Exponent::finite(p), Exponent::finite(q))
    }

    pub fn p_conjugate(&self) -> Exponent {
        self.p.conjugate()
    }

    pub fn q_conjugate(&self) -> Exponent {
        self.q.conjugate()
    }

    /// Young exponent s with 1/p + 1/s = 1 + 1/q, when the right side
    /// exceeds 1/p.
    pub fn young_exponent(&self) -> Option<f64> {
        let inv_s = 1.0 + self.q.recip() - self.p.recip();
        if inv_s > 0.0 {
            Some(1.0 / inv_s)
        } else {
            None
        }
    }

    /// 1/p - 1/q, the quantity the dimension bound constrains.
    pub fn sobolev_gap(&self) -> f64 {
        self.p.recip() - self.q.recip()
    }
}

/// Verdict of the dimension condition 1/p - 1/q <= 1/n.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum SobolevVerdict {
    Strict,
    Boundary,
    Violated,
}

/// The equivalent split of the same condition: p >= n, or p < n with q
/// relative to np/(n-p).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub enum SobolevBranch {
    LargeP,
    SubcriticalQ { critical: f64 },
    SupercriticalQ { critical: f64 },
}

/// Classify (p, q) against 1/p - 1/q <= 1/n and report the equivalent branch.
pub fn sobolev_exponent_check(pair: &ExponentPair, n: usize) -> (SobolevVerdict, SobolevBranch) {
    let gap = pair.sobolev_gap();
    let bound = 1.0 / n as f64;
    let verdict = if (gap - bound).abs() <= 1e-12 {
        SobolevVerdict::Boundary
    } else if gap < bound {
        SobolevVerdict::Strict
    } else {
        SobolevVerdict::Violated
    };
    let branch = if pair.p.recip() <= bound {
        SobolevBranch::LargeP
    } else {
        // p < n; critical q* = np/(n-p), as 1/q* = 1/p - 1/n
        let critical = 1.0 / (pair.p.recip() - bound);
        if pair.q.recip() >= pair.p.recip() - bound - 1e-12 {
            SobolevBranch::SubcriticalQ { critical }
        } else {
            SobolevBranch::SupercriticalQ { critical }
        }
    };
    (verdict, branch)
}

// ---------------------------------------------------------------------------
// Domains
// ---------------------------------------------------------------------------

/// The model chart a computation lives on.
#[derive(Debug, Clone, PartialEq)]
pub enum DomainKind {
    Interval { a: f64, b: f64 },
    Circle { length: f64 },
    Torus { lengths: Vec<f64> },
    Ball { dim: usize },
    /// Horocyclic chart of the hyperbolic plane, truncated to
    /// [-y_bound, y_bound] x [z_min, z_max].
    HalfplaneHorocyclic { y_bound: f64, z_min: f64, z_max: f64 },
}

/// A model domain: kind plus dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartDomain {
    pub kind: DomainKind,
    pub dim: usize,
}

impl ChartDomain {
    pub fn interval(a: f64, b: f64) -> Result<Self> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(LqpError::InvalidArgument(format!(
                "interval bounds must be finite and ordered, got [{a}, {b}]"
            )));
        }
        Ok(ChartDomain {
            kind: DomainKind::Interval { a, b },
            dim: 1,
        })
    }

    pub fn circle(length: f64) -> Result<Self> {
        if !(length > 0.0) {
            return Err(LqpError::InvalidArgument("circle length must be positive".into()));
        }
        Ok(ChartDomain {
            kind: DomainKind::Circle { length },
            dim: 1,
        })
    }

    pub fn torus(lengths: &[f64]) -> Result<Self> {
        if lengths.is_empty() || lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(LqpError::InvalidArgument(
                "torus needs positive per-axis lengths".into(),
            ));
        }
        Ok(ChartDomain {
            kind: DomainKind::Torus {
                lengths: lengths.to_vec(),
            },
            dim: lengths.len(),
        })
    }

    pub fn ball(dim: usize) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(LqpError::Unsupported(format!(
                "ball charts are implemented for dimensions 2 and 3, got {dim}"
            )));
        }
        Ok(ChartDomain {
            kind: DomainKind::Ball { dim },
            dim,
        })
    }

    pub fn halfplane(y_bound: f64, z_min: f64, z_max: f64) -> Result<Self> {
        if !(y_bound > 0.0) || !(z_min < 0.0) || !(z_max > 0.0) || !z_min.is_finite() || !z_max.is_finite() {
            return Err(LqpError::InvalidArgument(
                "halfplane truncation needs y_bound > 0 and z_min < 0 < z_max, all finite".into(),
            ));
        }
        Ok(ChartDomain {
            kind: DomainKind::HalfplaneHorocyclic { y_bound, z_min, z_max },
            dim: 2,
        })
    }

    /// Number of grid axes (polar axes for the ball).
    pub fn axis_count(&self) -> usize {
        self.dim
    }

    pub fn is_periodic_axis(&self, axis: usize) -> bool {
        match &self.kind {
            DomainKind::Circle { .. } => true,
            DomainKind::Torus { .. } => true,
            // ball: last angular axis wraps
            DomainKind::Ball { dim } => axis == dim - 1,
            _ => false,
        }
    }

    /// Coordinate range of a grid axis.
    pub fn axis_range(&self, axis: usize) -> (f64, f64) {
        match &self.kind {
            DomainKind::Interval { a, b } => (*a, *b),
            DomainKind::Circle { length } => (0.0, *length),
            DomainKind::Torus { lengths } => (0.0, lengths[axis]),
            DomainKind::Ball { dim } => match (dim, axis) {
                (_, 0) => (0.0, 1.0),
                (3, 1) => (0.0, std::f64::consts::PI),
                _ => (0.0, 2.0 * std::f64::consts::PI),
            },
            DomainKind::HalfplaneHorocyclic { y_bound, z_min, z_max } => {
                if axis == 0 {
                    (-y_bound, *y_bound)
                } else {
                    (*z_min, *z_max)
                }
            }
        }
    }

    pub fn is_compact(&self) -> bool {
        matches!(self.kind, DomainKind::Circle { .. } | DomainKind::Torus { .. })
    }

    /// True when the kind has a distinguished singular point for grading
    /// (the ball origin).
    pub fn has_singular_point(&self) -> bool {
        matches!(self.kind, DomainKind::Ball { .. })
    }

    /// Map axis coordinates to chart coordinates (polar to Cartesian on the
    /// ball, identity elsewhere).
    pub fn axis_to_chart(&self, axis_coords: &[f64]) -> Vec<f64> {
        match &self.kind {
            DomainKind::Ball { dim: 2 } => {
                let (r, psi) = (axis_coords[0], axis_coords[1]);
                vec![r * psi.cos(), r * psi.sin()]
            }
            DomainKind::Ball { dim: 3 } => {
                let (r, theta, phi) = (axis_coords[0], axis_coords[1], axis_coords[2]);
                vec![
                    r * theta.sin() * phi.cos(),
                    r * theta.sin() * phi.sin(),
                    r * theta.cos(),
                ]
            }
            _ => axis_coords.to_vec(),
        }
    }

    /// Inverse of `axis_to_chart`.
    pub fn chart_to_axis(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            DomainKind::Ball { dim: 2 } => {
                let r = x[0].hypot(x[1]);
                let mut psi = x[1].atan2(x[0]);
                if psi < 0.0 {
                    psi += 2.0 * std::f64::consts::PI;
                }
                vec![r, psi]
            }
            DomainKind::Ball { dim: 3 } => {
                let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
                let theta = if r > 0.0 { (x[2] / r).acos() } else { 0.0 };
                let mut phi = x[1].atan2(x[0]);
                if phi < 0.0 {
                    phi += 2.0 * std::f64::consts::PI;
                }
                vec![r, theta, phi]
            }
            _ => x.to_vec(),
        }
    }

    /// Jacobian of the axis chart (r^{n-1}, r^2 sin(theta)); 1 elsewhere.
    pub fn axis_jacobian(&self, axis_coords: &[f64]) -> f64 {
        match &self.kind {
            DomainKind::Ball { dim: 2 } => axis_coords[0],
            DomainKind::Ball { dim: 3 } => axis_coords[0] * axis_coords[0] * axis_coords[1].sin(),
            _ => 1.0,
        }
    }

    /// Lebesgue measure of the chart (the ball measure includes the
    /// Jacobian).
    pub fn chart_measure(&self) -> f64 {
        match &self.kind {
            DomainKind::Interval { a, b } => b - a,
            DomainKind::Circle { length } => *length,
            DomainKind::Torus { lengths } => lengths.iter().product(),
            DomainKind::Ball { dim: 2 } => std::f64::consts::PI,
            DomainKind::Ball { dim: 3 } => 4.0 * std::f64::consts::PI / 3.0,
            DomainKind::Ball { .. } => unreachable!(),
            DomainKind::HalfplaneHorocyclic { y_bound, z_min, z_max } => {
                2.0 * y_bound * (z_max - z_min)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// A diagonal Riemannian metric: one positive coefficient function per axis,
/// evaluated at chart coordinates.
#[derive(Clone)]
pub struct DiagonalMetric {
    coeffs: Vec<ScalarField>,
}

impl fmt::Debug for DiagonalMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DiagonalMetric(dim {})", self.coeffs.len())
    }
}

impl DiagonalMetric {
    pub fn new(coeffs: Vec<ScalarField>) -> Self {
        DiagonalMetric { coeffs }
    }

    /// The flat metric g_ii = 1.
    pub fn euclidean(dim: usize) -> Self {
        DiagonalMetric {
            coeffs: (0..dim).map(|_| Arc::new(|_: &[f64]| 1.0) as ScalarField).collect(),
        }
    }

    /// Horocyclic metric e^{2z} dy^2 + dz^2 on the (y, z) chart.
    pub fn horocyclic() -> Self {
        DiagonalMetric {
            coeffs: vec![
                Arc::new(|x: &[f64]| (2.0 * x[1]).exp()) as ScalarField,
                Arc::new(|_: &[f64]| 1.0) as ScalarField,
            ],
        }
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    /// g_ii at a chart point.
    pub fn coeff(&self, i: usize, x: &[f64]) -> f64 {
        (self.coeffs[i])(x)
    }

    /// sqrt(prod g_ii), the Riemannian volume density.
    pub fn volume_density(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|g| g(x)).product::<f64>().sqrt()
    }

    /// Norm factor of the coordinate coframe dx^I: prod over I of 1/g_ii.
    pub fn coframe_factor(&self, index: &[usize], x: &[f64]) -> f64 {
        index.iter().map(|&i| 1.0 / self.coeff(i, x)).product()
    }

    /// Conformal deformation g -> rho^2 g. The factor is validated as
    /// positive on the probe grid.
    pub fn conformal_rescale(&self, rho: ScalarField, probe: &Grid) -> Result<DiagonalMetric> {
        for (x, _) in probe.iter_nodes() {
            let r = rho(&x);
            if !(r > 0.0) {
                return Err(LqpError::InvalidArgument(format!(
                    "conformal factor must be positive, got {r} at {x:?}"
                )));
            }
        }
        let coeffs = self
            .coeffs
            .iter()
            .map(|g| {
                let g = g.clone();
                let rho = rho.clone();
                Arc::new(move |x: &[f64]| {
                    let r = rho(x);
                    r * r * g(x)
                }) as ScalarField
            })
            .collect();
        Ok(DiagonalMetric { coeffs })
    }
}

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

/// One grid axis: nodes with quadrature weights, optionally periodic.
#[derive(Debug, Clone)]
pub struct Axis {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub periodic: bool,
    pub period: Option<f64>,
    /// Uniform spacing, when the nodes are equispaced (enables grid
    /// finite differences).
    pub spacing: Option<f64>,
}

impl Axis {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// A tensor-product quadrature grid over a chart domain. Weights fold in the
/// polar Jacobian on the ball, so they sum to the domain measure.
#[derive(Debug, Clone)]
pub struct Grid {
    pub domain: ChartDomain,
    pub axes: Vec<Axis>,
    pub grading: Option<f64>,
}

/// Node placement style for non-periodic axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridStyle {
    /// Composite Gauss panels: accurate quadrature, non-uniform nodes.
    GaussPanels,
    /// Equispaced nodes with trapezoid weights: enables finite differences.
    Uniform,
}

const GAUSS_PANEL_ORDER: usize = 8;

fn uniform_periodic_axis(length: f64, count: usize) -> Axis {
    let h = length / count as f64;
    Axis {
        nodes: (0..count).map(|i| i as f64 * h).collect(),
        weights: vec![h; count],
        periodic: true,
        period: Some(length),
        spacing: Some(h),
    }
}

fn uniform_axis(a: f64, b: f64, count: usize) -> Axis {
    let h = (b - a) / (count - 1) as f64;
    let mut weights = vec![h; count];
    weights[0] = 0.5 * h;
    weights[count - 1] = 0.5 * h;
    Axis {
        nodes: (0..count).map(|i| a + i as f64 * h).collect(),
        weights,
        periodic: false,
        period: None,
        spacing: Some(h),
    }
}

fn gauss_axis(a: f64, b: f64, count: usize) -> Axis {
    let order = GAUSS_PANEL_ORDER.min(count.max(2));
    let panels = count.div_ceil(order);
    let rule = quad::composite_gauss(a, b, panels, order);
    Axis {
        nodes: rule.nodes,
        weights: rule.weights,
        periodic: false,
        period: None,
        spacing: None,
    }
}

fn graded_axis(length: f64, count: usize, grading: f64) -> Axis {
    let order = GAUSS_PANEL_ORDER.min(count.max(2));
    let panels = count.div_ceil(order);
    let rule = quad::graded_gauss(length, panels, order, grading);
    Axis {
        nodes: rule.nodes,
        weights: rule.weights,
        periodic: false,
        period: None,
        spacing: None,
    }
}

/// Build a quadrature grid on a domain, one resolution entry per axis.
/// `grading` applies to the radial axis and is only accepted on domains with
/// a singular point (the ball).
pub fn build_grid(domain: &ChartDomain, resolution: &[usize], grading: Option<f64>) -> Result<Grid> {
    build_grid_styled(domain, resolution, grading, GridStyle::GaussPanels)
}

/// `build_grid` with an explicit node style for non-periodic axes.
pub fn build_grid_styled(
    domain: &ChartDomain,
    resolution: &[usize],
    grading: Option<f64>,
    style: GridStyle,
) -> Result<Grid> {
    if resolution.len() != domain.axis_count() {
        return Err(LqpError::InvalidArgument(format!(
            "expected {} per-axis resolutions, got {}",
            domain.axis_count(),
            resolution.len()
        )));
    }
    if resolution.iter().any(|&n| n < 4) {
        return Err(LqpError::InvalidArgument(
            "resolution must be at least 4 per axis".into(),
        ));
    }
    if grading.is_some() && !domain.has_singular_point() {
        return Err(LqpError::InvalidArgument(
            "grading is only supported on domains with a singular point".into(),
        ));
    }
    let mut axes = Vec::with_capacity(domain.axis_count());
    for (i, &n) in resolution.iter().enumerate() {
        let (a, b) = domain.axis_range(i);
        let axis = if domain.is_periodic_axis(i) {
            uniform_periodic_axis(b - a, n)
        } else if i == 0 && domain.has_singular_point() {
            graded_axis(b, n, grading.unwrap_or(2.0))
        } else {
            match style {
                GridStyle::GaussPanels => gauss_axis(a, b, n),
                GridStyle::Uniform => uniform_axis(a, b, n),
            }
        };
        axes.push(axis);
    }
    Ok(Grid {
        domain: domain.clone(),
        axes,
        grading: if domain.has_singular_point() {
            Some(grading.unwrap_or(2.0))
        } else {
            None
        },
    })
}

impl Grid {
    pub fn node_count(&self) -> usize {
        self.axes.iter().map(Axis::len).product()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Axis::len).collect()
    }

    /// Decompose a flat node index into per-axis indices (row-major).
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let shape = self.shape();
        let mut idx = vec![0; shape.len()];
        for ax in (0..shape.len()).rev() {
            idx[ax] = flat % shape[ax];
            flat /= shape[ax];
        }
        idx
    }

    /// Axis coordinates of a node.
    pub fn axis_point(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .zip(&self.axes)
            .map(|(&i, ax)| ax.nodes[i])
            .collect()
    }

    /// Chart coordinates of a node (Cartesian on the ball).
    pub fn chart_point(&self, idx: &[usize]) -> Vec<f64> {
        self.domain.axis_to_chart(&self.axis_point(idx))
    }

    /// Quadrature weight of a node, including the chart Jacobian.
    pub fn weight(&self, idx: &[usize]) -> f64 {
        let base: f64 = idx
            .iter()
            .zip(&self.axes)
            .map(|(&i, ax)| ax.weights[i])
            .product();
        base * self.domain.axis_jacobian(&self.axis_point(idx))
    }

    /// Iterate (chart point, weight) over all nodes in row-major order.
    pub fn iter_nodes(&self) -> impl Iterator<Item = (Vec<f64>, f64)> + '_ {
        (0..self.node_count()).map(move |flat| {
            let idx = self.multi_index(flat);
            (self.chart_point(&idx), self.weight(&idx))
        })
    }

    /// Sum of all weights; equals the domain measure up to quadrature error.
    pub fn total_weight(&self) -> f64 {
        self.iter_nodes().map(|(_, w)| w).sum()
    }

    /// True when every axis is equispaced (grid finite differences apply).
    pub fn is_uniform(&self) -> bool {
        self.axes.iter().all(|ax| ax.spacing.is_some())
    }
}

/// Riemannian volume of the domain: quadrature of the volume density.
pub fn volume(metric: &DiagonalMetric, grid: &Grid) -> f64 {
    grid.iter_nodes()
        .map(|(x, w)| w * metric.volume_density(&x))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exponent_conjugates_are_exact() {
        let pair = ExponentPair::finite(2.0, 2.0).unwrap();
        assert_eq!(pair.p_conjugate().value(), 2.0);
        let one = ExponentPair::new(Exponent::finite(1.0), Exponent::INFINITY).unwrap();
        assert!(!one.p.conjugate().is_finite());
        assert_eq!(one.q.conjugate().value(), 1.0);
        assert!(one.at_endpoint);
        // 1/p + 1/p' = 1 exactly for a sample of finite exponents
        for p in [1.5, 4.0 / 3.0, 2.0, 7.3, 8.0] {
            let e = Exponent::finite(p);
            assert_eq!(e.recip() + e.conjugate().recip(), 1.0);
        }
    }

    #[test]
    fn young_exponent_matches_definition() {
        let pair = ExponentPair::finite(4.0 / 3.0, 8.0).unwrap();
        let s = pair.young_exponent().unwrap();
        assert_abs_diff_eq!(1.0 / s, 1.0 + 1.0 / 8.0 - 3.0 / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s, 8.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn sobolev_check_strict_boundary_violated() {
        // (2, 2, n=3): 0 < 1/3
        let pair = ExponentPair::finite(2.0, 2.0).unwrap();
        assert_eq!(sobolev_exponent_check(&pair, 3).0, SobolevVerdict::Strict);

        // (4/3, 8, n=2): 3/4 - 1/8 = 5/8 > 1/2
        let pair = ExponentPair::finite(4.0 / 3.0, 8.0).unwrap();
        let (v, branch) = sobolev_exponent_check(&pair, 2);
        assert_eq!(v, SobolevVerdict::Violated);
        match branch {
            SobolevBranch::SupercriticalQ { critical } => {
                assert_abs_diff_eq!(critical, 4.0, epsilon = 1e-12)
            }
            other => panic!("expected supercritical branch, got {other:?}"),
        }

        // conformal sequence on n=2, k=1: p = n/k = 2, q = n/(k-1) = inf
        let pair = ExponentPair::new(Exponent::finite(2.0), Exponent::INFINITY).unwrap();
        assert_eq!(sobolev_exponent_check(&pair, 2).0, SobolevVerdict::Boundary);
    }

    #[test]
    fn interval_grid_weights_sum_to_measure() {
        let dom = ChartDomain::interval(0.0, 1.0).unwrap();
        let grid = build_grid(&dom, &[8], None).unwrap();
        assert_eq!(grid.node_count(), 8);
        assert_abs_diff_eq!(grid.total_weight(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn torus_grid_covers_measure_without_duplicate_endpoint() {
        let dom = ChartDomain::torus(&[2.0 * std::f64::consts::PI; 2]).unwrap();
        let grid = build_grid(&dom, &[32, 32], None).unwrap();
        assert_eq!(grid.node_count(), 1024);
        assert_abs_diff_eq!(
            grid.total_weight(),
            4.0 * std::f64::consts::PI * std::f64::consts::PI,
            epsilon = 1e-10
        );
        // periodic axis: the endpoint node length L is absent
        let ax = &grid.axes[0];
        assert!(ax.nodes.iter().all(|&x| x < 2.0 * std::f64::consts::PI));
    }

    #[test]
    fn graded_ball_grid_is_monotone_and_rejects_flat_domains() {
        let dom = ChartDomain::ball(2).unwrap();
        let grid = build_grid(&dom, &[64, 64], Some(2.0)).unwrap();
        let r = &grid.axes[0].nodes;
        assert!(r.windows(2).all(|w| w[0] < w[1]));
        // panel boundaries follow the (i/m)^2 pattern: nodes of panel i sit
        // inside [ (i/m)^2, ((i+1)/m)^2 ]
        let panels = 64 / 8;
        for (j, &node) in r.iter().enumerate() {
            let panel = j / 8;
            let lo = (panel as f64 / panels as f64).powi(2);
            let hi = ((panel + 1) as f64 / panels as f64).powi(2);
            assert!(node > lo && node < hi);
        }
        assert_abs_diff_eq!(grid.total_weight(), std::f64::consts::PI, epsilon = 1e-12);

        let flat = ChartDomain::torus(&[1.0, 1.0]).unwrap();
        assert!(build_grid(&flat, &[8, 8], Some(2.0)).is_err());
    }

    #[test]
    fn volume_of_flat_and_horocyclic_charts() {
        let dom = ChartDomain::interval(0.0, 1.0).unwrap();
        let grid = build_grid(&dom, &[16], None).unwrap();
        assert_abs_diff_eq!(volume(&DiagonalMetric::euclidean(1), &grid), 1.0, epsilon = 1e-12);

        let torus = ChartDomain::torus(&[2.0 * std::f64::consts::PI; 2]).unwrap();
        let tg = build_grid(&torus, &[32, 32], None).unwrap();
        assert_abs_diff_eq!(
            volume(&DiagonalMetric::euclidean(2), &tg),
            39.47841760435743,
            epsilon = 1e-10
        );

        // [-1,1] x [0,1] horocyclic rectangle: integral of e^z = 2(e - 1)
        let hp = ChartDomain::halfplane(1.0, -1e-9, 1.0).unwrap();
        let hg = build_grid(&hp, &[24, 24], None).unwrap();
        assert_abs_diff_eq!(
            volume(&DiagonalMetric::horocyclic(), &hg),
            2.0 * (std::f64::consts::E - 1.0),
            epsilon = 1e-6
        );
    }

    #[test]
    fn conformal_rescale_scales_volume_density() {
        let dom = ChartDomain::torus(&[1.0, 1.0]).unwrap();
        let grid = build_grid(&dom, &[8, 8], None).unwrap();
        let flat = DiagonalMetric::euclidean(2);

        let same = flat
            .conformal_rescale(Arc::new(|_: &[f64]| 1.0), &grid)
            .unwrap();
        assert_abs_diff_eq!(same.volume_density(&[0.3, 0.4]), 1.0, epsilon = 1e-15);

        let doubled = flat
            .conformal_rescale(Arc::new(|_: &[f64]| 2.0), &grid)
            .unwrap();
        assert_abs_diff_eq!(doubled.volume_density(&[0.3, 0.4]), 4.0, epsilon = 1e-15);

        // rho = e^{-z} flattens the horocyclic y-direction
        let horo = DiagonalMetric::horocyclic();
        let hp = ChartDomain::halfplane(1.0, -1.0, 1.0).unwrap();
        let hg = build_grid(&hp, &[8, 8], None).unwrap();
        let flattened = horo
            .conformal_rescale(Arc::new(|x: &[f64]| (-x[1]).exp()), &hg)
            .unwrap();
        assert_abs_diff_eq!(flattened.coeff(0, &[0.2, 0.7]), 1.0, epsilon = 1e-13);

        assert!(flat
            .conformal_rescale(Arc::new(|x: &[f64]| x[0] - 0.5), &grid)
            .is_err());
    }
}
