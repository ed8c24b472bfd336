//! Differential k-forms on model charts: evaluation, exterior derivative,
//! wedge, Hodge star, codifferential, L^p norms and pairings.
//!
//! Forms carry one of two representations. Analytic forms hold coefficient
//! closures (optionally with an attached exact differential) and evaluate
//! anywhere; sampled forms hold per-channel arrays over a grid and evaluate
//! by multilinear or cubic interpolation. Coefficients are indexed by
//! strictly increasing multi-indices in lexicographic order.

use std::sync::Arc;

use ndarray::{ArrayD, Axis as NdAxis, IxDyn};

use crate::geometry::{Axis, ChartDomain, DiagonalMetric, Exponent, Grid, ScalarField};
use crate::{LqpError, Result};

/// Step for pointwise finite differences of analytic coefficients.
const FD_STEP: f64 = 1e-3;

// ---------------------------------------------------------------------------
// Multi-index utilities
// ---------------------------------------------------------------------------

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc = 1usize;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// All strictly increasing multi-indices of length k in {0, .., n-1},
/// lexicographic.
pub fn multi_indices(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(binomial(n, k));
    let mut cur = Vec::with_capacity(k);
    fn rec(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(n, k, i + 1, cur, out);
            cur.pop();
        }
    }
    rec(n, k, 0, &mut cur, &mut out);
    out
}

/// Position of a multi-index in the lexicographic enumeration.
pub fn index_rank(n: usize, idx: &[usize]) -> usize {
    multi_indices(n, idx.len())
        .iter()
        .position(|i| i == idx)
        .expect("multi-index out of range")
}

/// Merge two strictly increasing disjoint index sets, returning the merged
/// set and the permutation sign; None when they overlap.
pub fn merge_sign(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, f64)> {
    let mut merged = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    let mut inversions = 0usize;
    while i < a.len() || j < b.len() {
        if j == b.len() || (i < a.len() && a[i] < b[j]) {
            merged.push(a[i]);
            i += 1;
        } else if i == a.len() || b[j] < a[i] {
            // moving b[j] past the remaining elements of a
            inversions += a.len() - i;
            merged.push(b[j]);
            j += 1;
        } else {
            return None;
        }
    }
    Some((merged, if inversions % 2 == 0 { 1.0 } else { -1.0 }))
}

// ---------------------------------------------------------------------------
// Representation
// ---------------------------------------------------------------------------

/// Interpolation order of sampled forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpOrder {
    Linear,
    Cubic,
}

#[derive(Clone)]
pub enum FormData {
    Analytic {
        coeffs: Vec<ScalarField>,
        exact_diff: Option<Arc<DifferentialForm>>,
    },
    Sampled {
        grid: Arc<Grid>,
        data: Vec<ArrayD<f64>>,
        order: InterpOrder,
    },
}

/// A differential form of fixed degree on a chart domain.
#[derive(Clone)]
pub struct DifferentialForm {
    pub degree: usize,
    pub domain: ChartDomain,
    pub data: FormData,
}

impl std::fmt::Debug for DifferentialForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let repr = match &self.data {
            FormData::Analytic { .. } => "analytic",
            FormData::Sampled { .. } => "sampled",
        };
        write!(f, "DifferentialForm(degree {}, {}, {repr})", self.degree, self.domain.dim)
    }
}

impl DifferentialForm {
    pub fn channel_count(&self) -> usize {
        binomial(self.domain.dim, self.degree)
    }

    pub fn analytic(domain: ChartDomain, degree: usize, coeffs: Vec<ScalarField>) -> Result<Self> {
        let expected = binomial(domain.dim, degree);
        if coeffs.len() != expected {
            return Err(LqpError::DegreeMismatch(format!(
                "degree {degree} form on dim {} needs {expected} channels, got {}",
                domain.dim,
                coeffs.len()
            )));
        }
        Ok(DifferentialForm {
            degree,
            domain,
            data: FormData::Analytic { coeffs, exact_diff: None },
        })
    }

    /// Attach the exact differential (degree k+1) to an analytic form.
    pub fn with_exact_differential(mut self, diff: DifferentialForm) -> Result<Self> {
        if diff.degree != self.degree + 1 {
            return Err(LqpError::DegreeMismatch(format!(
                "attached differential must have degree {}, got {}",
                self.degree + 1,
                diff.degree
            )));
        }
        match &mut self.data {
            FormData::Analytic { exact_diff, .. } => {
                *exact_diff = Some(Arc::new(diff));
                Ok(self)
            }
            _ => Err(LqpError::Unsupported(
                "exact differentials attach to analytic forms".into(),
            )),
        }
    }

    pub fn has_exact_differential(&self) -> bool {
        matches!(&self.data, FormData::Analytic { exact_diff: Some(_), .. })
    }

    /// Constant-coefficient form.
    pub fn constant(domain: ChartDomain, degree: usize, values: &[f64]) -> Result<Self> {
        let coeffs = values
            .iter()
            .map(|&v| Arc::new(move |_: &[f64]| v) as ScalarField)
            .collect();
        let dim = domain.dim;
        let form = Self::analytic(domain.clone(), degree, coeffs)?;
        if degree < dim {
            let zero = Self::zero(domain, degree + 1)?;
            form.with_exact_differential(zero)
        } else {
            Ok(form)
        }
    }

    pub fn zero(domain: ChartDomain, degree: usize) -> Result<Self> {
        let channels = binomial(domain.dim, degree);
        Self::analytic(
            domain,
            degree,
            (0..channels)
                .map(|_| Arc::new(|_: &[f64]| 0.0) as ScalarField)
                .collect(),
        )
    }

    /// Sample a form onto a grid.
    pub fn sample(&self, grid: Arc<Grid>, order: InterpOrder) -> Result<Self> {
        if grid.domain != self.domain {
            return Err(LqpError::DomainMismatch("sampling grid domain differs".into()));
        }
        let shape = IxDyn(&grid.shape());
        let mut data = Vec::with_capacity(self.channel_count());
        for c in 0..self.channel_count() {
            let mut arr = ArrayD::zeros(shape.clone());
            for flat in 0..grid.node_count() {
                let idx = grid.multi_index(flat);
                let x = grid.chart_point(&idx);
                arr[IxDyn(&idx)] = self.eval_channel(c, &x);
            }
            data.push(arr);
        }
        Ok(DifferentialForm {
            degree: self.degree,
            domain: self.domain.clone(),
            data: FormData::Sampled { grid, data, order },
        })
    }

    pub fn from_samples(
        domain: ChartDomain,
        degree: usize,
        grid: Arc<Grid>,
        data: Vec<ArrayD<f64>>,
        order: InterpOrder,
    ) -> Result<Self> {
        if data.len() != binomial(domain.dim, degree) {
            return Err(LqpError::DegreeMismatch("channel count mismatch".into()));
        }
        for arr in &data {
            if arr.shape() != grid.shape().as_slice() {
                return Err(LqpError::DomainMismatch("sample shape does not match grid".into()));
            }
        }
        Ok(DifferentialForm {
            degree,
            domain,
            data: FormData::Sampled { grid, data, order },
        })
    }

    /// Coefficient channel c at chart point x.
    pub fn eval_channel(&self, c: usize, x: &[f64]) -> f64 {
        match &self.data {
            FormData::Analytic { coeffs, .. } => (coeffs[c])(x),
            FormData::Sampled { grid, data, order } => {
                interpolate(grid, &data[c], *order, &self.domain.chart_to_axis(x))
            }
        }
    }

    /// All coefficients at chart point x.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        (0..self.channel_count()).map(|c| self.eval_channel(c, x)).collect()
    }

    /// a*self + b*other.
    pub fn linear_combination(&self, a: f64, other: &DifferentialForm, b: f64) -> Result<DifferentialForm> {
        if self.degree != other.degree || self.domain != other.domain {
            return Err(LqpError::DegreeMismatch("linear combination of unlike forms".into()));
        }
        if let (
            FormData::Sampled { grid: g1, data: d1, order },
            FormData::Sampled { grid: g2, data: d2, .. },
        ) = (&self.data, &other.data)
        {
            if Arc::ptr_eq(g1, g2) || g1.shape() == g2.shape() {
                let data = d1
                    .iter()
                    .zip(d2)
                    .map(|(x, y)| a * x + b * y)
                    .collect();
                return DifferentialForm::from_samples(
                    self.domain.clone(),
                    self.degree,
                    g1.clone(),
                    data,
                    *order,
                );
            }
        }
        let lhs = Arc::new(self.clone());
        let rhs = Arc::new(other.clone());
        let coeffs: Vec<ScalarField> = (0..self.channel_count())
            .map(|c| {
                let lhs = lhs.clone();
                let rhs = rhs.clone();
                Arc::new(move |x: &[f64]| a * lhs.eval_channel(c, x) + b * rhs.eval_channel(c, x))
                    as ScalarField
            })
            .collect();
        let mut out = DifferentialForm::analytic(self.domain.clone(), self.degree, coeffs)?;
        // exact differentials combine linearly when both operands carry one
        if let (
            FormData::Analytic { exact_diff: Some(da), .. },
            FormData::Analytic { exact_diff: Some(db), .. },
        ) = (&self.data, &other.data)
        {
            let d = da.linear_combination(a, db, b)?;
            out = out.with_exact_differential(d)?;
        }
        Ok(out)
    }

    pub fn scale(&self, a: f64) -> DifferentialForm {
        let zero = DifferentialForm::zero(self.domain.clone(), self.degree).unwrap();
        self.linear_combination(a, &zero, 0.0).unwrap()
    }
}

// ---------------------------------------------------------------------------
// Interpolation
// ---------------------------------------------------------------------------

struct AxisStencil {
    idx: Vec<usize>,
    w: Vec<f64>,
}

fn axis_stencil(axis: &Axis, t: f64, order: InterpOrder) -> AxisStencil {
    let n = axis.len();
    if axis.periodic {
        let period = axis.period.expect("periodic axis must carry its period");
        let h = axis.spacing.expect("periodic axes are uniform");
        let mut s = (t - axis.nodes[0]) / period;
        s -= s.floor();
        let pos = s * n as f64;
        let i0 = (pos.floor() as usize).min(n - 1);
        let u = pos - i0 as f64;
        let _ = h;
        match order {
            InterpOrder::Linear => AxisStencil {
                idx: vec![i0 % n, (i0 + 1) % n],
                w: vec![1.0 - u, u],
            },
            InterpOrder::Cubic => {
                let im = (i0 + n - 1) % n;
                AxisStencil {
                    idx: vec![im, i0 % n, (i0 + 1) % n, (i0 + 2) % n],
                    w: vec![
                        -u * (u - 1.0) * (u - 2.0) / 6.0,
                        (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0,
                        -(u + 1.0) * u * (u - 2.0) / 2.0,
                        (u + 1.0) * u * (u - 1.0) / 6.0,
                    ],
                }
            }
        }
    } else {
        // cell search on possibly non-uniform nodes, clamped at the ends
        let mut j = match axis.nodes.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(j) => j,
            Err(j) => j.saturating_sub(1),
        };
        j = j.min(n - 2);
        match order {
            InterpOrder::Linear => {
                let (x0, x1) = (axis.nodes[j], axis.nodes[j + 1]);
                let u = (t - x0) / (x1 - x0);
                AxisStencil {
                    idx: vec![j, j + 1],
                    w: vec![1.0 - u, u],
                }
            }
            InterpOrder::Cubic => {
                let s = j.saturating_sub(1).min(n.saturating_sub(4));
                let xs: Vec<f64> = (s..s + 4).map(|i| axis.nodes[i]).collect();
                let mut w = vec![0.0; 4];
                for (a, wa) in w.iter_mut().enumerate() {
                    let mut prod = 1.0;
                    for b in 0..4 {
                        if a != b {
                            prod *= (t - xs[b]) / (xs[a] - xs[b]);
                        }
                    }
                    *wa = prod;
                }
                AxisStencil {
                    idx: (s..s + 4).collect(),
                    w,
                }
            }
        }
    }
}

fn interpolate(grid: &Grid, data: &ArrayD<f64>, order: InterpOrder, axis_coords: &[f64]) -> f64 {
    let stencils: Vec<AxisStencil> = grid
        .axes
        .iter()
        .zip(axis_coords)
        .map(|(ax, &t)| axis_stencil(ax, t, order))
        .collect();
    let mut acc = 0.0;
    let mut counter = vec![0usize; stencils.len()];
    loop {
        let mut w = 1.0;
        let mut idx = Vec::with_capacity(stencils.len());
        for (ax, &c) in stencils.iter().zip(&counter) {
            w *= ax.w[c];
            idx.push(ax.idx[c]);
        }
        acc += w * data[IxDyn(&idx)];
        // odometer over the stencil product
        let mut ax = stencils.len();
        loop {
            if ax == 0 {
                return acc;
            }
            ax -= 1;
            counter[ax] += 1;
            if counter[ax] < stencils[ax].idx.len() {
                break;
            }
            counter[ax] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// Grid finite differences
// ---------------------------------------------------------------------------

fn lane_derivative(src: &[f64], dst: &mut [f64], h: f64, periodic: bool) {
    let n = src.len();
    let c = 1.0 / (12.0 * h);
    if periodic {
        for i in 0..n {
            let m2 = src[(i + n - 2) % n];
            let m1 = src[(i + n - 1) % n];
            let p1 = src[(i + 1) % n];
            let p2 = src[(i + 2) % n];
            dst[i] = c * (m2 - 8.0 * m1 + 8.0 * p1 - p2);
        }
    } else {
        dst[0] = c * (-25.0 * src[0] + 48.0 * src[1] - 36.0 * src[2] + 16.0 * src[3] - 3.0 * src[4]);
        dst[1] = c * (-3.0 * src[0] - 10.0 * src[1] + 18.0 * src[2] - 6.0 * src[3] + src[4]);
        for i in 2..n - 2 {
            dst[i] = c * (src[i - 2] - 8.0 * src[i - 1] + 8.0 * src[i + 1] - src[i + 2]);
        }
        dst[n - 2] =
            -c * (-3.0 * src[n - 1] - 10.0 * src[n - 2] + 18.0 * src[n - 3] - 6.0 * src[n - 4] + src[n - 5]);
        dst[n - 1] = -c
            * (-25.0 * src[n - 1] + 48.0 * src[n - 2] - 36.0 * src[n - 3] + 16.0 * src[n - 4]
                - 3.0 * src[n - 5]);
    }
}

/// Fourth-order partial derivative of a sampled channel along one grid axis.
fn axis_derivative(data: &ArrayD<f64>, axis: usize, ax: &Axis) -> Result<ArrayD<f64>> {
    let h = ax.spacing.ok_or_else(|| {
        LqpError::Unsupported("grid derivatives require equispaced axes".into())
    })?;
    if ax.len() < 5 {
        return Err(LqpError::InvalidArgument(
            "order-4 stencils need at least 5 nodes per axis".into(),
        ));
    }
    let mut out = ArrayD::zeros(data.raw_dim());
    for (src, mut dst) in data
        .lanes(NdAxis(axis))
        .into_iter()
        .zip(out.lanes_mut(NdAxis(axis)))
    {
        let s: Vec<f64> = src.iter().copied().collect();
        let mut d = vec![0.0; s.len()];
        lane_derivative(&s, &mut d, h, ax.periodic);
        for (o, v) in dst.iter_mut().zip(d) {
            *o = v;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Exterior derivative
// ---------------------------------------------------------------------------

/// Pointwise order-4 finite difference of one analytic coefficient.
fn partial_fd(f: &ScalarField, x: &[f64], dir: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let eval = |xi: f64, xp: &mut Vec<f64>, f: &ScalarField| {
        xp[dir] = xi;
        f(xp)
    };
    let x0 = x[dir];
    (eval(x0 - 2.0 * h, &mut xp, f) - 8.0 * eval(x0 - h, &mut xp, f) + 8.0 * eval(x0 + h, &mut xp, f)
        - eval(x0 + 2.0 * h, &mut xp, f))
        / (12.0 * h)
}

/// Exterior derivative. Analytic forms return the attached differential when
/// present and otherwise differentiate coefficients by pointwise order-4
/// differences; sampled forms use grid stencils (one-sided at non-periodic
/// boundaries).
pub fn exterior_derivative(form: &DifferentialForm) -> Result<DifferentialForm> {
    let n = form.domain.dim;
    let k = form.degree;
    if k >= n {
        return Err(LqpError::DegreeMismatch(format!(
            "cannot differentiate a top-degree form (k = n = {n})"
        )));
    }
    match &form.data {
        FormData::Analytic { coeffs, exact_diff } => {
            if let Some(d) = exact_diff {
                return Ok((**d).clone());
            }
            let out_indices = multi_indices(n, k + 1);
            let in_indices = multi_indices(n, k);
            let coeffs = coeffs.clone();
            let mut out: Vec<ScalarField> = Vec::with_capacity(out_indices.len());
            for index in &out_indices {
                // (d w)_I = sum over positions m of (-1)^m d_{I_m} w_{I minus I_m}
                let mut terms: Vec<(usize, f64, usize)> = Vec::new();
                for (m, &dir) in index.iter().enumerate() {
                    let mut rest = index.clone();
                    rest.remove(m);
                    let c = in_indices.iter().position(|i| *i == rest).unwrap();
                    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                    terms.push((dir, sign, c));
                }
                let coeffs = coeffs.clone();
                out.push(Arc::new(move |x: &[f64]| {
                    terms
                        .iter()
                        .map(|&(dir, sign, c)| sign * partial_fd(&coeffs[c], x, dir, FD_STEP))
                        .sum()
                }) as ScalarField);
            }
            DifferentialForm::analytic(form.domain.clone(), k + 1, out)
        }
        FormData::Sampled { grid, data, order } => {
            if !grid.is_uniform() {
                return Err(LqpError::Unsupported(
                    "grid exterior derivative needs a uniform grid (circle, torus, uniform box)"
                        .into(),
                ));
            }
            let out_indices = multi_indices(n, k + 1);
            let in_indices = multi_indices(n, k);
            let mut derivs: Vec<Vec<Option<ArrayD<f64>>>> = vec![vec![None; n]; data.len()];
            let mut out_data = Vec::with_capacity(out_indices.len());
            for index in &out_indices {
                let mut acc = ArrayD::zeros(data[0].raw_dim());
                for (m, &dir) in index.iter().enumerate() {
                    let mut rest = index.clone();
                    rest.remove(m);
                    let c = in_indices.iter().position(|i| *i == rest).unwrap();
                    if derivs[c][dir].is_none() {
                        derivs[c][dir] = Some(axis_derivative(&data[c], dir, &grid.axes[dir])?);
                    }
                    let d = derivs[c][dir].as_ref().unwrap();
                    if m % 2 == 0 {
                        acc = acc + d;
                    } else {
                        acc = acc - d;
                    }
                }
                out_data.push(acc);
            }
            DifferentialForm::from_samples(form.domain.clone(), k + 1, grid.clone(), out_data, *order)
        }
    }
}

/// Coefficients of d(form) at a single point, always via pointwise finite
/// differences of the evaluated coefficients. Independent of any attached
/// differential, which makes it usable as the second route in identity
/// checks.
pub fn derivative_at_point(form: &DifferentialForm, x: &[f64], step: f64) -> Vec<f64> {
    let n = form.domain.dim;
    let k = form.degree;
    let out_indices = multi_indices(n, k + 1);
    let in_indices = multi_indices(n, k);
    let mut out = Vec::with_capacity(out_indices.len());
    for index in &out_indices {
        let mut acc = 0.0;
        for (m, &dir) in index.iter().enumerate() {
            let mut rest = index.clone();
            rest.remove(m);
            let c = in_indices.iter().position(|i| *i == rest).unwrap();
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            let mut xp = x.to_vec();
            let x0 = x[dir];
            let mut eval = |xi: f64| {
                xp[dir] = xi;
                form.eval_channel(c, &xp)
            };
            let d = (eval(x0 - 2.0 * step) - 8.0 * eval(x0 - step) + 8.0 * eval(x0 + step)
                - eval(x0 + 2.0 * step))
                / (12.0 * step);
            acc += sign * d;
        }
        out.push(acc);
    }
    out
}

// ---------------------------------------------------------------------------
// Wedge, star, codifferential
// ---------------------------------------------------------------------------

/// Wedge product. Bilinear, associative, alpha ^ beta = (-1)^{kl} beta ^ alpha.
pub fn wedge(alpha: &DifferentialForm, beta: &DifferentialForm) -> Result<DifferentialForm> {
    if alpha.domain != beta.domain {
        return Err(LqpError::DomainMismatch("wedge of forms on different domains".into()));
    }
    let n = alpha.domain.dim;
    let (k, l) = (alpha.degree, beta.degree);
    if k + l > n {
        return Err(LqpError::DegreeMismatch(format!(
            "wedge degree overflow: {k} + {l} > {n}"
        )));
    }
    let a_idx = multi_indices(n, k);
    let b_idx = multi_indices(n, l);
    let out_idx = multi_indices(n, k + l);
    // splits[c] lists (a-channel, b-channel, sign) contributing to output c
    let mut splits: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); out_idx.len()];
    for (ia, a) in a_idx.iter().enumerate() {
        for (ib, b) in b_idx.iter().enumerate() {
            if let Some((merged, sign)) = merge_sign(a, b) {
                let c = out_idx.iter().position(|i| *i == merged).unwrap();
                splits[c].push((ia, ib, sign));
            }
        }
    }

    if let (
        FormData::Sampled { grid: g1, data: d1, order },
        FormData::Sampled { grid: g2, data: d2, .. },
    ) = (&alpha.data, &beta.data)
    {
        if g1.shape() == g2.shape() && g1.domain == g2.domain {
            let mut out = Vec::with_capacity(out_idx.len());
            for terms in &splits {
                let mut acc = ArrayD::zeros(d1[0].raw_dim());
                for &(ia, ib, s) in terms {
                    acc = acc + &(s * &d1[ia] * &d2[ib]);
                }
                out.push(acc);
            }
            return DifferentialForm::from_samples(
                alpha.domain.clone(),
                k + l,
                g1.clone(),
                out,
                *order,
            );
        }
    }

    let lhs = Arc::new(alpha.clone());
    let rhs = Arc::new(beta.clone());
    let coeffs: Vec<ScalarField> = splits
        .into_iter()
        .map(|terms| {
            let lhs = lhs.clone();
            let rhs = rhs.clone();
            Arc::new(move |x: &[f64]| {
                terms
                    .iter()
                    .map(|&(ia, ib, s)| s * lhs.eval_channel(ia, x) * rhs.eval_channel(ib, x))
                    .sum()
            }) as ScalarField
        })
        .collect();
    DifferentialForm::analytic(alpha.domain.clone(), k + l, coeffs)
}

/// Hodge star for a diagonal metric, defined through the contract
/// alpha ^ (*beta) = <alpha, beta>_g dvol. The sign of each channel is the
/// Levi-Civita sign of the concatenation (I, I^c).
pub fn hodge_star(form: &DifferentialForm, metric: &DiagonalMetric) -> Result<DifferentialForm> {
    let n = form.domain.dim;
    if metric.dim() != n {
        return Err(LqpError::DomainMismatch("metric dimension mismatch".into()));
    }
    let k = form.degree;
    let in_idx = multi_indices(n, k);
    let out_idx = multi_indices(n, n - k);
    // channel map: input channel c with index I contributes to channel of I^c
    let mut mapping = Vec::with_capacity(in_idx.len());
    for index in &in_idx {
        let complement: Vec<usize> = (0..n).filter(|i| !index.contains(i)).collect();
        let (_, sign) = merge_sign(index, &complement).expect("disjoint by construction");
        let out_c = out_idx.iter().position(|i| *i == complement).unwrap();
        mapping.push((out_c, sign, index.clone()));
    }

    match &form.data {
        FormData::Sampled { grid, data, order } => {
            let mut out: Vec<ArrayD<f64>> = vec![ArrayD::zeros(data[0].raw_dim()); out_idx.len()];
            for (c, (out_c, sign, index)) in mapping.iter().enumerate() {
                let mut arr = data[c].clone();
                for flat in 0..grid.node_count() {
                    let idx = grid.multi_index(flat);
                    let x = grid.chart_point(&idx);
                    let factor =
                        sign * metric.coframe_factor(index, &x) * metric.volume_density(&x);
                    arr[IxDyn(&idx)] *= factor;
                }
                out[*out_c] = arr;
            }
            DifferentialForm::from_samples(form.domain.clone(), n - k, grid.clone(), out, *order)
        }
        FormData::Analytic { .. } => {
            let src = Arc::new(form.clone());
            let metric = metric.clone();
            let mut out: Vec<Option<ScalarField>> = vec![None; out_idx.len()];
            for (c, (out_c, sign, index)) in mapping.into_iter().enumerate() {
                let src = src.clone();
                let metric = metric.clone();
                let sign = sign;
                out[out_c] = Some(Arc::new(move |x: &[f64]| {
                    sign * metric.coframe_factor(&index, x)
                        * metric.volume_density(x)
                        * src.eval_channel(c, x)
                }) as ScalarField);
            }
            DifferentialForm::analytic(
                form.domain.clone(),
                n - k,
                out.into_iter().map(|c| c.unwrap()).collect(),
            )
        }
    }
}

/// Codifferential delta = (-1)^{nk+n+1} * d * using the module's star and
/// derivative. Rejects 0-forms.
pub fn codifferential(form: &DifferentialForm, metric: &DiagonalMetric) -> Result<DifferentialForm> {
    let n = form.domain.dim;
    let k = form.degree;
    if k == 0 {
        return Err(LqpError::DegreeMismatch("codifferential of a 0-form".into()));
    }
    let starred = hodge_star(form, metric)?;
    let d_starred = exterior_derivative(&starred)?;
    let back = hodge_star(&d_starred, metric)?;
    let sign = if (n * k + n + 1) % 2 == 0 { 1.0 } else { -1.0 };
    Ok(back.scale(sign))
}

// ---------------------------------------------------------------------------
// Norms and pairings
// ---------------------------------------------------------------------------

/// Pointwise metric norm |w|_g at a chart point.
pub fn pointwise_norm(form: &DifferentialForm, metric: &DiagonalMetric, x: &[f64]) -> f64 {
    let indices = multi_indices(form.domain.dim, form.degree);
    let mut acc = 0.0;
    for (c, index) in indices.iter().enumerate() {
        let v = form.eval_channel(c, x);
        acc += metric.coframe_factor(index, x) * v * v;
    }
    acc.sqrt()
}

/// An L^p norm measurement: quadrature value plus any analytic tail bound
/// added for truncated domains.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FormNormReport {
    pub p: f64,
    pub value: f64,
    pub tail_correction: f64,
    pub resolution: Vec<usize>,
}

/// L^p norm of a form by grid quadrature; p = infinity takes the nodewise
/// essential sup.
pub fn lp_norm(
    form: &DifferentialForm,
    metric: &DiagonalMetric,
    grid: &Grid,
    p: Exponent,
) -> FormNormReport {
    let value = if p.is_finite() {
        let pv = p.value();
        grid.iter_nodes()
            .map(|(x, w)| w * metric.volume_density(&x) * pointwise_norm(form, metric, &x).powf(pv))
            .sum::<f64>()
            .powf(1.0 / pv)
    } else {
        grid.iter_nodes()
            .map(|(x, _)| pointwise_norm(form, metric, &x))
            .fold(0.0, f64::max)
    };
    FormNormReport {
        p: p.value(),
        value,
        tail_correction: 0.0,
        resolution: grid.shape(),
    }
}

impl FormNormReport {
    /// Add an analytic tail mass (the integral of |w|^p beyond the
    /// truncation) to the measured norm.
    pub fn with_tail_mass(mut self, tail_mass: f64) -> Self {
        if self.p.is_finite() && tail_mass > 0.0 {
            let old = self.value;
            self.value = (old.powf(self.p) + tail_mass).powf(1.0 / self.p);
            self.tail_correction = self.value - old;
        }
        self
    }
}

/// Integral of alpha ^ gamma over the chart in coordinate orientation.
/// Degrees must be complementary; no metric enters.
pub fn pairing_integral(
    alpha: &DifferentialForm,
    gamma: &DifferentialForm,
    grid: &Grid,
) -> Result<f64> {
    let n = alpha.domain.dim;
    if alpha.degree + gamma.degree != n {
        return Err(LqpError::DegreeMismatch(format!(
            "pairing needs complementary degrees, got {} + {} != {n}",
            alpha.degree, gamma.degree
        )));
    }
    let top = wedge(alpha, gamma)?;
    Ok(grid.iter_nodes().map(|(x, w)| w * top.eval_channel(0, &x)).sum())
}

// ---------------------------------------------------------------------------
// Pullback
// ---------------------------------------------------------------------------

/// A differentiable self-map of a chart with its Jacobian.
#[derive(Clone)]
pub struct ChartMap {
    pub map: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    pub jacobian: Arc<dyn Fn(&[f64]) -> nalgebra::DMatrix<f64> + Send + Sync>,
}

impl ChartMap {
    pub fn identity(dim: usize) -> Self {
        ChartMap {
            map: Arc::new(|x: &[f64]| x.to_vec()),
            jacobian: Arc::new(move |_: &[f64]| nalgebra::DMatrix::identity(dim, dim)),
        }
    }

    pub fn translation(v: Vec<f64>) -> Self {
        let dim = v.len();
        ChartMap {
            map: Arc::new(move |x: &[f64]| x.iter().zip(&v).map(|(a, b)| a + b).collect()),
            jacobian: Arc::new(move |_: &[f64]| nalgebra::DMatrix::identity(dim, dim)),
        }
    }
}

fn minor_det(m: &nalgebra::DMatrix<f64>, rows: &[usize], cols: &[usize]) -> f64 {
    match rows.len() {
        0 => 1.0,
        1 => m[(rows[0], cols[0])],
        2 => {
            m[(rows[0], cols[0])] * m[(rows[1], cols[1])]
                - m[(rows[0], cols[1])] * m[(rows[1], cols[0])]
        }
        3 => {
            let a = |i: usize, j: usize| m[(rows[i], cols[j])];
            a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1))
                - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))
                + a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0))
        }
        _ => {
            let sub = nalgebra::DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
                m[(rows[i], cols[j])]
            });
            sub.determinant()
        }
    }
}

/// Pullback F^* of a form along a chart map: (F^*w)(x; v...) = w(F(x); DF v...).
/// The Jacobian is checked for singularity at the probe points. An attached
/// exact differential pulls back with the form.
pub fn pullback(
    form: &DifferentialForm,
    map: &ChartMap,
    probes: &[Vec<f64>],
) -> Result<DifferentialForm> {
    let n = form.domain.dim;
    for x in probes {
        let j = (map.jacobian)(x);
        if j.determinant().abs() < 1e-14 {
            return Err(LqpError::SingularJacobian(x.clone()));
        }
    }
    let k = form.degree;
    let in_idx = multi_indices(n, k);
    let out_idx = multi_indices(n, k);
    let src = Arc::new(form.clone());
    let coeffs: Vec<ScalarField> = out_idx
        .iter()
        .map(|cols| {
            let src = src.clone();
            let map = map.clone();
            let cols = cols.clone();
            let in_idx = in_idx.clone();
            Arc::new(move |x: &[f64]| {
                let y = (map.map)(x);
                let jac = (map.jacobian)(x);
                in_idx
                    .iter()
                    .enumerate()
                    .map(|(c, rows)| src.eval_channel(c, &y) * minor_det(&jac, rows, &cols))
                    .sum()
            }) as ScalarField
        })
        .collect();
    let mut out = DifferentialForm::analytic(form.domain.clone(), k, coeffs)?;
    if let FormData::Analytic { exact_diff: Some(d), .. } = &form.data {
        let pulled = pullback(d, map, &[])?;
        out = out.with_exact_differential(pulled)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Serialization of sampled forms
// ---------------------------------------------------------------------------

fn domain_tokens(domain: &ChartDomain) -> String {
    use crate::geometry::DomainKind::*;
    match &domain.kind {
        Interval { a, b } => format!("interval {a:.17e} {b:.17e}"),
        Circle { length } => format!("circle {length:.17e}"),
        Torus { lengths } => {
            let body: Vec<String> = lengths.iter().map(|l| format!("{l:.17e}")).collect();
            format!("torus {} {}", lengths.len(), body.join(" "))
        }
        Ball { dim } => format!("ball {dim}"),
        HalfplaneHorocyclic { y_bound, z_min, z_max } => {
            format!("halfplane {y_bound:.17e} {z_min:.17e} {z_max:.17e}")
        }
    }
}

fn parse_domain(tokens: &[&str]) -> Result<ChartDomain> {
    let bad = |m: &str| LqpError::Parse(m.to_string());
    let f = |s: &str| s.parse::<f64>().map_err(|e| LqpError::Parse(e.to_string()));
    match tokens.first() {
        Some(&"interval") => ChartDomain::interval(f(tokens[1])?, f(tokens[2])?),
        Some(&"circle") => ChartDomain::circle(f(tokens[1])?),
        Some(&"torus") => {
            let n: usize = tokens[1].parse().map_err(|_| bad("bad torus dim"))?;
            let lengths: Result<Vec<f64>> = tokens[2..2 + n].iter().map(|s| f(s)).collect();
            ChartDomain::torus(&lengths?)
        }
        Some(&"ball") => ChartDomain::ball(tokens[1].parse().map_err(|_| bad("bad ball dim"))?),
        Some(&"halfplane") => ChartDomain::halfplane(f(tokens[1])?, f(tokens[2])?, f(tokens[3])?),
        _ => Err(bad("unknown domain kind")),
    }
}

/// Serialize a sampled form to the documented text layout: a header with the
/// domain, degree, interpolation order and per-axis nodes/weights, then one
/// row-major data line per channel (multi-indices lexicographic).
pub fn write_sampled_text(form: &DifferentialForm) -> Result<String> {
    let FormData::Sampled { grid, data, order } = &form.data else {
        return Err(LqpError::Unsupported("only sampled forms serialize".into()));
    };
    let mut out = String::new();
    out.push_str("lqpform 1\n");
    out.push_str(&format!("domain {}\n", domain_tokens(&form.domain)));
    out.push_str(&format!("degree {}\n", form.degree));
    out.push_str(&format!(
        "interpolation {}\n",
        match order {
            InterpOrder::Linear => 1,
            InterpOrder::Cubic => 3,
        }
    ));
    out.push_str(&format!(
        "shape {}\n",
        grid.shape()
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    ));
    for ax in &grid.axes {
        let nodes: Vec<String> = ax.nodes.iter().map(|v| format!("{v:.17e}")).collect();
        let weights: Vec<String> = ax.weights.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&format!(
            "axis {} {} {}\n",
            ax.len(),
            if ax.periodic { "periodic" } else { "open" },
            ax.period.map_or("-".to_string(), |p| format!("{p:.17e}"))
        ));
        out.push_str(&nodes.join(" "));
        out.push('\n');
        out.push_str(&weights.join(" "));
        out.push('\n');
    }
    out.push_str(&format!("channels {}\n", data.len()));
    for arr in data {
        let line: Vec<String> = arr.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// Parse the text layout written by `write_sampled_text`.
pub fn read_sampled_text(text: &str) -> Result<DifferentialForm> {
    let mut lines = text.lines();
    let mut next = || lines.next().ok_or_else(|| LqpError::Parse("truncated form file".into()));
    let header = next()?;
    if header.trim() != "lqpform 1" {
        return Err(LqpError::Parse(format!("unknown header {header:?}")));
    }
    let domain_line = next()?;
    let tokens: Vec<&str> = domain_line.split_whitespace().collect();
    if tokens.first() != Some(&"domain") {
        return Err(LqpError::Parse("missing domain line".into()));
    }
    let domain = parse_domain(&tokens[1..])?;
    let degree: usize = next()?
        .strip_prefix("degree ")
        .ok_or_else(|| LqpError::Parse("missing degree".into()))?
        .trim()
        .parse()
        .map_err(|_| LqpError::Parse("bad degree".into()))?;
    let order = match next()?
        .strip_prefix("interpolation ")
        .ok_or_else(|| LqpError::Parse("missing interpolation".into()))?
        .trim()
    {
        "1" => InterpOrder::Linear,
        "3" => InterpOrder::Cubic,
        other => return Err(LqpError::Parse(format!("bad interpolation {other}"))),
    };
    let shape: Vec<usize> = next()?
        .strip_prefix("shape ")
        .ok_or_else(|| LqpError::Parse("missing shape".into()))?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| LqpError::Parse("bad shape".into())))
        .collect::<Result<_>>()?;
    let parse_floats = |line: &str| -> Result<Vec<f64>> {
        line.split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| LqpError::Parse(e.to_string())))
            .collect()
    };
    let mut axes = Vec::with_capacity(shape.len());
    for _ in &shape {
        let head = next()?;
        let toks: Vec<&str> = head.split_whitespace().collect();
        if toks.first() != Some(&"axis") {
            return Err(LqpError::Parse("missing axis header".into()));
        }
        let periodic = toks[2] == "periodic";
        let period = if toks[3] == "-" {
            None
        } else {
            Some(toks[3].parse::<f64>().map_err(|e| LqpError::Parse(e.to_string()))?)
        };
        let nodes = parse_floats(next()?)?;
        let weights = parse_floats(next()?)?;
        let spacing = if nodes.len() >= 2 {
            let h = nodes[1] - nodes[0];
            if nodes.windows(2).all(|w| (w[1] - w[0] - h).abs() < 1e-12 * h.abs().max(1.0)) {
                Some(h)
            } else {
                None
            }
        } else {
            None
        };
        axes.push(Axis {
            nodes,
            weights,
            periodic,
            period,
            spacing,
        });
    }
    let channels: usize = next()?
        .strip_prefix("channels ")
        .ok_or_else(|| LqpError::Parse("missing channels".into()))?
        .trim()
        .parse()
        .map_err(|_| LqpError::Parse("bad channels".into()))?;
    let grid = Arc::new(Grid {
        domain: domain.clone(),
        axes,
        grading: None,
    });
    let mut data = Vec::with_capacity(channels);
    for _ in 0..channels {
        let values = parse_floats(next()?)?;
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| LqpError::Parse(e.to_string()))?;
        data.push(arr);
    }
    DifferentialForm::from_samples(domain, degree, grid, data, order)
}
