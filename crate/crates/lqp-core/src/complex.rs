//! Finite cochain complexes: matrices D_k with D^2 = 0 and weighted l^p
//! norms per level, cohomology dimensions, the (trivial) finite torsion
//! check, and best constants for solvability and the corrector inequality.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{ChartDomain, DiagonalMetric, DomainKind, Grid};
use crate::{LqpError, Result};

/// Relative tolerance for rank decisions.
const RANK_TOL: f64 = 1e-10;

/// Weighted l^p norm data for one level.
#[derive(Debug, Clone)]
pub struct LevelNorm {
    pub weights: DVector<f64>,
    pub exponent: f64,
}

impl LevelNorm {
    pub fn unit(dim: usize, exponent: f64) -> Self {
        LevelNorm {
            weights: DVector::from_element(dim, 1.0),
            exponent,
        }
    }

    pub fn norm(&self, x: &DVector<f64>) -> f64 {
        self.norm_with_exponent(x, self.exponent)
    }

    pub fn norm_with_exponent(&self, x: &DVector<f64>, p: f64) -> f64 {
        x.iter()
            .zip(self.weights.iter())
            .map(|(v, w)| w * v.abs().powf(p))
            .sum::<f64>()
            .powf(1.0 / p)
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.sum()
    }
}

/// A finite complex of weighted levels with differentials D_k: level k ->
/// level k+1 and D_{k+1} D_k = 0.
#[derive(Debug, Clone)]
pub struct FiniteCochainComplex {
    pub dims: Vec<usize>,
    /// d[k] maps level k to level k+1; d.len() = levels - 1.
    pub d: Vec<DMatrix<f64>>,
    pub norms: Vec<LevelNorm>,
}

impl FiniteCochainComplex {
    pub fn new(dims: Vec<usize>, d: Vec<DMatrix<f64>>, norms: Vec<LevelNorm>) -> Result<Self> {
        if d.len() + 1 != dims.len() || norms.len() != dims.len() {
            return Err(LqpError::InvalidArgument("level/matrix count mismatch".into()));
        }
        for (k, m) in d.iter().enumerate() {
            if m.nrows() != dims[k + 1] || m.ncols() != dims[k] {
                return Err(LqpError::InvalidArgument(format!(
                    "D_{k} must be {}x{}, got {}x{}",
                    dims[k + 1],
                    dims[k],
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        for (k, n) in norms.iter().enumerate() {
            if n.weights.len() != dims[k] {
                return Err(LqpError::InvalidArgument(format!("weight length at level {k}")));
            }
            if n.weights.iter().any(|&w| !(w > 0.0)) {
                return Err(LqpError::InvalidArgument("weights must be strictly positive".into()));
            }
        }
        let complex = FiniteCochainComplex { dims, d, norms };
        let defect = complex.composition_defect();
        if defect > 1e-12 {
            return Err(LqpError::InvalidArgument(format!(
                "D.D = 0 violated: |D_{{k+1}} D_k| = {defect}"
            )));
        }
        Ok(complex)
    }

    /// Largest |D_{k+1} D_k| entry relative to the operator scales.
    pub fn composition_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..self.d.len().saturating_sub(1) {
            let prod = &self.d[k + 1] * &self.d[k];
            let scale = self.d[k + 1].norm() * self.d[k].norm();
            let defect = prod.amax();
            worst = worst.max(if scale > 0.0 { defect / scale.max(1.0) } else { defect });
        }
        worst
    }

    pub fn levels(&self) -> usize {
        self.dims.len()
    }

    /// D_k as an option: None beyond the stored range acts as the zero map.
    fn diff(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.d.get(k)
    }

    /// Random complex with exact D^2 = 0: each D_k is a random matrix with
    /// the image of D_{k-1} projected out of its domain.
    pub fn random(rng: &mut ChaCha8Rng, dims: &[usize], exponent: f64) -> Self {
        let mut d = Vec::new();
        let mut prev: Option<DMatrix<f64>> = None;
        for k in 0..dims.len() - 1 {
            let raw = DMatrix::from_fn(dims[k + 1], dims[k], |_, _| rng.gen_range(-1.0..1.0));
            let mat = match &prev {
                None => raw,
                Some(dprev) => {
                    // projector onto Im(D_{k-1})
                    let basis = column_space_basis(dprev, RANK_TOL);
                    let mut proj = DMatrix::identity(dims[k], dims[k]);
                    if basis.ncols() > 0 {
                        proj -= &basis * basis.transpose();
                    }
                    raw * proj
                }
            };
            prev = Some(mat.clone());
            d.push(mat);
        }
        let norms = dims.iter().map(|&m| LevelNorm::unit(m, exponent)).collect();
        FiniteCochainComplex {
            dims: dims.to_vec(),
            d,
            norms,
        }
    }
}

// ---------------------------------------------------------------------------
// Linear algebra helpers
// ---------------------------------------------------------------------------

/// Singular values by direct SVD (descending), accurate to eps * sigma_max.
fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let svd = m.clone().svd(false, false);
    let mut vals: Vec<f64> = svd.singular_values.iter().cloned().collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    vals
}

/// Rank with the relative tolerance tol * sigma_max.
fn rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let vals = singular_values(m);
    let cutoff = tol * vals.first().copied().unwrap_or(0.0);
    vals.iter().filter(|&&s| s > cutoff).count()
}

/// Smallest singular value above the rank cutoff.
fn sigma_min_positive(m: &DMatrix<f64>, tol: f64) -> Option<f64> {
    let vals = singular_values(m);
    let cutoff = tol * vals.first().copied().unwrap_or(0.0);
    vals.into_iter().filter(|&s| s > cutoff).fold(None, |acc, s| {
        Some(acc.map_or(s, |a: f64| a.min(s)))
    })
}

/// Eigenpairs of a symmetric matrix sorted by descending eigenvalue.
fn sorted_symmetric_eigen(gram: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(eig.eigenvectors.nrows(), order.len());
    for (j, &i) in order.iter().enumerate() {
        vecs.set_column(j, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Orthonormal basis of the column space of M: the top rank(M) eigenvectors
/// of M M^T, with the rank decided by the SVD of M itself.
fn column_space_basis(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let r = rank(m, tol);
    let (_, vecs) = sorted_symmetric_eigen(m * m.transpose());
    vecs.columns(0, r).into_owned()
}

/// Orthonormal basis of the null space of M: the trailing eigenvectors of
/// M^T M beyond the SVD rank.
fn null_space_basis(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let r = rank(m, tol);
    let (_, vecs) = sorted_symmetric_eigen(m.transpose() * m);
    vecs.columns(r, m.ncols() - r).into_owned()
}

// ---------------------------------------------------------------------------
// Cohomology and torsion
// ---------------------------------------------------------------------------

/// dim ker D_k - rank D_{k-1}.
pub fn cohomology_dimension(complex: &FiniteCochainComplex, k: usize) -> usize {
    let dim_k = complex.dims[k];
    let ker = match complex.diff(k) {
        Some(d) => dim_k - rank(d, RANK_TOL),
        None => dim_k,
    };
    let im = if k == 0 {
        0
    } else {
        complex.diff(k - 1).map_or(0, |d| rank(d, RANK_TOL))
    };
    ker.saturating_sub(im)
}

/// Finite-dimensional torsion: always zero because images are closed; the
/// report pins the equivalence dim T = 0 <=> B closed along with the
/// cohomology dimension it bounds.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TorsionReport {
    pub torsion_dimension: usize,
    pub image_closed: bool,
    pub cohomology_dimension: usize,
}

pub fn torsion_check(complex: &FiniteCochainComplex, k: usize) -> TorsionReport {
    TorsionReport {
        torsion_dimension: 0,
        image_closed: true,
        cohomology_dimension: cohomology_dimension(complex, k),
    }
}

// ---------------------------------------------------------------------------
// Best constants
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ConstantMethod {
    Svd,
    ConvexOpt,
    BruteForce,
}

/// A computed best constant with its achieving pair.
#[derive(Debug, Clone)]
pub struct ConstantReport {
    pub level: usize,
    pub value: f64,
    pub p: f64,
    pub q: f64,
    pub method: ConstantMethod,
    /// (input, witness): for solvability theta in B^k and eta with
    /// D eta = theta; for the corrector xi and its closed approximant zeta.
    pub certificate: (DVector<f64>, DVector<f64>),
    /// True when H^k = 0, so the constant covers all of Z^k rather than
    /// only B^k.
    pub exact_over_closed: bool,
}

impl ConstantReport {
    /// Recompute the certified ratio (solvability: ||eta||_q / ||theta||_p).
    pub fn certified_ratio(&self, complex: &FiniteCochainComplex, k: usize, corrector: bool) -> f64 {
        let (input, witness) = &self.certificate;
        if corrector {
            let num = complex.norms[k - 1].norm_with_exponent(&(input - witness), self.q);
            let den = complex.norms[k].norm_with_exponent(&(&complex.d[k - 1] * input), self.p);
            num / den
        } else {
            let num = complex.norms[k - 1].norm_with_exponent(witness, self.q);
            let den = complex.norms[k].norm_with_exponent(input, self.p);
            num / den
        }
    }
}

/// Weighted transform x~ = W^{1/2} x used for the p = q = 2 closed form.
fn weighted_matrix(complex: &FiniteCochainComplex, k: usize) -> DMatrix<f64> {
    let d = &complex.d[k - 1];
    let wk = &complex.norms[k].weights;
    let wkm = &complex.norms[k - 1].weights;
    let mut out = d.clone();
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            out[(i, j)] *= wk[i].sqrt() / wkm[j].sqrt();
        }
    }
    out
}

/// Minimize || eta0 + N t ||_{q,w} over t (convex, q > 1) by projected
/// gradient with backtracking from the weighted least squares warm start.
fn min_norm_over_affine(
    eta0: &DVector<f64>,
    kernel: &DMatrix<f64>,
    norm: &LevelNorm,
    q: f64,
) -> DVector<f64> {
    if kernel.ncols() == 0 {
        return eta0.clone();
    }
    // weighted L2 warm start: t = -(N^T W N)^{-1} N^T W eta0
    let w = &norm.weights;
    let mut wn = kernel.clone();
    for i in 0..wn.nrows() {
        for j in 0..wn.ncols() {
            wn[(i, j)] *= w[i];
        }
    }
    let gram = kernel.transpose() * &wn;
    let rhs = -(wn.transpose() * eta0);
    let mut t = gram
        .clone()
        .lu()
        .solve(&rhs)
        .unwrap_or_else(|| DVector::zeros(kernel.ncols()));
    if (q - 2.0).abs() < 1e-14 {
        return eta0 + kernel * t;
    }
    let objective = |t: &DVector<f64>| -> f64 {
        let x = eta0 + kernel * t;
        x.iter()
            .zip(w.iter())
            .map(|(v, wi)| wi * v.abs().powf(q))
            .sum()
    };
    let gradient = |t: &DVector<f64>| -> DVector<f64> {
        let x = eta0 + kernel * t;
        let mut gx = DVector::zeros(x.len());
        for i in 0..x.len() {
            gx[i] = w[i] * q * x[i].abs().powf(q - 1.0) * x[i].signum();
        }
        kernel.transpose() * gx
    };
    let mut f = objective(&t);
    let mut step = 1.0;
    for _ in 0..4000 {
        let g = gradient(&t);
        let gn = g.norm();
        if gn < 1e-12 * (1.0 + f.abs()) {
            break;
        }
        // backtracking line search on the descent direction
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &t - step * &g;
            let fc = objective(&cand);
            if fc < f - 1e-4 * step * gn * gn {
                t = cand;
                f = fc;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    eta0 + kernel * t
}

/// Shared outer maximization: ratio(s) over the unit sphere in a basis,
/// multi-start projected ascent with numerical gradients.
fn maximize_on_sphere(
    dim: usize,
    ratio: &dyn Fn(&DVector<f64>) -> f64,
    starts: Vec<DVector<f64>>,
) -> (f64, DVector<f64>) {
    let mut best_val = f64::NEG_INFINITY;
    let mut best_s = DVector::zeros(dim);
    for start in starts {
        let mut s = start.normalize();
        let mut val = ratio(&s);
        let mut step = 0.2;
        for _ in 0..400 {
            // numerical tangent gradient
            let h = 1e-6;
            let mut grad = DVector::zeros(dim);
            for i in 0..dim {
                let mut sp = s.clone();
                sp[i] += h;
                sp = sp.normalize();
                let mut sm = s.clone();
                sm[i] -= h;
                sm = sm.normalize();
                grad[i] = (ratio(&sp) - ratio(&sm)) / (2.0 * h);
            }
            let gn = grad.norm();
            if gn < 1e-11 * (1.0 + val.abs()) || step < 1e-12 {
                break;
            }
            let mut advanced = false;
            for _ in 0..40 {
                let cand = (&s + step * &grad).normalize();
                let cv = ratio(&cand);
                if cv > val + 1e-14 {
                    s = cand;
                    val = cv;
                    step *= 1.3;
                    advanced = true;
                    break;
                }
                step *= 0.5;
            }
            if !advanced {
                break;
            }
        }
        if val > best_val {
            best_val = val;
            best_s = s;
        }
    }
    (best_val, best_s)
}

fn default_starts(dim: usize, rng: &mut ChaCha8Rng, extra: usize) -> Vec<DVector<f64>> {
    let mut starts = Vec::new();
    for i in 0..dim {
        let mut e = DVector::zeros(dim);
        e[i] = 1.0;
        starts.push(e.clone());
        starts.push(-e);
    }
    for _ in 0..extra {
        starts.push(DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)));
    }
    starts
}

/// Best constant C at level k: for every theta in B^k there is eta with
/// D eta = theta and ||eta||_q <= C ||theta||_p. When H^k = 0 the same
/// constant covers Z^k (flagged in the report). B^k = 0 yields 0.
pub fn solvability_constant(
    complex: &FiniteCochainComplex,
    k: usize,
    p: f64,
    q: f64,
) -> Result<ConstantReport> {
    if k == 0 || k >= complex.levels() {
        return Err(LqpError::InvalidArgument("solvability level out of range".into()));
    }
    let d = &complex.d[k - 1];
    let exact_over_closed = cohomology_dimension(complex, k) == 0;
    let image_basis = column_space_basis(d, RANK_TOL);
    let b_dim = image_basis.ncols();
    if b_dim == 0 {
        return Ok(ConstantReport {
            level: k,
            value: 0.0,
            method: ConstantMethod::Svd,
            certificate: (DVector::zeros(complex.dims[k]), DVector::zeros(complex.dims[k - 1])),
            exact_over_closed,
        });
    }

    let two_two = (p - 2.0).abs() < 1e-14 && (q - 2.0).abs() < 1e-14;
    if two_two {
        let wd = weighted_matrix(complex, k);
        let sigma = sigma_min_positive(&wd, RANK_TOL).expect("nonzero image implies a positive sigma");
        // certificate: weighted singular pair at sigma_min
        let gram = wd.transpose() * &wd;
        let eig = gram.symmetric_eigen();
        let mut best = (f64::INFINITY, 0usize);
        let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        for (i, &l) in eig.eigenvalues.iter().enumerate() {
            if l > (RANK_TOL * max.sqrt()).powi(2).max(1e-28 * max.max(1.0)) && l < best.0 {
                best = (l, i);
            }
        }
        let vt = eig.eigenvectors.column(best.1).into_owned();
        // map back: eta~ = W^{1/2} eta
        let wkm = &complex.norms[k - 1].weights;
        let eta = DVector::from_fn(vt.len(), |i, _| vt[i] / wkm[i].sqrt());
        let theta = d * &eta;
        return Ok(ConstantReport {
            level: k,
            value: 1.0 / sigma,
            method: ConstantMethod::Svd,
            certificate: (theta, eta),
            exact_over_closed,
        });
    }

    let kernel = null_space_basis(d, RANK_TOL);
    let pinv = d.clone().pseudo_inverse(RANK_TOL).map_err(|e| {
        LqpError::NonConvergence(format!("pseudo-inverse failed: {e}"))
    })?;
    let norm_k = &complex.norms[k];
    let norm_km = &complex.norms[k - 1];
    let ratio = |s: &DVector<f64>| -> f64 {
        let theta = &image_basis * s;
        let eta0 = &pinv * &theta;
        let eta = min_norm_over_affine(&eta0, &kernel, norm_km, q);
        norm_km.norm_with_exponent(&eta, q) / norm_k.norm_with_exponent(&theta, p)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let (value, s) = maximize_on_sphere(b_dim, &ratio, default_starts(b_dim, &mut rng, 24));
    let theta = &image_basis * &s;
    let eta0 = &pinv * &theta;
    let eta = min_norm_over_affine(&eta0, &kernel, norm_km, q);
    Ok(ConstantReport {
        level: k,
        value,
        method: ConstantMethod::ConvexOpt,
        certificate: (theta, eta),
        exact_over_closed,
    })
}

/// Brute-force cross-check of the solvability constant: dense random
/// sampling of the unit sphere of B^k, with a short polish of the best
/// samples. Intended for level dimensions <= 6.
pub fn solvability_constant_brute(
    complex: &FiniteCochainComplex,
    k: usize,
    p: f64,
    q: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let d = &complex.d[k - 1];
    let image_basis = column_space_basis(d, RANK_TOL);
    let b_dim = image_basis.ncols();
    if b_dim == 0 {
        return Ok(0.0);
    }
    let kernel = null_space_basis(d, RANK_TOL);
    let pinv = d
        .clone()
        .pseudo_inverse(RANK_TOL)
        .map_err(|e| LqpError::NonConvergence(format!("pseudo-inverse failed: {e}")))?;
    let norm_k = &complex.norms[k];
    let norm_km = &complex.norms[k - 1];
    let ratio = |s: &DVector<f64>| -> f64 {
        let theta = &image_basis * s;
        let eta0 = &pinv * &theta;
        let eta = min_norm_over_affine(&eta0, &kernel, norm_km, q);
        norm_km.norm_with_exponent(&eta, q) / norm_k.norm_with_exponent(&theta, p)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scored: Vec<(f64, DVector<f64>)> = (0..samples)
        .map(|_| {
            let s = DVector::from_fn(b_dim, |_, _| rng.gen_range(-1.0..1.0f64)).normalize();
            (ratio(&s), s)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let tops: Vec<DVector<f64>> = scored.into_iter().take(6).map(|(_, s)| s).collect();
    let (value, _) = maximize_on_sphere(b_dim, &ratio, tops);
    Ok(value)
}

/// Best corrector constant C' at level k: for every xi at level k-1 there is
/// a closed zeta with ||xi - zeta||_q <= C' ||D xi||_p. D = 0 gives 0.
pub fn corrector_constant(
    complex: &FiniteCochainComplex,
    k: usize,
    p: f64,
    q: f64,
) -> Result<ConstantReport> {
    if k == 0 || k >= complex.levels() {
        return Err(LqpError::InvalidArgument("corrector level out of range".into()));
    }
    let d = &complex.d[k - 1];
    let exact_over_closed = cohomology_dimension(complex, k) == 0;
    // row space = orthocomplement of ker D; the ratio is constant along the
    // kernel so it suffices to scan the row space
    let row_basis = {
        let gram = d.transpose() * d;
        let eig = gram.symmetric_eigen();
        let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let cutoff = (RANK_TOL * max.sqrt().max(1e-300)).powi(2).max(1e-28 * max.max(1.0));
        let cols: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&i| eig.eigenvalues[i] > cutoff)
            .collect();
        let mut basis = DMatrix::zeros(d.ncols(), cols.len());
        for (j, &i) in cols.iter().enumerate() {
            basis.set_column(j, &eig.eigenvectors.column(i));
        }
        basis
    };
    if row_basis.ncols() == 0 {
        return Ok(ConstantReport {
            level: k,
            value: 0.0,
            method: ConstantMethod::Svd,
            certificate: (DVector::zeros(complex.dims[k - 1]), DVector::zeros(complex.dims[k - 1])),
            exact_over_closed,
        });
    }

    let kernel = null_space_basis(d, RANK_TOL);
    let norm_k = &complex.norms[k];
    let norm_km = &complex.norms[k - 1];
    let two_two = (p - 2.0).abs() < 1e-14 && (q - 2.0).abs() < 1e-14;
    if two_two {
        let wd = weighted_matrix(complex, k);
        let sigma = sigma_min_positive(&wd, RANK_TOL).expect("row space nonzero");
        // certificate from the weighted singular vector
        let gram = wd.transpose() * &wd;
        let eig = gram.symmetric_eigen();
        let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let cutoff = (RANK_TOL * max.sqrt()).powi(2).max(1e-28 * max.max(1.0));
        let mut best = (f64::INFINITY, 0usize);
        for (i, &l) in eig.eigenvalues.iter().enumerate() {
            if l > cutoff && l < best.0 {
                best = (l, i);
            }
        }
        let vt = eig.eigenvectors.column(best.1).into_owned();
        let wkm = &complex.norms[k - 1].weights;
        let xi = DVector::from_fn(vt.len(), |i, _| vt[i] / wkm[i].sqrt());
        let zeta = weighted_kernel_projection(&xi, &kernel, norm_km);
        return Ok(ConstantReport {
            level: k,
            value: 1.0 / sigma,
            method: ConstantMethod::Svd,
            certificate: (xi, zeta),
            exact_over_closed,
        });
    }

    let ratio = |s: &DVector<f64>| -> f64 {
        let xi = &row_basis * s;
        let diff = min_norm_over_affine(&xi, &kernel, norm_km, q);
        norm_km.norm_with_exponent(&diff, q) / norm_k.norm_with_exponent(&(d * &xi), p)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let (value, s) = maximize_on_sphere(row_basis.ncols(), &ratio, default_starts(row_basis.ncols(), &mut rng, 24));
    let xi = &row_basis * &s;
    let diff = min_norm_over_affine(&xi, &kernel, norm_km, q);
    let zeta = &xi - &diff;
    Ok(ConstantReport {
        level: k,
        value,
        method: ConstantMethod::ConvexOpt,
        certificate: (xi, zeta),
        exact_over_closed,
    })
}

fn weighted_kernel_projection(
    xi: &DVector<f64>,
    kernel: &DMatrix<f64>,
    norm: &LevelNorm,
) -> DVector<f64> {
    if kernel.ncols() == 0 {
        return DVector::zeros(xi.len());
    }
    let w = &norm.weights;
    let mut wn = kernel.clone();
    for i in 0..wn.nrows() {
        for j in 0..wn.ncols() {
            wn[(i, j)] *= w[i];
        }
    }
    let gram = kernel.transpose() * &wn;
    let rhs = wn.transpose() * xi;
    let t = gram.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(kernel.ncols()));
    kernel * t
}

// ---------------------------------------------------------------------------
// Discretization bridge
// ---------------------------------------------------------------------------

fn circulant_forward_difference(n: usize, h: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = -1.0 / h;
        m[(i, (i + 1) % n)] = 1.0 / h;
    }
    m
}

/// Assemble the finite difference cochain complex of a compact domain
/// (circle or flat torus) with quadrature weights as level norms. The
/// one-sided difference stencil keeps the kernel of each level equal to the
/// constants, so the cohomology dimensions match the continuum.
pub fn discretize(
    domain: &ChartDomain,
    metric: &DiagonalMetric,
    grid: &Grid,
    exponent: f64,
) -> Result<FiniteCochainComplex> {
    if !domain.is_compact() {
        return Err(LqpError::Unsupported(
            "discretize needs a compact domain (circle or torus)".into(),
        ));
    }
    match &domain.kind {
        DomainKind::Circle { .. } => {
            let n = grid.axes[0].len();
            let h = grid.axes[0].spacing.expect("circle grids are uniform");
            let d0 = circulant_forward_difference(n, h);
            let w: Vec<f64> = grid
                .iter_nodes()
                .map(|(x, wt)| wt * metric.volume_density(&x))
                .collect();
            let w0 = DVector::from_vec(w.clone());
            let w1 = DVector::from_vec(w);
            FiniteCochainComplex::new(
                vec![n, n],
                vec![d0],
                vec![
                    LevelNorm { weights: w0, exponent },
                    LevelNorm { weights: w1, exponent },
                ],
            )
        }
        DomainKind::Torus { lengths } if lengths.len() == 2 => {
            let (nx, ny) = (grid.axes[0].len(), grid.axes[1].len());
            let hx = grid.axes[0].spacing.unwrap();
            let hy = grid.axes[1].spacing.unwrap();
            let n = nx * ny;
            // flat index (i, j) -> i * ny + j; Dx acts on i, Dy on j
            let mut dx = DMatrix::zeros(n, n);
            let mut dy = DMatrix::zeros(n, n);
            for i in 0..nx {
                for j in 0..ny {
                    let row = i * ny + j;
                    dx[(row, row)] = -1.0 / hx;
                    dx[(row, ((i + 1) % nx) * ny + j)] = 1.0 / hx;
                    dy[(row, row)] = -1.0 / hy;
                    dy[(row, i * ny + (j + 1) % ny)] = 1.0 / hy;
                }
            }
            // d0 = [Dx; Dy], d1 = [-Dy | Dx]
            let mut d0 = DMatrix::zeros(2 * n, n);
            d0.view_mut((0, 0), (n, n)).copy_from(&dx);
            d0.view_mut((n, 0), (n, n)).copy_from(&dy);
            let mut d1 = DMatrix::zeros(n, 2 * n);
            d1.view_mut((0, 0), (n, n)).copy_from(&(-&dy));
            d1.view_mut((0, n), (n, n)).copy_from(&dx);
            let w: Vec<f64> = grid
                .iter_nodes()
                .map(|(x, wt)| wt * metric.volume_density(&x))
                .collect();
            let w0 = DVector::from_vec(w.clone());
            let mut w1v = w.clone();
            w1v.extend_from_slice(&w);
            let w1 = DVector::from_vec(w1v);
            let w2 = DVector::from_vec(w);
            FiniteCochainComplex::new(
                vec![n, 2 * n, n],
                vec![d0, d1],
                vec![
                    LevelNorm { weights: w0, exponent },
                    LevelNorm { weights: w1, exponent },
                    LevelNorm { weights: w2, exponent },
                ],
            )
        }
        _ => Err(LqpError::Unsupported(
            "discretize supports the circle and the 2-torus".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Text import/export
// ---------------------------------------------------------------------------

/// Write the complex in the documented text layout: header, level dims,
/// per-level exponent and weights, then each D_k as dense row-major rows.
pub fn write_complex_text(complex: &FiniteCochainComplex) -> String {
    let mut out = String::from("lqpcomplex 1\n");
    out.push_str(&format!(
        "dims {}\n",
        complex
            .dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    ));
    for (k, norm) in complex.norms.iter().enumerate() {
        out.push_str(&format!("norm {k} {:.17e}\n", norm.exponent));
        let w: Vec<String> = norm.weights.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&w.join(" "));
        out.push('\n');
    }
    for (k, d) in complex.d.iter().enumerate() {
        out.push_str(&format!("matrix {k} {} {}\n", d.nrows(), d.ncols()));
        for i in 0..d.nrows() {
            let row: Vec<String> = (0..d.ncols()).map(|j| format!("{:.17e}", d[(i, j)])).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn read_complex_text(text: &str) -> Result<FiniteCochainComplex> {
    let mut lines = text.lines();
    let mut next = || {
        lines
            .next()
            .ok_or_else(|| LqpError::Parse("truncated complex file".into()))
    };
    if next()?.trim() != "lqpcomplex 1" {
        return Err(LqpError::Parse("unknown complex header".into()));
    }
    let dims: Vec<usize> = next()?
        .strip_prefix("dims ")
        .ok_or_else(|| LqpError::Parse("missing dims".into()))?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| LqpError::Parse("bad dims".into())))
        .collect::<Result<_>>()?;
    let parse_floats = |line: &str| -> Result<Vec<f64>> {
        line.split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| LqpError::Parse(e.to_string())))
            .collect()
    };
    let mut norms = Vec::with_capacity(dims.len());
    for k in 0..dims.len() {
        let head = next()?;
        let toks: Vec<&str> = head.split_whitespace().collect();
        if toks.first() != Some(&"norm") || toks[1] != k.to_string() {
            return Err(LqpError::Parse("missing norm header".into()));
        }
        let exponent: f64 = toks[2].parse().map_err(|e: std::num::ParseFloatError| {
            LqpError::Parse(e.to_string())
        })?;
        let weights = DVector::from_vec(parse_floats(next()?)?);
        norms.push(LevelNorm { weights, exponent });
    }
    let mut mats = Vec::with_capacity(dims.len() - 1);
    for k in 0..dims.len() - 1 {
        let head = next()?;
        let toks: Vec<&str> = head.split_whitespace().collect();
        if toks.first() != Some(&"matrix") || toks[1] != k.to_string() {
            return Err(LqpError::Parse("missing matrix header".into()));
        }
        let rows: usize = toks[2].parse().map_err(|_| LqpError::Parse("bad rows".into()))?;
        let cols: usize = toks[3].parse().map_err(|_| LqpError::Parse("bad cols".into()))?;
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            let vals = parse_floats(next()?)?;
            for (j, v) in vals.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        mats.push(m);
    }
    FiniteCochainComplex::new(dims, mats, norms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_grid;
    use approx::assert_abs_diff_eq;

    fn circle_difference(n: usize) -> FiniteCochainComplex {
        // D = I - shift (unit spacing)
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            d[(i, i)] = 1.0;
            d[(i, (i + 1) % n)] = -1.0;
        }
        FiniteCochainComplex::new(
            vec![n, n],
            vec![d],
            vec![LevelNorm::unit(n, 2.0), LevelNorm::unit(n, 2.0)],
        )
        .unwrap()
    }

    #[test]
    fn circle_graph_cohomology() {
        let c = circle_difference(4);
        assert_eq!(cohomology_dimension(&c, 0), 1);
        assert_eq!(cohomology_dimension(&c, 1), 1);
    }

    #[test]
    fn disjoint_circles_double_h0() {
        let c4 = circle_difference(4);
        let mut d = DMatrix::zeros(8, 8);
        d.view_mut((0, 0), (4, 4)).copy_from(&c4.d[0]);
        d.view_mut((4, 4), (4, 4)).copy_from(&c4.d[0]);
        let c = FiniteCochainComplex::new(
            vec![8, 8],
            vec![d],
            vec![LevelNorm::unit(8, 2.0), LevelNorm::unit(8, 2.0)],
        )
        .unwrap();
        assert_eq!(cohomology_dimension(&c, 0), 2);
    }

    #[test]
    fn path_graph_has_no_h1() {
        // interval: difference matrix (n-1) x n has full rank
        let n = 6;
        let mut d = DMatrix::zeros(n - 1, n);
        for i in 0..n - 1 {
            d[(i, i)] = -1.0;
            d[(i, i + 1)] = 1.0;
        }
        let c = FiniteCochainComplex::new(
            vec![n, n - 1],
            vec![d],
            vec![LevelNorm::unit(n, 2.0), LevelNorm::unit(n - 1, 2.0)],
        )
        .unwrap();
        assert_eq!(cohomology_dimension(&c, 1), 0);
        assert_eq!(cohomology_dimension(&c, 0), 1);
    }

    #[test]
    fn torsion_is_zero_and_bounded_by_cohomology() {
        let c = circle_difference(5);
        let t = torsion_check(&c, 1);
        assert_eq!(t.torsion_dimension, 0);
        assert!(t.image_closed);

        // D = 0: H^k = m_k
        let z = FiniteCochainComplex::new(
            vec![3, 3],
            vec![DMatrix::zeros(3, 3)],
            vec![LevelNorm::unit(3, 2.0), LevelNorm::unit(3, 2.0)],
        )
        .unwrap();
        assert_eq!(torsion_check(&z, 1).cohomology_dimension, 3);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = FiniteCochainComplex::random(&mut rng, &[4, 5, 3, 4, 2, 3], 2.0);
        assert!(r.composition_defect() <= 1e-12);
        for k in 0..6 {
            let rep = torsion_check(&r, k);
            assert_eq!(rep.torsion_dimension, 0);
        }
    }

    #[test]
    fn identity_complex_has_unit_constant() {
        let c = FiniteCochainComplex::new(
            vec![3, 3],
            vec![DMatrix::identity(3, 3)],
            vec![LevelNorm::unit(3, 2.0), LevelNorm::unit(3, 2.0)],
        )
        .unwrap();
        let rep = solvability_constant(&c, 1, 2.0, 2.0).unwrap();
        assert_abs_diff_eq!(rep.value, 1.0, epsilon = 1e-12);
        assert!(rep.exact_over_closed);
        assert_abs_diff_eq!(rep.certified_ratio(&c, 1, false), rep.value, epsilon = 1e-8);
    }

    #[test]
    fn four_node_circle_solvability_is_inverse_sqrt_two() {
        let c = circle_difference(4);
        let rep = solvability_constant(&c, 1, 2.0, 2.0).unwrap();
        assert_abs_diff_eq!(rep.value, 1.0 / 2.0f64.sqrt(), epsilon = 1e-10);
        assert!(!rep.exact_over_closed, "circle has H^1 = 1");
        assert_abs_diff_eq!(rep.certified_ratio(&c, 1, false), rep.value, epsilon = 1e-8);
    }

    #[test]
    fn corrector_matches_circulant_spectral_gap() {
        for n in [4usize, 8, 16] {
            let c = circle_difference(n);
            let rep = corrector_constant(&c, 1, 2.0, 2.0).unwrap();
            let expected = 1.0 / (2.0 * (std::f64::consts::PI / n as f64).sin());
            assert_abs_diff_eq!(rep.value, expected, epsilon = 1e-10);
            assert_abs_diff_eq!(rep.certified_ratio(&c, 1, true), rep.value, epsilon = 1e-8);
        }

        // D = 0: take zeta = xi
        let z = FiniteCochainComplex::new(
            vec![3, 3],
            vec![DMatrix::zeros(3, 3)],
            vec![LevelNorm::unit(3, 2.0), LevelNorm::unit(3, 2.0)],
        )
        .unwrap();
        assert_abs_diff_eq!(corrector_constant(&z, 1, 2.0, 2.0).unwrap().value, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn general_exponent_constant_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d = DMatrix::from_fn(5, 8, |_, _| rng.gen_range(-1.0..1.0f64));
        let c = FiniteCochainComplex::new(
            vec![8, 5],
            vec![d],
            vec![LevelNorm::unit(8, 1.5), LevelNorm::unit(5, 3.0)],
        )
        .unwrap();
        let rep = solvability_constant(&c, 1, 1.5, 3.0).unwrap();
        let brute = solvability_constant_brute(&c, 1, 1.5, 3.0, 2000, 99).unwrap();
        assert_abs_diff_eq!(rep.value, brute, epsilon = 1e-4);
        assert_abs_diff_eq!(rep.certified_ratio(&c, 1, false), rep.value, epsilon = 1e-8);
    }

    #[test]
    fn corrector_and_solvability_agree_between_gamma_and_twice_gamma() {
        // both scan the same ratio through different parametrizations; the
        // open-mapping constant gamma is the p=q=2 value
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..3 {
            let c = FiniteCochainComplex::random(&mut rng, &[4, 4, 3], 2.0);
            let gamma = solvability_constant(&c, 1, 2.0, 2.0).unwrap().value;
            let corr = corrector_constant(&c, 1, 2.0, 2.0).unwrap().value;
            assert!(corr >= 0.5 * (2.0 * gamma) - 1e-9);
            assert!(corr <= 2.0 * gamma + 1e-9);
            assert_abs_diff_eq!(corr, gamma, epsilon = 1e-9);
        }
    }

    #[test]
    fn solvability_finite_iff_no_cohomology() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..6 {
            let c = FiniteCochainComplex::random(&mut rng, &[4, 3, 4], 2.0);
            for k in 1..=2 {
                let rep = solvability_constant(&c, k, 2.0, 2.0).unwrap();
                assert_eq!(rep.exact_over_closed, cohomology_dimension(&c, k) == 0);
                assert!(rep.value.is_finite());
            }
        }
    }

    #[test]
    fn hoelder_weight_embedding_never_increases_corrector() {
        // q1 <= q2 on a finite measure: C'(q1) <= V^{1/q1 - 1/q2} C'(q2)
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..3 {
            let mut c = FiniteCochainComplex::random(&mut rng, &[4, 3], 2.0);
            for w in c.norms[0].weights.iter_mut() {
                *w = rng.gen_range(0.5..2.0);
            }
            let (q1, q2) = (2.0, 4.0);
            let v = c.norms[0].total_weight();
            let c2 = corrector_constant(&c, 1, 2.0, q2).unwrap().value;
            let c1 = corrector_constant(&c, 1, 2.0, q1).unwrap().value;
            let factor = v.powf(1.0 / q1 - 1.0 / q2);
            assert!(
                c1 <= factor * c2 * (1.0 + 1e-6),
                "embedding violated: {c1} > {factor} * {c2}"
            );
        }
    }

    #[test]
    fn discretized_circle_and_torus_have_continuum_betti_numbers() {
        let circle = ChartDomain::circle(2.0 * std::f64::consts::PI).unwrap();
        let grid = build_grid(&circle, &[16], None).unwrap();
        let c = discretize(&circle, &DiagonalMetric::euclidean(1), &grid, 2.0).unwrap();
        assert_eq!(c.dims, vec![16, 16]);
        // circulant: every row has the same two entries
        for i in 0..16 {
            assert_abs_diff_eq!(c.d[0][(i, i)], -16.0 / (2.0 * std::f64::consts::PI), epsilon = 1e-12);
        }
        assert_eq!(cohomology_dimension(&c, 0), 1);
        assert_eq!(cohomology_dimension(&c, 1), 1);

        let torus = ChartDomain::torus(&[2.0 * std::f64::consts::PI; 2]).unwrap();
        let tg = build_grid(&torus, &[8, 8], None).unwrap();
        let tc = discretize(&torus, &DiagonalMetric::euclidean(2), &tg, 2.0).unwrap();
        assert_eq!(tc.dims, vec![64, 128, 64]);
        assert!(tc.composition_defect() <= 1e-12);
        assert_eq!(cohomology_dimension(&tc, 0), 1);
        assert_eq!(cohomology_dimension(&tc, 1), 2);
        assert_eq!(cohomology_dimension(&tc, 2), 1);

        let ball = ChartDomain::ball(2).unwrap();
        let bg = build_grid(&ball, &[8, 8], None).unwrap();
        assert!(discretize(&ball, &DiagonalMetric::euclidean(2), &bg, 2.0).is_err());
    }

    #[test]
    fn complex_text_roundtrip_preserves_constants() {
        let c = circle_difference(4);
        let text = write_complex_text(&c);
        let back = read_complex_text(&text).unwrap();
        assert_eq!(back.dims, c.dims);
        let a = solvability_constant(&c, 1, 2.0, 2.0).unwrap().value;
        let b = solvability_constant(&back, 1, 2.0, 2.0).unwrap().value;
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
