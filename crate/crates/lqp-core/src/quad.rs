//! One-dimensional quadrature rules: Gauss-Legendre nodes, composite panels,
//! and power-graded panel layouts for integrands with an endpoint singularity.

/// A quadrature rule on an interval: paired nodes and positive weights.
#[derive(Debug, Clone)]
pub struct Rule1d {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule1d {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integrate a scalar function with this rule.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Legendre polynomial P_n and its derivative at x, by the three-term recurrence.
fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for j in 2..=n {
        let jf = j as f64;
        let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Gauss-Legendre rule of order `n` on [-1, 1]. Nodes by Newton iteration
/// from the Chebyshev initial guess; accurate to machine precision.
pub fn gauss_legendre(n: usize) -> Rule1d {
    assert!(n >= 1, "quadrature order must be positive");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_pair(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_pair(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
        let (_, dp) = legendre_pair(n, 0.0);
        weights[n / 2] = 2.0 / (dp * dp);
    }
    Rule1d { nodes, weights }
}

/// Gauss-Legendre rule mapped to [a, b].
pub fn gauss_on(a: f64, b: f64, order: usize) -> Rule1d {
    let base = gauss_legendre(order);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    Rule1d {
        nodes: base.nodes.iter().map(|&t| mid + half * t).collect(),
        weights: base.weights.iter().map(|&w| w * half).collect(),
    }
}

/// Composite Gauss rule: `panels` equal panels on [a, b], `order` nodes each.
pub fn composite_gauss(a: f64, b: f64, panels: usize, order: usize) -> Rule1d {
    let mut rule = Rule1d {
        nodes: Vec::with_capacity(panels * order),
        weights: Vec::with_capacity(panels * order),
    };
    let h = (b - a) / panels as f64;
    for i in 0..panels {
        let piece = gauss_on(a + i as f64 * h, a + (i + 1) as f64 * h, order);
        rule.nodes.extend(piece.nodes);
        rule.weights.extend(piece.weights);
    }
    rule
}

/// Composite Gauss rule with explicit panel boundaries (strictly increasing).
pub fn gauss_with_breakpoints(breaks: &[f64], order: usize) -> Rule1d {
    assert!(breaks.len() >= 2);
    let mut rule = Rule1d {
        nodes: Vec::new(),
        weights: Vec::new(),
    };
    for w in breaks.windows(2) {
        let piece = gauss_on(w[0], w[1], order);
        rule.nodes.extend(piece.nodes);
        rule.weights.extend(piece.weights);
    }
    rule
}

/// Power-graded composite rule on [0, length]: panel boundaries at
/// length * (i/panels)^grading, which clusters nodes toward 0.
pub fn graded_gauss(length: f64, panels: usize, order: usize, grading: f64) -> Rule1d {
    assert!(grading >= 1.0);
    let mut breaks = Vec::with_capacity(panels + 1);
    for i in 0..=panels {
        breaks.push(length * (i as f64 / panels as f64).powf(grading));
    }
    gauss_with_breakpoints(&breaks, order)
}

/// Rule for integrands with an algebraic singularity r^sigma at 0: the
/// substitution r = length * u^gamma turns r^sigma dr into a smooth
/// integrand when gamma * (sigma + 1) is large enough. Returns nodes in r
/// with the substituted weights.
pub fn power_substituted_gauss(length: f64, panels: usize, order: usize, gamma: f64) -> Rule1d {
    let base = composite_gauss(0.0, 1.0, panels, order);
    let mut nodes = Vec::with_capacity(base.len());
    let mut weights = Vec::with_capacity(base.len());
    for (&u, &w) in base.nodes.iter().zip(&base.weights) {
        nodes.push(length * u.powf(gamma));
        weights.push(w * length * gamma * u.powf(gamma - 1.0));
    }
    Rule1d { nodes, weights }
}

/// Grading exponent that renders r^sigma smooth after substitution:
/// gamma * (sigma + 1) >= smoothness + 1.
pub fn grading_for_singularity(sigma: f64, smoothness: f64) -> f64 {
    ((smoothness + 1.0) / (sigma + 1.0)).max(1.0).ceil()
}

/// Bracketed root finding: secant proposals interleaved with bisection so the
/// bracket provably shrinks. Requires f(lo) and f(hi) of opposite sign.
pub fn brent_root(
    f: impl Fn(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
    max_iter: usize,
) -> crate::Result<f64> {
    let mut flo = f(lo);
    let mut fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo * fhi > 0.0 {
        return Err(crate::LqpError::RootFind {
            lo,
            hi,
            residual: if flo.abs() < fhi.abs() { flo } else { fhi },
        });
    }
    for iter in 0..max_iter {
        let width = hi - lo;
        if width.abs() < tol {
            return Ok(0.5 * (lo + hi));
        }
        let mid = if iter % 2 == 0 {
            0.5 * (lo + hi)
        } else {
            // secant candidate, clipped into the bracket interior
            let s = hi - fhi * (hi - lo) / (fhi - flo);
            if s.is_finite() && s > lo + 0.01 * width && s < hi - 0.01 * width {
                s
            } else {
                0.5 * (lo + hi)
            }
        };
        let fmid = f(mid);
        if fmid == 0.0 {
            return Ok(mid);
        }
        if flo * fmid < 0.0 {
            hi = mid;
            fhi = fmid;
        } else {
            lo = mid;
            flo = fmid;
        }
    }
    Err(crate::LqpError::RootFind {
        lo,
        hi,
        residual: f(0.5 * (lo + hi)),
    })
}
