//! Reference-domain polynomial bases and quadrature on the unit triangle
//! `{(x,y) : x,y >= 0, x+y <= 1}` and the unit interval `[0,1]`, plus the
//! affine maps onto physical elements and facets.

use nalgebra::DMatrix;
use thiserror::Error;

/// Highest quadrature exactness degree the rule constructors accept.
pub const MAX_EXACTNESS: usize = 14;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RefElementError {
    #[error("quadrature exactness {requested} exceeds supported maximum {max}")]
    UnsupportedOrder { requested: usize, max: usize },
}

/// Positive-weight quadrature rule; `P` is `[f64; 2]` on triangles, `f64` on intervals.
#[derive(Debug, Clone)]
pub struct QuadratureRule<P> {
    pub points: Vec<P>,
    pub weights: Vec<f64>,
    pub exactness_degree: usize,
}

pub type TriangleRule = QuadratureRule<[f64; 2]>;
pub type IntervalRule = QuadratureRule<f64>;

impl<P> QuadratureRule<P> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Gauss-Legendre nodes/weights on [-1,1]; nodes symmetric by construction.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi-style initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dpn = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(x) and P_{n-1}(x).
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 1..n {
                let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
                p0 = p1;
                p1 = p2;
            }
            dpn = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dpn;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dpn * dpn);
        nodes[i] = -x.abs();
        nodes[n - 1 - i] = x.abs();
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Gauss rule on [0,1] with `ceil((exactness+1)/2)` nodes.
pub fn interval_rule(exactness: usize) -> Result<IntervalRule, RefElementError> {
    if exactness > MAX_EXACTNESS {
        return Err(RefElementError::UnsupportedOrder {
            requested: exactness,
            max: MAX_EXACTNESS,
        });
    }
    let n = (exactness + 2) / 2; // = ceil((exactness+1)/2)
    let (xs, ws) = gauss_legendre(n);
    let points: Vec<f64> = xs.iter().map(|x| 0.5 * (x + 1.0)).collect();
    let weights: Vec<f64> = ws.iter().map(|w| 0.5 * w).collect();
    Ok(IntervalRule {
        points,
        weights,
        exactness_degree: 2 * n - 1,
    })
}

/// Conical-product Gauss rule on the unit triangle, exact for total degree
/// `exactness`. Substituting x = s, y = t(1-s) gives the integrand an extra
/// Jacobian factor (1-s), so the s-direction rule is one degree stronger.
pub fn triangle_rule(exactness: usize) -> Result<TriangleRule, RefElementError> {
    if exactness > MAX_EXACTNESS {
        return Err(RefElementError::UnsupportedOrder {
            requested: exactness,
            max: MAX_EXACTNESS,
        });
    }
    let r = (exactness + 3) / 2; // exact to degree exactness+1 in s
    let q = (exactness + 2) / 2; // exact to degree exactness in t
    let (sx, sw) = gauss_legendre(r);
    let (tx, tw) = gauss_legendre(q);
    let mut points = Vec::with_capacity(r * q);
    let mut weights = Vec::with_capacity(r * q);
    for i in 0..r {
        let s = 0.5 * (sx[i] + 1.0);
        for j in 0..q {
            let t = 0.5 * (tx[j] + 1.0);
            points.push([s, t * (1.0 - s)]);
            weights.push(0.25 * sw[i] * tw[j] * (1.0 - s));
        }
    }
    Ok(TriangleRule {
        points,
        weights,
        exactness_degree: exactness,
    })
}

/// Quotient p/q of exactly representable integers as a hi/lo double-double
/// pair; hi + lo equals p/q to ~2^-104.
fn exact_ratio(p: f64, q: f64) -> (f64, f64) {
    let hi = p / q;
    let lo = (-q).mul_add(hi, p) / q;
    (hi, lo)
}

fn triangle_monomial_integral_parts(a: usize, b: usize) -> (f64, f64) {
    // a! b! and (a+b+2)! are exact in f64 for a+b <= 14.
    let mut p = 1.0;
    for i in 1..=a {
        p *= i as f64;
    }
    for i in 1..=b {
        p *= i as f64;
    }
    let mut q = 1.0;
    for i in 1..=(a + b + 2) {
        q *= i as f64;
    }
    exact_ratio(p, q)
}

/// Reference-triangle monomial integral ∫ x^a y^b = a! b! / (a+b+2)!.
pub fn triangle_monomial_integral(a: usize, b: usize) -> f64 {
    let (hi, lo) = triangle_monomial_integral_parts(a, b);
    hi + lo
}

/// L2-orthonormal polynomial basis of total degree `m` on the unit triangle,
/// stored as coefficient vectors over graded monomials x^a y^b.
#[derive(Debug, Clone)]
pub struct TriangleBasis {
    pub degree: usize,
    pub dim: usize,
    monomials: Vec<(usize, usize)>,
    /// coeffs[i][j]: coefficient of monomial j in basis function i.
    coeffs: Vec<Vec<f64>>,
}

/// L2-orthonormal polynomial basis of degree `m` on [0,1] over monomials s^j.
#[derive(Debug, Clone)]
pub struct IntervalBasis {
    pub degree: usize,
    pub dim: usize,
    coeffs: Vec<Vec<f64>>,
}

/// Accumulates `a * b` into a Neumaier-compensated sum. The monomial
/// coefficients of the degree-4 orthonormal bases reach ~1e3 with heavy
/// cancellation, so plain f64 dots lose ~1e-12; compensation keeps basis
/// evaluations at machine accuracy.
#[inline]
fn comp_fma(sum: &mut f64, comp: &mut f64, a: f64, b: f64) {
    let p = a * b;
    *comp += a.mul_add(b, -p);
    let t = *sum + p;
    if sum.abs() >= p.abs() {
        *comp += (*sum - t) + p;
    } else {
        *comp += (p - t) + *sum;
    }
    *sum = t;
}

/// Modified Gram-Schmidt with reorthogonalization in the inner product given
/// by the exact monomial Gram matrix (carried as a hi/lo double-double pair),
/// followed by one symmetric (Cholesky) polish; together these hold the
/// orthonormality defect of the ill-conditioned degree-4 monomial
/// representation near machine precision.
fn orthonormalize(gram_hi: &DMatrix<f64>, gram_lo: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let n = gram_hi.nrows();
    let dot = |a: &[f64], b: &[f64]| -> f64 {
        let (mut acc, mut comp) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let ag = a[i] * gram_hi[(i, j)];
                let ag_err = a[i].mul_add(gram_hi[(i, j)], -ag);
                comp_fma(&mut acc, &mut comp, ag, b[j]);
                comp += (ag_err + a[i] * gram_lo[(i, j)]) * b[j];
            }
        }
        acc + comp
    };
    let mut c: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            v
        })
        .collect();
    for i in 0..n {
        for _pass in 0..2 {
            for j in 0..i {
                let cj = c[j].clone();
                let r = dot(&cj, &c[i]);
                for (ci, &cjv) in c[i].iter_mut().zip(cj.iter()) {
                    *ci -= r * cjv;
                }
            }
        }
        let nrm = dot(&c[i], &c[i]).sqrt();
        for v in c[i].iter_mut() {
            *v /= nrm;
        }
    }
    // Residual Gram R = C^T G C is I + O(1e-12); replace C by C R^{-1/2}
    // via Cholesky R = L L^T, C <- C L^{-T}.
    let mut r = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            r[(i, j)] = dot(&c[i], &c[j]);
        }
    }
    let chol = r.cholesky().expect("basis Gram must stay positive definite");
    let lt_inv = chol
        .l()
        .transpose()
        .try_inverse()
        .expect("triangular factor is invertible");
    let mut polished = vec![vec![0.0; n]; n];
    for i in 0..n {
        for m in 0..n {
            let mut acc = 0.0;
            for (j, cj) in c.iter().enumerate() {
                acc += cj[m] * lt_inv[(j, i)];
            }
            polished[i][m] = acc;
        }
    }
    polished
}

impl TriangleBasis {
    pub fn new(degree: usize) -> Self {
        let mut monomials = Vec::new();
        for total in 0..=degree {
            for b in 0..=total {
                monomials.push((total - b, b));
            }
        }
        let n = monomials.len();
        let mut gram_hi = DMatrix::zeros(n, n);
        let mut gram_lo = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let (a1, b1) = monomials[i];
                let (a2, b2) = monomials[j];
                let (hi, lo) = triangle_monomial_integral_parts(a1 + a2, b1 + b2);
                gram_hi[(i, j)] = hi;
                gram_lo[(i, j)] = lo;
            }
        }
        let coeffs = orthonormalize(&gram_hi, &gram_lo);
        TriangleBasis {
            degree,
            dim: n,
            monomials,
            coeffs,
        }
    }

    fn monomial_table(&self, points: &[[f64; 2]]) -> DMatrix<f64> {
        let mut table = DMatrix::zeros(points.len(), self.monomials.len());
        for (p, &[x, y]) in points.iter().enumerate() {
            for (m, &(a, b)) in self.monomials.iter().enumerate() {
                table[(p, m)] = x.powi(a as i32) * y.powi(b as i32);
            }
        }
        table
    }

    /// Values at reference points; shape (num_points, dim).
    pub fn eval(&self, points: &[[f64; 2]]) -> DMatrix<f64> {
        let mono = self.monomial_table(points);
        let mut out = DMatrix::zeros(points.len(), self.dim);
        for i in 0..self.dim {
            for p in 0..points.len() {
                let (mut acc, mut comp) = (0.0, 0.0);
                for (m, &c) in self.coeffs[i].iter().enumerate() {
                    comp_fma(&mut acc, &mut comp, c, mono[(p, m)]);
                }
                out[(p, i)] = acc + comp;
            }
        }
        out
    }

    /// Reference-coordinate gradients at points; returns (d/dx, d/dy) tables.
    pub fn eval_grad(&self, points: &[[f64; 2]]) -> (DMatrix<f64>, DMatrix<f64>) {
        let np = points.len();
        let nm = self.monomials.len();
        let mut dx = DMatrix::zeros(np, nm);
        let mut dy = DMatrix::zeros(np, nm);
        for (p, &[x, y]) in points.iter().enumerate() {
            for (m, &(a, b)) in self.monomials.iter().enumerate() {
                if a > 0 {
                    dx[(p, m)] = a as f64 * x.powi(a as i32 - 1) * y.powi(b as i32);
                }
                if b > 0 {
                    dy[(p, m)] = b as f64 * x.powi(a as i32) * y.powi(b as i32 - 1);
                }
            }
        }
        let mut gx = DMatrix::zeros(np, self.dim);
        let mut gy = DMatrix::zeros(np, self.dim);
        for i in 0..self.dim {
            for p in 0..np {
                let (mut ax, mut cx) = (0.0, 0.0);
                let (mut ay, mut cy) = (0.0, 0.0);
                for (m, &c) in self.coeffs[i].iter().enumerate() {
                    comp_fma(&mut ax, &mut cx, c, dx[(p, m)]);
                    comp_fma(&mut ay, &mut cy, c, dy[(p, m)]);
                }
                gx[(p, i)] = ax + cx;
                gy[(p, i)] = ay + cy;
            }
        }
        (gx, gy)
    }
}

impl IntervalBasis {
    pub fn new(degree: usize) -> Self {
        let n = degree + 1;
        let mut gram_hi = DMatrix::zeros(n, n);
        let mut gram_lo = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let (hi, lo) = exact_ratio(1.0, (i + j + 1) as f64);
                gram_hi[(i, j)] = hi;
                gram_lo[(i, j)] = lo;
            }
        }
        let coeffs = orthonormalize(&gram_hi, &gram_lo);
        IntervalBasis {
            degree,
            dim: n,
            coeffs,
        }
    }

    /// Values at reference points in [0,1]; shape (num_points, dim).
    pub fn eval(&self, points: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(points.len(), self.dim);
        for (p, &s) in points.iter().enumerate() {
            let mut pows = vec![1.0; self.dim];
            for j in 1..self.dim {
                pows[j] = pows[j - 1] * s;
            }
            for i in 0..self.dim {
                let (mut acc, mut comp) = (0.0, 0.0);
                for (m, &c) in self.coeffs[i].iter().enumerate() {
                    comp_fma(&mut acc, &mut comp, c, pows[m]);
                }
                out[(p, i)] = acc + comp;
            }
        }
        out
    }
}

/// Affine map x = v0 + J x̂ from the reference triangle onto a physical
/// triangle with counterclockwise vertices (v0, v1, v2); det J = 2 * area > 0.
#[derive(Debug, Clone, Copy)]
pub struct ElementMap {
    pub origin: [f64; 2],
    pub jac: [[f64; 2]; 2],
    pub inv_jac: [[f64; 2]; 2],
    pub det: f64,
}

impl ElementMap {
    pub fn new(v0: [f64; 2], v1: [f64; 2], v2: [f64; 2]) -> Self {
        let jac = [
            [v1[0] - v0[0], v2[0] - v0[0]],
            [v1[1] - v0[1], v2[1] - v0[1]],
        ];
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        let inv_jac = [
            [jac[1][1] / det, -jac[0][1] / det],
            [-jac[1][0] / det, jac[0][0] / det],
        ];
        ElementMap {
            origin: v0,
            jac,
            inv_jac,
            det,
        }
    }

    pub fn area(&self) -> f64 {
        0.5 * self.det
    }

    pub fn to_physical(&self, xhat: [f64; 2]) -> [f64; 2] {
        [
            self.origin[0] + self.jac[0][0] * xhat[0] + self.jac[0][1] * xhat[1],
            self.origin[1] + self.jac[1][0] * xhat[0] + self.jac[1][1] * xhat[1],
        ]
    }

    pub fn to_reference(&self, x: [f64; 2]) -> [f64; 2] {
        let d = [x[0] - self.origin[0], x[1] - self.origin[1]];
        [
            self.inv_jac[0][0] * d[0] + self.inv_jac[0][1] * d[1],
            self.inv_jac[1][0] * d[0] + self.inv_jac[1][1] * d[1],
        ]
    }

    /// Physical gradient J^{-T} ĝ from a reference gradient ĝ.
    pub fn physical_grad(&self, ref_grad: [f64; 2]) -> [f64; 2] {
        [
            self.inv_jac[0][0] * ref_grad[0] + self.inv_jac[1][0] * ref_grad[1],
            self.inv_jac[0][1] * ref_grad[0] + self.inv_jac[1][1] * ref_grad[1],
        ]
    }
}

/// Arclength parameterization x(s) = a + s (b - a), s in [0,1], of a facet;
/// `a` must be the endpoint with the lower vertex id so both adjacent
/// elements derive the identical parameterization.
#[derive(Debug, Clone, Copy)]
pub struct FacetMap {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub len: f64,
    pub tangent: [f64; 2],
}

impl FacetMap {
    pub fn new(a: [f64; 2], b: [f64; 2]) -> Self {
        let d = [b[0] - a[0], b[1] - a[1]];
        let len = d[0].hypot(d[1]);
        FacetMap {
            a,
            b,
            len,
            tangent: [d[0] / len, d[1] / len],
        }
    }

    pub fn to_physical(&self, s: f64) -> [f64; 2] {
        [
            self.a[0] + s * (self.b[0] - self.a[0]),
            self.a[1] + s * (self.b[1] - self.a[1]),
        ]
    }
}
