//! Benchmark problems, error norms, convergence drivers, and artifacts.
//!
//! Two scenarios are provided: a smooth manufactured solution on the unit
//! square whose divergence shrinks like `1/(μ+λ)` (so it exercises the
//! locking-free regime), and the Barry–Mercer pulsating point-source
//! benchmark. Drivers initialize with elliptic projectors, run the BDF time
//! loop, evaluate the energy-norm and L² errors at the final time, and emit
//! CSV tables, VTK field files, and line samples.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::assembly::{
    apply_dirichlet_data, assemble_displacement_load, assemble_point_load,
    assemble_pressure_load, assemble_system, data_exactness, displacement_unknown_map,
    element_size, extend_with_data, facet_project_tangential, lift_rhs, pressure_unknown_map,
    AssembledSystem, AssemblyError, MaterialParams,
};
use crate::fe_spaces::{
    build_element_displacement_basis, build_space_set, build_space_set_with_policy,
    triangle_poly_dim, BoundaryPolicy, ElementDisplacementBasis, FeSpaceError, SpaceSet,
    Variant,
};
use crate::mesh::{Mesh, MeshError};
use crate::ref_elements::{interval_rule, triangle_rule, RefElementError, TriangleBasis};
use crate::sparse_linalg::{factorize, SparseError, SparseMatrix};
use crate::time_integration::{starting_values, SystemState, TimeIntegrationError, TimeStepper};

/// Errors from scenario drivers and artifact emission.
#[derive(Debug, Error)]
pub enum ScenarioError {
    /// The run configuration cannot be executed as stated.
    #[error("invalid run configuration: {0}")]
    InvalidRun(String),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    TimeIntegration(#[from] TimeIntegrationError),
    #[error(transparent)]
    Solver(#[from] SparseError),
    #[error(transparent)]
    FeSpace(#[from] FeSpaceError),
    #[error(transparent)]
    RefElement(#[from] RefElementError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("failed to write {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A closed-form reference solution with the derivatives the projectors and
/// error norms need. Gradients are row-major: `gradient[i][j] = ∂u_i/∂x_j`.
pub trait ExactSolution {
    fn pressure(&self, x: [f64; 2], t: f64) -> f64;
    fn pressure_gradient(&self, x: [f64; 2], t: f64) -> [f64; 2];
    fn displacement(&self, x: [f64; 2], t: f64) -> [f64; 2];
    fn displacement_gradient(&self, x: [f64; 2], t: f64) -> [[f64; 2]; 2];
    fn divergence(&self, x: [f64; 2], t: f64) -> f64 {
        let g = self.displacement_gradient(x, t);
        g[0][0] + g[1][1]
    }
}

/// Smooth benchmark solution on the unit square,
/// `p = e^{−t} sin(πx) sin(πy)` with a displacement whose divergence is
/// `π e^{−t} sin(π(x+y))/(μ+λ)`, so volumetric strain vanishes as `λ → ∞`.
#[derive(Debug, Clone, Copy)]
pub struct ManufacturedSolution {
    pub params: MaterialParams,
    gamma: f64,
}

impl ManufacturedSolution {
    pub const FINAL_TIME: f64 = 0.5;

    /// The production parameter set: `c_s = 0`, `α = 1`, `κ = 1`, `λ = 10⁵`,
    /// `μ = 1`, `τ₀ = 10`.
    pub fn standard() -> ManufacturedSolution {
        ManufacturedSolution::with_params(MaterialParams {
            c_s: 0.0,
            alpha: 1.0,
            kappa: 1.0,
            lambda: 1e5,
            mu: 1.0,
            tau0: 10.0,
        })
    }

    /// The same solution family at arbitrary parameters (the displacement is
    /// re-derived for the given `μ + λ`).
    pub fn with_params(params: MaterialParams) -> ManufacturedSolution {
        ManufacturedSolution { params, gamma: 1.0 / (params.mu + params.lambda) }
    }

    /// Flow source `f = c_s ṗ + α div(u̇) − div(κ∇p)`.
    pub fn pressure_load(&self, x: [f64; 2], t: f64) -> f64 {
        let p = self.params;
        let et = (-t).exp();
        let (sx, sy) = ((PI * x[0]).sin(), (PI * x[1]).sin());
        -p.c_s * et * sx * sy - p.alpha * PI * self.gamma * et * (PI * (x[0] + x[1])).sin()
            + 2.0 * PI * PI * p.kappa * et * sx * sy
    }

    /// Momentum source `g = −div(2μ∇_s u + λ div(u) I) + α∇p`.
    pub fn displacement_load(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        let p = self.params;
        let et = (-t).exp();
        let (sx, cx) = (PI * x[0]).sin_cos();
        let (sy, cy) = (PI * x[1]).sin_cos();
        let u = self.displacement(x, t);
        let cxy = (PI * (x[0] + x[1])).cos();
        let pi2 = PI * PI;
        [
            2.0 * p.mu * pi2 * u[0] - pi2 * et * cxy + p.alpha * PI * et * cx * sy,
            2.0 * p.mu * pi2 * u[1] - pi2 * et * cxy + p.alpha * PI * et * sx * cy,
        ]
    }
}

impl ExactSolution for ManufacturedSolution {
    fn pressure(&self, x: [f64; 2], t: f64) -> f64 {
        (-t).exp() * (PI * x[0]).sin() * (PI * x[1]).sin()
    }

    fn pressure_gradient(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        let et = (-t).exp();
        let (sx, cx) = (PI * x[0]).sin_cos();
        let (sy, cy) = (PI * x[1]).sin_cos();
        [PI * et * cx * sy, PI * et * sx * cy]
    }

    fn displacement(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        let et = (-t).exp();
        let (sx, cx) = (PI * x[0]).sin_cos();
        let (sy, cy) = (PI * x[1]).sin_cos();
        let bubble = self.gamma * et * sx * sy;
        [-et * cx * sy + bubble, et * sx * cy + bubble]
    }

    fn displacement_gradient(&self, x: [f64; 2], t: f64) -> [[f64; 2]; 2] {
        let et = (-t).exp();
        let (sx, cx) = (PI * x[0]).sin_cos();
        let (sy, cy) = (PI * x[1]).sin_cos();
        let g = self.gamma;
        [
            [PI * et * (sx * sy + g * cx * sy), PI * et * (-cx * cy + g * sx * cy)],
            [PI * et * (cx * cy + g * cx * sy), PI * et * (-sx * sy + g * sx * cy)],
        ]
    }

    fn divergence(&self, x: [f64; 2], t: f64) -> f64 {
        // Closed form: the two O(1) gradient entries cancel exactly.
        self.gamma * PI * (-t).exp() * (PI * (x[0] + x[1])).sin()
    }
}

/// Steady global polynomial solutions with `p ∈ P^k` and `u ∈ [P^{k+1}]²`,
/// the exact members of the discrete spaces used by the patch tests.
#[derive(Debug, Clone, Copy)]
pub struct PolynomialSolution {
    pub k: usize,
}

impl PolynomialSolution {
    pub fn new(k: usize) -> PolynomialSolution {
        assert!((1..=3).contains(&k), "patch-test polynomials cover degrees 1 through 3");
        PolynomialSolution { k }
    }

    fn pressure_laplacian(&self, x: [f64; 2]) -> f64 {
        match self.k {
            1 => 0.0,
            2 => 6.0,
            _ => 2.0 * x[0] + 6.0 * x[1],
        }
    }

    fn displacement_laplacian(&self, x: [f64; 2]) -> [f64; 2] {
        match self.k {
            1 => [2.0, 0.0],
            2 => [6.0 * x[0] + 2.0, 8.0 * x[1]],
            _ => [14.0 * x[0] * x[0] - 10.0 * x[1] * x[1], 4.0],
        }
    }

    fn divergence_gradient(&self, x: [f64; 2]) -> [f64; 2] {
        match self.k {
            1 => [3.0, 0.0],
            2 => [8.0 * x[0], 6.0 * x[1] - 2.0],
            _ => [15.0 * x[0] * x[0] - x[1] * x[1], -2.0 * x[0] * x[1] + 4.0],
        }
    }

    /// Steady flow source `f = −κΔp`.
    pub fn pressure_load(&self, params: &MaterialParams, x: [f64; 2]) -> f64 {
        -params.kappa * self.pressure_laplacian(x)
    }

    /// Steady momentum source `g = −μΔu − (μ+λ)∇div(u) + α∇p`.
    pub fn displacement_load(&self, params: &MaterialParams, x: [f64; 2]) -> [f64; 2] {
        let lap = self.displacement_laplacian(x);
        let dg = self.divergence_gradient(x);
        let gp = self.pressure_gradient(x, 0.0);
        let c = params.mu + params.lambda;
        [
            -params.mu * lap[0] - c * dg[0] + params.alpha * gp[0],
            -params.mu * lap[1] - c * dg[1] + params.alpha * gp[1],
        ]
    }
}

impl ExactSolution for PolynomialSolution {
    fn pressure(&self, x: [f64; 2], _t: f64) -> f64 {
        let (x0, y) = (x[0], x[1]);
        match self.k {
            1 => 1.0 + 2.0 * x0 - y,
            2 => x0 * x0 - x0 * y + 2.0 * y * y + x0 - 1.0,
            _ => x0.powi(3) - 2.0 * x0 * y * y + y.powi(3) + x0 * y,
        }
    }

    fn pressure_gradient(&self, x: [f64; 2], _t: f64) -> [f64; 2] {
        let (x0, y) = (x[0], x[1]);
        match self.k {
            1 => [2.0, -1.0],
            2 => [2.0 * x0 - y + 1.0, -x0 + 4.0 * y],
            _ => [3.0 * x0 * x0 - 2.0 * y * y + y, -4.0 * x0 * y + 3.0 * y * y + x0],
        }
    }

    fn displacement(&self, x: [f64; 2], _t: f64) -> [f64; 2] {
        let (x0, y) = (x[0], x[1]);
        match self.k {
            1 => [x0 * x0 - y, x0 * y + 2.0 * y],
            2 => [x0.powi(3) - 2.0 * x0 * y + y * y, x0 * x0 * y + y.powi(3) - x0 + 1.0],
            _ => [
                x0.powi(4) - y.powi(4) + x0 * x0 * y * y,
                x0.powi(3) * y - x0 * y.powi(3) + 2.0 * y * y - x0,
            ],
        }
    }

    fn displacement_gradient(&self, x: [f64; 2], _t: f64) -> [[f64; 2]; 2] {
        let (x0, y) = (x[0], x[1]);
        match self.k {
            1 => [[2.0 * x0, -1.0], [y, x0 + 2.0]],
            2 => [
                [3.0 * x0 * x0 - 2.0 * y, -2.0 * x0 + 2.0 * y],
                [2.0 * x0 * y - 1.0, x0 * x0 + 3.0 * y * y],
            ],
            _ => [
                [4.0 * x0.powi(3) + 2.0 * x0 * y * y, -4.0 * y.powi(3) + 2.0 * x0 * x0 * y],
                [3.0 * x0 * x0 * y - y.powi(3) - 1.0, x0.powi(3) - 3.0 * x0 * y * y + 4.0 * y],
            ],
        }
    }
}

/// Solves the two restricted systems `K_uu x = (load − K·data)|_unknowns` and
/// scatters the solution into `full` at the mapped slots.
fn lifted_field_solve(
    matrix: &SparseMatrix,
    space: &SpaceSet,
    map: &[Option<usize>],
    n: usize,
    rhs_full: &[f64],
    data: &[f64],
    full: &mut [f64],
) -> Result<(), ScenarioError> {
    let rhs_unknowns = lift_rhs(matrix, space, rhs_full, data);
    let sub = matrix.restrict(map, n);
    let mut rhs = vec![0.0; n];
    for (i, &r) in rhs_unknowns.iter().enumerate() {
        if let Some(j) = map[i] {
            rhs[j] = r;
        }
    }
    let x = factorize(&sub)?.solve(&rhs)?;
    for i in 0..space.num_unknowns() {
        if let Some(j) = map[i] {
            full[i] = x[j];
        }
    }
    Ok(())
}

/// Elliptic projection of an exact solution at time `t`: the pressure pair
/// solves the diffusion form against the exact flux data, then the
/// displacement pair solves the elasticity form with the pressure-projection
/// defect entering through the coupling term. Exact boundary traces are
/// lifted as Dirichlet data.
pub fn elliptic_project(
    mesh: &Mesh,
    space: &SpaceSet,
    system: &AssembledSystem,
    exact: &dyn ExactSolution,
    t: f64,
) -> Result<SystemState, ScenarioError> {
    let k = space.k;
    let np = triangle_poly_dim(k);
    let params = &system.params;
    let tri = TriangleBasis::new(k);
    let vol_rule = triangle_rule(data_exactness(k))?;
    let facet_rule = interval_rule(data_exactness(k))?;
    let (gxi_vol, geta_vol) = tri.eval_grad(&vol_rule.points);
    let phi_vol = tri.eval(&vol_rule.points);
    let q_vals = space.facet_basis.eval(&facet_rule.points);

    let data = apply_dirichlet_data(
        mesh,
        space,
        |x| exact.pressure(x, t),
        |x| exact.displacement(x, t),
    )?;

    // Pressure projection: a_h(Π̲p, w̲) = Σ_T ∫κ∇p·∇w − ∫_∂T κ∇p·n (w − ŵ).
    let mut rhs_p = vec![0.0; space.num_slots()];
    for e in 0..mesh.num_elements() {
        let map = mesh.element_map(e);
        let sqrt_det = map.det.sqrt();
        let inv_sqrt_det = 1.0 / sqrt_det;
        let pv = space.pressure_volume_block(e);
        let pv_idx: Vec<usize> = (0..np).map(|a| space.combined_index(pv.slot(a))).collect();
        for (q, &pt) in vol_rule.points.iter().enumerate() {
            let gp = exact.pressure_gradient(map.to_physical(pt), t);
            let w = vol_rule.weights[q] * params.kappa * sqrt_det;
            for (a, &idx) in pv_idx.iter().enumerate() {
                let g = map.physical_grad([gxi_vol[(q, a)], geta_vol[(q, a)]]);
                rhs_p[idx] += w * (gp[0] * g[0] + gp[1] * g[1]);
            }
        }
        for facet_use in &mesh.element_to_facets[e] {
            let f = facet_use.facet;
            let fm = mesh.facet_map(f);
            let n_out = [
                facet_use.sign * mesh.facets[f].normal[0],
                facet_use.sign * mesh.facets[f].normal[1],
            ];
            let ph = space.pressure_facet_block(f);
            let inv_sqrt_len = 1.0 / fm.len.sqrt();
            for (q, &s) in facet_rule.points.iter().enumerate() {
                let x = fm.to_physical(s);
                let gp = exact.pressure_gradient(x, t);
                let flux = params.kappa * (gp[0] * n_out[0] + gp[1] * n_out[1]);
                let wl = facet_rule.weights[q] * fm.len;
                let tr = tri.eval(&[map.to_reference(x)]);
                for (a, &idx) in pv_idx.iter().enumerate() {
                    rhs_p[idx] -= wl * flux * tr[(0, a)] * inv_sqrt_det;
                }
                for j in 0..k {
                    rhs_p[space.combined_index(ph.slot(j))] +=
                        wl * flux * q_vals[(q, j)] * inv_sqrt_len;
                }
            }
        }
    }
    let mut full = extend_with_data(space, &vec![0.0; space.num_unknowns()], &data);
    let (pmap, pn) = pressure_unknown_map(space);
    lifted_field_solve(&system.a, space, &pmap, pn, &rhs_p, &data, &mut full)?;

    // Displacement projection: b_h(Π̲u, v̲) = Σ_T ∫2μ∇_s u:∇_s v + λ div u div v
    // − ∫_∂T 2μ(∇_s u n)·[[v̲^t]], plus the coupling defect (Πp − p, α div v).
    let mut rhs_u = vec![0.0; space.num_slots()];
    for e in 0..mesh.num_elements() {
        let map = mesh.element_map(e);
        let inv_sqrt_det = 1.0 / map.det.sqrt();
        let basis = build_element_displacement_basis(mesh, space, e)?;
        let slots: Vec<usize> = space
            .displacement_slots(e)
            .into_iter()
            .map(|s| space.combined_index(s))
            .collect();
        let pv = space.pressure_volume_block(e);
        let grads = basis.gradients(&vol_rule.points);
        for (q, &pt) in vol_rule.points.iter().enumerate() {
            let x = map.to_physical(pt);
            let gu = exact.displacement_gradient(x, t);
            let div_u = exact.divergence(x, t);
            let (exx, eyy) = (gu[0][0], gu[1][1]);
            let exy = 0.5 * (gu[0][1] + gu[1][0]);
            let mut p_proj = 0.0;
            for a in 0..np {
                p_proj += full[space.combined_index(pv.slot(a))] * phi_vol[(q, a)];
            }
            p_proj *= inv_sqrt_det;
            let defect = params.alpha * (p_proj - exact.pressure(x, t));
            let w = vol_rule.weights[q] * map.det;
            for (j, &slot) in slots.iter().enumerate() {
                let jxx = grads.xx[(q, j)];
                let jyy = grads.yy[(q, j)];
                let jxy = 0.5 * (grads.xy[(q, j)] + grads.yx[(q, j)]);
                let jdiv = jxx + jyy;
                rhs_u[slot] += w
                    * (2.0 * params.mu * (exx * jxx + eyy * jyy + 2.0 * exy * jxy)
                        + params.lambda * div_u * jdiv
                        + defect * jdiv);
            }
        }
        for facet_use in &mesh.element_to_facets[e] {
            let f = facet_use.facet;
            let fm = mesh.facet_map(f);
            let n_out = [
                facet_use.sign * mesh.facets[f].normal[0],
                facet_use.sign * mesh.facets[f].normal[1],
            ];
            let tangent = fm.tangent;
            let tb = space.tangential_block(f);
            let inv_sqrt_len = 1.0 / fm.len.sqrt();
            let pts_ref: Vec<[f64; 2]> = facet_rule
                .points
                .iter()
                .map(|&s| map.to_reference(fm.to_physical(s)))
                .collect();
            let fvals = basis.values(&pts_ref);
            for (q, &s) in facet_rule.points.iter().enumerate() {
                let x = fm.to_physical(s);
                let gu = exact.displacement_gradient(x, t);
                let (exx, eyy) = (gu[0][0], gu[1][1]);
                let exy = 0.5 * (gu[0][1] + gu[1][0]);
                // (2μ ∇_s(u) n)·t: the traction component along the facet.
                let tx = exx * n_out[0] + exy * n_out[1];
                let ty = exy * n_out[0] + eyy * n_out[1];
                let snt = 2.0 * params.mu * (tx * tangent[0] + ty * tangent[1]);
                let wl = facet_rule.weights[q] * fm.len;
                for (j, &slot) in slots.iter().enumerate() {
                    let vt = fvals.x[(q, j)] * tangent[0] + fvals.y[(q, j)] * tangent[1];
                    rhs_u[slot] -= wl * snt * vt;
                }
                for i in 0..tb.count {
                    rhs_u[space.combined_index(tb.slot(i))] +=
                        wl * snt * q_vals[(q, i)] * inv_sqrt_len;
                }
            }
        }
    }
    let (umap, un) = displacement_unknown_map(space);
    lifted_field_solve(&system.b, space, &umap, un, &rhs_u, &data, &mut full)?;

    Ok(SystemState::from_full(space, t, &full))
}

/// Solves the steady coupled problem with analytic loads and traces: the
/// diffusion solve determines the pressure pair, then the elasticity solve
/// balances the momentum load plus the pressure coupling.
pub fn solve_steady(
    mesh: &Mesh,
    space: &SpaceSet,
    system: &AssembledSystem,
    f: impl Fn([f64; 2]) -> f64,
    g: impl Fn([f64; 2]) -> [f64; 2],
    p_trace: impl Fn([f64; 2]) -> f64,
    u_trace: impl Fn([f64; 2]) -> [f64; 2],
) -> Result<SystemState, ScenarioError> {
    let data = apply_dirichlet_data(mesh, space, p_trace, u_trace)?;
    let f_load = assemble_pressure_load(mesh, space, f)?;
    let mut full = extend_with_data(space, &vec![0.0; space.num_unknowns()], &data);
    let (pmap, pn) = pressure_unknown_map(space);
    lifted_field_solve(&system.a, space, &pmap, pn, &f_load, &data, &mut full)?;

    let g_load = assemble_displacement_load(mesh, space, g)?;
    let cp = system.c.matvec(&full);
    let g_total: Vec<f64> = (0..space.num_slots()).map(|i| g_load[i] + cp[i]).collect();
    let (umap, un) = displacement_unknown_map(space);
    lifted_field_solve(&system.b, space, &umap, un, &g_total, &data, &mut full)?;
    Ok(SystemState::from_full(space, 0.0, &full))
}

/// Final-time error norms of a discrete state against an exact solution:
/// the combined energy norm `(c_s‖p−p_h‖² + ‖u̲−u̲_h‖²_{μ,h}
/// + λ‖div(u−u_h)‖²)^{1/2}` and the plain L² errors of both fields.
#[derive(Debug, Clone, Copy)]
pub struct ErrorNorms {
    pub triple: f64,
    pub l2_u: f64,
    pub l2_p: f64,
}

pub fn compute_error_norms(
    mesh: &Mesh,
    space: &SpaceSet,
    params: &MaterialParams,
    state: &SystemState,
    exact: &dyn ExactSolution,
) -> Result<ErrorNorms, ScenarioError> {
    let k = space.k;
    let np = triangle_poly_dim(k);
    let t = state.time;
    let full = state.to_full(space);
    let tri = TriangleBasis::new(k);
    let vol_rule = triangle_rule(data_exactness(k))?;
    let phi_vol = tri.eval(&vol_rule.points);
    let facet_rule = &space.facet_rule;

    let mut triple_sq = 0.0;
    let mut l2_u_sq = 0.0;
    let mut l2_p_sq = 0.0;
    for e in 0..mesh.num_elements() {
        let map = mesh.element_map(e);
        let inv_sqrt_det = 1.0 / map.det.sqrt();
        let h_t = element_size(mesh, e);
        let basis = build_element_displacement_basis(mesh, space, e)?;
        let slots: Vec<usize> = space
            .displacement_slots(e)
            .into_iter()
            .map(|s| space.combined_index(s))
            .collect();
        let coeffs: Vec<f64> = slots.iter().map(|&s| full[s]).collect();
        let pv = space.pressure_volume_block(e);
        let p_coeffs: Vec<f64> =
            (0..np).map(|a| full[space.combined_index(pv.slot(a))]).collect();

        let vals = basis.values(&vol_rule.points);
        let grads = basis.gradients(&vol_rule.points);
        for (q, &pt) in vol_rule.points.iter().enumerate() {
            let x = map.to_physical(pt);
            let w = vol_rule.weights[q] * map.det;

            let mut p_h = 0.0;
            for a in 0..np {
                p_h += p_coeffs[a] * phi_vol[(q, a)];
            }
            p_h *= inv_sqrt_det;
            let ep = exact.pressure(x, t) - p_h;
            l2_p_sq += w * ep * ep;
            triple_sq += params.c_s * w * ep * ep;

            let (mut uhx, mut uhy) = (0.0, 0.0);
            let (mut gxx, mut gxy, mut gyx, mut gyy) = (0.0, 0.0, 0.0, 0.0);
            for (j, &c) in coeffs.iter().enumerate() {
                uhx += c * vals.x[(q, j)];
                uhy += c * vals.y[(q, j)];
                gxx += c * grads.xx[(q, j)];
                gxy += c * grads.xy[(q, j)];
                gyx += c * grads.yx[(q, j)];
                gyy += c * grads.yy[(q, j)];
            }
            let u = exact.displacement(x, t);
            let (eux, euy) = (u[0] - uhx, u[1] - uhy);
            l2_u_sq += w * (eux * eux + euy * euy);

            let gu = exact.displacement_gradient(x, t);
            let exx = gu[0][0] - gxx;
            let eyy = gu[1][1] - gyy;
            let exy = 0.5 * (gu[0][1] + gu[1][0]) - 0.5 * (gxy + gyx);
            triple_sq +=
                w * 2.0 * params.mu * (exx * exx + eyy * eyy + 2.0 * exy * exy);
            let ediv = exact.divergence(x, t) - (gxx + gyy);
            triple_sq += w * params.lambda * ediv * ediv;
        }

        // Facet term (2μ/h_T)‖Π_V̂ [[ε^t]]‖²: the exact trace cancels between
        // the volume and facet parts of the error, leaving û_h − (u_h·t).
        for facet_use in &mesh.element_to_facets[e] {
            let f = facet_use.facet;
            let fm = mesh.facet_map(f);
            let tangent = fm.tangent;
            let tb = space.tangential_block(f);
            let pts_ref: Vec<[f64; 2]> = facet_rule
                .points
                .iter()
                .map(|&s| map.to_reference(fm.to_physical(s)))
                .collect();
            let fvals = basis.values(&pts_ref);
            let traces: Vec<f64> = (0..facet_rule.points.len())
                .map(|q| {
                    let (mut vx, mut vy) = (0.0, 0.0);
                    for (j, &c) in coeffs.iter().enumerate() {
                        vx += c * fvals.x[(q, j)];
                        vy += c * fvals.y[(q, j)];
                    }
                    vx * tangent[0] + vy * tangent[1]
                })
                .collect();
            let proj = facet_project_tangential(space, fm.len, facet_rule, &traces);
            let mut jump_sq = 0.0;
            for (i, &pi) in proj.iter().enumerate() {
                let d = full[space.combined_index(tb.slot(i))] - pi;
                jump_sq += d * d;
            }
            triple_sq += 2.0 * params.mu / h_t * jump_sq;
        }
    }
    Ok(ErrorNorms { triple: triple_sq.sqrt(), l2_u: l2_u_sq.sqrt(), l2_p: l2_p_sq.sqrt() })
}

/// One row of a convergence table.
#[derive(Debug, Clone)]
pub struct ErrorRow {
    pub h_label: String,
    pub n: usize,
    pub errors: ErrorNorms,
    pub order_triple: Option<f64>,
    pub order_u: Option<f64>,
    pub order_p: Option<f64>,
}

/// A convergence table over uniformly refined meshes.
#[derive(Debug, Clone, Default)]
pub struct ErrorReport {
    pub rows: Vec<ErrorRow>,
}

impl ErrorReport {
    /// Appends a row, computing observed orders against the previous row
    /// when it exists and the refinement is an exact halving.
    pub fn push(&mut self, n: usize, errors: ErrorNorms) {
        let order = |prev: f64, cur: f64| (prev / cur).log2();
        let orders = self.rows.last().filter(|r| 2 * r.n == n).map(|r| {
            (
                order(r.errors.triple, errors.triple),
                order(r.errors.l2_u, errors.l2_u),
                order(r.errors.l2_p, errors.l2_p),
            )
        });
        self.rows.push(ErrorRow {
            h_label: format!("1/{n}"),
            n,
            errors,
            order_triple: orders.map(|o| o.0),
            order_u: orders.map(|o| o.1),
            order_p: orders.map(|o| o.2),
        });
    }
}

/// Scientific notation with four significant digits and a two-digit
/// exponent, the table format of the convergence studies.
fn sci4(v: f64) -> String {
    let s = format!("{v:.3e}");
    let (mantissa, exp) = s.split_once('e').expect("exponential format");
    let e: i32 = exp.parse().expect("exponent");
    format!("{mantissa}e{}{:02}", if e < 0 { "-" } else { "+" }, e.abs())
}

/// Formats a report with the schema
/// `h,err_triple,order_triple,err_l2_u,order_u,err_l2_p,order_p`; orders are
/// blank where undefined (the first row).
pub fn format_csv(report: &ErrorReport) -> String {
    let mut out = String::from("h,err_triple,order_triple,err_l2_u,order_u,err_l2_p,order_p\n");
    let fmt_order = |o: Option<f64>| o.map(|v| format!("{v:.2}")).unwrap_or_default();
    for row in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.h_label,
            sci4(row.errors.triple),
            fmt_order(row.order_triple),
            sci4(row.errors.l2_u),
            fmt_order(row.order_u),
            sci4(row.errors.l2_p),
            fmt_order(row.order_p),
        )
        .expect("write to string");
    }
    out
}

/// Writes a report as CSV.
pub fn emit_csv(report: &ErrorReport, path: &Path) -> Result<(), ScenarioError> {
    fs::write(path, format_csv(report))
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })
}

/// Time-loop configuration for one mesh level of the smooth benchmark.
#[derive(Debug, Clone, Copy)]
pub struct RunConfig {
    pub k: usize,
    /// Mesh resolution; `h = 1/n`.
    pub n: usize,
    /// BDF order.
    pub m: usize,
    pub variant: Variant,
    /// Nominal step size; `None` selects `Δt = h^{max{(k+1)/3, 1}}`. The
    /// nominal value is rounded so that the final time is an exact multiple.
    pub dt: Option<f64>,
    pub final_time: f64,
}

/// Outcome of one time-loop run.
#[derive(Debug, Clone, Copy)]
pub struct RunOutcome {
    pub errors: ErrorNorms,
    pub dt: f64,
    pub steps: usize,
}

/// Runs the smooth benchmark on one mesh: elliptic-projector initial data,
/// BDF stepping to the final time, error norms at the final time.
pub fn run_manufactured(
    config: &RunConfig,
    ms: &ManufacturedSolution,
) -> Result<RunOutcome, ScenarioError> {
    let mesh = Mesh::build_uniform_unit_square(config.n);
    let space = build_space_set(&mesh, config.k, config.variant)?;
    let system = assemble_system(&mesh, &space, ms.params)?;

    let h = 1.0 / config.n as f64;
    let exponent = ((config.k + 1) as f64 / 3.0).max(1.0);
    let dt_nominal = config.dt.unwrap_or_else(|| h.powf(exponent));
    let steps = ((config.final_time / dt_nominal).round() as usize).max(1);
    let dt = config.final_time / steps as f64;
    if steps + 1 < config.m {
        return Err(ScenarioError::InvalidRun(format!(
            "a time grid of {} points cannot hold {} starting values",
            steps + 1,
            config.m
        )));
    }

    let loads_at = |t: f64| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), AssemblyError> {
        let f = assemble_pressure_load(&mesh, &space, |x| ms.pressure_load(x, t))?;
        let g = assemble_displacement_load(&mesh, &space, |x| ms.displacement_load(x, t))?;
        let data = apply_dirichlet_data(
            &mesh,
            &space,
            |x| ms.pressure(x, t),
            |x| ms.displacement(x, t),
        )?;
        Ok((f, g, data))
    };

    let initial = elliptic_project(&mesh, &space, &system, ms, 0.0)?;
    let mut history = starting_values(&space, &system, config.m, dt, initial, loads_at)?;
    let mut stepper = TimeStepper::new(&space, &system, config.m, dt)?;
    for step in config.m..=steps {
        let t_new = step as f64 * dt;
        let (f, g, data) = loads_at(t_new)?;
        let state = stepper.bdf_step(&history, &f, &g, &data, t_new)?;
        if history.len() == config.m {
            history.remove(0);
        }
        history.push(state);
    }
    let final_state = history.last().expect("at least the initial state");
    let errors = compute_error_norms(&mesh, &space, &ms.params, final_state, ms)?;
    Ok(RunOutcome { errors, dt, steps })
}

/// Runs the smooth benchmark over a sequence of mesh resolutions and collects
/// the convergence table.
pub fn run_convergence_study(
    k: usize,
    ns: &[usize],
    m: usize,
    variant: Variant,
    ms: &ManufacturedSolution,
) -> Result<ErrorReport, ScenarioError> {
    let mut report = ErrorReport::default();
    for &n in ns {
        let outcome = run_manufactured(
            &RunConfig {
                k,
                n,
                m,
                variant,
                dt: None,
                final_time: ManufacturedSolution::FINAL_TIME,
            },
            ms,
        )?;
        report.push(n, outcome.errors);
    }
    Ok(report)
}

/// Runs the smooth benchmark on one fixed mesh for each step size in `dts`,
/// returning the final-time errors; the temporal-order harness.
pub fn run_temporal_study(
    k: usize,
    n: usize,
    m: usize,
    dts: &[f64],
    ms: &ManufacturedSolution,
) -> Result<Vec<ErrorNorms>, ScenarioError> {
    dts.iter()
        .map(|&dt| {
            run_manufactured(
                &RunConfig {
                    k,
                    n,
                    m,
                    variant: Variant::Standard,
                    dt: Some(dt),
                    final_time: ManufacturedSolution::FINAL_TIME,
                },
                ms,
            )
            .map(|o| o.errors)
        })
        .collect()
}

/// Point evaluator for discrete states: builds the per-element bases once and
/// averages point values over all elements whose closure contains the point.
pub struct FieldSampler<'a> {
    mesh: &'a Mesh,
    space: &'a SpaceSet,
    pressure_basis: TriangleBasis,
    bases: Vec<ElementDisplacementBasis>,
}

impl<'a> FieldSampler<'a> {
    pub fn new(mesh: &'a Mesh, space: &'a SpaceSet) -> Result<FieldSampler<'a>, ScenarioError> {
        let bases = (0..mesh.num_elements())
            .map(|e| build_element_displacement_basis(mesh, space, e))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FieldSampler { mesh, space, pressure_basis: TriangleBasis::new(space.k), bases })
    }

    fn pressure_in(&self, e: usize, x: [f64; 2], full: &[f64]) -> f64 {
        let map = self.mesh.element_map(e);
        let phi = self.pressure_basis.eval(&[map.to_reference(x)]);
        let pv = self.space.pressure_volume_block(e);
        let mut p = 0.0;
        for a in 0..pv.count {
            p += full[self.space.combined_index(pv.slot(a))] * phi[(0, a)];
        }
        p / map.det.sqrt()
    }

    fn displacement_in(&self, e: usize, x: [f64; 2], full: &[f64]) -> [f64; 2] {
        let basis = &self.bases[e];
        let vals = basis.values(&[basis.map().to_reference(x)]);
        let mut u = [0.0, 0.0];
        for (j, slot) in self.space.displacement_slots(e).into_iter().enumerate() {
            let c = full[self.space.combined_index(slot)];
            u[0] += c * vals.x[(0, j)];
            u[1] += c * vals.y[(0, j)];
        }
        u
    }

    /// Pressure at a point, averaged over the containing elements.
    pub fn pressure(&self, x: [f64; 2], full: &[f64]) -> Result<f64, ScenarioError> {
        let hits = self.mesh.locate_point(x)?;
        let sum: f64 = hits.iter().map(|&e| self.pressure_in(e, x, full)).sum();
        Ok(sum / hits.len() as f64)
    }

    /// Displacement at a point, averaged over the containing elements.
    pub fn displacement(&self, x: [f64; 2], full: &[f64]) -> Result<[f64; 2], ScenarioError> {
        let hits = self.mesh.locate_point(x)?;
        let mut u = [0.0, 0.0];
        for &e in &hits {
            let v = self.displacement_in(e, x, full);
            u[0] += v[0];
            u[1] += v[1];
        }
        Ok([u[0] / hits.len() as f64, u[1] / hits.len() as f64])
    }
}

/// One sample of both fields at a point.
#[derive(Debug, Clone, Copy)]
pub struct LineSample {
    pub x: [f64; 2],
    pub pressure: f64,
    pub displacement: [f64; 2],
}

/// Samples both fields at `count` equispaced points on the segment `a`–`b`.
pub fn sample_line(
    sampler: &FieldSampler,
    state: &SystemState,
    a: [f64; 2],
    b: [f64; 2],
    count: usize,
) -> Result<Vec<LineSample>, ScenarioError> {
    assert!(count >= 2, "a line sample needs at least its endpoints");
    let full = state.to_full(sampler.space);
    (0..count)
        .map(|i| {
            let s = i as f64 / (count - 1) as f64;
            let x = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])];
            Ok(LineSample {
                x,
                pressure: sampler.pressure(x, &full)?,
                displacement: sampler.displacement(x, &full)?,
            })
        })
        .collect()
}

/// Writes a legacy ASCII VTK unstructured grid: cell-averaged pressure,
/// vertex-sampled displacement vectors, and (optionally) vertex coordinates
/// displaced by the solution.
pub fn emit_vtk(
    mesh: &Mesh,
    space: &SpaceSet,
    state: &SystemState,
    path: &Path,
    deformed: bool,
) -> Result<(), ScenarioError> {
    let full = state.to_full(space);
    let k = space.k;
    let np = triangle_poly_dim(k);
    let tri = TriangleBasis::new(k);
    let rule = triangle_rule(2 * k)?;
    let phi = tri.eval(&rule.points);

    // Vertex displacements: evaluate per element at its corners and average
    // the contributions of all incident elements.
    let nv = mesh.vertices.len();
    let mut u_sum = vec![[0.0f64; 2]; nv];
    let mut u_count = vec![0usize; nv];
    let mut p_cells = Vec::with_capacity(mesh.num_elements());
    let corners = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    for e in 0..mesh.num_elements() {
        let map = mesh.element_map(e);
        let basis = build_element_displacement_basis(mesh, space, e)?;
        let vals = basis.values(&corners);
        let slots = space.displacement_slots(e);
        for (c, &v) in mesh.triangles[e].iter().enumerate() {
            let mut u = [0.0, 0.0];
            for (j, &slot) in slots.iter().enumerate() {
                let coeff = full[space.combined_index(slot)];
                u[0] += coeff * vals.x[(c, j)];
                u[1] += coeff * vals.y[(c, j)];
            }
            u_sum[v][0] += u[0];
            u_sum[v][1] += u[1];
            u_count[v] += 1;
        }

        let pv = space.pressure_volume_block(e);
        let inv_sqrt_det = 1.0 / map.det.sqrt();
        let mut mean = 0.0;
        let mut area_ref = 0.0;
        for (q, &w) in rule.weights.iter().enumerate() {
            let mut p = 0.0;
            for a in 0..np {
                p += full[space.combined_index(pv.slot(a))] * phi[(q, a)];
            }
            mean += w * p * inv_sqrt_det;
            area_ref += w;
        }
        p_cells.push(mean / area_ref);
    }

    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    out.push_str("biot-hdg fields\n");
    out.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
    writeln!(out, "POINTS {nv} double").expect("string write");
    for (v, pos) in mesh.vertices.iter().enumerate() {
        let u = [u_sum[v][0] / u_count[v] as f64, u_sum[v][1] / u_count[v] as f64];
        let (x, y) = if deformed { (pos[0] + u[0], pos[1] + u[1]) } else { (pos[0], pos[1]) };
        writeln!(out, "{x} {y} 0.0").expect("string write");
    }
    writeln!(out, "CELLS {} {}", mesh.num_elements(), 4 * mesh.num_elements())
        .expect("string write");
    for t in &mesh.triangles {
        writeln!(out, "3 {} {} {}", t[0], t[1], t[2]).expect("string write");
    }
    writeln!(out, "CELL_TYPES {}", mesh.num_elements()).expect("string write");
    for _ in 0..mesh.num_elements() {
        out.push_str("5\n");
    }
    writeln!(out, "CELL_DATA {}", mesh.num_elements()).expect("string write");
    out.push_str("SCALARS pressure double 1\nLOOKUP_TABLE default\n");
    for p in &p_cells {
        writeln!(out, "{p}").expect("string write");
    }
    writeln!(out, "POINT_DATA {nv}").expect("string write");
    out.push_str("VECTORS displacement double\n");
    for v in 0..nv {
        let u = [u_sum[v][0] / u_count[v] as f64, u_sum[v][1] / u_count[v] as f64];
        writeln!(out, "{} {} 0.0", u[0], u[1]).expect("string write");
    }
    fs::write(path, out)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })
}

/// The Barry–Mercer benchmark: a pulsating point source on the unit square,
/// drained (`p̂ = 0`) and tangentially clamped on all of the boundary, with
/// the facet-normal displacement left free.
#[derive(Debug, Clone, Copy)]
pub struct BarryMercerConfig {
    pub a: f64,
    pub b: f64,
    pub young: f64,
    pub poisson: f64,
    pub kappa: f64,
    pub c_s: f64,
    pub alpha: f64,
    pub tau0: f64,
    pub x0: [f64; 2],
}

impl Default for BarryMercerConfig {
    fn default() -> BarryMercerConfig {
        BarryMercerConfig {
            a: 1.0,
            b: 1.0,
            young: 1e5,
            poisson: 0.1,
            kappa: 1e-2,
            c_s: 0.0,
            alpha: 1.0,
            tau0: 10.0,
            x0: [0.25, 0.25],
        }
    }
}

impl BarryMercerConfig {
    pub fn mu(&self) -> f64 {
        self.young / (2.0 * (1.0 + self.poisson))
    }

    pub fn lambda(&self) -> f64 {
        self.young * self.poisson / ((1.0 - 2.0 * self.poisson) * (1.0 + self.poisson))
    }

    /// Source frequency `β = (λ + 2μ)κ/(ab)`, recomputed from constituents.
    pub fn beta(&self) -> f64 {
        (self.lambda() + 2.0 * self.mu()) * self.kappa / (self.a * self.b)
    }

    /// The benchmark's step size `Δt = π/(20β)`.
    pub fn dt(&self) -> f64 {
        PI / (20.0 * self.beta())
    }

    pub fn material_params(&self) -> MaterialParams {
        MaterialParams {
            c_s: self.c_s,
            alpha: self.alpha,
            kappa: self.kappa,
            lambda: self.lambda(),
            mu: self.mu(),
            tau0: self.tau0,
        }
    }
}

/// A captured Barry–Mercer time level.
pub struct BarryMercerSnapshot {
    /// Normalized time `t̂ = βt`.
    pub normalized_time: f64,
    pub step: usize,
    pub state: SystemState,
    pub pressure_at_source: f64,
    /// Samples along the main diagonal (0,0)–(1,1).
    pub diagonal: Vec<LineSample>,
}

/// The mesh, spaces, and captured snapshots of a Barry–Mercer run.
pub struct BarryMercerRun {
    pub mesh: Mesh,
    pub space: SpaceSet,
    pub snapshots: Vec<BarryMercerSnapshot>,
}

/// Number of samples taken along the diagonal for profiles.
pub const DIAGONAL_SAMPLES: usize = 200;

/// Runs the Barry–Mercer benchmark with BDF order `m` on a `1/n` mesh and
/// captures the steps nearest to the requested normalized times `t̂`.
pub fn run_barry_mercer(
    cfg: &BarryMercerConfig,
    k: usize,
    n: usize,
    m: usize,
    snapshot_times: &[f64],
) -> Result<BarryMercerRun, ScenarioError> {
    if snapshot_times.is_empty() {
        return Err(ScenarioError::InvalidRun("no snapshot times requested".into()));
    }
    let mesh = Mesh::build_uniform_unit_square(n);
    let space = build_space_set_with_policy(&mesh, k, Variant::Standard, BoundaryPolicy::free_normal())?;
    let system = assemble_system(&mesh, &space, cfg.material_params())?;
    let beta = cfg.beta();
    let dt = cfg.dt();

    let unit_source = assemble_point_load(&mesh, &space, cfg.x0, 1.0)?;
    let zeros = vec![0.0; space.num_slots()];
    let data = vec![0.0; space.num_data()];
    let amplitude = |t: f64| 2.0 * beta * (beta * t).sin();
    let loads_at = |t: f64| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), AssemblyError> {
        let f: Vec<f64> = unit_source.iter().map(|v| v * amplitude(t)).collect();
        Ok((f, zeros.clone(), data.clone()))
    };

    let targets: Vec<usize> = snapshot_times
        .iter()
        .map(|&that| ((that / (beta * dt)).round() as usize).max(1))
        .collect();
    let last_step = *targets.iter().max().expect("nonempty targets");

    let initial = SystemState::zeros(&space, 0.0);
    let mut history = starting_values(&space, &system, m, dt, initial, loads_at)?;
    let mut stepper = TimeStepper::new(&space, &system, m, dt)?;
    let sampler = FieldSampler::new(&mesh, &space)?;

    let mut snapshots = Vec::new();
    let mut capture = |state: &SystemState, step: usize| -> Result<(), ScenarioError> {
        if !targets.contains(&step) {
            return Ok(());
        }
        let full = state.to_full(&space);
        snapshots.push(BarryMercerSnapshot {
            normalized_time: beta * state.time,
            step,
            state: state.clone(),
            pressure_at_source: sampler.pressure(cfg.x0, &full)?,
            diagonal: sample_line(&sampler, state, [0.0, 0.0], [1.0, 1.0], DIAGONAL_SAMPLES)?,
        });
        Ok(())
    };

    for (i, state) in history.iter().enumerate() {
        capture(state, i)?;
    }
    for step in m..=last_step {
        let t_new = step as f64 * dt;
        let (f, g, d) = loads_at(t_new)?;
        let state = stepper.bdf_step(&history, &f, &g, &d, t_new)?;
        capture(&state, step)?;
        if history.len() == m {
            history.remove(0);
        }
        history.push(state);
    }
    snapshots.sort_by_key(|s| s.step);
    Ok(BarryMercerRun { mesh, space, snapshots })
}

/// Diagonal pressure extrema after one backward-Euler step in the
/// low-permeability, small-step setting.
pub struct OscillationReport {
    pub min_pressure: f64,
    pub max_pressure: f64,
    pub diagonal: Vec<LineSample>,
}

impl OscillationReport {
    /// True when the most negative diagonal value stays within the stated
    /// fraction of the peak (no significant spurious oscillation).
    pub fn passes(&self, fraction: f64) -> bool {
        self.min_pressure >= -fraction * self.max_pressure
    }
}

/// One backward-Euler step of the Barry–Mercer problem from rest with the
/// given permeability and step size, sampling the diagonal pressure.
pub fn run_oscillation_check(
    n: usize,
    kappa: f64,
    dt: f64,
) -> Result<OscillationReport, ScenarioError> {
    let cfg = BarryMercerConfig { kappa, ..BarryMercerConfig::default() };
    let mesh = Mesh::build_uniform_unit_square(n);
    let space = build_space_set_with_policy(&mesh, 1, Variant::Standard, BoundaryPolicy::free_normal())?;
    let system = assemble_system(&mesh, &space, cfg.material_params())?;
    let beta = cfg.beta();

    let source = assemble_point_load(&mesh, &space, cfg.x0, 2.0 * beta * (beta * dt).sin())?;
    let zeros = vec![0.0; space.num_slots()];
    let data = vec![0.0; space.num_data()];
    let history = vec![SystemState::zeros(&space, 0.0)];
    let mut stepper = TimeStepper::new(&space, &system, 1, dt)?;
    let state = stepper.bdf_step(&history, &source, &zeros, &data, dt)?;

    let sampler = FieldSampler::new(&mesh, &space)?;
    let diagonal = sample_line(&sampler, &state, [0.0, 0.0], [1.0, 1.0], DIAGONAL_SAMPLES)?;
    let min_pressure = diagonal.iter().map(|s| s.pressure).fold(f64::INFINITY, f64::min);
    let max_pressure = diagonal.iter().map(|s| s.pressure).fold(f64::NEG_INFINITY, f64::max);
    Ok(OscillationReport { min_pressure, max_pressure, diagonal })
}

/// Writes diagonal samples as CSV with columns `s,x,y,p,ux,uy`.
pub fn emit_line_csv(samples: &[LineSample], path: &Path) -> Result<(), ScenarioError> {
    let mut out = String::from("s,x,y,p,ux,uy\n");
    let n = samples.len();
    for (i, s) in samples.iter().enumerate() {
        let param = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        writeln!(
            out,
            "{param},{},{},{},{},{}",
            s.x[0], s.x[1], s.pressure, s.displacement[0], s.displacement[1]
        )
        .expect("write to string");
    }
    fs::write(path, out)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })
}
