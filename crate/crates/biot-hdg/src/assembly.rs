//! Assembly of the discrete operators and static condensation.
//!
//! All matrices are assembled over the combined slot space of a [`SpaceSet`]
//! (`[local | global | data]`, see `fe_spaces`), so Dirichlet lifting is a
//! plain matrix–vector product with a data-extended vector. The four blocks:
//!
//! * `A` — diffusion form on (pressure, facet pressure): volume term
//!   `κ∇p·∇w`, consistency terms `−κ∇p·n[[w]] − κ∇w·n[[p]]` with
//!   `[[w]] = w − ŵ`, and stabilization `κ(τ/h_T)·Π_Ŵ[[p]]·Π_Ŵ[[w]]`;
//! * `B` — elasticity form on (displacement, tangential facet displacement):
//!   `2μ∇_s ξ:∇_s η + λ div ξ div η`, tangential consistency terms, and
//!   stabilization `μ(τ/h_T)·Π_V̂[[ξ^t]]·Π_V̂[[η^t]]`;
//! * `C` — coupling `α(div v, p)` stored symmetrically in both off-diagonal
//!   blocks;
//! * `M` — pressure mass scaled by the storage coefficient `c_s`.
//!
//! Every off-diagonal value is emitted in symmetric pairs computed from the
//! same arithmetic, so `A = Aᵀ` and `B = Bᵀ` hold exactly, not just to
//! rounding. The implicit step matrix `B − C − M − (Δt/δ₀)A` (the pressure
//! equation scaled by `−Δt/δ₀`) is then symmetric indefinite and is reduced
//! to the facet unknowns by per-element Bunch–Kaufman factorizations.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::fe_spaces::{
    build_element_displacement_basis, facet_normal_moments, facet_scalar_moments, SlotClass,
    SpaceSet, Variant,
};
use crate::mesh::{Mesh, MeshError};
use crate::ref_elements::{
    triangle_rule, IntervalRule, RefElementError, TriangleBasis, MAX_EXACTNESS,
};
use crate::sparse_linalg::SparseMatrix;

/// Errors produced during assembly and condensation.
#[derive(Debug, Error)]
pub enum AssemblyError {
    /// A material parameter violates its sign constraint.
    #[error("invalid material parameters: {0}")]
    InvalidMaterialParams(String),
    /// An element-local condensation block could not be factored; the
    /// stabilization may be too small or the configuration degenerate.
    #[error("local condensation block of element {element} is singular")]
    LocalBlockSingular { element: usize },
    #[error(transparent)]
    FeSpace(#[from] crate::fe_spaces::FeSpaceError),
    #[error(transparent)]
    RefElement(#[from] RefElementError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Poroelastic material constants.
#[derive(Debug, Clone, Copy)]
pub struct MaterialParams {
    /// Constrained specific storage coefficient, `c_s ≥ 0`.
    pub c_s: f64,
    /// Biot–Willis coupling coefficient.
    pub alpha: f64,
    /// Scalar permeability (hydraulic conductivity), `κ > 0`.
    pub kappa: f64,
    /// First Lamé parameter, `λ > 0`.
    pub lambda: f64,
    /// Shear modulus, `μ > 0`.
    pub mu: f64,
    /// Stabilization constant, `τ₀ > 0`.
    pub tau0: f64,
}

impl MaterialParams {
    /// Checks the sign constraints.
    pub fn validate(&self) -> Result<(), AssemblyError> {
        let fail = |msg: &str| Err(AssemblyError::InvalidMaterialParams(msg.to_string()));
        if !(self.c_s >= 0.0) {
            return fail("c_s must be nonnegative");
        }
        if !(self.kappa > 0.0) {
            return fail("kappa must be positive");
        }
        if !(self.lambda > 0.0) {
            return fail("lambda must be positive");
        }
        if !(self.mu > 0.0) {
            return fail("mu must be positive");
        }
        if !(self.tau0 > 0.0) {
            return fail("tau0 must be positive");
        }
        Ok(())
    }

    /// Stabilization parameter `τ = τ₀ k²`, always derived on demand.
    pub fn tau(&self, k: usize) -> f64 {
        self.tau0 * (k * k) as f64
    }
}

/// Quadrature exactness used for analytic data (loads, boundary traces,
/// error norms), elevated well past the matrix rules so transcendental
/// integrands sit below reporting precision.
pub fn data_exactness(k: usize) -> usize {
    (2 * k + 8).min(MAX_EXACTNESS)
}

/// Per-element size measure entering the `τ/h` stabilization weights and the
/// mesh-dependent norms: `h_T = √(2|T|)`, which on structured triangulations
/// of squares equals the grid spacing the mesh is labeled with.
pub fn element_size(mesh: &Mesh, element: usize) -> f64 {
    (2.0 * mesh.area(element)).sqrt()
}

/// Assembles the diffusion block `A` over the combined slot space.
pub fn assemble_diffusion(
    mesh: &Mesh,
    space: &SpaceSet,
    params: &MaterialParams,
) -> Result<SparseMatrix, AssemblyError> {
    params.validate()?;
    let k = space.k;
    let np = crate::fe_spaces::triangle_poly_dim(k);
    let kappa = params.kappa;
    let tau = params.tau(k);
    let tri = TriangleBasis::new(k);
    let vol_rule = triangle_rule(2 * k + 4)?;
    let (gxi_vol, geta_vol) = tri.eval_grad(&vol_rule.points);
    let facet_rule = &space.facet_rule;
    let q_vals = space.facet_basis.eval(&facet_rule.points);

    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    for e in 0..mesh.num_elements() {
        let map = mesh.element_map(e);
        let pv = space.pressure_volume_block(e);
        let pv_idx: Vec<usize> =
            (0..np).map(|a| space.combined_index(pv.slot(a))).collect();
        let h_t = element_size(mesh, e);

        // Volume term κ∇p·∇w: physical gradients of ô_a = φ̂_a/√det; the
        // determinant from the integral cancels the basis normalization.
        let nq = vol_rule.points.len();
        let mut gx = DMatrix::zeros(nq, np);
        let mut gy = DMatrix::zeros(nq, np);
        for q in 0..nq {
            for a in 0..np {
                let g = map.physical_grad([gxi_vol[(q, a)], geta_vol[(q, a)]]);
                gx[(q, a)] = g[0];
                gy[(q, a)] = g[1];
            }
        }
        for b in 0..np {
            for a in 0..np {
                let mut acc = 0.0;
                for q in 0..nq {
                    acc += vol_rule.weights[q]
                        * (gx[(q, a)] * gx[(q, b)] + gy[(q, a)] * gy[(q, b)]);
                }
                triplets.push((pv_idx[b], pv_idx[a], kappa * acc));
            }
        }

        let inv_sqrt_det = 1.0 / map.det.sqrt();
        for facet_use in &mesh.element_to_facets[e] {
            let f = facet_use.facet;
            let fm = mesh.facet_map(f);
            let n_out = [
                facet_use.sign * mesh.facets[f].normal[0],
                facet_use.sign * mesh.facets[f].normal[1],
            ];
            let ph = space.pressure_facet_block(f);
            let ph_idx: Vec<usize> =
                (0..k).map(|i| space.combined_index(ph.slot(i))).collect();

            let pts_ref: Vec<[f64; 2]> = facet_rule
                .points
                .iter()
                .map(|&t| map.to_reference(fm.to_physical(t)))
                .collect();
            let tr_hat = tri.eval(&pts_ref);
            let (gxi, geta) = tri.eval_grad(&pts_ref);
            let nqf = facet_rule.points.len();
            // Trace values, outward normal fluxes, and the physical facet
            // basis θ_i = q̂_i/√len at the quadrature points.
            let mut tr = DMatrix::zeros(nqf, np);
            let mut flux = DMatrix::zeros(nqf, np);
            for q in 0..nqf {
                for a in 0..np {
                    tr[(q, a)] = tr_hat[(q, a)] * inv_sqrt_det;
                    let g = map.physical_grad([gxi[(q, a)], geta[(q, a)]]);
                    flux[(q, a)] = (g[0] * n_out[0] + g[1] * n_out[1]) * inv_sqrt_det;
                }
            }
            let inv_sqrt_len = 1.0 / fm.len.sqrt();
            let wl: Vec<f64> = facet_rule.weights.iter().map(|w| w * fm.len).collect();

            // Moments S[i][a] = ∫_F θ_i ô_a of the element traces.
            let mut smat = vec![vec![0.0; np]; k];
            for (i, srow) in smat.iter_mut().enumerate() {
                for (a, s) in srow.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for q in 0..nqf {
                        acc += wl[q] * q_vals[(q, i)] * inv_sqrt_len * tr[(q, a)];
                    }
                    *s = acc;
                }
            }

            let stab = kappa * tau / h_t;
            for b in 0..np {
                for a in 0..np {
                    let mut acc = 0.0;
                    for q in 0..nqf {
                        acc -= wl[q]
                            * (flux[(q, a)] * tr[(q, b)] + flux[(q, b)] * tr[(q, a)]);
                    }
                    let mut s_acc = 0.0;
                    for srow in &smat {
                        s_acc += srow[a] * srow[b];
                    }
                    triplets.push((pv_idx[b], pv_idx[a], kappa * acc + stab * s_acc));
                }
            }
            for b in 0..np {
                for (j, srow) in smat.iter().enumerate() {
                    let mut acc = 0.0;
                    for q in 0..nqf {
                        acc += wl[q] * flux[(q, b)] * q_vals[(q, j)] * inv_sqrt_len;
                    }
                    let val = kappa * acc - stab * srow[b];
                    triplets.push((pv_idx[b], ph_idx[j], val));
                    triplets.push((ph_idx[j], pv_idx[b], val));
                }
            }
            let inv_len = inv_sqrt_len * inv_sqrt_len;
            for i in 0..k {
                for j in 0..k {
                    let mut acc = 0.0;
                    for q in 0..nqf {
                        acc += wl[q] * (q_vals[(q, i)] * q_vals[(q, j)]) * inv_len;
                    }
                    triplets.push((ph_idx[i], ph_idx[j], stab * acc));
                }
            }
        }
    }
    Ok(SparseMatrix::from_triplets(space.num_slots(), &triplets, true))
}

/// Assembles the elasticity block `B` over the combined slot space.
pub fn assemble_elasticity(
    mesh: &Mesh,
    space: &SpaceSet,
    params: &MaterialParams,
) -> Result<SparseMatrix, AssemblyError> {
    params.validate()?;
    let k = space.k;
    let dim = crate::fe_spaces::displacement_dim(k);
    let mu = params.mu;
    let lambda = params.lambda;
    let tau = params.tau(k);
    let vol_rule = triangle_rule(2 * k + 4)?;
    let facet_rule = &space.facet_rule;
    let q_vals = space.facet_basis.eval(&facet_rule.points);

    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    for e in 0..mesh.num_elements() {
        let map = mesh.element_map(e);
        let basis = build_element_displacement_basis(mesh, space, e)?;
        let slots: Vec<usize> = space
            .displacement_slots(e)
            .into_iter()
            .map(|s| space.combined_index(s))
            .collect();
        let h_t = element_size(mesh, e);

        let g = basis.gradients(&vol_rule.points);
        let nq = vol_rule.points.len();
        for b in 0..dim {
            for a in 0..dim {
                let mut acc = 0.0;
                for q in 0..nq {
                    let exx_a = g.xx[(q, a)];
                    let eyy_a = g.yy[(q, a)];
                    let exy_a = 0.5 * (g.xy[(q, a)] + g.yx[(q, a)]);
                    let exx_b = g.xx[(q, b)];
                    let eyy_b = g.yy[(q, b)];
                    let exy_b = 0.5 * (g.xy[(q, b)] + g.yx[(q, b)]);
                    let div_a = exx_a + eyy_a;
                    let div_b = exx_b + eyy_b;
                    acc += vol_rule.weights[q]
                        * (2.0 * mu * (exx_a * exx_b + eyy_a * eyy_b + 2.0 * exy_a * exy_b)
                            + lambda * div_a * div_b);
                }
                triplets.push((slots[b], slots[a], acc * map.det));
            }
        }

        for facet_use in &mesh.element_to_facets[e] {
            let f = facet_use.facet;
            let fm = mesh.facet_map(f);
            let n_out = [
                facet_use.sign * mesh.facets[f].normal[0],
                facet_use.sign * mesh.facets[f].normal[1],
            ];
            let t_vec = fm.tangent;
            let tan = space.tangential_block(f);
            let tan_idx: Vec<usize> =
                (0..k + 1).map(|i| space.combined_index(tan.slot(i))).collect();

            let pts_ref: Vec<[f64; 2]> = facet_rule
                .points
                .iter()
                .map(|&t| map.to_reference(fm.to_physical(t)))
                .collect();
            let vals = basis.values(&pts_ref);
            let grads = basis.gradients(&pts_ref);
            let nqf = facet_rule.points.len();
            // Tangential traces v·t and tangential tractions (∇_s v · n)·t.
            let mut vt = DMatrix::zeros(nqf, dim);
            let mut snt = DMatrix::zeros(nqf, dim);
            for q in 0..nqf {
                for j in 0..dim {
                    vt[(q, j)] = vals.x[(q, j)] * t_vec[0] + vals.y[(q, j)] * t_vec[1];
                    let exx = grads.xx[(q, j)];
                    let eyy = grads.yy[(q, j)];
                    let exy = 0.5 * (grads.xy[(q, j)] + grads.yx[(q, j)]);
                    let sx = exx * n_out[0] + exy * n_out[1];
                    let sy = exy * n_out[0] + eyy * n_out[1];
                    snt[(q, j)] = sx * t_vec[0] + sy * t_vec[1];
                }
            }
            let inv_sqrt_len = 1.0 / fm.len.sqrt();
            let wl: Vec<f64> = facet_rule.weights.iter().map(|w| w * fm.len).collect();
            // Moments S[i][j] = ∫_F θ_i (v_j·t) for the Π_V̂ projection.
            let mut smat = vec![vec![0.0; dim]; k + 1];
            for (i, srow) in smat.iter_mut().enumerate() {
                for (j, s) in srow.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for q in 0..nqf {
                        acc += wl[q] * q_vals[(q, i)] * inv_sqrt_len * vt[(q, j)];
                    }
                    *s = acc;
                }
            }

            let stab = mu * tau / h_t;
            for b in 0..dim {
                for a in 0..dim {
                    let mut acc = 0.0;
                    for q in 0..nqf {
                        acc -= wl[q]
                            * (snt[(q, a)] * vt[(q, b)] + snt[(q, b)] * vt[(q, a)]);
                    }
                    let mut s_acc = 0.0;
                    for srow in &smat {
                        s_acc += srow[a] * srow[b];
                    }
                    triplets.push((slots[b], slots[a], 2.0 * mu * acc + stab * s_acc));
                }
            }
            for b in 0..dim {
                for (j, srow) in smat.iter().enumerate() {
                    let mut acc = 0.0;
                    for q in 0..nqf {
                        acc += wl[q] * snt[(q, b)] * q_vals[(q, j)] * inv_sqrt_len;
                    }
                    let val = 2.0 * mu * acc - stab * srow[b];
                    triplets.push((slots[b], tan_idx[j], val));
                    triplets.push((tan_idx[j], slots[b], val));
                }
            }
            let inv_len = inv_sqrt_len * inv_sqrt_len;
            for i in 0..k + 1 {
                for j in 0..k + 1 {
                    let mut acc = 0.0;
                    for q in 0..nqf {
                        acc += wl[q] * (q_vals[(q, i)] * q_vals[(q, j)]) * inv_len;
                    }
                    triplets.push((tan_idx[i], tan_idx[j], stab * acc));
                }
            }
        }
    }
    Ok(SparseMatrix::from_triplets(space.num_slots(), &triplets, true))
}

/// Assembles the coupling block `C` (both symmetric halves, entries
/// `α(div v, p)`) and the pressure mass `M` scaled by `c_s`.
pub fn assemble_coupling_and_mass(
    mesh: &Mesh,
    space: &SpaceSet,
    params: &MaterialParams,
) -> Result<(SparseMatrix, SparseMatrix), AssemblyError> {
    params.validate()?;
    let k = space.k;
    let np = crate::fe_spaces::triangle_poly_dim(k);
    let tri = TriangleBasis::new(k);
    let vol_rule = triangle_rule(2 * k + 4)?;
    let phi = tri.eval(&vol_rule.points);
    let nq = vol_rule.points.len();

    let mut c_triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut m_triplets: Vec<(usize, usize, f64)> = Vec::new();
    for e in 0..mesh.num_elements() {
        let map = mesh.element_map(e);
        let basis = build_element_displacement_basis(mesh, space, e)?;
        let slots: Vec<usize> = space
            .displacement_slots(e)
            .into_iter()
            .map(|s| space.combined_index(s))
            .collect();
        let pv = space.pressure_volume_block(e);
        let pv_idx: Vec<usize> =
            (0..np).map(|a| space.combined_index(pv.slot(a))).collect();

        let div = basis.divergence(&vol_rule.points);
        let sqrt_det = map.det.sqrt();
        for (b, &pb) in pv_idx.iter().enumerate() {
            for (j, &uj) in slots.iter().enumerate() {
                let mut acc = 0.0;
                for q in 0..nq {
                    acc += vol_rule.weights[q] * div[(q, j)] * phi[(q, b)];
                }
                // det from the integral, 1/√det from the pressure basis.
                let val = params.alpha * acc * sqrt_det;
                c_triplets.push((pb, uj, val));
                c_triplets.push((uj, pb, val));
            }
        }
        if params.c_s != 0.0 {
            for (b, &pb) in pv_idx.iter().enumerate() {
                for (a, &pa) in pv_idx.iter().enumerate() {
                    let mut acc = 0.0;
                    for q in 0..nq {
                        // Grouped so (a, b) and (b, a) round identically.
                        acc += vol_rule.weights[q] * (phi[(q, a)] * phi[(q, b)]);
                    }
                    m_triplets.push((pb, pa, params.c_s * acc));
                }
            }
        }
    }
    Ok((
        SparseMatrix::from_triplets(space.num_slots(), &c_triplets, true),
        SparseMatrix::from_triplets(space.num_slots(), &m_triplets, true),
    ))
}

/// The assembled operator blocks of one discretization.
pub struct AssembledSystem {
    pub a: SparseMatrix,
    pub b: SparseMatrix,
    pub c: SparseMatrix,
    pub m: SparseMatrix,
    pub params: MaterialParams,
}

/// Assembles all four blocks.
pub fn assemble_system(
    mesh: &Mesh,
    space: &SpaceSet,
    params: MaterialParams,
) -> Result<AssembledSystem, AssemblyError> {
    let a = assemble_diffusion(mesh, space, &params)?;
    let b = assemble_elasticity(mesh, space, &params)?;
    let (c, m) = assemble_coupling_and_mass(mesh, space, &params)?;
    Ok(AssembledSystem { a, b, c, m, params })
}

impl AssembledSystem {
    /// The symmetric implicit step matrix `B − C − M − s·A`, where
    /// `s = Δt/δ₀` is the time scale of the step (the pressure equation is
    /// scaled by `−s`, which symmetrizes the block system).
    pub fn step_matrix(&self, time_scale: f64) -> SparseMatrix {
        SparseMatrix::linear_combination(&[
            (1.0, &self.b),
            (-1.0, &self.c),
            (-1.0, &self.m),
            (-time_scale, &self.a),
        ])
    }
}

/// Dense symmetric-indefinite LDLᵀ with Bunch–Kaufman pivoting, for the
/// element-local condensation blocks. The input is equilibrated (scaled
/// symmetrically so every row's largest entry has magnitude one) before
/// factoring; the blocks mix elasticity, coupling, and `Δt·κ`-scaled
/// diffusion rows whose natural scales can differ by ten orders of
/// magnitude, and without equilibration a single relative pivot tolerance
/// cannot serve them all.
struct DenseLdl {
    n: usize,
    lower: DMatrix<f64>,
    steps: Vec<PivotStep>,
    scales: Vec<f64>,
}

enum PivotStep {
    /// 1×1 pivot at column `k`; `swap` was exchanged with `k` beforehand.
    Single { swap: usize, inv: f64 },
    /// 2×2 pivot at columns `k, k+1`; `swap` was exchanged with `k+1`.
    Double { swap: usize, inv: [f64; 3] },
}

impl DenseLdl {
    /// Factors a symmetric matrix (lower triangle is referenced); `tol` is
    /// the relative pivot tolerance after equilibration.
    fn new(mut a: DMatrix<f64>, tol: f64) -> Option<DenseLdl> {
        let n = a.nrows();
        // Row maxima of the symmetric matrix; an all-zero row is singular.
        let mut scales = vec![0.0f64; n];
        for i in 0..n {
            for j in 0..=i {
                let v = a[(i, j)].abs();
                scales[i] = scales[i].max(v);
                scales[j] = scales[j].max(v);
            }
        }
        if scales.iter().any(|&m| m == 0.0) {
            return None;
        }
        for s in &mut scales {
            *s = 1.0 / s.sqrt();
        }
        for i in 0..n {
            for j in 0..=i {
                a[(i, j)] *= scales[i] * scales[j];
            }
        }
        let floor = tol;
        let alpha = (1.0 + 17.0f64.sqrt()) / 8.0;
        let mut steps = Vec::new();
        let mut k = 0;
        while k < n {
            // Largest subdiagonal entry of column k.
            let mut lambda = 0.0;
            let mut r = k;
            for i in k + 1..n {
                if a[(i, k)].abs() > lambda {
                    lambda = a[(i, k)].abs();
                    r = i;
                }
            }
            let akk = a[(k, k)].abs();
            let mut use_two = false;
            let mut swap = k;
            if akk >= alpha * lambda || lambda == 0.0 {
                // 1×1 pivot, no interchange.
            } else {
                let mut sigma = 0.0f64;
                for i in k..n {
                    if i != r {
                        sigma = sigma.max(a[(i.max(r), i.min(r))].abs());
                    }
                }
                if akk * sigma >= alpha * lambda * lambda {
                    // 1×1 pivot, no interchange.
                } else if a[(r, r)].abs() >= alpha * sigma {
                    swap_sym(&mut a, k, r, k);
                    swap = r;
                } else {
                    swap_sym(&mut a, k + 1, r, k);
                    swap = r;
                    use_two = true;
                }
            }

            if !use_two {
                let d = a[(k, k)];
                if d.abs() <= floor {
                    return None;
                }
                let inv = 1.0 / d;
                // Update the trailing block from the original column before
                // overwriting it with the multipliers.
                for i in k + 1..n {
                    let aik = a[(i, k)];
                    for j in k + 1..=i {
                        a[(i, j)] -= aik * inv * a[(j, k)];
                    }
                }
                for i in k + 1..n {
                    a[(i, k)] *= inv;
                }
                steps.push(PivotStep::Single { swap, inv });
                k += 1;
            } else {
                let e11 = a[(k, k)];
                let e21 = a[(k + 1, k)];
                let e22 = a[(k + 1, k + 1)];
                let det = e11 * e22 - e21 * e21;
                if det.abs() <= floor * floor {
                    return None;
                }
                let inv = [e22 / det, -e21 / det, e11 / det];
                for i in k + 2..n {
                    let b1 = a[(i, k)];
                    let b2 = a[(i, k + 1)];
                    let l1 = inv[0] * b1 + inv[1] * b2;
                    let l2 = inv[1] * b1 + inv[2] * b2;
                    for j in k + 2..=i {
                        a[(i, j)] -= l1 * a[(j, k)] + l2 * a[(j, k + 1)];
                    }
                }
                for i in k + 2..n {
                    let b1 = a[(i, k)];
                    let b2 = a[(i, k + 1)];
                    a[(i, k)] = inv[0] * b1 + inv[1] * b2;
                    a[(i, k + 1)] = inv[1] * b1 + inv[2] * b2;
                }
                steps.push(PivotStep::Double { swap, inv });
                k += 2;
            }
        }
        Some(DenseLdl { n, lower: a, steps, scales })
    }

    /// Solves in place. With the equilibration `A' = S·A·S`, the system
    /// `A·x = b` becomes `x = S·A'⁻¹·(S·b)`.
    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        let l = &self.lower;
        for i in 0..n {
            x[i] *= self.scales[i];
        }
        // Forward: apply interchanges and L.
        let mut k = 0;
        for step in &self.steps {
            match step {
                PivotStep::Single { swap, .. } => {
                    x.swap(k, *swap);
                    for i in k + 1..n {
                        x[i] -= l[(i, k)] * x[k];
                    }
                    k += 1;
                }
                PivotStep::Double { swap, .. } => {
                    x.swap(k + 1, *swap);
                    for i in k + 2..n {
                        x[i] -= l[(i, k)] * x[k] + l[(i, k + 1)] * x[k + 1];
                    }
                    k += 2;
                }
            }
        }
        // Diagonal.
        let mut k = 0;
        for step in &self.steps {
            match step {
                PivotStep::Single { inv, .. } => {
                    x[k] *= inv;
                    k += 1;
                }
                PivotStep::Double { inv, .. } => {
                    let (b1, b2) = (x[k], x[k + 1]);
                    x[k] = inv[0] * b1 + inv[1] * b2;
                    x[k + 1] = inv[1] * b1 + inv[2] * b2;
                    k += 2;
                }
            }
        }
        // Backward: Lᵀ and interchanges in reverse.
        let mut k = self.n;
        for step in self.steps.iter().rev() {
            match step {
                PivotStep::Single { swap, .. } => {
                    k -= 1;
                    for i in k + 1..n {
                        x[k] -= l[(i, k)] * x[i];
                    }
                    x.swap(k, *swap);
                }
                PivotStep::Double { swap, .. } => {
                    k -= 2;
                    for i in k + 2..n {
                        x[k] -= l[(i, k)] * x[i];
                        x[k + 1] -= l[(i, k + 1)] * x[i];
                    }
                    x.swap(k + 1, *swap);
                }
            }
        }
        for i in 0..n {
            x[i] *= self.scales[i];
        }
    }

    fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = rhs.clone();
        let mut col = vec![0.0; self.n];
        for j in 0..rhs.ncols() {
            for i in 0..self.n {
                col[i] = rhs[(i, j)];
            }
            self.solve_in_place(&mut col);
            for i in 0..self.n {
                out[(i, j)] = col[i];
            }
        }
        out
    }
}

/// Symmetric interchange of rows/columns `p` and `q` restricted to the
/// trailing submatrix `A(from.., from..)`; earlier columns already hold
/// multipliers of finished pivots and stay in place.
fn swap_sym(a: &mut DMatrix<f64>, p: usize, q: usize, from: usize) {
    if p == q {
        return;
    }
    let n = a.nrows();
    for j in from..n {
        if j == p || j == q {
            continue;
        }
        let (vp, vq) = (a[(p.max(j), p.min(j))], a[(q.max(j), q.min(j))]);
        a[(p.max(j), p.min(j))] = vq;
        a[(q.max(j), q.min(j))] = vp;
    }
    let d = a[(p, p)];
    a[(p, p)] = a[(q, q)];
    a[(q, q)] = d;
}

/// One element's contribution to the condensation.
struct ElementBlock {
    start: usize,
    size: usize,
    global_cols: Vec<usize>,
    k_lg: DMatrix<f64>,
    factor: DenseLdl,
}

/// Static condensation of a symmetric slot-space matrix onto the global
/// (facet) unknowns, with the recovery data for local unknowns.
pub struct CondensedSystem {
    /// Schur complement over the global unknowns.
    pub condensed: SparseMatrix,
    blocks: Vec<ElementBlock>,
    n_local: usize,
    n_global: usize,
}

/// Condenses an arbitrary symmetric slot-space matrix. The local unknowns
/// (combined indices `0..num_local`) are eliminated element by element; their
/// blocks must be invertible (relative pivot tolerance `1e-12`).
pub fn condense_matrix(
    matrix: &SparseMatrix,
    space: &SpaceSet,
) -> Result<CondensedSystem, AssemblyError> {
    let n_local = space.num_local();
    let n_global = space.num_global();
    let ne = space.num_elements();
    let stride = n_local / ne;
    debug_assert_eq!(stride * ne, n_local);

    let mut condensed_triplets: Vec<(usize, usize, f64)> = Vec::new();
    // Global–global entries pass through directly.
    for i in n_local..n_local + n_global {
        for (j, v) in matrix.row(i) {
            if (n_local..n_local + n_global).contains(&j) {
                condensed_triplets.push((i - n_local, j - n_local, v));
            }
        }
    }

    let mut blocks = Vec::with_capacity(ne);
    for e in 0..ne {
        let start = e * stride;
        let mut global_cols: Vec<usize> = Vec::new();
        for i in start..start + stride {
            for (j, _) in matrix.row(i) {
                if (n_local..n_local + n_global).contains(&j) {
                    global_cols.push(j - n_local);
                } else if j < n_local {
                    assert!(
                        (start..start + stride).contains(&j),
                        "local-local coupling crosses element boundaries"
                    );
                }
            }
        }
        global_cols.sort_unstable();
        global_cols.dedup();
        let col_pos = |j: usize| global_cols.binary_search(&j).expect("collected column");

        let mut k_ll = DMatrix::zeros(stride, stride);
        let mut k_lg = DMatrix::zeros(stride, global_cols.len());
        for i in start..start + stride {
            for (j, v) in matrix.row(i) {
                if j < n_local {
                    k_ll[(i - start, j - start)] = v;
                } else if j < n_local + n_global {
                    k_lg[(i - start, col_pos(j - n_local))] = v;
                }
            }
        }

        let factor = DenseLdl::new(k_ll, 1e-12)
            .ok_or(AssemblyError::LocalBlockSingular { element: e })?;
        // Schur update  −K_GL · K_LL⁻¹ · K_LG  =  −K_LGᵀ · W.
        let w = factor.solve_matrix(&k_lg);
        let schur = k_lg.transpose() * w;
        for r in 0..global_cols.len() {
            for c in 0..global_cols.len() {
                let sym = 0.5 * (schur[(r, c)] + schur[(c, r)]);
                condensed_triplets.push((global_cols[r], global_cols[c], -sym));
            }
        }
        blocks.push(ElementBlock { start, size: stride, global_cols, k_lg, factor });
    }

    Ok(CondensedSystem {
        condensed: SparseMatrix::from_triplets(n_global, &condensed_triplets, true),
        blocks,
        n_local,
        n_global,
    })
}

/// Condenses the implicit step system assembled from the blocks, with
/// `dt_scale = δ₀/Δt` (so the pressure equation is scaled by
/// `−Δt/δ₀ = −1/dt_scale`).
pub fn condense(
    system: &AssembledSystem,
    dt_scale: f64,
    space: &SpaceSet,
) -> Result<CondensedSystem, AssemblyError> {
    condense_matrix(&system.step_matrix(1.0 / dt_scale), space)
}

impl CondensedSystem {
    /// Reduces a full unknown-space RHS (length `num_local + num_global`) to
    /// the condensed global RHS: `r_G − K_GL K_LL⁻¹ r_L`.
    pub fn reduce_rhs(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n_local + self.n_global);
        let mut out = rhs[self.n_local..].to_vec();
        let mut local = Vec::new();
        for block in &self.blocks {
            local.clear();
            local.extend_from_slice(&rhs[block.start..block.start + block.size]);
            block.factor.solve_in_place(&mut local);
            for (c, &g) in block.global_cols.iter().enumerate() {
                let mut acc = 0.0;
                for r in 0..block.size {
                    acc += block.k_lg[(r, c)] * local[r];
                }
                out[g] -= acc;
            }
        }
        out
    }

    /// Recovers the full unknown vector from the condensed solution:
    /// `x_L = K_LL⁻¹ (r_L − K_LG x_G)` per element, followed by `x_G`.
    pub fn recover(&self, rhs: &[f64], x_global: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n_local + self.n_global);
        assert_eq!(x_global.len(), self.n_global);
        let mut out = vec![0.0; self.n_local + self.n_global];
        out[self.n_local..].copy_from_slice(x_global);
        let mut local = Vec::new();
        for block in &self.blocks {
            local.clear();
            local.extend_from_slice(&rhs[block.start..block.start + block.size]);
            for r in 0..block.size {
                let mut acc = 0.0;
                for (c, &g) in block.global_cols.iter().enumerate() {
                    acc += block.k_lg[(r, c)] * x_global[g];
                }
                local[r] -= acc;
            }
            block.factor.solve_in_place(&mut local);
            out[block.start..block.start + block.size].copy_from_slice(&local);
        }
        out
    }
}

/// Assembles the pressure load `(f, w)` into a full-slot vector (entries on
/// element pressure slots only).
pub fn assemble_pressure_load<F: Fn([f64; 2]) -> f64>(
    mesh: &Mesh,
    space: &SpaceSet,
    f: F,
) -> Result<Vec<f64>, AssemblyError> {
    let k = space.k;
    let np = crate::fe_spaces::triangle_poly_dim(k);
    let tri = TriangleBasis::new(k);
    let rule = triangle_rule(data_exactness(k))?;
    let phi = tri.eval(&rule.points);
    let mut load = vec![0.0; space.num_slots()];
    for e in 0..mesh.num_elements() {
        let map = mesh.element_map(e);
        let pv = space.pressure_volume_block(e);
        let sqrt_det = map.det.sqrt();
        for (q, &pt) in rule.points.iter().enumerate() {
            let fx = f(map.to_physical(pt));
            for a in 0..np {
                load[space.combined_index(pv.slot(a))] +=
                    rule.weights[q] * fx * phi[(q, a)] * sqrt_det;
            }
        }
    }
    Ok(load)
}

/// Assembles the displacement load `(g, v)` into a full-slot vector.
pub fn assemble_displacement_load<G: Fn([f64; 2]) -> [f64; 2]>(
    mesh: &Mesh,
    space: &SpaceSet,
    g: G,
) -> Result<Vec<f64>, AssemblyError> {
    let rule = triangle_rule(data_exactness(space.k))?;
    let mut load = vec![0.0; space.num_slots()];
    for e in 0..mesh.num_elements() {
        let map = mesh.element_map(e);
        let basis = build_element_displacement_basis(mesh, space, e)?;
        let slots: Vec<usize> = space
            .displacement_slots(e)
            .into_iter()
            .map(|s| space.combined_index(s))
            .collect();
        let vals = basis.values(&rule.points);
        for (q, &pt) in rule.points.iter().enumerate() {
            let gx = g(map.to_physical(pt));
            for (j, &slot) in slots.iter().enumerate() {
                load[slot] += rule.weights[q]
                    * (gx[0] * vals.x[(q, j)] + gx[1] * vals.y[(q, j)])
                    * map.det;
            }
        }
    }
    Ok(load)
}

/// Assembles a pressure point source `magnitude·δ_{x0}`: the load against a
/// test function is its point value, averaged over all elements containing
/// `x0` when it lies on an edge or vertex.
pub fn assemble_point_load(
    mesh: &Mesh,
    space: &SpaceSet,
    x0: [f64; 2],
    magnitude: f64,
) -> Result<Vec<f64>, AssemblyError> {
    let elements = mesh.locate_point(x0)?;
    let tri = TriangleBasis::new(space.k);
    let np = crate::fe_spaces::triangle_poly_dim(space.k);
    let share = magnitude / elements.len() as f64;
    let mut load = vec![0.0; space.num_slots()];
    for &e in &elements {
        let map = mesh.element_map(e);
        let phi = tri.eval(&[map.to_reference(x0)]);
        let inv_sqrt_det = 1.0 / map.det.sqrt();
        let pv = space.pressure_volume_block(e);
        for a in 0..np {
            load[space.combined_index(pv.slot(a))] += share * phi[(0, a)] * inv_sqrt_det;
        }
    }
    Ok(load)
}

/// Computes all boundary data slot values from Dirichlet traces: facet
/// pressures get the `Π_Ŵ` coefficients of `p`, tangential slots the `Π_V̂`
/// coefficients of `u·t`, normal-moment slots the moments of `u·n`.
pub fn apply_dirichlet_data<P, U>(
    mesh: &Mesh,
    space: &SpaceSet,
    p_trace: P,
    u_trace: U,
) -> Result<Vec<f64>, AssemblyError>
where
    P: Fn([f64; 2]) -> f64,
    U: Fn([f64; 2]) -> [f64; 2],
{
    let mut data = vec![0.0; space.num_data()];
    let n_shared = match space.variant {
        Variant::Standard => space.k + 2,
        Variant::Relaxed => space.k + 1,
    };
    for f in 0..mesh.num_facets() {
        if !mesh.boundary_flags[f] {
            continue;
        }
        let nb = space.normal_moment_block(f);
        if nb.class == SlotClass::Data {
            let moments = facet_normal_moments(mesh, space, f, &u_trace, n_shared)?;
            for (i, &m) in moments.iter().enumerate() {
                data[nb.slot(i).index] = m;
            }
        }
        let tb = space.tangential_block(f);
        if tb.class == SlotClass::Data {
            let t = mesh.facet_map(f).tangent;
            let tangential = |x: [f64; 2]| {
                let u = u_trace(x);
                u[0] * t[0] + u[1] * t[1]
            };
            let moments = facet_scalar_moments(mesh, space, f, tangential, space.k + 1)?;
            for (i, &m) in moments.iter().enumerate() {
                data[tb.slot(i).index] = m;
            }
        }
        let pb = space.pressure_facet_block(f);
        if pb.class == SlotClass::Data {
            let moments = facet_scalar_moments(mesh, space, f, &p_trace, space.k)?;
            for (i, &m) in moments.iter().enumerate() {
                data[pb.slot(i).index] = m;
            }
        }
    }
    Ok(data)
}

/// Builds a full slot vector from unknown values and data values.
pub fn extend_with_data(space: &SpaceSet, unknowns: &[f64], data: &[f64]) -> Vec<f64> {
    assert_eq!(unknowns.len(), space.num_unknowns());
    assert_eq!(data.len(), space.num_data());
    let mut full = Vec::with_capacity(space.num_slots());
    full.extend_from_slice(unknowns);
    full.extend_from_slice(data);
    full
}

/// Restricts `load − K·(0 ⊕ data)` to the unknown rows: the right-hand side
/// of the constrained system with Dirichlet lifting.
pub fn lift_rhs(
    matrix: &SparseMatrix,
    space: &SpaceSet,
    load: &[f64],
    data: &[f64],
) -> Vec<f64> {
    assert_eq!(load.len(), space.num_slots());
    let z = extend_with_data(space, &vec![0.0; space.num_unknowns()], data);
    let kz = matrix.matvec(&z);
    (0..space.num_unknowns()).map(|i| load[i] - kz[i]).collect()
}

/// Coefficients of the L²(F) projection onto `P^{k−1}(F)` (the facet
/// pressure space) of values sampled at the points of `rule`.
pub fn facet_project_scalar(
    space: &SpaceSet,
    facet_len: f64,
    rule: &IntervalRule,
    values: &[f64],
) -> Vec<f64> {
    project_onto_facet_basis(space, facet_len, rule, values, space.k)
}

/// Coefficients of the L²(F) projection onto `P^k(F)` (the tangential
/// displacement space) of values sampled at the points of `rule`.
pub fn facet_project_tangential(
    space: &SpaceSet,
    facet_len: f64,
    rule: &IntervalRule,
    values: &[f64],
) -> Vec<f64> {
    project_onto_facet_basis(space, facet_len, rule, values, space.k + 1)
}

fn project_onto_facet_basis(
    space: &SpaceSet,
    facet_len: f64,
    rule: &IntervalRule,
    values: &[f64],
    count: usize,
) -> Vec<f64> {
    assert_eq!(values.len(), rule.points.len());
    let q_vals = space.facet_basis.eval(&rule.points);
    let sqrt_len = facet_len.sqrt();
    (0..count)
        .map(|i| {
            let mut acc = 0.0;
            for (q, &v) in values.iter().enumerate() {
                acc += rule.weights[q] * v * q_vals[(q, i)];
            }
            acc * sqrt_len
        })
        .collect()
}

/// Map from combined slots to a compact index over the pressure unknowns
/// (element pressures first, then facet pressure unknowns), for restricting
/// slot-space matrices to the pure diffusion subsystem.
pub fn pressure_unknown_map(space: &SpaceSet) -> (Vec<Option<usize>>, usize) {
    let mut map = vec![None; space.num_slots()];
    let mut next = 0;
    for e in 0..space.num_elements() {
        let pv = space.pressure_volume_block(e);
        for i in 0..pv.count {
            map[space.combined_index(pv.slot(i))] = Some(next);
            next += 1;
        }
    }
    for f in 0..space.num_facets() {
        let pb = space.pressure_facet_block(f);
        if pb.class == SlotClass::GlobalUnknown {
            for i in 0..pb.count {
                map[space.combined_index(pb.slot(i))] = Some(next);
                next += 1;
            }
        }
    }
    (map, next)
}

/// Map from combined slots to a compact index over the displacement unknowns
/// (element DOFs element-major, tangential facet unknowns after).
pub fn displacement_unknown_map(space: &SpaceSet) -> (Vec<Option<usize>>, usize) {
    let mut map = vec![None; space.num_slots()];
    let mut next = 0;
    for e in 0..space.num_elements() {
        for slot in space.displacement_slots(e) {
            if slot.class != SlotClass::Data {
                let ci = space.combined_index(slot);
                if map[ci].is_none() {
                    map[ci] = Some(next);
                    next += 1;
                }
            }
        }
    }
    for f in 0..space.num_facets() {
        let tb = space.tangential_block(f);
        if tb.class == SlotClass::GlobalUnknown {
            for i in 0..tb.count {
                map[space.combined_index(tb.slot(i))] = Some(next);
                next += 1;
            }
        }
    }
    (map, next)
}
