//! Finite element spaces and degree-of-freedom management.
//!
//! For polynomial degree `k ≥ 1` the method couples four fields:
//!
//! * element pressures in `P^k(T)` (always condensable),
//! * facet pressures in `P^{k−1}(F)` on interior facets,
//! * vector displacements in `[P^{k+1}(T)]²` made H(div)-conforming by
//!   sharing facet-normal moment DOFs between neighbouring elements,
//! * scalar tangential facet displacements in `P^k(F)`.
//!
//! In the standard variant all `k+2` normal moments per facet are shared; in
//! the relaxed variant only the first `k+1` are shared and the top
//! (degree-`k+1`) moment stays element-local, so normal continuity holds only
//! against `P^k(F)`.
//!
//! Every DOF is assigned a [`Slot`]: element-local unknowns (eliminated by
//! static condensation), facet global unknowns (the condensed system), or
//! boundary data slots (fixed by Dirichlet data). Numbering is deterministic:
//! local slots are element-major, global and data slots facet-major.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::mesh::Mesh;
use crate::ref_elements::{
    interval_rule, ElementMap, IntervalBasis, IntervalRule, RefElementError, TriangleBasis,
};

/// Errors from space construction and element basis builds.
#[derive(Debug, Error)]
pub enum FeSpaceError {
    /// The method requires polynomial degree at least 1.
    #[error("polynomial degree must be at least 1, got {0}")]
    InvalidDegree(usize),
    /// The dual-functional system of an element is numerically singular,
    /// which signals a degenerate element geometry.
    #[error(
        "displacement dual system is singular on element {element} \
         (condition estimate {cond:.3e})"
    )]
    SingularDualSystem { element: usize, cond: f64 },
    #[error(transparent)]
    RefElement(#[from] RefElementError),
}

/// Choice of normal-continuity mechanism for the displacement space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// All `k+2` facet-normal moments shared: exact H(div) conformity.
    Standard,
    /// Only moments up to degree `k` shared; the top moment is element-local.
    Relaxed,
}

/// Whether a boundary facet's DOFs of one field are fixed by data or left in
/// the global system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryCondition {
    /// Boundary slots become data slots, set from Dirichlet traces.
    Constrained,
    /// Boundary slots stay global unknowns (natural condition).
    Free,
}

/// Per-field boundary treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryPolicy {
    pub pressure: BoundaryCondition,
    pub tangential: BoundaryCondition,
    pub normal: BoundaryCondition,
}

impl BoundaryPolicy {
    /// Dirichlet data on every field (the default space).
    pub fn fully_constrained() -> Self {
        BoundaryPolicy {
            pressure: BoundaryCondition::Constrained,
            tangential: BoundaryCondition::Constrained,
            normal: BoundaryCondition::Constrained,
        }
    }

    /// Drained boundary with zero tangential slip and free normal moments.
    pub fn free_normal() -> Self {
        BoundaryPolicy { normal: BoundaryCondition::Free, ..Self::fully_constrained() }
    }

    /// No boundary constraints at all (test fixture for consistency checks).
    pub fn fully_free() -> Self {
        BoundaryPolicy {
            pressure: BoundaryCondition::Free,
            tangential: BoundaryCondition::Free,
            normal: BoundaryCondition::Free,
        }
    }
}

/// Storage class of a DOF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotClass {
    /// Element-interior unknown, eliminated by static condensation.
    LocalUnknown,
    /// Facet unknown kept in the condensed global system.
    GlobalUnknown,
    /// Boundary slot holding Dirichlet data.
    Data,
}

/// A single DOF: class plus index within that class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot {
    pub class: SlotClass,
    pub index: usize,
}

/// A contiguous run of slots of one class.
#[derive(Debug, Clone, Copy)]
pub struct SlotBlock {
    pub class: SlotClass,
    pub start: usize,
    pub count: usize,
}

impl SlotBlock {
    /// The `i`-th slot of the block.
    pub fn slot(&self, i: usize) -> Slot {
        assert!(i < self.count, "slot index {i} out of block of size {}", self.count);
        Slot { class: self.class, index: self.start + i }
    }
}

/// DOF totals, split the way the condensed solver sees them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DofCounts {
    /// Element pressure DOFs (all local).
    pub pressure_volume: usize,
    /// Facet pressure unknowns.
    pub pressure_facet: usize,
    /// Tangential facet displacement unknowns.
    pub tangential: usize,
    /// Shared facet-normal displacement unknowns.
    pub displacement_normal_global: usize,
    /// Element-local displacement DOFs (interior bubbles plus, in the
    /// relaxed variant, per-facet top moments).
    pub displacement_local: usize,
    /// Displacement unknowns in total (global + local, data excluded).
    pub displacement_total: usize,
    /// All condensable unknowns.
    pub local_unknowns: usize,
    /// All facet unknowns: the dimension of the condensed system.
    pub global_unknowns: usize,
    /// Boundary data slots.
    pub data_slots: usize,
}

/// Dimension of `P^m` on a triangle.
pub fn triangle_poly_dim(m: usize) -> usize {
    (m + 1) * (m + 2) / 2
}

/// Dimension of the broken vector displacement space `[P^{k+1}(T)]²`.
pub fn displacement_dim(k: usize) -> usize {
    (k + 2) * (k + 3)
}

/// Number of interior displacement bubbles per element.
pub fn bubble_dim(k: usize) -> usize {
    k * (k + 2)
}

/// DOF maps for one mesh, degree, variant, and boundary policy.
///
/// Also owns the degree-dependent reference machinery shared by all element
/// basis builds: the orthonormal scalar basis of degree `k+1`, the orthonormal
/// facet basis (whose leading subsets span every lower degree), the facet
/// moment quadrature, and the reference bubble coefficients.
pub struct SpaceSet {
    pub k: usize,
    pub variant: Variant,
    pub policy: BoundaryPolicy,
    counts: DofCounts,
    num_elements: usize,
    element_facets: Vec<[usize; 3]>,
    facet_normal_base: Vec<Slot>,
    facet_tangential_base: Vec<Slot>,
    facet_pressure_base: Vec<Slot>,
    /// Orthonormal scalar basis of degree `k+1` on the reference triangle.
    pub scalar_kp1: TriangleBasis,
    /// Orthonormal basis of degree `k+1` on the unit interval.
    pub facet_basis: IntervalBasis,
    /// Interval rule exact for facet moment integrands (degree `2k+4`).
    pub facet_rule: IntervalRule,
    /// Reference bubble coefficients, `(k+2)(k+3) × k(k+2)`, orthonormal
    /// columns over the reference orthonormal vector basis.
    reference_bubbles: DMatrix<f64>,
}

/// Number of shared normal moments per facet for a variant.
fn shared_moments(k: usize, variant: Variant) -> usize {
    match variant {
        Variant::Standard => k + 2,
        Variant::Relaxed => k + 1,
    }
}

/// Builds the DOF maps with the default policy: Dirichlet data on all fields.
pub fn build_space_set(mesh: &Mesh, k: usize, variant: Variant) -> Result<SpaceSet, FeSpaceError> {
    build_space_set_with_policy(mesh, k, variant, BoundaryPolicy::fully_constrained())
}

/// Builds the DOF maps with an explicit boundary policy.
pub fn build_space_set_with_policy(
    mesh: &Mesh,
    k: usize,
    variant: Variant,
    policy: BoundaryPolicy,
) -> Result<SpaceSet, FeSpaceError> {
    if k < 1 {
        return Err(FeSpaceError::InvalidDegree(k));
    }
    let np = triangle_poly_dim(k);
    let nb = bubble_dim(k);
    let n_tops = match variant {
        Variant::Standard => 0,
        Variant::Relaxed => 3,
    };
    let n_shared = shared_moments(k, variant);
    let ne = mesh.num_elements();
    let nf = mesh.num_facets();

    let local_stride = np + nb + n_tops;
    let local_unknowns = ne * local_stride;

    let mut facet_normal_base = Vec::with_capacity(nf);
    let mut facet_tangential_base = Vec::with_capacity(nf);
    let mut facet_pressure_base = Vec::with_capacity(nf);
    let mut next_global = 0usize;
    let mut next_data = 0usize;
    let mut normal_global = 0usize;
    let mut tangential_global = 0usize;
    let mut pressure_facet_global = 0usize;
    for f in 0..nf {
        let interior = !mesh.boundary_flags[f];
        let place = |count: usize,
                         condition: BoundaryCondition,
                         global_tally: &mut usize,
                         next_global: &mut usize,
                         next_data: &mut usize| {
            if interior || condition == BoundaryCondition::Free {
                let slot = Slot { class: SlotClass::GlobalUnknown, index: *next_global };
                *next_global += count;
                *global_tally += count;
                slot
            } else {
                let slot = Slot { class: SlotClass::Data, index: *next_data };
                *next_data += count;
                slot
            }
        };
        facet_normal_base.push(place(
            n_shared,
            policy.normal,
            &mut normal_global,
            &mut next_global,
            &mut next_data,
        ));
        facet_tangential_base.push(place(
            k + 1,
            policy.tangential,
            &mut tangential_global,
            &mut next_global,
            &mut next_data,
        ));
        facet_pressure_base.push(place(
            k,
            policy.pressure,
            &mut pressure_facet_global,
            &mut next_global,
            &mut next_data,
        ));
    }

    let counts = DofCounts {
        pressure_volume: ne * np,
        pressure_facet: pressure_facet_global,
        tangential: tangential_global,
        displacement_normal_global: normal_global,
        displacement_local: ne * (nb + n_tops),
        displacement_total: normal_global + ne * (nb + n_tops),
        local_unknowns,
        global_unknowns: next_global,
        data_slots: next_data,
    };

    let scalar_kp1 = TriangleBasis::new(k + 1);
    let facet_basis = IntervalBasis::new(k + 1);
    let facet_rule = interval_rule(2 * k + 4)?;
    let reference_bubbles = reference_bubbles(&scalar_kp1, &facet_basis, k)?;

    Ok(SpaceSet {
        k,
        variant,
        policy,
        counts,
        num_elements: ne,
        element_facets: mesh
            .element_to_facets
            .iter()
            .map(|uses| [uses[0].facet, uses[1].facet, uses[2].facet])
            .collect(),
        facet_normal_base,
        facet_tangential_base,
        facet_pressure_base,
        scalar_kp1,
        facet_basis,
        facet_rule,
        reference_bubbles,
    })
}

impl SpaceSet {
    /// DOF totals.
    pub fn counts(&self) -> DofCounts {
        self.counts
    }

    /// Condensable unknowns (combined indices `0..num_local`).
    pub fn num_local(&self) -> usize {
        self.counts.local_unknowns
    }

    /// Facet unknowns: the condensed system dimension.
    pub fn num_global(&self) -> usize {
        self.counts.global_unknowns
    }

    /// Boundary data slots.
    pub fn num_data(&self) -> usize {
        self.counts.data_slots
    }

    /// Local plus global unknowns.
    pub fn num_unknowns(&self) -> usize {
        self.num_local() + self.num_global()
    }

    /// Full combined slot space: unknowns followed by data.
    pub fn num_slots(&self) -> usize {
        self.num_unknowns() + self.num_data()
    }

    /// Position of a slot in the combined ordering `[local | global | data]`.
    pub fn combined_index(&self, slot: Slot) -> usize {
        match slot.class {
            SlotClass::LocalUnknown => slot.index,
            SlotClass::GlobalUnknown => self.num_local() + slot.index,
            SlotClass::Data => self.num_unknowns() + slot.index,
        }
    }

    fn local_stride(&self) -> usize {
        let n_tops = match self.variant {
            Variant::Standard => 0,
            Variant::Relaxed => 3,
        };
        triangle_poly_dim(self.k) + bubble_dim(self.k) + n_tops
    }

    /// Element pressure DOFs (coefficients in the orthonormal `P^k` basis).
    pub fn pressure_volume_block(&self, element: usize) -> SlotBlock {
        SlotBlock {
            class: SlotClass::LocalUnknown,
            start: element * self.local_stride(),
            count: triangle_poly_dim(self.k),
        }
    }

    /// Interior displacement bubble DOFs of an element.
    pub fn bubble_block(&self, element: usize) -> SlotBlock {
        SlotBlock {
            class: SlotClass::LocalUnknown,
            start: element * self.local_stride() + triangle_poly_dim(self.k),
            count: bubble_dim(self.k),
        }
    }

    /// The element-local top normal moment for local facet `l` (relaxed only).
    pub fn top_moment_slot(&self, element: usize, local_facet: usize) -> Slot {
        assert_eq!(self.variant, Variant::Relaxed, "top moments exist only in the relaxed variant");
        assert!(local_facet < 3);
        Slot {
            class: SlotClass::LocalUnknown,
            index: element * self.local_stride()
                + triangle_poly_dim(self.k)
                + bubble_dim(self.k)
                + local_facet,
        }
    }

    /// Shared normal moment DOFs of a facet (`k+2` standard, `k+1` relaxed).
    pub fn normal_moment_block(&self, facet: usize) -> SlotBlock {
        let base = self.facet_normal_base[facet];
        SlotBlock {
            class: base.class,
            start: base.index,
            count: shared_moments(self.k, self.variant),
        }
    }

    /// Tangential displacement DOFs of a facet (coefficients in the
    /// orthonormal facet basis, `k+1` of them).
    pub fn tangential_block(&self, facet: usize) -> SlotBlock {
        let base = self.facet_tangential_base[facet];
        SlotBlock { class: base.class, start: base.index, count: self.k + 1 }
    }

    /// Facet pressure DOFs (`k` coefficients of degree up to `k−1`).
    pub fn pressure_facet_block(&self, facet: usize) -> SlotBlock {
        let base = self.facet_pressure_base[facet];
        SlotBlock { class: base.class, start: base.index, count: self.k }
    }

    /// Facet ids of an element in local order.
    pub fn element_facets(&self, element: usize) -> [usize; 3] {
        self.element_facets[element]
    }

    /// Number of elements the space was built for.
    pub fn num_elements(&self) -> usize {
        self.num_elements
    }

    /// Number of facets the space was built for.
    pub fn num_facets(&self) -> usize {
        self.facet_pressure_base.len()
    }

    /// Reference bubble coefficients over the reference orthonormal vector
    /// basis (`B_{2m+c} = φ̂_m e_c`); columns are orthonormal.
    pub fn reference_bubbles(&self) -> &DMatrix<f64> {
        &self.reference_bubbles
    }

    /// Displacement DOFs of an element in the basis functional order:
    /// per local facet the `k+2` normal moments by increasing degree (with
    /// the top moment element-local in the relaxed variant), then the
    /// interior bubbles.
    pub fn displacement_slots(&self, element: usize) -> Vec<Slot> {
        let k = self.k;
        let n_shared = shared_moments(k, self.variant);
        let mut slots = Vec::with_capacity(displacement_dim(k));
        for (l, &facet) in self.element_facets[element].iter().enumerate() {
            let block = self.normal_moment_block(facet);
            for i in 0..n_shared {
                slots.push(block.slot(i));
            }
            if self.variant == Variant::Relaxed {
                slots.push(self.top_moment_slot(element, l));
            }
        }
        let bubbles = self.bubble_block(element);
        for i in 0..bubbles.count {
            slots.push(bubbles.slot(i));
        }
        debug_assert_eq!(slots.len(), displacement_dim(k));
        slots
    }
}

/// Orthonormal basis of the reference displacement bubble space: the fields
/// in `[P^{k+1}]²` whose normal-trace moments vanish on all three reference
/// facets. Returned as coefficient columns over the reference orthonormal
/// vector basis.
fn reference_bubbles(
    scalar: &TriangleBasis,
    facet_basis: &IntervalBasis,
    k: usize,
) -> Result<DMatrix<f64>, FeSpaceError> {
    let nm = scalar.dim;
    let dim = 2 * nm;
    let n_moments = k + 2;
    let rule = interval_rule(2 * k + 4)?;

    // Reference facets: endpoints and outward normals of the unit triangle.
    let sqrt_half = 0.5f64.sqrt();
    let facets: [([f64; 2], [f64; 2], [f64; 2]); 3] = [
        ([0.0, 0.0], [1.0, 0.0], [0.0, -1.0]),
        ([1.0, 0.0], [0.0, 1.0], [sqrt_half, sqrt_half]),
        ([0.0, 1.0], [0.0, 0.0], [-1.0, 0.0]),
    ];

    let mut trace = DMatrix::zeros(3 * n_moments, dim);
    let q_vals = facet_basis.eval(&rule.points);
    for (l, &(a, b, n)) in facets.iter().enumerate() {
        let pts: Vec<[f64; 2]> = rule
            .points
            .iter()
            .map(|&t| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])])
            .collect();
        let phi = scalar.eval(&pts);
        for i in 0..n_moments {
            for m in 0..nm {
                let mut acc = 0.0;
                for (q, &w) in rule.weights.iter().enumerate() {
                    acc += w * phi[(q, m)] * q_vals[(q, i)];
                }
                trace[(l * n_moments + i, 2 * m)] = acc * n[0];
                trace[(l * n_moments + i, 2 * m + 1)] = acc * n[1];
            }
        }
    }

    // Null space of the trace-moment map via the spectral decomposition of
    // the (positive semidefinite) normal matrix.
    let gram = trace.transpose() * &trace;
    let eig = gram.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    let n_bubbles = bubble_dim(k);
    let mut selected: Vec<usize> = (0..dim)
        .filter(|&i| eig.eigenvalues[i].abs() <= 1e-12 * lambda_max)
        .collect();
    assert_eq!(
        selected.len(),
        n_bubbles,
        "reference bubble space has unexpected dimension for k = {k}"
    );
    selected.sort_unstable();
    let mut bubbles = DMatrix::zeros(dim, n_bubbles);
    for (c, &i) in selected.iter().enumerate() {
        bubbles.set_column(c, &eig.eigenvectors.column(i));
    }
    Ok(bubbles)
}

/// Values of all element displacement basis functions at a set of points:
/// `x` and `y` are `num_points × dim` component matrices.
pub struct DisplacementValues {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

/// Physical gradients of all element displacement basis functions:
/// `xy[(p, j)] = ∂(v_j)_x/∂y` at point `p`, and so on.
pub struct DisplacementGradients {
    pub xx: DMatrix<f64>,
    pub xy: DMatrix<f64>,
    pub yx: DMatrix<f64>,
    pub yy: DMatrix<f64>,
}

/// Nodal displacement basis of one element.
///
/// The basis is dual to the DOF functionals: facet-normal moments against
/// the arclength-orthonormal facet basis (shared identically by both
/// neighbours of a facet, giving H(div) conformity), plus interior moments
/// against the pushed-forward reference bubbles. Functions are represented
/// over the physical orthonormal scalar basis `ô_m = φ̂_m ∘ x̂ / √det J`.
pub struct ElementDisplacementBasis {
    pub element: usize,
    /// Number of basis functions, `(k+2)(k+3)`.
    pub dim: usize,
    /// 2-norm condition estimate of the dual functional matrix.
    pub condition_estimate: f64,
    nx: DMatrix<f64>,
    ny: DMatrix<f64>,
    scalar: TriangleBasis,
    map: ElementMap,
    inv_sqrt_det: f64,
}

/// Builds the nodal displacement basis of `element`.
///
/// Solves the square dual system `V N = I`, where row blocks of `V` are the
/// facet-normal moment functionals (computed by exact quadrature) and the
/// interior bubble moments (exact by orthonormality). Fails with
/// [`FeSpaceError::SingularDualSystem`] when the system is numerically
/// singular, which only happens for degenerate element geometry.
pub fn build_element_displacement_basis(
    mesh: &Mesh,
    space: &SpaceSet,
    element: usize,
) -> Result<ElementDisplacementBasis, FeSpaceError> {
    let k = space.k;
    let nm = space.scalar_kp1.dim;
    let dim = 2 * nm;
    let n_moments = k + 2;
    let n_bubbles = bubble_dim(k);
    let map = mesh.element_map(element);
    let inv_sqrt_det = 1.0 / map.det.sqrt();

    let mut v_mat = DMatrix::zeros(dim, dim);
    let rule = &space.facet_rule;
    let q_vals = space.facet_basis.eval(&rule.points);
    for (l, facet_use) in mesh.element_to_facets[element].iter().enumerate() {
        let fm = mesh.facet_map(facet_use.facet);
        let normal = mesh.facets[facet_use.facet].normal;
        let pts_ref: Vec<[f64; 2]> =
            rule.points.iter().map(|&t| map.to_reference(fm.to_physical(t))).collect();
        let phi = space.scalar_kp1.eval(&pts_ref);
        let scale = fm.len.sqrt() * inv_sqrt_det;
        for i in 0..n_moments {
            for m in 0..nm {
                let mut acc = 0.0;
                for (q, &w) in rule.weights.iter().enumerate() {
                    acc += w * phi[(q, m)] * q_vals[(q, i)];
                }
                v_mat[(l * n_moments + i, 2 * m)] = scale * acc * normal[0];
                v_mat[(l * n_moments + i, 2 * m + 1)] = scale * acc * normal[1];
            }
        }
    }
    // Interior functionals ℓ_r(v) = (det J)^{-1/2} ∫_T v·(β̂_r ∘ x̂): on the
    // physical orthonormal basis these rows are exactly the transposed
    // reference bubble coefficients.
    let bubbles = space.reference_bubbles();
    for r in 0..n_bubbles {
        for a in 0..dim {
            v_mat[(3 * n_moments + r, a)] = bubbles[(a, r)];
        }
    }

    if !v_mat.iter().all(|x| x.is_finite()) {
        return Err(FeSpaceError::SingularDualSystem { element, cond: f64::INFINITY });
    }
    let svd = v_mat.clone().svd(false, false);
    let sigma_max = svd.singular_values[0];
    let sigma_min = svd.singular_values[svd.singular_values.len() - 1];
    let cond = sigma_max / sigma_min;
    if !(sigma_min > 1e-12 * sigma_max) {
        return Err(FeSpaceError::SingularDualSystem { element, cond });
    }
    let n_mat = v_mat
        .lu()
        .try_inverse()
        .ok_or(FeSpaceError::SingularDualSystem { element, cond })?;

    let mut nx = DMatrix::zeros(nm, dim);
    let mut ny = DMatrix::zeros(nm, dim);
    for m in 0..nm {
        for j in 0..dim {
            nx[(m, j)] = n_mat[(2 * m, j)];
            ny[(m, j)] = n_mat[(2 * m + 1, j)];
        }
    }

    Ok(ElementDisplacementBasis {
        element,
        dim,
        condition_estimate: cond,
        nx,
        ny,
        scalar: space.scalar_kp1.clone(),
        map,
        inv_sqrt_det,
    })
}

impl ElementDisplacementBasis {
    /// Component values at reference points.
    pub fn values(&self, points: &[[f64; 2]]) -> DisplacementValues {
        let phi = self.scalar.eval(points);
        DisplacementValues {
            x: (&phi * &self.nx) * self.inv_sqrt_det,
            y: (phi * &self.ny) * self.inv_sqrt_det,
        }
    }

    /// Physical gradients at reference points.
    pub fn gradients(&self, points: &[[f64; 2]]) -> DisplacementGradients {
        let (g_xi, g_eta) = self.scalar.eval_grad(points);
        let npts = points.len();
        let nm = self.scalar.dim;
        let mut gx = DMatrix::zeros(npts, nm);
        let mut gy = DMatrix::zeros(npts, nm);
        for p in 0..npts {
            for m in 0..nm {
                let g = self.map.physical_grad([g_xi[(p, m)], g_eta[(p, m)]]);
                gx[(p, m)] = g[0];
                gy[(p, m)] = g[1];
            }
        }
        DisplacementGradients {
            xx: (&gx * &self.nx) * self.inv_sqrt_det,
            xy: (&gy * &self.nx) * self.inv_sqrt_det,
            yx: (&gx * &self.ny) * self.inv_sqrt_det,
            yy: (gy * &self.ny) * self.inv_sqrt_det,
        }
    }

    /// Divergence of every basis function at reference points.
    pub fn divergence(&self, points: &[[f64; 2]]) -> DMatrix<f64> {
        let g = self.gradients(points);
        g.xx + g.yy
    }

    /// The element map used by the basis.
    pub fn map(&self) -> &ElementMap {
        &self.map
    }
}

/// Moments of a vector field's normal trace on a facet against the first
/// `count` arclength-orthonormal facet basis functions. These are exactly the
/// values of the facet's normal-moment DOFs for that field.
pub fn facet_normal_moments<F: Fn([f64; 2]) -> [f64; 2]>(
    mesh: &Mesh,
    space: &SpaceSet,
    facet: usize,
    field: F,
    count: usize,
) -> Result<Vec<f64>, FeSpaceError> {
    let rule = interval_rule((2 * space.k + 8).min(crate::ref_elements::MAX_EXACTNESS))?;
    let fm = mesh.facet_map(facet);
    let normal = mesh.facets[facet].normal;
    let q_vals = space.facet_basis.eval(&rule.points);
    let sqrt_len = fm.len.sqrt();
    let mut moments = vec![0.0; count];
    for (q, &t) in rule.points.iter().enumerate() {
        let x = fm.to_physical(t);
        let u = field(x);
        let un = u[0] * normal[0] + u[1] * normal[1];
        for (i, m) in moments.iter_mut().enumerate() {
            *m += rule.weights[q] * un * q_vals[(q, i)];
        }
    }
    for m in &mut moments {
        *m *= sqrt_len;
    }
    Ok(moments)
}

/// Coefficients of the L²(F) projection of a scalar trace onto the span of
/// the first `count` arclength-orthonormal facet basis functions. These are
/// the facet pressure (`count = k`) and tangential (`count = k+1`) DOF values.
pub fn facet_scalar_moments<F: Fn([f64; 2]) -> f64>(
    mesh: &Mesh,
    space: &SpaceSet,
    facet: usize,
    field: F,
    count: usize,
) -> Result<Vec<f64>, FeSpaceError> {
    let rule = interval_rule((2 * space.k + 8).min(crate::ref_elements::MAX_EXACTNESS))?;
    let fm = mesh.facet_map(facet);
    let q_vals = space.facet_basis.eval(&rule.points);
    let sqrt_len = fm.len.sqrt();
    let mut moments = vec![0.0; count];
    for (q, &t) in rule.points.iter().enumerate() {
        let v = field(fm.to_physical(t));
        for (i, m) in moments.iter_mut().enumerate() {
            *m += rule.weights[q] * v * q_vals[(q, i)];
        }
    }
    for m in &mut moments {
        *m *= sqrt_len;
    }
    Ok(moments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Mesh;
    use crate::ref_elements::triangle_rule;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Applies all DOF functionals of an element to an analytic field, using
    /// quadrature independent from the basis construction.
    fn apply_functionals(
        mesh: &Mesh,
        space: &SpaceSet,
        element: usize,
        field: impl Fn([f64; 2]) -> [f64; 2],
    ) -> DVector<f64> {
        let k = space.k;
        let n_moments = k + 2;
        let map = mesh.element_map(element);
        let mut values = Vec::new();
        for facet_use in &mesh.element_to_facets[element] {
            let moments = facet_normal_moments(mesh, space, facet_use.facet, &field, n_moments)
                .unwrap();
            values.extend(moments);
        }
        // Interior: (det J)^{-1/2} ∫_T field · (β̂_r ∘ x̂) dx.
        let rule = triangle_rule(2 * k + 8).unwrap();
        let phi = space.scalar_kp1.eval(&rule.points);
        let bubbles = space.reference_bubbles();
        let nm = space.scalar_kp1.dim;
        for r in 0..bubble_dim(k) {
            let mut acc = 0.0;
            for (q, &w) in rule.weights.iter().enumerate() {
                let x = map.to_physical(rule.points[q]);
                let u = field(x);
                let mut bx = 0.0;
                let mut by = 0.0;
                for m in 0..nm {
                    bx += bubbles[(2 * m, r)] * phi[(q, m)];
                    by += bubbles[(2 * m + 1, r)] * phi[(q, m)];
                }
                acc += w * (u[0] * bx + u[1] * by);
            }
            values.push(acc * map.det / map.det.sqrt());
        }
        DVector::from_vec(values)
    }

    #[test]
    fn counts_match_pinned_examples() {
        let mesh = Mesh::build_uniform_unit_square(4);
        let std = build_space_set(&mesh, 1, Variant::Standard).unwrap();
        let c = std.counts();
        assert_eq!(c.pressure_volume, 96);
        assert_eq!(c.pressure_facet, 40);
        assert_eq!(c.tangential, 80);
        assert_eq!(c.displacement_total, 216);
        assert_eq!(c.displacement_normal_global, 120);
        assert_eq!(c.displacement_local, 96);
        assert_eq!(c.global_unknowns, 240);

        let relaxed = build_space_set(&mesh, 1, Variant::Relaxed).unwrap();
        let cr = relaxed.counts();
        assert_eq!(cr.displacement_total, 272);
        assert_eq!(cr.displacement_normal_global, 80);
        assert_eq!(cr.displacement_local, 192);

        let tiny = Mesh::build_uniform_unit_square(1);
        let ts = build_space_set(&tiny, 1, Variant::Standard).unwrap();
        assert_eq!(ts.counts().pressure_facet, 1);
    }

    #[test]
    fn degree_zero_is_rejected() {
        let mesh = Mesh::build_uniform_unit_square(1);
        assert!(matches!(
            build_space_set(&mesh, 0, Variant::Standard),
            Err(FeSpaceError::InvalidDegree(0))
        ));
    }

    #[test]
    fn count_formula_matches_entity_enumeration() {
        for (n, k, variant) in [
            (1usize, 1usize, Variant::Standard),
            (2, 2, Variant::Standard),
            (3, 3, Variant::Relaxed),
            (4, 2, Variant::Relaxed),
            (5, 1, Variant::Standard),
        ] {
            let mesh = Mesh::build_uniform_unit_square(n);
            let space = build_space_set(&mesh, k, variant).unwrap();
            let ni = mesh.num_interior_facets();
            let nbd = mesh.num_boundary_facets();
            let ne = mesh.num_elements();
            let n_shared = match variant {
                Variant::Standard => k + 2,
                Variant::Relaxed => k + 1,
            };
            let n_tops = match variant {
                Variant::Standard => 0,
                Variant::Relaxed => 3,
            };
            let c = space.counts();
            assert_eq!(c.pressure_volume, ne * triangle_poly_dim(k));
            assert_eq!(c.pressure_facet, ni * k);
            assert_eq!(c.tangential, ni * (k + 1));
            assert_eq!(c.displacement_normal_global, ni * n_shared);
            assert_eq!(c.displacement_local, ne * (bubble_dim(k) + n_tops));
            assert_eq!(
                c.global_unknowns,
                ni * (n_shared + k + 1 + k)
            );
            assert_eq!(c.data_slots, nbd * (n_shared + k + 1 + k));
            assert_eq!(c.local_unknowns, ne * (triangle_poly_dim(k) + bubble_dim(k) + n_tops));
        }
    }

    #[test]
    fn incidence_of_slots_is_valid() {
        // Global DOFs touched by at most two elements, local DOFs by exactly
        // one, and blocks tile the slot spaces without overlap.
        let mesh = Mesh::build_uniform_unit_square(3);
        for variant in [Variant::Standard, Variant::Relaxed] {
            let space = build_space_set(&mesh, 2, variant).unwrap();
            let mut local_refs = vec![0usize; space.num_local()];
            let mut global_refs = vec![0usize; space.num_global()];
            for e in 0..mesh.num_elements() {
                let mut element_slots = Vec::new();
                let pv = space.pressure_volume_block(e);
                element_slots.extend((0..pv.count).map(|i| pv.slot(i)));
                element_slots.extend(space.displacement_slots(e));
                for f in space.element_facets(e) {
                    let tan = space.tangential_block(f);
                    element_slots.extend((0..tan.count).map(|i| tan.slot(i)));
                    let ph = space.pressure_facet_block(f);
                    element_slots.extend((0..ph.count).map(|i| ph.slot(i)));
                }
                let mut seen = std::collections::HashSet::new();
                for slot in element_slots {
                    assert!(seen.insert(slot), "duplicate slot within element {e}");
                    match slot.class {
                        SlotClass::LocalUnknown => local_refs[slot.index] += 1,
                        SlotClass::GlobalUnknown => global_refs[slot.index] += 1,
                        SlotClass::Data => {}
                    }
                }
            }
            assert!(local_refs.iter().all(|&c| c == 1));
            assert!(global_refs.iter().all(|&c| (1..=2).contains(&c)));
        }
    }

    #[test]
    fn dual_basis_property_holds() {
        let mesh = Mesh::build_uniform_unit_square(2);
        for k in 1..=3 {
            let space = build_space_set(&mesh, k, Variant::Standard).unwrap();
            for element in [0usize, 3] {
                let basis = build_element_displacement_basis(&mesh, &space, element).unwrap();
                assert!(basis.condition_estimate.is_finite());
                assert!(basis.condition_estimate < 1e6);
                // Apply every functional to every basis function by
                // independent quadrature through closures over `values`.
                for j in 0..basis.dim {
                    let b = &basis;
                    let map = mesh.element_map(element);
                    let func = |x: [f64; 2]| -> [f64; 2] {
                        let v = b.values(&[map.to_reference(x)]);
                        [v.x[(0, j)], v.y[(0, j)]]
                    };
                    let applied = apply_functionals(&mesh, &space, element, func);
                    for i in 0..basis.dim {
                        let expected = if i == j { 1.0 } else { 0.0 };
                        assert_abs_diff_eq!(applied[i], expected, epsilon = 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn affine_fields_are_reproduced() {
        let mesh = Mesh::build_uniform_unit_square(2);
        let fields: [fn([f64; 2]) -> [f64; 2]; 3] = [
            |_| [1.0, 0.0],
            |_| [0.0, 1.0],
            |x| [x[0] + 2.0 * x[1] - 0.3, 3.0 * x[0] - x[1] + 0.1],
        ];
        for k in 1..=2 {
            let space = build_space_set(&mesh, k, Variant::Standard).unwrap();
            for element in 0..mesh.num_elements() {
                let basis = build_element_displacement_basis(&mesh, &space, element).unwrap();
                for field in fields {
                    let dofs = apply_functionals(&mesh, &space, element, field);
                    let pts = [[0.21, 0.37], [0.55, 0.1], [0.3, 0.6]];
                    let vals = basis.values(&pts);
                    let map = mesh.element_map(element);
                    for (p, &pt) in pts.iter().enumerate() {
                        let exact = field(map.to_physical(pt));
                        let mut ux = 0.0;
                        let mut uy = 0.0;
                        for j in 0..basis.dim {
                            ux += vals.x[(p, j)] * dofs[j];
                            uy += vals.y[(p, j)] * dofs[j];
                        }
                        assert_abs_diff_eq!(ux, exact[0], epsilon = 1e-12);
                        assert_abs_diff_eq!(uy, exact[1], epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn divergence_spans_full_polynomial_space() {
        let mesh = Mesh::build_uniform_unit_square(2);
        for k in 1..=3 {
            let space = build_space_set(&mesh, k, Variant::Standard).unwrap();
            let basis = build_element_displacement_basis(&mesh, &space, 5).unwrap();
            let rule = triangle_rule(2 * k + 2).unwrap();
            let div = basis.divergence(&rule.points);
            // Project divergences onto the orthonormal P^k basis: the
            // coefficient matrix must have full rank dim P^k.
            let pk = TriangleBasis::new(k);
            let pk_vals = pk.eval(&rule.points);
            let det = mesh.element_map(5).det;
            let mut coeffs = DMatrix::zeros(pk.dim, basis.dim);
            for a in 0..pk.dim {
                for j in 0..basis.dim {
                    let mut acc = 0.0;
                    for (q, &w) in rule.weights.iter().enumerate() {
                        acc += w * pk_vals[(q, a)] * div[(q, j)];
                    }
                    coeffs[(a, j)] = acc * det;
                }
            }
            let svd = coeffs.svd(false, false);
            let smax = svd.singular_values[0];
            let rank = svd.singular_values.iter().filter(|&&s| s > 1e-8 * smax).count();
            assert_eq!(rank, triangle_poly_dim(k));
        }
    }

    #[test]
    fn normal_traces_are_low_degree_polynomials() {
        // The normal trace of each basis function must lie in P^{k+1}(F):
        // projecting onto the orthonormal facet basis reproduces it exactly.
        let mesh = Mesh::build_uniform_unit_square(2);
        let k = 2;
        let space = build_space_set(&mesh, k, Variant::Standard).unwrap();
        let basis = build_element_displacement_basis(&mesh, &space, 1).unwrap();
        let map = mesh.element_map(1);
        let rule = interval_rule(2 * k + 6).unwrap();
        let q_vals = space.facet_basis.eval(&rule.points);
        for facet_use in &mesh.element_to_facets[1] {
            let fm = mesh.facet_map(facet_use.facet);
            let n = mesh.facets[facet_use.facet].normal;
            let pts_ref: Vec<[f64; 2]> =
                rule.points.iter().map(|&t| map.to_reference(fm.to_physical(t))).collect();
            let vals = basis.values(&pts_ref);
            for j in 0..basis.dim {
                let trace: Vec<f64> = (0..rule.points.len())
                    .map(|q| vals.x[(q, j)] * n[0] + vals.y[(q, j)] * n[1])
                    .collect();
                let mut coeffs = vec![0.0; k + 2];
                for (i, c) in coeffs.iter_mut().enumerate() {
                    for q in 0..rule.points.len() {
                        *c += rule.weights[q] * trace[q] * q_vals[(q, i)];
                    }
                }
                let scale = trace.iter().fold(1.0f64, |m, t| m.max(t.abs()));
                for q in 0..rule.points.len() {
                    let fitted: f64 =
                        (0..k + 2).map(|i| coeffs[i] * q_vals[(q, i)]).sum();
                    assert_abs_diff_eq!(fitted, trace[q], epsilon = 1e-12 * scale);
                }
            }
        }
    }

    /// Evaluates u·n on a facet from one adjacent element for a global
    /// random coefficient vector, at the given facet parameters.
    fn normal_trace_from_element(
        mesh: &Mesh,
        space: &SpaceSet,
        coeffs: &[f64],
        element: usize,
        facet: usize,
        params: &[f64],
    ) -> Vec<f64> {
        let basis = build_element_displacement_basis(mesh, space, element).unwrap();
        let map = mesh.element_map(element);
        let fm = mesh.facet_map(facet);
        let n = mesh.facets[facet].normal;
        let pts_ref: Vec<[f64; 2]> =
            params.iter().map(|&t| map.to_reference(fm.to_physical(t))).collect();
        let vals = basis.values(&pts_ref);
        let slots = space.displacement_slots(element);
        params
            .iter()
            .enumerate()
            .map(|(q, _)| {
                let mut ux = 0.0;
                let mut uy = 0.0;
                for (j, slot) in slots.iter().enumerate() {
                    let c = coeffs[space.combined_index(*slot)];
                    ux += vals.x[(q, j)] * c;
                    uy += vals.y[(q, j)] * c;
                }
                ux * n[0] + uy * n[1]
            })
            .collect()
    }

    #[test]
    fn hdiv_conformity_standard_and_boundary_traces() {
        let mesh = Mesh::build_uniform_unit_square(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 1..=3 {
            let space = build_space_set(&mesh, k, Variant::Standard).unwrap();
            // Random unknowns, zero boundary data.
            let mut coeffs = vec![0.0; space.num_slots()];
            for c in coeffs.iter_mut().take(space.num_unknowns()) {
                *c = rng.random_range(-1.0..1.0);
            }
            let norm = coeffs.iter().fold(0.0f64, |m, &c: &f64| m.max(c.abs()));
            let params: Vec<f64> = (0..7).map(|i| (i as f64 + 0.5) / 7.0).collect();
            for f in 0..mesh.num_facets() {
                let (e1, e2) = mesh.facet_to_elements[f];
                let t1 = normal_trace_from_element(&mesh, &space, &coeffs, e1, f, &params);
                match e2 {
                    Some(e2) => {
                        let t2 =
                            normal_trace_from_element(&mesh, &space, &coeffs, e2, f, &params);
                        for q in 0..params.len() {
                            assert!(
                                (t1[q] - t2[q]).abs() <= 1e-10 * norm,
                                "normal jump {} on interior facet {f}",
                                (t1[q] - t2[q]).abs()
                            );
                        }
                    }
                    None => {
                        for tq in &t1 {
                            assert!(
                                tq.abs() <= 1e-10 * norm,
                                "nonzero boundary normal trace {tq} on facet {f}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn relaxed_conformity_holds_in_moments_only() {
        let mesh = Mesh::build_uniform_unit_square(2);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let k = 2;
        let space = build_space_set(&mesh, k, Variant::Relaxed).unwrap();
        let mut coeffs = vec![0.0; space.num_slots()];
        for c in coeffs.iter_mut().take(space.num_unknowns()) {
            *c = rng.random_range(-1.0..1.0);
        }
        let norm = coeffs.iter().fold(0.0f64, |m, &c: &f64| m.max(c.abs()));
        let rule = interval_rule(2 * k + 6).unwrap();
        let q_vals = space.facet_basis.eval(&rule.points);
        let mut top_moment_seen: f64 = 0.0;
        for f in 0..mesh.num_facets() {
            let (e1, maybe_e2) = mesh.facet_to_elements[f];
            let t1 = normal_trace_from_element(&mesh, &space, &coeffs, e1, f, &rule.points);
            let jump: Vec<f64> = match maybe_e2 {
                Some(e2) => {
                    let t2 =
                        normal_trace_from_element(&mesh, &space, &coeffs, e2, f, &rule.points);
                    (0..t1.len()).map(|q| t1[q] - t2[q]).collect()
                }
                // Boundary: constrained shared moments are zero data, so the
                // "jump" is the trace itself.
                None => t1,
            };
            let len = mesh.facet_map(f).len;
            for i in 0..=k + 1 {
                let mut moment = 0.0;
                for q in 0..rule.points.len() {
                    moment += rule.weights[q] * jump[q] * q_vals[(q, i)];
                }
                moment *= len.sqrt();
                if i <= k {
                    assert!(
                        moment.abs() <= 1e-10 * norm,
                        "shared moment {i} of normal jump is {moment} on facet {f}"
                    );
                } else {
                    top_moment_seen = top_moment_seen.max(moment.abs());
                }
            }
        }
        assert!(
            top_moment_seen > 1e-6 * norm,
            "top moment of the normal jump should be generically nonzero"
        );
    }

    #[test]
    fn facet_parameterization_is_consistent_between_neighbours() {
        let mesh = Mesh::build_uniform_unit_square(3);
        for f in 0..mesh.num_facets() {
            let (e1, Some(e2)) = mesh.facet_to_elements[f] else { continue };
            let fm = mesh.facet_map(f);
            for t in [0.0, 0.3, 0.71, 1.0] {
                let x = fm.to_physical(t);
                let m1 = mesh.element_map(e1);
                let m2 = mesh.element_map(e2);
                let x1 = m1.to_physical(m1.to_reference(x));
                let x2 = m2.to_physical(m2.to_reference(x));
                for c in 0..2 {
                    assert_abs_diff_eq!(x1[c], x[c], epsilon = 1e-14);
                    assert_abs_diff_eq!(x2[c], x[c], epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn degenerate_element_reports_singular_dual_system() {
        let mesh = Mesh::from_raw(
            vec![[0.0, 0.0], [1.0, 0.0], [0.5, 1e-14]],
            vec![[0, 1, 2]],
        );
        let space = build_space_set(&mesh, 1, Variant::Standard).unwrap();
        match build_element_displacement_basis(&mesh, &space, 0) {
            Err(FeSpaceError::SingularDualSystem { element, .. }) => assert_eq!(element, 0),
            other => panic!("expected SingularDualSystem, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn facet_scalar_moments_reproduce_polynomial_coefficients() {
        let mesh = Mesh::build_uniform_unit_square(2);
        let space = build_space_set(&mesh, 2, Variant::Standard).unwrap();
        // A quadratic trace lies in the span of the first three orthonormal
        // facet functions: projecting and re-expanding reproduces it.
        let f = 7; // some interior facet
        let field = |x: [f64; 2]| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[0];
        let moments = facet_scalar_moments(&mesh, &space, f, field, 3).unwrap();
        let fm = mesh.facet_map(f);
        let params = [0.12, 0.5, 0.9];
        let q_vals = space.facet_basis.eval(&params);
        for (q, &t) in params.iter().enumerate() {
            let exact = field(fm.to_physical(t));
            let fitted: f64 = (0..3)
                .map(|i| moments[i] * q_vals[(q, i)] / fm.len.sqrt())
                .sum();
            assert_abs_diff_eq!(fitted, exact, epsilon = 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn combined_indexing_is_a_bijection(
            n in 1usize..4,
            k in 1usize..4,
            relaxed in proptest::bool::ANY,
        ) {
            let mesh = Mesh::build_uniform_unit_square(n);
            let variant = if relaxed { Variant::Relaxed } else { Variant::Standard };
            let space = build_space_set(&mesh, k, variant).unwrap();
            let mut hit = vec![false; space.num_slots()];
            for e in 0..mesh.num_elements() {
                let pv = space.pressure_volume_block(e);
                for i in 0..pv.count {
                    hit[space.combined_index(pv.slot(i))] = true;
                }
                for slot in space.displacement_slots(e) {
                    hit[space.combined_index(slot)] = true;
                }
            }
            for f in 0..mesh.num_facets() {
                let tan = space.tangential_block(f);
                for i in 0..tan.count {
                    hit[space.combined_index(tan.slot(i))] = true;
                }
                let ph = space.pressure_facet_block(f);
                for i in 0..ph.count {
                    hit[space.combined_index(ph.slot(i))] = true;
                }
            }
            prop_assert!(hit.iter().all(|&h| h), "every combined slot reachable exactly once");
        }
    }
}
