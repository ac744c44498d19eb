//! BDF time stepping for the coupled flow–elasticity system.
//!
//! The order-`m` scheme replaces the time derivative by
//! `d_t φⁿ = (1/Δt) Σ_{j=0..m} δ_j φ^{n−j}`, with coefficients generated by
//! `δ(ζ) = Σ_{ℓ=1..m} (1−ζ)^ℓ/ℓ`. Scaling the flow equation by `−Δt/δ₀`
//! makes the per-step system symmetric indefinite with matrix
//! `B − C − M − (Δt/δ₀)A`, which is condensed to the facet unknowns and
//! factorized once per (order, Δt) pair.
//!
//! Starting values: BDF1 needs only the initial state; BDF2 takes its first
//! step with backward Euler (= BDF1); BDF3 takes two Crank–Nicolson steps in
//! which the flow equation is averaged between the time levels while the
//! quasi-static elasticity constraint is enforced at the new level (averaging
//! an algebraic constraint would inject drift into the DAE).

use thiserror::Error;

use crate::assembly::{
    condense_matrix, extend_with_data, lift_rhs, AssembledSystem, AssemblyError, CondensedSystem,
};
use crate::fe_spaces::{SpaceSet, Variant};
use crate::sparse_linalg::{factorize, Factorization, SparseError, SparseMatrix};

/// Errors from scheme construction and stepping.
#[derive(Debug, Error)]
pub enum TimeIntegrationError {
    /// Requested scheme order outside the supported range 1..=5.
    #[error("unsupported scheme order {0}; supported orders are 1 through 5")]
    UnsupportedOrder(usize),
    /// The history buffer does not hold enough prior states.
    #[error("history must hold at least {expected} states, got {got}")]
    InsufficientHistory { expected: usize, got: usize },
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Solver(#[from] SparseError),
}

/// Exact rational coefficients `δ_0..δ_m` of `ζ^j` in
/// `δ(ζ) = Σ_{ℓ=1..m} (1−ζ)^ℓ/ℓ`, each reduced with positive denominator.
pub fn bdf_coefficients(m: usize) -> Result<Vec<(i64, i64)>, TimeIntegrationError> {
    if !(1..=5).contains(&m) {
        return Err(TimeIntegrationError::UnsupportedOrder(m));
    }
    let binom = |n: i64, k: i64| -> i64 {
        let mut v = 1i64;
        for i in 0..k {
            v = v * (n - i) / (i + 1);
        }
        v
    };
    let mut coeffs = Vec::with_capacity(m + 1);
    for j in 0..=m as i64 {
        // δ_j = (−1)^j Σ_{ℓ=max(j,1)}^m C(ℓ, j)/ℓ.
        let (mut num, mut den) = (0i64, 1i64);
        for l in j.max(1)..=m as i64 {
            let (n2, d2) = (binom(l, j), l);
            num = num * d2 + n2 * den;
            den *= d2;
            let g = gcd(num.abs(), den);
            num /= g;
            den /= g;
        }
        let sign = if j % 2 == 0 { 1 } else { -1 };
        coeffs.push((sign * num, den));
    }
    Ok(coeffs)
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.max(1), b);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// A backward differentiation scheme with its step size.
#[derive(Debug, Clone)]
pub struct BdfScheme {
    /// Number of steps `m` (order of the method).
    pub m: usize,
    /// Exact rational coefficients `δ_0..δ_m`.
    pub coefficients: Vec<(i64, i64)>,
    /// Time step.
    pub dt: f64,
    /// Index of the next step to be taken.
    pub step_index: usize,
}

impl BdfScheme {
    pub fn new(m: usize, dt: f64) -> Result<BdfScheme, TimeIntegrationError> {
        Ok(BdfScheme { m, coefficients: bdf_coefficients(m)?, dt, step_index: 0 })
    }

    /// Coefficient `δ_j` as a float.
    pub fn delta(&self, j: usize) -> f64 {
        let (n, d) = self.coefficients[j];
        n as f64 / d as f64
    }
}

/// Discrete state at one time level, split by field. The layouts are:
/// element pressures element-major; facet fields facet-major (including any
/// constrained boundary values); displacement holds the facet normal moments
/// facet-major followed by the element-interior coefficients element-major.
#[derive(Debug, Clone)]
pub struct SystemState {
    pub time: f64,
    pub pressure: Vec<f64>,
    pub pressure_facet: Vec<f64>,
    pub displacement: Vec<f64>,
    pub displacement_facet: Vec<f64>,
}

impl SystemState {
    pub fn zeros(space: &SpaceSet, time: f64) -> SystemState {
        SystemState::from_full(space, time, &vec![0.0; space.num_slots()])
    }

    /// Splits a combined slot vector (unknowns followed by data) by field.
    /// Boundary values are carried along with the unknowns, so a state is a
    /// complete snapshot of all four fields.
    pub fn from_full(space: &SpaceSet, time: f64, full: &[f64]) -> SystemState {
        assert_eq!(full.len(), space.num_slots());
        let mut pressure = Vec::with_capacity(space.counts().pressure_volume);
        let mut pressure_facet = Vec::new();
        let mut displacement = Vec::new();
        let mut displacement_facet = Vec::new();
        for e in 0..space.num_elements() {
            let b = space.pressure_volume_block(e);
            for i in 0..b.count {
                pressure.push(full[space.combined_index(b.slot(i))]);
            }
        }
        for f in 0..space.num_facets() {
            let b = space.pressure_facet_block(f);
            for i in 0..b.count {
                pressure_facet.push(full[space.combined_index(b.slot(i))]);
            }
            let b = space.normal_moment_block(f);
            for i in 0..b.count {
                displacement.push(full[space.combined_index(b.slot(i))]);
            }
            let b = space.tangential_block(f);
            for i in 0..b.count {
                displacement_facet.push(full[space.combined_index(b.slot(i))]);
            }
        }
        for e in 0..space.num_elements() {
            if space.variant == Variant::Relaxed {
                for l in 0..3 {
                    displacement
                        .push(full[space.combined_index(space.top_moment_slot(e, l))]);
                }
            }
            let b = space.bubble_block(e);
            for i in 0..b.count {
                displacement.push(full[space.combined_index(b.slot(i))]);
            }
        }
        SystemState { time, pressure, pressure_facet, displacement, displacement_facet }
    }

    /// Reassembles the combined slot vector.
    pub fn to_full(&self, space: &SpaceSet) -> Vec<f64> {
        let mut full = vec![0.0; space.num_slots()];
        let mut it_p = self.pressure.iter();
        for e in 0..space.num_elements() {
            let b = space.pressure_volume_block(e);
            for i in 0..b.count {
                full[space.combined_index(b.slot(i))] = *it_p.next().expect("pressure len");
            }
        }
        let mut it_pf = self.pressure_facet.iter();
        let mut it_u = self.displacement.iter();
        let mut it_uf = self.displacement_facet.iter();
        for f in 0..space.num_facets() {
            let b = space.pressure_facet_block(f);
            for i in 0..b.count {
                full[space.combined_index(b.slot(i))] =
                    *it_pf.next().expect("pressure_facet len");
            }
            let b = space.normal_moment_block(f);
            for i in 0..b.count {
                full[space.combined_index(b.slot(i))] =
                    *it_u.next().expect("displacement len");
            }
            let b = space.tangential_block(f);
            for i in 0..b.count {
                full[space.combined_index(b.slot(i))] =
                    *it_uf.next().expect("displacement_facet len");
            }
        }
        for e in 0..space.num_elements() {
            if space.variant == Variant::Relaxed {
                for l in 0..3 {
                    full[space.combined_index(space.top_moment_slot(e, l))] =
                        *it_u.next().expect("displacement len");
                }
            }
            let b = space.bubble_block(e);
            for i in 0..b.count {
                full[space.combined_index(b.slot(i))] =
                    *it_u.next().expect("displacement len");
            }
        }
        assert!(it_p.next().is_none() && it_pf.next().is_none());
        assert!(it_u.next().is_none() && it_uf.next().is_none());
        full
    }
}

/// Marks the rows tested against scalar (pressure-type) test functions:
/// element pressures and facet pressures.
fn pressure_row_mask(space: &SpaceSet) -> Vec<bool> {
    let mut mask = vec![false; space.num_slots()];
    for e in 0..space.num_elements() {
        let b = space.pressure_volume_block(e);
        for i in 0..b.count {
            mask[space.combined_index(b.slot(i))] = true;
        }
    }
    for f in 0..space.num_facets() {
        let b = space.pressure_facet_block(f);
        for i in 0..b.count {
            mask[space.combined_index(b.slot(i))] = true;
        }
    }
    mask
}

/// Drives the implicit steps of one (order, Δt) pair: the condensed step
/// matrix is factorized once at construction and reused for every step.
pub struct TimeStepper<'a> {
    space: &'a SpaceSet,
    system: &'a AssembledSystem,
    pub scheme: BdfScheme,
    matrix: SparseMatrix,
    condensed: CondensedSystem,
    factor: Factorization,
    is_pressure_row: Vec<bool>,
}

impl<'a> TimeStepper<'a> {
    pub fn new(
        space: &'a SpaceSet,
        system: &'a AssembledSystem,
        m: usize,
        dt: f64,
    ) -> Result<TimeStepper<'a>, TimeIntegrationError> {
        let scheme = BdfScheme::new(m, dt)?;
        let matrix = system.step_matrix(dt / scheme.delta(0));
        let condensed = condense_matrix(&matrix, space)?;
        let factor = factorize(&condensed.condensed)?;
        let is_pressure_row = pressure_row_mask(space);
        Ok(TimeStepper { space, system, scheme, matrix, condensed, factor, is_pressure_row })
    }

    /// The assembled step matrix `B − C − M − (Δt/δ₀)A`.
    pub fn step_matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    /// Advances one step to `t_new`. `history` is chronological with the most
    /// recent state last and must hold at least `m` states; `f_load`/`g_load`
    /// are the full-slot load vectors at `t_new` and `data` the boundary
    /// values at `t_new`.
    pub fn bdf_step(
        &mut self,
        history: &[SystemState],
        f_load: &[f64],
        g_load: &[f64],
        data: &[f64],
        t_new: f64,
    ) -> Result<SystemState, TimeIntegrationError> {
        let m = self.scheme.m;
        if history.len() < m {
            return Err(TimeIntegrationError::InsufficientHistory {
                expected: m,
                got: history.len(),
            });
        }
        let space = self.space;
        let d0 = self.scheme.delta(0);
        let s = self.scheme.dt / d0;

        // History combination H = Σ_{j=1..m} (δ_j/δ₀) X^{n−j}.
        let mut h = vec![0.0; space.num_slots()];
        for j in 1..=m {
            let w = self.scheme.delta(j) / d0;
            let full = history[history.len() - j].to_full(space);
            for (hi, xi) in h.iter_mut().zip(&full) {
                *hi += w * xi;
            }
        }
        let mh = self.system.m.matvec(&h);
        let ch = self.system.c.matvec(&h);
        let rhs_full: Vec<f64> = (0..space.num_slots())
            .map(|i| {
                if self.is_pressure_row[i] {
                    -s * f_load[i] + mh[i] + ch[i]
                } else {
                    g_load[i]
                }
            })
            .collect();

        let state = self.solve_lifted(&rhs_full, data, t_new)?;
        self.scheme.step_index += 1;
        Ok(state)
    }

    fn solve_lifted(
        &self,
        rhs_full: &[f64],
        data: &[f64],
        t_new: f64,
    ) -> Result<SystemState, TimeIntegrationError> {
        let space = self.space;
        let rhs_unknowns = lift_rhs(&self.matrix, space, rhs_full, data);
        let reduced = self.condensed.reduce_rhs(&rhs_unknowns);
        let x_global = self.factor.solve(&reduced)?;
        let x = self.condensed.recover(&rhs_unknowns, &x_global);
        let full = extend_with_data(space, &x, data);
        Ok(SystemState::from_full(space, t_new, &full))
    }
}

/// One Crank–Nicolson starter step: flow averaged between levels, elasticity
/// enforced at the new level. Reused for both BDF3 starting steps.
pub struct CrankNicolsonStepper<'a> {
    space: &'a SpaceSet,
    system: &'a AssembledSystem,
    dt: f64,
    matrix: SparseMatrix,
    condensed: CondensedSystem,
    factor: Factorization,
    is_pressure_row: Vec<bool>,
}

impl<'a> CrankNicolsonStepper<'a> {
    pub fn new(
        space: &'a SpaceSet,
        system: &'a AssembledSystem,
        dt: f64,
    ) -> Result<CrankNicolsonStepper<'a>, TimeIntegrationError> {
        let matrix = system.step_matrix(dt / 2.0);
        let condensed = condense_matrix(&matrix, space)?;
        let factor = factorize(&condensed.condensed)?;
        Ok(CrankNicolsonStepper {
            space,
            system,
            dt,
            matrix,
            condensed,
            factor,
            is_pressure_row: pressure_row_mask(space),
        })
    }

    /// Steps from `prev` to `t_new = prev.time + Δt`; `f_prev` is the flow
    /// load at the previous level, `f_new`/`g_new`/`data` at the new level.
    pub fn step(
        &self,
        prev: &SystemState,
        f_prev: &[f64],
        f_new: &[f64],
        g_new: &[f64],
        data: &[f64],
        t_new: f64,
    ) -> Result<SystemState, TimeIntegrationError> {
        let space = self.space;
        let x_prev = prev.to_full(space);
        let mh = self.system.m.matvec(&x_prev);
        let ch = self.system.c.matvec(&x_prev);
        let ah = self.system.a.matvec(&x_prev);
        let half_dt = self.dt / 2.0;
        let rhs_full: Vec<f64> = (0..space.num_slots())
            .map(|i| {
                if self.is_pressure_row[i] {
                    -half_dt * (f_new[i] + f_prev[i]) - mh[i] - ch[i] + half_dt * ah[i]
                } else {
                    g_new[i]
                }
            })
            .collect();
        let rhs_unknowns = lift_rhs(&self.matrix, space, &rhs_full, data);
        let reduced = self.condensed.reduce_rhs(&rhs_unknowns);
        let x_global = self.factor.solve(&reduced)?;
        let x = self.condensed.recover(&rhs_unknowns, &x_global);
        let full = extend_with_data(space, &x, data);
        Ok(SystemState::from_full(space, t_new, &full))
    }
}

/// Produces the `m` starting states at `t⁰..t^{m−1}` from the initial state:
/// backward Euler for the BDF2 start, two Crank–Nicolson steps for BDF3.
/// Orders 4 and 5 bootstrap with a Crank–Nicolson chain (second-order start).
/// `loads_at(t)` returns the full-slot loads `(F, G)` and the boundary data
/// values at time `t`.
pub fn starting_values<'a, F>(
    space: &'a SpaceSet,
    system: &'a AssembledSystem,
    m: usize,
    dt: f64,
    initial: SystemState,
    mut loads_at: F,
) -> Result<Vec<SystemState>, TimeIntegrationError>
where
    F: FnMut(f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), AssemblyError>,
{
    if !(1..=5).contains(&m) {
        return Err(TimeIntegrationError::UnsupportedOrder(m));
    }
    let t0 = initial.time;
    let mut states = vec![initial];
    match m {
        1 => {}
        2 => {
            let mut be = TimeStepper::new(space, system, 1, dt)?;
            let t1 = t0 + dt;
            let (f, g, data) = loads_at(t1)?;
            let next = be.bdf_step(&states, &f, &g, &data, t1)?;
            states.push(next);
        }
        _ => {
            let cn = CrankNicolsonStepper::new(space, system, dt)?;
            let (mut f_prev, _, _) = loads_at(t0)?;
            for i in 1..m {
                let t_new = t0 + i as f64 * dt;
                let (f_new, g_new, data) = loads_at(t_new)?;
                let next =
                    cn.step(states.last().unwrap(), &f_prev, &f_new, &g_new, &data, t_new)?;
                states.push(next);
                f_prev = f_new;
            }
        }
    }
    Ok(states)
}

/// Maximum defect of the second-order backward-difference energy identity
/// `(d_tφⁿ, φⁿ) = (1/4Δt)(|φⁿ|² + |2φⁿ−φⁿ⁻¹|² − |φⁿ⁻¹|² − |2φⁿ⁻¹−φⁿ⁻²|²
/// + |φⁿ−2φⁿ⁻¹+φⁿ⁻²|²)` over a sequence of states, where `d_tφⁿ =
/// (3φⁿ − 4φⁿ⁻¹ + φⁿ⁻²)/(2Δt)` and `|·|` is induced by `ip`.
pub fn energy_identity_check<I>(sequence: &[Vec<f64>], dt: f64, ip: I) -> f64
where
    I: Fn(&[f64], &[f64]) -> f64,
{
    assert!(sequence.len() >= 3, "the identity needs at least three levels");
    let combine = |a: f64, x: &[f64], b: f64, y: &[f64], c: f64, z: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(y.iter().zip(z))
            .map(|(xi, (yi, zi))| a * xi + b * yi + c * zi)
            .collect()
    };
    let mut worst = 0.0f64;
    for n in 2..sequence.len() {
        let (p0, p1, p2) = (&sequence[n], &sequence[n - 1], &sequence[n - 2]);
        let dtphi = combine(3.0, p0, -4.0, p1, 1.0, p2)
            .iter()
            .map(|v| v / (2.0 * dt))
            .collect::<Vec<_>>();
        let lhs = ip(&dtphi, p0);
        let m0 = combine(2.0, p0, -1.0, p1, 0.0, p2);
        let m1 = combine(2.0, p1, -1.0, p2, 0.0, p2);
        let d2 = combine(1.0, p0, -2.0, p1, 1.0, p2);
        let rhs = (ip(p0, p0) + ip(&m0, &m0) - ip(p1, p1) - ip(&m1, &m1) + ip(&d2, &d2))
            / (4.0 * dt);
        worst = worst.max((lhs - rhs).abs());
    }
    worst
}
