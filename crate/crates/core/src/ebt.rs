//! Escalator Boxcar Train.
//!
//! The population is a sum of cohorts `Σ mⁱ δ_{xⁱ}`. On every window
//! `[kΔt, (k+1)Δt)` positions follow the growth rate, masses decay with the
//! mortality rate and the youngest (boundary) cohort collects all births:
//!
//! ```text
//! ẋⁱ = b(t, μ; u)(xⁱ)                      all cohorts
//! ṁⁱ = −c(t, μ; u)(xⁱ) mⁱ                  interior cohorts
//! ṁᵇ = −c(t, μ; u)(xᵇ) mᵇ + Σ_{i≠b} β(t, μ; u)(xⁱ) mⁱ
//! ```
//!
//! At the end of each window the boundary cohort is frozen as an interior one
//! and a new boundary cohort is created at `x = 0` with zero mass.
//!
//! Storage order is creation order: the `n` initial cohorts first, then the
//! boundary cohorts; the boundary cohort is always the last entry.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::Control;
use crate::error::{Error, Result};
use crate::measure::{flat_distance, DiscreteMeasure};
use crate::model::{ModelSpec, Partials, Profile};
use crate::scalar::Real;

/// Where the initial cohort of each cell is placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Left cell edge `i·Δx`.
    #[default]
    GridLeft,
    /// Mass centroid of the cell (midpoint for empty cells).
    Centroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Discretization<T> {
    /// Number of initial cells `n`.
    pub cells: usize,
    /// Window length `Δt`.
    pub window: T,
    /// RK4 substeps per window.
    #[serde(default = "one")]
    pub substeps: usize,
    /// Initial cell width `Δx`; defaults to `Δt`.
    #[serde(default)]
    pub cell_width: Option<T>,
    #[serde(default)]
    pub placement: Placement,
    /// Let the boundary cohort's own mass contribute to the birth sum.
    #[serde(default)]
    pub birth_includes_boundary: bool,
}

fn one() -> usize {
    1
}

impl<T: Real> Discretization<T> {
    pub fn new(cells: usize, window: T, substeps: usize) -> Self {
        Self {
            cells,
            window,
            substeps,
            cell_width: None,
            placement: Placement::GridLeft,
            birth_includes_boundary: false,
        }
    }

    pub fn with_cell_width(mut self, dx: T) -> Self {
        self.cell_width = Some(dx);
        self
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.placement = placement;
        self
    }

    pub fn cell_width(&self) -> T {
        self.cell_width.unwrap_or(self.window)
    }

    pub fn check(&self) -> Result<()> {
        if self.cells == 0 {
            return Err(Error::Config("at least one initial cell is required".into()));
        }
        if !(self.window > T::zero()) {
            return Err(Error::Config("window length must be positive".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        if !(self.cell_width() > T::zero()) {
            return Err(Error::Config("cell width must be positive".into()));
        }
        Ok(())
    }

    /// Number of windows tiling `[0, horizon]`.
    pub fn windows(&self, horizon: T) -> Result<usize> {
        self.check()?;
        integer_ratio(horizon, self.window)
            .filter(|&w| w > 0)
            .ok_or_else(|| Error::Config(format!("horizon {horizon} is not a multiple of the window {}", self.window)))
    }

    pub fn window_start(&self, k: usize) -> T {
        T::from_usize_lossy(k) * self.window
    }
}

/// `Some(r)` when `num / den` is within rounding of the integer `r`.
pub(crate) fn integer_ratio<T: Real>(num: T, den: T) -> Option<usize> {
    let r = (num / den).to_f64_lossy();
    let k = r.round();
    (k >= 0.0 && (r - k).abs() <= 1e-9 * k.max(1.0)).then_some(k as usize)
}

/// Initial measure: explicit atoms or a density on `[0, support]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", tag = "kind", rename_all = "snake_case")]
pub enum InitialDatum<T> {
    Atoms { measure: DiscreteMeasure<T> },
    Density { density: Profile<T>, support: T },
}

const SIMPSON_PANELS: usize = 8;

impl<T: Real> InitialDatum<T> {
    pub fn atoms(measure: DiscreteMeasure<T>) -> Self {
        Self::Atoms { measure }
    }

    /// `(mass, first moment)` of the datum on `[lo, hi)`.
    fn cell_moments(&self, lo: T, hi: T) -> (T, T) {
        match self {
            Self::Atoms { measure } => measure
                .atoms()
                .filter(|(x, _)| *x >= lo && *x < hi)
                .fold((T::zero(), T::zero()), |(m, s), (x, w)| (m + w, s + w * x)),
            Self::Density { density, support } => {
                let hi = hi.min(*support);
                if !(hi > lo) {
                    return (T::zero(), T::zero());
                }
                let h = (hi - lo) / T::from_usize_lossy(SIMPSON_PANELS);
                let (mut m, mut s) = (T::zero(), T::zero());
                for k in 0..=SIMPSON_PANELS {
                    let w = if k == 0 || k == SIMPSON_PANELS {
                        T::one()
                    } else if k % 2 == 1 {
                        T::lit(4.0)
                    } else {
                        T::lit(2.0)
                    };
                    let x = lo + h * T::from_usize_lossy(k);
                    let f = density.value(x).max(T::zero());
                    m += w * f;
                    s += w * f * x;
                }
                let c = h / T::lit(3.0);
                (m * c, s * c)
            }
        }
    }

    fn extent(&self) -> T {
        match self {
            Self::Atoms { measure } => measure.points().last().copied().unwrap_or_else(T::zero),
            Self::Density { support, .. } => *support,
        }
    }

    /// Discrete stand-in for the datum: the atoms themselves, or `resolution`
    /// midpoint atoms carrying the Simpson mass of their subcell.
    pub fn fine_measure(&self, resolution: usize) -> Result<DiscreteMeasure<T>> {
        match self {
            Self::Atoms { measure } => Ok(measure.clone()),
            Self::Density { support, .. } => {
                let h = *support / T::from_usize_lossy(resolution.max(1));
                let mut points = Vec::with_capacity(resolution);
                let mut masses = Vec::with_capacity(resolution);
                for i in 0..resolution.max(1) {
                    let lo = h * T::from_usize_lossy(i);
                    points.push(lo + h / T::lit(2.0));
                    masses.push(self.cell_moments(lo, lo + h).0);
                }
                DiscreteMeasure::normalize(&points, &masses)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialCohorts<T> {
    pub positions: Vec<T>,
    pub masses: Vec<T>,
    /// Mass found beyond the last cell and added to it.
    pub overflow: T,
}

/// Cell masses `mⁱ = μ₀([iΔx, (i+1)Δx))`, `i = 0..n-1`, with positions by the
/// placement rule. Mass beyond `nΔx` joins the last cell.
pub fn init_cohorts<T: Real>(datum: &InitialDatum<T>, disc: &Discretization<T>) -> Result<InitialCohorts<T>> {
    disc.check()?;
    let n = disc.cells;
    let dx = disc.cell_width();
    let mut positions = Vec::with_capacity(n);
    let mut masses = Vec::with_capacity(n);
    let mut firsts = Vec::with_capacity(n);
    for i in 0..n {
        let lo = dx * T::from_usize_lossy(i);
        let (m, s) = datum.cell_moments(lo, lo + dx);
        positions.push(lo);
        masses.push(m);
        firsts.push(s);
    }
    let end = dx * T::from_usize_lossy(n);
    let extent = datum.extent();
    let (overflow, overflow_first) = if extent >= end {
        datum.cell_moments(end, extent + T::one())
    } else {
        (T::zero(), T::zero())
    };
    if overflow > T::zero() {
        log::warn!("initial datum has mass {overflow} beyond the last cell; added to cell {}", n - 1);
        masses[n - 1] += overflow;
        firsts[n - 1] += overflow_first;
    }
    if disc.placement == Placement::Centroid {
        for i in 0..n {
            positions[i] = if masses[i] > T::zero() {
                firsts[i] / masses[i]
            } else {
                positions[i] + dx / T::lit(2.0)
            };
        }
    }
    Ok(InitialCohorts {
        positions,
        masses,
        overflow,
    })
}

/// Cohort positions and masses at time `t` after `window` completed windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct EbtState<T> {
    pub t: T,
    pub window: usize,
    pub positions: Vec<T>,
    pub masses: Vec<T>,
}

impl<T: Real> EbtState<T> {
    /// Initial cohorts followed by the first boundary cohort `(0, 0)`.
    pub fn initial(cohorts: &InitialCohorts<T>) -> Self {
        let mut positions = cohorts.positions.clone();
        let mut masses = cohorts.masses.clone();
        positions.push(T::zero());
        masses.push(T::zero());
        Self {
            t: T::zero(),
            window: 0,
            positions,
            masses,
        }
    }

    pub fn cohorts(&self) -> usize {
        self.positions.len()
    }

    pub fn boundary_index(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn boundary_mass(&self) -> T {
        self.masses[self.boundary_index()]
    }

    pub fn total_mass(&self) -> T {
        self.masses.iter().copied().sum()
    }

    /// `Σ mⁱ δ_{xⁱ}`; negative round-off masses are clipped to zero and empty
    /// cohorts dropped.
    pub fn as_measure(&self) -> DiscreteMeasure<T> {
        let masses: Vec<T> = self.masses.iter().map(|m| m.max(T::zero())).collect();
        let positions: Vec<T> = self.positions.iter().map(|x| x.max(T::zero())).collect();
        DiscreteMeasure::normalize(&positions, &masses).expect("cohort data is finite")
    }

    /// Freezes the boundary cohort and appends a new one at `(0, 0)`.
    pub fn internalize(&mut self) {
        self.positions.push(T::zero());
        self.masses.push(T::zero());
        self.window += 1;
    }
}

/// Densities `A = Σ mʲ f̄(xʲ)` for growth, mortality and birth.
fn densities<T: Real>(model: &ModelSpec<T>, x: &[T], m: &[T]) -> [T; 3] {
    let mut out = [T::zero(); 3];
    for (slot, (_, rate)) in out.iter_mut().zip(model.rates()) {
        *slot = x.iter().zip(m).map(|(&xi, &mi)| mi * rate.kernel.value(xi)).sum();
    }
    out
}

/// Right-hand side of the cohort system.
pub fn rhs<T: Real>(
    model: &ModelSpec<T>,
    t: T,
    state: &EbtState<T>,
    u: &[T],
    birth_includes_boundary: bool,
) -> (Vec<T>, Vec<T>) {
    let k = state.cohorts();
    let mut dx = vec![T::zero(); k];
    let mut dm = vec![T::zero(); k];
    rhs_into(model, t, &state.positions, &state.masses, u, birth_includes_boundary, &mut dx, &mut dm);
    (dx, dm)
}

#[allow(clippy::too_many_arguments)]
fn rhs_into<T: Real>(
    model: &ModelSpec<T>,
    t: T,
    x: &[T],
    m: &[T],
    u: &[T],
    birth_includes_boundary: bool,
    dx: &mut [T],
    dm: &mut [T],
) {
    let [ab, ac, abeta] = densities(model, x, m);
    let bnd = x.len() - 1;
    let mut births = T::zero();
    for i in 0..x.len() {
        dx[i] = model.growth.core.eval(t, ab, x[i], u);
        dm[i] = -model.mortality.core.eval(t, ac, x[i], u) * m[i];
        if i != bnd || birth_includes_boundary {
            births += model.birth.core.eval(t, abeta, x[i], u) * m[i];
        }
    }
    dm[bnd] += births;
}

/// Tangent vectors `∂x/∂θ`, `∂m/∂θ` for every control degree of freedom `θ`
/// (piece-major: `θ = k·N + j`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tangents<T> {
    pub dx: Vec<Vec<T>>,
    pub dm: Vec<Vec<T>>,
}

impl<T: Real> Tangents<T> {
    fn zeros(dofs: usize, cohorts: usize) -> Self {
        Self {
            dx: vec![vec![T::zero(); cohorts]; dofs],
            dm: vec![vec![T::zero(); cohorts]; dofs],
        }
    }

    pub fn dofs(&self) -> usize {
        self.dx.len()
    }

    fn internalize(&mut self) {
        for v in self.dx.iter_mut().chain(self.dm.iter_mut()) {
            v.push(T::zero());
        }
    }
}

/// Settings for the tangent (variational) integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TangentOptions {
    /// Use central differences for families without analytic partials.
    pub allow_fd: bool,
}

impl Default for TangentOptions {
    fn default() -> Self {
        Self { allow_fd: true }
    }
}

/// Everything needed to push tangents through the right-hand side at one
/// stage state.
struct Linearization<T> {
    dims: usize,
    dens: [T; 3],
    // per-cohort rate values
    c: Vec<T>,
    beta: Vec<T>,
    // per-cohort partials, [growth, mortality, birth]
    d_density: [Vec<T>; 3],
    d_structure: [Vec<T>; 3],
    d_control: [Vec<T>; 3],
    kernel: [Vec<T>; 3],
    kernel_slope: [Vec<T>; 3],
}

impl<T: Real> Linearization<T> {
    fn new(dims: usize) -> Self {
        let e = || [Vec::new(), Vec::new(), Vec::new()];
        Self {
            dims,
            dens: [T::zero(); 3],
            c: Vec::new(),
            beta: Vec::new(),
            d_density: e(),
            d_structure: e(),
            d_control: e(),
            kernel: e(),
            kernel_slope: e(),
        }
    }

    fn assemble(&mut self, model: &ModelSpec<T>, t: T, x: &[T], m: &[T], u: &[T], opts: TangentOptions) -> Result<()> {
        let k = x.len();
        self.dens = densities(model, x, m);
        self.c.resize(k, T::zero());
        self.beta.resize(k, T::zero());
        for (r, (_, rate)) in model.rates().into_iter().enumerate() {
            self.d_density[r].resize(k, T::zero());
            self.d_structure[r].resize(k, T::zero());
            self.d_control[r].resize(k * self.dims, T::zero());
            self.kernel[r].resize(k, T::zero());
            self.kernel_slope[r].resize(k, T::zero());
            for i in 0..k {
                let Partials {
                    d_density,
                    d_structure,
                    d_control,
                } = rate.partials(t, self.dens[r], x[i], u, opts.allow_fd)?;
                self.d_density[r][i] = d_density;
                self.d_structure[r][i] = d_structure;
                self.d_control[r][i * self.dims..(i + 1) * self.dims].copy_from_slice(&d_control);
                self.kernel[r][i] = rate.kernel.value(x[i]);
                self.kernel_slope[r][i] = rate.kernel.derivative(x[i]);
            }
        }
        for i in 0..k {
            self.c[i] = model.mortality.core.eval(t, self.dens[1], x[i], u);
            self.beta[i] = model.birth.core.eval(t, self.dens[2], x[i], u);
        }
        Ok(())
    }

    /// `J·(tx, tm) + B·e_j` (the control term only when `control_dir` is set).
    #[allow(clippy::too_many_arguments)]
    fn apply(
        &self,
        m: &[T],
        tx: &[T],
        tm: &[T],
        control_dir: Option<usize>,
        birth_includes_boundary: bool,
        ox: &mut [T],
        om: &mut [T],
    ) {
        let k = m.len();
        let mut d_dens = [T::zero(); 3];
        for (r, slot) in d_dens.iter_mut().enumerate() {
            let (kv, ks) = (&self.kernel[r], &self.kernel_slope[r]);
            *slot = (0..k).map(|i| tm[i] * kv[i] + m[i] * ks[i] * tx[i]).sum();
        }
        let du = |r: usize, i: usize| match control_dir {
            Some(j) => self.d_control[r][i * self.dims + j],
            None => T::zero(),
        };
        let bnd = k - 1;
        let mut births = T::zero();
        for i in 0..k {
            ox[i] = self.d_density[0][i] * d_dens[0] + self.d_structure[0][i] * tx[i] + du(0, i);
            let dc = self.d_density[1][i] * d_dens[1] + self.d_structure[1][i] * tx[i] + du(1, i);
            om[i] = -dc * m[i] - self.c[i] * tm[i];
            if i != bnd || birth_includes_boundary {
                let db = self.d_density[2][i] * d_dens[2] + self.d_structure[2][i] * tx[i] + du(2, i);
                births += db * m[i] + self.beta[i] * tm[i];
            }
        }
        om[bnd] += births;
    }
}

/// One quadrature node reported to an observer during a run.
pub struct NodeView<'a, T> {
    pub window: usize,
    /// `0..=substeps`; node `substeps` is the window end before internalization.
    pub substep: usize,
    pub substeps: usize,
    pub t: T,
    /// Substep length.
    pub h: T,
    pub u: &'a [T],
    pub piece: usize,
    pub state: &'a EbtState<T>,
    pub tangents: Option<&'a Tangents<T>>,
}

impl<T: Real> NodeView<'_, T> {
    /// Composite-trapezoid weight of this node within its window.
    pub fn trapezoid_weight(&self) -> T {
        if self.substep == 0 || self.substep == self.substeps {
            self.h / T::lit(2.0)
        } else {
            self.h
        }
    }
}

/// Piece index of the control for every window; fails if a breakpoint falls
/// strictly inside a window.
pub fn window_pieces<T: Real>(control: &Control<T>, disc: &Discretization<T>, horizon: T) -> Result<Vec<usize>> {
    let windows = disc.windows(horizon)?;
    let ch = control.horizon();
    if (ch - horizon).abs() > T::lit(1e-9) * horizon.max(T::one()) {
        return Err(Error::Config(format!("control horizon {ch} differs from {horizon}")));
    }
    for &b in control.breakpoints() {
        if integer_ratio(b, disc.window).is_none() {
            return Err(Error::Config(format!(
                "control breakpoint {b} falls inside an EBT window of length {}",
                disc.window
            )));
        }
    }
    (0..windows)
        .map(|w| {
            let mid = disc.window_start(w) + disc.window / T::lit(2.0);
            control.piece_at(mid.min(ch))
        })
        .collect()
}

/// RK4 integrator over windows, optionally co-integrating tangents.
struct Engine<'a, T> {
    model: &'a ModelSpec<T>,
    disc: &'a Discretization<T>,
    tangent_opts: Option<TangentOptions>,
    // stage buffers
    kx: [Vec<T>; 4],
    km: [Vec<T>; 4],
    sx: Vec<T>,
    sm: Vec<T>,
    lin: Linearization<T>,
    tkx: Vec<[Vec<T>; 4]>,
    tkm: Vec<[Vec<T>; 4]>,
    tsx: Vec<T>,
    tsm: Vec<T>,
}

impl<'a, T: Real> Engine<'a, T> {
    fn new(model: &'a ModelSpec<T>, disc: &'a Discretization<T>, dofs: usize, tangent_opts: Option<TangentOptions>) -> Self {
        let e = || [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        Self {
            model,
            disc,
            tangent_opts,
            kx: e(),
            km: e(),
            sx: Vec::new(),
            sm: Vec::new(),
            lin: Linearization::new(model.control_dims()),
            tkx: (0..dofs).map(|_| e()).collect(),
            tkm: (0..dofs).map(|_| e()).collect(),
            tsx: Vec::new(),
            tsm: Vec::new(),
        }
    }

    fn resize(&mut self, k: usize) {
        for v in self.kx.iter_mut().chain(self.km.iter_mut()) {
            v.resize(k, T::zero());
        }
        self.sx.resize(k, T::zero());
        self.sm.resize(k, T::zero());
        self.tsx.resize(k, T::zero());
        self.tsm.resize(k, T::zero());
        for v in self.tkx.iter_mut().chain(self.tkm.iter_mut()).flat_map(|a| a.iter_mut()) {
            v.resize(k, T::zero());
        }
    }

    /// One RK4 substep of length `h` from `t`. Tangents for dofs outside
    /// `active` are identically zero and skipped.
    #[allow(clippy::too_many_arguments)]
    fn substep(
        &mut self,
        t: T,
        h: T,
        u: &[T],
        state: &mut EbtState<T>,
        tangents: Option<&mut Tangents<T>>,
        active: std::ops::Range<usize>,
        dims: usize,
        piece: usize,
    ) -> Result<()> {
        let k = state.cohorts();
        self.resize(k);
        let half = h / T::lit(2.0);
        let stage_t = [t, t + half, t + half, t + h];
        let stage_c = [T::zero(), half, half, h];
        let incl = self.disc.birth_includes_boundary;
        let mut tangents = tangents;
        for s in 0..4 {
            for i in 0..k {
                if s == 0 {
                    self.sx[i] = state.positions[i];
                    self.sm[i] = state.masses[i];
                } else {
                    self.sx[i] = state.positions[i] + stage_c[s] * self.kx[s - 1][i];
                    self.sm[i] = state.masses[i] + stage_c[s] * self.km[s - 1][i];
                }
            }
            let (kx_s, km_s) = (&mut self.kx[s], &mut self.km[s]);
            rhs_into(self.model, stage_t[s], &self.sx, &self.sm, u, incl, kx_s, km_s);

            if let (Some(tan), Some(opts)) = (tangents.as_deref_mut(), self.tangent_opts) {
                self.lin.assemble(self.model, stage_t[s], &self.sx, &self.sm, u, opts)?;
                for d in active.clone() {
                    for i in 0..k {
                        if s == 0 {
                            self.tsx[i] = tan.dx[d][i];
                            self.tsm[i] = tan.dm[d][i];
                        } else {
                            self.tsx[i] = tan.dx[d][i] + stage_c[s] * self.tkx[d][s - 1][i];
                            self.tsm[i] = tan.dm[d][i] + stage_c[s] * self.tkm[d][s - 1][i];
                        }
                    }
                    let (ox, om) = (&mut self.tkx[d][s], &mut self.tkm[d][s]);
                    self.lin
                        .apply(&self.sm, &self.tsx, &self.tsm, (d / dims == piece).then_some(d % dims), incl, ox, om);
                }
            }
        }
        let sixth = h / T::lit(6.0);
        let two = T::lit(2.0);
        for i in 0..k {
            state.positions[i] += sixth * (self.kx[0][i] + two * self.kx[1][i] + two * self.kx[2][i] + self.kx[3][i]);
            state.masses[i] += sixth * (self.km[0][i] + two * self.km[1][i] + two * self.km[2][i] + self.km[3][i]);
        }
        if let Some(tan) = tangents {
            for d in active {
                let (tx, tm) = (&self.tkx[d], &self.tkm[d]);
                for i in 0..k {
                    tan.dx[d][i] += sixth * (tx[0][i] + two * tx[1][i] + two * tx[2][i] + tx[3][i]);
                    tan.dm[d][i] += sixth * (tm[0][i] + two * tm[1][i] + two * tm[2][i] + tm[3][i]);
                }
            }
        }
        Ok(())
    }
}

/// Result of [`run`].
pub struct RunOutput<T> {
    pub state: EbtState<T>,
    pub tangents: Option<Tangents<T>>,
}

/// Integrates from `initial` over every window of `[0, horizon]`, calling
/// `observer` at each substep node. With `tangents` set, the variational
/// system for every control dof is integrated alongside with the same RK4
/// stages.
pub fn run<T: Real>(
    model: &ModelSpec<T>,
    initial: EbtState<T>,
    control: &Control<T>,
    horizon: T,
    disc: &Discretization<T>,
    tangents: Option<TangentOptions>,
    mut observer: impl FnMut(&NodeView<'_, T>) -> Result<()>,
) -> Result<RunOutput<T>> {
    model.check()?;
    let pieces = window_pieces(control, disc, horizon)?;
    if control.dims() != model.control_dims() {
        return Err(Error::Config(format!(
            "control has {} components, model expects {}",
            control.dims(),
            model.control_dims()
        )));
    }
    if let Some(v) = control.values().iter().find(|v| !model.control_box.contains(v)) {
        return Err(Error::Domain(format!("control value {v:?} outside the control box")));
    }
    let dims = control.dims();
    let dofs = control.pieces() * dims;
    let mut state = initial;
    let mut tan = tangents.map(|_| Tangents::zeros(dofs, state.cohorts()));
    let mut engine = Engine::new(model, disc, dofs, tangents);
    let s = disc.substeps;
    let h = disc.window / T::from_usize_lossy(s);

    for (w, &piece) in pieces.iter().enumerate() {
        let u = &control.values()[piece];
        let t0 = disc.window_start(w);
        let active = 0..((piece + 1) * dims).min(dofs);
        state.t = t0;
        for sub in 0..=s {
            if sub > 0 {
                let t = t0 + h * T::from_usize_lossy(sub - 1);
                engine.substep(t, h, u, &mut state, tan.as_mut(), active.clone(), dims, piece)?;
                state.t = if sub == s {
                    disc.window_start(w + 1)
                } else {
                    t0 + h * T::from_usize_lossy(sub)
                };
            }
            observer(&NodeView {
                window: w,
                substep: sub,
                substeps: s,
                t: state.t,
                h,
                u,
                piece,
                state: &state,
                tangents: tan.as_ref(),
            })?;
        }
        if state.masses.iter().chain(&state.positions).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite cohort data in window {w}")));
        }
        state.internalize();
        if let Some(t) = tan.as_mut() {
            t.internalize();
        }
    }
    Ok(RunOutput { state, tangents: tan })
}

/// Integrates one window from `state` (which must sit at a window start) and
/// internalizes the boundary cohort.
pub fn step_window<T: Real>(
    state: &EbtState<T>,
    model: &ModelSpec<T>,
    u: &[T],
    disc: &Discretization<T>,
) -> Result<EbtState<T>> {
    disc.check()?;
    if integer_ratio(state.t, disc.window) != Some(state.window) {
        return Err(Error::Config(format!(
            "state time {} is not the start of window {}",
            state.t, state.window
        )));
    }
    if !model.control_box.contains(u) {
        return Err(Error::Domain(format!("control {u:?} outside the control box")));
    }
    let mut engine = Engine::new(model, disc, 0, None);
    let mut next = state.clone();
    let h = disc.window / T::from_usize_lossy(disc.substeps);
    let t0 = state.t;
    for sub in 0..disc.substeps {
        engine.substep(t0 + h * T::from_usize_lossy(sub), h, u, &mut next, None, 0..0, u.len(), 0)?;
    }
    next.t = disc.window_start(state.window + 1);
    next.internalize();
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct Snapshot<T> {
    pub t: T,
    pub positions: Vec<T>,
    pub masses: Vec<T>,
}

impl<T: Real> Snapshot<T> {
    fn of(state: &EbtState<T>) -> Self {
        Self {
            t: state.t,
            positions: state.positions.clone(),
            masses: state.masses.clone(),
        }
    }

    pub fn as_measure(&self) -> DiscreteMeasure<T> {
        EbtState {
            t: self.t,
            window: 0,
            positions: self.positions.clone(),
            masses: self.masses.clone(),
        }
        .as_measure()
    }
}

/// Per-node summary used for quadrature and conservation checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct DenseRecord<T> {
    pub t: T,
    pub window: usize,
    pub substep: usize,
    pub total_mass: T,
    pub boundary_mass: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaveOptions {
    /// Snapshot every this many windows (plus `t = 0` and `t = T`).
    pub every: usize,
    /// Keep the full state at every substep node (needed by [`weak_residual`]).
    pub dense_states: bool,
}

impl Default for SaveOptions {
    fn default() -> Self {
        Self {
            every: 1,
            dense_states: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub horizon: T,
    pub window: T,
    pub substeps: usize,
    pub initial: DiscreteMeasure<T>,
    pub snapshots: Vec<Snapshot<T>>,
    pub dense: Vec<DenseRecord<T>>,
    pub dense_states: Option<Vec<Snapshot<T>>>,
    pub control: Control<T>,
    pub final_state: EbtState<T>,
    pub overflow: T,
}

/// Runs the EBT from the discretized initial datum.
pub fn simulate<T: Real>(
    model: &ModelSpec<T>,
    datum: &InitialDatum<T>,
    control: &Control<T>,
    horizon: T,
    disc: &Discretization<T>,
    save: SaveOptions,
) -> Result<Trajectory<T>> {
    let cohorts = init_cohorts(datum, disc)?;
    let initial = EbtState::initial(&cohorts);
    let initial_measure = initial.as_measure();
    let every = save.every.max(1);
    let mut snapshots = vec![Snapshot::of(&initial)];
    let mut dense = Vec::new();
    let mut dense_states = save.dense_states.then(Vec::new);
    let out = run(model, initial, control, horizon, disc, None, |node| {
        dense.push(DenseRecord {
            t: node.t,
            window: node.window,
            substep: node.substep,
            total_mass: node.state.total_mass(),
            boundary_mass: node.state.boundary_mass(),
        });
        if let Some(ds) = dense_states.as_mut() {
            ds.push(Snapshot::of(node.state));
        }
        Ok(())
    })?;
    // snapshots at window ends are taken from the post-internalization state,
    // which a node observer never sees; replay them from the dense stream is not
    // possible without states, so record them in a second light pass.
    let windows = disc.windows(horizon)?;
    if every < windows || dense_states.is_some() {
        let mut state = EbtState::initial(&cohorts);
        let pieces = window_pieces(control, disc, horizon)?;
        for (w, &piece) in pieces.iter().enumerate().take(windows - 1) {
            state = step_window(&state, model, &control.values()[piece], disc)?;
            if (w + 1) % every == 0 {
                snapshots.push(Snapshot::of(&state));
            }
        }
    }
    snapshots.push(Snapshot::of(&out.state));
    Ok(Trajectory {
        horizon,
        window: disc.window,
        substeps: disc.substeps,
        initial: initial_measure,
        snapshots,
        dense,
        dense_states,
        control: control.clone(),
        final_state: out.state,
        overflow: cohorts.overflow,
    })
}

/// Smooth test function `φ(t, a)` with its partial derivatives.
pub trait TestFunction<T> {
    fn value(&self, t: T, a: T) -> T;
    fn dt(&self, t: T, a: T) -> T;
    fn da(&self, t: T, a: T) -> T;
}

/// Test function from three closures.
pub struct FnTest<F, Ft, Fa> {
    pub value: F,
    pub dt: Ft,
    pub da: Fa,
}

impl<T, F, Ft, Fa> TestFunction<T> for FnTest<F, Ft, Fa>
where
    F: Fn(T, T) -> T,
    Ft: Fn(T, T) -> T,
    Fa: Fn(T, T) -> T,
{
    fn value(&self, t: T, a: T) -> T {
        (self.value)(t, a)
    }
    fn dt(&self, t: T, a: T) -> T {
        (self.dt)(t, a)
    }
    fn da(&self, t: T, a: T) -> T {
        (self.da)(t, a)
    }
}

/// Defect of the weak formulation along the numerical trajectory:
///
/// ```text
/// | ∫φ(T)dμ_T − ∫φ(0)dμ_0 − ∫₀ᵀ ∫ (∂_tφ + ∂_aφ·b − φ·c) dμ_t dt − ∫₀ᵀ φ(t,0) ∫ β dμ_t dt |
/// ```
///
/// with time integrals by the composite trapezoid rule on the substep nodes.
pub fn weak_residual<T: Real>(traj: &Trajectory<T>, model: &ModelSpec<T>, phi: &impl TestFunction<T>) -> Result<T> {
    let states = traj
        .dense_states
        .as_ref()
        .ok_or_else(|| Error::Config("weak residual needs a trajectory recorded with dense states".into()))?;
    let mut integral = T::zero();
    for (rec, snap) in traj.dense.iter().zip(states) {
        let piece = traj.control.piece_at(
            (T::from_usize_lossy(rec.window) * traj.window + traj.window / T::lit(2.0)).min(traj.horizon),
        )?;
        let u = &traj.control.values()[piece];
        let [ab, ac, abeta] = densities(model, &snap.positions, &snap.masses);
        let t = rec.t;
        let mut f = T::zero();
        let mut births = T::zero();
        for (&x, &m) in snap.positions.iter().zip(&snap.masses) {
            let b = model.growth.core.eval(t, ab, x, u);
            let c = model.mortality.core.eval(t, ac, x, u);
            f += m * (phi.dt(t, x) + phi.da(t, x) * b - phi.value(t, x) * c);
            births += model.birth.core.eval(t, abeta, x, u) * m;
        }
        f += phi.value(t, T::zero()) * births;
        let h = traj.window / T::from_usize_lossy(traj.substeps);
        let w = if rec.substep == 0 || rec.substep == traj.substeps {
            h / T::lit(2.0)
        } else {
            h
        };
        integral += w * f;
    }
    let first = states.first().ok_or_else(|| Error::Numeric("empty trajectory".into()))?;
    let last = states.last().unwrap();
    let at = |s: &Snapshot<T>| -> T { s.positions.iter().zip(&s.masses).map(|(&x, &m)| m * phi.value(s.t, x)).sum() };
    Ok((at(last) - at(first) - integral).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub window: f64,
    pub cells: usize,
    /// Flat distance between the datum and its cohort approximation.
    pub d0: f64,
    /// `max_t d(μⁿ(t), μ_ref(t))` over the common save times.
    pub error: f64,
    /// `error / (window + d0)`.
    pub constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub reference_window: f64,
    /// Least-squares `C` in `error ≈ C (window + d0)`.
    pub fitted_constant: f64,
    /// `error(Δt_k) / error(Δt_{k+1})` for consecutive rows.
    pub ratios: Vec<f64>,
}

/// Measures the error of each discretization against a finer reference run
/// at the common save times (multiples of the coarsest window).
pub fn convergence_study<T: Real>(
    model: &ModelSpec<T>,
    datum: &InitialDatum<T>,
    control: &Control<T>,
    horizon: T,
    schedule: &[Discretization<T>],
    reference: &Discretization<T>,
) -> Result<ConvergenceTable> {
    if schedule.is_empty() {
        return Err(Error::Config("convergence schedule is empty".into()));
    }
    if schedule.iter().any(|d| !(reference.window < d.window)) {
        return Err(Error::Config("reference window must be strictly finer than every schedule entry".into()));
    }
    let coarse = schedule.iter().map(|d| d.window).fold(T::zero(), T::max);
    let save_for = |d: &Discretization<T>| -> Result<SaveOptions> {
        let every = integer_ratio(coarse, d.window)
            .filter(|&e| e > 0)
            .ok_or_else(|| Error::Config(format!("window {} does not divide the coarsest window {coarse}", d.window)))?;
        Ok(SaveOptions {
            every,
            dense_states: false,
        })
    };
    let reference_traj = simulate(model, datum, control, horizon, reference, save_for(reference)?)?;
    let reference_measures: Vec<DiscreteMeasure<T>> = reference_traj.snapshots.iter().map(Snapshot::as_measure).collect();
    let fine = datum.fine_measure(1 << 14)?;

    let rows = schedule
        .par_iter()
        .map(|d| -> Result<ConvergenceRow> {
            let traj = simulate(model, datum, control, horizon, d, save_for(d)?)?;
            if traj.snapshots.len() != reference_measures.len() {
                return Err(Error::Numeric("save times of schedule and reference do not align".into()));
            }
            let error = traj
                .snapshots
                .iter()
                .zip(&reference_measures)
                .map(|(s, r)| flat_distance(&s.as_measure(), r))
                .fold(T::zero(), T::max)
                .to_f64_lossy();
            let d0 = flat_distance(&fine, &traj.initial).to_f64_lossy();
            let window = d.window.to_f64_lossy();
            Ok(ConvergenceRow {
                window,
                cells: d.cells,
                d0,
                error,
                constant: error / (window + d0),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (num, den) = rows.iter().fold((0.0, 0.0), |(n, d), r| {
        let z = r.window + r.d0;
        (n + r.error * z, d + z * z)
    });
    let ratios = rows.windows(2).map(|w| w[0].error / w[1].error).collect();
    Ok(ConvergenceTable {
        rows,
        reference_window: reference.window.to_f64_lossy(),
        fitted_constant: if den > 0.0 { num / den } else { 0.0 },
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ControlBox, RateFamily, RateFunction};

    fn model(b: f64, c: f64, beta: f64) -> ModelSpec<f64> {
        ModelSpec {
            growth: RateFunction::constant(b),
            mortality: RateFunction::constant(c),
            birth: RateFunction::constant(beta),
            control_box: ControlBox::unit(1),
            declared_lipschitz: 0.0,
        }
    }

    fn atoms(points: &[f64], masses: &[f64]) -> InitialDatum<f64> {
        InitialDatum::atoms(DiscreteMeasure::normalize(points, masses).unwrap())
    }

    #[test]
    fn init_cohorts_cells_and_placement() {
        let datum = atoms(&[0.6], &[2.0]);
        let disc = Discretization::new(2, 0.5, 1);
        let c = init_cohorts(&datum, &disc).unwrap();
        assert_eq!(c.masses, vec![0.0, 2.0]);
        assert_eq!(c.positions, vec![0.0, 0.5]);
        let c = init_cohorts(&datum, &disc.clone().with_placement(Placement::Centroid)).unwrap();
        assert_eq!(c.positions, vec![0.25, 0.6]);
        assert!(init_cohorts(&datum, &Discretization::new(0, 0.5, 1)).is_err());
        assert!(init_cohorts(&datum, &Discretization::new(2, 0.5, 1).with_cell_width(0.0)).is_err());
    }

    #[test]
    fn init_cohorts_partitions_mass() {
        let datum = atoms(&[0.1, 0.7, 1.3, 5.0], &[1.0, 2.0, 0.5, 0.25]);
        let c = init_cohorts(&datum, &Discretization::new(3, 0.5, 1)).unwrap();
        assert!((c.masses.iter().sum::<f64>() - 3.75).abs() < 1e-15);
        assert_eq!(c.overflow, 0.25);
        let density = InitialDatum::Density {
            density: Profile::constant(2.0),
            support: 3.0,
        };
        let c = init_cohorts(&density, &Discretization::new(6, 0.5, 1)).unwrap();
        assert!((c.masses.iter().sum::<f64>() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn rhs_examples() {
        let state = EbtState {
            t: 0.0,
            window: 0,
            positions: vec![1.0, 2.0, 3.0, 0.0],
            masses: vec![1.0, 2.0, 3.0, 0.0],
        };
        let (dx, dm) = rhs(&model(1.0, 0.0, 0.0), 0.0, &state, &[0.0], false);
        assert_eq!(dx, vec![1.0; 4]);
        assert_eq!(dm, vec![0.0; 4]);
        let (_, dm) = rhs(&model(1.0, 0.5, 0.0), 0.0, &state, &[0.0], false);
        assert_eq!(dm[1], -1.0);
        let (_, dm) = rhs(&model(1.0, 0.0, 0.1), 0.0, &state, &[0.0], false);
        assert!((dm[3] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn step_window_moves_and_internalizes() {
        let m = model(1.0, 0.3, 0.0);
        let disc = Discretization::new(1, 0.25, 4);
        let state = EbtState::initial(&InitialCohorts {
            positions: vec![2.0],
            masses: vec![1.5],
            overflow: 0.0,
        });
        let next = step_window(&state, &m, &[0.0], &disc).unwrap();
        assert_eq!(next.cohorts(), state.cohorts() + 1);
        assert!((next.positions[0] - 2.25).abs() < 1e-15);
        assert!((next.positions[1] - 0.25).abs() < 1e-15);
        assert_eq!(next.boundary_mass(), 0.0);
        assert_eq!(next.positions[2], 0.0);
        let exact = 1.5 * (-0.3f64 * 0.25).exp();
        let bound = (0.3f64 * 0.25 / 4.0).powi(4);
        assert!(((next.masses[0] - exact) / exact).abs() <= bound);
        let mut off = next.clone();
        off.t = 0.3;
        assert!(step_window(&off, &m, &[0.0], &disc).is_err());
    }

    #[test]
    fn simulate_conserves_and_decays() {
        let datum = atoms(&[0.5, 1.5], &[1.0, 2.0]);
        let disc = Discretization::new(2, 0.5, 2).with_cell_width(1.0);
        let u = Control::constant(5.0, vec![0.0]).unwrap();
        let traj = simulate(&model(1.0, 0.0, 0.0), &datum, &u, 5.0, &disc, SaveOptions::default()).unwrap();
        for r in &traj.dense {
            assert!((r.total_mass - 3.0).abs() < 1e-13);
        }
        assert_eq!(traj.final_state.cohorts(), 2 + 1 + 10);
        assert_eq!(traj.snapshots.len(), 11);

        let single = atoms(&[0.0], &[2.0]);
        let disc = Discretization::new(1, 0.25, 8);
        let u = Control::constant(1.0, vec![0.0]).unwrap();
        let traj = simulate(&model(1.0, 0.5, 0.0), &single, &u, 1.0, &disc, SaveOptions::default()).unwrap();
        let exact = 2.0 * (-0.5f64).exp();
        let rel = (traj.final_state.masses[0] - exact).abs() / exact;
        assert!(rel <= 10.0 * (0.5f64 * 0.25 / 8.0).powi(4));
    }

    #[test]
    fn misaligned_control_is_rejected() {
        let datum = atoms(&[0.5], &[1.0]);
        let disc = Discretization::new(1, 0.5, 1);
        let u = Control::new(vec![0.0, 0.75, 2.0], vec![vec![0.0], vec![1.0]]).unwrap();
        let err = simulate(&model(1.0, 0.0, 0.0), &datum, &u, 2.0, &disc, SaveOptions::default());
        assert!(matches!(err, Err(Error::Config(_))));
        let bad_horizon = Discretization::new(1, 0.3, 1);
        let u = Control::constant(1.0, vec![0.0]).unwrap();
        assert!(simulate(&model(1.0, 0.0, 0.0), &datum, &u, 1.0, &bad_horizon, SaveOptions::default()).is_err());
    }

    #[test]
    fn as_measure_drops_empty_cohorts() {
        let s = EbtState {
            t: 0.0,
            window: 0,
            positions: vec![1.0, 0.0],
            masses: vec![2.0, 0.0],
        };
        let mu = s.as_measure();
        assert_eq!(mu.points(), &[1.0]);
        assert_eq!(mu.total_mass(), s.total_mass());
    }

    #[test]
    fn weak_residual_trivial_cases() {
        let datum = atoms(&[0.5, 1.5], &[1.0, 2.0]);
        let disc = Discretization::new(2, 0.5, 2).with_cell_width(1.0);
        let u = Control::constant(2.0, vec![0.0]).unwrap();
        let m = model(1.0, 0.0, 0.0);
        let save = SaveOptions {
            every: 1,
            dense_states: true,
        };
        let traj = simulate(&m, &datum, &u, 2.0, &disc, save).unwrap();
        let zero = FnTest {
            value: |_: f64, _: f64| 0.0,
            dt: |_: f64, _: f64| 0.0,
            da: |_: f64, _: f64| 0.0,
        };
        assert_eq!(weak_residual(&traj, &m, &zero).unwrap(), 0.0);
        let unit = FnTest {
            value: |_: f64, _: f64| 1.0,
            dt: |_: f64, _: f64| 0.0,
            da: |_: f64, _: f64| 0.0,
        };
        assert!(weak_residual(&traj, &m, &unit).unwrap() < 1e-13);
        let plain = simulate(&m, &datum, &u, 2.0, &disc, SaveOptions::default()).unwrap();
        assert!(weak_residual(&plain, &m, &unit).is_err());
    }

    #[test]
    fn pure_transport_converges_exactly() {
        let datum = atoms(&[0.5, 1.5, 2.5], &[1.0, 2.0, 1.0]);
        let m = model(1.0, 0.0, 0.0);
        let u = Control::constant(4.0, vec![0.0]).unwrap();
        let disc = |dt: f64| Discretization::new(3, dt, 1).with_cell_width(1.0).with_placement(Placement::Centroid);
        let table = convergence_study(&m, &datum, &u, 4.0, &[disc(1.0), disc(0.5)], &disc(0.25)).unwrap();
        for r in &table.rows {
            assert!(r.error < 1e-12 && r.d0 < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn u_dependent_growth_uses_control() {
        let m = ModelSpec {
            growth: RateFunction::new(RateFamily::Separable {
                profile: Profile::constant(1.0),
                control: crate::model::ControlFactor::Affine {
                    constant: 0.0,
                    coefs: vec![2.0],
                },
            }),
            mortality: RateFunction::constant(0.0),
            birth: RateFunction::constant(0.0),
            control_box: ControlBox::unit(1),
            declared_lipschitz: 2.0,
        };
        let datum = atoms(&[0.0], &[1.0]);
        let disc = Discretization::new(1, 0.5, 1);
        let u = Control::uniform(1.0, vec![vec![0.25], vec![0.5]]).unwrap();
        let traj = simulate(&m, &datum, &u, 1.0, &disc, SaveOptions::default()).unwrap();
        assert!((traj.final_state.positions[0] - (0.25 + 0.5)).abs() < 1e-14);
    }
}
