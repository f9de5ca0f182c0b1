//! Model functions `b` (growth), `c` (mortality) and `β` (birth) in the
//! factored form
//!
//! ```text
//! f(t, μ; u)(a) = f̃(t, ∫ f̄ dμ, a; u)
//! ```
//!
//! where `f̄` is a bounded kernel and `f̃` is taken from a small set of
//! parametric families that carry analytic partial derivatives.

use serde::{Deserialize, Serialize};

use crate::cost::{CostSpec, RunningCost};
use crate::error::{Error, Result};
use crate::measure::DiscreteMeasure;
use crate::scalar::Real;

/// Piecewise-linear table with constant extrapolation outside the nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "Vec<(T, T)>", into = "Vec<(T, T)>")]
pub struct Table<T> {
    nodes: Vec<(T, T)>,
}

impl<T: Real> TryFrom<Vec<(T, T)>> for Table<T> {
    type Error = Error;

    fn try_from(nodes: Vec<(T, T)>) -> Result<Self> {
        Self::new(nodes)
    }
}

impl<T> From<Table<T>> for Vec<(T, T)> {
    fn from(t: Table<T>) -> Self {
        t.nodes
    }
}

impl<T: Real> Table<T> {
    pub fn new(nodes: Vec<(T, T)>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Config("table needs at least one node".into()));
        }
        if nodes.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Config("table nodes must be finite".into()));
        }
        if nodes.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Config("table abscissae must be strictly increasing".into()));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[(T, T)] {
        &self.nodes
    }

    /// Index `k` of the segment `[x_k, x_{k+1})` containing `a`, if inside.
    fn segment(&self, a: T) -> Option<usize> {
        let n = self.nodes.len();
        if n < 2 || a < self.nodes[0].0 || a >= self.nodes[n - 1].0 {
            return None;
        }
        let k = self.nodes.partition_point(|(x, _)| *x <= a);
        Some(k - 1)
    }

    pub fn value(&self, a: T) -> T {
        let n = self.nodes.len();
        match self.segment(a) {
            Some(k) => {
                let (x0, y0) = self.nodes[k];
                let (x1, y1) = self.nodes[k + 1];
                y0 + (y1 - y0) * (a - x0) / (x1 - x0)
            }
            None if a < self.nodes[0].0 => self.nodes[0].1,
            None => self.nodes[n - 1].1,
        }
    }

    /// Right derivative; zero outside the tabulated range.
    pub fn slope(&self, a: T) -> T {
        match self.segment(a) {
            Some(k) => {
                let (x0, y0) = self.nodes[k];
                let (x1, y1) = self.nodes[k + 1];
                (y1 - y0) / (x1 - x0)
            }
            None => T::zero(),
        }
    }

    pub fn max_slope(&self) -> T {
        self.nodes
            .windows(2)
            .map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0)).abs())
            .fold(T::zero(), T::max)
    }

    pub fn max_abs(&self) -> T {
        self.nodes.iter().map(|(_, y)| y.abs()).fold(T::zero(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.nodes.iter().map(|(_, y)| *y).fold(T::infinity(), T::min)
    }
}

/// Scalar function of the structure variable `a`.
///
/// Used as an integration kernel `f̄`, as a moment weight `γ`, as the age
/// factor of a separable rate and as an initial density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", tag = "family", rename_all = "snake_case")]
pub enum Profile<T> {
    Constant { value: T },
    /// `max(0, intercept + slope·a)`.
    Affine { intercept: T, slope: T },
    /// `peak · exp(-(a - center)² / (2 width²))`.
    Gaussian { peak: T, center: T, width: T },
    Tabulated { table: Table<T> },
}

impl<T: Real> Profile<T> {
    pub fn constant(value: T) -> Self {
        Self::Constant { value }
    }

    pub fn tabulated(nodes: Vec<(T, T)>) -> Result<Self> {
        Ok(Self::Tabulated { table: Table::new(nodes)? })
    }

    pub fn value(&self, a: T) -> T {
        match self {
            Self::Constant { value } => *value,
            Self::Affine { intercept, slope } => (*intercept + *slope * a).max(T::zero()),
            Self::Gaussian { peak, center, width } => {
                let z = (a - *center) / *width;
                *peak * (-(z * z) / T::lit(2.0)).exp()
            }
            Self::Tabulated { table } => table.value(a),
        }
    }

    /// Derivative in `a`. One-sided (right) at clip kinks and table nodes.
    pub fn derivative(&self, a: T) -> T {
        match self {
            Self::Constant { .. } => T::zero(),
            Self::Affine { intercept, slope } => {
                let v = *intercept + *slope * a;
                if v > T::zero() || (v == T::zero() && *slope > T::zero()) {
                    *slope
                } else {
                    T::zero()
                }
            }
            Self::Gaussian { center, width, .. } => {
                let z = (a - *center) / *width;
                -self.value(a) * z / *width
            }
            Self::Tabulated { table } => table.slope(a),
        }
    }

    /// Lipschitz constant in `a`.
    pub fn lipschitz(&self) -> T {
        match self {
            Self::Constant { .. } => T::zero(),
            Self::Affine { slope, .. } => slope.abs(),
            // max |g'| = peak / (width √e)
            Self::Gaussian { peak, width, .. } => peak.abs() / (width.abs() * T::lit(std::f64::consts::E.sqrt())),
            Self::Tabulated { table } => table.max_slope(),
        }
    }

    /// `sup |g|` on ℝ₊; `None` for an unbounded affine profile.
    pub fn sup_abs(&self) -> Option<T> {
        match self {
            Self::Constant { value } => Some(value.abs()),
            Self::Affine { intercept, slope } => (*slope <= T::zero()).then(|| intercept.max(T::zero())),
            Self::Gaussian { peak, .. } => Some(peak.abs()),
            Self::Tabulated { table } => Some(table.max_abs()),
        }
    }

    fn check(&self, what: &str) -> Result<()> {
        match self {
            Self::Gaussian { width, .. } if !(width.abs() > T::zero()) => {
                Err(Error::Config(format!("{what}: gaussian width must be nonzero")))
            }
            _ => Ok(()),
        }
    }

    fn is_nonnegative(&self) -> bool {
        match self {
            Self::Constant { value } => *value >= T::zero(),
            Self::Affine { .. } => true,
            Self::Gaussian { peak, .. } => *peak >= T::zero(),
            Self::Tabulated { table } => table.min_value() >= T::zero(),
        }
    }
}

/// Control factor `h(u)` of a separable rate, clipped to `≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", tag = "kind", rename_all = "snake_case")]
pub enum ControlFactor<T> {
    /// `constant + Σ coefs_j u_j`.
    Affine { constant: T, coefs: Vec<T> },
    /// `constant + Σ linear_j u_j + Σ quadratic_j u_j²`.
    Quadratic {
        constant: T,
        linear: Vec<T>,
        quadratic: Vec<T>,
    },
}

impl<T: Real> ControlFactor<T> {
    fn raw(&self, u: &[T]) -> T {
        match self {
            Self::Affine { constant, coefs } => *constant + dot(coefs, u),
            Self::Quadratic {
                constant,
                linear,
                quadratic,
            } => {
                *constant
                    + dot(linear, u)
                    + quadratic.iter().zip(u).map(|(q, v)| *q * *v * *v).sum::<T>()
            }
        }
    }

    pub fn value(&self, u: &[T]) -> T {
        self.raw(u).max(T::zero())
    }

    /// Gradient in `u`; zero inside the clipped region.
    pub fn gradient(&self, u: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|g| *g = T::zero());
        if self.raw(u) < T::zero() {
            return;
        }
        match self {
            Self::Affine { coefs, .. } => {
                for (g, c) in out.iter_mut().zip(coefs) {
                    *g = *c;
                }
            }
            Self::Quadratic { linear, quadratic, .. } => {
                for (j, g) in out.iter_mut().enumerate() {
                    let l = linear.get(j).copied().unwrap_or_else(T::zero);
                    let q = quadratic.get(j).copied().unwrap_or_else(T::zero);
                    *g = l + T::lit(2.0) * q * u[j];
                }
            }
        }
    }

    fn dims(&self) -> usize {
        match self {
            Self::Affine { coefs, .. } => coefs.len(),
            Self::Quadratic { linear, quadratic, .. } => linear.len().max(quadratic.len()),
        }
    }

    /// Lipschitz constant over the box.
    fn lipschitz(&self, bx: &ControlBox<T>) -> T {
        match self {
            Self::Affine { coefs, .. } => norm2(coefs),
            Self::Quadratic { linear, quadratic, .. } => {
                let g: Vec<T> = (0..self.dims())
                    .map(|j| {
                        let l = linear.get(j).copied().unwrap_or_else(T::zero);
                        let q = quadratic.get(j).copied().unwrap_or_else(T::zero);
                        let r = bx.lower[j].abs().max(bx.upper[j].abs());
                        l.abs() + T::lit(2.0) * q.abs() * r
                    })
                    .collect();
                norm2(&g)
            }
        }
    }

    fn sup(&self, bx: &ControlBox<T>) -> T {
        match self {
            Self::Affine { constant, coefs } => {
                let mut s = *constant;
                for (j, c) in coefs.iter().enumerate() {
                    s += (*c * bx.lower[j]).max(*c * bx.upper[j]);
                }
                s.max(T::zero())
            }
            Self::Quadratic {
                constant,
                linear,
                quadratic,
            } => {
                let mut s = *constant;
                for j in 0..self.dims() {
                    let l = linear.get(j).copied().unwrap_or_else(T::zero);
                    let q = quadratic.get(j).copied().unwrap_or_else(T::zero);
                    let f = |v: T| l * v + q * v * v;
                    s += f(bx.lower[j]).max(f(bx.upper[j]));
                }
                s.max(T::zero())
            }
        }
    }
}

/// Built-in families for the core `f̃(t, A, a; u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", tag = "family", rename_all = "snake_case")]
pub enum RateFamily<T> {
    Constant { value: T },
    /// `max(0, intercept + slope·a)`.
    Affine { intercept: T, slope: T },
    /// `peak · exp(-(a - center)² / (2 width²))`.
    Gaussian { peak: T, center: T, width: T },
    /// `value / (1 + A / capacity)`: saturating density dependence.
    Logistic { value: T, capacity: T },
    /// Linear interpolation in `a`, constant extrapolation.
    Tabulated { table: Table<T> },
    /// `g(a) · h(u)`.
    Separable { profile: Profile<T>, control: ControlFactor<T> },
}

/// Partial derivatives of `f̃` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Partials<T> {
    pub d_density: T,
    pub d_structure: T,
    pub d_control: Vec<T>,
}

impl<T: Real> RateFamily<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Constant { .. } => "constant",
            Self::Affine { .. } => "affine",
            Self::Gaussian { .. } => "gaussian",
            Self::Logistic { .. } => "logistic",
            Self::Tabulated { .. } => "tabulated",
            Self::Separable { .. } => "separable",
        }
    }

    pub fn eval(&self, _t: T, density: T, a: T, u: &[T]) -> T {
        match self {
            Self::Constant { value } => *value,
            Self::Affine { intercept, slope } => (*intercept + *slope * a).max(T::zero()),
            Self::Gaussian { peak, center, width } => Profile::Gaussian {
                peak: *peak,
                center: *center,
                width: *width,
            }
            .value(a),
            Self::Logistic { value, capacity } => *value / (T::one() + density / *capacity),
            Self::Tabulated { table } => table.value(a),
            Self::Separable { profile, control } => profile.value(a) * control.value(u),
        }
    }

    /// Whether [`analytic_partials`](Self::analytic_partials) is available.
    pub fn has_analytic_partials(&self) -> bool {
        !matches!(self, Self::Tabulated { .. })
    }

    pub fn analytic_partials(&self, t: T, density: T, a: T, u: &[T]) -> Option<Partials<T>> {
        let zero = T::zero();
        let mut d_control = vec![zero; u.len()];
        let (d_density, d_structure) = match self {
            Self::Constant { .. } => (zero, zero),
            Self::Affine { intercept, slope } => (
                zero,
                Profile::Affine {
                    intercept: *intercept,
                    slope: *slope,
                }
                .derivative(a),
            ),
            Self::Gaussian { .. } => {
                let v = self.eval(t, density, a, u);
                let Self::Gaussian { center, width, .. } = self else { unreachable!() };
                let z = (a - *center) / *width;
                (zero, -v * z / *width)
            }
            Self::Logistic { value, capacity } => {
                let q = T::one() + density / *capacity;
                (-*value / (*capacity * q * q), zero)
            }
            Self::Tabulated { .. } => return None,
            Self::Separable { profile, control } => {
                let g = profile.value(a);
                control.gradient(u, &mut d_control);
                d_control.iter_mut().for_each(|d| *d *= g);
                (zero, profile.derivative(a) * control.value(u))
            }
        };
        Some(Partials {
            d_density,
            d_structure,
            d_control,
        })
    }

    /// Central differences of `f̃` with step `1e-6·(1 + |arg|)`.
    pub fn fd_partials(&self, t: T, density: T, a: T, u: &[T]) -> Partials<T> {
        let step = |v: T| T::lit(1e-6) * (T::one() + v.abs());
        let two = T::lit(2.0);
        let hd = step(density);
        let d_density = (self.eval(t, density + hd, a, u) - self.eval(t, density - hd, a, u)) / (two * hd);
        let ha = step(a);
        let d_structure = (self.eval(t, density, a + ha, u) - self.eval(t, density, a - ha, u)) / (two * ha);
        let mut v = u.to_vec();
        let d_control = (0..u.len())
            .map(|j| {
                let hu = step(u[j]);
                v[j] = u[j] + hu;
                let fp = self.eval(t, density, a, &v);
                v[j] = u[j] - hu;
                let fm = self.eval(t, density, a, &v);
                v[j] = u[j];
                (fp - fm) / (two * hu)
            })
            .collect();
        Partials {
            d_density,
            d_structure,
            d_control,
        }
    }

    /// Upper bound for the Lipschitz constant in `(A, a, u)` on the box.
    pub fn lipschitz_bound(&self, bx: &ControlBox<T>) -> T {
        match self {
            Self::Constant { .. } => T::zero(),
            Self::Affine { slope, .. } => slope.abs(),
            Self::Gaussian { peak, width, .. } => Profile::Gaussian {
                peak: *peak,
                center: T::zero(),
                width: *width,
            }
            .lipschitz(),
            Self::Logistic { value, capacity } => value.abs() / capacity.abs(),
            Self::Tabulated { table } => table.max_slope(),
            Self::Separable { profile, control } => {
                let g_sup = profile.sup_abs().unwrap_or_else(T::infinity);
                (profile.lipschitz() * control.sup(bx)).max(g_sup * control.lipschitz(bx))
            }
        }
    }

    fn check(&self, bx: &ControlBox<T>, what: &str) -> Result<()> {
        match self {
            Self::Gaussian { width, .. } if !(width.abs() > T::zero()) => {
                Err(Error::Config(format!("{what}: gaussian width must be nonzero")))
            }
            Self::Logistic { capacity, .. } if !(*capacity > T::zero()) => {
                Err(Error::Config(format!("{what}: logistic capacity must be positive")))
            }
            Self::Separable { profile, control } => {
                profile.check(what)?;
                if control.dims() > bx.dims() {
                    return Err(Error::Config(format!(
                        "{what}: control factor uses {} components but the box has {}",
                        control.dims(),
                        bx.dims()
                    )));
                }
                if !profile.is_nonnegative() {
                    return Err(Error::Config(format!("{what}: separable age factor must be nonnegative")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// One model coefficient: kernel `f̄` plus core family `f̃`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct RateFunction<T> {
    pub kernel: Profile<T>,
    pub core: RateFamily<T>,
}

impl<T: Real> RateFunction<T> {
    /// Rate with a constant unit kernel (the density argument is then the
    /// total mass).
    pub fn new(core: RateFamily<T>) -> Self {
        Self {
            kernel: Profile::constant(T::one()),
            core,
        }
    }

    pub fn with_kernel(kernel: Profile<T>, core: RateFamily<T>) -> Self {
        Self { kernel, core }
    }

    pub fn constant(value: T) -> Self {
        Self::new(RateFamily::Constant { value })
    }

    /// `A = ∫ f̄ dμ`.
    pub fn density(&self, mu: &DiscreteMeasure<T>) -> T {
        mu.integrate(|x| self.kernel.value(x))
    }

    /// `f̃(t, ∫ f̄ dμ, a; u)`.
    pub fn eval(&self, t: T, mu: &DiscreteMeasure<T>, a: T, u: &[T]) -> T {
        self.core.eval(t, self.density(mu), a, u)
    }

    /// Analytic partials when the family has them, otherwise central
    /// differences if `allow_fd` is set.
    pub fn partials(&self, t: T, density: T, a: T, u: &[T], allow_fd: bool) -> Result<Partials<T>> {
        match self.core.analytic_partials(t, density, a, u) {
            Some(p) => Ok(p),
            None if allow_fd => Ok(self.core.fd_partials(t, density, a, u)),
            None => Err(Error::MissingPartials(self.core.name())),
        }
    }

    pub fn lipschitz_bound(&self, bx: &ControlBox<T>) -> T {
        self.core.lipschitz_bound(bx)
    }
}

/// Compact box `U = Π [lower_j, upper_j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ControlBox<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Real> ControlBox<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        let b = Self { lower, upper };
        b.check()?;
        Ok(b)
    }

    pub fn unit(dims: usize) -> Self {
        Self {
            lower: vec![T::zero(); dims],
            upper: vec![T::one(); dims],
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::LengthMismatch {
                what: "control box bounds",
                left: self.lower.len(),
                right: self.upper.len(),
            });
        }
        if self.lower.is_empty() {
            return Err(Error::Config("control box must have at least one dimension".into()));
        }
        for (l, u) in self.lower.iter().zip(&self.upper) {
            if !l.is_finite() || !u.is_finite() || l > u {
                return Err(Error::Config(format!("invalid control interval [{l}, {u}]")));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, u: &[T]) -> bool {
        u.len() == self.dims() && u.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, h))| v >= l && v <= h)
    }

    pub fn clamp(&self, u: &mut [T]) {
        for (v, (l, h)) in u.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.max(*l).min(*h);
        }
    }

    /// Euclidean diameter.
    pub fn diameter(&self) -> T {
        let d: Vec<T> = self.lower.iter().zip(&self.upper).map(|(l, u)| *u - *l).collect();
        norm2(&d)
    }
}

/// Which model coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coefficient {
    Growth,
    Mortality,
    Birth,
}

/// The triple `(b, c, β)` together with the control box and the declared
/// Lipschitz bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ModelSpec<T> {
    pub growth: RateFunction<T>,
    pub mortality: RateFunction<T>,
    pub birth: RateFunction<T>,
    pub control_box: ControlBox<T>,
    pub declared_lipschitz: T,
}

impl<T: Real> ModelSpec<T> {
    pub fn check(&self) -> Result<()> {
        self.control_box.check()?;
        for (what, r) in self.rates() {
            r.kernel.check(what)?;
            r.core.check(&self.control_box, what)?;
        }
        if !(self.declared_lipschitz >= T::zero()) {
            return Err(Error::Config("declared Lipschitz bound must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn rate(&self, which: Coefficient) -> &RateFunction<T> {
        match which {
            Coefficient::Growth => &self.growth,
            Coefficient::Mortality => &self.mortality,
            Coefficient::Birth => &self.birth,
        }
    }

    pub fn rates(&self) -> [(&'static str, &RateFunction<T>); 3] {
        [("growth", &self.growth), ("mortality", &self.mortality), ("birth", &self.birth)]
    }

    pub fn control_dims(&self) -> usize {
        self.control_box.dims()
    }

    /// `(f(t, μ; u))(a)` for the chosen coefficient; `u` must lie in the box.
    pub fn eval_rate(&self, which: Coefficient, t: T, mu: &DiscreteMeasure<T>, a: T, u: &[T]) -> Result<T> {
        if !self.control_box.contains(u) {
            return Err(Error::Domain(format!("control {u:?} outside the control box")));
        }
        if a < T::zero() {
            return Err(Error::Domain(format!("structure value {a} is negative")));
        }
        Ok(self.rate(which).eval(t, mu, a, u))
    }

    /// Largest analytic Lipschitz bound over the three coefficients.
    pub fn lipschitz_bound(&self) -> T {
        self.rates()
            .iter()
            .map(|(_, r)| r.lipschitz_bound(&self.control_box))
            .fold(T::zero(), T::max)
    }
}

/// Sampling plan for [`validate_spec`]: uniform grids over each argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SamplePlan<T> {
    pub time: (T, T),
    pub density: (T, T),
    pub structure: (T, T),
    /// Grid points per axis (≥ 2).
    pub points: usize,
}

impl<T: Real> SamplePlan<T> {
    pub fn new(horizon: T, max_density: T, max_structure: T) -> Self {
        Self {
            time: (T::zero(), horizon),
            density: (T::zero(), max_density),
            structure: (T::zero(), max_structure),
            points: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub name: &'static str,
    pub empirical_lipschitz: f64,
    pub min_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub rates: Vec<RateReport>,
    pub empirical_lipschitz: f64,
    pub declared_lipschitz: f64,
    pub lipschitz_violation: bool,
    pub negative_rate: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        !self.lipschitz_violation && !self.negative_rate
    }
}

fn linspace<T: Real>((lo, hi): (T, T), n: usize) -> Vec<T> {
    let n = n.max(2);
    (0..n)
        .map(|i| lo + (hi - lo) * T::from_usize_lossy(i) / T::from_usize_lossy(n - 1))
        .collect()
}

/// Estimates Lipschitz constants of `f̃` by difference quotients between
/// neighbouring grid points along each of `A`, `a` and every `u_j`, and checks
/// nonnegativity. Report-only.
pub fn validate_spec<T: Real>(model: &ModelSpec<T>, plan: &SamplePlan<T>) -> ValidationReport {
    let n = plan.points.max(2);
    let ts = linspace(plan.time, n.min(3));
    let dens = linspace(plan.density, n);
    let ages = linspace(plan.structure, n);
    let bx = &model.control_box;
    let dims = bx.dims();
    let per_u = if dims == 1 { n } else { n.min(4) };
    let u_axes: Vec<Vec<T>> = (0..dims).map(|j| linspace((bx.lower[j], bx.upper[j]), per_u)).collect();

    // all control grid points, row-major
    let mut controls: Vec<Vec<T>> = vec![Vec::new()];
    for axis in &u_axes {
        controls = controls
            .into_iter()
            .flat_map(|c| {
                axis.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(*v);
                    c
                })
            })
            .collect();
    }

    let mut rates = Vec::new();
    for (name, rate) in model.rates() {
        let f = &rate.core;
        let mut lip = T::zero();
        let mut min_value = T::infinity();
        let mut quotient = |v1: T, v2: T, h: T| {
            if h > T::zero() {
                lip = lip.max((v1 - v2).abs() / h);
            }
        };
        for &t in &ts {
            for u in &controls {
                for (ia, &a) in ages.iter().enumerate() {
                    for (id, &d) in dens.iter().enumerate() {
                        let v = f.eval(t, d, a, u);
                        min_value = min_value.min(v);
                        if id + 1 < dens.len() {
                            quotient(f.eval(t, dens[id + 1], a, u), v, dens[id + 1] - d);
                        }
                        if ia + 1 < ages.len() {
                            quotient(f.eval(t, d, ages[ia + 1], u), v, ages[ia + 1] - a);
                        }
                        for (j, axis) in u_axes.iter().enumerate() {
                            if let Some(k) = axis.iter().position(|x| *x == u[j]) {
                                if k + 1 < axis.len() {
                                    let mut w = u.clone();
                                    w[j] = axis[k + 1];
                                    quotient(f.eval(t, d, a, &w), v, axis[k + 1] - axis[k]);
                                }
                            }
                        }
                    }
                }
            }
        }
        rates.push(RateReport {
            name,
            empirical_lipschitz: lip.to_f64_lossy(),
            min_value: min_value.to_f64_lossy(),
        });
    }
    let empirical = rates.iter().map(|r| r.empirical_lipschitz).fold(0.0, f64::max);
    let declared = model.declared_lipschitz.to_f64_lossy();
    ValidationReport {
        lipschitz_violation: empirical > declared * (1.0 + 1e-9) + 1e-12,
        negative_rate: rates.iter().any(|r| r.min_value < 0.0),
        rates,
        empirical_lipschitz: empirical,
        declared_lipschitz: declared,
    }
}

/// Inputs of the age-structured welfare-policy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", default)]
pub struct WelfareParams<T> {
    /// Mortality `d(a)` as a table.
    pub mortality: Vec<(T, T)>,
    /// Birth rate `β̃(a, u)`.
    pub birth: RateFamily<T>,
    /// Discount rate `λ`.
    pub discount: T,
    /// Wage profile `w(a)` as a table.
    pub wage: Vec<(T, T)>,
    pub horizon: T,
    pub control_box: ControlBox<T>,
}

impl<T: Real> Default for WelfareParams<T> {
    fn default() -> Self {
        let l = |v: &[(f64, f64)]| v.iter().map(|&(a, b)| (T::lit(a), T::lit(b))).collect::<Vec<_>>();
        let fertility = Profile::Tabulated {
            table: Table::new(l(&[
                (0.0, 0.0),
                (19.5, 0.0),
                (20.5, 0.05),
                (39.5, 0.05),
                (40.5, 0.0),
                (100.0, 0.0),
            ]))
            .expect("static table"),
        };
        Self {
            mortality: l(&[(0.0, 0.005), (30.0, 0.005), (60.0, 0.02), (80.0, 0.06), (100.0, 0.2)]),
            birth: RateFamily::Separable {
                profile: fertility,
                control: ControlFactor::Affine {
                    constant: T::one(),
                    coefs: vec![T::one()],
                },
            },
            discount: T::lit(0.03),
            wage: l(&[
                (0.0, -0.2),
                (19.99, -0.2),
                (20.0, 1.0),
                (64.99, 1.0),
                (65.0, -0.5),
                (100.0, -0.5),
            ]),
            horizon: T::lit(50.0),
            control_box: ControlBox::unit(1),
        }
    }
}

/// Default initial age density of the welfare demonstration.
pub fn welfare_initial_density<T: Real>() -> Profile<T> {
    let l = |a: f64, b: f64| (T::lit(a), T::lit(b));
    Profile::Tabulated {
        table: Table::new(vec![l(0.0, 10.0), l(50.0, 8.0), l(80.0, 4.0), l(100.0, 0.0)]).expect("static table"),
    }
}

/// Builds the welfare model: `b ≡ 1`, `c(a) = d(a)`, `β = β̃(a, u)`, and the
/// running cost `−e^{−λt}(∫ w dμ − u·m_b)` (income negated for
/// minimization).
pub fn welfare_model<T: Real>(params: &WelfareParams<T>) -> Result<(ModelSpec<T>, CostSpec<T>)> {
    if !(params.discount >= T::zero()) {
        return Err(Error::Config("discount rate must be nonnegative".into()));
    }
    if !(params.horizon > T::zero()) {
        return Err(Error::Config("horizon must be positive".into()));
    }
    if params.control_box.dims() != 1 {
        return Err(Error::Config("welfare model has a single control dimension".into()));
    }
    let mortality = Table::new(params.mortality.clone())?;
    if mortality.min_value() < T::zero() {
        return Err(Error::Config("mortality table must be nonnegative".into()));
    }
    let wage = Table::new(params.wage.clone())?;
    let mut model = ModelSpec {
        growth: RateFunction::constant(T::one()),
        mortality: RateFunction::new(RateFamily::Tabulated { table: mortality }),
        birth: RateFunction::new(params.birth.clone()),
        control_box: params.control_box.clone(),
        declared_lipschitz: T::zero(),
    };
    model.check()?;
    let birth_min = match &params.birth {
        RateFamily::Constant { value } => *value,
        RateFamily::Tabulated { table } => table.min_value(),
        _ => T::zero(),
    };
    if birth_min < T::zero() {
        return Err(Error::Config("birth rate must be nonnegative".into()));
    }
    model.declared_lipschitz = model.lipschitz_bound();
    let cost = CostSpec {
        moments: vec![Profile::Tabulated { table: wage }],
        boundary_channel: true,
        running: RunningCost::Welfare,
        discount: params.discount,
        require_nonnegative: false,
    };
    Ok((model, cost))
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

fn norm2<T: Real>(a: &[T]) -> T {
    a.iter().map(|x| *x * *x).sum::<T>().sqrt()
}
