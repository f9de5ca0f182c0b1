//! Minimization of `J = J̃ + TV` over piecewise-constant controls in the
//! control box, and the discretization-refinement driver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::Control;
use crate::cost::{evaluate, CostSpec, CostValue};
use crate::ebt::{init_cohorts, Discretization, EbtState, InitialDatum, TangentOptions};
use crate::error::{Error, Result};
use crate::measure::flat_distance;
use crate::model::ModelSpec;
use crate::scalar::Real;
use crate::sensitivity::gradient_cost;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    ProximalGradient,
    CompassSearch,
}

/// Treatment of the TV term by the proximal-gradient method.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TvHandling {
    /// Exact prox for scalar controls, Huber smoothing otherwise.
    #[default]
    Auto,
    /// Prox step on TV (componentwise when `N > 1`).
    Exact,
    /// `Σ (√(‖Δu‖² + ε²) − ε)` in the smooth part; `ε` defaults to
    /// `1e-3·diam(U)`.
    Huber { epsilon: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub method: Method,
    pub tv: TvHandling,
    pub initial_step: f64,
    pub backtrack_factor: f64,
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
    pub max_iter: usize,
    /// Stationarity tolerance: `‖v⁺ − v‖/α` (proximal gradient) or the poll
    /// step (compass search).
    pub tol: f64,
    pub seed: u64,
    /// Number of starts; the first is the supplied control or the lower box
    /// corner, the rest are uniform in the box.
    pub starts: usize,
    /// Allow finite-difference partials for tabulated rate families.
    pub allow_fd: bool,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            method: Method::ProximalGradient,
            tv: TvHandling::Auto,
            initial_step: 1.0,
            backtrack_factor: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 40,
            max_iter: 200,
            tol: 1e-6,
            seed: 0,
            starts: 4,
            allow_fd: true,
        }
    }
}

impl OptimizerSettings {
    pub fn check(&self) -> Result<()> {
        let ok = self.initial_step > 0.0
            && self.backtrack_factor > 0.0
            && self.backtrack_factor < 1.0
            && self.sufficient_decrease > 0.0
            && self.tol > 0.0
            && self.starts > 0;
        if !ok {
            return Err(Error::Config("optimizer step, tolerances and start count must be positive".into()));
        }
        if let TvHandling::Huber { epsilon: Some(e) } = self.tv {
            if !(e > 0.0) {
                return Err(Error::Config("Huber epsilon must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Stationary,
    MaxIterations,
    /// Backtracking found no acceptable step.
    LineSearchFailed,
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Real")]
pub struct OptimizationResult<T> {
    pub control: Control<T>,
    pub value: CostValue<T>,
    /// Objective per accepted iterate, starting with the initial point. With
    /// Huber smoothing this is the smoothed objective.
    pub history: Vec<T>,
    /// Stationarity measure per iteration.
    pub stationarity: Vec<T>,
    pub termination: Termination,
    pub evaluations: usize,
    pub start_index: usize,
    /// Final `J` of every start.
    pub start_values: Vec<T>,
}

/// Exact TV prox of a scalar sequence: `argmin ½‖v − y‖² + λ Σ|v_{k+1} − v_k|`
/// (direct 1-D algorithm by Condat).
fn tv1d<T: Real>(y: &[T], lambda: T) -> Vec<T> {
    let n = y.len();
    if n == 0 || !(lambda > T::zero()) {
        return y.to_vec();
    }
    let mut out = vec![T::zero(); n];
    let count = |a: usize, b: usize| T::from_usize_lossy(a - b + 1);
    let (mut k, mut k0, mut kplus, mut kminus) = (0usize, 0usize, 0usize, 0usize);
    let (mut umin, mut umax) = (lambda, -lambda);
    let (mut vmin, mut vmax) = (y[0] - lambda, y[0] + lambda);
    let two = lambda + lambda;
    loop {
        while k == n - 1 {
            if umin < T::zero() {
                while k0 <= kminus {
                    out[k0] = vmin;
                    k0 += 1;
                }
                k = k0;
                kminus = k0;
                vmin = y[k0];
                umin = lambda;
                umax = vmin + umin - vmax;
            } else if umax > T::zero() {
                while k0 <= kplus {
                    out[k0] = vmax;
                    k0 += 1;
                }
                k = k0;
                kplus = k0;
                vmax = y[k0];
                umax = -lambda;
                umin = vmax + umax - vmin;
            } else {
                vmin += umin / count(k, k0);
                while k0 <= k {
                    out[k0] = vmin;
                    k0 += 1;
                }
                return out;
            }
        }
        umin += y[k + 1] - vmin;
        if umin < -lambda {
            while k0 <= kminus {
                out[k0] = vmin;
                k0 += 1;
            }
            k = k0;
            kminus = k0;
            kplus = k0;
            vmin = y[k0];
            vmax = vmin + two;
            umin = lambda;
            umax = -lambda;
            continue;
        }
        umax += y[k + 1] - vmax;
        if umax > lambda {
            while k0 <= kplus {
                out[k0] = vmax;
                k0 += 1;
            }
            k = k0;
            kminus = k0;
            kplus = k0;
            vmax = y[k0];
            vmin = vmax - two;
            umin = lambda;
            umax = -lambda;
            continue;
        }
        k += 1;
        if umin >= lambda {
            kminus = k;
            vmin += (umin - lambda) / count(kminus, k0);
            umin = lambda;
        }
        if umax <= -lambda {
            kplus = k;
            vmax += (umax + lambda) / count(kplus, k0);
            umax = -lambda;
        }
    }
}

/// `argmin ½‖v − values‖² + step·weight·TV(v)`. Vector sequences are handled
/// component by component.
pub fn prox_tv<T: Real>(values: &[Vec<T>], weight: T, step: T) -> Vec<Vec<T>> {
    let lambda = weight * step;
    let dims = values.first().map_or(0, Vec::len);
    let mut out = values.to_vec();
    for j in 0..dims {
        let col: Vec<T> = values.iter().map(|v| v[j]).collect();
        for (o, x) in out.iter_mut().zip(tv1d(&col, lambda)) {
            o[j] = x;
        }
    }
    out
}

fn huber_tv<T: Real>(values: &[Vec<T>], eps: T, grad: Option<&mut [T]>) -> T {
    let dims = values.first().map_or(0, Vec::len);
    let mut total = T::zero();
    let mut grad = grad;
    for k in 1..values.len() {
        let diff: Vec<T> = values[k].iter().zip(&values[k - 1]).map(|(a, b)| *a - *b).collect();
        let s = (diff.iter().map(|d| *d * *d).sum::<T>() + eps * eps).sqrt();
        total += s - eps;
        if let Some(g) = grad.as_deref_mut() {
            for j in 0..dims {
                g[k * dims + j] += diff[j] / s;
                g[(k - 1) * dims + j] -= diff[j] / s;
            }
        }
    }
    total
}

fn as_pieces<T: Real>(dofs: &[T], dims: usize) -> Vec<Vec<T>> {
    dofs.chunks(dims).map(<[T]>::to_vec).collect()
}

struct Problem<'a, T> {
    model: &'a ModelSpec<T>,
    cost: &'a CostSpec<T>,
    datum: &'a InitialDatum<T>,
    disc: &'a Discretization<T>,
    template: Control<T>,
    settings: &'a OptimizerSettings,
    huber: Option<T>,
}

struct StartOutcome<T> {
    dofs: Vec<T>,
    value: CostValue<T>,
    history: Vec<T>,
    stationarity: Vec<T>,
    termination: Termination,
    evaluations: usize,
}

impl<T: Real> Problem<'_, T> {
    fn control(&self, dofs: &[T]) -> Result<Control<T>> {
        self.template.with_values(dofs)
    }

    fn project(&self, dofs: &mut [T]) {
        let bx = &self.model.control_box;
        for chunk in dofs.chunks_mut(bx.dims()) {
            bx.clamp(chunk);
        }
    }

    fn evaluate(&self, dofs: &[T]) -> Result<CostValue<T>> {
        evaluate(self.model, self.datum, &self.control(dofs)?, self.disc, self.cost)
    }

    /// Objective used by the line search: `J`, or `J̃ + Huber` when smoothing.
    fn objective(&self, dofs: &[T], value: &CostValue<T>) -> T {
        match self.huber {
            Some(eps) => value.running + huber_tv(&as_pieces(dofs, self.model.control_dims()), eps, None),
            None => value.total,
        }
    }

    fn proximal_gradient(&self, start: Vec<T>) -> Result<StartOutcome<T>> {
        let s = self.settings;
        let dims = self.model.control_dims();
        let opts = TangentOptions { allow_fd: s.allow_fd };
        let mut v = start;
        self.project(&mut v);
        let mut evaluations = 0;
        let mut history = Vec::new();
        let mut stationarity = Vec::new();
        let mut alpha = T::lit(s.initial_step);
        let mut termination = Termination::MaxIterations;
        let (mut value, mut grad) = gradient_cost(self.model, self.cost, self.datum, &self.control(&v)?, self.disc, opts)?;
        evaluations += 1;
        let mut f = self.objective(&v, &value);
        history.push(f);
        for _ in 0..s.max_iter {
            if let Some(eps) = self.huber {
                huber_tv(&as_pieces(&v, dims), eps, Some(&mut grad));
            }
            let mut accepted = None;
            for _ in 0..=s.max_backtracks {
                let mut w: Vec<T> = v.iter().zip(&grad).map(|(x, g)| *x - alpha * *g).collect();
                if self.huber.is_none() {
                    w = prox_tv(&as_pieces(&w, dims), T::one(), alpha).concat();
                }
                self.project(&mut w);
                let moved: T = v.iter().zip(&w).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
                let candidate = self.evaluate(&w)?;
                evaluations += 1;
                let fw = self.objective(&w, &candidate);
                if fw <= f - T::lit(s.sufficient_decrease) * moved / alpha {
                    accepted = Some((w, candidate, fw, moved.sqrt() / alpha));
                    break;
                }
                alpha *= T::lit(s.backtrack_factor);
            }
            let Some((w, candidate, fw, station)) = accepted else {
                termination = Termination::LineSearchFailed;
                break;
            };
            stationarity.push(station);
            v = w;
            f = fw;
            history.push(f);
            if station <= T::lit(s.tol) {
                value = candidate;
                termination = Termination::Stationary;
                break;
            }
            let (nv, ng) = gradient_cost(self.model, self.cost, self.datum, &self.control(&v)?, self.disc, opts)?;
            evaluations += 1;
            value = nv;
            grad = ng;
            alpha = (alpha + alpha).min(T::lit(s.initial_step));
        }
        Ok(StartOutcome {
            dofs: v,
            value,
            history,
            stationarity,
            termination,
            evaluations,
        })
    }

    fn compass_search(&self, start: Vec<T>) -> Result<StartOutcome<T>> {
        let s = self.settings;
        let bx = &self.model.control_box;
        let dims = bx.dims();
        let mut v = start;
        self.project(&mut v);
        let mut value = self.evaluate(&v)?;
        let mut evaluations = 1;
        let mut history = vec![value.total];
        let mut stationarity = Vec::new();
        let mut delta = T::lit(0.25);
        let mut termination = Termination::MaxIterations;
        for _ in 0..s.max_iter {
            stationarity.push(delta);
            if delta <= T::lit(s.tol) {
                termination = Termination::Stationary;
                break;
            }
            let candidates: Vec<Vec<T>> = (0..v.len())
                .flat_map(|d| [T::one(), -T::one()].map(move |sign| (d, sign)))
                .map(|(d, sign)| {
                    let j = d % dims;
                    let mut w = v.clone();
                    w[d] += sign * delta * (bx.upper[j] - bx.lower[j]);
                    self.project(&mut w);
                    w
                })
                .filter(|w| *w != v)
                .collect();
            let values = candidates
                .par_iter()
                .map(|w| self.evaluate(w))
                .collect::<Result<Vec<_>>>()?;
            evaluations += values.len();
            let best = values
                .iter()
                .enumerate()
                .fold(None::<(usize, T)>, |b, (i, c)| match b {
                    Some((_, bv)) if bv <= c.total => b,
                    _ => Some((i, c.total)),
                });
            match best {
                Some((i, bv)) if bv < value.total => {
                    v = candidates[i].clone();
                    value = values[i];
                    history.push(bv);
                }
                _ => delta *= T::lit(0.5),
            }
        }
        Ok(StartOutcome {
            dofs: v,
            value,
            history,
            stationarity,
            termination,
            evaluations,
        })
    }
}

/// Minimizes `J` over controls with `pieces` equal pieces on `[0, horizon]`.
/// Each piece must span a whole number of EBT windows.
#[allow(clippy::too_many_arguments)]
pub fn minimize<T: Real>(
    model: &ModelSpec<T>,
    cost: &CostSpec<T>,
    datum: &InitialDatum<T>,
    disc: &Discretization<T>,
    horizon: T,
    pieces: usize,
    settings: &OptimizerSettings,
    initial: Option<&Control<T>>,
) -> Result<OptimizationResult<T>> {
    settings.check()?;
    model.check()?;
    cost.check(model.control_dims())?;
    let windows = disc.windows(horizon)?;
    if pieces == 0 || windows % pieces != 0 {
        return Err(Error::Config(format!(
            "{pieces} control pieces do not align with {windows} EBT windows"
        )));
    }
    let dims = model.control_dims();
    let bx = &model.control_box;
    let template = Control::uniform(horizon, vec![bx.lower.clone(); pieces])?;
    let huber = match settings.tv {
        TvHandling::Auto if dims == 1 => None,
        TvHandling::Exact => None,
        TvHandling::Auto => Some(T::lit(1e-3) * bx.diameter()),
        TvHandling::Huber { epsilon } => Some(epsilon.map_or(T::lit(1e-3) * bx.diameter(), T::lit)),
    };
    if settings.method == Method::ProximalGradient && huber.is_none() && dims > 1 {
        log::warn!("exact TV prox applied componentwise to a {dims}-component control");
    }
    let first = match initial {
        Some(c) => {
            let c = if c.pieces() == pieces && (c.horizon() - horizon).abs() <= T::lit(1e-12) * horizon {
                c.clone()
            } else {
                c.resample_uniform(pieces)?
            };
            if c.dims() != dims {
                return Err(Error::Config("initial control has the wrong number of components".into()));
            }
            c.dofs()
        }
        None => template.dofs(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut starts = vec![first];
    for _ in 1..settings.starts {
        starts.push(
            (0..pieces * dims)
                .map(|d| {
                    let (lo, hi) = (bx.lower[d % dims].to_f64_lossy(), bx.upper[d % dims].to_f64_lossy());
                    T::lit(if hi > lo { rng.gen_range(lo..=hi) } else { lo })
                })
                .collect(),
        );
    }
    let problem = Problem {
        model,
        cost,
        datum,
        disc,
        template,
        settings,
        huber,
    };
    let outcomes = starts
        .into_par_iter()
        .map(|s| match settings.method {
            Method::ProximalGradient => problem.proximal_gradient(s),
            Method::CompassSearch => problem.compass_search(s),
        })
        .collect::<Result<Vec<_>>>()?;
    let start_values: Vec<T> = outcomes.iter().map(|o| o.value.total).collect();
    let evaluations = outcomes.iter().map(|o| o.evaluations).sum();
    let start_index = start_values
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v < start_values[best] { i } else { best });
    let best = outcomes.into_iter().nth(start_index).expect("at least one start");
    Ok(OptimizationResult {
        control: problem.control(&best.dofs)?,
        value: best.value,
        history: best.history,
        stationarity: best.stationarity,
        termination: best.termination,
        evaluations,
        start_index,
        start_values,
    })
}

/// One level of a refinement schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct RefineLevel<T> {
    pub disc: Discretization<T>,
    pub pieces: usize,
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Real")]
pub struct CertificateRow<T> {
    pub cells: usize,
    pub window: T,
    pub pieces: usize,
    pub d0: T,
    pub j_star: T,
    pub control: Control<T>,
    pub termination: Termination,
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Real")]
pub struct RefinementCertificate<T> {
    pub rows: Vec<CertificateRow<T>>,
    /// `|J*_k − J*_{k−1}|`.
    pub differences: Vec<T>,
    /// Levels where `J*` changes direction by more than the tolerance.
    pub non_monotone: Vec<usize>,
}

/// Runs [`minimize`] on each level; level one uses multistart, later levels
/// warm-start from the previous minimizer resampled to the new piece count.
pub fn refine<T: Real>(
    model: &ModelSpec<T>,
    cost: &CostSpec<T>,
    datum: &InitialDatum<T>,
    horizon: T,
    schedule: &[RefineLevel<T>],
    settings: &OptimizerSettings,
    initial: Option<&Control<T>>,
) -> Result<RefinementCertificate<T>> {
    if schedule.is_empty() {
        return Err(Error::Config("refinement schedule is empty".into()));
    }
    for w in schedule.windows(2) {
        if !(w[1].disc.window < w[0].disc.window) || w[1].disc.cells < w[0].disc.cells {
            return Err(Error::Config(
                "refinement schedule must have decreasing windows and nondecreasing cell counts".into(),
            ));
        }
    }
    let fine = datum.fine_measure(1 << 14)?;
    let mut rows: Vec<CertificateRow<T>> = Vec::with_capacity(schedule.len());
    for (k, level) in schedule.iter().enumerate() {
        let warm = rows.last().map(|r| r.control.resample_uniform(level.pieces)).transpose()?;
        let level_settings = OptimizerSettings {
            starts: if k == 0 { settings.starts } else { 1 },
            ..settings.clone()
        };
        let start = warm.as_ref().or(initial);
        let result = minimize(model, cost, datum, &level.disc, horizon, level.pieces, &level_settings, start)?;
        let discretized = EbtState::initial(&init_cohorts(datum, &level.disc)?).as_measure();
        rows.push(CertificateRow {
            cells: level.disc.cells,
            window: level.disc.window,
            pieces: level.pieces,
            d0: flat_distance(&fine, &discretized),
            j_star: result.value.total,
            control: result.control,
            termination: result.termination,
        });
    }
    let differences: Vec<T> = rows.windows(2).map(|w| (w[1].j_star - w[0].j_star).abs()).collect();
    let tol = T::lit(settings.tol);
    let non_monotone = (2..rows.len())
        .filter(|&k| {
            let a = rows[k - 1].j_star - rows[k - 2].j_star;
            let b = rows[k].j_star - rows[k - 1].j_star;
            a * b < T::zero() && b.abs() > tol * (T::one() + rows[k].j_star.abs())
        })
        .collect();
    Ok(RefinementCertificate {
        rows,
        differences,
        non_monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::RunningCost;
    use crate::measure::DiscreteMeasure;
    use crate::model::{ControlBox, RateFunction};

    fn prox_objective(v: &[f64], y: &[f64], lambda: f64) -> f64 {
        let fit: f64 = v.iter().zip(y).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum();
        fit + lambda * v.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>()
    }

    #[test]
    fn prox_limits() {
        let y = vec![vec![0.3], vec![0.9], vec![0.1]];
        assert_eq!(prox_tv(&y, 0.0, 1.0), y);
        let two = prox_tv(&[vec![0.0f64], vec![1.0]], 10.0, 1.0);
        assert!((two[0][0] - 0.5).abs() < 1e-15 && (two[1][0] - 0.5).abs() < 1e-15);
        let partial = prox_tv(&[vec![0.0f64], vec![1.0]], 0.2, 1.0);
        assert!((partial[0][0] - 0.2).abs() < 1e-15 && (partial[1][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn prox_satisfies_optimality_against_perturbations() {
        let y = [0.1, 0.8, 0.75, 0.2, 0.5, 0.55, 0.9];
        let lambda = 0.12;
        let v = tv1d(&y, lambda);
        let f = prox_objective(&v, &y, lambda);
        for i in 0..y.len() {
            for d in [-1e-4, 1e-4] {
                let mut w = v.clone();
                w[i] += d;
                assert!(prox_objective(&w, &y, lambda) >= f - 1e-15);
            }
        }
    }

    fn quadratic_problem(target: Option<f64>) -> (ModelSpec<f64>, CostSpec<f64>, InitialDatum<f64>) {
        let model = ModelSpec {
            growth: RateFunction::constant(1.0),
            mortality: RateFunction::constant(0.0),
            birth: RateFunction::constant(0.0),
            control_box: ControlBox::unit(1),
            declared_lipschitz: 0.0,
        };
        let cost = CostSpec::new(
            vec![],
            RunningCost::QuadraticTracking {
                u_weight: 1.0,
                u_target: target.into_iter().collect(),
                y_weights: vec![],
                y_targets: vec![],
            },
        );
        let datum = InitialDatum::atoms(DiscreteMeasure::dirac(0.5, 1.0).unwrap());
        (model, cost, datum)
    }

    #[test]
    fn interior_and_corner_minimizers() {
        let disc = Discretization::new(1, 0.5, 1);
        let settings = OptimizerSettings::default();
        let (m, c, d) = quadratic_problem(Some(0.3));
        let r = minimize(&m, &c, &d, &disc, 1.0, 1, &settings, None).unwrap();
        assert!((r.control.values()[0][0] - 0.3).abs() < 1e-5, "{:?}", r.control);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));

        let (m, c, d) = quadratic_problem(None);
        let r = minimize(&m, &c, &d, &disc, 1.0, 2, &settings, None).unwrap();
        assert!(r.control.values().iter().all(|v| v[0].abs() < 1e-6));
        assert!(r.value.total.abs() < 1e-6);
        let compass = OptimizerSettings {
            method: Method::CompassSearch,
            tol: 1e-7,
            ..settings
        };
        let (m, c, d) = quadratic_problem(Some(0.3));
        let r = minimize(&m, &c, &d, &disc, 1.0, 1, &compass, None).unwrap();
        assert!((r.value.total - 0.0).abs() < 1e-4);
    }

    #[test]
    fn misaligned_pieces_rejected() {
        let (m, c, d) = quadratic_problem(Some(0.3));
        let disc = Discretization::new(1, 0.5, 1);
        let err = minimize(&m, &c, &d, &disc, 1.0, 3, &OptimizerSettings::default(), None);
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(refine(&m, &c, &d, 1.0, &[], &OptimizerSettings::default(), None).is_err());
    }

    #[test]
    fn refine_trivial_problem_stays_at_zero() {
        let (m, c, d) = quadratic_problem(None);
        let levels: Vec<RefineLevel<f64>> = [0.5, 0.25, 0.125]
            .iter()
            .enumerate()
            .map(|(k, &dt)| RefineLevel {
                disc: Discretization::new(1 << k, dt, 1),
                pieces: 2,
            })
            .collect();
        let cert = refine(&m, &c, &d, 1.0, &levels, &OptimizerSettings::default(), None).unwrap();
        for row in &cert.rows {
            assert!(row.control.values().iter().all(|v| v[0].abs() < 1e-6));
        }
        assert_eq!(cert.differences.len(), 2);
    }

    #[test]
    fn huber_smoothing_handles_vector_controls() {
        let model = ModelSpec {
            growth: RateFunction::constant(1.0),
            mortality: RateFunction::constant(0.0),
            birth: RateFunction::constant(0.0),
            control_box: ControlBox::unit(2),
            declared_lipschitz: 0.0,
        };
        let cost = CostSpec::new(
            vec![],
            RunningCost::QuadraticTracking {
                u_weight: 1.0,
                u_target: vec![0.3f64, 0.6],
                y_weights: vec![],
                y_targets: vec![],
            },
        );
        let datum = InitialDatum::atoms(DiscreteMeasure::dirac(0.5, 1.0).unwrap());
        let disc = Discretization::new(1, 0.5, 1);
        let r = minimize(&model, &cost, &datum, &disc, 1.0, 2, &OptimizerSettings::default(), None).unwrap();
        for v in r.control.values() {
            assert!((v[0] - 0.3).abs() < 1e-4 && (v[1] - 0.6).abs() < 1e-4, "{v:?}");
        }
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }
}
