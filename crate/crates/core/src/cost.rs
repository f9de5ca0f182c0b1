//! Running costs and the discrete objectives `J̃ = ∫ j dt` and `J = J̃ + TV`.

use serde::{Deserialize, Serialize};

use crate::control::Control;
use crate::ebt::{init_cohorts, run, Discretization, EbtState, InitialDatum, NodeView, Tangents};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Profile};
use crate::scalar::Real;

/// One monomial `coef · Π uⱼ^{pⱼ} · Π y_k^{q_k} · m_b^r` of a polynomial cost.
/// Missing trailing powers are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Monomial<T> {
    pub coef: T,
    #[serde(default)]
    pub u_powers: Vec<u32>,
    #[serde(default)]
    pub y_powers: Vec<u32>,
    #[serde(default)]
    pub boundary_power: u32,
}

/// Built-in running-cost families `j(u, y, m_b)` (before discounting).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", tag = "family", rename_all = "snake_case")]
pub enum RunningCost<T> {
    /// `u_weight·‖u − u*‖² + Σ w_k (y_k − y_k*)²`.
    QuadraticTracking {
        #[serde(default)]
        u_weight: T,
        #[serde(default)]
        u_target: Vec<T>,
        #[serde(default)]
        y_weights: Vec<T>,
        #[serde(default)]
        y_targets: Vec<T>,
    },
    /// `constant + a·u + c·y + d·m_b`.
    Linear {
        #[serde(default)]
        constant: T,
        #[serde(default)]
        u_coefs: Vec<T>,
        #[serde(default)]
        y_coefs: Vec<T>,
        #[serde(default)]
        boundary_coef: T,
    },
    /// Negated income `−(y₁ − u₁·m_b)`.
    Welfare,
    Polynomial { terms: Vec<Monomial<T>> },
}

fn get<T: Real>(v: &[T], i: usize) -> T {
    v.get(i).copied().unwrap_or_else(T::zero)
}

fn powi<T: Real>(x: T, p: u32) -> T {
    x.powi(p as i32)
}

impl<T: Real> RunningCost<T> {
    /// Value and partials; `du` and `dy` are overwritten.
    pub fn eval_with_partials(&self, u: &[T], y: &[T], mb: T, du: &mut [T], dy: &mut [T]) -> (T, T) {
        du.iter_mut().for_each(|d| *d = T::zero());
        dy.iter_mut().for_each(|d| *d = T::zero());
        let two = T::lit(2.0);
        match self {
            Self::QuadraticTracking {
                u_weight,
                u_target,
                y_weights,
                y_targets,
            } => {
                let mut j = T::zero();
                for (i, &ui) in u.iter().enumerate() {
                    let e = ui - get(u_target, i);
                    j += *u_weight * e * e;
                    du[i] = two * *u_weight * e;
                }
                for (k, &yk) in y.iter().enumerate() {
                    let w = get(y_weights, k);
                    let e = yk - get(y_targets, k);
                    j += w * e * e;
                    dy[k] = two * w * e;
                }
                (j, T::zero())
            }
            Self::Linear {
                constant,
                u_coefs,
                y_coefs,
                boundary_coef,
            } => {
                let mut j = *constant + *boundary_coef * mb;
                for (i, &ui) in u.iter().enumerate() {
                    du[i] = get(u_coefs, i);
                    j += du[i] * ui;
                }
                for (k, &yk) in y.iter().enumerate() {
                    dy[k] = get(y_coefs, k);
                    j += dy[k] * yk;
                }
                (j, *boundary_coef)
            }
            Self::Welfare => {
                let u0 = get(u, 0);
                if !du.is_empty() {
                    du[0] = mb;
                }
                if !dy.is_empty() {
                    dy[0] = -T::one();
                }
                (u0 * mb - get(y, 0), u0)
            }
            Self::Polynomial { terms } => {
                let mut j = T::zero();
                let mut dmb = T::zero();
                for term in terms {
                    let up = |i: usize| term.u_powers.get(i).copied().unwrap_or(0);
                    let yp = |k: usize| term.y_powers.get(k).copied().unwrap_or(0);
                    let factors: Vec<(T, u32)> = u
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| (v, up(i)))
                        .chain(y.iter().enumerate().map(|(k, &v)| (v, yp(k))))
                        .chain(std::iter::once((mb, term.boundary_power)))
                        .collect();
                    let value = factors.iter().fold(term.coef, |acc, &(v, p)| acc * powi(v, p));
                    j += value;
                    for (idx, &(v, p)) in factors.iter().enumerate() {
                        if p == 0 {
                            continue;
                        }
                        let d = factors.iter().enumerate().fold(term.coef, |acc, (o, &(w, q))| {
                            if o == idx {
                                acc * T::from_usize_lossy(p as usize) * powi(w, q - 1)
                            } else {
                                acc * powi(w, q)
                            }
                        });
                        let _ = v;
                        if idx < u.len() {
                            du[idx] += d;
                        } else if idx < u.len() + y.len() {
                            dy[idx - u.len()] += d;
                        } else {
                            dmb += d;
                        }
                    }
                }
                (j, dmb)
            }
        }
    }

    pub fn eval(&self, u: &[T], y: &[T], mb: T) -> T {
        let mut du = vec![T::zero(); u.len()];
        let mut dy = vec![T::zero(); y.len()];
        self.eval_with_partials(u, y, mb, &mut du, &mut dy).0
    }
}

/// Running cost `e^{−λt} j(u, y₁..y_p, m_b)` with moments `y_k = ∫ γ_k dμ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct CostSpec<T> {
    /// Moment weights `γ_k`.
    #[serde(default)]
    pub moments: Vec<Profile<T>>,
    /// Feed the boundary cohort mass to `j`; otherwise `m_b = 0`.
    #[serde(default)]
    pub boundary_channel: bool,
    pub running: RunningCost<T>,
    /// Discount rate `λ ≥ 0`.
    #[serde(default)]
    pub discount: T,
    /// Reject negative running-cost values.
    #[serde(default)]
    pub require_nonnegative: bool,
}

impl<T: Real> CostSpec<T> {
    pub fn new(moments: Vec<Profile<T>>, running: RunningCost<T>) -> Self {
        Self {
            moments,
            boundary_channel: false,
            running,
            discount: T::zero(),
            require_nonnegative: false,
        }
    }

    pub fn check(&self, dims: usize) -> Result<()> {
        if !(self.discount >= T::zero()) || !self.discount.is_finite() {
            return Err(Error::Config("discount rate must be finite and nonnegative".into()));
        }
        let p = self.moments.len();
        let too_long = |what: &'static str, len: usize, max: usize| -> Result<()> {
            if len > max {
                Err(Error::LengthMismatch {
                    what,
                    left: len,
                    right: max,
                })
            } else {
                Ok(())
            }
        };
        match &self.running {
            RunningCost::QuadraticTracking {
                u_target,
                y_weights,
                y_targets,
                ..
            } => {
                too_long("tracking u target", u_target.len(), dims)?;
                too_long("tracking y weights", y_weights.len(), p)?;
                too_long("tracking y targets", y_targets.len(), p)?;
            }
            RunningCost::Linear { u_coefs, y_coefs, .. } => {
                too_long("linear u coefficients", u_coefs.len(), dims)?;
                too_long("linear y coefficients", y_coefs.len(), p)?;
            }
            RunningCost::Welfare => {
                if p == 0 || dims == 0 || !self.boundary_channel {
                    return Err(Error::Config(
                        "welfare cost needs a wage moment, a control and the boundary channel".into(),
                    ));
                }
            }
            RunningCost::Polynomial { terms } => {
                for t in terms {
                    too_long("monomial u powers", t.u_powers.len(), dims)?;
                    too_long("monomial y powers", t.y_powers.len(), p)?;
                }
            }
        }
        Ok(())
    }

    fn discount_factor(&self, t: T) -> T {
        (-self.discount * t).exp()
    }

    /// Moments `y_k = Σ mⁱ γ_k(xⁱ)` and boundary mass of a state.
    pub fn observe(&self, state: &EbtState<T>) -> (Vec<T>, T) {
        let y = self
            .moments
            .iter()
            .map(|g| state.positions.iter().zip(&state.masses).map(|(&x, &m)| m * g.value(x)).sum())
            .collect();
        let mb = if self.boundary_channel {
            state.boundary_mass()
        } else {
            T::zero()
        };
        (y, mb)
    }
}

/// `e^{−λt} j(t, u, ∫γ dμ, m_b)` at one state.
pub fn eval_running<T: Real>(state: &EbtState<T>, u: &[T], t: T, cost: &CostSpec<T>) -> T {
    let (y, mb) = cost.observe(state);
    cost.discount_factor(t) * cost.running.eval(u, &y, mb)
}

/// Cost breakdown; `total = running + tv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct CostValue<T> {
    /// `J̃`.
    pub running: T,
    pub tv: T,
    /// `J`.
    pub total: T,
    /// `λ⁻¹ e^{−λT} · max |j|` over the quadrature nodes; absent when `λ = 0`.
    pub tail_bound: Option<T>,
}

impl<T: Real> CostValue<T> {
    pub fn new(running: T, tv: T, tail_bound: Option<T>) -> Self {
        Self {
            running,
            tv,
            total: running + tv,
            tail_bound,
        }
    }
}

/// Trapezoid accumulation of the running cost over run nodes, optionally
/// with its derivative along the tangents.
pub(crate) struct CostAccumulator<'a, T> {
    cost: &'a CostSpec<T>,
    pub running: T,
    pub sup_abs: T,
    pub gradient: Vec<T>,
    du: Vec<T>,
    dy: Vec<T>,
}

impl<'a, T: Real> CostAccumulator<'a, T> {
    pub fn new(cost: &'a CostSpec<T>, dims: usize, dofs: usize) -> Self {
        Self {
            cost,
            running: T::zero(),
            sup_abs: T::zero(),
            gradient: vec![T::zero(); dofs],
            du: vec![T::zero(); dims],
            dy: vec![T::zero(); cost.moments.len()],
        }
    }

    pub fn visit(&mut self, node: &NodeView<'_, T>) -> Result<()> {
        let cost = self.cost;
        let (y, mb) = cost.observe(node.state);
        let (j, dmb) = cost.running.eval_with_partials(node.u, &y, mb, &mut self.du, &mut self.dy);
        if !j.is_finite() {
            return Err(Error::Numeric(format!("running cost is not finite at t = {}", node.t)));
        }
        if cost.require_nonnegative && j < T::zero() {
            return Err(Error::Domain(format!("running cost {j} is negative at t = {}", node.t)));
        }
        self.sup_abs = self.sup_abs.max(j.abs());
        let w = node.trapezoid_weight() * cost.discount_factor(node.t);
        self.running += w * j;
        if let Some(tan) = node.tangents {
            self.accumulate_gradient(node, tan, w, dmb);
        }
        Ok(())
    }

    fn accumulate_gradient(&mut self, node: &NodeView<'_, T>, tan: &Tangents<T>, w: T, dmb: T) {
        let dims = node.u.len();
        let st = node.state;
        let bnd = st.boundary_index();
        let active = ((node.piece + 1) * dims).min(tan.dofs());
        for d in 0..active {
            let mut g = T::zero();
            if d / dims == node.piece {
                g += self.du[d % dims];
            }
            for (k, gamma) in self.cost.moments.iter().enumerate() {
                if self.dy[k] == T::zero() {
                    continue;
                }
                let dyk: T = (0..st.cohorts())
                    .map(|i| {
                        let x = st.positions[i];
                        tan.dm[d][i] * gamma.value(x) + st.masses[i] * gamma.derivative(x) * tan.dx[d][i]
                    })
                    .sum();
                g += self.dy[k] * dyk;
            }
            if self.cost.boundary_channel {
                g += dmb * tan.dm[d][bnd];
            }
            self.gradient[d] += w * g;
        }
    }

    pub fn tail_bound(&self, horizon: T) -> Option<T> {
        let l = self.cost.discount;
        (l > T::zero()).then(|| (-l * horizon).exp() / l * self.sup_abs)
    }
}

/// `J̃` by the composite trapezoid rule on all RK4 substep nodes, and
/// `J = J̃ + TV(control)`.
pub fn evaluate<T: Real>(
    model: &ModelSpec<T>,
    datum: &InitialDatum<T>,
    control: &Control<T>,
    disc: &Discretization<T>,
    cost: &CostSpec<T>,
) -> Result<CostValue<T>> {
    cost.check(model.control_dims())?;
    let initial = EbtState::initial(&init_cohorts(datum, disc)?);
    let mut acc = CostAccumulator::new(cost, model.control_dims(), 0);
    run(model, initial, control, control.horizon(), disc, None, |node| acc.visit(node))?;
    Ok(CostValue::new(
        acc.running,
        control.total_variation(),
        acc.tail_bound(control.horizon()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::DiscreteMeasure;
    use crate::model::{ControlBox, RateFunction};

    fn model(c: f64) -> ModelSpec<f64> {
        ModelSpec {
            growth: RateFunction::constant(1.0),
            mortality: RateFunction::constant(c),
            birth: RateFunction::constant(0.0),
            control_box: ControlBox::new(vec![0.0], vec![5.0]).unwrap(),
            declared_lipschitz: 0.0,
        }
    }

    fn mass_cost() -> CostSpec<f64> {
        CostSpec::new(
            vec![Profile::constant(1.0)],
            RunningCost::Linear {
                constant: 0.0,
                u_coefs: vec![],
                y_coefs: vec![1.0],
                boundary_coef: 0.0,
            },
        )
    }

    fn datum() -> InitialDatum<f64> {
        InitialDatum::atoms(DiscreteMeasure::normalize(&[0.5, 1.5], &[1.0, 2.0]).unwrap())
    }

    #[test]
    fn eval_running_examples() {
        let state = EbtState {
            t: 0.0,
            window: 0,
            positions: vec![10.0, 30.0, 0.0],
            masses: vec![1.0, 2.0, 0.5],
        };
        assert_eq!(eval_running(&state, &[0.0], 0.0, &mass_cost()), 3.5);
        let wage = Profile::tabulated(vec![(0.0, -0.5), (20.0, 1.0), (100.0, 1.0)]).unwrap();
        let mut welfare = CostSpec::new(vec![wage.clone()], RunningCost::Welfare);
        welfare.boundary_channel = true;
        welfare.discount = 0.1;
        let t = 2.0;
        let expect = -(-0.1f64 * t).exp() * (1.0 * wage.value(10.0) + 2.0 + 0.5 * wage.value(0.0));
        assert!((eval_running(&state, &[0.0], t, &welfare) - expect).abs() < 1e-14);
        let u_only = CostSpec::new(
            vec![],
            RunningCost::QuadraticTracking {
                u_weight: 1.0,
                u_target: vec![0.3],
                y_weights: vec![],
                y_targets: vec![],
            },
        );
        assert!((eval_running(&state, &[0.5], 7.0, &u_only) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn evaluate_constant_integrand_and_tv() {
        let disc = Discretization::new(2, 0.5, 3).with_cell_width(1.0);
        let u = Control::constant(3.0, vec![1.0]).unwrap();
        let v = evaluate(&model(0.0), &datum(), &u, &disc, &mass_cost()).unwrap();
        assert!((v.running - 9.0).abs() < 1e-13);
        assert_eq!(v.tv, 0.0);
        let u = Control::uniform(3.0, vec![vec![1.0], vec![3.0], vec![2.0]]).unwrap();
        let w = evaluate(&model(0.0), &datum(), &u, &disc, &mass_cost()).unwrap();
        assert_eq!(w.tv, 3.0);
        assert_eq!(w.total, w.running + 3.0);
    }

    #[test]
    fn evaluate_exponential_decay_integral() {
        let single = InitialDatum::atoms(DiscreteMeasure::dirac(0.0, 1.0).unwrap());
        let disc = Discretization::new(1, 0.25, 50);
        let u = Control::constant(1.0, vec![0.0]).unwrap();
        let v = evaluate(&model(0.5), &single, &u, &disc, &mass_cost()).unwrap();
        let exact = (1.0 - (-0.5f64).exp()) / 0.5;
        assert!((v.running - exact).abs() <= 1e-6);
    }

    #[test]
    fn polynomial_partials_match_differences() {
        let poly = RunningCost::Polynomial {
            terms: vec![
                Monomial {
                    coef: 1.5,
                    u_powers: vec![2, 1],
                    y_powers: vec![1],
                    boundary_power: 0,
                },
                Monomial {
                    coef: -0.5,
                    u_powers: vec![],
                    y_powers: vec![0, 3],
                    boundary_power: 2,
                },
            ],
        };
        let (u, y, mb) = (vec![0.3f64, 0.7], vec![1.2f64, -0.4], 0.9f64);
        let mut du = vec![0.0; 2];
        let mut dy = vec![0.0; 2];
        let (_, dmb) = poly.eval_with_partials(&u, &y, mb, &mut du, &mut dy);
        let h = 1e-6;
        for i in 0..2 {
            let (mut a, mut b) = (u.clone(), u.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (poly.eval(&a, &y, mb) - poly.eval(&b, &y, mb)) / (2.0 * h);
            assert!((fd - du[i]).abs() < 1e-8);
            let (mut a, mut b) = (y.clone(), y.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (poly.eval(&u, &a, mb) - poly.eval(&u, &b, mb)) / (2.0 * h);
            assert!((fd - dy[i]).abs() < 1e-8);
        }
        let fd = (poly.eval(&u, &y, mb + h) - poly.eval(&u, &y, mb - h)) / (2.0 * h);
        assert!((fd - dmb).abs() < 1e-8);
    }

    #[test]
    fn check_rejects_inconsistent_specs() {
        let bad = CostSpec::<f64>::new(vec![], RunningCost::Welfare);
        assert!(bad.check(1).is_err());
        let long = CostSpec::new(
            vec![],
            RunningCost::Linear {
                constant: 0.0,
                u_coefs: vec![1.0, 2.0],
                y_coefs: vec![],
                boundary_coef: 0.0,
            },
        );
        assert!(matches!(long.check(1), Err(Error::LengthMismatch { .. })));
        let mut neg = mass_cost();
        neg.discount = -1.0;
        assert!(neg.check(1).is_err());
    }

    #[test]
    fn nonnegativity_check_is_optional() {
        let disc = Discretization::new(2, 0.5, 1).with_cell_width(1.0);
        let u = Control::constant(1.0, vec![0.0]).unwrap();
        let mut c = CostSpec::new(
            vec![],
            RunningCost::Linear {
                constant: -1.0,
                u_coefs: vec![],
                y_coefs: vec![],
                boundary_coef: 0.0,
            },
        );
        assert!(evaluate(&model(0.0), &datum(), &u, &disc, &c).is_ok());
        c.require_nonnegative = true;
        assert!(matches!(evaluate(&model(0.0), &datum(), &u, &disc, &c), Err(Error::Domain(_))));
    }

    #[test]
    fn tail_bound_reported_with_discount() {
        let disc = Discretization::new(2, 0.5, 1).with_cell_width(1.0);
        let u = Control::constant(1.0, vec![0.0]).unwrap();
        let mut c = mass_cost();
        assert!(evaluate(&model(0.0), &datum(), &u, &disc, &c).unwrap().tail_bound.is_none());
        c.discount = 0.5;
        let tb = evaluate(&model(0.0), &datum(), &u, &disc, &c).unwrap().tail_bound.unwrap();
        assert!((tb - 3.0 * (-0.5f64).exp() / 0.5).abs() < 1e-12);
    }
}
