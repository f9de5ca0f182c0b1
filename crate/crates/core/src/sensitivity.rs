//! Forward sensitivities of the cohort system and of `J̃` with respect to
//! the control values.
//!
//! The tangent system is integrated with the same RK4 stages as the state,
//! so the result is the exact derivative of the discrete map (up to the
//! finite-difference fallback for tabulated rate families).

use rayon::prelude::*;
use serde::Serialize;

use crate::control::Control;
use crate::cost::{evaluate, CostAccumulator, CostSpec, CostValue};
use crate::ebt::{
    init_cohorts, run, DenseRecord, Discretization, EbtState, InitialDatum, Snapshot, TangentOptions, Tangents,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::scalar::Real;

/// State and tangents at a window end (before internalization).
#[derive(Debug, Clone)]
pub struct SensitivitySnapshot<T> {
    pub t: T,
    pub state: EbtState<T>,
    pub tangents: Tangents<T>,
}

/// Trajectory plus tangents at `t = 0` and every window end. Dof `θ = k·N + j`
/// is component `j` of control piece `k`.
pub fn simulate_with_sensitivity<T: Real>(
    model: &ModelSpec<T>,
    datum: &InitialDatum<T>,
    control: &Control<T>,
    disc: &Discretization<T>,
    opts: TangentOptions,
) -> Result<(Trajectory<T>, Vec<SensitivitySnapshot<T>>)> {
    let cohorts = init_cohorts(datum, disc)?;
    let initial = EbtState::initial(&cohorts);
    let initial_measure = initial.as_measure();
    let mut snapshots = Vec::new();
    let mut dense = Vec::new();
    let mut history = Vec::new();
    let out = run(model, initial, control, control.horizon(), disc, Some(opts), |node| {
        dense.push(DenseRecord {
            t: node.t,
            window: node.window,
            substep: node.substep,
            total_mass: node.state.total_mass(),
            boundary_mass: node.state.boundary_mass(),
        });
        let edge = (node.window == 0 && node.substep == 0) || node.substep == node.substeps;
        if edge {
            let tangents = node.tangents.expect("tangents requested").clone();
            snapshots.push(Snapshot {
                t: node.t,
                positions: node.state.positions.clone(),
                masses: node.state.masses.clone(),
            });
            history.push(SensitivitySnapshot {
                t: node.t,
                state: node.state.clone(),
                tangents,
            });
        }
        Ok(())
    })?;
    let trajectory = Trajectory {
        horizon: control.horizon(),
        window: disc.window,
        substeps: disc.substeps,
        initial: initial_measure,
        snapshots,
        dense,
        dense_states: None,
        control: control.clone(),
        final_state: out.state,
        overflow: cohorts.overflow,
    };
    Ok((trajectory, history))
}

/// `J` and `dJ̃/dθ` for every control dof, with the trapezoid rule used by
/// [`evaluate`]. The TV term is not differentiated here.
pub fn gradient_cost<T: Real>(
    model: &ModelSpec<T>,
    cost: &CostSpec<T>,
    datum: &InitialDatum<T>,
    control: &Control<T>,
    disc: &Discretization<T>,
    opts: TangentOptions,
) -> Result<(CostValue<T>, Vec<T>)> {
    let dims = model.control_dims();
    cost.check(dims)?;
    let initial = EbtState::initial(&init_cohorts(datum, disc)?);
    let dofs = control.pieces() * control.dims();
    let mut acc = CostAccumulator::new(cost, dims, dofs);
    run(model, initial, control, control.horizon(), disc, Some(opts), |node| acc.visit(node))?;
    let value = CostValue::new(acc.running, control.total_variation(), acc.tail_bound(control.horizon()));
    Ok((value, acc.gradient))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    pub analytic: Vec<f64>,
    pub finite_difference: Vec<f64>,
    /// `|g_θ − fd_θ|` per dof.
    pub abs_errors: Vec<f64>,
    pub max_abs_error: f64,
    /// `max_θ |g_θ − fd_θ| / ‖fd‖_∞` (absolute when `fd ≡ 0`).
    pub max_rel_error: f64,
    pub worst_dof: usize,
    pub fd_step: f64,
}

/// Compares [`gradient_cost`] with central differences of `J̃`; dofs at a box
/// face fall back to one-sided differences.
pub fn check_gradient<T: Real>(
    model: &ModelSpec<T>,
    cost: &CostSpec<T>,
    datum: &InitialDatum<T>,
    control: &Control<T>,
    disc: &Discretization<T>,
    fd_step: T,
) -> Result<GradientReport> {
    if !(fd_step > T::zero()) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let (base, analytic) = gradient_cost(model, cost, datum, control, disc, TangentOptions::default())?;
    let dims = control.dims();
    let dofs = control.dofs();
    let bx = &model.control_box;
    let j_at = |d: usize, v: T| -> Result<T> {
        let mut p = dofs.clone();
        p[d] = v;
        Ok(evaluate(model, datum, &control.with_values(&p)?, disc, cost)?.running)
    };
    let fd: Vec<T> = (0..dofs.len())
        .into_par_iter()
        .map(|d| -> Result<T> {
            let (lo, hi) = (bx.lower[d % dims], bx.upper[d % dims]);
            let v = dofs[d];
            let up = v + fd_step <= hi;
            let down = v - fd_step >= lo;
            match (up, down) {
                (true, true) => Ok((j_at(d, v + fd_step)? - j_at(d, v - fd_step)?) / (fd_step + fd_step)),
                (true, false) => Ok((j_at(d, v + fd_step)? - base.running) / fd_step),
                (false, true) => Ok((base.running - j_at(d, v - fd_step)?) / fd_step),
                (false, false) => Err(Error::Config("finite-difference step exceeds the control box".into())),
            }
        })
        .collect::<Result<_>>()?;
    let analytic: Vec<f64> = analytic.iter().map(|g| g.to_f64_lossy()).collect();
    let fd: Vec<f64> = fd.iter().map(|g| g.to_f64_lossy()).collect();
    let abs_errors: Vec<f64> = analytic.iter().zip(&fd).map(|(a, f)| (a - f).abs()).collect();
    let (worst_dof, max_abs_error) = abs_errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    let scale = fd.iter().fold(0.0f64, |m, f| m.max(f.abs()));
    Ok(GradientReport {
        max_rel_error: if scale > 0.0 { max_abs_error / scale } else { max_abs_error },
        analytic,
        finite_difference: fd,
        abs_errors,
        max_abs_error,
        worst_dof,
        fd_step: fd_step.to_f64_lossy(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::RunningCost;
    use crate::measure::DiscreteMeasure;
    use crate::model::{ControlBox, ControlFactor, Profile, RateFamily, RateFunction};

    fn u_rate(constant: f64, coef: f64) -> RateFunction<f64> {
        RateFunction::new(RateFamily::Separable {
            profile: Profile::constant(1.0),
            control: ControlFactor::Affine {
                constant,
                coefs: vec![coef],
            },
        })
    }

    fn datum() -> InitialDatum<f64> {
        InitialDatum::atoms(DiscreteMeasure::normalize(&[0.2, 0.7], &[1.0, 0.5]).unwrap())
    }

    #[test]
    fn scalar_decay_sensitivity() {
        let model = ModelSpec {
            growth: RateFunction::constant(1.0),
            mortality: u_rate(0.0, 1.0),
            birth: RateFunction::constant(0.0),
            control_box: ControlBox::unit(1),
            declared_lipschitz: 1.0,
        };
        let single = InitialDatum::atoms(DiscreteMeasure::dirac(0.0, 1.5).unwrap());
        let (t, u) = (2.0, 0.4);
        let disc = Discretization::new(1, 0.5, 10);
        let control = Control::constant(t, vec![u]).unwrap();
        let (_, hist) = simulate_with_sensitivity(&model, &single, &control, &disc, TangentOptions::default()).unwrap();
        let last = hist.last().unwrap();
        let exact = -t * 1.5 * (-u * t).exp();
        assert!((last.tangents.dm[0][0] - exact).abs() < 1e-6);
        for snap in &hist {
            assert_eq!(snap.tangents.dm[0].len(), snap.state.cohorts());
        }
    }

    #[test]
    fn causality_and_control_independence() {
        let model = ModelSpec {
            growth: u_rate(0.5, 1.0),
            mortality: RateFunction::constant(0.1),
            birth: RateFunction::constant(0.2),
            control_box: ControlBox::unit(1),
            declared_lipschitz: 1.0,
        };
        let disc = Discretization::new(2, 0.5, 2);
        let control = Control::uniform(2.0, vec![vec![0.2], vec![0.6]]).unwrap();
        let (_, hist) = simulate_with_sensitivity(&model, &datum(), &control, &disc, TangentOptions::default()).unwrap();
        for snap in hist.iter().filter(|s| s.t <= 1.0) {
            assert!(snap.tangents.dx[1].iter().chain(&snap.tangents.dm[1]).all(|v| *v == 0.0));
        }
        assert!(hist.last().unwrap().tangents.dx[1][0] > 0.0);

        let fixed = ModelSpec {
            growth: RateFunction::constant(1.0),
            ..model
        };
        let (_, hist) = simulate_with_sensitivity(&fixed, &datum(), &control, &disc, TangentOptions::default()).unwrap();
        for snap in &hist {
            assert!(snap.tangents.dx.iter().chain(&snap.tangents.dm).flatten().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn quadratic_control_cost_gradient() {
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
                u_target: vec![],
                y_weights: vec![],
                y_targets: vec![],
            },
        );
        let (t, u) = (3.0, 0.7);
        let disc = Discretization::new(2, 0.5, 2);
        let control = Control::constant(t, vec![u]).unwrap();
        let (_, g) = gradient_cost(&model, &cost, &datum(), &control, &disc, TangentOptions::default()).unwrap();
        assert!((g[0] - 2.0 * u * t).abs() < 1e-12);

        let time_only = CostSpec {
            discount: 0.3,
            ..CostSpec::new(
                vec![],
                RunningCost::Linear {
                    constant: 1.0,
                    u_coefs: vec![],
                    y_coefs: vec![],
                    boundary_coef: 0.0,
                },
            )
        };
        let (_, g) = gradient_cost(&model, &time_only, &datum(), &control, &disc, TangentOptions::default()).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn gradient_matches_differences_with_feedback() {
        let model = ModelSpec {
            growth: RateFunction::with_kernel(
                Profile::Gaussian {
                    peak: 1.0,
                    center: 1.0,
                    width: 1.0,
                },
                RateFamily::Logistic {
                    value: 1.0,
                    capacity: 2.0,
                },
            ),
            mortality: u_rate(0.1, 0.5),
            birth: RateFunction::new(RateFamily::Separable {
                profile: Profile::Gaussian {
                    peak: 0.8,
                    center: 1.0,
                    width: 0.7,
                },
                control: ControlFactor::Quadratic {
                    constant: 1.0,
                    linear: vec![0.5],
                    quadratic: vec![0.3],
                },
            }),
            control_box: ControlBox::unit(1),
            declared_lipschitz: 10.0,
        };
        let cost = CostSpec {
            boundary_channel: true,
            discount: 0.1,
            ..CostSpec::new(
                vec![Profile::Gaussian {
                    peak: 1.0,
                    center: 0.5,
                    width: 1.0,
                }],
                RunningCost::Welfare,
            )
        };
        let disc = Discretization::new(3, 0.25, 2);
        let control = Control::uniform(2.0, vec![vec![0.3], vec![0.6], vec![0.45], vec![0.2]]).unwrap();
        let report = check_gradient(&model, &cost, &datum(), &control, &disc, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn fd_step_must_be_positive() {
        let model = ModelSpec {
            growth: RateFunction::constant(1.0),
            mortality: RateFunction::constant(0.0),
            birth: RateFunction::constant(0.0),
            control_box: ControlBox::unit(1),
            declared_lipschitz: 0.0,
        };
        let cost = CostSpec::new(
            vec![],
            RunningCost::Linear {
                constant: 0.0,
                u_coefs: vec![1.0],
                y_coefs: vec![],
                boundary_coef: 0.0,
            },
        );
        let disc = Discretization::new(1, 0.5, 1);
        let control = Control::constant(1.0, vec![0.5]).unwrap();
        assert!(check_gradient(&model, &cost, &datum(), &control, &disc, 0.0).is_err());
        let r = check_gradient(&model, &cost, &datum(), &control, &disc, 1e-4).unwrap();
        assert!(r.max_abs_error < 1e-9);
    }

    #[test]
    fn missing_partials_without_fallback() {
        let model = ModelSpec {
            growth: RateFunction::constant(1.0),
            mortality: RateFunction::new(RateFamily::Tabulated {
                table: crate::model::Table::new(vec![(0.0, 0.1), (5.0, 0.3)]).unwrap(),
            }),
            birth: RateFunction::constant(0.0),
            control_box: ControlBox::unit(1),
            declared_lipschitz: 1.0,
        };
        let disc = Discretization::new(1, 0.5, 1);
        let control = Control::constant(1.0, vec![0.5]).unwrap();
        let res = simulate_with_sensitivity(&model, &datum(), &control, &disc, TangentOptions { allow_fd: false });
        assert!(matches!(res, Err(Error::MissingPartials(_))));
    }
}
