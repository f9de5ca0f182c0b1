//! Finitely supported nonnegative measures on the half-line and the flat
//! (bounded-Lipschitz) distance between them.
//!
//! The flat distance
//!
//! ```text
//! d(μ, ν) = sup { ∫ φ d(μ − ν) : |φ| ≤ 1, Lip(φ) ≤ 1 }
//! ```
//!
//! reduces, for discrete measures, to a linear program on the merged support
//! `y_1 < … < y_K` with signed masses `s_j`:
//!
//! ```text
//! maximize Σ φ_j s_j   subject to  |φ_j| ≤ 1,  |φ_{j+1} − φ_j| ≤ y_{j+1} − y_j.
//! ```
//!
//! The constraint graph is a path, so [`flat_distance`] solves it exactly by a
//! forward pass over concave piecewise-linear value functions.
//! [`flat_distance_oracle`] solves the same program by brute-force dynamic
//! programming on a value grid and is kept as an independent check.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Tolerances applied by [`DiscreteMeasure::normalize_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeTol<T> {
    /// Points closer than this to the first point of a cluster are merged.
    pub point_tol: T,
    /// Atoms with mass `<= drop_tol` are removed.
    pub drop_tol: T,
    /// Negative masses down to `-mass_tol` are clipped to zero.
    pub mass_tol: T,
}

impl<T: Real> Default for NormalizeTol<T> {
    fn default() -> Self {
        Self {
            point_tol: T::lit(1e-12),
            drop_tol: T::zero(),
            mass_tol: T::lit(1e-12),
        }
    }
}

/// `Σ mᵢ δ_{xᵢ}` with strictly increasing `xᵢ ≥ 0` and `mᵢ > drop_tol`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "RawMeasure<T>")]
pub struct DiscreteMeasure<T> {
    points: Vec<T>,
    masses: Vec<T>,
}

#[derive(Deserialize)]
#[serde(bound = "T: Real")]
struct RawMeasure<T> {
    points: Vec<T>,
    masses: Vec<T>,
}

impl<T: Real> TryFrom<RawMeasure<T>> for DiscreteMeasure<T> {
    type Error = Error;

    fn try_from(raw: RawMeasure<T>) -> Result<Self> {
        Self::normalize(&raw.points, &raw.masses)
    }
}

impl<T: Real> DiscreteMeasure<T> {
    pub fn zero() -> Self {
        Self {
            points: Vec::new(),
            masses: Vec::new(),
        }
    }

    pub fn dirac(x: T, m: T) -> Result<Self> {
        Self::normalize(&[x], &[m])
    }

    /// Sorts, merges coincident points and drops empty atoms using the default
    /// tolerances.
    pub fn normalize(points: &[T], masses: &[T]) -> Result<Self> {
        Self::normalize_with(points, masses, NormalizeTol::default())
    }

    pub fn normalize_with(points: &[T], masses: &[T], tol: NormalizeTol<T>) -> Result<Self> {
        if points.len() != masses.len() {
            return Err(Error::LengthMismatch {
                what: "points vs masses",
                left: points.len(),
                right: masses.len(),
            });
        }
        let mut atoms = Vec::with_capacity(points.len());
        for (&x, &m) in points.iter().zip(masses) {
            if !(x >= T::zero()) || !x.is_finite() {
                return Err(Error::NegativePoint(x.to_f64_lossy()));
            }
            if !m.is_finite() || m < -tol.mass_tol {
                return Err(Error::NegativeMass(m.to_f64_lossy()));
            }
            atoms.push((x, m.max(T::zero())));
        }
        atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite points"));

        let mut out_points: Vec<T> = Vec::with_capacity(atoms.len());
        let mut out_masses: Vec<T> = Vec::with_capacity(atoms.len());
        let mut anchor = T::zero();
        for (x, m) in atoms {
            match out_points.last() {
                Some(_) if x - anchor <= tol.point_tol => {
                    *out_masses.last_mut().unwrap() += m;
                }
                _ => {
                    anchor = x;
                    out_points.push(x);
                    out_masses.push(m);
                }
            }
        }
        let (points, masses) = out_points
            .into_iter()
            .zip(out_masses)
            .filter(|&(_, m)| m > tol.drop_tol)
            .unzip();
        Ok(Self { points, masses })
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn masses(&self) -> &[T] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn atoms(&self) -> impl Iterator<Item = (T, T)> + '_ {
        self.points.iter().copied().zip(self.masses.iter().copied())
    }

    pub fn total_mass(&self) -> T {
        self.masses.iter().copied().sum()
    }

    /// `Σ mᵢ γ(xᵢ)`.
    pub fn integrate(&self, gamma: impl Fn(T) -> T) -> T {
        self.atoms().map(|(x, m)| m * gamma(x)).sum()
    }

    /// Like [`integrate`](Self::integrate) for fallible integrands; the first
    /// failure is returned.
    pub fn try_integrate<E>(&self, gamma: impl Fn(T) -> std::result::Result<T, E>) -> std::result::Result<T, E> {
        let mut acc = T::zero();
        for (x, m) in self.atoms() {
            acc += m * gamma(x)?;
        }
        Ok(acc)
    }

    /// Sum of two measures (atoms concatenated, then normalized).
    pub fn add(&self, other: &Self) -> Self {
        let points: Vec<T> = self.points.iter().chain(&other.points).copied().collect();
        let masses: Vec<T> = self.masses.iter().chain(&other.masses).copied().collect();
        Self::normalize(&points, &masses).expect("sum of valid measures is valid")
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        let masses: Vec<T> = self.masses.iter().map(|&m| m * factor).collect();
        Self::normalize(&self.points, &masses)
    }
}

/// Merged support of `mu` and `nu` with signed masses `mu − nu`.
///
/// Returns `(points, signed_masses)`; equal points are combined exactly.
pub fn signed_difference<T: Real>(mu: &DiscreteMeasure<T>, nu: &DiscreteMeasure<T>) -> (Vec<T>, Vec<T>) {
    let (mut i, mut j) = (0, 0);
    let cap = mu.len() + nu.len();
    let mut ys = Vec::with_capacity(cap);
    let mut ss = Vec::with_capacity(cap);
    while i < mu.len() || j < nu.len() {
        let take_mu = j >= nu.len() || (i < mu.len() && mu.points[i] <= nu.points[j]);
        let take_nu = i >= mu.len() || (j < nu.len() && nu.points[j] <= mu.points[i]);
        let (y, s) = match (take_mu, take_nu) {
            (true, true) => {
                let r = (mu.points[i], mu.masses[i] - nu.masses[j]);
                i += 1;
                j += 1;
                r
            }
            (true, false) => {
                let r = (mu.points[i], mu.masses[i]);
                i += 1;
                r
            }
            _ => {
                let r = (nu.points[j], -nu.masses[j]);
                j += 1;
                r
            }
        };
        ys.push(y);
        ss.push(s);
    }
    (ys, ss)
}

#[derive(Debug, Clone, Copy)]
struct Segment<T> {
    len: T,
    /// Slope before adding the running offset.
    raw_slope: T,
}

/// Concave piecewise-linear function on `[-1, 1]` stored as its value at `-1`
/// and two runs of segments: strictly increasing ones up to the peak and
/// nonincreasing ones after it. Slopes carry a lazy common offset.
struct ConcaveChain<T> {
    value_at_left: T,
    offset: T,
    rising: VecDeque<Segment<T>>,
    falling: VecDeque<Segment<T>>,
    rising_len: T,
    falling_len: T,
}

impl<T: Real> ConcaveChain<T> {
    fn zero() -> Self {
        let two = T::lit(2.0);
        let mut falling = VecDeque::new();
        falling.push_back(Segment {
            len: two,
            raw_slope: T::zero(),
        });
        Self {
            value_at_left: T::zero(),
            offset: T::zero(),
            rising: VecDeque::new(),
            falling,
            rising_len: T::zero(),
            falling_len: two,
        }
    }

    fn slope(&self, seg: &Segment<T>) -> T {
        seg.raw_slope + self.offset
    }

    /// Adds `w·φ`.
    fn add_linear(&mut self, w: T) {
        self.offset += w;
        self.value_at_left -= w;
        self.rebalance();
    }

    fn rebalance(&mut self) {
        while let Some(seg) = self.falling.front().copied() {
            if self.slope(&seg) > T::zero() {
                self.falling.pop_front();
                self.falling_len -= seg.len;
                self.rising_len += seg.len;
                self.rising.push_back(seg);
            } else {
                break;
            }
        }
        while let Some(seg) = self.rising.back().copied() {
            if self.slope(&seg) <= T::zero() {
                self.rising.pop_back();
                self.rising_len -= seg.len;
                self.falling_len += seg.len;
                self.falling.push_front(seg);
            } else {
                break;
            }
        }
    }

    /// Replaces `V` by `φ ↦ max { V(ψ) : |ψ − φ| ≤ radius, ψ ∈ [-1, 1] }`.
    fn dilate(&mut self, radius: T) {
        if radius <= T::zero() {
            return;
        }
        let two = T::lit(2.0);
        let rise = self.rising_len.max(T::zero());
        let flat_len = (rise + radius).min(two) - (rise - radius).max(T::zero());

        let mut cut = radius.min(rise);
        while cut > T::zero() {
            let Some(front) = self.rising.front_mut() else { break };
            let slope = front.raw_slope + self.offset;
            if front.len <= cut {
                let seg = self.rising.pop_front().unwrap();
                self.value_at_left += seg.len * slope;
                self.rising_len -= seg.len;
                cut -= seg.len;
            } else {
                front.len -= cut;
                self.value_at_left += cut * slope;
                self.rising_len -= cut;
                cut = T::zero();
            }
        }

        let mut cut = radius.min(self.falling_len.max(T::zero()));
        while cut > T::zero() {
            let Some(back) = self.falling.back_mut() else { break };
            if back.len <= cut {
                let seg = self.falling.pop_back().unwrap();
                self.falling_len -= seg.len;
                cut -= seg.len;
            } else {
                back.len -= cut;
                self.falling_len -= cut;
                cut = T::zero();
            }
        }

        if flat_len > T::zero() {
            self.falling.push_front(Segment {
                len: flat_len,
                raw_slope: -self.offset,
            });
            self.falling_len += flat_len;
        }
    }

    fn max(&self) -> T {
        self.value_at_left
            + self
                .rising
                .iter()
                .map(|s| s.len * (s.raw_slope + self.offset))
                .sum::<T>()
    }
}

/// Exact maximum of `Σ φ_j s_j` over `|φ_j| ≤ 1`, `|φ_{j+1} − φ_j| ≤ gaps[j]`.
///
/// `gaps.len()` must be `weights.len() - 1` (or zero for empty input).
pub fn chain_lp_max<T: Real>(weights: &[T], gaps: &[T]) -> T {
    if weights.is_empty() {
        return T::zero();
    }
    debug_assert_eq!(gaps.len() + 1, weights.len());
    let mut chain = ConcaveChain::zero();
    for (j, &w) in weights.iter().enumerate() {
        if j > 0 {
            chain.dilate(gaps[j - 1]);
        }
        chain.add_linear(w);
    }
    chain.max()
}

/// Flat (bounded-Lipschitz) distance between two discrete measures.
pub fn flat_distance<T: Real>(mu: &DiscreteMeasure<T>, nu: &DiscreteMeasure<T>) -> T {
    let (ys, ss) = signed_difference(mu, nu);
    let gaps: Vec<T> = ys.windows(2).map(|w| w[1] - w[0]).collect();
    chain_lp_max(&ss, &gaps).max(T::zero())
}

/// Grid dynamic program for the same chain program, with `φ_j` restricted to
/// `{-1, -1 + h, …, 1}`.
///
/// The result is a lower bound `L_h` on [`flat_distance`] whose gap is at most
/// `h · Σ|s_j|`. Cost is `O(K / h)`.
pub fn flat_distance_oracle<T: Real>(mu: &DiscreteMeasure<T>, nu: &DiscreteMeasure<T>, h: T) -> Result<T> {
    if !(h > T::zero()) || h > T::one() {
        return Err(Error::Domain(format!("oracle grid step must lie in (0, 1], got {h}")));
    }
    let (ys, ss) = signed_difference(mu, nu);
    if ys.is_empty() {
        return Ok(T::zero());
    }
    let h64 = h.to_f64_lossy();
    let steps = (2.0 / h64 + 1e-9).floor() as usize;
    let grid: Vec<f64> = (0..=steps).map(|i| -1.0 + i as f64 * h64).collect();
    let s: Vec<f64> = ss.iter().map(|v| v.to_f64_lossy()).collect();

    let mut value: Vec<f64> = grid.iter().map(|&p| s[0] * p).collect();
    let mut window = VecDeque::with_capacity(grid.len());
    let mut next = vec![0.0; grid.len()];
    for j in 1..ys.len() {
        let gap = (ys[j] - ys[j - 1]).to_f64_lossy();
        let radius = ((gap / h64) * (1.0 + 1e-12)).floor().min(steps as f64) as usize;
        sliding_max(&value, radius, &mut window, &mut next);
        for (k, v) in next.iter().enumerate() {
            value[k] = v + s[j] * grid[k];
        }
    }
    let best = value.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(T::lit(best.max(0.0)))
}

/// `out[i] = max(values[i - r ..= i + r])` with clamping at the ends.
fn sliding_max(values: &[f64], r: usize, deque: &mut VecDeque<usize>, out: &mut [f64]) {
    deque.clear();
    let n = values.len();
    let mut pushed = 0;
    for (i, slot) in out.iter_mut().enumerate() {
        let hi = (i + r).min(n - 1);
        while pushed <= hi {
            while let Some(&b) = deque.back() {
                if values[b] <= values[pushed] {
                    deque.pop_back();
                } else {
                    break;
                }
            }
            deque.push_back(pushed);
            pushed += 1;
        }
        let lo = i.saturating_sub(r);
        while let Some(&f) = deque.front() {
            if f < lo {
                deque.pop_front();
            } else {
                break;
            }
        }
        *slot = values[*deque.front().unwrap()];
    }
}

/// One entry of a pairing between atoms of two measures. `None` stands for a
/// zero-mass atom placed at the partner's position.
pub type AtomPair = (Option<usize>, Option<usize>);

/// Pairs atoms by rank; the shorter measure is padded with zero-mass atoms.
pub fn rank_pairing<T: Real>(mu: &DiscreteMeasure<T>, nu: &DiscreteMeasure<T>) -> Vec<AtomPair> {
    let n = mu.len().max(nu.len());
    (0..n)
        .map(|i| ((i < mu.len()).then_some(i), (i < nu.len()).then_some(i)))
        .collect()
}

/// `max{1, Σ|mᵢ|} · Σᵢ (|mᵢ − mᵢ′| + |xᵢ − xᵢ′|)` for the given pairing.
///
/// Every atom of both measures must appear exactly once.
pub fn deltas_bound<T: Real>(mu: &DiscreteMeasure<T>, nu: &DiscreteMeasure<T>, pairing: &[AtomPair]) -> Result<T> {
    let mut seen_mu = vec![false; mu.len()];
    let mut seen_nu = vec![false; nu.len()];
    let mut mass_sum = T::zero();
    let mut spread = T::zero();
    for &(a, b) in pairing {
        let (xa, ma) = match a {
            Some(i) => mark(&mut seen_mu, i)?.then(|| (mu.points[i], mu.masses[i])),
            None => None,
        }
        .unzip();
        let (xb, mb) = match b {
            Some(j) => mark(&mut seen_nu, j)?.then(|| (nu.points[j], nu.masses[j])),
            None => None,
        }
        .unzip();
        let (x1, x2) = match (xa, xb) {
            (Some(x1), Some(x2)) => (x1, x2),
            (Some(x), None) | (None, Some(x)) => (x, x),
            (None, None) => continue,
        };
        let m1 = ma.unwrap_or_else(T::zero);
        let m2 = mb.unwrap_or_else(T::zero);
        mass_sum += m1.abs();
        spread += (m1 - m2).abs() + (x1 - x2).abs();
    }
    if seen_mu.iter().any(|s| !s) || seen_nu.iter().any(|s| !s) {
        return Err(Error::LengthMismatch {
            what: "pairing does not cover every atom",
            left: seen_mu.iter().filter(|s| **s).count(),
            right: seen_nu.iter().filter(|s| **s).count(),
        });
    }
    Ok(mass_sum.max(T::one()) * spread)
}

fn mark(seen: &mut [bool], i: usize) -> Result<bool> {
    match seen.get_mut(i) {
        Some(s) if !*s => {
            *s = true;
            Ok(true)
        }
        _ => Err(Error::Domain(format!("pairing index {i} out of range or repeated"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(points: &[f64], masses: &[f64]) -> DiscreteMeasure<f64> {
        DiscreteMeasure::normalize(points, masses).unwrap()
    }

    #[test]
    fn normalize_merges_and_sorts() {
        let mu = m(&[1.0, 1.0, 0.0], &[2.0, 3.0, 1.0]);
        assert_eq!(mu.points(), &[0.0, 1.0]);
        assert_eq!(mu.masses(), &[1.0, 5.0]);
        assert!(m(&[], &[]).is_empty());
        assert!(m(&[2.0], &[0.0]).is_empty());
    }

    #[test]
    fn normalize_rejects_bad_input() {
        assert!(matches!(
            DiscreteMeasure::normalize(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            DiscreteMeasure::normalize(&[1.0], &[-1e-3]),
            Err(Error::NegativeMass(_))
        ));
        assert!(matches!(
            DiscreteMeasure::normalize(&[-1.0], &[1.0]),
            Err(Error::NegativePoint(_))
        ));
        // tiny negative masses are clipped, then dropped
        assert!(m(&[1.0], &[-1e-14]).is_empty());
    }

    #[test]
    fn mass_and_integrals() {
        assert_eq!(DiscreteMeasure::<f64>::zero().total_mass(), 0.0);
        assert_eq!(m(&[0.0, 1.0], &[1.0, 2.5]).total_mass(), 3.5);
        assert_eq!(m(&[2.0], &[3.0]).integrate(|a| a), 6.0);
        assert_eq!(m(&[1.0, 3.0], &[1.0, 2.0]).integrate(|a| a * a), 19.0);
        let mu = m(&[0.3, 4.0], &[1.5, 0.25]);
        assert_eq!(mu.integrate(|_| 1.0), mu.total_mass());
        let failing: std::result::Result<f64, &str> = mu.try_integrate(|a| if a > 1.0 { Err("boom") } else { Ok(a) });
        assert_eq!(failing, Err("boom"));
    }

    #[test]
    fn flat_distance_basic_values() {
        let d0 = m(&[0.0], &[1.0]);
        assert_eq!(flat_distance(&d0, &d0), 0.0);
        assert!((flat_distance(&m(&[1.0], &[2.5]), &DiscreteMeasure::zero()) - 2.5).abs() < 1e-12);
        assert!((flat_distance(&d0, &m(&[3.0], &[1.0])) - 2.0).abs() < 1e-12);
        assert!((flat_distance(&d0, &m(&[0.5], &[1.0])) - 0.5).abs() < 1e-12);
        assert_eq!(flat_distance(&DiscreteMeasure::<f64>::zero(), &DiscreteMeasure::zero()), 0.0);
    }

    #[test]
    fn oracle_brackets_dirac_pair() {
        let a = m(&[0.0], &[1.0]);
        let b = m(&[3.0], &[1.0]);
        let lo = flat_distance_oracle(&a, &b, 0.01).unwrap();
        assert!(lo >= 2.0 - 0.02 - 1e-12 && lo <= 2.0 + 1e-12, "{lo}");
        assert_eq!(flat_distance_oracle(&a, &a, 0.01).unwrap(), 0.0);
        assert!(flat_distance_oracle(&a, &b, 0.0).is_err());
    }

    #[test]
    fn deltas_bound_example() {
        let a = m(&[0.0, 1.0], &[1.0, 2.0]);
        let b = m(&[0.0, 1.2], &[1.5, 2.0]);
        let bound = deltas_bound(&a, &b, &rank_pairing(&a, &b)).unwrap();
        assert!((bound - 2.1).abs() < 1e-12);
        assert_eq!(deltas_bound(&a, &a, &rank_pairing(&a, &a)).unwrap(), 0.0);
        assert!(deltas_bound(&a, &b, &[(Some(0), Some(0))]).is_err());
        assert!(deltas_bound(&a, &b, &[(Some(0), Some(0)), (Some(0), Some(1))]).is_err());
    }

    #[test]
    fn generic_over_f32() {
        let a = DiscreteMeasure::<f32>::normalize(&[0.0], &[1.0]).unwrap();
        let b = DiscreteMeasure::<f32>::normalize(&[0.25], &[1.0]).unwrap();
        assert!((flat_distance(&a, &b) - 0.25).abs() < 1e-6);
    }

    fn measure_strategy() -> impl Strategy<Value = DiscreteMeasure<f64>> {
        prop::collection::vec((0.0f64..10.0, 0.0f64..5.0), 0..8).prop_map(|atoms| {
            let (p, q): (Vec<f64>, Vec<f64>) = atoms.into_iter().unzip();
            DiscreteMeasure::normalize(&p, &q).unwrap()
        })
    }

    proptest! {
        #[test]
        fn lp_sandwiches_oracle(a in measure_strategy(), b in measure_strategy()) {
            let h = 1e-2;
            let lp = flat_distance(&a, &b);
            let dp = flat_distance_oracle(&a, &b, h).unwrap();
            let (_, s) = signed_difference(&a, &b);
            let slack: f64 = s.iter().map(|v| v.abs()).sum::<f64>() * h;
            prop_assert!(dp <= lp + 1e-9);
            prop_assert!(lp <= dp + slack + 1e-9);
        }

        #[test]
        fn integrate_is_additive(a in measure_strategy(), b in measure_strategy()) {
            let g = |x: f64| (x * 0.7).sin() + 2.0;
            let lhs = a.add(&b).integrate(g);
            let rhs = a.integrate(g) + b.integrate(g);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }

        #[test]
        fn unit_dirac_translation(x in 0.0f64..10.0, eps in 0.0f64..4.0) {
            let d = flat_distance(&m(&[x], &[1.0]), &m(&[x + eps], &[1.0]));
            prop_assert!((d - eps.min(2.0)).abs() < 1e-9);
        }
    }
}
