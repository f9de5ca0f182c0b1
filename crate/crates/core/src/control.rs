//! Piecewise-constant vector controls on `[0, T]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ControlBox;
use crate::scalar::Real;

/// Norm on ℝᴺ used for jump sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpNorm {
    #[default]
    Euclidean,
    Max,
}

impl JumpNorm {
    pub fn distance<T: Real>(self, a: &[T], b: &[T]) -> T {
        let diffs = a.iter().zip(b).map(|(x, y)| (*x - *y).abs());
        match self {
            Self::Euclidean => diffs.map(|d| d * d).sum::<T>().sqrt(),
            Self::Max => diffs.fold(T::zero(), T::max),
        }
    }
}

/// `u(t) = u_k` on `[t_k, t_{k+1})`, with `u(T) = u_{M-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "RawControl<T>")]
pub struct Control<T> {
    breakpoints: Vec<T>,
    values: Vec<Vec<T>>,
}

#[derive(Deserialize)]
#[serde(bound = "T: Real")]
struct RawControl<T> {
    breakpoints: Vec<T>,
    values: Vec<Vec<T>>,
}

impl<T: Real> TryFrom<RawControl<T>> for Control<T> {
    type Error = Error;

    fn try_from(raw: RawControl<T>) -> Result<Self> {
        Self::new(raw.breakpoints, raw.values)
    }
}

impl<T: Real> Control<T> {
    pub fn new(breakpoints: Vec<T>, values: Vec<Vec<T>>) -> Result<Self> {
        if breakpoints.len() < 2 || values.len() + 1 != breakpoints.len() {
            return Err(Error::Config(format!(
                "control needs M + 1 breakpoints for M pieces (got {} breakpoints, {} pieces)",
                breakpoints.len(),
                values.len()
            )));
        }
        if breakpoints[0] != T::zero() {
            return Err(Error::Config("first breakpoint must be 0".into()));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("breakpoints must be strictly increasing".into()));
        }
        let dims = values[0].len();
        if dims == 0 || values.iter().any(|v| v.len() != dims) {
            return Err(Error::Config("all control values must share one positive dimension".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("control values must be finite".into()));
        }
        Ok(Self { breakpoints, values })
    }

    pub fn constant(horizon: T, value: Vec<T>) -> Result<Self> {
        Self::new(vec![T::zero(), horizon], vec![value])
    }

    /// `pieces` equal intervals on `[0, horizon]`.
    pub fn uniform(horizon: T, values: Vec<Vec<T>>) -> Result<Self> {
        let m = values.len();
        if m == 0 {
            return Err(Error::Config("control needs at least one piece".into()));
        }
        let bps = (0..=m)
            .map(|k| {
                if k == m {
                    horizon
                } else {
                    horizon * T::from_usize_lossy(k) / T::from_usize_lossy(m)
                }
            })
            .collect();
        Self::new(bps, values)
    }

    /// Builds a uniform control from a flat, piece-major vector of `M·N` values.
    pub fn from_dofs(horizon: T, dims: usize, dofs: &[T]) -> Result<Self> {
        if dims == 0 || dofs.len() % dims != 0 {
            return Err(Error::Config("dof vector length is not a multiple of the control dimension".into()));
        }
        Self::uniform(horizon, dofs.chunks(dims).map(<[T]>::to_vec).collect())
    }

    pub fn with_values(&self, dofs: &[T]) -> Result<Self> {
        let dims = self.dims();
        if dofs.len() != self.pieces() * dims {
            return Err(Error::LengthMismatch {
                what: "control dofs",
                left: dofs.len(),
                right: self.pieces() * dims,
            });
        }
        Self::new(self.breakpoints.clone(), dofs.chunks(dims).map(<[T]>::to_vec).collect())
    }

    /// Piece-major flattening: dof `k·N + j` is component `j` of piece `k`.
    pub fn dofs(&self) -> Vec<T> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn breakpoints(&self) -> &[T] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[Vec<T>] {
        &self.values
    }

    pub fn horizon(&self) -> T {
        *self.breakpoints.last().unwrap()
    }

    pub fn pieces(&self) -> usize {
        self.values.len()
    }

    pub fn dims(&self) -> usize {
        self.values[0].len()
    }

    /// Index of the piece containing `t`.
    pub fn piece_at(&self, t: T) -> Result<usize> {
        if !(t >= T::zero()) || t > self.horizon() {
            return Err(Error::Domain(format!("time {t} outside [0, {}]", self.horizon())));
        }
        let k = self.breakpoints.partition_point(|b| *b <= t);
        Ok((k - 1).min(self.pieces() - 1))
    }

    pub fn eval(&self, t: T) -> Result<&[T]> {
        Ok(&self.values[self.piece_at(t)?])
    }

    pub fn total_variation(&self) -> T {
        self.total_variation_with(JumpNorm::Euclidean)
    }

    pub fn total_variation_with(&self, norm: JumpNorm) -> T {
        self.values.windows(2).map(|w| norm.distance(&w[0], &w[1])).sum()
    }

    pub fn project(&self, bx: &ControlBox<T>) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            bx.clamp(v);
        }
        out
    }

    /// The same function expressed on `breakpoints`. When the new grid refines
    /// the old one the function, and hence its variation, is unchanged.
    pub fn resample(&self, breakpoints: Vec<T>) -> Result<Self> {
        if breakpoints.last() != Some(&self.horizon()) {
            return Err(Error::Config("resampling grid must end at the horizon".into()));
        }
        let values = breakpoints[..breakpoints.len() - 1]
            .iter()
            .map(|&t| self.eval(t).map(<[T]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Self::new(breakpoints, values)
    }

    pub fn resample_uniform(&self, pieces: usize) -> Result<Self> {
        let grid = Self::uniform(self.horizon(), vec![self.values[0].clone(); pieces])?;
        self.resample(grid.breakpoints)
    }
}

/// A control sampled on a grid `0 = s_0 < s_1 < … < s_L ≤ T`; sample `i` holds
/// on `[s_i, s_{i+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath<T> {
    pub times: Vec<T>,
    pub values: Vec<Vec<T>>,
    pub horizon: T,
}

impl<T: Real> SampledPath<T> {
    pub fn from_fn(horizon: T, samples: usize, f: impl Fn(T) -> Vec<T>) -> Self {
        let times: Vec<T> = (0..samples)
            .map(|i| horizon * T::from_usize_lossy(i) / T::from_usize_lossy(samples))
            .collect();
        let values = times.iter().map(|&t| f(t)).collect();
        Self { times, values, horizon }
    }

    pub fn total_variation(&self, norm: JumpNorm) -> T {
        self.values.windows(2).map(|w| norm.distance(&w[0], &w[1])).sum()
    }
}

/// Greedy piecewise-constant approximation: a new piece starts whenever a
/// sample departs more than `eps` from the value of the current piece, which
/// is the piece's first sample.
///
/// The result is within `eps` of every sample, takes only sampled values, and
/// its variation is at most the variation of the sample sequence.
pub fn approximate_bv<T: Real>(path: &SampledPath<T>, eps: T, norm: JumpNorm) -> Result<Control<T>> {
    if !(eps > T::zero()) {
        return Err(Error::Domain(format!("approximation tolerance must be positive, got {eps}")));
    }
    if path.times.is_empty() || path.times.len() != path.values.len() {
        return Err(Error::Config("sampled path needs matching, nonempty times and values".into()));
    }
    if path.times[0] != T::zero() {
        return Err(Error::Config("sampled path must start at t = 0".into()));
    }
    let mut breakpoints = vec![T::zero()];
    let mut values = vec![path.values[0].clone()];
    for (t, v) in path.times.iter().zip(&path.values).skip(1) {
        if norm.distance(v, values.last().unwrap()) > eps {
            breakpoints.push(*t);
            values.push(v.clone());
        }
    }
    breakpoints.push(path.horizon);
    Control::new(breakpoints, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(bps: &[f64], vals: &[f64]) -> Control<f64> {
        Control::new(bps.to_vec(), vals.iter().map(|v| vec![*v]).collect()).unwrap()
    }

    #[test]
    fn eval_is_right_continuous() {
        let u = scalar(&[0.0, 1.0, 2.0], &[1.0, 3.0]);
        assert_eq!(u.eval(0.5).unwrap(), &[1.0]);
        assert_eq!(u.eval(1.0).unwrap(), &[3.0]);
        assert_eq!(u.eval(2.0).unwrap(), &[3.0]);
        assert!(u.eval(2.5).is_err());
        assert!(u.eval(-0.1).is_err());
        let c = Control::constant(4.0, vec![0.7]).unwrap();
        assert_eq!(c.eval(3.9).unwrap(), &[0.7]);
    }

    #[test]
    fn total_variation_examples() {
        assert_eq!(Control::constant(1.0, vec![2.0]).unwrap().total_variation(), 0.0);
        assert_eq!(scalar(&[0.0, 1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).total_variation(), 3.0);
        let v = Control::uniform(2.0, vec![vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(v.total_variation(), 5.0);
        assert_eq!(v.total_variation_with(JumpNorm::Max), 4.0);
    }

    #[test]
    fn rejects_malformed_controls() {
        assert!(Control::new(vec![0.0, 1.0], vec![]).is_err());
        assert!(Control::new(vec![0.5, 1.0], vec![vec![1.0]]).is_err());
        assert!(Control::new(vec![0.0, 1.0, 1.0], vec![vec![1.0], vec![2.0]]).is_err());
        assert!(Control::new(vec![0.0, 1.0, 2.0], vec![vec![1.0], vec![2.0, 3.0]]).is_err());
    }

    #[test]
    fn projection() {
        let bx = ControlBox::unit(1);
        let u = scalar(&[0.0, 1.0, 2.0], &[0.5, 1.5]);
        let p = u.project(&bx);
        assert_eq!(p.values(), &[vec![0.5], vec![1.0]]);
        assert_eq!(p.project(&bx), p);
    }

    #[test]
    fn approximate_bv_examples() {
        let path = SampledPath {
            times: vec![0.0, 0.25, 0.5, 0.75],
            values: vec![vec![1.0], vec![1.0], vec![2.0], vec![2.0]],
            horizon: 1.0,
        };
        let u = approximate_bv(&path, 0.5, JumpNorm::Euclidean).unwrap();
        assert_eq!(u.breakpoints(), &[0.0, 0.5, 1.0]);
        assert_eq!(u.values(), &[vec![1.0], vec![2.0]]);

        let constant = SampledPath::from_fn(1.0, 10, |_| vec![0.3]);
        let u = approximate_bv(&constant, 0.1, JumpNorm::Euclidean).unwrap();
        assert_eq!(u.pieces(), 1);
        assert_eq!(u.total_variation(), 0.0);

        let ramp = SampledPath::from_fn(1.0f64, 1000, |t| vec![t]);
        let u = approximate_bv(&ramp, 0.25, JumpNorm::Euclidean).unwrap();
        for (t, v) in ramp.times.iter().zip(&ramp.values) {
            assert!((u.eval(*t).unwrap()[0] - v[0]).abs() <= 0.25);
        }
        assert!(u.total_variation() <= 1.0);
        assert!(approximate_bv(&ramp, 0.0, JumpNorm::Euclidean).is_err());
    }

    #[test]
    fn resample_preserves_function() {
        let u = scalar(&[0.0, 2.0, 4.0], &[0.1, 0.9]);
        let r = u.resample_uniform(4).unwrap();
        assert_eq!(r.pieces(), 4);
        assert_eq!(r.total_variation(), u.total_variation());
        for t in [0.0, 1.0, 1.99, 2.0, 3.5, 4.0] {
            assert_eq!(r.eval(t).unwrap(), u.eval(t).unwrap());
        }
    }

    proptest! {
        #[test]
        fn projection_does_not_increase_variation(
            vals in prop::collection::vec(prop::collection::vec(-2.0f64..3.0, 2), 1..8)
        ) {
            let u = Control::uniform(1.0, vals).unwrap();
            let bx = ControlBox::new(vec![0.0, -0.5], vec![1.0, 0.5]).unwrap();
            prop_assert!(u.project(&bx).total_variation() <= u.total_variation() + 1e-12);
            prop_assert!(u.project(&bx).total_variation_with(JumpNorm::Max) <= u.total_variation_with(JumpNorm::Max) + 1e-12);
        }
    }
}
