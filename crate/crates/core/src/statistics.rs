//! Haldane-type statistics: the filling factor `G_alpha` and the energy
//! cutoff `chi_alpha`.
//!
//! ```text
//! G_alpha(y) = (1 - a y) / (a + 1 - a y)^(1-a) * (1 + (1-a) y)^(1-a)
//! ```
//!
//! on `[0, 1/a]`. `a = 0` is the bosonic factor `1 + y` with no cutoff,
//! `a = 1` the fermionic factor `1 - y`.

use crate::error::{Error, Result};

/// Number of samples used by [`StatisticsModel::filling_factor_derivative_bound`].
const DERIVATIVE_SAMPLES: usize = 2_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatisticsModel {
    alpha: f64,
}

impl StatisticsModel {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Domain {
                what: "stats.alpha",
                value: alpha,
                bound: "must lie in [0, 1]".into(),
            });
        }
        Ok(Self { alpha })
    }

    pub fn bosonic() -> Self {
        Self { alpha: 0.0 }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_bosonic(&self) -> bool {
        self.alpha == 0.0
    }

    /// Upper end of the admissible occupation range: `1/alpha`, or infinity.
    pub fn saturation(&self) -> f64 {
        if self.is_bosonic() {
            f64::INFINITY
        } else {
            1.0 / self.alpha
        }
    }

    /// `1/alpha^2`, or infinity.
    pub fn cutoff_radius_sq(&self) -> f64 {
        if self.is_bosonic() {
            f64::INFINITY
        } else {
            1.0 / (self.alpha * self.alpha)
        }
    }

    /// `G_alpha(y)`, checking that `y` is admissible.
    pub fn filling_factor(&self, y: f64) -> Result<f64> {
        if !(y >= 0.0) || y > self.saturation() {
            return Err(Error::Domain {
                what: "occupation",
                value: y,
                bound: format!("must lie in [0, {}]", self.saturation()),
            });
        }
        Ok(self.filling_unchecked(y))
    }

    /// `G_alpha(y)` for `y` already known to be admissible.
    #[inline]
    pub fn filling_unchecked(&self, y: f64) -> f64 {
        let a = self.alpha;
        if a == 0.0 {
            return 1.0 + y;
        }
        let blocked = 1.0 - a * y;
        if blocked <= 0.0 {
            return 0.0;
        }
        blocked * self.enhancement_unchecked(y)
    }

    /// `((1 + (1-a) y) / (a + 1 - a y))^(1-a)`: the factor multiplying the
    /// gain integral once `1 - a y` has been split off, so that
    /// `G_alpha(y) = (1 - a y) * enhancement(y)`.
    #[inline]
    pub fn enhancement_unchecked(&self, y: f64) -> f64 {
        let a = self.alpha;
        if a == 0.0 {
            return 1.0 + y;
        }
        if a == 1.0 {
            return 1.0;
        }
        let e = 1.0 - a;
        (e * ((e * y).ln_1p() - (a * (1.0 - y)).ln_1p())).exp()
    }

    /// Upper bound for `|G_alpha'|` on the admissible range: the largest
    /// difference quotient over a dense uniform sampling, times two.
    ///
    /// The bosonic branch has `G' = 1` on an unbounded range.
    pub fn filling_factor_derivative_bound(&self) -> f64 {
        self.filling_factor_derivative_bound_on(self.saturation())
    }

    /// As [`Self::filling_factor_derivative_bound`], restricted to
    /// `[0, min(top, 1/alpha)]`.
    pub fn filling_factor_derivative_bound_on(&self, top: f64) -> f64 {
        if self.is_bosonic() {
            return 2.0;
        }
        let top = top.min(self.saturation());
        if !(top > 0.0) {
            return 2.0 * self.filling_unchecked(0.0).max(1.0);
        }
        let h = top / DERIVATIVE_SAMPLES as f64;
        let mut prev = self.filling_unchecked(0.0);
        let mut worst: f64 = 0.0;
        for k in 1..=DERIVATIVE_SAMPLES {
            let y = if k == DERIVATIVE_SAMPLES { top } else { k as f64 * h };
            let g = self.filling_unchecked(y);
            worst = worst.max(((g - prev) / h).abs());
            prev = g;
        }
        2.0 * worst
    }

    /// `chi_alpha(v, v_*)`: 1 iff `|v|^2 + |v_*|^2 <= 1/alpha^2`.
    #[inline]
    pub fn energy_cutoff(&self, v: [f64; 3], v_star: [f64; 3]) -> bool {
        self.energy_cutoff_sq(norm_sq(v) + norm_sq(v_star))
    }

    #[inline]
    pub fn energy_cutoff_sq(&self, energy: f64) -> bool {
        self.is_bosonic() || energy <= self.cutoff_radius_sq()
    }
}

#[inline]
pub(crate) fn norm_sq(v: [f64; 3]) -> f64 {
    v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(a: f64) -> StatisticsModel {
        StatisticsModel::new(a).unwrap()
    }

    #[test]
    fn named_values() {
        assert!((model(1.0).filling_factor(0.3).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(model(0.5).filling_factor(2.0).unwrap(), 0.0);
        assert_eq!(model(0.0).filling_factor(3.0).unwrap(), 4.0);
        assert!((model(1e-3).filling_factor(10.0).unwrap() - 11.0).abs() < 0.1);
    }

    #[test]
    fn domain_errors() {
        assert!(StatisticsModel::new(1.5).is_err());
        assert!(StatisticsModel::new(-0.1).is_err());
        assert!(model(0.5).filling_factor(-1e-9).is_err());
        assert!(model(0.5).filling_factor(2.0 + 1e-9).is_err());
        assert!(model(0.0).filling_factor(f64::NAN).is_err());
    }

    #[test]
    fn saturation_is_a_zero() {
        for a in [0.05, 0.2, 0.5, 0.9, 1.0] {
            let m = model(a);
            assert_eq!(m.filling_factor(m.saturation()).unwrap(), 0.0);
        }
    }

    #[test]
    fn fermionic_is_linear() {
        let m = model(1.0);
        for k in 0..=1000 {
            let y = k as f64 / 1000.0;
            assert!((m.filling_factor(y).unwrap() - (1.0 - y)).abs() < 1e-14);
        }
    }

    #[test]
    fn bosonic_limit_is_monotone() {
        let err = |a: f64| {
            [0.0, 1.0, 10.0]
                .iter()
                .map(|&y| (model(a).filling_factor(y).unwrap() - (1.0 + y)).abs())
                .fold(0.0, f64::max)
        };
        let e2 = err(1e-2);
        let e3 = err(1e-3);
        let e4 = err(1e-4);
        assert!(e2 > e3 && e3 > e4, "{e2} {e3} {e4}");
        assert!(e3 < 0.1);
    }

    /// Frozen from a 50-digit evaluation of the closed formula.
    const HIGH_PRECISION: [(f64, [f64; 3]); 3] = [
        (1e-2, [0.990_197_532_929_851_6, 1.956_589_597_674_422, 10.515_835_020_963_098]),
        (1e-3, [0.999_001_997_503_329_3, 1.995_618_262_067_443_6, 10.952_526_395_504_163]),
        (1e-4, [0.999_900_019_997_500_3, 1.999_561_416_159_365_8, 10.995_261_354_271_069]),
    ];

    #[test]
    fn matches_high_precision_values() {
        for (a, expected) in HIGH_PRECISION {
            for (y, e) in [0.0, 1.0, 10.0].into_iter().zip(expected) {
                let g = model(a).filling_factor(y).unwrap();
                assert!((g - e).abs() <= 1e-13 * e, "alpha={a} y={y}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn cutoff_cases() {
        let m = model(0.5);
        assert!(m.energy_cutoff([1.0, 1.0, 0.0], [1.0, 0.0, 0.0]));
        assert!(!m.energy_cutoff([2.0, 0.0, 0.0], [1.0, 0.0, 0.0]));
        assert!(m.energy_cutoff([2.0, 0.0, 0.0], [0.0, 0.0, 0.0]));
        assert!(model(0.0).energy_cutoff([1e6, 0.0, 0.0], [0.0, -1e6, 0.0]));
    }

    #[test]
    fn derivative_bounds() {
        assert!(model(1.0).filling_factor_derivative_bound() >= 1.0);
        assert!(model(0.0).filling_factor_derivative_bound() >= 1.0);
    }

    #[test]
    fn derivative_bound_against_dense_oracle() {
        let m = model(0.5);
        let n = 1_000_000;
        let h = m.saturation() / n as f64;
        let mut oracle: f64 = 0.0;
        let mut prev = m.filling_unchecked(0.0);
        for k in 1..=n {
            let g = m.filling_unchecked(k as f64 * h);
            oracle = oracle.max(((g - prev) / h).abs());
            prev = g;
        }
        let bound = m.filling_factor_derivative_bound();
        assert!(bound.is_finite());
        assert!(bound >= oracle, "{bound} < {oracle}");
        assert!(bound <= 2.0 * oracle * 1.001);
        let low = m.filling_factor_derivative_bound_on(0.5);
        let mut local: f64 = 0.0;
        let mut prev = m.filling_unchecked(0.0);
        for k in 1..=n {
            let g = m.filling_unchecked(k as f64 * 0.5 / n as f64);
            local = local.max(((g - prev) * n as f64 / 0.5).abs());
            prev = g;
        }
        assert!(low < bound && low >= local, "{low} vs {local}");
    }
}
