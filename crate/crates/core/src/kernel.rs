//! Collision kernels `B(|v - v_*|, cos theta)` with hard cutoffs.
//!
//! Both families vanish for `|v - v_*| < gamma`, for `|cos theta| < gamma'`
//! (near-perpendicular `n`) and for `1 - |cos theta| < gamma'` (grazing,
//! `n` nearly parallel to `v - v_*`).

use crate::error::{Error, Result};

/// Slack allowed on `|cos theta| <= 1` before an argument is rejected.
const COS_SLACK: f64 = 1e-12;

/// Non-negative angular factor tabulated at equally spaced `cos theta` in
/// `[-1, 1]` and interpolated linearly. A single entry is a constant.
///
/// Mirror-symmetric tables are evaluated at `|cos theta|`, so evenness holds
/// bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularTable {
    values: Vec<f64>,
    even: bool,
}

impl AngularTable {
    pub fn constant(value: f64) -> Self {
        Self {
            values: vec![value],
            even: true,
        }
    }

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidKernel("empty angular table".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidKernel(
                "angular table entries must be finite and non-negative".into(),
            ));
        }
        let even = (0..values.len()).all(|k| values[k] == values[values.len() - 1 - k]);
        Ok(Self { values, even })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, cos_theta: f64) -> f64 {
        let t = &self.values;
        if t.len() == 1 {
            return t[0];
        }
        let c = cos_theta.clamp(-1.0, 1.0);
        let c = if self.even { c.abs() } else { c };
        let s = ((c + 1.0) / 2.0) * (t.len() - 1) as f64;
        let k = (s.floor() as usize).min(t.len() - 2);
        let w = s - k as f64;
        t[k] + w * (t[k + 1] - t[k])
    }

    pub fn is_even(&self) -> bool {
        self.even
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelFamily {
    /// Constant `B0` on the cutoff support.
    BoundedCutoff { b0: f64 },
    /// `c |u|^(-3-eta) B2(cos theta)` on the cutoff support.
    VerySoft { c: f64, eta: f64, angular: AngularTable },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    family: KernelFamily,
    gamma: f64,
    gamma_prime: f64,
}

impl KernelSpec {
    pub fn bounded_cutoff(b0: f64, gamma: f64, gamma_prime: f64) -> Result<Self> {
        if !(b0.is_finite() && b0 > 0.0) {
            return Err(Error::InvalidKernel(format!("B0 = {b0} must be positive and finite")));
        }
        Self::with_cutoffs(KernelFamily::BoundedCutoff { b0 }, gamma, gamma_prime)
    }

    pub fn very_soft(c: f64, eta: f64, angular: AngularTable, gamma: f64, gamma_prime: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidKernel(format!("c = {c} must be positive and finite")));
        }
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::InvalidKernel(format!("eta = {eta} must be positive and finite")));
        }
        Self::with_cutoffs(KernelFamily::VerySoft { c, eta, angular }, gamma, gamma_prime)
    }

    fn with_cutoffs(family: KernelFamily, gamma: f64, gamma_prime: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidKernel(format!("gamma = {gamma} must be positive")));
        }
        if !(gamma_prime > 0.0 && gamma_prime < 0.5) {
            return Err(Error::InvalidKernel(format!(
                "gamma_prime = {gamma_prime} must lie in (0, 1/2)"
            )));
        }
        Ok(Self {
            family,
            gamma,
            gamma_prime,
        })
    }

    pub fn family(&self) -> &KernelFamily {
        &self.family
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn gamma_prime(&self) -> f64 {
        self.gamma_prime
    }

    /// True when `B(u, s) = B(u, -s)` for all arguments.
    pub fn is_even(&self) -> bool {
        match &self.family {
            KernelFamily::BoundedCutoff { .. } => true,
            KernelFamily::VerySoft { angular, .. } => angular.is_even(),
        }
    }

    /// Supremum of the kernel over its support.
    pub fn bound(&self) -> f64 {
        match &self.family {
            KernelFamily::BoundedCutoff { b0 } => *b0,
            KernelFamily::VerySoft { angular, .. } => self.radial(self.gamma) * angular.max(),
        }
    }

    /// Relative-speed factor, zero below `gamma`.
    #[inline]
    pub fn radial(&self, rel_speed: f64) -> f64 {
        if rel_speed < self.gamma {
            return 0.0;
        }
        match &self.family {
            KernelFamily::BoundedCutoff { b0 } => *b0,
            KernelFamily::VerySoft { c, eta, .. } => c * rel_speed.powf(-3.0 - eta),
        }
    }

    #[inline]
    pub fn in_angular_support(&self, cos_theta: f64) -> bool {
        let a = cos_theta.abs();
        a >= self.gamma_prime && 1.0 - a >= self.gamma_prime
    }

    /// Angular factor, zero inside the angular cutoffs.
    #[inline]
    pub fn angular(&self, cos_theta: f64) -> f64 {
        if !self.in_angular_support(cos_theta) {
            return 0.0;
        }
        match &self.family {
            KernelFamily::BoundedCutoff { .. } => 1.0,
            KernelFamily::VerySoft { angular, .. } => angular.eval(cos_theta),
        }
    }

    /// `B(rel_speed, cos_theta)`.
    pub fn eval_kernel(&self, rel_speed: f64, cos_theta: f64) -> Result<f64> {
        if !(rel_speed >= 0.0) {
            return Err(Error::Domain {
                what: "relative speed",
                value: rel_speed,
                bound: "must be non-negative".into(),
            });
        }
        if !(cos_theta.abs() <= 1.0 + COS_SLACK) {
            return Err(Error::Domain {
                what: "cos theta",
                value: cos_theta,
                bound: "must lie in [-1, 1]".into(),
            });
        }
        let r = self.radial(rel_speed);
        if r == 0.0 {
            return Ok(0.0);
        }
        Ok(r * self.angular(cos_theta.clamp(-1.0, 1.0)))
    }
}
