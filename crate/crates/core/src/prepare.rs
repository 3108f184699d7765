//! Initial data: sampled physical profiles and the truncated, mollified
//! `f_{0,alpha}`.

use std::path::PathBuf;
use std::sync::Arc;

use log::warn;

use crate::error::{Error, Result};
use crate::snapshot::read_snapshot;
use crate::statistics::norm_sq;
use crate::summation::compensated_sum;
use crate::transport::{DistributionField, PhaseSpace};

/// Mollifier half-widths below this many cells are not resolved.
const MIN_CELLS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub enum InitialProfile {
    /// `1 / (exp((|v - u|^2 - mu) / T) - 1)`, homogeneous in `x`.
    BoseEinstein { temperature: f64, mu: f64, drift: [f64; 3] },
    /// `A exp(-d(x, x0)^2 / 2 w_x^2) exp(-|v - v0|^2 / 2 w_v^2)` with the
    /// periodic distance `d`; homogeneous when `width_x` is absent.
    Gaussian {
        amplitude: f64,
        center_x: f64,
        center_v: [f64; 3],
        width_x: Option<f64>,
        width_v: f64,
    },
    /// `height` on `x_window[0] <= x <= x_window[1]`, `|v| <= v_radius`.
    Plateau { height: f64, x_window: [f64; 2], v_radius: f64 },
    /// Values read from a snapshot file on the same grid.
    Custom { path: PathBuf },
}

/// Facts about sampled initial data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileReport {
    /// `sum_j max_i f(x_i, v_j) dv^3`.
    pub c0: f64,
    /// Smallest integer `L` with `sup f <= 2^L`; 0 for the zero field.
    pub bound_exponent: i32,
    pub sup: f64,
}

/// `sum_j max_i f dv^3`.
pub fn sup_mass(field: &DistributionField) -> f64 {
    compensated_sum(field.x_sup()) * field.velocity().cell_volume()
}

/// `ceil(log2 sup)`, or 0 for `sup = 0`.
pub fn bound_exponent(sup: f64) -> i32 {
    if sup > 0.0 {
        sup.log2().ceil() as i32
    } else {
        0
    }
}

pub fn report(field: &DistributionField) -> ProfileReport {
    let sup = field.sup();
    ProfileReport {
        c0: sup_mass(field),
        bound_exponent: bound_exponent(sup),
        sup,
    }
}

fn periodic_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

impl InitialProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidProfile(m));
        match self {
            InitialProfile::BoseEinstein { temperature, mu, drift } => {
                if !(*mu < 0.0) {
                    return bad(format!("bose-einstein needs mu < 0, got {mu}"));
                }
                if !(temperature.is_finite() && *temperature > 0.0) {
                    return bad(format!("temperature {temperature} must be positive"));
                }
                if drift.iter().any(|d| !d.is_finite()) {
                    return bad("drift must be finite".into());
                }
            }
            InitialProfile::Gaussian {
                amplitude,
                center_x,
                center_v,
                width_x,
                width_v,
            } => {
                if !(amplitude.is_finite() && *amplitude >= 0.0) {
                    return bad(format!("amplitude {amplitude} must be finite and non-negative"));
                }
                if !center_x.is_finite() || center_v.iter().any(|c| !c.is_finite()) {
                    return bad("gaussian centre must be finite".into());
                }
                if !(width_v.is_finite() && *width_v > 0.0) || width_x.is_some_and(|w| !(w.is_finite() && w > 0.0)) {
                    return bad("gaussian widths must be positive".into());
                }
            }
            InitialProfile::Plateau {
                height,
                x_window,
                v_radius,
            } => {
                if !(height.is_finite() && *height >= 0.0) {
                    return bad(format!("plateau height {height} must be finite and non-negative"));
                }
                if !(x_window[0] <= x_window[1]) || !(*v_radius >= 0.0) {
                    return bad("plateau window must be ordered and radius non-negative".into());
                }
            }
            InitialProfile::Custom { .. } => {}
        }
        Ok(())
    }
}

/// Samples `profile` at the grid nodes. The result carries no upper bound;
/// re-tag it with [`DistributionField::with_saturation`] or mollify it.
pub fn sample_profile(profile: &InitialProfile, phase: Arc<PhaseSpace>) -> Result<(DistributionField, ProfileReport)> {
    profile.validate()?;
    let field = match profile {
        InitialProfile::BoseEinstein { temperature, mu, drift } => {
            DistributionField::from_fn(phase, f64::INFINITY, |_, v| {
                let e = norm_sq([v[0] - drift[0], v[1] - drift[1], v[2] - drift[2]]);
                1.0 / ((e - mu) / temperature).exp_m1()
            })
        }
        InitialProfile::Gaussian {
            amplitude,
            center_x,
            center_v,
            width_x,
            width_v,
        } => DistributionField::from_fn(phase, f64::INFINITY, |x, v| {
            let sx = match width_x {
                Some(w) => {
                    let d = periodic_distance(x, *center_x);
                    (-d * d / (2.0 * w * w)).exp()
                }
                None => 1.0,
            };
            let dv = norm_sq([v[0] - center_v[0], v[1] - center_v[1], v[2] - center_v[2]]);
            amplitude * sx * (-dv / (2.0 * width_v * width_v)).exp()
        }),
        InitialProfile::Plateau {
            height,
            x_window,
            v_radius,
        } => DistributionField::from_fn(phase, f64::INFINITY, |x, v| {
            let inside = x >= x_window[0] && x <= x_window[1] && norm_sq(v) <= v_radius * v_radius;
            if inside {
                *height
            } else {
                0.0
            }
        }),
        InitialProfile::Custom { path } => {
            let (header, data) = read_snapshot(path)?;
            if header.n_x as usize != phase.spatial.len()
                || header.n_v as usize != phase.velocity.n_v()
                || header.v_max != phase.velocity.v_max()
            {
                return Err(Error::GridMismatch(format!(
                    "snapshot {} has n_x = {}, n_v = {}, v_max = {}",
                    path.display(),
                    header.n_x,
                    header.n_v,
                    header.v_max
                )));
            }
            DistributionField::from_data(phase, f64::INFINITY, 0.0, data)
        }
    }
    .map_err(|e| match e {
        Error::NonFinite { index, value } => {
            Error::InvalidProfile(format!("non-finite sample {value} at index {index}"))
        }
        other => other,
    })?;
    let rep = report(&field);
    Ok((field, rep))
}

/// Bookkeeping of [`mollify_initial`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MollifyReport {
    pub mass_in: f64,
    /// Mass removed by the cap `min(f, 1/alpha - alpha)`.
    pub capped_mass: f64,
    /// Mass removed by zeroing outside `|v| <= 1/alpha`.
    pub truncated_mass: f64,
    pub mass_out: f64,
    pub smoothed_x: bool,
    pub smoothed_v: bool,
}

fn bump(s: f64) -> f64 {
    if s.abs() < 1.0 {
        (-1.0 / (1.0 - s * s)).exp()
    } else {
        0.0
    }
}

/// `f_{0,alpha}`: cap at `1/alpha - alpha`, convolve with a discretely
/// normalised `C^inf` bump of half-width `width` (default `alpha`) in `x`
/// (periodic) and `v` (zero extension), then zero outside `|v| <= 1/alpha`.
pub fn mollify_initial(
    f0: &DistributionField,
    alpha: f64,
    width: Option<f64>,
) -> Result<(DistributionField, MollifyReport)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain {
            what: "mollifier alpha",
            value: alpha,
            bound: "must lie in (0, 1)".into(),
        });
    }
    let h = width.unwrap_or(alpha);
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Domain {
            what: "mollifier width",
            value: h,
            bound: "must be positive".into(),
        });
    }
    let phase = f0.phase().clone();
    let measure = phase.cell_measure();
    let n_x = phase.spatial.len();
    let grid = &phase.velocity;
    let n_v = grid.n_v();
    let len_v = grid.len();
    let cap = 1.0 / alpha - alpha;
    let mass_in = compensated_sum(f0.data().iter().copied()) * measure;

    let mut g: Vec<f64> = f0.data().iter().map(|&y| y.min(cap)).collect();
    let capped_mass = mass_in - compensated_sum(g.iter().copied()) * measure;

    let dx = phase.spatial.dx();
    let smoothed_x = h / dx >= MIN_CELLS;
    if smoothed_x {
        let reach = (h / dx).ceil() as isize;
        let taps: Vec<(isize, f64)> = (-reach..=reach).map(|m| (m, bump(m as f64 * dx / h))).filter(|t| t.1 > 0.0).collect();
        let total = compensated_sum(taps.iter().map(|t| t.1));
        let mut out = vec![0.0; g.len()];
        for i in 0..n_x {
            for &(m, w) in &taps {
                let src = phase.spatial.wrap(i as isize - m) * len_v;
                let dst = i * len_v;
                for j in 0..len_v {
                    out[dst + j] += w / total * g[src + j];
                }
            }
        }
        g = out;
    } else {
        warn!("mollifier width {h} spans fewer than {MIN_CELLS} spatial cells; x-smoothing skipped");
    }

    let dv = grid.dv();
    let smoothed_v = h / dv >= MIN_CELLS;
    if smoothed_v {
        let reach = (h / dv).ceil() as isize;
        let mut taps = Vec::new();
        for a in -reach..=reach {
            for b in -reach..=reach {
                for c in -reach..=reach {
                    let r = ((a * a + b * b + c * c) as f64).sqrt() * dv / h;
                    let w = bump(r);
                    if w > 0.0 {
                        taps.push(([a, b, c], w));
                    }
                }
            }
        }
        let total = compensated_sum(taps.iter().map(|t| t.1));
        let n = n_v as isize;
        let mut out = vec![0.0; g.len()];
        for i in 0..n_x {
            let row = &g[i * len_v..(i + 1) * len_v];
            let dst = &mut out[i * len_v..(i + 1) * len_v];
            for (j, o) in dst.iter_mut().enumerate() {
                let (k1, k2, k3) = grid.axis_indices(j);
                let mut acc = 0.0;
                for &(d, w) in &taps {
                    let (a, b, c) = (k1 as isize - d[0], k2 as isize - d[1], k3 as isize - d[2]);
                    if a < 0 || b < 0 || c < 0 || a >= n || b >= n || c >= n {
                        continue;
                    }
                    acc += w * row[grid.index(a as usize, b as usize, c as usize)];
                }
                *o = acc / total;
            }
        }
        g = out;
    } else {
        warn!("mollifier width {h} spans fewer than {MIN_CELLS} velocity cells; v-smoothing skipped");
    }

    for x in g.iter_mut() {
        *x = x.min(cap);
    }
    let before_ball = compensated_sum(g.iter().copied()) * measure;
    let r2 = 1.0 / (alpha * alpha);
    for row in g.chunks_exact_mut(len_v) {
        for (x, v) in row.iter_mut().zip(grid.nodes()) {
            if norm_sq(*v) > r2 {
                *x = 0.0;
            }
        }
    }
    let mass_out = compensated_sum(g.iter().copied()) * measure;
    let field = DistributionField::from_data(phase, 1.0 / alpha, f0.time(), g)?;
    Ok((
        field,
        MollifyReport {
            mass_in,
            capped_mass,
            truncated_mass: before_ball - mass_out,
            mass_out,
            smoothed_x,
            smoothed_v,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase_grid::{build_velocity_grid, SpatialGrid};

    fn phase(n_x: usize, n_v: usize, v_max: f64) -> Arc<PhaseSpace> {
        PhaseSpace::new(SpatialGrid::new(n_x).unwrap(), build_velocity_grid(n_v, v_max).unwrap())
    }

    fn l1(a: &DistributionField, b: &DistributionField) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() * a.phase().cell_measure()
    }

    #[test]
    fn zero_amplitude_gaussian() {
        let p = InitialProfile::Gaussian {
            amplitude: 0.0,
            center_x: 0.5,
            center_v: [0.0; 3],
            width_x: Some(0.1),
            width_v: 1.0,
        };
        let (f, rep) = sample_profile(&p, phase(4, 4, 2.0)).unwrap();
        assert!(f.data().iter().all(|&x| x == 0.0));
        assert_eq!(rep.c0, 0.0);
        assert_eq!(rep.bound_exponent, 0);
    }

    #[test]
    fn homogeneous_c0_is_velocity_integral() {
        let p = InitialProfile::Gaussian {
            amplitude: 1.3,
            center_x: 0.0,
            center_v: [0.2, 0.0, -0.1],
            width_x: None,
            width_v: 0.8,
        };
        let (f, rep) = sample_profile(&p, phase(5, 6, 3.0)).unwrap();
        let direct = crate::phase_grid::integrate_velocity(f.velocity(), f.slice(2), |_| 1.0).unwrap();
        assert!((rep.c0 - direct).abs() <= 1e-14 * direct);
        assert!(rep.sup <= 1.3);
        assert_eq!(rep.bound_exponent, bound_exponent(f.sup()));
    }

    #[test]
    fn bose_einstein_moments_match_dense_quadrature() {
        let p = InitialProfile::BoseEinstein {
            temperature: 1.0,
            mu: -0.5,
            drift: [0.0; 3],
        };
        let (f, _) = sample_profile(&p, phase(2, 16, 5.0)).unwrap();
        let grid = f.velocity();
        let mass = crate::phase_grid::integrate_velocity(grid, f.slice(0), |_| 1.0).unwrap();
        let energy = crate::phase_grid::integrate_velocity(grid, f.slice(0), |v| norm_sq(*v)).unwrap();
        // 200^3 midpoint rule on the same cube
        let m = 200;
        let h = 10.0 / m as f64;
        let axis: Vec<f64> = (0..m).map(|k| -5.0 + (k as f64 + 0.5) * h).collect();
        let (mut dm, mut de) = (0.0, 0.0);
        for &a in &axis {
            for &b in &axis {
                for &c in &axis {
                    let e = a * a + b * b + c * c;
                    let y = 1.0 / (e + 0.5).exp_m1();
                    dm += y;
                    de += e * y;
                }
            }
        }
        let (dm, de) = (dm * h * h * h, de * h * h * h);
        assert!((mass - dm).abs() <= 0.01 * dm, "{mass} vs {dm}");
        assert!((energy - de).abs() <= 0.01 * de, "{energy} vs {de}");
    }

    #[test]
    fn bose_einstein_needs_negative_mu() {
        let p = InitialProfile::BoseEinstein {
            temperature: 1.0,
            mu: 0.0,
            drift: [0.0; 3],
        };
        assert!(matches!(sample_profile(&p, phase(2, 4, 2.0)), Err(Error::InvalidProfile(_))));
    }

    #[test]
    fn mollifier_preserves_constants() {
        let f = DistributionField::from_fn(phase(32, 8, 2.0), f64::INFINITY, |_, _| 0.7).unwrap();
        let (g, rep) = mollify_initial(&f, 0.25, Some(0.25)).unwrap();
        assert!(rep.smoothed_x && !rep.smoothed_v);
        for (a, b) in g.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(rep.truncated_mass.abs() < 1e-12);
    }

    #[test]
    fn mollifier_respects_the_cap() {
        let f = DistributionField::from_fn(phase(16, 8, 2.0), f64::INFINITY, |x, v| {
            10.0 * (-20.0 * (x - 0.5) * (x - 0.5) - norm_sq(v)).exp()
        })
        .unwrap();
        let alpha = 0.5;
        let (g, rep) = mollify_initial(&f, alpha, Some(1.0)).unwrap();
        assert!(rep.smoothed_x && rep.smoothed_v);
        assert!(g.sup() <= 1.0 / alpha - alpha);
        assert!(rep.capped_mass > 0.0);
        let grid = g.velocity();
        for row in g.data().chunks(grid.len()) {
            for (x, v) in row.iter().zip(grid.nodes()) {
                if norm_sq(*v) > 4.0 {
                    assert_eq!(*x, 0.0);
                }
            }
        }
    }

    #[test]
    fn mollifier_is_monotone() {
        let p = phase(16, 8, 2.0);
        let f = DistributionField::from_fn(p.clone(), f64::INFINITY, |x, v| (x * 7.0).sin().abs() * (-norm_sq(v)).exp()).unwrap();
        let g = DistributionField::from_fn(p, f64::INFINITY, |x, v| {
            (x * 7.0).sin().abs() * (-norm_sq(v)).exp() + 0.1 * (x * 3.0).cos().abs()
        })
        .unwrap();
        let (a, _) = mollify_initial(&f, 0.3, Some(0.6)).unwrap();
        let (b, _) = mollify_initial(&g, 0.3, Some(0.6)).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x <= y));
    }

    #[test]
    fn approximation_improves_as_alpha_shrinks() {
        let f = DistributionField::from_fn(phase(64, 6, 3.0), f64::INFINITY, |x, v| {
            (1.0 + 0.5 * (2.0 * std::f64::consts::PI * x).sin()) * (-norm_sq(v) / 2.0).exp()
        })
        .unwrap();
        let d: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&a| l1(&mollify_initial(&f, a, None).unwrap().0, &f))
            .collect();
        assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
    }

    #[test]
    fn rejects_bad_alpha() {
        let f = DistributionField::zeros(phase(4, 4, 2.0), f64::INFINITY);
        assert!(mollify_initial(&f, 0.0, None).is_err());
        assert!(mollify_initial(&f, 1.0, None).is_err());
    }
}
