//! Functionals tracked along a run: moments, `L^inf`, the sup-mass density
//! `M_alpha`, the Bony functional and its dissipation, velocity tails and
//! `L^1` distances.

use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};

use crate::collision::CollisionOperator;
use crate::error::{Error, Result};
use crate::phase_grid::VelocityGrid;
use crate::statistics::norm_sq;
use crate::summation::{compensated_sum, NeumaierSum};
use crate::transport::{to_characteristics, DistributionField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub mass: f64,
    pub momentum: [f64; 3],
    pub energy: f64,
}

/// `sum (1, v, |v|^2) f dx dv^3`, compensated, in storage order.
pub fn moments(field: &DistributionField) -> Result<Moments> {
    let mut acc = [NeumaierSum::new(); 5];
    let nodes = field.velocity().nodes();
    for (index, &y) in field.data().iter().enumerate() {
        if !y.is_finite() {
            return Err(Error::NonFinite { index, value: y });
        }
        let v = nodes[index % nodes.len()];
        acc[0].add(y);
        acc[1].add(v[0] * y);
        acc[2].add(v[1] * y);
        acc[3].add(v[2] * y);
        acc[4].add(norm_sq(v) * y);
    }
    let m = field.phase().cell_measure();
    Ok(Moments {
        mass: acc[0].value() * m,
        momentum: [acc[1].value() * m, acc[2].value() * m, acc[3].value() * m],
        energy: acc[4].value() * m,
    })
}

/// Running maximum of `g#(s, x, v) = g(s, x + s v_1, v)` over sample times.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningSupField {
    data: Vec<f64>,
    n_v: usize,
    dv3: f64,
    last: Option<f64>,
}

impl RunningSupField {
    pub fn new(template: &DistributionField) -> Self {
        Self {
            data: vec![0.0; template.data().len()],
            n_v: template.velocity().len(),
            dv3: template.velocity().cell_volume(),
            last: None,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `max_i` of the stored field, per velocity node.
    pub fn x_sup(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.n_v];
        for row in self.data.chunks_exact(self.n_v) {
            for (o, v) in out.iter_mut().zip(row) {
                *o = o.max(*v);
            }
        }
        out
    }

    /// `sum_j max_i stored dv^3`.
    pub fn m_alpha(&self) -> f64 {
        compensated_sum(self.x_sup()) * self.dv3
    }

    /// Folds in `field` sampled at time `t` and returns the new `M_alpha`.
    pub fn update_running_sup(&mut self, field: &DistributionField, t: f64) -> Result<f64> {
        if let Some(prev) = self.last {
            if t < prev {
                return Err(Error::TimeRegression { previous: prev, current: t });
            }
        }
        if field.data().len() != self.data.len() {
            return Err(Error::GridMismatch("running sup field and sample differ in size".into()));
        }
        let sharp = to_characteristics(field, t);
        for (s, y) in self.data.iter_mut().zip(sharp.data()) {
            *s = s.max(*y);
        }
        self.last = Some(t);
        Ok(self.m_alpha())
    }
}

/// Per-cell `(sum f, sum v_1 f) dx dv^3`.
fn cell_moments(field: &DistributionField) -> (Vec<f64>, Vec<f64>) {
    let grid = field.velocity();
    let m = field.phase().cell_measure();
    (0..field.spatial().len())
        .map(|i| {
            let s = field.slice(i);
            let mass = compensated_sum(s.iter().copied()) * m;
            let p = compensated_sum(s.iter().zip(grid.nodes()).map(|(y, v)| v[0] * y)) * m;
            (mass, p)
        })
        .unzip()
}

/// `I = sum_{i < k} sum_{j, j'} (v_1j - v_1j') f(x_i, v_j) f(x_k, v_j')`,
/// weighted by `(dx dv^3)^2`, via suffix sums.
pub fn bony_functional(field: &DistributionField) -> f64 {
    let (mass, p) = cell_moments(field);
    let mut acc = NeumaierSum::new();
    let mut mass_after = NeumaierSum::new();
    let mut p_after = NeumaierSum::new();
    for i in (0..mass.len()).rev() {
        acc.add(p[i] * mass_after.value());
        acc.add(-mass[i] * p_after.value());
        mass_after.add(mass[i]);
        p_after.add(p[i]);
    }
    acc.value()
}

/// The same double sum as [`bony_functional`], evaluated term by term.
pub fn bony_functional_direct(field: &DistributionField) -> f64 {
    let nodes = field.velocity().nodes();
    let m = field.phase().cell_measure();
    let mut acc = NeumaierSum::new();
    for i in 0..field.spatial().len() {
        for k in i + 1..field.spatial().len() {
            for (a, va) in field.slice(i).iter().zip(nodes) {
                for (b, vb) in field.slice(k).iter().zip(nodes) {
                    acc.add((va[0] - vb[0]) * a * b);
                }
            }
        }
    }
    acc.value() * m * m
}

/// `sum_x dx sum n_1^2 ((v - v_*).n)^2 B chi g g_* G(g') G(g'_*)` with the
/// collision quadrature.
pub fn bony_dissipation(field: &DistributionField, op: &CollisionOperator) -> Result<f64> {
    let dx = field.spatial().dx();
    let mut acc = NeumaierSum::new();
    let mut last: Option<(&[f64], f64)> = None;
    for i in 0..field.spatial().len() {
        let s = field.slice(i);
        let d = match last {
            Some((prev, d)) if prev == s => d,
            _ => op.rates(s)?.dissipation,
        };
        last = Some((s, d));
        acc.add(d * dx);
    }
    Ok(acc.value())
}

/// `sum_{|v_j| > lambda} profile_j dv^3` for a per-node profile.
pub fn tail_of_profile(grid: &VelocityGrid, profile: &[f64], lambda: f64) -> f64 {
    let l2 = lambda * lambda;
    compensated_sum(
        profile
            .iter()
            .zip(grid.nodes())
            .filter(|(_, v)| norm_sq(**v) > l2)
            .map(|(y, _)| *y),
    ) * grid.cell_volume()
}

/// `sum_{|v_j| > lambda} max_i f(x_i, v_j) dv^3`.
pub fn tail_mass(field: &DistributionField, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain {
            what: "tail speed",
            value: lambda,
            bound: "must be non-negative".into(),
        });
    }
    Ok(tail_of_profile(field.velocity(), &field.x_sup(), lambda))
}

/// `sum |a - b| dx dv^3`.
pub fn l1_distance(a: &DistributionField, b: &DistributionField) -> Result<f64> {
    if !a.same_grid(b) {
        return Err(Error::GridMismatch("l1 distance between different grids".into()));
    }
    Ok(compensated_sum(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs())) * a.phase().cell_measure())
}

/// `sum net(x, v) |v|^2 / (1 + eps |v|^2) dx dv^3` with the unprojected
/// collision net.
pub fn regularized_energy_production(field: &DistributionField, op: &CollisionOperator, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain {
            what: "epsilon",
            value: epsilon,
            bound: "must be positive".into(),
        });
    }
    let nodes = field.velocity().nodes();
    let mut acc = NeumaierSum::new();
    for i in 0..field.spatial().len() {
        let net = op.eval(field.slice(i))?.net();
        for (y, v) in net.iter().zip(nodes) {
            let e = norm_sq(*v);
            acc.add(y * e / (1.0 + epsilon * e));
        }
    }
    Ok(acc.value() * field.phase().cell_measure())
}

/// Tail masses keyed by `lambda`, serialized as a JSON object in the order
/// the speeds were configured.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TailMasses(pub Vec<(f64, f64)>);

impl TailMasses {
    pub fn from_sup_profile(grid: &VelocityGrid, profile: &[f64], lambdas: &[f64]) -> Self {
        Self(lambdas.iter().map(|&l| (l, tail_of_profile(grid, profile, l))).collect())
    }
}

impl Serialize for TailMasses {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (l, v) in &self.0 {
            map.serialize_entry(&format!("{l}"), v)?;
        }
        map.end()
    }
}

/// One line of the diagnostics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub mass: f64,
    pub momentum: [f64; 3],
    pub energy: f64,
    pub linf: f64,
    pub m_alpha: f64,
    #[serde(rename = "bony_I")]
    pub bony_i: f64,
    pub bony_dissipation_cum: f64,
    pub tail_mass: TailMasses,
    pub tail_mass_running: TailMasses,
    pub ladder_rung: Option<i32>,
    pub projection_correction: f64,
}

impl DiagnosticsRecord {
    /// Column names of [`DiagnosticsRecord::csv_row`].
    pub fn csv_header(lambdas: &[f64]) -> Vec<String> {
        let mut h: Vec<String> = [
            "t",
            "mass",
            "momentum_1",
            "momentum_2",
            "momentum_3",
            "energy",
            "linf",
            "m_alpha",
            "bony_I",
            "bony_dissipation_cum",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend(lambdas.iter().map(|l| format!("tail_mass_{l}")));
        h.extend(lambdas.iter().map(|l| format!("tail_mass_running_{l}")));
        h.push("ladder_rung".into());
        h.push("projection_correction".into());
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut r = vec![
            self.t.to_string(),
            self.mass.to_string(),
            self.momentum[0].to_string(),
            self.momentum[1].to_string(),
            self.momentum[2].to_string(),
            self.energy.to_string(),
            self.linf.to_string(),
            self.m_alpha.to_string(),
            self.bony_i.to_string(),
            self.bony_dissipation_cum.to_string(),
        ];
        r.extend(self.tail_mass.0.iter().map(|(_, v)| v.to_string()));
        r.extend(self.tail_mass_running.0.iter().map(|(_, v)| v.to_string()));
        r.push(self.ladder_rung.map_or(String::new(), |n| n.to_string()));
        r.push(self.projection_correction.to_string());
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelSpec;
    use crate::phase_grid::{build_sphere_quadrature, build_velocity_grid, SpatialGrid, SphereRule};
    use crate::statistics::StatisticsModel;
    use crate::transport::PhaseSpace;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn phase(n_x: usize, n_v: usize, v_max: f64) -> Arc<PhaseSpace> {
        PhaseSpace::new(SpatialGrid::new(n_x).unwrap(), build_velocity_grid(n_v, v_max).unwrap())
    }

    fn random(p: Arc<PhaseSpace>, seed: u64) -> DistributionField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..p.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        DistributionField::from_data(p, f64::INFINITY, 0.0, data).unwrap()
    }

    #[test]
    fn named_moments() {
        let p = phase(2, 4, 2.0);
        let z = DistributionField::zeros(p.clone(), f64::INFINITY);
        let m = moments(&z).unwrap();
        assert_eq!((m.mass, m.momentum, m.energy), (0.0, [0.0; 3], 0.0));
        let one = DistributionField::from_fn(p, f64::INFINITY, |_, _| 1.0).unwrap();
        let m = moments(&one).unwrap();
        assert_eq!(m.mass, 64.0);
        assert_eq!(m.momentum, [0.0; 3]);
    }

    #[test]
    fn bony_two_cell_case() {
        // cell 0: mass m0 at v_1 = 0.5 and 1.5 (mean 1); cell 1: m1 at -0.5, -1.5 (mean -1)
        let p = phase(2, 4, 2.0);
        let grid = &p.velocity;
        let mut data = vec![0.0; p.len()];
        let (a, b) = (0.3, 0.7);
        data[grid.index(2, 1, 1)] = a;
        data[grid.index(3, 1, 1)] = a;
        data[64 + grid.index(1, 2, 2)] = b;
        data[64 + grid.index(0, 2, 2)] = b;
        let f = DistributionField::from_data(p.clone(), f64::INFINITY, 0.0, data).unwrap();
        let m = p.cell_measure();
        let (m0, m1) = (2.0 * a * m, 2.0 * b * m);
        let expect = 2.0 * m0 * m1;
        assert!((bony_functional(&f) - expect).abs() < 1e-14);
        assert!((bony_functional_direct(&f) - expect).abs() < 1e-14);
    }

    #[test]
    fn bony_vanishes_on_homogeneous_fields() {
        let p = phase(8, 4, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let slice: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..2.0)).collect();
        let data: Vec<f64> = (0..8).flat_map(|_| slice.iter().copied()).collect();
        let f = DistributionField::from_data(p.clone(), f64::INFINITY, 0.0, data).unwrap();
        assert!(bony_functional(&f).abs() <= 1e-12);
        assert_eq!(bony_functional(&DistributionField::zeros(p, f64::INFINITY)), 0.0);
    }

    #[test]
    fn bony_prefix_matches_direct() {
        let f = random(phase(8, 4, 2.0), 9);
        let a = bony_functional(&f);
        let b = bony_functional_direct(&f);
        let scale = moments(&f).unwrap().mass.powi(2) * 2.0;
        assert!((a - b).abs() <= 1e-13 * scale, "{a} vs {b}");
    }

    #[test]
    fn running_sup_is_monotone_and_starts_at_c0() {
        let f = random(phase(8, 4, 2.0), 1);
        let mut r = RunningSupField::new(&f);
        let m0 = r.update_running_sup(&f, 0.0).unwrap();
        assert_eq!(m0, crate::prepare::sup_mass(&f));
        let mut prev = m0;
        for k in 1..5 {
            let g = random(f.phase().clone(), 10 + k);
            let m = r.update_running_sup(&g, 0.1 * k as f64).unwrap();
            assert!(m >= prev);
            prev = m;
        }
        assert!(r.update_running_sup(&f, 0.05).is_err());
    }

    #[test]
    fn running_sup_constant_on_homogeneous_field() {
        let f = DistributionField::from_fn(phase(4, 4, 2.0), f64::INFINITY, |_, v| (-norm_sq(v)).exp()).unwrap();
        let mut r = RunningSupField::new(&f);
        let m0 = r.update_running_sup(&f, 0.0).unwrap();
        for k in 1..4 {
            assert_eq!(r.update_running_sup(&f, 0.137 * k as f64).unwrap(), m0);
        }
    }

    #[test]
    fn tails() {
        let f = random(phase(3, 4, 2.0), 2);
        let full = tail_mass(&f, 0.0).unwrap();
        assert_eq!(full, crate::prepare::sup_mass(&f));
        assert_eq!(tail_mass(&f, 2.0 * 3f64.sqrt() + 0.01).unwrap(), 0.0);
        let mut prev = full;
        for k in 1..40 {
            let t = tail_mass(&f, 0.1 * k as f64).unwrap();
            assert!(t <= prev);
            prev = t;
        }
    }

    #[test]
    fn l1_cases() {
        let p = phase(2, 4, 2.0);
        let a = random(p.clone(), 4);
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        let mut data = a.data().to_vec();
        data[17] += 0.25;
        let b = DistributionField::from_data(p.clone(), f64::INFINITY, 0.0, data).unwrap();
        assert!((l1_distance(&a, &b).unwrap() - 0.25 * p.cell_measure()).abs() < 1e-15);
        let other = DistributionField::zeros(phase(3, 4, 2.0), f64::INFINITY);
        assert!(l1_distance(&a, &other).is_err());
    }

    #[test]
    fn zero_field_functionals() {
        let p = phase(2, 4, 2.0);
        let op = CollisionOperator::new(
            StatisticsModel::bosonic(),
            KernelSpec::bounded_cutoff(1.0, 0.1, 0.1).unwrap(),
            build_sphere_quadrature(SphereRule::named("gauss-product", 2).unwrap()).unwrap(),
            p.velocity.clone(),
        );
        let z = DistributionField::zeros(p, f64::INFINITY);
        assert_eq!(bony_dissipation(&z, &op).unwrap(), 0.0);
        assert_eq!(regularized_energy_production(&z, &op, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn record_serializes_with_documented_names() {
        let rec = DiagnosticsRecord {
            t: 0.5,
            mass: 1.0,
            momentum: [0.0, 0.1, 0.0],
            energy: 2.0,
            linf: 3.0,
            m_alpha: 1.5,
            bony_i: 0.0,
            bony_dissipation_cum: 0.25,
            tail_mass: TailMasses(vec![(2.0, 0.1), (0.5, 0.4)]),
            tail_mass_running: TailMasses(vec![(2.0, 0.2), (0.5, 0.5)]),
            ladder_rung: Some(0),
            projection_correction: 1e-9,
        };
        let s = serde_json::to_string(&rec).unwrap();
        assert!(s.starts_with(r#"{"t":0.5,"mass":1.0,"momentum":[0.0,0.1,0.0],"energy":2.0"#), "{s}");
        assert!(s.contains(r#""bony_I":0.0"#));
        assert!(s.contains(r#""tail_mass":{"2":0.1,"0.5":0.4}"#));
        assert_eq!(DiagnosticsRecord::csv_header(&[2.0, 0.5]).len(), rec.csv_row().len());
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use crate::phase_grid::{build_velocity_grid, SpatialGrid};
    use crate::transport::PhaseSpace;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn triangle_inequality(seed_a in prop::collection::vec(0.0f64..1.0, 128), seed_b in prop::collection::vec(0.0f64..1.0, 128), seed_c in prop::collection::vec(0.0f64..1.0, 128)) {
            let p = PhaseSpace::new(SpatialGrid::new(2).unwrap(), build_velocity_grid(4, 2.0).unwrap());
            let a = DistributionField::from_data(p.clone(), f64::INFINITY, 0.0, seed_a).unwrap();
            let b = DistributionField::from_data(p.clone(), f64::INFINITY, 0.0, seed_b).unwrap();
            let c = DistributionField::from_data(p, f64::INFINITY, 0.0, seed_c).unwrap();
            let ab = l1_distance(&a, &b).unwrap();
            let bc = l1_distance(&b, &c).unwrap();
            let ac = l1_distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
