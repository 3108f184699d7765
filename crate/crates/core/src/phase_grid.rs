//! Phase-space discretisation: the periodic spatial grid, the truncated
//! Cartesian velocity grid and the unit-sphere rule for the collision normal.
//!
//! Velocity nodes are cell-centred: on each axis `v_k = (k + 1/2 - n_v/2) dv`
//! with `dv = 2 v_max / n_v`, so the node set is closed under `v -> -v`
//! (even `n_v` has no node at the origin, odd `n_v` has one). Nodes are
//! enumerated row-major, `j = (k1 * n_v + k2) * n_v + k3`, with `k1` the
//! index along `v_1` (the transport direction).

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::summation::NeumaierSum;

/// Fractional positions this close to a node are snapped onto it.
const NODE_SNAP: f64 = 1e-10;

/// Periodic grid on the unit torus, cell centres at `(i + 1/2) dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    n_x: usize,
    dx: f64,
}

impl SpatialGrid {
    pub fn new(n_x: usize) -> Result<Self> {
        if n_x < 2 {
            return Err(Error::InvalidGrid(format!("n_x = {n_x}, need at least 2 cells")));
        }
        Ok(Self {
            n_x,
            dx: 1.0 / n_x as f64,
        })
    }

    pub fn len(&self) -> usize {
        self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.n_x == 0
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn position(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx
    }

    /// Periodic wrap of a signed cell index.
    pub fn wrap(&self, i: isize) -> usize {
        i.rem_euclid(self.n_x as isize) as usize
    }
}

/// Cartesian velocity grid on the cube `[-v_max, v_max]^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    n_v: usize,
    v_max: f64,
    dv: f64,
    axis: Vec<f64>,
    nodes: Vec<[f64; 3]>,
}

/// Builds the cell-centred velocity grid.
pub fn build_velocity_grid(n_v: usize, v_max: f64) -> Result<VelocityGrid> {
    if n_v < 4 {
        return Err(Error::InvalidGrid(format!(
            "n_v = {n_v}, collision quadrature needs at least 4 points per axis"
        )));
    }
    if !v_max.is_finite() || v_max <= 0.0 {
        return Err(Error::InvalidGrid(format!("v_max = {v_max} must be finite and positive")));
    }
    let dv = 2.0 * v_max / n_v as f64;
    let half = n_v as f64 / 2.0;
    let axis: Vec<f64> = (0..n_v).map(|k| (k as f64 + 0.5 - half) * dv).collect();
    let mut nodes = Vec::with_capacity(n_v * n_v * n_v);
    for &a in &axis {
        for &b in &axis {
            for &c in &axis {
                nodes.push([a, b, c]);
            }
        }
    }
    Ok(VelocityGrid {
        n_v,
        v_max,
        dv,
        axis,
        nodes,
    })
}

impl VelocityGrid {
    pub fn n_v(&self) -> usize {
        self.n_v
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn dv(&self) -> f64 {
        self.dv
    }

    /// `dv^3`, the volume element of one velocity cell.
    pub fn cell_volume(&self) -> f64 {
        self.dv * self.dv * self.dv
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn node(&self, j: usize) -> [f64; 3] {
        self.nodes[j]
    }

    pub fn index(&self, k1: usize, k2: usize, k3: usize) -> usize {
        (k1 * self.n_v + k2) * self.n_v + k3
    }

    pub fn axis_indices(&self, j: usize) -> (usize, usize, usize) {
        let n = self.n_v;
        (j / (n * n), (j / n) % n, j % n)
    }

    /// Index of the node at `-v_j`.
    pub fn mirror(&self, j: usize) -> usize {
        let n = self.n_v;
        let (a, b, c) = self.axis_indices(j);
        self.index(n - 1 - a, n - 1 - b, n - 1 - c)
    }

    /// Fractional node coordinate along one axis (node `k` sits at `k`).
    fn fractional(&self, v: f64) -> f64 {
        v / self.dv + (self.n_v as f64 - 1.0) / 2.0
    }
}

/// `(i_x, j_v)` address of one sample of a distribution field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhaseIndex {
    pub i_x: usize,
    pub j_v: usize,
}

impl PhaseIndex {
    pub fn new(i_x: usize, j_v: usize, spatial: &SpatialGrid, velocity: &VelocityGrid) -> Option<Self> {
        (i_x < spatial.len() && j_v < velocity.len()).then_some(Self { i_x, j_v })
    }

    pub fn flat(&self, velocity: &VelocityGrid) -> usize {
        self.i_x * velocity.len() + self.j_v
    }
}

/// `sum_j weight(v_j) f_j dv^3`, compensated, in node order.
pub fn integrate_velocity<W>(grid: &VelocityGrid, slice: &[f64], weight: W) -> Result<f64>
where
    W: Fn(&[f64; 3]) -> f64,
{
    if slice.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "slice has {} values, velocity grid has {} nodes",
            slice.len(),
            grid.len()
        )));
    }
    let mut acc = NeumaierSum::new();
    for (j, (&f, v)) in slice.iter().zip(grid.nodes()).enumerate() {
        if !f.is_finite() {
            return Err(Error::NonFinite { index: j, value: f });
        }
        acc.add(weight(v) * f);
    }
    Ok(acc.value() * grid.cell_volume())
}

fn snap(t: f64) -> f64 {
    if t < NODE_SNAP {
        0.0
    } else if t > 1.0 - NODE_SNAP {
        1.0
    } else {
        t
    }
}

/// Trilinear weights of the nodes surrounding `v`.
///
/// The grid is surrounded by one layer of zero-valued ghost nodes, so the
/// weights sum to one inside the hull of the real nodes, fall off towards
/// zero within half a cell outside the cube, and the list is empty beyond
/// that. Zero weights are omitted.
pub fn interpolation_weights(grid: &VelocityGrid, v: [f64; 3]) -> Vec<(usize, f64)> {
    let n = grid.n_v as isize;
    let mut base = [0isize; 3];
    let mut frac = [0.0f64; 3];
    for d in 0..3 {
        let s = grid.fractional(v[d]);
        if !(s >= -1.0 && s <= n as f64) {
            return Vec::new();
        }
        let mut k = s.floor() as isize;
        let mut t = snap(s - k as f64);
        if t == 1.0 {
            k += 1;
            t = 0.0;
        }
        base[d] = k;
        frac[d] = t;
    }
    let mut out = Vec::with_capacity(8);
    for corner in 0..8usize {
        let mut w = 1.0;
        let mut idx = [0isize; 3];
        for d in 0..3 {
            let hi = (corner >> (2 - d)) & 1 == 1;
            w *= if hi { frac[d] } else { 1.0 - frac[d] };
            idx[d] = base[d] + hi as isize;
        }
        if w == 0.0 || idx.iter().any(|&k| k < 0 || k >= n) {
            continue;
        }
        out.push((grid.index(idx[0] as usize, idx[1] as usize, idx[2] as usize), w));
    }
    out
}

/// Fast trilinear evaluator over one velocity slice.
///
/// Holds a copy of the slice padded by a layer of zeros on every face; the
/// values agree with [`interpolation_weights`].
#[derive(Debug, Clone)]
pub struct Interpolator {
    np: usize,
    n: f64,
    inv_dv: f64,
    offset: f64,
    padded: Vec<f64>,
}

impl Interpolator {
    pub fn new(grid: &VelocityGrid, slice: &[f64]) -> Self {
        let n = grid.n_v;
        let np = n + 2;
        let mut padded = vec![0.0; np * np * np];
        for a in 0..n {
            for b in 0..n {
                let src = grid.index(a, b, 0);
                let dst = ((a + 1) * np + b + 1) * np + 1;
                padded[dst..dst + n].copy_from_slice(&slice[src..src + n]);
            }
        }
        Self {
            np,
            n: n as f64,
            inv_dv: 1.0 / grid.dv,
            offset: (n as f64 - 1.0) / 2.0 + 1.0,
            padded,
        }
    }

    #[inline]
    pub fn eval(&self, v: [f64; 3]) -> f64 {
        let hi = self.n + 1.0;
        let sx = v[0] * self.inv_dv + self.offset;
        let sy = v[1] * self.inv_dv + self.offset;
        let sz = v[2] * self.inv_dv + self.offset;
        if !(sx >= 0.0 && sx <= hi && sy >= 0.0 && sy <= hi && sz >= 0.0 && sz <= hi) {
            return 0.0;
        }
        let (ix, tx) = split(sx, self.np);
        let (iy, ty) = split(sy, self.np);
        let (iz, tz) = split(sz, self.np);
        let np = self.np;
        let p = &self.padded;
        let i000 = (ix * np + iy) * np + iz;
        let i010 = i000 + np;
        let i100 = i000 + np * np;
        let i110 = i100 + np;
        let c00 = p[i000] + tz * (p[i000 + 1] - p[i000]);
        let c01 = p[i010] + tz * (p[i010 + 1] - p[i010]);
        let c10 = p[i100] + tz * (p[i100 + 1] - p[i100]);
        let c11 = p[i110] + tz * (p[i110 + 1] - p[i110]);
        let c0 = c00 + ty * (c01 - c00);
        let c1 = c10 + ty * (c11 - c10);
        c0 + tx * (c1 - c0)
    }
}

#[inline]
fn split(s: f64, np: usize) -> (usize, f64) {
    // s >= 0 here, so truncation is floor
    let mut k = s as usize;
    if k >= np - 1 {
        k = np - 2;
    }
    (k, snap(s - k as f64))
}

/// Named unit-sphere quadrature rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SphereRule {
    /// Gauss-Legendre in `cos(theta)` times the uniform rule in `phi`.
    GaussProduct { n_theta: usize, n_phi: usize },
    /// Octahedrally symmetric Lebedev rule of the given polynomial degree.
    Lebedev { degree: usize },
}

impl SphereRule {
    /// Resolves a rule by name. For `gauss-product` the order is the number
    /// of polar nodes (with twice as many azimuthal nodes); for `lebedev` it
    /// is the exactness degree.
    pub fn named(name: &str, order: usize) -> Result<Self> {
        match name {
            "gauss-product" => Ok(SphereRule::GaussProduct {
                n_theta: order,
                n_phi: 2 * order,
            }),
            "lebedev" => Ok(SphereRule::Lebedev { degree: order }),
            other => Err(Error::UnknownRule(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SphereRule::GaussProduct { .. } => "gauss-product",
            SphereRule::Lebedev { .. } => "lebedev",
        }
    }

    /// Highest total degree of polynomials integrated exactly.
    pub fn degree(&self) -> usize {
        match *self {
            SphereRule::GaussProduct { n_theta, n_phi } => (2 * n_theta - 1).min(n_phi - 1),
            SphereRule::Lebedev { degree } => degree,
        }
    }
}

/// Nodes on the unit sphere with positive weights summing to `4 pi`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereQuadrature {
    rule: SphereRule,
    nodes: Vec<[f64; 3]>,
    weights: Vec<f64>,
}

const MAX_GAUSS_ORDER: usize = 64;

/// Builds a sphere rule and verifies it against closed-form spherical
/// moments up to its degree.
pub fn build_sphere_quadrature(rule: SphereRule) -> Result<SphereQuadrature> {
    let (nodes, weights) = match rule {
        SphereRule::GaussProduct { n_theta, n_phi } => {
            if n_theta == 0 || n_theta > MAX_GAUSS_ORDER || n_phi == 0 || n_phi > 2 * MAX_GAUSS_ORDER {
                return Err(Error::UnsupportedOrder {
                    rule: rule.name().into(),
                    order: n_theta,
                });
            }
            gauss_product(n_theta, n_phi)
        }
        SphereRule::Lebedev { degree } => lebedev(degree).ok_or(Error::UnsupportedOrder {
            rule: rule.name().into(),
            order: degree,
        })?,
    };
    let quad = SphereQuadrature { rule, nodes, weights };
    quad.self_test()?;
    Ok(quad)
}

impl SphereQuadrature {
    pub fn rule(&self) -> SphereRule {
        self.rule
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64; 3], f64)> + '_ {
        self.nodes.iter().zip(self.weights.iter().copied())
    }

    pub fn integrate<F: Fn(&[f64; 3]) -> f64>(&self, f: F) -> f64 {
        self.iter().map(|(n, w)| w * f(n)).collect::<NeumaierSum>().value()
    }

    /// One node out of every antipodal pair `{n, -n}`, carrying the pair's
    /// combined weight. `None` if the rule is not antipodally symmetric.
    pub fn antipodal_half(&self) -> Option<SphereQuadrature> {
        let mut used = vec![false; self.nodes.len()];
        let mut nodes = Vec::with_capacity(self.nodes.len() / 2);
        let mut weights = Vec::with_capacity(self.nodes.len() / 2);
        for i in 0..self.nodes.len() {
            if used[i] {
                continue;
            }
            let n = self.nodes[i];
            let partner = (i + 1..self.nodes.len()).find(|&k| {
                !used[k]
                    && (0..3).all(|d| (self.nodes[k][d] + n[d]).abs() < 1e-13)
                    && (self.weights[k] - self.weights[i]).abs() <= 1e-14 * self.weights[i]
            })?;
            used[i] = true;
            used[partner] = true;
            nodes.push(n);
            weights.push(self.weights[i] + self.weights[partner]);
        }
        Some(SphereQuadrature {
            rule: self.rule,
            nodes,
            weights,
        })
    }

    fn self_test(&self) -> Result<()> {
        let total: f64 = self.weights.iter().copied().collect::<NeumaierSum>().value();
        if (total - 4.0 * PI).abs() > 1e-12 * 4.0 * PI {
            return Err(Error::QuadratureSelfTest(format!("weights sum to {total}")));
        }
        for (k, (n, w)) in self.iter().enumerate() {
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if (norm - 1.0).abs() > 1e-12 || w <= 0.0 {
                return Err(Error::QuadratureSelfTest(format!(
                    "node {k}: |n| = {norm}, w = {w}"
                )));
            }
        }
        let deg = self.rule.degree();
        for a in 0..=deg {
            for b in 0..=deg - a {
                for c in 0..=deg - a - b {
                    let q = self.integrate(|n| n[0].powi(a as i32) * n[1].powi(b as i32) * n[2].powi(c as i32));
                    let exact = sphere_monomial(a, b, c);
                    if (q - exact).abs() > 1e-12 * 4.0 * PI {
                        return Err(Error::QuadratureSelfTest(format!(
                            "monomial ({a},{b},{c}): {q} vs {exact}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn double_factorial(k: i64) -> f64 {
    let mut acc = 1.0;
    let mut m = k;
    while m > 1 {
        acc *= m as f64;
        m -= 2;
    }
    acc
}

/// `\int_{S^2} x^a y^b z^c dn` in closed form.
pub fn sphere_monomial(a: usize, b: usize, c: usize) -> f64 {
    if a % 2 == 1 || b % 2 == 1 || c % 2 == 1 {
        return 0.0;
    }
    let (a, b, c) = (a as i64, b as i64, c as i64);
    4.0 * PI * double_factorial(a - 1) * double_factorial(b - 1) * double_factorial(c - 1)
        / double_factorial(a + b + c + 1)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for k in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * k + 1) as f64 * z * p1 - k as f64 * p2) / (k + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        if n % 2 == 1 && i == m - 1 {
            z = 0.0;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn gauss_product(n_theta: usize, n_phi: usize) -> (Vec<[f64; 3]>, Vec<f64>) {
    let (mu, wmu) = gauss_legendre(n_theta);
    let dphi = 2.0 * PI / n_phi as f64;
    let mut nodes = Vec::with_capacity(n_theta * n_phi);
    let mut weights = Vec::with_capacity(n_theta * n_phi);
    for (&z, &wz) in mu.iter().zip(&wmu) {
        let r = (1.0 - z * z).max(0.0).sqrt();
        for k in 0..n_phi {
            let phi = (k as f64 + 0.5) * dphi;
            nodes.push([r * phi.cos(), r * phi.sin(), z]);
            weights.push(wz * dphi);
        }
    }
    (nodes, weights)
}

fn lebedev(degree: usize) -> Option<(Vec<[f64; 3]>, Vec<f64>)> {
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    let mut push_orbit = |points: Vec<[f64; 3]>, w: f64| {
        for p in points {
            nodes.push(p);
            weights.push(4.0 * PI * w);
        }
    };
    let octahedron = || {
        let mut v = Vec::new();
        for d in 0..3 {
            for s in [1.0, -1.0] {
                let mut p = [0.0; 3];
                p[d] = s;
                v.push(p);
            }
        }
        v
    };
    let cube = || {
        let a = 1.0 / 3f64.sqrt();
        let mut v = Vec::new();
        for sx in [a, -a] {
            for sy in [a, -a] {
                for sz in [a, -a] {
                    v.push([sx, sy, sz]);
                }
            }
        }
        v
    };
    let edges = || {
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let mut v = Vec::new();
        for (d1, d2) in [(0, 1), (0, 2), (1, 2)] {
            for s1 in [a, -a] {
                for s2 in [a, -a] {
                    let mut p = [0.0; 3];
                    p[d1] = s1;
                    p[d2] = s2;
                    v.push(p);
                }
            }
        }
        v
    };
    match degree {
        3 => push_orbit(octahedron(), 1.0 / 6.0),
        5 => {
            push_orbit(octahedron(), 1.0 / 15.0);
            push_orbit(cube(), 3.0 / 40.0);
        }
        7 => {
            push_orbit(octahedron(), 1.0 / 21.0);
            push_orbit(edges(), 4.0 / 105.0);
            push_orbit(cube(), 27.0 / 840.0);
        }
        _ => return None,
    }
    Some((nodes, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_velocity_grid_layout() {
        let g = build_velocity_grid(4, 2.0).unwrap();
        assert_eq!(g.len(), 64);
        assert_eq!(g.dv(), 1.0);
        assert_eq!(g.axis(), &[-1.5, -0.5, 0.5, 1.5]);
        for j in 0..g.len() {
            let v = g.node(j);
            let m = g.node(g.mirror(j));
            assert_eq!([-v[0], -v[1], -v[2]], m);
            assert!(v.iter().all(|c| c.abs() <= g.v_max()));
        }
        assert_eq!(g.node(g.index(1, 2, 3)), [-0.5, 0.5, 1.5]);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(build_velocity_grid(3, 1.0).is_err());
        assert!(build_velocity_grid(6, f64::NAN).is_err());
        assert!(build_velocity_grid(6, f64::INFINITY).is_err());
        assert!(SpatialGrid::new(1).is_err());
    }

    #[test]
    fn spatial_wraps_periodically() {
        let s = SpatialGrid::new(8).unwrap();
        assert_eq!(s.dx() * 8.0, 1.0);
        assert_eq!(s.wrap(-1), 7);
        assert_eq!(s.wrap(8 + 3), 3);
        assert_eq!(s.position(0), 1.0 / 16.0);
    }

    #[test]
    fn gauss_product_moments() {
        let q = build_sphere_quadrature(SphereRule::GaussProduct { n_theta: 8, n_phi: 16 }).unwrap();
        assert_eq!(q.len(), 128);
        let total: f64 = q.weights().iter().sum();
        assert!((total - 4.0 * PI).abs() < 1e-12);
        assert!(q.integrate(|n| n[0]).abs() < 1e-12);
        assert!((q.integrate(|n| n[0] * n[0]) - 4.0 * PI / 3.0).abs() < 1e-10);
    }

    #[test]
    fn second_moment_against_dense_rule() {
        // closed form checked against a high-order numerical rule
        let dense = build_sphere_quadrature(SphereRule::GaussProduct { n_theta: 40, n_phi: 80 }).unwrap();
        let exact = 4.0 * PI / 3.0;
        assert!((dense.integrate(|n| n[0] * n[0]) - exact).abs() < 1e-12);
        for rule in [
            SphereRule::Lebedev { degree: 3 },
            SphereRule::Lebedev { degree: 5 },
            SphereRule::Lebedev { degree: 7 },
            SphereRule::GaussProduct { n_theta: 2, n_phi: 4 },
        ] {
            let q = build_sphere_quadrature(rule).unwrap();
            assert!(q.integrate(|n| n[0]).abs() < 1e-12, "{rule:?}");
            assert!((q.integrate(|n| n[0] * n[0]) - exact).abs() < 1e-10, "{rule:?}");
        }
    }

    #[test]
    fn unknown_and_unsupported_rules() {
        assert!(matches!(SphereRule::named("spiral", 4), Err(Error::UnknownRule(_))));
        assert!(matches!(
            build_sphere_quadrature(SphereRule::Lebedev { degree: 9 }),
            Err(Error::UnsupportedOrder { .. })
        ));
        assert!(matches!(
            build_sphere_quadrature(SphereRule::GaussProduct { n_theta: 0, n_phi: 4 }),
            Err(Error::UnsupportedOrder { .. })
        ));
    }

    #[test]
    fn odd_gauss_order_has_centre_node() {
        let (x, w) = gauss_legendre(5);
        assert_eq!(x[2], 0.0);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        assert!((w[2] - 128.0 / 225.0).abs() < 1e-14);
        assert!(build_sphere_quadrature(SphereRule::GaussProduct { n_theta: 5, n_phi: 10 }).is_ok());
    }

    #[test]
    fn antipodal_half_preserves_even_integrals() {
        let q = build_sphere_quadrature(SphereRule::GaussProduct { n_theta: 4, n_phi: 8 }).unwrap();
        let h = q.antipodal_half().unwrap();
        assert_eq!(h.len(), 16);
        let f = |n: &[f64; 3]| n[0] * n[0] * n[1] * n[1] + n[2] * n[2];
        assert!((q.integrate(f) - h.integrate(f)).abs() < 1e-13);
        let odd = build_sphere_quadrature(SphereRule::GaussProduct { n_theta: 3, n_phi: 3 }).unwrap();
        assert!(odd.antipodal_half().is_none());
    }

    #[test]
    fn integrate_counts_and_cancels() {
        let g = build_velocity_grid(4, 2.0).unwrap();
        let zero = vec![0.0; g.len()];
        assert_eq!(integrate_velocity(&g, &zero, |_| 1.0).unwrap(), 0.0);
        let ones = vec![1.0; g.len()];
        assert_eq!(integrate_velocity(&g, &ones, |_| 1.0).unwrap(), 64.0);
        let gauss: Vec<f64> = g
            .nodes()
            .iter()
            .map(|v| (-(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])).exp())
            .collect();
        assert!(integrate_velocity(&g, &gauss, |v| v[0]).unwrap().abs() < 1e-12);
        let mut bad = ones.clone();
        bad[17] = f64::NAN;
        assert!(matches!(
            integrate_velocity(&g, &bad, |_| 1.0),
            Err(Error::NonFinite { index: 17, .. })
        ));
    }

    #[test]
    fn interpolation_weight_cases() {
        let g = build_velocity_grid(6, 3.0).unwrap();
        let j = g.index(2, 3, 4);
        assert_eq!(interpolation_weights(&g, g.node(j)), vec![(j, 1.0)]);
        let a = g.node(g.index(2, 3, 4));
        let b = g.node(g.index(2, 3, 5));
        let mid = [a[0], a[1], 0.5 * (a[2] + b[2])];
        let w = interpolation_weights(&g, mid);
        assert_eq!(w.len(), 2);
        assert!(w.iter().all(|&(_, x)| (x - 0.5).abs() < 1e-15));
        let far = [g.v_max() + g.dv() * 1.01, 0.0, 0.0];
        assert!(interpolation_weights(&g, far).is_empty());
        // ghost band: weights fall below one
        let edge = [g.v_max(), 0.25, 0.25];
        let s: f64 = interpolation_weights(&g, edge).iter().map(|w| w.1).sum();
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn interpolator_matches_weight_list() {
        let g = build_velocity_grid(5, 2.5).unwrap();
        let f: Vec<f64> = (0..g.len()).map(|j| ((j * 37) % 11) as f64 * 0.1).collect();
        let it = Interpolator::new(&g, &f);
        let pts = [
            [0.1, -0.3, 0.77],
            [2.4, 2.4, -2.4],
            [2.9, 0.0, 0.0],
            [-3.1, 0.0, 0.0],
            g.node(17),
            [1.0, 1.0, 1.0],
        ];
        for p in pts {
            let reference: f64 = interpolation_weights(&g, p).iter().map(|&(j, w)| w * f[j]).sum();
            assert!((it.eval(p) - reference).abs() < 1e-14, "{p:?}");
        }
    }

    #[test]
    fn interpolation_reproduces_affine_functions() {
        let g = build_velocity_grid(8, 4.0).unwrap();
        let affine = |v: [f64; 3]| 0.7 + 0.3 * v[0] - 0.2 * v[1] + 0.05 * v[2];
        let f: Vec<f64> = g.nodes().iter().map(|&v| affine(v)).collect();
        let it = Interpolator::new(&g, &f);
        for p in [[0.3, -1.7, 2.2], [-3.4, 3.4, 0.0], [1.111, 0.5, -2.9]] {
            assert!((it.eval(p) - affine(p)).abs() < 1e-13);
        }
    }
}
