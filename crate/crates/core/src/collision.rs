//! Discrete collision operators.
//!
//! For an output node `v_j` the operator sums over grid partners `v_k` and
//! sphere nodes `n`:
//!
//! ```text
//! gain(v_j) = sum w B chi f(v') f(v'_*) G(f_j) G(f_k) dv^3
//! loss(v_j) = sum w B chi f_j f_k G(f(v')) G(f(v'_*)) dv^3
//! ```
//!
//! with `f(v')`, `f(v'_*)` read off the grid by trilinear interpolation.
//! Writing `G(y) = (1 - a y) H(y)` splits the gain as `(1 - a f_j) A_j`, and
//! the frozen-coefficient dynamics become `dg/dt = A - (a A + B_l) g`, whose
//! solution stays in `[0, 1/a]` for any step length.
//!
//! The fast path visits each unordered pair `{j, k}` once and each antipodal
//! pair `{n, -n}` once: both relabelings reuse the same interpolated
//! post-collision occupations when the kernel is even in `cos theta`.

use nalgebra::{Matrix5, Vector5};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::phase_grid::{build_sphere_quadrature, Interpolator, SphereQuadrature, SphereRule, VelocityGrid};
use crate::statistics::{norm_sq, StatisticsModel};
use crate::summation::NeumaierSum;

/// Tolerance on `|n| = 1`.
const NORMAL_TOLERANCE: f64 = 1e-10;

/// Output rows handled by one work unit. Fixed, so reductions do not depend
/// on the number of workers.
const ROW_CHUNK: usize = 32;

/// Largest `n_v` accepted by [`oracle_collision`].
pub const ORACLE_MAX_NV: usize = 8;

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn axpy(a: [f64; 3], s: f64, n: [f64; 3]) -> [f64; 3] {
    [a[0] + s * n[0], a[1] + s * n[1], a[2] + s * n[2]]
}

/// `v' = v - ((v - v_*).n) n`, `v'_* = v_* + ((v - v_*).n) n`.
pub fn post_collision(v: [f64; 3], v_star: [f64; 3], n: [f64; 3]) -> Result<([f64; 3], [f64; 3])> {
    let norm = dot(n, n).sqrt();
    if !((norm - 1.0).abs() <= NORMAL_TOLERANCE) {
        return Err(Error::NonUnitNormal { norm });
    }
    let c = dot(sub(v, v_star), n);
    Ok((axpy(v, -c, n), axpy(v_star, c, n)))
}

/// One binary collision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionGeometry {
    pub v: [f64; 3],
    pub v_star: [f64; 3],
    pub n: [f64; 3],
    pub v_prime: [f64; 3],
    pub v_star_prime: [f64; 3],
}

impl CollisionGeometry {
    pub fn new(v: [f64; 3], v_star: [f64; 3], n: [f64; 3]) -> Result<Self> {
        let (v_prime, v_star_prime) = post_collision(v, v_star, n)?;
        Ok(Self {
            v,
            v_star,
            n,
            v_prime,
            v_star_prime,
        })
    }

    /// `cos theta = n.(v - v_*) / |v - v_*|`; zero for equal velocities.
    pub fn cos_theta(&self) -> f64 {
        let u = sub(self.v, self.v_star);
        let r = dot(u, u).sqrt();
        if r == 0.0 {
            0.0
        } else {
            dot(u, self.n) / r
        }
    }

    /// Unit vector along `v - v'_*`, or `None` when the two coincide.
    pub fn n_perp(&self) -> Option<[f64; 3]> {
        let d = sub(self.v, self.v_star_prime);
        let r = dot(d, d).sqrt();
        (r > 0.0).then(|| [d[0] / r, d[1] / r, d[2] / r])
    }

    /// The collision with the post-collision pair as input.
    pub fn reversed(&self) -> Result<Self> {
        Self::new(self.v_prime, self.v_star_prime, self.n)
    }
}

/// Gain and loss fields over the velocity nodes of one spatial cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionTally {
    pub gain: Vec<f64>,
    pub loss: Vec<f64>,
}

impl CollisionTally {
    pub fn zeros(len: usize) -> Self {
        Self {
            gain: vec![0.0; len],
            loss: vec![0.0; len],
        }
    }

    pub fn net(&self) -> Vec<f64> {
        self.gain.iter().zip(&self.loss).map(|(g, l)| g - l).collect()
    }
}

/// Frozen-coefficient rates of one velocity slice.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionRates {
    /// `A_j = H(f_j) sum B chi f' f'_* G(f_*)`.
    pub source: Vec<f64>,
    /// `B_l,j = sum B chi f_* G(f') G(f'_*)`.
    pub depletion: Vec<f64>,
    /// `nu_j = sum B chi f_*`, the bare collision frequency.
    pub frequency: Vec<f64>,
    /// `sum n_1^2 ((v - v_*).n)^2 B chi f f_* G(f') G(f'_*)` over `(v, v_*, n)`.
    pub dissipation: f64,
}

impl CollisionRates {
    /// `sigma_j = a A_j + B_l,j`.
    pub fn sigma(&self, alpha: f64) -> Vec<f64> {
        self.source
            .iter()
            .zip(&self.depletion)
            .map(|(a, b)| alpha * a + b)
            .collect()
    }

    pub fn tally(&self, alpha: f64, f: &[f64]) -> CollisionTally {
        CollisionTally {
            gain: self.source.iter().zip(f).map(|(a, y)| (1.0 - alpha * y) * a).collect(),
            loss: self.depletion.iter().zip(f).map(|(b, y)| y * b).collect(),
        }
    }
}

/// Everything needed to evaluate collisions on one velocity grid.
#[derive(Debug, Clone)]
pub struct CollisionOperator {
    model: StatisticsModel,
    kernel: KernelSpec,
    grid: VelocityGrid,
    full: SphereQuadrature,
    half: Option<SphereQuadrature>,
}

impl CollisionOperator {
    pub fn new(model: StatisticsModel, kernel: KernelSpec, quad: SphereQuadrature, grid: VelocityGrid) -> Self {
        let half = if kernel.is_even() { quad.antipodal_half() } else { None };
        Self {
            model,
            kernel,
            grid,
            full: quad,
            half,
        }
    }

    pub fn model(&self) -> &StatisticsModel {
        &self.model
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn grid(&self) -> &VelocityGrid {
        &self.grid
    }

    pub fn quadrature(&self) -> &SphereQuadrature {
        &self.full
    }

    fn check_slice(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.grid.len() {
            return Err(Error::GridMismatch(format!(
                "slice has {} values, velocity grid has {} nodes",
                f.len(),
                self.grid.len()
            )));
        }
        let sat = self.model.saturation();
        for (index, &value) in f.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite { index, value });
            }
            if value < 0.0 || value > sat {
                return Err(Error::OccupationOutOfRange { index, value, bound: sat });
            }
        }
        Ok(())
    }

    /// `gain` and `loss` at every node of the slice.
    pub fn eval(&self, f: &[f64]) -> Result<CollisionTally> {
        let rates = self.rates(f)?;
        Ok(rates.tally(self.model.alpha(), f))
    }

    /// Frozen-coefficient rates, dissipation included.
    pub fn rates(&self, f: &[f64]) -> Result<CollisionRates> {
        self.check_slice(f)?;
        let n = self.grid.len();
        let dv3 = self.grid.cell_volume();
        let sat = self.model.saturation();
        let g_node: Vec<f64> = f.iter().map(|&y| self.model.filling_unchecked(y)).collect();
        let interp = Interpolator::new(&self.grid, f);
        let energy: Vec<f64> = self.grid.nodes().iter().map(|v| norm_sq(*v)).collect();
        let ctx = PassContext {
            op: self,
            f,
            g_node: &g_node,
            energy: &energy,
            interp: &interp,
            sat,
        };
        let chunks: Vec<usize> = (0..n).step_by(ROW_CHUNK).collect();
        let partials: Vec<Partial> = chunks
            .par_iter()
            .map(|&start| {
                let rows = start..(start + ROW_CHUNK).min(n);
                match &self.half {
                    Some(half) => ctx.symmetric_rows(rows, half),
                    None => ctx.ordered_rows(rows),
                }
            })
            .collect();
        let mut source = vec![0.0; n];
        let mut depletion = vec![0.0; n];
        let mut frequency = vec![0.0; n];
        let mut dissipation = NeumaierSum::new();
        for p in &partials {
            for (acc, v) in source.iter_mut().zip(&p.source) {
                *acc += v;
            }
            for (acc, v) in depletion.iter_mut().zip(&p.depletion) {
                *acc += v;
            }
            for (acc, v) in frequency.iter_mut().zip(&p.frequency) {
                *acc += v;
            }
            dissipation.add(p.dissipation);
        }
        for (j, s) in source.iter_mut().enumerate() {
            *s *= dv3 * self.model.enhancement_unchecked(f[j]);
        }
        for d in depletion.iter_mut().chain(frequency.iter_mut()) {
            *d *= dv3;
        }
        Ok(CollisionRates {
            source,
            depletion,
            frequency,
            dissipation: dissipation.value() * dv3 * dv3,
        })
    }

    /// `sigma` at a single node, by a plain ordered sweep over the full rule.
    pub fn loss_rate_sigma(&self, f: &[f64], j: usize) -> Result<f64> {
        self.check_slice(f)?;
        if j >= self.grid.len() {
            return Err(Error::GridMismatch(format!("node {j} out of range")));
        }
        let alpha = self.model.alpha();
        let sat = self.model.saturation();
        let interp = Interpolator::new(&self.grid, f);
        let vj = self.grid.node(j);
        let mut gain = NeumaierSum::new();
        let mut depletion = NeumaierSum::new();
        for (k, &vk) in self.grid.nodes().iter().enumerate() {
            if !self.model.energy_cutoff(vj, vk) {
                continue;
            }
            let u = sub(vj, vk);
            let rel = dot(u, u).sqrt();
            let radial = self.kernel.radial(rel);
            if radial == 0.0 {
                continue;
            }
            let gk = self.model.filling_unchecked(f[k]);
            for (n, w) in self.full.iter() {
                let c = dot(u, *n);
                let b = w * radial * self.kernel.angular(c / rel);
                if b == 0.0 {
                    continue;
                }
                let fp = interp.eval(axpy(vj, -c, *n)).clamp(0.0, sat);
                let fps = interp.eval(axpy(vk, c, *n)).clamp(0.0, sat);
                gain.add(b * fp * fps * gk);
                depletion.add(b * f[k] * self.model.filling_unchecked(fp) * self.model.filling_unchecked(fps));
            }
        }
        let dv3 = self.grid.cell_volume();
        let h = self.model.enhancement_unchecked(f[j]);
        Ok((alpha * h * gain.value() + depletion.value()) * dv3)
    }
}

struct PassContext<'a> {
    op: &'a CollisionOperator,
    f: &'a [f64],
    g_node: &'a [f64],
    energy: &'a [f64],
    interp: &'a Interpolator,
    sat: f64,
}

struct Partial {
    source: Vec<f64>,
    depletion: Vec<f64>,
    frequency: Vec<f64>,
    dissipation: f64,
}

impl Partial {
    fn zeros(n: usize) -> Self {
        Self {
            source: vec![0.0; n],
            depletion: vec![0.0; n],
            frequency: vec![0.0; n],
            dissipation: 0.0,
        }
    }
}

impl PassContext<'_> {
    /// Admissible pair: returns `|v_j - v_k|` and the radial kernel factor.
    #[inline]
    fn pair(&self, j: usize, k: usize) -> Option<(f64, f64)> {
        let op = self.op;
        if !op.model.energy_cutoff_sq(self.energy[j] + self.energy[k]) {
            return None;
        }
        let u = sub(op.grid.node(j), op.grid.node(k));
        let rel = dot(u, u).sqrt();
        let radial = op.kernel.radial(rel);
        (radial > 0.0).then_some((rel, radial))
    }

    fn symmetric_rows(&self, rows: std::ops::Range<usize>, half: &SphereQuadrature) -> Partial {
        let op = self.op;
        let model = &op.model;
        let nodes = op.grid.nodes();
        let n = nodes.len();
        let f = self.f;
        let mut out = Partial::zeros(n);
        let mut diss = 0.0;
        for j in rows {
            let vj = nodes[j];
            for k in j + 1..n {
                let Some((rel, radial)) = self.pair(j, k) else {
                    continue;
                };
                let vk = nodes[k];
                let u = sub(vj, vk);
                let (fj, fk) = (f[j], f[k]);
                let (gj, gk) = (self.g_node[j], self.g_node[k]);
                let mut src_j = 0.0;
                let mut src_k = 0.0;
                let mut dep_j = 0.0;
                let mut dep_k = 0.0;
                let mut freq = 0.0;
                let mut d = 0.0;
                for (nn, w) in half.iter() {
                    let c = dot(u, *nn);
                    let b = w * radial * op.kernel.angular(c / rel);
                    if b == 0.0 {
                        continue;
                    }
                    freq += b;
                    let fp = self.interp.eval(axpy(vj, -c, *nn)).clamp(0.0, self.sat);
                    let fps = self.interp.eval(axpy(vk, c, *nn)).clamp(0.0, self.sat);
                    let prod = b * fp * fps;
                    src_j += prod * gk;
                    src_k += prod * gj;
                    if fj == 0.0 && fk == 0.0 {
                        continue;
                    }
                    let gg = b * model.filling_unchecked(fp) * model.filling_unchecked(fps);
                    dep_j += gg * fk;
                    dep_k += gg * fj;
                    d += nn[0] * nn[0] * c * c * gg;
                }
                out.source[j] += src_j;
                out.source[k] += src_k;
                out.depletion[j] += dep_j;
                out.depletion[k] += dep_k;
                out.frequency[j] += freq * fk;
                out.frequency[k] += freq * fj;
                diss += 2.0 * fj * fk * d;
            }
        }
        out.dissipation = diss;
        out
    }

    fn ordered_rows(&self, rows: std::ops::Range<usize>) -> Partial {
        let op = self.op;
        let model = &op.model;
        let nodes = op.grid.nodes();
        let n = nodes.len();
        let f = self.f;
        let mut out = Partial::zeros(n);
        let mut diss = 0.0;
        for j in rows {
            let vj = nodes[j];
            for k in 0..n {
                if k == j {
                    continue;
                }
                let Some((rel, radial)) = self.pair(j, k) else {
                    continue;
                };
                let vk = nodes[k];
                let u = sub(vj, vk);
                for (nn, w) in op.full.iter() {
                    let c = dot(u, *nn);
                    let b = w * radial * op.kernel.angular(c / rel);
                    if b == 0.0 {
                        continue;
                    }
                    let fp = self.interp.eval(axpy(vj, -c, *nn)).clamp(0.0, self.sat);
                    let fps = self.interp.eval(axpy(vk, c, *nn)).clamp(0.0, self.sat);
                    let gg = b * model.filling_unchecked(fp) * model.filling_unchecked(fps);
                    out.source[j] += b * fp * fps * self.g_node[k];
                    out.depletion[j] += gg * f[k];
                    out.frequency[j] += b * f[k];
                    diss += nn[0] * nn[0] * c * c * gg * f[j] * f[k];
                }
            }
        }
        out.dissipation = diss;
        out
    }
}

/// Gain/loss tally of one velocity slice.
pub fn eval_collision(
    f_slice: &[f64],
    model: &StatisticsModel,
    spec: &KernelSpec,
    quad: &SphereQuadrature,
    grid: &VelocityGrid,
) -> Result<CollisionTally> {
    CollisionOperator::new(*model, spec.clone(), quad.clone(), grid.clone()).eval(f_slice)
}

/// `sigma_f` at node `j`.
pub fn loss_rate_sigma(
    f_slice: &[f64],
    model: &StatisticsModel,
    spec: &KernelSpec,
    quad: &SphereQuadrature,
    grid: &VelocityGrid,
    j: usize,
) -> Result<f64> {
    CollisionOperator::new(*model, spec.clone(), quad.clone(), grid.clone()).loss_rate_sigma(f_slice, j)
}

/// `[1, v_1, v_2, v_3, |v|^2]`-moments of a nodal field, times `dv^3`.
pub fn invariant_moments(values: &[f64], grid: &VelocityGrid) -> [f64; 5] {
    let mut acc = [NeumaierSum::new(); 5];
    for (x, v) in values.iter().zip(grid.nodes()) {
        acc[0].add(*x);
        acc[1].add(v[0] * x);
        acc[2].add(v[1] * x);
        acc[3].add(v[2] * x);
        acc[4].add(norm_sq(*v) * x);
    }
    let dv3 = grid.cell_volume();
    acc.map(|a| a.value() * dv3)
}

/// Result of a conservative projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub corrected: Vec<f64>,
    /// `sum |removed| dv^3`.
    pub correction: f64,
}

/// Scaled invariants `[1, v/s, |v|^2/s^2]` at node `v`.
#[inline]
fn basis(v: [f64; 3], s: f64) -> Vector5<f64> {
    Vector5::new(1.0, v[0] / s, v[1] / s, v[2] / s, norm_sq(v) / (s * s))
}

/// Removes from `net` its component along the collision invariants.
///
/// Without weights this is the least-squares projection onto the
/// orthogonal complement of `span{1, v, |v|^2}`. With nodal weights `w >= 0`
/// the removed part is `w * (phi . lambda)`, so nodes of zero weight are
/// left untouched.
pub fn project_net(net: &[f64], grid: &VelocityGrid, weights: Option<&[f64]>) -> Result<Projection> {
    if net.len() != grid.len() || weights.is_some_and(|w| w.len() != grid.len()) {
        return Err(Error::GridMismatch("projection input length".into()));
    }
    if let Some((index, &value)) = net.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    let s = grid.v_max();
    let weight = |j: usize| weights.map_or(1.0, |w| w[j]);
    let mut gram = Matrix5::<f64>::zeros();
    for (j, v) in grid.nodes().iter().enumerate() {
        let w = weight(j);
        if w != 0.0 {
            let p = basis(*v, s);
            gram += w * p * p.transpose();
        }
    }
    let chol = gram.cholesky().ok_or(Error::SingularGram)?;
    let l = chol.l();
    let diag: Vec<f64> = (0..5).map(|i| l[(i, i)]).collect();
    let lo = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = diag.iter().copied().fold(0.0, f64::max);
    if !(lo > 0.0) || (lo / hi).powi(2) < 1e-14 {
        return Err(Error::SingularGram);
    }
    let mut out = net.to_vec();
    let mut removed = vec![0.0; net.len()];
    for _ in 0..2 {
        let mut rhs = [NeumaierSum::new(); 5];
        for (x, v) in out.iter().zip(grid.nodes()) {
            let p = basis(*v, s);
            for a in 0..5 {
                rhs[a].add(p[a] * x);
            }
        }
        let rhs = Vector5::from_iterator(rhs.iter().map(|r| r.value()));
        let lambda = chol.solve(&rhs);
        for (j, v) in grid.nodes().iter().enumerate() {
            let w = weight(j);
            if w == 0.0 {
                continue;
            }
            let delta = w * basis(*v, s).dot(&lambda);
            out[j] -= delta;
            removed[j] += delta;
        }
    }
    let correction = removed.iter().map(|x| x.abs()).collect::<NeumaierSum>().value() * grid.cell_volume();
    Ok(Projection {
        corrected: out,
        correction,
    })
}

/// Projects the net of `tally` onto the complement of the invariants.
pub fn conservative_project(tally: &CollisionTally, grid: &VelocityGrid) -> Result<Projection> {
    project_net(&tally.net(), grid, None)
}

/// Catmull-Rom weights for the four nodes around fractional offset `t`.
fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Tricubic Catmull-Rom interpolation with zero extension past the grid.
fn tricubic(grid: &VelocityGrid, f: &[f64], v: [f64; 3]) -> f64 {
    let n = grid.n_v() as isize;
    let mut base = [0isize; 3];
    let mut wts = [[0.0; 4]; 3];
    for d in 0..3 {
        let s = v[d] / grid.dv() + (n as f64 - 1.0) / 2.0;
        if !(s > -1.0 && s < n as f64) {
            return 0.0;
        }
        let k = s.floor();
        base[d] = k as isize;
        wts[d] = catmull_rom(s - k);
    }
    let mut acc = 0.0;
    for (a, wa) in wts[0].iter().enumerate() {
        let ia = base[0] - 1 + a as isize;
        if ia < 0 || ia >= n {
            continue;
        }
        for (b, wb) in wts[1].iter().enumerate() {
            let ib = base[1] - 1 + b as isize;
            if ib < 0 || ib >= n {
                continue;
            }
            for (c, wc) in wts[2].iter().enumerate() {
                let ic = base[2] - 1 + c as isize;
                if ic < 0 || ic >= n {
                    continue;
                }
                acc += wa * wb * wc * f[grid.index(ia as usize, ib as usize, ic as usize)];
            }
        }
    }
    acc
}

/// Brute-force reference: ordered loops over output nodes, partners on a
/// grid refined `refinement` times per axis, and every node of `dense`;
/// tricubic interpolation throughout. Test use only.
pub fn oracle_collision(
    f_slice: &[f64],
    model: &StatisticsModel,
    spec: &KernelSpec,
    grid: &VelocityGrid,
    dense: SphereRule,
    refinement: usize,
) -> Result<CollisionTally> {
    if grid.n_v() > ORACLE_MAX_NV {
        return Err(Error::CostGuard {
            n_v: grid.n_v(),
            limit: ORACLE_MAX_NV,
        });
    }
    if refinement == 0 {
        return Err(Error::InvalidGrid("oracle refinement must be at least 1".into()));
    }
    if f_slice.len() != grid.len() {
        return Err(Error::GridMismatch("oracle slice length".into()));
    }
    let sat = model.saturation();
    for (index, &value) in f_slice.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFinite { index, value });
        }
        if value < 0.0 || value > sat {
            return Err(Error::OccupationOutOfRange { index, value, bound: sat });
        }
    }
    let sphere = build_sphere_quadrature(dense)?;
    let r = refinement as f64;
    let h = grid.dv() / r;
    let fine: Vec<f64> = (0..grid.n_v() * refinement)
        .map(|m| grid.axis()[0] - 0.5 * grid.dv() + (m as f64 + 0.5) * h)
        .collect();
    let mut partners = Vec::new();
    for &a in &fine {
        for &b in &fine {
            for &c in &fine {
                let v = [a, b, c];
                let y = tricubic(grid, f_slice, v).clamp(0.0, sat);
                partners.push((v, y));
            }
        }
    }
    let read = |v: [f64; 3]| tricubic(grid, f_slice, v).clamp(0.0, sat);
    let mut tally = CollisionTally::zeros(grid.len());
    for (j, &v) in grid.nodes().iter().enumerate() {
        let fv = f_slice[j];
        let g_v = model.filling_unchecked(fv);
        let mut gain = 0.0;
        let mut loss = 0.0;
        for &(vs, fs) in &partners {
            if !model.energy_cutoff(v, vs) {
                continue;
            }
            let u = sub(v, vs);
            let rel = dot(u, u).sqrt();
            if rel == 0.0 {
                continue;
            }
            let g_s = model.filling_unchecked(fs);
            for (n, w) in sphere.iter() {
                let cos = dot(u, *n) / rel;
                let b = spec.eval_kernel(rel, cos.clamp(-1.0, 1.0))?;
                if b == 0.0 {
                    continue;
                }
                let (vp, vps) = post_collision(v, vs, *n)?;
                let fp = read(vp);
                let fps = read(vps);
                gain += w * b * fp * fps * g_v * g_s;
                loss += w * b * fv * fs * model.filling_unchecked(fp) * model.filling_unchecked(fps);
            }
        }
        tally.gain[j] = gain * h * h * h;
        tally.loss[j] = loss * h * h * h;
    }
    Ok(tally)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase_grid::build_velocity_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
        loop {
            let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let r = dot(v, v).sqrt();
            if r > 0.1 && r <= 1.0 {
                return [v[0] / r, v[1] / r, v[2] / r];
            }
        }
    }

    fn random_field(grid: &VelocityGrid, top: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        grid.nodes()
            .iter()
            .map(|v| top * rng.gen_range(0.0..1.0) * (-norm_sq(*v) / 4.0).exp())
            .collect()
    }

    fn bose_einstein(grid: &VelocityGrid, t: f64, mu: f64) -> Vec<f64> {
        grid.nodes().iter().map(|v| 1.0 / (((norm_sq(*v) - mu) / t).exp() - 1.0)).collect()
    }

    fn operator(alpha: f64, n_v: usize, v_max: f64, order: usize) -> CollisionOperator {
        CollisionOperator::new(
            StatisticsModel::new(alpha).unwrap(),
            KernelSpec::bounded_cutoff(1.0, 0.1, 0.1).unwrap(),
            build_sphere_quadrature(SphereRule::named("gauss-product", order).unwrap()).unwrap(),
            build_velocity_grid(n_v, v_max).unwrap(),
        )
    }

    fn l1(x: &[f64], grid: &VelocityGrid) -> f64 {
        x.iter().map(|v| v.abs()).sum::<f64>() * grid.cell_volume()
    }

    #[test]
    fn named_geometries() {
        let (a, b) = post_collision([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap();
        assert_eq!((a, b), ([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]));
        let (a, b) = post_collision([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!((a, b), ([-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]));
        assert!(matches!(
            post_collision([1.0, 0.0, 0.0], [0.0; 3], [1.0, 1.0, 0.0]),
            Err(Error::NonUnitNormal { .. })
        ));
    }

    #[test]
    fn random_geometry_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let v = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let w = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let g = CollisionGeometry::new(v, w, random_unit(&mut rng)).unwrap();
            let scale = norm_sq(v) + norm_sq(w);
            for d in 0..3 {
                let p = v[d] + w[d];
                let q = g.v_prime[d] + g.v_star_prime[d];
                assert!((p - q).abs() <= 1e-12 * scale.sqrt().max(1.0));
            }
            let e = norm_sq(g.v_prime) + norm_sq(g.v_star_prime);
            assert!((e - scale).abs() <= 1e-12 * scale);
            let back = g.reversed().unwrap();
            for d in 0..3 {
                assert!((back.v_prime[d] - v[d]).abs() <= 1e-12 * scale.sqrt().max(1.0));
                assert!((back.v_star_prime[d] - w[d]).abs() <= 1e-12 * scale.sqrt().max(1.0));
            }
        }
    }

    #[test]
    fn zero_field_has_zero_tally() {
        let op = operator(0.0, 6, 3.0, 4);
        let f = vec![0.0; op.grid().len()];
        let t = op.eval(&f).unwrap();
        assert!(t.gain.iter().chain(&t.loss).all(|&x| x == 0.0));
        assert_eq!(op.loss_rate_sigma(&f, 17).unwrap(), 0.0);
    }

    #[test]
    fn single_node_support_is_inert() {
        // gamma beyond the diameter of the trilinear stencil around one node
        let grid = build_velocity_grid(6, 3.0).unwrap();
        let gamma = 2.0 * 3f64.sqrt() * grid.dv();
        let op = CollisionOperator::new(
            StatisticsModel::bosonic(),
            KernelSpec::bounded_cutoff(1.0, gamma, 0.1).unwrap(),
            build_sphere_quadrature(SphereRule::named("gauss-product", 6).unwrap()).unwrap(),
            grid,
        );
        let mut f = vec![0.0; op.grid().len()];
        f[op.grid().index(2, 3, 1)] = 0.8;
        let rates = op.rates(&f).unwrap();
        assert!(op.eval(&f).unwrap().net().iter().all(|&x| x == 0.0));
        assert_eq!(rates.dissipation, 0.0);
    }

    #[test]
    fn rejects_out_of_range_occupations() {
        let op = operator(0.5, 4, 2.0, 2);
        let mut f = vec![0.1; op.grid().len()];
        f[5] = 2.5;
        assert!(matches!(op.eval(&f), Err(Error::OccupationOutOfRange { index: 5, .. })));
        f[5] = -1e-3;
        assert!(op.eval(&f).is_err());
    }

    #[test]
    fn gain_and_loss_are_nonnegative() {
        for (alpha, top) in [(0.0, 3.0), (0.5, 2.0), (1.0, 1.0)] {
            let op = operator(alpha, 6, 3.0, 4);
            let f = random_field(op.grid(), top, 3);
            let t = op.eval(&f).unwrap();
            assert!(t.gain.iter().chain(&t.loss).all(|&x| x >= 0.0 && x.is_finite()));
        }
    }

    #[test]
    fn symmetric_pass_matches_single_node_sweep() {
        for alpha in [0.0, 0.3] {
            let op = operator(alpha, 6, 3.0, 4);
            let f = random_field(op.grid(), 1.5, 11);
            let sigma = op.rates(&f).unwrap().sigma(alpha);
            for j in [0, 7, 50, 107, 215] {
                let s = op.loss_rate_sigma(&f, j).unwrap();
                assert!((s - sigma[j]).abs() <= 1e-12 * s.max(1e-300), "{alpha} node {j}: {s} vs {}", sigma[j]);
            }
        }
    }

    #[test]
    fn sigma_nonnegative_on_random_fields() {
        let op = operator(0.2, 4, 2.0, 2);
        for seed in 0..1000 {
            let f = random_field(op.grid(), 5.0, seed);
            assert!(op.rates(&f).unwrap().sigma(0.2).iter().all(|&s| s >= 0.0));
        }
    }

    #[test]
    fn constant_field_sigma_matches_oracle_sum() {
        // alpha = 0, f = c: sigma_j = c * sum w B (1 + f')(1 + f'_*) dv^3 over admissible (v_*, n)
        let op = operator(0.0, 6, 3.0, 4);
        let c = 0.4;
        let f = vec![c; op.grid().len()];
        let interp = Interpolator::new(op.grid(), &f);
        let j = op.grid().index(1, 2, 4);
        let vj = op.grid().node(j);
        let mut expect = 0.0;
        for &vk in op.grid().nodes() {
            let u = sub(vj, vk);
            let rel = dot(u, u).sqrt();
            for (n, w) in op.quadrature().iter() {
                let b = op.kernel().eval_kernel(rel, if rel > 0.0 { dot(u, *n) / rel } else { 0.0 }).unwrap();
                let cc = dot(u, *n);
                let fp = interp.eval(axpy(vj, -cc, *n));
                let fps = interp.eval(axpy(vk, cc, *n));
                expect += w * b * c * (1.0 + fp) * (1.0 + fps);
            }
        }
        expect *= op.grid().cell_volume();
        let got = op.loss_rate_sigma(&f, j).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect, "{got} vs {expect}");
    }

    #[test]
    fn exchange_symmetry_of_total_net() {
        // sum_j net(v_j) with the pair relabelled v <-> v_* gives the same total
        let op = operator(0.0, 6, 3.0, 4);
        let f = random_field(op.grid(), 2.0, 5);
        let net = op.eval(&f).unwrap().net();
        let total: f64 = net.iter().sum();
        let grid = op.grid();
        let mirrored: Vec<f64> = (0..grid.len()).map(|j| f[grid.mirror(j)]).collect();
        let net_m = op.eval(&mirrored).unwrap().net();
        let total_m: f64 = net_m.iter().sum();
        let scale = l1(&net, grid) / grid.cell_volume();
        assert!((total - total_m).abs() <= 1e-12 * scale, "{total} vs {total_m}");
        let ordered = CollisionOperator {
            half: None,
            ..op.clone()
        };
        let net_o = ordered.eval(&f).unwrap().net();
        let total_o: f64 = net_o.iter().sum();
        assert!((total - total_o).abs() <= 1e-11 * scale, "{total} vs {total_o}");
        for (a, b) in net.iter().zip(&net_o) {
            assert!((a - b).abs() <= 1e-11 * scale);
        }
    }

    #[test]
    fn pauli_blocking_at_saturated_nodes() {
        let op = operator(1.0, 6, 3.0, 4);
        let mut f = random_field(op.grid(), 0.9, 9);
        let saturated = [op.grid().index(2, 2, 2), op.grid().index(3, 2, 3)];
        for &j in &saturated {
            f[j] = 1.0;
        }
        let t = op.eval(&f).unwrap();
        for &j in &saturated {
            assert_eq!(t.gain[j], 0.0);
            assert!(t.gain[j] - t.loss[j] <= 0.0);
        }
    }

    #[test]
    fn projection_removes_invariant_moments() {
        let grid = build_velocity_grid(8, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = project_net(&net, &grid, None).unwrap();
        let scale = l1(&net, &grid);
        for m in invariant_moments(&p.corrected, &grid) {
            assert!(m.abs() <= 1e-13 * scale, "{m}");
        }
        assert!(p.correction > 0.0);
        let again = project_net(&p.corrected, &grid, None).unwrap();
        for (a, b) in again.corrected.iter().zip(&p.corrected) {
            assert!((a - b).abs() <= 1e-14);
        }
        let ones = vec![1.0; grid.len()];
        let p1 = project_net(&ones, &grid, None).unwrap();
        assert!(p1.corrected.iter().all(|x| x.abs() < 1e-13));
    }

    #[test]
    fn weighted_projection_leaves_zero_weight_nodes() {
        let grid = build_velocity_grid(6, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..grid.len()).map(|j| if j % 3 == 0 { 0.0 } else { rng.gen_range(0.1..1.0) }).collect();
        let p = project_net(&net, &grid, Some(&w)).unwrap();
        for j in (0..grid.len()).step_by(3) {
            assert_eq!(p.corrected[j], net[j]);
        }
        let scale = l1(&net, &grid);
        for m in invariant_moments(&p.corrected, &grid) {
            assert!(m.abs() <= 1e-13 * scale, "{m}");
        }
        let mut sparse = vec![0.0; grid.len()];
        sparse[4] = 1.0;
        assert!(matches!(project_net(&net, &grid, Some(&sparse)), Err(Error::SingularGram)));
    }

    #[test]
    fn bose_einstein_residual_shrinks_with_refinement() {
        let mut res = Vec::new();
        for n_v in [8, 12] {
            let op = operator(0.0, n_v, 5.0, 4);
            let f = bose_einstein(op.grid(), 1.0, -0.5);
            let t = op.eval(&f).unwrap();
            res.push(l1(&t.net(), op.grid()) / l1(&t.gain, op.grid()));
        }
        assert!(res[1] < 0.7 * res[0], "{res:?}");
    }

    #[test]
    fn oracle_guard_and_zero() {
        let model = StatisticsModel::bosonic();
        let spec = KernelSpec::bounded_cutoff(1.0, 0.1, 0.1).unwrap();
        let big = build_velocity_grid(10, 3.0).unwrap();
        let f = vec![0.0; big.len()];
        let rule = SphereRule::named("gauss-product", 8).unwrap();
        assert!(matches!(
            oracle_collision(&f, &model, &spec, &big, rule, 1),
            Err(Error::CostGuard { .. })
        ));
        let grid = build_velocity_grid(4, 2.0).unwrap();
        let t = oracle_collision(&vec![0.0; grid.len()], &model, &spec, &grid, rule, 1).unwrap();
        assert!(t.gain.iter().chain(&t.loss).all(|&x| x == 0.0));
    }

    #[test]
    fn tricubic_reproduces_nodes() {
        let grid = build_velocity_grid(6, 3.0).unwrap();
        let f = random_field(&grid, 1.0, 4);
        for (j, v) in grid.nodes().iter().enumerate() {
            assert!((tricubic(&grid, &f, *v) - f[j]).abs() < 1e-15);
        }
    }
}
