//! Time stepping: Strang splitting of free transport and a two-stage
//! exponential collision step, plus the `2^(L+n)` blow-up ladder.
//!
//! With rates frozen at a state `h`, each node obeys `dg/dt = A - sigma g`
//! and the update
//!
//! ```text
//! g(t + dt) = g e^(-sigma dt) + (A / sigma) (1 - e^(-sigma dt))
//! ```
//!
//! is a convex combination of `g` and `A / sigma <= 1/alpha`. The first stage
//! freezes the rates at `f^n` and advances half a step to `f*`; the second
//! freezes them at `f*` and advances the full step from `f^n`.
//!
//! The discrete `A - sigma h` carries a small component along the collision
//! invariants. It is removed from `A` before each stage, so the stage solves
//! the projected equation and the scheme stays second order; each increment
//! is then projected once more to conserve mass, momentum and energy exactly.

use log::warn;
use rayon::prelude::*;

use crate::collision::{project_net, CollisionOperator, CollisionRates, Projection};
use crate::diagnostics::{moments, DiagnosticsRecord, Moments, RunningSupField, TailMasses};
use crate::error::{Error, Result};
use crate::prepare::bound_exponent;
use crate::summation::{compensated_sum, restore_sum};
use crate::phase_grid::VelocityGrid;
use crate::transport::{advect, DistributionField};

/// Below this `sigma dt` the exponential factor is replaced by its limit.
const SMALL_EXPONENT: f64 = 1e-8;

/// Passes of the projection that pin offending nodes to the boundary.
const ACTIVE_SET_ROUNDS: usize = 16;

/// Relative slack when landing on a requested output time.
const LANDING_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct StepperConfig {
    pub dt: f64,
    pub t_max: f64,
    pub dt_min: f64,
    pub cfl_safety: f64,
    pub invariant_tolerance: f64,
    pub ladder_enabled: bool,
}

impl StepperConfig {
    pub fn new(dt: f64, t_max: f64) -> Self {
        Self {
            dt,
            t_max,
            dt_min: dt / 64.0,
            cfl_safety: 0.9,
            invariant_tolerance: 1e-12,
            ladder_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidStepper(m));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt = {} must be positive", self.dt));
        }
        if !(self.t_max.is_finite() && self.t_max >= 0.0) {
            return bad(format!("t_max = {} must be finite and non-negative", self.t_max));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt) {
            return bad(format!("dt_min = {} must lie in (0, dt]", self.dt_min));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return bad(format!("cfl_safety = {} must lie in (0, 1]", self.cfl_safety));
        }
        if !(self.invariant_tolerance >= 0.0 && self.invariant_tolerance.is_finite()) {
            return bad("invariant_tolerance must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// What one step did besides producing the new state.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub field: DistributionField,
    /// `sum_i dx sum_j |removed| dv^3` over the conservative projection.
    pub projection_correction: f64,
    /// Bony dissipation rate at the first collision stage.
    pub dissipation: f64,
    /// Largest `sigma + D nu` met during the step.
    pub max_rate: f64,
}

/// Collision plus transport for one statistics model and kernel.
#[derive(Debug, Clone)]
pub struct Stepper {
    op: CollisionOperator,
    config: StepperConfig,
}

/// `(1 - e^(-sigma dt)) / sigma`, with the `dt` limit for small exponents.
#[inline]
fn relax_factor(sigma: f64, dt: f64) -> f64 {
    let z = sigma * dt;
    if z < SMALL_EXPONENT {
        dt
    } else {
        -(-z).exp_m1() / sigma
    }
}

/// Sources `A` shifted so that `A - sigma h` has no component along the
/// collision invariants at the frozen state `h` of each representative.
/// Left unchanged where `h (1 - alpha h)` is too sparse to carry the shift.
fn balanced_sources(field: &DistributionField, rates: &[CollisionRates], owner: &[usize], alpha: f64) -> Result<Vec<Vec<f64>>> {
    let mut first = vec![usize::MAX; rates.len()];
    for (i, &o) in owner.iter().enumerate().rev() {
        first[o] = i;
    }
    let grid = field.velocity();
    rates
        .par_iter()
        .zip(first.par_iter())
        .map(|(r, &i)| {
            let h = field.slice(i);
            let sigma = r.sigma(alpha);
            let net: Vec<f64> = h.iter().enumerate().map(|(j, y)| r.source[j] - sigma[j] * y).collect();
            if net.iter().all(|&q| q == 0.0) {
                return Ok(r.source.clone());
            }
            let weights: Vec<f64> = h.iter().map(|&y| y * (1.0 - alpha * y)).collect();
            let proj = match project_net(&net, grid, Some(&weights)) {
                Ok(p) => p,
                Err(Error::SingularGram) => return Ok(r.source.clone()),
                Err(e) => return Err(e),
            };
            Ok(r.source.iter().zip(&net).zip(&proj.corrected).map(|((a, q), c)| a - (q - c)).collect())
        })
        .collect()
}

/// Projection of `delta` with `weights`, falling back to `|delta|` and then
/// to uniform weights on the free nodes when the Gram matrix is singular.
fn weighted_projection(delta: &[f64], grid: &VelocityGrid, weights: &[f64], free: &[bool]) -> Result<Projection> {
    let moving: Vec<f64> = delta.iter().zip(free).map(|(d, &ok)| if ok { d.abs() } else { 0.0 }).collect();
    let uniform: Vec<f64> = free.iter().map(|&ok| if ok { 1.0 } else { 0.0 }).collect();
    for w in [weights, &moving, &uniform] {
        match project_net(delta, grid, Some(w)) {
            Err(Error::SingularGram) => continue,
            other => return other,
        }
    }
    Err(Error::SingularGram)
}

/// `f + P(target - f)`, with `P` the conservative projection weighted by
/// `h (1 - alpha h)`. Nodes it would push more than `tol` outside `[0, sat]`
/// are pinned to the boundary and dropped from the weights.
///
/// Returns the result, `sum |removed|` per unit `dv^3`, and whether the
/// invariants were kept. When no in-region correction is found the last
/// candidate is clamped instead.
fn project_increment(
    f: &[f64],
    mut target: Vec<f64>,
    h: &[f64],
    alpha: f64,
    sat: f64,
    tol: f64,
    grid: &VelocityGrid,
) -> Result<(Vec<f64>, f64, bool)> {
    if target.iter().zip(f).all(|(a, b)| a == b) {
        return Ok((target, 0.0, true));
    }
    let mut weights: Vec<f64> = h.iter().map(|&y| y * (1.0 - alpha * y)).collect();
    let mut free = vec![true; f.len()];
    let mut out = target.clone();
    let mut removed = 0.0;
    for _ in 0..ACTIVE_SET_ROUNDS {
        let delta: Vec<f64> = target.iter().zip(f).map(|(a, b)| a - b).collect();
        let proj = match weighted_projection(&delta, grid, &weights, &free) {
            Ok(p) => p,
            Err(Error::SingularGram) => break,
            Err(e) => return Err(e),
        };
        out = f.iter().zip(&proj.corrected).map(|(a, d)| a + d).collect();
        removed = proj.correction;
        let mut clean = true;
        for (j, y) in out.iter().enumerate() {
            if *y < -tol || *y > sat + tol {
                target[j] = y.clamp(0.0, sat);
                weights[j] = 0.0;
                free[j] = false;
                clean = false;
            }
        }
        if clean {
            return Ok((out, removed, true));
        }
    }
    for y in &mut out {
        *y = y.clamp(0.0, sat);
    }
    Ok((out, removed, false))
}

/// Indices of the first slice of each run of identical consecutive slices,
/// and for every cell the position of its representative in that list.
fn dedup_slices(field: &DistributionField) -> (Vec<usize>, Vec<usize>) {
    let mut reps: Vec<usize> = Vec::new();
    let mut owner = Vec::with_capacity(field.spatial().len());
    for i in 0..field.spatial().len() {
        match reps.last() {
            Some(&r) if field.slice(r) == field.slice(i) => {}
            _ => reps.push(i),
        }
        owner.push(reps.len() - 1);
    }
    (reps, owner)
}

impl Stepper {
    pub fn new(op: CollisionOperator, config: StepperConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            op,
            config,
        })
    }

    pub fn operator(&self) -> &CollisionOperator {
        &self.op
    }

    pub fn config(&self) -> &StepperConfig {
        &self.config
    }

    fn rates_per_cell(&self, field: &DistributionField) -> Result<(Vec<CollisionRates>, Vec<usize>)> {
        let (reps, owner) = dedup_slices(field);
        let rates = reps
            .par_iter()
            .map(|&i| self.op.rates(field.slice(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok((rates, owner))
    }

    /// `max (sigma + D nu)`, with `D` bounding `|G_alpha'|` on
    /// `[0, sup f]`; errors if `dt` times it exceeds `cfl_safety`.
    fn check_rates(&self, rates: &[CollisionRates], sup: f64, dt: f64) -> Result<f64> {
        let alpha = self.op.model().alpha();
        let derivative_bound = self.op.model().filling_factor_derivative_bound_on(sup);
        let mut worst: f64 = 0.0;
        for r in rates {
            for ((a, b), nu) in r.source.iter().zip(&r.depletion).zip(&r.frequency) {
                worst = worst.max(alpha * a + b + derivative_bound * nu);
            }
        }
        if !worst.is_finite() {
            return Err(Error::NonFinite { index: 0, value: worst });
        }
        if dt * worst > self.config.cfl_safety {
            return Err(Error::StepSize {
                dt,
                bound: self.config.cfl_safety / worst,
                rate: worst,
            });
        }
        Ok(worst)
    }

    /// Frozen-coefficient exponential collision update over `dt`, followed
    /// by the conservative projection of each stage's increment, weighted by
    /// `h (1 - alpha h)` at the stage's frozen state `h`.
    pub fn collision_step(&self, field: &DistributionField, dt: f64) -> Result<StepReport> {
        if dt == 0.0 {
            return Ok(StepReport {
                field: field.clone(),
                projection_correction: 0.0,
                dissipation: 0.0,
                max_rate: 0.0,
            });
        }
        let alpha = self.op.model().alpha();
        let sat = field.saturation();
        let n_v = field.velocity().len();
        let dx = field.spatial().dx();

        let (rates0, owner0) = self.rates_per_cell(field)?;
        let rate0 = self.check_rates(&rates0, field.sup(), dt)?;
        let dissipation = compensated_sum(owner0.iter().map(|&o| rates0[o].dissipation * dx));

        let advance = |g: &[f64], r: &CollisionRates, source: &[f64], h: f64| -> Vec<f64> {
            g.iter()
                .enumerate()
                .map(|(j, &y)| {
                    let sigma = alpha * r.source[j] + r.depletion[j];
                    let decay = (-sigma * h).exp();
                    (y * decay + source[j] * relax_factor(sigma, h)).clamp(0.0, sat)
                })
                .collect()
        };
        let sources0 = balanced_sources(field, &rates0, &owner0, alpha)?;

        let tol = self.config.invariant_tolerance * field.sup().max(1.0);
        let grid = field.velocity();
        let cells: Vec<usize> = (0..field.spatial().len()).collect();
        let half = cells
            .par_iter()
            .map(|&i| {
                let f = field.slice(i);
                let target = advance(f, &rates0[owner0[i]], &sources0[owner0[i]], 0.5 * dt);
                project_increment(f, target, f, alpha, sat, tol, grid).map(|(g, _, _)| g)
            })
            .collect::<Result<Vec<_>>>()?;
        let mid = field.replace_data(half.into_iter().flatten().map(|y| y.clamp(0.0, sat)).collect());
        let (rates1, owner1) = self.rates_per_cell(&mid)?;
        let rate1 = self.check_rates(&rates1, mid.sup(), dt)?;
        let sources1 = balanced_sources(&mid, &rates1, &owner1, alpha)?;

        let updated = cells
            .par_iter()
            .map(|&i| -> Result<(Vec<f64>, f64, bool)> {
                let f = field.slice(i);
                let target = advance(f, &rates1[owner1[i]], &sources1[owner1[i]], dt);
                let (out, removed, kept) = project_increment(f, target, mid.slice(i), alpha, sat, tol, grid)?;
                Ok((out, removed * dx, kept))
            })
            .collect::<Result<Vec<_>>>()?;
        let clamped = updated.iter().filter(|u| !u.2).count();
        if clamped > 0 {
            warn!(
                "t = {}: no in-region conservative correction in {clamped} cells; clamped, momentum and energy not conserved there",
                field.time()
            );
        }

        let mut data = Vec::with_capacity(field.data().len());
        let mut correction = Vec::with_capacity(updated.len());
        for (i, (cell, c, _)) in updated.into_iter().enumerate() {
            correction.push(c);
            for (j, y) in cell.into_iter().enumerate() {
                let index = i * n_v + j;
                if !y.is_finite() {
                    return Err(Error::NonFinite { index, value: y });
                }
                if y < -tol || y > sat + tol {
                    return Err(Error::InvariantViolation { index, value: y, bound: sat });
                }
                data.push(y.clamp(0.0, sat));
            }
        }
        if field.is_x_homogeneous() {
            data.truncate(n_v);
            restore_sum(&mut data, compensated_sum(field.slice(0).iter().copied()), 0.0, sat);
            data = data.repeat(field.spatial().len());
        } else {
            let target = compensated_sum(field.data().iter().copied());
            restore_sum(&mut data, target, 0.0, sat);
        }
        Ok(StepReport {
            field: field.replace_data(data),
            projection_correction: compensated_sum(correction),
            dissipation,
            max_rate: rate0.max(rate1),
        })
    }

    /// `advect(dt/2) . collision_step(dt) . advect(dt/2)`, with the total
    /// mass restored bit for bit at the end.
    pub fn step(&self, field: &DistributionField, dt: f64) -> Result<StepReport> {
        let t = field.time();
        if dt == 0.0 {
            return self.collision_step(field, 0.0);
        }
        let half = advect(field, 0.5 * dt);
        let mut report = self.collision_step(&half, dt)?;
        let mut out = advect(&report.field, 0.5 * dt);
        out.set_time(t + dt);
        if !out.is_x_homogeneous() {
            let sat = out.saturation();
            restore_sum(out.data_mut(), compensated_sum(field.data().iter().copied()), 0.0, sat);
        }
        report.field = out;
        Ok(report)
    }
}

/// Record of the `2^(L+n)` thresholds crossed by `sup f`.
///
/// `T_n` is the first sample time at which `sup f > 2^(L+n)`. When one step
/// crosses several thresholds, the highest is stamped with the sample time
/// and the lower ones with log-linear interpolants inside the step.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderState {
    base: i32,
    rung: i32,
    crossings: Vec<f64>,
    last: Option<(f64, f64)>,
    t_infinity: Option<f64>,
}

impl LadderState {
    pub fn new(base: i32) -> Self {
        Self {
            base,
            rung: 0,
            crossings: Vec::new(),
            last: None,
            t_infinity: None,
        }
    }

    /// `L`.
    pub fn base(&self) -> i32 {
        self.base
    }

    /// `ceil(log2 sup f) - L` at the latest sample.
    pub fn rung(&self) -> i32 {
        self.rung
    }

    /// `T_0, T_1, ...`.
    pub fn crossings(&self) -> &[f64] {
        &self.crossings
    }

    pub fn t_infinity(&self) -> Option<f64> {
        self.t_infinity
    }

    pub fn is_terminated(&self) -> bool {
        self.t_infinity.is_some()
    }

    /// Geometric extrapolation of the crossing times, if the gaps shrink.
    pub fn extrapolate(&self) -> Option<f64> {
        let c = &self.crossings;
        if c.len() < 3 {
            return None;
        }
        let k = c.len() - 1;
        let d1 = c[k] - c[k - 1];
        let d0 = c[k - 1] - c[k - 2];
        let q = d1 / d0;
        (q > 0.0 && q < 1.0).then(|| c[k] + d1 * q / (1.0 - q))
    }

    pub(crate) fn terminate(&mut self, t_collapse: f64) -> f64 {
        let est = self.extrapolate().map_or(t_collapse, |e| e.max(t_collapse));
        self.t_infinity = Some(est);
        est
    }

    /// Folds in the sample `sup f` at time `t`.
    pub fn ladder_update(&mut self, sup: f64, t: f64) -> Result<()> {
        if !sup.is_finite() || sup < 0.0 {
            return Err(Error::NonFinite { index: 0, value: sup });
        }
        let threshold = |n: usize| (2f64).powi(self.base + n as i32);
        let prev = match self.last {
            Some((tp, sp)) => {
                if t < tp {
                    return Err(Error::TimeRegression { previous: tp, current: t });
                }
                Some((tp, sp))
            }
            None => {
                if sup > threshold(0) {
                    return Err(Error::Domain {
                        what: "initial sup f",
                        value: sup,
                        bound: format!("must not exceed 2^L = {}", threshold(0)),
                    });
                }
                None
            }
        };
        self.rung = bound_exponent(sup) - self.base;
        let mut pending = Vec::new();
        while sup > threshold(self.crossings.len() + pending.len()) {
            pending.push(self.crossings.len() + pending.len());
        }
        if let Some(&top) = pending.last() {
            let (tp, sp) = prev.unwrap_or((t, sup));
            let lp = sp.max(f64::MIN_POSITIVE).log2();
            let l = sup.log2();
            for &n in &pending {
                let when = if n == top || t == tp {
                    t
                } else {
                    let level = (self.base + n as i32) as f64;
                    let s = ((level - lp) / (l - lp)).clamp(1e-9, 1.0);
                    tp + s * (t - tp)
                };
                let floor = self.crossings.last().copied().unwrap_or(f64::NEG_INFINITY);
                self.crossings.push(if when > floor { when } else { t });
            }
        }
        self.last = Some((t, sup));
        Ok(())
    }
}

/// Why a run stopped.
#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Completed,
    /// The step size collapsed below `dt_min` after the ladder escalated.
    CandidateBlowup { t: f64, dt: f64, t_infinity: f64 },
}

/// Output schedule of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Interval between records; `None` records only at `0` and `t_max`.
    pub cadence: Option<f64>,
    /// Additional record times in `(0, t_max]`.
    pub extra_times: Vec<f64>,
    /// Speeds `lambda` for the tail masses.
    pub tail_lambdas: Vec<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            cadence: None,
            extra_times: Vec::new(),
            tail_lambdas: Vec::new(),
        }
    }
}

/// The evolving state of a run. The driver owns it and pulls records.
#[derive(Debug, Clone)]
pub struct Trajectory<'a> {
    stepper: &'a Stepper,
    field: DistributionField,
    ladder: LadderState,
    running: RunningSupField,
    tail_lambdas: Vec<f64>,
    stops: Vec<f64>,
    next_stop: usize,
    dt: f64,
    steps: usize,
    dissipation_cum: f64,
    last_correction: f64,
    initial: Moments,
    termination: Option<Termination>,
}

fn schedule(t_max: f64, options: &RunOptions) -> Result<Vec<f64>> {
    let mut stops = Vec::new();
    if let Some(c) = options.cadence {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidStepper(format!("cadence {c} must be positive")));
        }
        let mut k = 1u64;
        loop {
            let t = k as f64 * c;
            if t >= t_max * (1.0 - LANDING_SLACK) {
                break;
            }
            stops.push(t);
            k += 1;
        }
    }
    for &t in &options.extra_times {
        if !(t > 0.0 && t <= t_max) {
            return Err(Error::InvalidStepper(format!("record time {t} outside (0, {t_max}]")));
        }
        stops.push(t);
    }
    if t_max > 0.0 {
        stops.push(t_max);
    }
    stops.sort_by(f64::total_cmp);
    stops.dedup_by(|a, b| (*a - *b).abs() <= LANDING_SLACK * t_max.max(1.0));
    Ok(stops)
}

impl<'a> Trajectory<'a> {
    pub fn new(initial: &DistributionField, stepper: &'a Stepper, options: &RunOptions) -> Result<Self> {
        initial.validate(0.0)?;
        if !(initial.saturation() == stepper.op.model().saturation()) {
            return Err(Error::GridMismatch(format!(
                "field saturation {} differs from the model's {}",
                initial.saturation(),
                stepper.op.model().saturation()
            )));
        }
        if initial.velocity() != stepper.op.grid() {
            return Err(Error::GridMismatch("field and collision operator use different velocity grids".into()));
        }
        let stops = schedule(stepper.config.t_max, options)?;
        let field = initial.clone().with_time(0.0);
        let mut ladder = LadderState::new(bound_exponent(field.sup()));
        if stepper.config.ladder_enabled {
            ladder.ladder_update(field.sup(), 0.0)?;
        }
        let mut running = RunningSupField::new(&field);
        running.update_running_sup(&field, 0.0)?;
        Ok(Self {
            stepper,
            initial: moments(&field)?,
            field,
            ladder,
            running,
            tail_lambdas: options.tail_lambdas.clone(),
            stops,
            next_stop: 0,
            dt: stepper.config.dt,
            steps: 0,
            dissipation_cum: 0.0,
            last_correction: 0.0,
            termination: None,
        })
    }

    pub fn field(&self) -> &DistributionField {
        &self.field
    }

    pub fn ladder(&self) -> &LadderState {
        &self.ladder
    }

    pub fn running_sup(&self) -> &RunningSupField {
        &self.running
    }

    pub fn termination(&self) -> Option<&Termination> {
        self.termination.as_ref()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn current_dt(&self) -> f64 {
        self.dt
    }

    pub fn initial_moments(&self) -> &Moments {
        &self.initial
    }

    pub fn dissipation_cumulative(&self) -> f64 {
        self.dissipation_cum
    }

    /// Diagnostics of the current state.
    pub fn record(&self) -> Result<DiagnosticsRecord> {
        let m = moments(&self.field)?;
        let grid = self.field.velocity();
        let inst = self.field.x_sup();
        let stored = self.running.x_sup();
        Ok(DiagnosticsRecord {
            t: self.field.time(),
            mass: m.mass,
            momentum: m.momentum,
            energy: m.energy,
            linf: self.field.sup(),
            m_alpha: self.running.m_alpha(),
            bony_i: crate::diagnostics::bony_functional(&self.field),
            bony_dissipation_cum: self.dissipation_cum,
            tail_mass: TailMasses::from_sup_profile(grid, &inst, &self.tail_lambdas),
            tail_mass_running: TailMasses::from_sup_profile(grid, &stored, &self.tail_lambdas),
            ladder_rung: self.stepper.config.ladder_enabled.then_some(self.ladder.rung()),
            projection_correction: self.last_correction,
        })
    }

    fn take_step(&mut self, target: f64) -> Result<bool> {
        let t = self.field.time();
        let stepper = self.stepper;
        let cfg = &stepper.config;
        loop {
            let remaining = target - t;
            let landing = remaining <= self.dt * (1.0 + LANDING_SLACK);
            let h = if landing { remaining } else { self.dt };
            match stepper.step(&self.field, h) {
                Ok(rep) => {
                    let mut next = rep.field;
                    next.set_time(if landing { target } else { t + h });
                    self.dissipation_cum += h * rep.dissipation;
                    self.last_correction = rep.projection_correction;
                    self.field = next;
                    self.steps += 1;
                    let now = self.field.time();
                    if cfg.ladder_enabled {
                        self.ladder.ladder_update(self.field.sup(), now)?;
                    }
                    self.running.update_running_sup(&self.field, now)?;
                    return Ok(landing);
                }
                Err(Error::StepSize { dt, bound, rate }) => {
                    self.dt *= 0.5;
                    if self.dt < cfg.dt_min {
                        let escalated = cfg.ladder_enabled && !self.ladder.crossings().is_empty();
                        if t == 0.0 || !escalated {
                            return Err(Error::StepSize { dt, bound, rate });
                        }
                        let t_infinity = self.ladder.terminate(t);
                        self.termination = Some(Termination::CandidateBlowup { t, dt, t_infinity });
                        return Ok(true);
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Advances to the next output time and returns its record, or `None`
    /// once the run has ended.
    pub fn advance(&mut self) -> Result<Option<DiagnosticsRecord>> {
        if self.termination.is_some() {
            return Ok(None);
        }
        let Some(&target) = self.stops.get(self.next_stop) else {
            self.termination = Some(Termination::Completed);
            return Ok(None);
        };
        while !self.take_step(target)? {}
        if self.termination.is_none() {
            self.next_stop += 1;
            if self.next_stop == self.stops.len() {
                self.termination = Some(Termination::Completed);
            }
        }
        self.record().map(Some)
    }
}

/// Result of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub field: DistributionField,
    pub ladder: LadderState,
    pub termination: Termination,
    pub records: Vec<DiagnosticsRecord>,
    pub steps: usize,
}

/// Runs to `t_max` or ladder termination, handing every record to `sink`.
pub fn run(
    initial: &DistributionField,
    stepper: &Stepper,
    options: &RunOptions,
    sink: &mut dyn FnMut(&DiagnosticsRecord) -> Result<()>,
) -> Result<RunOutcome> {
    let mut traj = Trajectory::new(initial, stepper, options)?;
    let mut records = Vec::new();
    let first = traj.record()?;
    sink(&first)?;
    records.push(first);
    while let Some(rec) = traj.advance()? {
        sink(&rec)?;
        records.push(rec);
    }
    Ok(RunOutcome {
        termination: traj.termination.clone().unwrap_or(Termination::Completed),
        field: traj.field.clone(),
        ladder: traj.ladder.clone(),
        records,
        steps: traj.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelSpec;
    use crate::phase_grid::{build_sphere_quadrature, build_velocity_grid, SpatialGrid, SphereRule};
    use crate::statistics::{norm_sq, StatisticsModel};
    use crate::transport::PhaseSpace;
    use std::sync::Arc;

    fn setup(alpha: f64, n_x: usize, n_v: usize, v_max: f64, b0: f64) -> (Arc<PhaseSpace>, Stepper) {
        let grid = build_velocity_grid(n_v, v_max).unwrap();
        let op = CollisionOperator::new(
            StatisticsModel::new(alpha).unwrap(),
            KernelSpec::bounded_cutoff(b0, 0.1, 0.1).unwrap(),
            build_sphere_quadrature(SphereRule::named("gauss-product", 2).unwrap()).unwrap(),
            grid.clone(),
        );
        let phase = PhaseSpace::new(SpatialGrid::new(n_x).unwrap(), grid);
        (phase, Stepper::new(op, StepperConfig::new(0.05, 0.2)).unwrap())
    }

    fn l1(a: &DistributionField, b: &DistributionField) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() * a.phase().cell_measure()
    }

    #[test]
    fn zero_field_is_fixed() {
        let (p, s) = setup(0.0, 4, 4, 2.0, 1.0);
        let f = DistributionField::zeros(p, f64::INFINITY);
        let r = s.step(&f, 0.05).unwrap();
        assert!(r.field.data().iter().all(|&x| x == 0.0));
        assert_eq!(s.step(&f, 0.0).unwrap().field, f);
    }

    #[test]
    fn near_saturation_stays_in_region() {
        let (p, s) = setup(0.5, 4, 6, 3.0, 0.02);
        let f = DistributionField::from_fn(p, 2.0, |x, v| {
            (2.0 - 1e-6) * (-norm_sq(v) / 3.0).exp() * (0.8 + 0.2 * (6.0 * x).cos())
        })
        .unwrap();
        let mut g = f.clone();
        for _ in 0..3 {
            g = s.step(&g, 0.05).unwrap().field;
            assert!(g.data().iter().all(|&y| (0.0..=2.0).contains(&y)));
        }
    }

    #[test]
    fn homogeneous_step_equals_collision_step() {
        let (p, s) = setup(0.0, 4, 6, 3.0, 0.02);
        let f = DistributionField::from_fn(p, f64::INFINITY, |_, v| 0.5 * (-norm_sq(v)).exp()).unwrap();
        let a = s.step(&f, 0.05).unwrap().field;
        let b = s.collision_step(&f, 0.05).unwrap().field;
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn saturated_plateau_stays_in_region() {
        let (p, s) = setup(0.1, 4, 6, 3.0, 0.0002);
        let f = DistributionField::from_fn(p, 10.0, |x, v| {
            if (0.25..0.75).contains(&x) && norm_sq(v) <= 2.25 {
                10.0
            } else {
                0.0
            }
        })
        .unwrap();
        let mut g = f.clone();
        for _ in 0..5 {
            g = s.step(&g, 0.01).unwrap().field;
            assert!(g.data().iter().all(|&y| (0.0..=10.0).contains(&y)));
        }
        assert_eq!(moments(&g).unwrap().mass, moments(&f).unwrap().mass);
    }

    #[test]
    fn collision_step_is_second_order() {
        let (p, _) = setup(0.0, 2, 4, 4.0, 0.003);
        let f = DistributionField::from_fn(p, f64::INFINITY, |_, v| {
            0.5 * (-norm_sq([v[0] - 1.0, v[1], v[2]]) / 4.5).exp()
        })
        .unwrap();
        let solve = |n: usize| {
            let dt = 0.5 / n as f64;
            let (_, s) = setup(0.0, 2, 4, 4.0, 0.003);
            let mut g = f.clone();
            for _ in 0..n {
                g = s.collision_step(&g, dt).unwrap().field;
            }
            g
        };
        let reference = solve(64);
        let errors: Vec<f64> = [2, 4, 8].iter().map(|&n| l1(&solve(n), &reference)).collect();
        for w in errors.windows(2) {
            assert!(w[0] / w[1] > 3.5, "{errors:?}");
        }
    }

    #[test]
    fn step_conserves_mass_exactly() {
        let (p, s) = setup(0.0, 8, 6, 3.0, 0.02);
        let f = DistributionField::from_fn(p, f64::INFINITY, |x, v| {
            (1.0 + 0.5 * (6.28 * x).sin()) * (-norm_sq([v[0] - 0.5, v[1], v[2]])).exp()
        })
        .unwrap();
        let g = s.step(&f, 0.05).unwrap().field;
        let m0 = moments(&f).unwrap();
        let m1 = moments(&g).unwrap();
        assert_eq!(m0.mass, m1.mass);
        assert!((m0.energy - m1.energy).abs() <= 1e-13 * m0.energy);
        assert!((m0.momentum[0] - m1.momentum[0]).abs() <= 1e-13 * m0.energy);
    }

    #[test]
    fn oversized_step_is_rejected() {
        let (p, s) = setup(0.0, 2, 6, 3.0, 50.0);
        let f = DistributionField::from_fn(p, f64::INFINITY, |_, v| 2.0 * (-norm_sq(v)).exp()).unwrap();
        assert!(matches!(s.step(&f, 1.0), Err(Error::StepSize { .. })));
    }

    #[test]
    fn strang_local_error_is_third_order() {
        let (p, s) = setup(0.0, 256, 4, 2.0, 0.01);
        let f = DistributionField::from_fn(p, f64::INFINITY, |x, v| {
            (1.0 + 0.4 * (2.0 * std::f64::consts::PI * x).sin()) * 0.8 * (-norm_sq([v[0] - 0.3, v[1], v[2]]) / 2.0).exp()
        })
        .unwrap();
        // every quarter-step shift is a whole number of cells at n_x = 256
        let errs: Vec<f64> = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0]
            .iter()
            .map(|&dt| {
                let one = s.step(&f, dt).unwrap().field;
                let two = s.step(&s.step(&f, dt / 2.0).unwrap().field, dt / 2.0).unwrap().field;
                l1(&one, &two)
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 5.0, "{errs:?}");
        }
    }

    #[test]
    fn ladder_named_cases() {
        let mut l = LadderState::new(2);
        for (k, t) in [0.0, 0.1, 0.2].iter().enumerate() {
            l.ladder_update(3.0 + k as f64 * 0.1, *t).unwrap();
        }
        assert_eq!(l.rung(), 0);
        assert!(l.crossings().is_empty());

        let mut l = LadderState::new(0);
        l.ladder_update(1.0, 0.0).unwrap();
        l.ladder_update(1.5, 0.1).unwrap();
        l.ladder_update(2.5, 0.3).unwrap();
        assert_eq!(l.crossings(), &[0.1, 0.3]);

        let mut l = LadderState::new(0);
        l.ladder_update(1.0, 0.0).unwrap();
        for k in 1..6 {
            l.ladder_update(2f64.powi(k) * 1.01, k as f64).unwrap();
            assert_eq!(l.rung(), k + 1);
            assert_eq!(l.crossings().len(), k as usize + 1);
        }
        assert!(l.ladder_update(100.0, 2.0).is_err());
    }

    #[test]
    fn skipped_rungs_get_interior_times() {
        let mut l = LadderState::new(0);
        l.ladder_update(0.9, 0.0).unwrap();
        l.ladder_update(20.0, 1.0).unwrap();
        let c = l.crossings();
        assert_eq!(c.len(), 5);
        assert_eq!(c[4], 1.0);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert!(c[0] > 0.0);
    }

    #[test]
    fn extrapolation_of_geometric_crossings() {
        let mut l = LadderState::new(0);
        l.ladder_update(1.0, 0.0).unwrap();
        let mut t = 0.0;
        let mut gap = 0.5;
        for k in 0..6 {
            t += gap;
            gap *= 0.5;
            l.ladder_update(2f64.powi(k) * 1.5, t).unwrap();
        }
        let est = l.extrapolate().unwrap();
        assert!((est - 1.0).abs() < 1e-12, "{est}");
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn crossings_strictly_increase(steps in prop::collection::vec((1e-3f64..1.0, 0.0f64..4.0), 1..40)) {
            let mut l = LadderState::new(0);
            l.ladder_update(1.0, 0.0).unwrap();
            let mut t = 0.0;
            let mut log_sup: f64 = 0.0;
            for (dt, dl) in steps {
                t += dt;
                log_sup += dl - 1.0;
                l.ladder_update(2f64.powf(log_sup), t).unwrap();
                prop_assert!(l.crossings().windows(2).all(|w| w[0] < w[1]));
                prop_assert_eq!(l.rung(), bound_exponent(2f64.powf(log_sup)));
            }
        }
    }
}
