//! Distribution fields and free transport on the periodic interval.
//!
//! The shift by `v_1 t` is a conservative linear remap: for each velocity
//! node the `x`-profile moves by an integer number of cells plus a fraction
//! `a`, and the fractional part is a convex combination of two neighbours,
//! `f_new[i] = f[i-m] + a (f[i-m-1] - f[i-m])`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::phase_grid::{PhaseIndex, SpatialGrid, VelocityGrid};
use crate::summation::{compensated_sum, restore_sum};

/// Fractional shifts this close to an integer are treated as integer.
const SHIFT_SNAP: f64 = 1e-9;

/// The spatial and velocity grids a field lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpace {
    pub spatial: SpatialGrid,
    pub velocity: VelocityGrid,
}

impl PhaseSpace {
    pub fn new(spatial: SpatialGrid, velocity: VelocityGrid) -> Arc<Self> {
        Arc::new(Self { spatial, velocity })
    }

    pub fn len(&self) -> usize {
        self.spatial.len() * self.velocity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `dx dv^3`.
    pub fn cell_measure(&self) -> f64 {
        self.spatial.dx() * self.velocity.cell_volume()
    }
}

/// Occupation numbers `f(x_i, v_j)`, stored `i_x`-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionField {
    phase: Arc<PhaseSpace>,
    saturation: f64,
    time: f64,
    data: Vec<f64>,
}

impl DistributionField {
    pub fn zeros(phase: Arc<PhaseSpace>, saturation: f64) -> Self {
        let data = vec![0.0; phase.len()];
        Self {
            phase,
            saturation,
            time: 0.0,
            data,
        }
    }

    /// Wraps raw data, checking finiteness and the range `[0, saturation]`.
    pub fn from_data(phase: Arc<PhaseSpace>, saturation: f64, time: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != phase.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a {}-point phase grid",
                data.len(),
                phase.len()
            )));
        }
        let field = Self {
            phase,
            saturation,
            time,
            data,
        };
        field.validate(0.0)?;
        Ok(field)
    }

    pub fn from_fn<F>(phase: Arc<PhaseSpace>, saturation: f64, f: F) -> Result<Self>
    where
        F: Fn(f64, [f64; 3]) -> f64,
    {
        let mut data = Vec::with_capacity(phase.len());
        for i in 0..phase.spatial.len() {
            let x = phase.spatial.position(i);
            for v in phase.velocity.nodes() {
                data.push(f(x, *v));
            }
        }
        Self::from_data(phase, saturation, 0.0, data)
    }

    /// Checks every entry is finite and within `[-tol, saturation + tol]`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for (index, &value) in self.data.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite { index, value });
            }
            if value < -tol || value > self.saturation + tol {
                return Err(Error::OccupationOutOfRange {
                    index,
                    value,
                    bound: self.saturation,
                });
            }
        }
        Ok(())
    }

    pub fn phase(&self) -> &Arc<PhaseSpace> {
        &self.phase
    }

    pub fn spatial(&self) -> &SpatialGrid {
        &self.phase.spatial
    }

    pub fn velocity(&self) -> &VelocityGrid {
        &self.phase.velocity
    }

    pub fn saturation(&self) -> f64 {
        self.saturation
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn set_time(&mut self, t: f64) {
        self.time = t;
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.time = t;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn slice(&self, i_x: usize) -> &[f64] {
        let n = self.phase.velocity.len();
        &self.data[i_x * n..(i_x + 1) * n]
    }

    pub fn slice_mut(&mut self, i_x: usize) -> &mut [f64] {
        let n = self.phase.velocity.len();
        &mut self.data[i_x * n..(i_x + 1) * n]
    }

    pub fn get(&self, idx: PhaseIndex) -> f64 {
        self.data[idx.flat(&self.phase.velocity)]
    }

    pub fn sup(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// `max_i f(x_i, v_j)` for every velocity node.
    pub fn x_sup(&self) -> Vec<f64> {
        let n = self.phase.velocity.len();
        let mut out = vec![0.0f64; n];
        for row in self.data.chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o = o.max(*v);
            }
        }
        out
    }

    /// Re-tags the field with a new saturation bound, checking the data.
    pub fn with_saturation(mut self, saturation: f64) -> Result<Self> {
        self.saturation = saturation;
        self.validate(0.0)?;
        Ok(self)
    }

    /// True when every spatial cell carries the same velocity slice.
    pub fn is_x_homogeneous(&self) -> bool {
        let first = self.slice(0);
        (1..self.phase.spatial.len()).all(|i| self.slice(i) == first)
    }

    pub fn same_grid(&self, other: &DistributionField) -> bool {
        Arc::ptr_eq(&self.phase, &other.phase) || *self.phase == *other.phase
    }

    pub(crate) fn replace_data(&self, data: Vec<f64>) -> Self {
        Self {
            phase: self.phase.clone(),
            saturation: self.saturation,
            time: self.time,
            data,
        }
    }
}

/// Shifts every velocity node's profile by `-v_1 dt` (free streaming over
/// `dt`). Mass per velocity node is preserved to the last bit.
pub fn advect(field: &DistributionField, dt: f64) -> DistributionField {
    let mut out = shift(field, dt);
    out.time = field.time + dt;
    out
}

/// `f#(t, x, v) = f(t, x + t v_1, v)`: moves a field into characteristic
/// coordinates. The time stamp is left untouched.
pub fn to_characteristics(field: &DistributionField, t: f64) -> DistributionField {
    shift(field, -t)
}

/// Inverse of [`to_characteristics`].
pub fn from_characteristics(field: &DistributionField, t: f64) -> DistributionField {
    shift(field, t)
}

fn shift(field: &DistributionField, dt: f64) -> DistributionField {
    if dt == 0.0 {
        return field.clone();
    }
    let spatial = field.spatial();
    let velocity = field.velocity();
    let n_x = spatial.len();
    let n_v = velocity.len();
    let src = field.data();
    let mut data = vec![0.0; src.len()];
    let mut column = vec![0.0; n_x];
    for (j, v) in velocity.nodes().iter().enumerate() {
        let s = v[0] * dt / spatial.dx();
        let mut m = s.floor();
        let mut a = s - m;
        if a < SHIFT_SNAP {
            a = 0.0;
        } else if a > 1.0 - SHIFT_SNAP {
            a = 0.0;
            m += 1.0;
        }
        let m = m as isize;
        let first = src[j];
        if (0..n_x).all(|i| src[i * n_v + j] == first) {
            for i in 0..n_x {
                data[i * n_v + j] = first;
            }
            continue;
        }
        for (i, c) in column.iter_mut().enumerate() {
            let here = src[spatial.wrap(i as isize - m) * n_v + j];
            *c = if a == 0.0 {
                here
            } else {
                let behind = src[spatial.wrap(i as isize - m - 1) * n_v + j];
                here + a * (behind - here)
            };
        }
        if a != 0.0 {
            let target = compensated_sum((0..n_x).map(|i| src[i * n_v + j]));
            restore_sum(&mut column, target, 0.0, field.saturation);
        }
        for (i, c) in column.iter().enumerate() {
            data[i * n_v + j] = *c;
        }
    }
    field.replace_data(data)
}
