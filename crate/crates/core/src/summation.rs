//! Compensated, fixed-order reductions.
//!
//! Every reduction that feeds a conservation check goes through
//! [`NeumaierSum`] in index order, so a given input always produces the same
//! bits regardless of how the caller parallelised the work that produced it.

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = NeumaierSum::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// Compensated sum of an iterator, in iteration order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<NeumaierSum>().value()
}

/// Nudges entries of `values` until `compensated_sum(values) == target`
/// bit for bit, keeping every entry inside `[lo, hi]`.
///
/// The defect is added to the largest entry that can absorb it. Returns
/// `true` when the target was met.
pub fn restore_sum(values: &mut [f64], target: f64, lo: f64, hi: f64) -> bool {
    for _ in 0..8 {
        let current = compensated_sum(values.iter().copied());
        if current == target {
            return true;
        }
        let defect = target - current;
        let mut best: Option<usize> = None;
        for (i, &v) in values.iter().enumerate() {
            let moved = v + defect;
            if moved < lo || moved > hi {
                continue;
            }
            if best.map_or(true, |b| v > values[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(i) => values[i] += defect,
            None => return false,
        }
    }
    compensated_sum(values.iter().copied()) == target
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_cancelled_terms() {
        let xs = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(compensated_sum(xs), 2.0);
        let naive: f64 = xs.iter().sum();
        assert_ne!(naive, 2.0);
    }

    #[test]
    fn restore_hits_target_exactly() {
        let mut xs: Vec<f64> = (0..1000).map(|i| 0.1 * (i as f64).sin().abs()).collect();
        let target = compensated_sum(xs.iter().copied());
        for (i, x) in xs.iter_mut().enumerate() {
            *x += if i % 2 == 0 { 1e-17 } else { -3e-18 };
        }
        assert!(restore_sum(&mut xs, target, 0.0, f64::INFINITY));
        assert_eq!(compensated_sum(xs.iter().copied()), target);
    }

    #[test]
    fn restore_respects_bounds() {
        let mut xs = vec![0.0; 4];
        assert!(!restore_sum(&mut xs, -1.0, 0.0, 1.0));
        assert!(xs.iter().all(|&x| x == 0.0));
    }
}
