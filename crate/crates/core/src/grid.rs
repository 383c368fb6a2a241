//! Time grid and residual-subsampling support.

use crate::{PlomError, Result};
use serde::{Deserialize, Serialize};

/// Uniform sampling grid `t_n = t0 + n*dt`, `n = 1..=n_time`.
///
/// The initial time `t0` carries the deterministic initial condition and is
/// not part of the stored sampling times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub dt: f64,
    pub n_time: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_time: usize) -> Result<Self> {
        if !(dt > 0.0) || n_time == 0 {
            return Err(PlomError::Config(format!(
                "time grid requires dt > 0 and n_time >= 1, got dt={dt}, n_time={n_time}"
            )));
        }
        Ok(TimeGrid {
            t0,
            t_end: t0 + n_time as f64 * dt,
            dt,
            n_time,
        })
    }

    /// Build from endpoints, checking `t_end - t0 = n_time*dt` to 1e-12 relative.
    pub fn from_span(t0: f64, t_end: f64, dt: f64, n_time: usize) -> Result<Self> {
        let span = t_end - t0;
        let expect = n_time as f64 * dt;
        if (span - expect).abs() > 1e-12 * span.abs().max(expect.abs()).max(1.0) {
            return Err(PlomError::Config(format!(
                "inconsistent grid: t_end-t0={span} but n_time*dt={expect}"
            )));
        }
        Ok(TimeGrid { t0, t_end, dt, n_time })
    }

    /// Sampling time for 1-based index `n` in `1..=n_time`.
    #[inline]
    pub fn time(&self, n: usize) -> f64 {
        debug_assert!(n >= 1 && n <= self.n_time);
        self.t0 + n as f64 * self.dt
    }
}

/// How residual evaluation times are chosen from the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "strategy")]
pub enum SubsampleSpec {
    /// Every grid time (no subsampling).
    Full,
    /// `n_sp` times at a constant stride over the grid.
    Stride { n_sp: usize },
    /// The `n_sp` times with the largest ensemble-mean state norm.
    LargestAmplitude { n_sp: usize },
}

/// Resolved subsampling: strictly increasing 1-based grid indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subsample {
    pub indices: Vec<usize>,
}

impl Subsample {
    pub fn new(indices: Vec<usize>, n_time: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(PlomError::Config("empty subsample".into()));
        }
        for w in indices.windows(2) {
            if w[1] <= w[0] {
                return Err(PlomError::Config(
                    "subsample indices must be strictly increasing".into(),
                ));
            }
        }
        let last = *indices.last().unwrap();
        let first = indices[0];
        if first < 1 || last > n_time {
            return Err(PlomError::Config(format!(
                "subsample indices must lie in 1..={n_time}"
            )));
        }
        Ok(Subsample { indices })
    }

    pub fn full(n_time: usize) -> Self {
        Subsample {
            indices: (1..=n_time).collect(),
        }
    }

    /// Constant-stride subsample with `n_sp` points, last point at `n_time`.
    pub fn stride(n_time: usize, n_sp: usize) -> Result<Self> {
        if n_sp == 0 || n_sp > n_time {
            return Err(PlomError::Config(format!(
                "stride subsample needs 1 <= n_sp <= n_time, got n_sp={n_sp}, n_time={n_time}"
            )));
        }
        let idx = (1..=n_sp)
            .map(|k| ((k * n_time) as f64 / n_sp as f64).round() as usize)
            .collect::<Vec<_>>();
        Subsample::new(idx, n_time)
    }

    /// Pick the `n_sp` indices with the largest scores, returned sorted.
    pub fn largest_amplitude(scores: &[f64], n_sp: usize) -> Result<Self> {
        let n_time = scores.len();
        if n_sp == 0 || n_sp > n_time {
            return Err(PlomError::Config(format!(
                "largest-amplitude subsample needs 1 <= n_sp <= n_time, got {n_sp}"
            )));
        }
        let mut order: Vec<usize> = (0..n_time).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let mut idx: Vec<usize> = order[..n_sp].iter().map(|&i| i + 1).collect();
        idx.sort_unstable();
        Subsample::new(idx, n_time)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_span_consistency_enforced() {
        assert!(TimeGrid::from_span(0.0, 1.0, 0.1, 10).is_ok());
        assert!(TimeGrid::from_span(0.0, 1.0, 0.1, 11).is_err());
    }

    #[test]
    fn grid_times() {
        let g = TimeGrid::new(0.5, 0.25, 4).unwrap();
        assert_eq!(g.time(1), 0.75);
        assert_eq!(g.time(4), 1.5);
        assert!((g.t_end - 1.5).abs() < 1e-15);
    }

    #[test]
    fn stride_subsample_covers_endpoint() {
        let s = Subsample::stride(100, 10).unwrap();
        assert_eq!(s.indices.len(), 10);
        assert_eq!(*s.indices.last().unwrap(), 100);
        assert_eq!(s.indices[0], 10);
    }

    #[test]
    fn full_equals_stride_when_n_sp_is_n_time() {
        assert_eq!(Subsample::stride(7, 7).unwrap(), Subsample::full(7));
    }

    #[test]
    fn largest_amplitude_sorted_unique() {
        let scores = [0.1, 5.0, 0.2, 4.0, 3.0];
        let s = Subsample::largest_amplitude(&scores, 3).unwrap();
        assert_eq!(s.indices, vec![2, 4, 5]);
    }

    #[test]
    fn rejects_unsorted_indices() {
        assert!(Subsample::new(vec![3, 2], 5).is_err());
        assert!(Subsample::new(vec![0, 2], 5).is_err());
        assert!(Subsample::new(vec![2, 6], 5).is_err());
    }
}
