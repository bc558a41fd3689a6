//! Uniform B-spline grids and basis evaluation by the Cox-de Boor recursion.
//!
//! A grid with `G` intervals over `[lo, hi]` and degree `P` is extended by `P`
//! knots on both sides, giving `G + 2P + 1` knots, `G + 2P` degree-0
//! indicators and `G + P` degree-`P` basis functions.
//!
//! Evaluation runs in knot units: `x` is mapped to `s = (x - t_0) / delta`,
//! so knot `i` sits at the integer `i` and every knot difference of order
//! `p` is exactly `p`. The coordinate is rounded to a multiple of
//! `2^-SNAP_BITS`, which makes every `s - i` term exact. As a result two
//! basis functions evaluated at the same offset inside their supports go
//! through identical floating-point operations, on any uniform grid. The
//! tabulation module relies on this to reproduce the recursion bit-for-bit
//! from a single canonical table.

use crate::error::{KanError, Result};
use crate::linalg::MulCounter;

/// Default interior domain of every grid.
pub const DEFAULT_DOMAIN: (f64, f64) = (-1.0, 1.0);

/// Resolution of the knot-unit coordinate, in fractional bits.
pub const SNAP_BITS: i32 = 44;

/// Inward margin (in knot units) used when clamping degree-0 inputs to the
/// right domain edge. Larger than the snapping resolution so clamped values
/// stay inside the last interior interval.
const RIGHT_EDGE_MARGIN: f64 = 1.0 / (1u64 << 30) as f64;

/// Knot vector and parameters of a uniform B-spline basis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    degree: usize,
    intervals: usize,
    domain_lo: f64,
    domain_hi: f64,
    delta: f64,
    knots: Vec<f64>,
    // recip[p] = 1 / (t_{i+p} - t_i) in knot units
    recip: Vec<f64>,
}

impl GridSpec {
    /// Builds the extended uniform grid. `knots[i] = lo + (i - P) * delta`,
    /// with `knots[P] == lo` and `knots[P + G] == hi` exactly.
    pub fn new(intervals: usize, degree: usize, domain_lo: f64, domain_hi: f64) -> Result<Self> {
        if intervals < 1 {
            return Err(KanError::InvalidArgument(format!(
                "grid needs at least one interval, got {intervals}"
            )));
        }
        if !(domain_lo.is_finite() && domain_hi.is_finite()) || domain_hi <= domain_lo {
            return Err(KanError::InvalidArgument(format!(
                "degenerate domain [{domain_lo}, {domain_hi}]"
            )));
        }
        let delta = (domain_hi - domain_lo) / intervals as f64;
        let n_knots = intervals + 2 * degree + 1;
        let mut knots: Vec<f64> = (0..n_knots)
            .map(|i| domain_lo + (i as f64 - degree as f64) * delta)
            .collect();
        knots[degree] = domain_lo;
        knots[degree + intervals] = domain_hi;
        let recip = (0..=degree)
            .map(|p| if p == 0 { 0.0 } else { 1.0 / p as f64 })
            .collect();
        Ok(Self {
            degree,
            intervals,
            domain_lo,
            domain_hi,
            delta,
            knots,
            recip,
        })
    }

    /// Grid over [`DEFAULT_DOMAIN`].
    pub fn with_default_domain(intervals: usize, degree: usize) -> Result<Self> {
        Self::new(intervals, degree, DEFAULT_DOMAIN.0, DEFAULT_DOMAIN.1)
    }

    #[inline]
    pub fn degree(&self) -> usize {
        self.degree
    }

    #[inline]
    pub fn intervals(&self) -> usize {
        self.intervals
    }

    #[inline]
    pub fn domain(&self) -> (f64, f64) {
        (self.domain_lo, self.domain_hi)
    }

    #[inline]
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of degree-`P` basis functions, `G + P`.
    #[inline]
    pub fn num_basis(&self) -> usize {
        self.intervals + self.degree
    }

    /// Number of intervals of the extended grid, `G + 2P`.
    #[inline]
    pub fn num_extended_intervals(&self) -> usize {
        self.intervals + 2 * self.degree
    }

    /// Position of `x` in knot units (knot `i` at `i`), snapped to the
    /// `2^-SNAP_BITS` lattice.
    #[inline]
    pub fn knot_units(&self, x: f64) -> f64 {
        let s = (x - self.knots[0]) / self.delta;
        let scale = (1u64 << SNAP_BITS) as f64;
        (s * scale).round() / scale
    }

    /// Clamps `x` into the interior domain. For `P >= 1` the basis is
    /// continuous and `domain_hi` itself is kept; for `P = 0` the right edge
    /// is pulled inside the last half-open interval.
    #[inline]
    pub fn clamp(&self, x: f64) -> f64 {
        let hi = if self.degree == 0 {
            self.domain_hi - RIGHT_EDGE_MARGIN * self.delta
        } else {
            self.domain_hi
        };
        if x.is_nan() {
            return self.domain_lo;
        }
        x.clamp(self.domain_lo, hi)
    }

    /// Index of the extended-grid interval `[t_j, t_{j+1})` holding `x`.
    pub fn interval_index(&self, x: f64) -> Option<usize> {
        let s = self.knot_units(x);
        if s >= 0.0 && s < self.num_extended_intervals() as f64 {
            Some(s.floor() as usize)
        } else {
            None
        }
    }

    /// Degree-0 indicators over the `G + 2P` extended intervals, using the
    /// half-open convention `t_i <= x < t_{i+1}`.
    pub fn basis_degree0(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_extended_intervals()];
        if let Some(j) = self.interval_index(x) {
            out[j] = 1.0;
        }
        out
    }

    /// Degree-`P` basis values at `x`.
    pub fn cox_de_boor(&self, x: f64) -> BasisVector {
        let mut values = vec![0.0; self.num_basis()];
        self.eval_basis_into(x, &mut values, &mut ());
        let support_start = self
            .interval_index(x)
            .map_or(0, |j| j.saturating_sub(self.degree).min(self.num_basis().saturating_sub(1)));
        BasisVector {
            values,
            support_start,
        }
    }

    /// Writes the `G + P` basis values at `x` into `out`, counting the
    /// multiplications of the recursion into `counter`.
    ///
    /// The triangle starts from all `G + 2P` degree-0 indicators and at
    /// degree `p` updates `G + 2P - p + 1` entries in place, the last of which
    /// is a function reaching one knot past the grid and is always
    /// discarded. That is `4 * (P(G + 2P) - P(P - 1)/2)` multiplications per
    /// evaluation, independent of `x`.
    pub fn eval_basis_into<C: MulCounter>(&self, x: f64, out: &mut [f64], counter: &mut C) {
        debug_assert_eq!(out.len(), self.num_basis());
        let mut buf = [0.0f64; 64];
        let n0 = self.num_extended_intervals();
        if n0 < buf.len() {
            self.triangle(self.knot_units(x), self.degree, &mut buf[..n0 + 1], counter);
            out.copy_from_slice(&buf[..self.num_basis()]);
        } else {
            let mut heap = vec![0.0; n0 + 1];
            self.triangle(self.knot_units(x), self.degree, &mut heap, counter);
            out.copy_from_slice(&heap[..self.num_basis()]);
        }
    }

    /// Runs the recursion up to `degree` on `buf` (length `G + 2P + 1`, the
    /// last slot being a zero pad).
    fn triangle<C: MulCounter>(&self, s: f64, degree: usize, buf: &mut [f64], counter: &mut C) {
        let n0 = self.num_extended_intervals();
        buf.fill(0.0);
        if s >= 0.0 && s < n0 as f64 {
            buf[s.floor() as usize] = 1.0;
        }
        for p in 1..=degree {
            let r = self.recip[p];
            let count = n0 - p + 1;
            for i in 0..count {
                // (offset * b) first: for lattice inputs that product is exact,
                // so mirrored evaluations only differ in addition order
                let left = (s - i as f64) * buf[i] * r;
                let right = ((i + p + 1) as f64 - s) * buf[i + 1] * r;
                buf[i] = left + right;
            }
            counter.add(4 * count as u64);
        }
    }

    /// Derivatives `d/dx b_{i,P}(x)` of all `G + P` basis functions.
    pub fn basis_derivative(&self, x: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.num_basis()];
        self.basis_derivative_into(x, &mut out)?;
        Ok(out)
    }

    pub fn basis_derivative_into(&self, x: f64, out: &mut [f64]) -> Result<()> {
        if self.degree == 0 {
            return Err(KanError::InvalidArgument(
                "basis derivative needs degree >= 1".into(),
            ));
        }
        let n0 = self.num_extended_intervals();
        let mut buf = vec![0.0; n0 + 1];
        self.triangle(self.knot_units(x), self.degree - 1, &mut buf, &mut ());
        // P/(t_{i+P} - t_i) = 1/delta on a uniform grid
        let inv = 1.0 / self.delta;
        for (i, o) in out.iter_mut().enumerate().take(self.num_basis()) {
            *o = (buf[i] - buf[i + 1]) * inv;
        }
        Ok(())
    }
}

/// Degree-`P` basis values at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisVector {
    /// `G + P` values in `[0, 1]`.
    pub values: Vec<f64>,
    /// First index that may be nonzero.
    pub support_start: usize,
}

impl BasisVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}
