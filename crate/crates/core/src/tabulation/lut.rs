use serde::{Deserialize, Serialize};

use crate::bspline::GridSpec;
use crate::error::{KanError, Result};
use crate::linalg::Matrix;
use crate::model::KanLinearLayer;
use crate::quant::{compute_quant_params, QuantConfig, QuantParams};

/// Fixed-point activation lattice with step `delta / 2^k`, level 0 at the
/// left domain edge. Knots are exact lattice points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnotLattice {
    lo: f64,
    step: f64,
    k: u32,
    max_level: i64,
}

impl KnotLattice {
    pub fn new(grid: &GridSpec, k: u32) -> Result<Self> {
        if !(1..=8).contains(&k) {
            return Err(KanError::InvalidArgument(format!(
                "lattice needs 1..=8 bits per knot interval, got {k}"
            )));
        }
        Ok(Self {
            lo: grid.domain().0,
            step: grid.delta() / (1u64 << k) as f64,
            k,
            max_level: (grid.intervals() as i64) << k,
        })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    /// Largest level, `G * 2^k` (the right domain edge).
    pub fn max_level(&self) -> i64 {
        self.max_level
    }

    /// Nearest lattice level, clipped to the interior domain. NaN maps to 0.
    #[inline]
    pub fn level(&self, x: f64) -> i64 {
        let v = ((x - self.lo) / self.step).round();
        if v.is_nan() {
            return 0;
        }
        (v.max(0.0) as i64).min(self.max_level)
    }

    #[inline]
    pub fn value(&self, level: i64) -> f64 {
        self.lo + level as f64 * self.step
    }

    /// `value(level(x))`.
    #[inline]
    pub fn fake_quant(&self, x: f64) -> f64 {
        self.value(self.level(x))
    }
}

/// Canonical half-support B-spline table with `2^k` entries per knot
/// interval and `h`-bit values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsplineLut {
    degree: usize,
    k: u32,
    h: u32,
    value_qp: QuantParams,
    entries: Vec<u8>,
}

/// Quantized values of the `P + 1` (or fewer, at the grid edges) basis
/// functions that are nonzero around one lattice input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LutBasis {
    pub support_start: usize,
    pub levels: Vec<i64>,
}

impl LutBasis {
    /// Expands to all `num_basis` levels, zero outside the support.
    pub fn dense(&self, num_basis: usize) -> Vec<i64> {
        let mut out = vec![0; num_basis];
        out[self.support_start..self.support_start + self.levels.len()].copy_from_slice(&self.levels);
        out
    }
}

pub fn build_bspline_lut(degree: usize, k: u32, h: u32) -> Result<BsplineLut> {
    if degree < 1 {
        return Err(KanError::InvalidArgument("the B-spline LUT needs degree >= 1".into()));
    }
    if !(1..=8).contains(&k) {
        return Err(KanError::InvalidArgument(format!("k must be in 1..=8, got {k}")));
    }
    if !(2..=8).contains(&h) {
        return Err(KanError::InvalidArgument(format!("h must be in 2..=8, got {h}")));
    }
    let value_qp = compute_quant_params(0.0, 1.0, h)?;
    // basis index P of this grid is supported on [0, P+1] in its own units
    let canonical = GridSpec::new(degree + 1, degree, 0.0, (degree + 1) as f64)?;
    let per_interval = 1usize << k;
    let n = (degree + 1).div_ceil(2) * per_interval + 1;
    // for even P the last stored positions pass the fold point; they are
    // never read and hold the peak value
    let fold = ((degree + 1) << k) / 2;
    let mut vals = vec![0.0; canonical.num_basis()];
    let entries = (0..n)
        .map(|m| {
            if m == 0 {
                return 0u8;
            }
            let m = m.min(fold);
            canonical.eval_basis_into(m as f64 / per_interval as f64, &mut vals, &mut ());
            value_qp.quantize(vals[degree]) as u8
        })
        .collect();
    Ok(BsplineLut {
        degree,
        k,
        h,
        value_qp,
        entries,
    })
}

impl BsplineLut {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn h(&self) -> u32 {
        self.h
    }

    pub fn value_qp(&self) -> &QuantParams {
        &self.value_qp
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }

    /// Memory by the closed form `2^k * ceil((P+1)/2) * h`; the extra peak
    /// entry is not counted.
    pub fn accounted_memory_bits(&self) -> u64 {
        (1u64 << self.k) * (self.degree as u64 + 1).div_ceil(2) * self.h as u64
    }

    #[inline]
    fn folded(&self, m: usize) -> u8 {
        let full = (self.degree + 1) << self.k;
        let m = if 2 * m > full { full - m } else { m };
        self.entries[m]
    }

    /// Quantized basis values at lattice level `a_level` of `grid`.
    pub fn lookup(&self, a_level: i64, grid: &GridSpec) -> Result<LutBasis> {
        let mut levels = Vec::with_capacity(self.degree + 1);
        let start = self.lookup_into(a_level, grid, &mut levels)?;
        Ok(LutBasis {
            support_start: start,
            levels,
        })
    }

    fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        if grid.degree() != self.degree {
            return Err(KanError::InvalidArgument(format!(
                "LUT built for degree {} used with a degree-{} grid",
                self.degree,
                grid.degree()
            )));
        }
        Ok(())
    }

    fn lookup_into(&self, a_level: i64, grid: &GridSpec, out: &mut Vec<i64>) -> Result<usize> {
        self.check_grid(grid)?;
        let max = (grid.intervals() as i64) << self.k;
        if !(0..=max).contains(&a_level) {
            return Err(KanError::OutOfRange(format!(
                "lattice level {a_level} outside [0, {max}]"
            )));
        }
        let p = self.degree;
        // position in lattice units from the first extended knot
        let l = ((p as u64) << self.k) + a_level as u64;
        let j = (l >> self.k) as usize;
        let first = j.saturating_sub(p);
        let last = j.min(grid.num_basis() - 1);
        out.clear();
        for i in first..=last {
            let m = (l - ((i as u64) << self.k)) as usize;
            out.push(self.folded(m) as i64);
        }
        Ok(first)
    }
}

/// Free-function form of [`BsplineLut::lookup`].
pub fn lut_basis_lookup(a_level: i64, grid: &GridSpec, lut: &BsplineLut) -> Result<LutBasis> {
    lut.lookup(a_level, grid)
}

/// Dense `[M, n_in*(G+P)]` basis matrix built from LUT lookups: activations
/// are snapped to the knot lattice and the dequantized table values are
/// scattered into place.
pub fn lut_basis_matrix(a: &Matrix, grid: &GridSpec, lut: &BsplineLut) -> Result<Matrix> {
    lut.check_grid(grid)?;
    let lattice = KnotLattice::new(grid, lut.k)?;
    let nb = grid.num_basis();
    let (m, n_in) = a.shape();
    let mut b = Matrix::zeros(m, n_in * nb);
    let mut levels = Vec::with_capacity(lut.degree + 1);
    for r in 0..m {
        for i in 0..n_in {
            let start = lut.lookup_into(lattice.level(a.get(r, i)), grid, &mut levels)?;
            let dst = &mut b.row_mut(r)[i * nb + start..];
            for (d, &q) in dst.iter_mut().zip(&levels) {
                *d = lut.value_qp.dequantize(q);
            }
        }
    }
    Ok(b)
}

/// Linear KAN layer with the basis read from the LUT and weights
/// fake-quantized at `qcfg.bw_w`.
pub fn tabulated_kan_forward(a: &Matrix, layer: &KanLinearLayer, lut: &BsplineLut, qcfg: &QuantConfig) -> Result<Matrix> {
    if a.cols() != layer.n_in() {
        return Err(KanError::ShapeMismatch(format!(
            "input has {} columns, layer expects {}",
            a.cols(),
            layer.n_in()
        )));
    }
    let w = fake_quant_weights(layer.weight_matrix(), qcfg.bw_w)?;
    lut_basis_matrix(a, layer.grid(), lut)?.matmul(&w)
}

/// Per-tensor fake quantization of a weight matrix over its own min/max
/// (widened to contain zero).
pub fn fake_quant_weights(mut w: Matrix, bw: u32) -> Result<Matrix> {
    if bw == crate::quant::PASSTHROUGH_BITS || w.as_slice().is_empty() {
        return Ok(w);
    }
    let (lo, hi) = w
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let qp = QuantParams::covering(lo, hi, bw)?;
    crate::quant::fake_quant_in_place(w.as_mut_slice(), &qp);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{kan_linear_forward, FakeQuantBasis};

    fn recursive_levels(grid: &GridSpec, x: f64, qp: &QuantParams) -> Vec<i64> {
        grid.cox_de_boor(grid.clamp(x)).values.iter().map(|&v| qp.quantize(v)).collect()
    }

    #[test]
    fn memory_and_entry_counts() {
        let lut = build_bspline_lut(3, 8, 8).unwrap();
        assert_eq!(lut.accounted_memory_bits(), 4096);
        assert_eq!(lut.entries().len(), 2 * 256 + 1);
        let lut = build_bspline_lut(3, 1, 8).unwrap();
        assert_eq!(lut.entries().len(), 5);
        // positions 0, 0.5, 1, 1.5, 2 of the centered cubic
        let expect = [0.0, 1.0 / 48.0, 1.0 / 6.0, 23.0 / 48.0, 2.0 / 3.0];
        for (e, v) in lut.entries().iter().zip(expect) {
            assert_eq!(*e as i64, lut.value_qp().quantize(v));
        }
        assert_eq!(build_bspline_lut(2, 3, 4).unwrap().entries().len(), 2 * 8 + 1);
    }

    #[test]
    fn entries_shape() {
        for p in 1..=4 {
            for k in [1, 3, 8] {
                let lut = build_bspline_lut(p, k, 8).unwrap();
                let e = lut.entries();
                assert_eq!(e[0], 0);
                assert!(e.windows(2).all(|w| w[0] <= w[1]), "P={p} k={k}");
            }
        }
    }

    #[test]
    fn cubic_peak() {
        for k in 1..=8 {
            for h in 2..=8 {
                let lut = build_bspline_lut(3, k, h).unwrap();
                let peak = lut.value_qp().dequantize(*lut.entries().last().unwrap() as i64);
                assert!((peak - 2.0 / 3.0).abs() <= lut.value_qp().scale, "k={k} h={h}");
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(build_bspline_lut(3, 0, 8).is_err());
        assert!(build_bspline_lut(3, 9, 8).is_err());
        assert!(build_bspline_lut(3, 4, 1).is_err());
        assert!(build_bspline_lut(3, 4, 9).is_err());
        assert!(build_bspline_lut(0, 4, 8).is_err());
        let lut = build_bspline_lut(3, 4, 8).unwrap();
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        assert!(matches!(lut.lookup(-1, &g), Err(KanError::OutOfRange(_))));
        assert!(matches!(lut.lookup(49, &g), Err(KanError::OutOfRange(_))));
        let g2 = GridSpec::new(3, 2, -1.0, 1.0).unwrap();
        assert!(lut.lookup(0, &g2).is_err());
    }

    #[test]
    fn exhaustive_lookup_matches_recursion() {
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let lut = build_bspline_lut(3, 4, 8).unwrap();
        let lattice = KnotLattice::new(&g, 4).unwrap();
        for a in 0..=48 {
            let got = lut.lookup(a, &g).unwrap().dense(g.num_basis());
            let want = recursive_levels(&g, lattice.value(a), lut.value_qp());
            assert_eq!(got, want, "a_level {a}");
        }
    }

    #[test]
    fn exhaustive_over_configs_and_grids() {
        for p in [2, 3] {
            for k in [2, 4, 8] {
                for h in [3, 8] {
                    let lut = build_bspline_lut(p, k, h).unwrap();
                    for (g, lo, hi) in [(3, -1.0, 1.0), (5, -1.0, 1.0), (8, -2.0, 3.0), (1, 0.0, 1.0)] {
                        let grid = GridSpec::new(g, p, lo, hi).unwrap();
                        let lattice = KnotLattice::new(&grid, k).unwrap();
                        for a in 0..=lattice.max_level() {
                            let got = lut.lookup(a, &grid).unwrap().dense(grid.num_basis());
                            let want = recursive_levels(&grid, lattice.value(a), lut.value_qp());
                            assert_eq!(got, want, "P={p} k={k} h={h} G={g} a={a}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn knot_levels_touch_zero() {
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let lut = build_bspline_lut(3, 4, 8).unwrap();
        // the right edge is excluded: its zero belongs to a basis function
        // past the end of the grid
        for a in (0..48).step_by(16) {
            let lb = lut.lookup(a, &g).unwrap();
            assert!(lb.levels.contains(&0), "a_level {a}");
        }
    }

    #[test]
    fn mirror_levels_reverse() {
        let g = GridSpec::new(5, 3, -1.0, 1.0).unwrap();
        let lut = build_bspline_lut(3, 3, 8).unwrap();
        let max = 5 << 3;
        for a in 0..=max {
            let mut fwd = lut.lookup(a, &g).unwrap().dense(g.num_basis());
            let back = lut.lookup(max - a, &g).unwrap().dense(g.num_basis());
            fwd.reverse();
            assert_eq!(fwd, back);
        }
    }

    #[test]
    fn lattice_levels() {
        let g = GridSpec::new(4, 3, -1.0, 1.0).unwrap();
        let l = KnotLattice::new(&g, 2).unwrap();
        assert_eq!(l.max_level(), 16);
        assert_eq!(l.level(-1.0), 0);
        assert_eq!(l.level(1.0), 16);
        assert_eq!(l.level(7.0), 16);
        assert_eq!(l.level(-7.0), 0);
        assert_eq!(l.level(f64::NAN), 0);
        assert_eq!(l.level(0.0), 8);
        // knots land on multiples of 2^k
        for (i, &t) in g.knots()[3..=7].iter().enumerate() {
            assert_eq!(l.level(t), 4 * i as i64);
        }
    }

    #[test]
    fn forward_matches_fake_quant_reference() {
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let coeffs: Vec<f32> = (0..4 * 6 * 3).map(|i| ((i * 37 % 11) as f32 - 5.0) / 7.0).collect();
        let layer = KanLinearLayer::new(4, 3, g.clone(), coeffs).unwrap();
        let lut = build_bspline_lut(3, 4, 8).unwrap();
        let lattice = KnotLattice::new(&g, 4).unwrap();
        // every lattice level appears in some column
        let rows: Vec<Vec<f64>> = (0..=48)
            .map(|a| (0..4).map(|i| lattice.value((a + 13 * i) % 49)).collect())
            .collect();
        let a = Matrix::from_rows(&rows).unwrap();
        let got = tabulated_kan_forward(&a, &layer, &lut, &QuantConfig::passthrough()).unwrap();
        let want = kan_linear_forward(&a, &layer, &FakeQuantBasis { qp: *lut.value_qp() }).unwrap();
        for (x, y) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn all_ones_weights_near_unity() {
        let g = GridSpec::new(4, 3, -1.0, 1.0).unwrap();
        let nb = g.num_basis();
        let layer = KanLinearLayer::new(1, 1, g.clone(), vec![1.0; nb]).unwrap();
        for h in [3, 8] {
            let lut = build_bspline_lut(3, 4, h).unwrap();
            let s = lut.value_qp().scale;
            let lattice = KnotLattice::new(&g, 4).unwrap();
            let rows: Vec<Vec<f64>> = (0..=lattice.max_level()).map(|a| vec![lattice.value(a)]).collect();
            let out = tabulated_kan_forward(&Matrix::from_rows(&rows).unwrap(), &layer, &lut, &QuantConfig::passthrough()).unwrap();
            let tol = nb as f64 * s / 2.0;
            assert!(out.as_slice().iter().all(|&v| (v - 1.0).abs() <= tol + 1e-12));
        }
    }

    #[test]
    fn empty_batch() {
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let layer = KanLinearLayer::zeros(2, 3, g).unwrap();
        let lut = build_bspline_lut(3, 4, 8).unwrap();
        let out = tabulated_kan_forward(&Matrix::zeros(0, 2), &layer, &lut, &QuantConfig::passthrough()).unwrap();
        assert_eq!(out.shape(), (0, 3));
        assert!(tabulated_kan_forward(&Matrix::zeros(1, 3), &layer, &lut, &QuantConfig::passthrough()).is_err());
    }
}
