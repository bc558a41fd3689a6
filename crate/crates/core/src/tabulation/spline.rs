use rayon::prelude::*;

use crate::error::{KanError, Result};
use crate::linalg::Matrix;
use crate::model::{KanLinearLayer, Layer, Model};
use crate::quant::{compute_quant_params, QuantParams};

/// One sampled table per connection `(i, j)` of a layer, `2^bw_a` entries
/// each, stored as `[n_in][n_out][2^bw_a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineTables {
    n_in: usize,
    n_out: usize,
    bw_a: u32,
    h: u32,
    input_qp: QuantParams,
    output_qp: QuantParams,
    entries: Vec<u8>,
}

fn check_bits(bw_a: u32, h: u32) -> Result<()> {
    if !(1..=8).contains(&bw_a) || !(2..=8).contains(&h) {
        return Err(KanError::InvalidArgument(format!(
            "spline tables need bw_A in 1..=8 and h in 2..=8, got {bw_a} and {h}"
        )));
    }
    Ok(())
}

impl SplineTables {
    pub fn from_parts(
        n_in: usize,
        n_out: usize,
        bw_a: u32,
        h: u32,
        input_qp: QuantParams,
        output_qp: QuantParams,
        entries: Vec<u8>,
    ) -> Result<Self> {
        check_bits(bw_a, h)?;
        if input_qp.bw != bw_a || output_qp.bw != h {
            return Err(KanError::InvalidArgument("quantization parameters disagree with bit-widths".into()));
        }
        let expected = (n_in * n_out) << bw_a;
        if entries.len() != expected {
            return Err(KanError::ShapeMismatch(format!(
                "{} table entries, expected {expected}",
                entries.len()
            )));
        }
        if entries.iter().any(|&e| e as i64 > output_qp.q_hi) {
            return Err(KanError::OutOfRange(format!("table entry exceeds {h} bits")));
        }
        Ok(Self {
            n_in,
            n_out,
            bw_a,
            h,
            input_qp,
            output_qp,
            entries,
        })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn bw_a(&self) -> u32 {
        self.bw_a
    }

    pub fn h(&self) -> u32 {
        self.h
    }

    pub fn input_qp(&self) -> &QuantParams {
        &self.input_qp
    }

    pub fn output_qp(&self) -> &QuantParams {
        &self.output_qp
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }

    pub fn entries_per_table(&self) -> usize {
        1 << self.bw_a
    }

    pub fn table_count(&self) -> usize {
        self.n_in * self.n_out
    }

    /// `n_in * n_out * 2^bw_a * h`.
    pub fn stored_bits(&self) -> u64 {
        (self.table_count() as u64) * (self.entries_per_table() as u64) * self.h as u64
    }

    #[inline]
    pub fn entry(&self, input: usize, output: usize, m: usize) -> u8 {
        self.entries[((input * self.n_out + output) << self.bw_a) + m]
    }

    pub fn table(&self, input: usize, output: usize) -> &[u8] {
        let e = self.entries_per_table();
        let at = (input * self.n_out + output) * e;
        &self.entries[at..at + e]
    }
}

/// Samples every `φ_ij` of `layer` at the `2^bw_a` dequantized input levels
/// of the grid bounds and quantizes the results to `h` bits with one
/// output scale for the whole layer.
pub fn build_spline_tables(layer: &KanLinearLayer, bw_a: u32, h: u32) -> Result<SplineTables> {
    check_bits(bw_a, h)?;
    let grid = layer.grid();
    let (lo, hi) = grid.domain();
    let input_qp = if lo <= 0.0 && hi >= 0.0 {
        compute_quant_params(lo, hi, bw_a)?
    } else {
        QuantParams::covering(lo, hi, bw_a)?
    };
    let levels = 1usize << bw_a;
    let nb = grid.num_basis();
    let basis: Vec<Vec<f64>> = (0..levels)
        .map(|m| grid.cox_de_boor(grid.clamp(input_qp.dequantize(m as i64))).values)
        .collect();
    let (n_in, n_out) = (layer.n_in(), layer.n_out());
    let w = layer.coeffs();
    // samples[(i*n_out + j)*levels + m]
    let samples: Vec<f64> = (0..n_in)
        .into_par_iter()
        .flat_map_iter(|i| {
            let basis = &basis;
            (0..n_out).flat_map(move |j| {
                basis.iter().map(move |b| {
                    b.iter()
                        .enumerate()
                        .map(|(k, &bk)| bk * w[(i * nb + k) * n_out + j] as f64)
                        .sum::<f64>()
                })
            })
        })
        .collect();
    let (min, max) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (min, max) = if samples.is_empty() { (0.0, 0.0) } else { (min, max) };
    let output_qp = QuantParams::covering(min, max, h)?;
    let entries = samples.iter().map(|&v| output_qp.quantize(v) as u8).collect();
    SplineTables::from_parts(n_in, n_out, bw_a, h, input_qp, output_qp, entries)
}

/// Lookup-and-add forward pass:
/// `out[m, j] = s_out * (Σ_i table_ij[q_A(a[m, i])] - n_in * z_out)`.
pub fn spline_table_forward(a: &Matrix, tables: &SplineTables) -> Result<Matrix> {
    if a.cols() != tables.n_in {
        return Err(KanError::ShapeMismatch(format!(
            "input has {} columns, tables expect {}",
            a.cols(),
            tables.n_in
        )));
    }
    let n_out = tables.n_out;
    let offset = tables.n_in as i64 * tables.output_qp.zero_point;
    let mut out = Matrix::zeros(a.rows(), n_out);
    let mut acc = vec![0i64; n_out];
    for r in 0..a.rows() {
        acc.fill(0);
        for (i, &x) in a.row(r).iter().enumerate() {
            let q = tables.input_qp.quantize(x) as usize;
            for (j, s) in acc.iter_mut().enumerate() {
                *s += tables.entry(i, j, q) as i64;
            }
        }
        for (o, &s) in out.row_mut(r).iter_mut().zip(&acc) {
            *o = tables.output_qp.scale * (s - offset) as f64;
        }
    }
    Ok(out)
}

/// Spline tables for the KAN layers of a model, indexed by layer position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplineTableSet {
    layers: Vec<Option<SplineTables>>,
}

impl SplineTableSet {
    pub fn empty(n_layers: usize) -> Self {
        Self {
            layers: vec![None; n_layers],
        }
    }

    /// Tabulates every linear and conv KAN layer of `model` (conv layers
    /// through their im2col form, `K²·c_in·c_out` tables).
    pub fn build(model: &Model, bw_a: u32, h: u32) -> Result<Self> {
        let layers = model
            .layers()
            .iter()
            .map(|l| match l {
                Layer::KanLinear(l) => build_spline_tables(l, bw_a, h).map(Some),
                Layer::ConvKan(c) => build_spline_tables(&c.as_linear(), bw_a, h).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn insert(&mut self, layer: usize, tables: SplineTables) -> Result<()> {
        let slot = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| KanError::OutOfRange(format!("no layer {layer}")))?;
        *slot = Some(tables);
        Ok(())
    }

    pub fn get(&self, layer: usize) -> Option<&SplineTables> {
        self.layers.get(layer).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &SplineTables)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.as_ref().map(|t| (i, t)))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iter().next().is_none()
    }

    pub fn stored_bits(&self) -> u64 {
        self.iter().map(|(_, t)| t.stored_bits()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::GridSpec;
    use crate::model::{kan_linear_forward, RecursiveBasis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(n_in: usize, n_out: usize, g: usize, p: usize, rng: &mut ChaCha8Rng) -> KanLinearLayer {
        let grid = GridSpec::new(g, p, -1.0, 1.0).unwrap();
        let n = n_in * (g + p) * n_out;
        let coeffs = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        KanLinearLayer::new(n_in, n_out, grid, coeffs).unwrap()
    }

    #[test]
    fn zero_layer_tables_are_zero() {
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let layer = KanLinearLayer::zeros(3, 2, g).unwrap();
        let t = build_spline_tables(&layer, 4, 6).unwrap();
        for &e in t.entries() {
            assert_eq!(t.output_qp().dequantize(e as i64), 0.0);
        }
        let out = spline_table_forward(&Matrix::from_rows(&[vec![0.3, -0.9, 1.0]]).unwrap(), &t).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn table_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = random_layer(5, 4, 3, 3, &mut rng);
        let t = build_spline_tables(&layer, 3, 5).unwrap();
        assert_eq!(t.table_count(), 20);
        assert_eq!(t.entries().len(), 20 * 8);
        assert_eq!(t.stored_bits(), 20 * 8 * 5);
        assert!(build_spline_tables(&layer, 0, 5).is_err());
        assert!(build_spline_tables(&layer, 9, 5).is_err());
        assert!(build_spline_tables(&layer, 4, 1).is_err());
    }

    #[test]
    fn tables_sample_the_splines() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = random_layer(3, 2, 4, 3, &mut rng);
        let t = build_spline_tables(&layer, 5, 8).unwrap();
        let g = layer.grid();
        for i in 0..3 {
            for j in 0..2 {
                for m in 0..32 {
                    let x = g.clamp(t.input_qp().dequantize(m as i64));
                    let want = layer.edge_function(i, j, x);
                    let got = t.output_qp().dequantize(t.entry(i, j, m) as i64);
                    assert!((got - want).abs() <= t.output_qp().scale / 2.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_connection_is_exact_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = random_layer(1, 1, 3, 3, &mut rng);
        let t = build_spline_tables(&layer, 4, 7).unwrap();
        for x in [-1.0, -0.33, 0.0, 0.5, 0.99, 3.0, -8.0] {
            let out = spline_table_forward(&Matrix::from_rows(&[vec![x]]).unwrap(), &t).unwrap();
            let q = t.input_qp().quantize(x) as usize;
            assert_eq!(out.get(0, 0), t.output_qp().dequantize(t.entry(0, 0, q) as i64));
            assert!(out.get(0, 0).is_finite());
        }
    }

    #[test]
    fn forward_within_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..12 {
            let n_in = rng.random_range(1..=16);
            let n_out = rng.random_range(1..=5);
            let g = rng.random_range(2..=6);
            let p = rng.random_range(1..=3);
            let bw_a = rng.random_range(3..=8);
            let h = rng.random_range(3..=8);
            let layer = random_layer(n_in, n_out, g, p, &mut rng);
            let t = build_spline_tables(&layer, bw_a, h).unwrap();
            let a = Matrix::from_vec(
                7,
                n_in,
                (0..7 * n_in).map(|_| rng.random_range(-1.0..=1.0)).collect(),
            )
            .unwrap();
            let got = spline_table_forward(&a, &t).unwrap();
            let want = kan_linear_forward(&a, &layer, &RecursiveBasis).unwrap();
            // output rounding plus input rounding times each spline's slope bound
            let s_a = t.input_qp().scale;
            let delta = layer.grid().delta();
            let nb = g + p;
            for j in 0..n_out {
                let mut bound = n_in as f64 * t.output_qp().scale / 2.0;
                for i in 0..n_in {
                    let c: Vec<f64> = (0..nb).map(|k| layer.coeffs()[(i * nb + k) * n_out + j] as f64).collect();
                    let slope = c.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max) / delta;
                    bound += slope * s_a / 2.0;
                }
                for r in 0..7 {
                    let err = (got.get(r, j) - want.get(r, j)).abs();
                    assert!(err <= bound + 1e-9, "trial {trial}: err {err} > {bound}");
                }
            }
        }
    }

    #[test]
    fn set_indexing() {
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let m = Model::kan_mlp(&[4, 3, 2], g, 0).unwrap();
        let set = SplineTableSet::build(&m, 4, 6).unwrap();
        let idx: Vec<usize> = set.iter().map(|(i, _)| i).collect();
        assert_eq!(idx, vec![0, 1]);
        assert_eq!(set.stored_bits(), (4 * 3 + 3 * 2) * 16 * 6);
        let mut e = SplineTableSet::empty(2);
        assert!(e.is_empty());
        assert!(e.insert(5, set.get(0).unwrap().clone()).is_err());
    }
}
