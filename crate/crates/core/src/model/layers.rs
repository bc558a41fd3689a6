use crate::bspline::GridSpec;
use crate::error::{KanError, Result};
use crate::linalg::{Matrix, MulCounter};
use crate::quant::QuantParams;

use super::conv::{im2col, FeatureMap};

/// Produces the `G + P` basis values for one (already clamped) input.
pub trait BasisEval: Sync {
    fn eval(&self, grid: &GridSpec, x: f64, out: &mut [f64]);
}

/// Plain Cox-de Boor recursion.
#[derive(Debug, Clone, Copy, Default)]
pub struct RecursiveBasis;

impl BasisEval for RecursiveBasis {
    #[inline]
    fn eval(&self, grid: &GridSpec, x: f64, out: &mut [f64]) {
        grid.eval_basis_into(x, out, &mut ());
    }
}

/// Recursion followed by fake quantization of every basis value.
#[derive(Debug, Clone, Copy)]
pub struct FakeQuantBasis {
    pub qp: QuantParams,
}

impl BasisEval for FakeQuantBasis {
    #[inline]
    fn eval(&self, grid: &GridSpec, x: f64, out: &mut [f64]) {
        grid.eval_basis_into(x, out, &mut ());
        if !self.qp.is_passthrough() {
            for v in out.iter_mut() {
                *v = self.qp.fake_quant(*v);
            }
        }
    }
}

impl<F> BasisEval for F
where
    F: Fn(&GridSpec, f64, &mut [f64]) + Sync,
{
    fn eval(&self, grid: &GridSpec, x: f64, out: &mut [f64]) {
        self(grid, x, out)
    }
}

/// Fully connected KAN layer. Coefficients form an `[n_in*(G+P), n_out]`
/// matrix whose rows are ordered by input neuron, then basis index.
#[derive(Debug, Clone, PartialEq)]
pub struct KanLinearLayer {
    n_in: usize,
    n_out: usize,
    grid: GridSpec,
    coeffs: Vec<f32>,
}

impl KanLinearLayer {
    pub fn new(n_in: usize, n_out: usize, grid: GridSpec, coeffs: Vec<f32>) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(KanError::InvalidArgument("layer dimensions must be positive".into()));
        }
        let expected = n_in * grid.num_basis() * n_out;
        if coeffs.len() != expected {
            return Err(KanError::ShapeMismatch(format!(
                "linear layer {n_in}->{n_out} needs {expected} coefficients, got {}",
                coeffs.len()
            )));
        }
        Ok(Self {
            n_in,
            n_out,
            grid,
            coeffs,
        })
    }

    pub fn zeros(n_in: usize, n_out: usize, grid: GridSpec) -> Result<Self> {
        let n = n_in * grid.num_basis() * n_out;
        Self::new(n_in, n_out, grid, vec![0.0; n])
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn coeffs(&self) -> &[f32] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f32] {
        &mut self.coeffs
    }

    pub fn coeff_rows(&self) -> usize {
        self.n_in * self.grid.num_basis()
    }

    pub fn param_count(&self) -> usize {
        self.coeffs.len()
    }

    /// Coefficients widened to `f64`, as an `[n_in*(G+P), n_out]` matrix.
    pub fn weight_matrix(&self) -> Matrix {
        coeff_matrix(&self.coeffs, self.coeff_rows(), self.n_out)
    }

    /// Value of the learned activation on the edge `input -> output`.
    pub fn edge_function(&self, input: usize, output: usize, x: f64) -> f64 {
        let nb = self.grid.num_basis();
        let b = self.grid.cox_de_boor(self.grid.clamp(x));
        (0..nb)
            .map(|k| b.values[k] * self.coeffs[(input * nb + k) * self.n_out + output] as f64)
            .sum()
    }
}

/// Convolutional KAN layer, lowered through im2col. Coefficients form a
/// `[K²·c_in·(G+P), c_out]` matrix whose rows follow the im2col patch order
/// (channel, kernel row, kernel column), then basis index.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKanLayer {
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    grid: GridSpec,
    coeffs: Vec<f32>,
}

impl ConvKanLayer {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        grid: GridSpec,
        coeffs: Vec<f32>,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || kernel == 0 || stride == 0 {
            return Err(KanError::InvalidArgument(
                "conv layer channels, kernel and stride must be positive".into(),
            ));
        }
        let expected = kernel * kernel * c_in * grid.num_basis() * c_out;
        if coeffs.len() != expected {
            return Err(KanError::ShapeMismatch(format!(
                "conv layer needs {expected} coefficients, got {}",
                coeffs.len()
            )));
        }
        Ok(Self {
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            grid,
            coeffs,
        })
    }

    pub fn zeros(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        grid: GridSpec,
    ) -> Result<Self> {
        let n = kernel * kernel * c_in * grid.num_basis() * c_out;
        Self::new(c_in, c_out, kernel, stride, padding, grid, vec![0.0; n])
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn coeffs(&self) -> &[f32] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f32] {
        &mut self.coeffs
    }

    /// Width of an im2col row, `K²·c_in`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }

    pub fn coeff_rows(&self) -> usize {
        self.patch_len() * self.grid.num_basis()
    }

    pub fn param_count(&self) -> usize {
        self.coeffs.len()
    }

    pub fn weight_matrix(&self) -> Matrix {
        coeff_matrix(&self.coeffs, self.coeff_rows(), self.c_out)
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        super::conv::conv_output_dims(h, w, self.kernel, self.stride, self.padding)
    }

    /// The same coefficients viewed as a linear layer over im2col rows.
    pub fn as_linear(&self) -> KanLinearLayer {
        KanLinearLayer {
            n_in: self.patch_len(),
            n_out: self.c_out,
            grid: self.grid.clone(),
            coeffs: self.coeffs.clone(),
        }
    }
}

fn coeff_matrix(coeffs: &[f32], rows: usize, cols: usize) -> Matrix {
    let data = coeffs.iter().map(|&v| v as f64).collect();
    Matrix::from_vec(rows, cols, data).expect("coefficient count checked at construction")
}

/// Builds the dense `[M, n_in*(G+P)]` basis matrix of `a`. Inputs are
/// clamped to the interior domain before evaluation.
pub fn basis_matrix<B: BasisEval + ?Sized>(a: &Matrix, grid: &GridSpec, basis: &B) -> Matrix {
    let nb = grid.num_basis();
    let (m, n_in) = a.shape();
    let mut b = Matrix::zeros(m, n_in * nb);
    for r in 0..m {
        let src = a.row(r);
        let dst = b.row_mut(r);
        for (i, &x) in src.iter().enumerate() {
            basis.eval(grid, grid.clamp(x), &mut dst[i * nb..(i + 1) * nb]);
        }
    }
    b
}

/// Basis matrix by the plain recursion, counting its multiplications.
pub fn basis_matrix_counted<C: MulCounter>(a: &Matrix, grid: &GridSpec, counter: &mut C) -> Matrix {
    let nb = grid.num_basis();
    let (m, n_in) = a.shape();
    let mut b = Matrix::zeros(m, n_in * nb);
    for r in 0..m {
        let src = a.row(r);
        let dst = b.row_mut(r);
        for (i, &x) in src.iter().enumerate() {
            grid.eval_basis_into(grid.clamp(x), &mut dst[i * nb..(i + 1) * nb], counter);
        }
    }
    b
}

/// `B(a) · W` for an explicit weight matrix (possibly fake-quantized).
pub fn spline_matmul<B: BasisEval + ?Sized>(
    a: &Matrix,
    grid: &GridSpec,
    weights: &Matrix,
    basis: &B,
) -> Result<Matrix> {
    let expected = a.cols() * grid.num_basis();
    if weights.rows() != expected {
        return Err(KanError::ShapeMismatch(format!(
            "input has {} features, weights expect {}",
            a.cols(),
            weights.rows() / grid.num_basis()
        )));
    }
    basis_matrix(a, grid, basis).matmul(weights)
}

/// Forward pass of a linear KAN layer:
/// `out[m, j] = Σ_i Σ_k b_k(a[m, i]) · W[i·(G+P) + k, j]`, computed as the
/// dense basis matrix times the coefficient matrix.
pub fn kan_linear_forward<B: BasisEval + ?Sized>(
    a: &Matrix,
    layer: &KanLinearLayer,
    basis: &B,
) -> Result<Matrix> {
    if a.cols() != layer.n_in {
        return Err(KanError::ShapeMismatch(format!(
            "input has {} columns, layer expects {}",
            a.cols(),
            layer.n_in
        )));
    }
    spline_matmul(a, &layer.grid, &layer.weight_matrix(), basis)
}

/// Multiplications performed by the reference forward pass, split into the
/// matrix product and the basis recursion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MulTally {
    pub matmul: u64,
    pub bspline: u64,
}

impl MulTally {
    pub fn total(&self) -> u64 {
        self.matmul + self.bspline
    }
}

impl std::ops::AddAssign for MulTally {
    fn add_assign(&mut self, rhs: Self) {
        self.matmul += rhs.matmul;
        self.bspline += rhs.bspline;
    }
}

/// Reference linear forward with instrumented multiplication counting.
pub fn kan_linear_forward_counted(a: &Matrix, layer: &KanLinearLayer) -> Result<(Matrix, MulTally)> {
    if a.cols() != layer.n_in {
        return Err(KanError::ShapeMismatch(format!(
            "input has {} columns, layer expects {}",
            a.cols(),
            layer.n_in
        )));
    }
    let mut tally = MulTally::default();
    let b = basis_matrix_counted(a, &layer.grid, &mut tally.bspline);
    let out = b.matmul_counted(&layer.weight_matrix(), &mut tally.matmul)?;
    Ok((out, tally))
}

/// Forward pass of a convolutional KAN layer on one feature map:
/// im2col, then the linear KAN operation, reshaped to `[c_out, H_out, W_out]`.
pub fn convkan_forward<B: BasisEval + ?Sized>(
    input: &FeatureMap,
    layer: &ConvKanLayer,
    basis: &B,
) -> Result<FeatureMap> {
    convkan_with_weights(input, layer, &layer.weight_matrix(), basis)
}

pub(crate) fn convkan_with_weights<B: BasisEval + ?Sized>(
    input: &FeatureMap,
    layer: &ConvKanLayer,
    weights: &Matrix,
    basis: &B,
) -> Result<FeatureMap> {
    check_channels(input, layer)?;
    let (h_out, w_out) = layer.output_dims(input.height(), input.width())?;
    let cols = im2col(input, layer.kernel, layer.stride, layer.padding)?;
    let out = spline_matmul(&cols, &layer.grid, weights, basis)?;
    Ok(FeatureMap::from_positions_major(&out, h_out, w_out))
}

/// Reference conv forward with instrumented multiplication counting.
pub fn convkan_forward_counted(input: &FeatureMap, layer: &ConvKanLayer) -> Result<(FeatureMap, MulTally)> {
    check_channels(input, layer)?;
    let (h_out, w_out) = layer.output_dims(input.height(), input.width())?;
    let cols = im2col(input, layer.kernel, layer.stride, layer.padding)?;
    let mut tally = MulTally::default();
    let b = basis_matrix_counted(&cols, &layer.grid, &mut tally.bspline);
    let out = b.matmul_counted(&layer.weight_matrix(), &mut tally.matmul)?;
    Ok((FeatureMap::from_positions_major(&out, h_out, w_out), tally))
}

fn check_channels(input: &FeatureMap, layer: &ConvKanLayer) -> Result<()> {
    if input.channels() != layer.c_in {
        return Err(KanError::ShapeMismatch(format!(
            "input has {} channels, layer expects {}",
            input.channels(),
            layer.c_in
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_linear(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize, grid: &GridSpec) -> KanLinearLayer {
        let n = n_in * grid.num_basis() * n_out;
        let coeffs = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        KanLinearLayer::new(n_in, n_out, grid.clone(), coeffs).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Aggregated double sum over inputs and basis functions.
    fn double_sum(a: &Matrix, layer: &KanLinearLayer) -> Matrix {
        let g = layer.grid();
        let nb = g.num_basis();
        let mut out = Matrix::zeros(a.rows(), layer.n_out());
        for m in 0..a.rows() {
            for j in 0..layer.n_out() {
                let mut acc = 0.0;
                for i in 0..layer.n_in() {
                    let b = g.cox_de_boor(g.clamp(a.get(m, i)));
                    for k in 0..nb {
                        acc += b.values[k] * layer.coeffs()[(i * nb + k) * layer.n_out() + j] as f64;
                    }
                }
                out.set(m, j, acc);
            }
        }
        out
    }

    #[test]
    fn all_ones_column_gives_partition_of_unity() {
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let layer = KanLinearLayer::new(1, 1, g.clone(), vec![1.0; 6]).unwrap();
        let a = Matrix::from_rows(&[vec![-1.0], vec![-0.3], vec![0.0], vec![0.77], vec![0.999]]).unwrap();
        let out = kan_linear_forward(&a, &layer, &RecursiveBasis).unwrap();
        for r in 0..a.rows() {
            assert!((out.get(r, 0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn indicator_basis_by_hand() {
        // G=1, P=0: one indicator per input, so the output is w0 + w1
        let g = GridSpec::new(1, 0, -1.0, 1.0).unwrap();
        let layer = KanLinearLayer::new(2, 1, g, vec![0.25, -2.0]).unwrap();
        let a = Matrix::from_rows(&[vec![0.3, -0.9], vec![-1.0, 0.999]]).unwrap();
        let out = kan_linear_forward(&a, &layer, &RecursiveBasis).unwrap();
        assert_eq!(out.as_slice(), &[-1.75, -1.75]);
    }

    #[test]
    fn matmul_form_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let layer = random_linear(&mut rng, 5, 3, &g);
        let a = random_matrix(&mut rng, 4, 5);
        let fast = kan_linear_forward(&a, &layer, &RecursiveBasis).unwrap();
        let slow = double_sum(&a, &layer);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_mismatch() {
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let layer = KanLinearLayer::zeros(3, 2, g.clone()).unwrap();
        let a = Matrix::zeros(2, 4);
        assert!(matches!(
            kan_linear_forward(&a, &layer, &RecursiveBasis),
            Err(KanError::ShapeMismatch(_))
        ));
        assert!(KanLinearLayer::new(3, 2, g, vec![0.0; 5]).is_err());
    }

    #[test]
    fn counted_forward_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = GridSpec::new(5, 2, -1.0, 1.0).unwrap();
        let layer = random_linear(&mut rng, 7, 4, &g);
        let a = random_matrix(&mut rng, 3, 7);
        let plain = kan_linear_forward(&a, &layer, &RecursiveBasis).unwrap();
        let (counted, tally) = kan_linear_forward_counted(&a, &layer).unwrap();
        assert_eq!(plain, counted);
        assert_eq!(tally.matmul, 3 * 4 * 7 * 7);
        assert_eq!(tally.bspline, 4 * 3 * 7 * (2 * 9 - 1));
    }

    #[test]
    fn convkan_single_pixel_kernel_partition_of_unity() {
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let layer = ConvKanLayer::new(1, 1, 1, 1, 0, g, vec![1.0; 6]).unwrap();
        let fm = FeatureMap::new(1, 3, 3, vec![-1.0, -0.5, 0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 0.95]).unwrap();
        let out = convkan_forward(&fm, &layer, &RecursiveBasis).unwrap();
        assert_eq!((out.channels(), out.height(), out.width()), (1, 3, 3));
        assert!(out.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn convkan_equals_im2col_then_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let n = 9 * 3 * 6 * 2;
        let coeffs = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let layer = ConvKanLayer::new(3, 2, 3, 1, 0, g, coeffs).unwrap();
        let data = (0..3 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fm = FeatureMap::new(3, 8, 8, data).unwrap();
        let out = convkan_forward(&fm, &layer, &RecursiveBasis).unwrap();
        let cols = im2col(&fm, 3, 1, 0).unwrap();
        let lin = kan_linear_forward(&cols, &layer.as_linear(), &RecursiveBasis).unwrap();
        assert_eq!((out.height(), out.width()), (6, 6));
        for c in 0..2 {
            for p in 0..36 {
                assert!((out.data()[c * 36 + p] - lin.get(p, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lekan_first_layer_shape() {
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let layer = ConvKanLayer::zeros(1, 6, 5, 1, 0, g).unwrap();
        let fm = FeatureMap::zeros(1, 28, 28);
        let out = convkan_forward(&fm, &layer, &RecursiveBasis).unwrap();
        assert_eq!((out.channels(), out.height(), out.width()), (6, 24, 24));
        let wrong = FeatureMap::zeros(2, 28, 28);
        assert!(matches!(convkan_forward(&wrong, &layer, &RecursiveBasis), Err(KanError::ShapeMismatch(_))));
    }
}
