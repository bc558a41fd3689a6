//! KAN layers, model composition and the `KANT` container format.

mod conv;
mod io;
mod layers;

pub use conv::{col2im, conv_output_dims, im2col, max_pool, max_pool_with_indices, maxpool2x2, FeatureMap};
pub use io::{load_container, load_model, save_model, save_model_with_tables, FORMAT_VERSION, MAGIC};
pub use layers::{
    basis_matrix, basis_matrix_counted, convkan_forward, convkan_forward_counted, kan_linear_forward,
    kan_linear_forward_counted, spline_matmul, BasisEval, ConvKanLayer, FakeQuantBasis, KanLinearLayer,
    MulTally, RecursiveBasis,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bspline::GridSpec;
use crate::error::{KanError, Result};
use crate::linalg::Matrix;

/// Shape of the activations flowing between layers (per sample).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Flat(n) => vec![n],
            Shape::Image { channels, height, width } => vec![channels, height, width],
        }
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [n] => Ok(Shape::Flat(n)),
            [channels, height, width] => Ok(Shape::Image { channels, height, width }),
            _ => Err(KanError::InvalidArgument(format!("unsupported input shape {dims:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    KanLinear(KanLinearLayer),
    ConvKan(ConvKanLayer),
    MaxPool { window: usize },
    Flatten,
}

impl Layer {
    pub fn is_spline(&self) -> bool {
        matches!(self, Layer::KanLinear(_) | Layer::ConvKan(_))
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::KanLinear(l) => l.param_count(),
            Layer::ConvKan(c) => c.param_count(),
            _ => 0,
        }
    }

    /// Shape after this layer, or an error when `input` does not fit.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match (self, input) {
            (Layer::KanLinear(l), Shape::Flat(n)) if n == l.n_in() => Ok(Shape::Flat(l.n_out())),
            (Layer::KanLinear(l), s) => Err(KanError::ShapeMismatch(format!(
                "linear layer expects {} features, got {s:?}",
                l.n_in()
            ))),
            (Layer::ConvKan(c), Shape::Image { channels, height, width }) if channels == c.c_in() => {
                let (h, w) = c.output_dims(height, width)?;
                Ok(Shape::Image { channels: c.c_out(), height: h, width: w })
            }
            (Layer::ConvKan(c), s) => Err(KanError::ShapeMismatch(format!(
                "conv layer expects {} input channels, got {s:?}",
                c.c_in()
            ))),
            (Layer::MaxPool { window }, Shape::Image { channels, height, width })
                if *window > 0 && height >= *window && width >= *window =>
            {
                Ok(Shape::Image { channels, height: height / window, width: width / window })
            }
            (Layer::MaxPool { window }, s) => Err(KanError::ShapeMismatch(format!(
                "cannot max-pool {s:?} with window {window}"
            ))),
            (Layer::Flatten, s) => Ok(Shape::Flat(s.len())),
        }
    }
}

/// Applies the spline operation of one KAN layer to a matrix of inputs
/// (samples for linear layers, im2col patches for conv layers).
pub trait SplineKernel: Sync {
    fn apply(&self, layer_index: usize, input: &Matrix) -> Result<Matrix>;
}

/// Full-precision recursion with the model's own coefficients.
pub struct ReferenceKernel<'a> {
    model: &'a Model,
}

impl SplineKernel for ReferenceKernel<'_> {
    fn apply(&self, layer_index: usize, input: &Matrix) -> Result<Matrix> {
        match &self.model.layers[layer_index] {
            Layer::KanLinear(l) => kan_linear_forward(input, l, &RecursiveBasis),
            Layer::ConvKan(c) => kan_linear_forward(input, &c.as_linear(), &RecursiveBasis),
            _ => Err(KanError::InvalidArgument(format!("layer {layer_index} has no splines"))),
        }
    }
}

/// Ordered stack of KAN, pooling and flatten layers sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    grid: GridSpec,
    input_shape: Shape,
    layers: Vec<Layer>,
}

impl Model {
    pub fn new(grid: GridSpec, input_shape: Shape, layers: Vec<Layer>) -> Result<Self> {
        let model = Self {
            grid,
            input_shape,
            layers,
        };
        model.shapes()?;
        for (i, layer) in model.layers.iter().enumerate() {
            let g = match layer {
                Layer::KanLinear(l) => l.grid(),
                Layer::ConvKan(c) => c.grid(),
                _ => continue,
            };
            if g != &model.grid {
                return Err(KanError::InvalidArgument(format!(
                    "layer {i} uses a different grid than the model"
                )));
            }
        }
        Ok(model)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Activation shapes: entry `i` is the input shape of layer `i`, the last
    /// entry is the model output.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = vec![self.input_shape];
        let mut cur = self.input_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer
                .output_shape(cur)
                .map_err(|e| e.context(format!("layer {i}")))?;
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn output_len(&self) -> usize {
        self.shapes().map(|s| s.last().map_or(0, Shape::len)).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Fully connected KAN with the given layer widths, e.g. `[784, 64, 10]`.
    pub fn kan_mlp(dims: &[usize], grid: GridSpec, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(KanError::InvalidArgument("a KAN MLP needs at least two widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let coeffs = init_coeffs(&mut rng, w[0] * grid.num_basis() * w[1], w[0]);
                KanLinearLayer::new(w[0], w[1], grid.clone(), coeffs).map(Layer::KanLinear)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid, Shape::Flat(dims[0]), layers)
    }

    /// LeNet-style ConvKAN for 28x28 single-channel images:
    /// conv 5x5 (1->6, pad 2), 2x2 max-pool, conv 5x5 (6->16), 2x2 max-pool,
    /// flatten, linear 400->10.
    pub fn lekan(grid: GridSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nb = grid.num_basis();
        let conv1 = ConvKanLayer::new(1, 6, 5, 1, 2, grid.clone(), init_coeffs(&mut rng, 25 * nb * 6, 25))?;
        let conv2 = ConvKanLayer::new(6, 16, 5, 1, 0, grid.clone(), init_coeffs(&mut rng, 150 * nb * 16, 150))?;
        let fc = KanLinearLayer::new(400, 10, grid.clone(), init_coeffs(&mut rng, 400 * nb * 10, 400))?;
        Self::new(
            grid,
            Shape::Image { channels: 1, height: 28, width: 28 },
            vec![
                Layer::ConvKan(conv1),
                Layer::MaxPool { window: 2 },
                Layer::ConvKan(conv2),
                Layer::MaxPool { window: 2 },
                Layer::Flatten,
                Layer::KanLinear(fc),
            ],
        )
    }

    /// One of the trainable reference architectures: `kanmlp1`, `kanmlp2`,
    /// `lekan`.
    pub fn builtin(name: &str, grid: GridSpec, seed: u64) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "kanmlp1" => Self::kan_mlp(&[784, 10], grid, seed),
            "kanmlp2" => Self::kan_mlp(&[784, 64, 10], grid, seed),
            "lekan" => Self::lekan(grid, seed),
            other => Err(KanError::InvalidArgument(format!(
                "unknown trainable architecture '{other}' (expected kanmlp1, kanmlp2 or lekan)"
            ))),
        }
    }

    /// Full-precision forward pass over a batch (`[M, input_len]`).
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_with(x, &ReferenceKernel { model: self })
    }

    /// Forward pass with a custom spline kernel. Pooling and flattening are
    /// handled here; activations are stored channel-major per sample, so
    /// flattening is a no-op on the data.
    pub fn forward_with<K: SplineKernel + ?Sized>(&self, x: &Matrix, kernel: &K) -> Result<Matrix> {
        if x.cols() != self.input_shape.len() {
            return Err(KanError::ShapeMismatch(format!(
                "model expects {} input features, got {}",
                self.input_shape.len(),
                x.cols()
            )));
        }
        let shapes = self.shapes()?;
        let mut act = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let in_shape = shapes[li];
            let out_shape = shapes[li + 1];
            act = match layer {
                Layer::KanLinear(_) => kernel.apply(li, &act)?,
                Layer::ConvKan(c) => {
                    let Shape::Image { channels, height, width } = in_shape else {
                        unreachable!("shape checked at construction")
                    };
                    let mut next = Matrix::zeros(act.rows(), out_shape.len());
                    for m in 0..act.rows() {
                        let fm = FeatureMap::new(channels, height, width, act.row(m).to_vec())?;
                        let cols = im2col(&fm, c.kernel(), c.stride(), c.padding())?;
                        let out = kernel.apply(li, &cols)?;
                        let positions = out.rows();
                        let dst = next.row_mut(m);
                        for p in 0..positions {
                            for (ch, &v) in out.row(p).iter().enumerate() {
                                dst[ch * positions + p] = v;
                            }
                        }
                    }
                    next
                }
                Layer::MaxPool { window } => {
                    let Shape::Image { channels, height, width } = in_shape else {
                        unreachable!("shape checked at construction")
                    };
                    let mut next = Matrix::zeros(act.rows(), out_shape.len());
                    for m in 0..act.rows() {
                        let fm = FeatureMap::new(channels, height, width, act.row(m).to_vec())?;
                        next.row_mut(m).copy_from_slice(max_pool(&fm, *window)?.data());
                    }
                    next
                }
                Layer::Flatten => act,
            };
        }
        Ok(act)
    }

    /// Index of the largest output for every row.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x)?))
    }
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn init_coeffs(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let std = 1.0 / (fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(3, 3, -1.0, 1.0).unwrap()
    }

    #[test]
    fn kanmlp1_parameter_count() {
        let m = Model::builtin("kanmlp1", grid(), 0).unwrap();
        assert_eq!(m.param_count(), 47_040);
        let m = Model::builtin("kanmlp2", grid(), 0).unwrap();
        assert_eq!(m.param_count(), 304_896);
    }

    #[test]
    fn lekan_shapes() {
        let m = Model::builtin("lekan", grid(), 0).unwrap();
        let shapes = m.shapes().unwrap();
        assert_eq!(shapes[1], Shape::Image { channels: 6, height: 28, width: 28 });
        assert_eq!(shapes[3], Shape::Image { channels: 16, height: 10, width: 10 });
        assert_eq!(shapes[5], Shape::Flat(400));
        assert_eq!(*shapes.last().unwrap(), Shape::Flat(10));
        assert_eq!(m.param_count(), 39_300);
    }

    #[test]
    fn incompatible_layers_rejected() {
        let g = grid();
        let a = KanLinearLayer::zeros(4, 3, g.clone()).unwrap();
        let b = KanLinearLayer::zeros(2, 1, g.clone()).unwrap();
        let err = Model::new(g, Shape::Flat(4), vec![Layer::KanLinear(a), Layer::KanLinear(b)]);
        assert!(err.is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Model::kan_mlp(&[6, 5, 3], grid(), 9).unwrap();
        let x = Matrix::from_vec(2, 6, (0..12).map(|v| (v as f64 * 0.7).sin()).collect()).unwrap();
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(
            a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
