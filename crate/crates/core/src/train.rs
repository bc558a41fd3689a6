//! Minibatch momentum SGD on softmax cross-entropy.
//!
//! Coefficient gradients are outer products of basis vectors with the
//! output gradient (`dW = Bᵀ·dOut`); input gradients go through the basis
//! derivatives and are zero where the input was clamped. Batches are split
//! into fixed-size chunks processed in parallel and reduced in chunk order,
//! so results do not depend on the thread count.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::GridSpec;
use crate::data::Dataset;
use crate::error::{KanError, Result};
use crate::linalg::Matrix;
use crate::model::{
    basis_matrix, col2im, im2col, max_pool_with_indices, FeatureMap, Layer, Model, RecursiveBasis, Shape,
};

const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 10,
            batch: 64,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the training set before the first update.
    pub initial_loss: f64,
    /// Mean loss over the training set after the last update.
    pub final_loss: f64,
    /// Running mean of the minibatch losses of each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

impl TrainReport {
    /// `epoch,loss` rows; epoch 0 is the initial loss.
    pub fn loss_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "loss"])?;
        w.write_record(["0".to_string(), self.initial_loss.to_string()])?;
        for (e, l) in self.epoch_losses.iter().enumerate() {
            w.write_record([(e + 1).to_string(), l.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| KanError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_loss_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.loss_csv()?)?;
        Ok(())
    }
}

/// Gradients of the mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Per layer, in coefficient storage order; empty for layers without
    /// coefficients.
    pub coeffs: Vec<Vec<f64>>,
    /// With respect to the model input.
    pub input: Matrix,
}

enum Cache {
    Linear { input: Matrix, basis: Matrix },
    Conv { in_shape: (usize, usize, usize), samples: Vec<(Matrix, Matrix)> },
    Pool { in_len: usize, argmax: Vec<Vec<usize>> },
    Flatten,
}

fn image_dims(s: Shape) -> (usize, usize, usize) {
    match s {
        Shape::Image { channels, height, width } => (channels, height, width),
        Shape::Flat(_) => unreachable!("shape checked at model construction"),
    }
}

fn forward_cached(model: &Model, x: &Matrix) -> Result<(Matrix, Vec<Cache>)> {
    let shapes = model.shapes()?;
    let mut act = x.clone();
    let mut caches = Vec::with_capacity(model.layers().len());
    for (li, layer) in model.layers().iter().enumerate() {
        let (next, cache) = match layer {
            Layer::KanLinear(l) => {
                let basis = basis_matrix(&act, l.grid(), &RecursiveBasis);
                let out = basis.matmul(&l.weight_matrix())?;
                (out, Cache::Linear { input: act, basis })
            }
            Layer::ConvKan(c) => {
                let (ch, h, w) = image_dims(shapes[li]);
                let out_len = shapes[li + 1].len();
                let weights = c.weight_matrix();
                let mut next = Matrix::zeros(act.rows(), out_len);
                let mut samples = Vec::with_capacity(act.rows());
                for m in 0..act.rows() {
                    let fm = FeatureMap::new(ch, h, w, act.row(m).to_vec())?;
                    let cols = im2col(&fm, c.kernel(), c.stride(), c.padding())?;
                    let basis = basis_matrix(&cols, c.grid(), &RecursiveBasis);
                    let out = basis.matmul(&weights)?;
                    let positions = out.rows();
                    let dst = next.row_mut(m);
                    for p in 0..positions {
                        for (o, &v) in out.row(p).iter().enumerate() {
                            dst[o * positions + p] = v;
                        }
                    }
                    samples.push((cols, basis));
                }
                (next, Cache::Conv { in_shape: (ch, h, w), samples })
            }
            Layer::MaxPool { window } => {
                let (ch, h, w) = image_dims(shapes[li]);
                let mut next = Matrix::zeros(act.rows(), shapes[li + 1].len());
                let mut argmax = Vec::with_capacity(act.rows());
                for m in 0..act.rows() {
                    let fm = FeatureMap::new(ch, h, w, act.row(m).to_vec())?;
                    let (p, idx) = max_pool_with_indices(&fm, *window)?;
                    next.row_mut(m).copy_from_slice(p.data());
                    argmax.push(idx);
                }
                (next, Cache::Pool { in_len: ch * h * w, argmax })
            }
            Layer::Flatten => (act, Cache::Flatten),
        };
        act = next;
        caches.push(cache);
    }
    Ok((act, caches))
}

/// Gradient with respect to the spline inputs, given the gradient with
/// respect to the basis matrix. Clamped inputs get zero.
fn input_grad(a: &Matrix, d_basis: &Matrix, grid: &GridSpec) -> Result<Matrix> {
    let nb = grid.num_basis();
    let mut out = Matrix::zeros(a.rows(), a.cols());
    if grid.degree() == 0 {
        return Ok(out);
    }
    let (lo, hi) = grid.domain();
    let mut deriv = vec![0.0; nb];
    for m in 0..a.rows() {
        for i in 0..a.cols() {
            let x = a.get(m, i);
            if !(lo..=hi).contains(&x) {
                continue;
            }
            grid.basis_derivative_into(x, &mut deriv)?;
            let db = &d_basis.row(m)[i * nb..(i + 1) * nb];
            out.set(m, i, db.iter().zip(&deriv).map(|(g, d)| g * d).sum());
        }
    }
    Ok(out)
}

/// Softmax cross-entropy summed over rows; the logit gradient is scaled by
/// `scale`. Also returns the number of correct argmax predictions.
fn softmax_xent(logits: &Matrix, labels: &[usize], scale: f64) -> (f64, usize, Matrix) {
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    let mut correct = 0;
    for (m, &y) in labels.iter().enumerate() {
        let z = logits.row(m);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        loss += max + sum.ln() - z[y];
        let best = z
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > z[b] { i } else { b });
        correct += usize::from(best == y);
        let g = grad.row_mut(m);
        for (gi, &v) in g.iter_mut().zip(z) {
            *gi = (v - max).exp() / sum * scale;
        }
        g[y] -= scale;
    }
    (loss, correct, grad)
}

struct ChunkResult {
    loss: f64,
    coeffs: Vec<Vec<f64>>,
    input: Option<Matrix>,
}

fn backward(model: &Model, x: &Matrix, labels: &[usize], scale: f64, want_input: bool) -> Result<ChunkResult> {
    let (logits, caches) = forward_cached(model, x)?;
    let (loss, _, mut g) = softmax_xent(&logits, labels, scale);
    let mut coeffs: Vec<Vec<f64>> = vec![Vec::new(); caches.len()];
    for (li, cache) in caches.iter().enumerate().rev() {
        let need_input = li > 0 || want_input;
        match (cache, &model.layers()[li]) {
            (Cache::Linear { input, basis }, Layer::KanLinear(l)) => {
                coeffs[li] = basis.t_matmul(&g)?.into_vec();
                if need_input {
                    let d_basis = g.matmul_t(&l.weight_matrix())?;
                    g = input_grad(input, &d_basis, l.grid())?;
                }
            }
            (Cache::Conv { in_shape, samples }, Layer::ConvKan(c)) => {
                let (ch, h, w) = *in_shape;
                let weights = c.weight_matrix();
                let mut dw = Matrix::zeros(weights.rows(), weights.cols());
                let mut next = Matrix::zeros(g.rows(), ch * h * w);
                for (m, (cols, basis)) in samples.iter().enumerate() {
                    let positions = basis.rows();
                    let c_out = weights.cols();
                    let row = g.row(m);
                    let mut d_out = Matrix::zeros(positions, c_out);
                    for p in 0..positions {
                        for o in 0..c_out {
                            d_out.set(p, o, row[o * positions + p]);
                        }
                    }
                    let dwm = basis.t_matmul(&d_out)?;
                    dw.as_mut_slice().iter_mut().zip(dwm.as_slice()).for_each(|(a, b)| *a += b);
                    if need_input {
                        let d_basis = d_out.matmul_t(&weights)?;
                        let d_cols = input_grad(cols, &d_basis, c.grid())?;
                        let d_in = col2im(&d_cols, ch, h, w, c.kernel(), c.stride(), c.padding())?;
                        next.row_mut(m).copy_from_slice(d_in.data());
                    }
                }
                coeffs[li] = dw.into_vec();
                if need_input {
                    g = next;
                }
            }
            (Cache::Pool { in_len, argmax }, Layer::MaxPool { .. }) => {
                let mut next = Matrix::zeros(g.rows(), *in_len);
                for (m, idx) in argmax.iter().enumerate() {
                    let src = g.row(m).to_vec();
                    let dst = next.row_mut(m);
                    for (o, &i) in idx.iter().enumerate() {
                        dst[i] += src[o];
                    }
                }
                g = next;
            }
            (Cache::Flatten, Layer::Flatten) => {}
            _ => unreachable!("cache built from the same layers"),
        }
    }
    Ok(ChunkResult {
        loss,
        coeffs,
        input: want_input.then_some(g),
    })
}

fn check_data(model: &Model, x: &Matrix, labels: &[usize]) -> Result<()> {
    if x.cols() != model.input_shape().len() {
        return Err(KanError::ShapeMismatch(format!(
            "model expects {} input features, data has {}",
            model.input_shape().len(),
            x.cols()
        )));
    }
    if x.rows() != labels.len() {
        return Err(KanError::CountMismatch {
            images: x.rows(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.output_len()) {
        return Err(KanError::ShapeMismatch(format!(
            "label {bad} but the model has {} outputs",
            model.output_len()
        )));
    }
    Ok(())
}

/// Mean loss over `x` and its gradients with respect to every coefficient
/// and to the input.
pub fn loss_and_gradients(model: &Model, x: &Matrix, labels: &[usize]) -> Result<(f64, Gradients)> {
    check_data(model, x, labels)?;
    if labels.is_empty() {
        return Err(KanError::EmptyInput("no samples".into()));
    }
    let n = labels.len() as f64;
    let r = backward(model, x, labels, 1.0 / n, true)?;
    Ok((
        r.loss / n,
        Gradients {
            coeffs: r.coeffs,
            input: r.input.expect("input gradient requested"),
        },
    ))
}

/// Mean loss and accuracy of `model` on `data`.
pub fn dataset_loss(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    check_data(model, data.inputs(), data.labels())?;
    if data.is_empty() {
        return Err(KanError::EmptyInput("empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts = idx
        .par_chunks(CHUNK * 4)
        .map(|c| {
            let x = data.inputs().select_rows(c);
            let labels: Vec<usize> = c.iter().map(|&i| data.labels()[i]).collect();
            let logits = model.forward(&x)?;
            let (loss, correct, _) = softmax_xent(&logits, &labels, 0.0);
            Ok((loss, correct))
        })
        .collect::<Result<Vec<_>>>()?;
    let (loss, correct) = parts.iter().fold((0.0, 0), |(l, c), p| (l + p.0, c + p.1));
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

fn coeffs_mut(layer: &mut Layer) -> Option<&mut [f32]> {
    match layer {
        Layer::KanLinear(l) => Some(l.coeffs_mut()),
        Layer::ConvKan(c) => Some(c.coeffs_mut()),
        _ => None,
    }
}

/// Trains `model` in place. Deterministic given `cfg.seed`.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    check_data(model, data.inputs(), data.labels())?;
    if data.is_empty() {
        return Err(KanError::EmptyInput("cannot train on an empty dataset".into()));
    }
    if cfg.batch == 0 || !(cfg.lr.is_finite() && cfg.lr >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(KanError::InvalidArgument(format!(
            "invalid training config: lr {}, batch {}, momentum {}",
            cfg.lr, cfg.batch, cfg.momentum
        )));
    }
    let (initial_loss, _) = dataset_loss(model, data)?;
    let mut velocity: Vec<Vec<f64>> = model
        .layers_mut()
        .iter_mut()
        .map(|l| coeffs_mut(l).map_or_else(Vec::new, |c| vec![0.0; c.len()]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let m: &Model = model;
            let parts = batch
                .par_chunks(CHUNK)
                .map(|c| {
                    let x = data.inputs().select_rows(c);
                    let labels: Vec<usize> = c.iter().map(|&i| data.labels()[i]).collect();
                    backward(m, &x, &labels, scale, false)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut loss = 0.0;
            let mut grads = parts[0].coeffs.clone();
            for (k, p) in parts.iter().enumerate() {
                loss += p.loss;
                if k > 0 {
                    for (g, pg) in grads.iter_mut().zip(&p.coeffs) {
                        g.iter_mut().zip(pg).for_each(|(a, b)| *a += b);
                    }
                }
            }
            let loss = loss * scale;
            if !loss.is_finite() {
                return Err(KanError::Diverged(format!(
                    "loss became {loss} at epoch {}, step {step}",
                    epoch + 1
                )));
            }
            epoch_loss += loss * batch.len() as f64;
            for ((layer, v), g) in model.layers_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                if let Some(w) = coeffs_mut(layer) {
                    for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                        *vi = cfg.momentum * *vi + gi;
                        *wi = (*wi as f64 - cfg.lr * *vi) as f32;
                    }
                }
            }
        }
        let mean = epoch_loss / data.len() as f64;
        log::info!("epoch {}/{}: loss {mean:.5}", epoch + 1, cfg.epochs);
        epoch_losses.push(mean);
    }
    let (final_loss, train_accuracy) = dataset_loss(model, data)?;
    if !final_loss.is_finite() {
        return Err(KanError::Diverged(format!("final loss is {final_loss}")));
    }
    Ok(TrainReport {
        initial_loss,
        final_loss,
        epoch_losses,
        train_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, SyntheticKind};
    use crate::model::{ConvKanLayer, KanLinearLayer};
    use rand::Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        if d < 1e-9 {
            0.0
        } else {
            d / a.abs().max(b.abs())
        }
    }

    fn random_coeffs(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-0.8f32..0.8)).collect()
    }

    /// Central differences on every coefficient and input, using the
    /// perturbation actually stored in f32.
    fn check_model(model: &Model, x: &Matrix, labels: &[usize]) {
        let (_, grads) = loss_and_gradients(model, x, labels).unwrap();
        let h = 1e-5;
        let loss = |m: &Model, x: &Matrix| loss_and_gradients(m, x, labels).unwrap().0;
        for li in 0..model.layers().len() {
            let n = grads.coeffs[li].len();
            for k in 0..n {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let w0 = coeffs_mut(&mut plus.layers_mut()[li]).unwrap()[k];
                let wp = (w0 as f64 + h) as f32;
                let wm = (w0 as f64 - h) as f32;
                coeffs_mut(&mut plus.layers_mut()[li]).unwrap()[k] = wp;
                coeffs_mut(&mut minus.layers_mut()[li]).unwrap()[k] = wm;
                let fd = (loss(&plus, x) - loss(&minus, x)) / (wp as f64 - wm as f64);
                let an = grads.coeffs[li][k];
                assert!(rel_err(an, fd) < 1e-4, "layer {li} coeff {k}: {an} vs {fd}");
            }
        }
        for m in 0..x.rows() {
            for i in 0..x.cols() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.set(m, i, x.get(m, i) + h);
                xm.set(m, i, x.get(m, i) - h);
                let fd = (loss(model, &xp) - loss(model, &xm)) / (2.0 * h);
                let an = grads.input.get(m, i);
                assert!(rel_err(an, fd) < 1e-4, "input ({m},{i}): {an} vs {fd}");
            }
        }
    }

    #[test]
    fn linear_layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in [1, 2, 3] {
            let g = GridSpec::new(4, p, -1.0, 1.0).unwrap();
            let layer = KanLinearLayer::new(3, 2, g.clone(), random_coeffs(3 * (4 + p) * 2, &mut rng)).unwrap();
            let model = Model::new(g, Shape::Flat(3), vec![Layer::KanLinear(layer)]).unwrap();
            let x = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-0.95..0.95)).collect()).unwrap();
            check_model(&model, &x, &[0, 1, 1, 0]);
        }
    }

    #[test]
    fn deep_model_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let model = Model::kan_mlp(&[4, 5, 3], g, 3).unwrap();
        let x = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-0.9..0.9)).collect()).unwrap();
        check_model(&model, &x, &[2, 0, 1]);
    }

    #[test]
    fn conv_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = GridSpec::new(3, 2, -1.0, 1.0).unwrap();
        let nb = g.num_basis();
        let conv = ConvKanLayer::new(2, 3, 3, 1, 1, g.clone(), random_coeffs(9 * 2 * nb * 3, &mut rng)).unwrap();
        let lin = KanLinearLayer::new(27, 4, g.clone(), random_coeffs(27 * nb * 4, &mut rng)).unwrap();
        let model = Model::new(
            g,
            Shape::Image { channels: 2, height: 6, width: 6 },
            vec![Layer::ConvKan(conv), Layer::MaxPool { window: 2 }, Layer::Flatten, Layer::KanLinear(lin)],
        )
        .unwrap();
        let x = Matrix::from_vec(2, 72, (0..144).map(|_| rng.random_range(-0.9..0.9)).collect()).unwrap();
        check_model(&model, &x, &[3, 1]);
    }

    #[test]
    fn zero_lr_keeps_coefficients() {
        let data = synthetic_dataset(SyntheticKind::Blobs { dims: 3, classes: 3 }, 100, 2).unwrap();
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let mut model = Model::kan_mlp(&[3, 3], g, 1).unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        let r = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(model, before);
        assert_eq!(r.initial_loss, r.final_loss);
    }

    #[test]
    fn deterministic_and_learns_separable_data() {
        let data = synthetic_dataset(SyntheticKind::LinearlySeparable { dims: 4 }, 400, 5).unwrap();
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let cfg = TrainConfig {
            lr: 0.05,
            epochs: 50,
            batch: 32,
            ..TrainConfig::default()
        };
        let mut a = Model::kan_mlp(&[4, 2], g.clone(), 9).unwrap();
        let mut b = a.clone();
        let ra = train(&mut a, &data, &cfg).unwrap();
        let rb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.final_loss < ra.initial_loss);
        assert!(ra.train_accuracy >= 0.95, "accuracy {}", ra.train_accuracy);
        let csv = ra.loss_csv().unwrap();
        assert!(csv.starts_with("epoch,loss\n0,"));
        assert_eq!(csv.lines().count(), 52);
    }

    #[test]
    fn divergence_is_reported() {
        let data = synthetic_dataset(SyntheticKind::Blobs { dims: 3, classes: 3 }, 64, 2).unwrap();
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let mut model = Model::kan_mlp(&[3, 3], g, 1).unwrap();
        let cfg = TrainConfig {
            lr: 1e300,
            epochs: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut model, &data, &cfg), Err(KanError::Diverged(_))));
    }

    #[test]
    fn rejects_bad_input() {
        let data = synthetic_dataset(SyntheticKind::Blobs { dims: 3, classes: 3 }, 10, 2).unwrap();
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let mut model = Model::kan_mlp(&[4, 3], g.clone(), 1).unwrap();
        assert!(matches!(train(&mut model, &data, &TrainConfig::default()), Err(KanError::ShapeMismatch(_))));
        let mut model = Model::kan_mlp(&[3, 3], g, 1).unwrap();
        assert!(matches!(train(&mut model, &data.take(0), &TrainConfig::default()), Err(KanError::EmptyInput(_))));
    }
}
