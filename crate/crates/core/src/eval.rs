//! Accuracy evaluation under the different inference paths.

use std::sync::Mutex;

use rayon::prelude::*;

use crate::bspline::GridSpec;
use crate::data::Dataset;
use crate::error::{KanError, Result};
use crate::linalg::Matrix;
use crate::model::{argmax_rows, kan_linear_forward, BasisEval, FakeQuantBasis, Layer, Model, RecursiveBasis, SplineKernel};
use crate::quant::{compute_quant_params, ActRangePolicy, QuantConfig, QuantParams, RangeCalibrator, PASSTHROUGH_BITS};
use crate::tabulation::{fake_quant_weights, lut_basis_matrix, spline_table_forward, BsplineLut, KnotLattice, SplineTableSet};

const EVAL_CHUNK: usize = 64;

/// Which forward path to evaluate.
#[derive(Debug, Clone)]
pub enum EvalMode {
    Fp32,
    /// Simulated quantization of W, A and B.
    FakeQuant(QuantConfig),
    /// Basis values read from a shared LUT; weights fake-quantized at `bw_w`.
    BsplineLut { lut: BsplineLut, bw_w: u32 },
    /// Per-connection spline tables.
    SplineTable(SplineTableSet),
}

impl EvalMode {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Fp32 => "fp32",
            EvalMode::FakeQuant(_) => "fake-quant",
            EvalMode::BsplineLut { .. } => "bspline-lut",
            EvalMode::SplineTable(_) => "spline-table",
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum ActQuant {
    None,
    Uniform(QuantParams),
    Lattice(KnotLattice),
}

impl ActQuant {
    #[inline]
    fn apply(&self, x: f64) -> f64 {
        match self {
            ActQuant::None => x,
            ActQuant::Uniform(qp) => qp.fake_quant(x),
            ActQuant::Lattice(l) => l.fake_quant(x),
        }
    }

    /// Level of `x` and the number of levels, when finite.
    #[inline]
    fn level(&self, x: f64) -> Option<usize> {
        match self {
            ActQuant::None => None,
            ActQuant::Uniform(qp) => Some(qp.quantize(x) as usize),
            ActQuant::Lattice(l) => Some(l.level(x) as usize),
        }
    }

    fn levels(&self) -> Option<Vec<f64>> {
        match self {
            ActQuant::None => None,
            ActQuant::Uniform(qp) => Some((qp.q_lo..=qp.q_hi).map(|q| qp.dequantize(q)).collect()),
            ActQuant::Lattice(l) => Some((0..=l.max_level()).map(|a| l.value(a)).collect()),
        }
    }
}

struct PreparedLayer {
    grid: GridSpec,
    weights: Matrix,
    act: ActQuant,
    basis_qp: QuantParams,
    // fake-quantized basis rows at every activation level, when activations
    // are quantized
    memo: Option<Vec<f64>>,
}

impl PreparedLayer {
    fn basis_matrix(&self, a: &Matrix) -> Matrix {
        let nb = self.grid.num_basis();
        let mut b = Matrix::zeros(a.rows(), a.cols() * nb);
        let fq = FakeQuantBasis { qp: self.basis_qp };
        for r in 0..a.rows() {
            for (i, &x) in a.row(r).iter().enumerate() {
                let dst = &mut b.row_mut(r)[i * nb..(i + 1) * nb];
                match (&self.memo, self.act.level(x)) {
                    (Some(memo), Some(l)) => dst.copy_from_slice(&memo[l * nb..(l + 1) * nb]),
                    _ => fq.eval(&self.grid, self.grid.clamp(self.act.apply(x)), dst),
                }
            }
        }
        b
    }
}

enum Path {
    Recursive,
    Lut(BsplineLut),
    Tables(SplineTableSet),
}

/// A model bound to one evaluation mode, with quantized weights and
/// activation quantizers precomputed per layer.
pub struct PreparedModel<'a> {
    model: &'a Model,
    layers: Vec<Option<PreparedLayer>>,
    path: Path,
}

fn layer_parts(layer: &Layer) -> Option<(&GridSpec, Matrix)> {
    match layer {
        Layer::KanLinear(l) => Some((l.grid(), l.weight_matrix())),
        Layer::ConvKan(c) => Some((c.grid(), c.weight_matrix())),
        _ => None,
    }
}

/// Per-layer min/max of the spline inputs of the full-precision model.
fn calibrate(model: &Model, x: &Matrix) -> Result<Vec<(f64, f64)>> {
    struct Recorder<'m> {
        model: &'m Model,
        ranges: Mutex<Vec<RangeCalibrator>>,
    }
    impl SplineKernel for Recorder<'_> {
        fn apply(&self, li: usize, input: &Matrix) -> Result<Matrix> {
            self.ranges.lock().expect("calibration lock")[li].observe(input.as_slice());
            match &self.model.layers()[li] {
                Layer::KanLinear(l) => kan_linear_forward(input, l, &RecursiveBasis),
                Layer::ConvKan(c) => kan_linear_forward(input, &c.as_linear(), &RecursiveBasis),
                _ => unreachable!("only spline layers reach the kernel"),
            }
        }
    }
    let rec = Recorder {
        model,
        ranges: Mutex::new(vec![RangeCalibrator::new(); model.layers().len()]),
    };
    model.forward_with(x, &rec)?;
    let ranges = rec.ranges.into_inner().expect("calibration lock");
    model
        .layers()
        .iter()
        .zip(ranges)
        .map(|(l, r)| if l.is_spline() { r.finish(true) } else { Ok((0.0, 0.0)) })
        .collect()
}

fn grid_bounds_params(grid: &GridSpec, bw: u32) -> Result<QuantParams> {
    let (lo, hi) = grid.domain();
    if lo <= 0.0 && hi >= 0.0 {
        compute_quant_params(lo, hi, bw)
    } else {
        QuantParams::covering(lo, hi, bw)
    }
}

impl<'a> PreparedModel<'a> {
    /// `calibration` supplies the inputs used by the calibrated min/max
    /// activation policy and is ignored otherwise.
    pub fn new(model: &'a Model, mode: &EvalMode, calibration: Option<&Matrix>) -> Result<Self> {
        let (cfg, path) = match mode {
            EvalMode::Fp32 => (QuantConfig::passthrough(), Path::Recursive),
            EvalMode::FakeQuant(cfg) => {
                cfg.validate()?;
                (*cfg, Path::Recursive)
            }
            EvalMode::BsplineLut { lut, bw_w } => {
                if lut.degree() != model.grid().degree() {
                    return Err(KanError::InvalidArgument(format!(
                        "LUT degree {} does not match model degree {}",
                        lut.degree(),
                        model.grid().degree()
                    )));
                }
                let cfg = QuantConfig::new(*bw_w, PASSTHROUGH_BITS, PASSTHROUGH_BITS);
                cfg.validate()?;
                (cfg, Path::Lut(lut.clone()))
            }
            EvalMode::SplineTable(set) => {
                for (li, layer) in model.layers().iter().enumerate() {
                    if !layer.is_spline() {
                        continue;
                    }
                    let t = set
                        .get(li)
                        .ok_or_else(|| KanError::InvalidArgument(format!("no spline tables for layer {li}")))?;
                    let (rows, cols) = layer_parts(layer).map(|(g, w)| (w.rows() / g.num_basis(), w.cols())).expect("spline layer");
                    if (t.n_in(), t.n_out()) != (rows, cols) {
                        return Err(KanError::ShapeMismatch(format!(
                            "layer {li} tables are {}x{}, layer is {rows}x{cols}",
                            t.n_in(),
                            t.n_out()
                        )));
                    }
                }
                (QuantConfig::passthrough(), Path::Tables(set.clone()))
            }
        };
        let ranges = match (cfg.act_policy, cfg.bw_a) {
            (ActRangePolicy::CalibratedMinmax, bw) if bw != PASSTHROUGH_BITS => {
                let x = calibration.ok_or_else(|| {
                    KanError::InvalidArgument("calibrated-minmax needs calibration inputs".into())
                })?;
                Some(calibrate(model, x)?)
            }
            _ => None,
        };
        let basis_qp = if cfg.bw_b == PASSTHROUGH_BITS {
            QuantParams::passthrough()
        } else {
            compute_quant_params(0.0, 1.0, cfg.bw_b)?
        };
        let layers = model
            .layers()
            .iter()
            .enumerate()
            .map(|(li, layer)| {
                let Some((grid, w)) = layer_parts(layer) else {
                    return Ok(None);
                };
                let act = match (cfg.bw_a, cfg.act_policy) {
                    (PASSTHROUGH_BITS, _) => ActQuant::None,
                    (bw, ActRangePolicy::GridBounds) => ActQuant::Uniform(grid_bounds_params(grid, bw)?),
                    (bw, ActRangePolicy::CalibratedMinmax) => {
                        let (lo, hi) = ranges.as_ref().expect("calibrated above")[li];
                        ActQuant::Uniform(QuantParams::covering(lo, hi, bw)?)
                    }
                    (bw, ActRangePolicy::KnotLattice) => ActQuant::Lattice(KnotLattice::new(grid, bw)?),
                };
                let nb = grid.num_basis();
                let fq = FakeQuantBasis { qp: basis_qp };
                let memo = act.levels().map(|levels| {
                    let mut memo = vec![0.0; levels.len() * nb];
                    for (l, &x) in levels.iter().enumerate() {
                        fq.eval(grid, grid.clamp(x), &mut memo[l * nb..(l + 1) * nb]);
                    }
                    memo
                });
                Ok(Some(PreparedLayer {
                    grid: grid.clone(),
                    weights: fake_quant_weights(w, cfg.bw_w)?,
                    act,
                    basis_qp,
                    memo,
                }))
            })
            .collect::<Result<_>>()?;
        Ok(Self { model, layers, path })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.model.forward_with(x, self)
    }

    /// Argmax predictions, computed over row chunks in parallel.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..x.rows()).collect();
        let parts = idx
            .par_chunks(EVAL_CHUNK)
            .map(|c| Ok(argmax_rows(&self.forward(&x.select_rows(c))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.concat())
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.input_dim() != self.model.input_shape().len() {
            return Err(KanError::ShapeMismatch(format!(
                "model expects {} input features, dataset has {}",
                self.model.input_shape().len(),
                data.input_dim()
            )));
        }
        if data.is_empty() {
            return Err(KanError::EmptyInput("cannot evaluate on an empty dataset".into()));
        }
        let pred = self.predict(data.inputs())?;
        let correct = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / data.len() as f64)
    }
}

impl SplineKernel for PreparedModel<'_> {
    fn apply(&self, li: usize, input: &Matrix) -> Result<Matrix> {
        let layer = self.layers[li]
            .as_ref()
            .ok_or_else(|| KanError::InvalidArgument(format!("layer {li} has no splines")))?;
        match &self.path {
            Path::Recursive => layer.basis_matrix(input).matmul(&layer.weights),
            Path::Lut(lut) => lut_basis_matrix(input, &layer.grid, lut)?.matmul(&layer.weights),
            Path::Tables(set) => spline_table_forward(input, set.get(li).expect("checked at preparation")),
        }
    }
}

/// Top-1 accuracy of `model` on `data` under `mode`. The calibrated
/// activation policy needs [`PreparedModel::new`] with calibration inputs.
pub fn evaluate_accuracy(model: &Model, data: &Dataset, mode: &EvalMode) -> Result<f64> {
    PreparedModel::new(model, mode, None)?.accuracy(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, SyntheticKind};
    use crate::tabulation::build_bspline_lut;

    fn setup() -> (Model, Dataset) {
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let model = Model::kan_mlp(&[6, 5, 4], g, 4).unwrap();
        let data = synthetic_dataset(SyntheticKind::Blobs { dims: 6, classes: 4 }, 300, 3).unwrap();
        (model, data)
    }

    #[test]
    fn constant_predictor_on_single_class() {
        let g = GridSpec::new(3, 3, -1.0, 1.0).unwrap();
        let nb = g.num_basis();
        // output 1 is 1.0 everywhere (partition of unity), output 0 is 0
        let coeffs: Vec<f32> = (0..2 * nb * 2).map(|i| if i % 2 == 1 { 0.5 } else { 0.0 }).collect();
        let layer = crate::model::KanLinearLayer::new(2, 2, g.clone(), coeffs).unwrap();
        let model = Model::new(g, crate::model::Shape::Flat(2), vec![Layer::KanLinear(layer)]).unwrap();
        let inputs = Matrix::from_vec(5, 2, vec![0.1; 10]).unwrap();
        let data = Dataset::new("one", inputs, vec![1; 5], 2).unwrap();
        assert_eq!(evaluate_accuracy(&model, &data, &EvalMode::Fp32).unwrap(), 1.0);
    }

    #[test]
    fn passthrough_equals_fp32() {
        let (model, data) = setup();
        let a = PreparedModel::new(&model, &EvalMode::Fp32, None).unwrap();
        let b = PreparedModel::new(&model, &EvalMode::FakeQuant(QuantConfig::passthrough()), None).unwrap();
        assert_eq!(a.forward(data.inputs()).unwrap(), model.forward(data.inputs()).unwrap());
        assert_eq!(b.forward(data.inputs()).unwrap(), model.forward(data.inputs()).unwrap());
        assert_eq!(
            evaluate_accuracy(&model, &data, &EvalMode::Fp32).unwrap(),
            evaluate_accuracy(&model, &data, &EvalMode::FakeQuant(QuantConfig::passthrough())).unwrap()
        );
    }

    #[test]
    fn memoized_basis_matches_direct_evaluation() {
        let (model, data) = setup();
        let cfg = QuantConfig::new(6, 5, 4);
        let p = PreparedModel::new(&model, &EvalMode::FakeQuant(cfg), None).unwrap();
        let layer = p.layers[0].as_ref().unwrap();
        let direct = PreparedLayer {
            grid: layer.grid.clone(),
            weights: layer.weights.clone(),
            act: layer.act,
            basis_qp: layer.basis_qp,
            memo: None,
        };
        assert_eq!(layer.basis_matrix(data.inputs()), direct.basis_matrix(data.inputs()));
    }

    #[test]
    fn lut_predictions_equal_lattice_fake_quant() {
        let (model, data) = setup();
        for (k, h, bw_w) in [(2, 3, 32), (4, 8, 6), (8, 8, 32)] {
            let lut = build_bspline_lut(3, k, h).unwrap();
            let a = PreparedModel::new(&model, &EvalMode::BsplineLut { lut, bw_w }, None).unwrap();
            let cfg = QuantConfig::new(bw_w, k, h).with_policy(ActRangePolicy::KnotLattice);
            let b = PreparedModel::new(&model, &EvalMode::FakeQuant(cfg), None).unwrap();
            assert_eq!(a.forward(data.inputs()).unwrap(), b.forward(data.inputs()).unwrap());
        }
    }

    #[test]
    fn calibrated_policy_needs_data() {
        let (model, data) = setup();
        let cfg = QuantConfig::new(8, 8, 8).with_policy(ActRangePolicy::CalibratedMinmax);
        assert!(evaluate_accuracy(&model, &data, &EvalMode::FakeQuant(cfg)).is_err());
        let p = PreparedModel::new(&model, &EvalMode::FakeQuant(cfg), Some(data.inputs())).unwrap();
        let acc = p.accuracy(&data).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn spline_tables_track_fp32() {
        let (model, data) = setup();
        let set = SplineTableSet::build(&model, 8, 8).unwrap();
        let p = PreparedModel::new(&model, &EvalMode::SplineTable(set), None).unwrap();
        let got = p.forward(data.inputs()).unwrap();
        let want = model.forward(data.inputs()).unwrap();
        let max_err = got.as_slice().iter().zip(want.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err < 0.2, "max error {max_err}");
        let wrong = SplineTableSet::empty(2);
        assert!(PreparedModel::new(&model, &EvalMode::SplineTable(wrong), None).is_err());
    }

    #[test]
    fn errors() {
        let (model, data) = setup();
        let other = synthetic_dataset(SyntheticKind::Blobs { dims: 3, classes: 4 }, 10, 3).unwrap();
        assert!(matches!(evaluate_accuracy(&model, &other, &EvalMode::Fp32), Err(KanError::ShapeMismatch(_))));
        assert!(evaluate_accuracy(&model, &data.take(0), &EvalMode::Fp32).is_err());
        let lut = build_bspline_lut(2, 4, 8).unwrap();
        assert!(PreparedModel::new(&model, &EvalMode::BsplineLut { lut, bw_w: 8 }, None).is_err());
        assert!(PreparedModel::new(&model, &EvalMode::FakeQuant(QuantConfig::new(9, 8, 8)), None).is_err());
    }

    #[test]
    fn deterministic() {
        let (model, data) = setup();
        let mode = EvalMode::FakeQuant(QuantConfig::new(4, 4, 4));
        let a = evaluate_accuracy(&model, &data, &mode).unwrap();
        let b = evaluate_accuracy(&model, &data, &mode).unwrap();
        assert_eq!(a, b);
    }
}
