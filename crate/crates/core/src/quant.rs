//! Uniform affine integer quantization.
//!
//! A real range `[alpha, beta]` maps onto the unsigned integer range
//! `[0, 2^bw - 1]` with scale `s = (beta - alpha) / (q_hi - q_lo)` and zero
//! point `z = round((beta*q_lo - alpha*q_hi) / (beta - alpha))`. Values are
//! quantized as `clip(round(x/s + z), q_lo, q_hi)` and dequantized as
//! `s * (x_q - z)`. Rounding is half away from zero throughout.

use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};

/// Bit-width sentinel meaning "leave this tensor in floating point".
pub const PASSTHROUGH_BITS: u32 = 32;

/// Largest integer bit-width the quantizer produces.
pub const MAX_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i64,
    pub bw: u32,
    pub q_lo: i64,
    pub q_hi: i64,
}

impl QuantParams {
    /// The identity mapping (`bw = 32`).
    pub fn passthrough() -> Self {
        Self {
            scale: 1.0,
            zero_point: 0,
            bw: PASSTHROUGH_BITS,
            q_lo: i64::MIN,
            q_hi: i64::MAX,
        }
    }

    #[inline]
    pub fn is_passthrough(&self) -> bool {
        self.bw == PASSTHROUGH_BITS
    }

    /// Parameters for a range that is first widened to contain zero, so the
    /// zero point is always representable. An all-zero range maps onto
    /// `[0, 1]`.
    pub fn covering(alpha: f64, beta: f64, bw: u32) -> Result<Self> {
        if bw == PASSTHROUGH_BITS {
            return Ok(Self::passthrough());
        }
        let lo = alpha.min(0.0);
        let mut hi = beta.max(0.0);
        if lo == hi {
            hi = 1.0;
        }
        compute_quant_params(lo, hi, bw)
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> i64 {
        quantize_value(x, self)
    }

    #[inline]
    pub fn dequantize(&self, x_q: i64) -> f64 {
        dequantize_value(x_q, self)
    }

    /// `dequantize(quantize(x))`, or `x` itself for the passthrough sentinel.
    #[inline]
    pub fn fake_quant(&self, x: f64) -> f64 {
        if self.is_passthrough() {
            x
        } else {
            self.dequantize(self.quantize(x))
        }
    }

    /// Number of representable levels.
    pub fn levels(&self) -> u64 {
        (self.q_hi - self.q_lo) as u64 + 1
    }
}

fn check_bits(bw: u32) -> Result<()> {
    if (1..=MAX_BITS).contains(&bw) {
        Ok(())
    } else {
        Err(KanError::InvalidArgument(format!(
            "bit-width must be in 1..={MAX_BITS}, got {bw}"
        )))
    }
}

/// Scale and zero point for the range `[alpha, beta]` at `bw` bits.
///
/// Fails when the range is degenerate or when the zero point falls outside
/// the integer range (the range does not contain zero); use
/// [`QuantParams::covering`] to widen such ranges.
pub fn compute_quant_params(alpha: f64, beta: f64, bw: u32) -> Result<QuantParams> {
    check_bits(bw)?;
    if !(alpha.is_finite() && beta.is_finite()) || beta <= alpha {
        return Err(KanError::InvalidArgument(format!(
            "degenerate quantization range [{alpha}, {beta}]"
        )));
    }
    let q_lo = 0i64;
    let q_hi = (1i64 << bw) - 1;
    let scale = (beta - alpha) / (q_hi - q_lo) as f64;
    let zero_point = ((beta * q_lo as f64 - alpha * q_hi as f64) / (beta - alpha)).round() as i64;
    if zero_point < q_lo || zero_point > q_hi {
        return Err(KanError::InvalidArgument(format!(
            "range [{alpha}, {beta}] does not contain zero (zero point {zero_point})"
        )));
    }
    Ok(QuantParams {
        scale,
        zero_point,
        bw,
        q_lo,
        q_hi,
    })
}

#[inline]
pub fn quantize_value(x: f64, qp: &QuantParams) -> i64 {
    let v = (x / qp.scale + qp.zero_point as f64).round();
    if v.is_nan() {
        return qp.zero_point;
    }
    (v.clamp(qp.q_lo as f64, qp.q_hi as f64)) as i64
}

#[inline]
pub fn dequantize_value(x_q: i64, qp: &QuantParams) -> f64 {
    qp.scale * (x_q - qp.zero_point) as f64
}

/// Element-wise `dequantize(quantize(x))`.
pub fn fake_quant_tensor(t: &[f64], qp: &QuantParams) -> Vec<f64> {
    t.iter().map(|&x| qp.fake_quant(x)).collect()
}

pub fn fake_quant_in_place(t: &mut [f64], qp: &QuantParams) {
    if qp.is_passthrough() {
        return;
    }
    for x in t {
        *x = qp.fake_quant(*x);
    }
}

/// Running min/max over a stream of tensors.
#[derive(Debug, Clone, Default)]
pub struct RangeCalibrator {
    min: f64,
    max: f64,
    count: usize,
}

impl RangeCalibrator {
    pub fn new() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            count: 0,
        }
    }

    pub fn observe(&mut self, tensor: &[f64]) {
        for &x in tensor {
            if x.is_nan() {
                continue;
            }
            self.min = self.min.min(x);
            self.max = self.max.max(x);
            self.count += 1;
        }
    }

    /// Combines two partial calibrations.
    pub fn merge(&mut self, other: &RangeCalibrator) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count += other.count;
    }

    /// The observed range. A constant stream is an error unless
    /// `widen_degenerate` is set, in which case the range is widened by a
    /// few ulps on both sides.
    pub fn finish(&self, widen_degenerate: bool) -> Result<(f64, f64)> {
        if self.count == 0 {
            return Err(KanError::EmptyInput("calibration stream is empty".into()));
        }
        if self.min == self.max {
            if !widen_degenerate {
                return Err(KanError::InvalidArgument(format!(
                    "degenerate calibration range: every value equals {}",
                    self.min
                )));
            }
            let eps = self.min.abs().max(1.0) * f64::EPSILON;
            return Ok((self.min - eps, self.max + eps));
        }
        Ok((self.min, self.max))
    }
}

/// Min/max over all elements of all tensors in the stream.
pub fn calibrate_range<'a, I>(stream: I) -> Result<(f64, f64)>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut cal = RangeCalibrator::new();
    for t in stream {
        cal.observe(t);
    }
    cal.finish(false)
}

/// How the activation range of each layer is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActRangePolicy {
    /// Uniform quantization over the interior grid bounds; no calibration.
    GridBounds,
    /// Uniform quantization over per-layer min/max of calibration data.
    CalibratedMinmax,
    /// Fixed-point lattice with `2^bw_a` levels per knot interval, aligned to
    /// the knots. This is the addressing used by the B-spline LUT.
    KnotLattice,
}

impl std::str::FromStr for ActRangePolicy {
    type Err = KanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid-bounds" => Ok(Self::GridBounds),
            "calibrated-minmax" => Ok(Self::CalibratedMinmax),
            "knot-lattice" => Ok(Self::KnotLattice),
            other => Err(KanError::InvalidArgument(format!("unknown range policy '{other}'"))),
        }
    }
}

/// Model-wide bit-widths for weights, activations and B-spline outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bw_w: u32,
    pub bw_a: u32,
    pub bw_b: u32,
    pub act_policy: ActRangePolicy,
}

impl QuantConfig {
    pub fn new(bw_w: u32, bw_a: u32, bw_b: u32) -> Self {
        Self {
            bw_w,
            bw_a,
            bw_b,
            act_policy: ActRangePolicy::GridBounds,
        }
    }

    /// All three tensors left in floating point.
    pub fn passthrough() -> Self {
        Self::new(PASSTHROUGH_BITS, PASSTHROUGH_BITS, PASSTHROUGH_BITS)
    }

    pub fn with_policy(mut self, policy: ActRangePolicy) -> Self {
        self.act_policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |bw: u32, min: u32| bw == PASSTHROUGH_BITS || (min..=MAX_BITS).contains(&bw);
        let a_min = if self.act_policy == ActRangePolicy::KnotLattice { 1 } else { 2 };
        if !ok(self.bw_w, 2) || !ok(self.bw_a, a_min) || !ok(self.bw_b, 2) {
            return Err(KanError::InvalidArgument(format!(
                "bit-widths must be in {{2..8, 32}}, got W={} A={} B={}",
                self.bw_w, self.bw_a, self.bw_b
            )));
        }
        Ok(())
    }
}
