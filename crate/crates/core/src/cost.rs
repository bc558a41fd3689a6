//! Analytic multiplication counts, BitOps, memory and parameter counts,
//! computed from architecture descriptors without instantiating weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};
use crate::model::{Layer, Model, Shape};

/// LUTs of the largest FPGA considered for per-connection tabulation
/// (a Virtex UltraScale+ VU13P).
pub const FPGA_DEVICE_LUTS: u64 = 1_728_000;

/// FPGA LUTs needed per tabulated connection.
pub const FPGA_LUTS_PER_CONNECTION: u64 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        n_in: u64,
        n_out: u64,
    },
    Conv {
        c_in: u64,
        c_out: u64,
        kernel: u64,
        h_out: u64,
        w_out: u64,
    },
}

impl LayerSpec {
    /// Learned univariate functions in the layer.
    pub fn connections(&self) -> u64 {
        match *self {
            LayerSpec::Linear { n_in, n_out } => n_in * n_out,
            LayerSpec::Conv {
                c_in, c_out, kernel, ..
            } => kernel * kernel * c_in * c_out,
        }
    }

    /// `(N_in, N_out)` of the matmul-form counts; conv layers use
    /// `N_in = K²·C_in·H_out·W_out` and `N_out = C_out`.
    pub fn effective_dims(&self) -> (u64, u64) {
        match *self {
            LayerSpec::Linear { n_in, n_out } => (n_in, n_out),
            LayerSpec::Conv {
                c_in,
                c_out,
                kernel,
                h_out,
                w_out,
            } => (kernel * kernel * c_in * h_out * w_out, c_out),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Linear { n_in, n_out } => n_in > 0 && n_out > 0,
            LayerSpec::Conv {
                c_in,
                c_out,
                kernel,
                h_out,
                w_out,
            } => c_in > 0 && c_out > 0 && kernel > 0 && h_out > 0 && w_out > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(KanError::InvalidArgument(format!("layer {self:?} has a zero dimension")))
        }
    }
}

fn default_batch() -> u64 {
    1
}

/// Layer dimensions plus the shared grid size `G`, degree `P` and batch `M`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub name: String,
    pub grid_size: u64,
    pub degree: u64,
    #[serde(default = "default_batch")]
    pub batch: u64,
    pub layers: Vec<LayerSpec>,
}

/// Names of the built-in descriptors.
pub const BUILTIN_ARCHS: [&str; 6] = ["kanmlp1", "kanmlp2", "lekan", "cnn3", "cnn4", "reskan18"];

fn conv(c_in: u64, c_out: u64, kernel: u64, spatial: u64) -> LayerSpec {
    LayerSpec::Conv {
        c_in,
        c_out,
        kernel,
        h_out: spatial,
        w_out: spatial,
    }
}

impl ArchDescriptor {
    pub fn new(name: impl Into<String>, grid_size: u64, degree: u64, layers: Vec<LayerSpec>) -> Result<Self> {
        let a = Self {
            name: name.into(),
            grid_size,
            degree,
            batch: 1,
            layers,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn with_batch(mut self, batch: u64) -> Self {
        self.batch = batch;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(KanError::InvalidArgument("grid size must be positive".into()));
        }
        self.layers.iter().try_for_each(LayerSpec::validate)
    }

    /// `G + P`.
    pub fn basis_count(&self) -> u64 {
        self.grid_size + self.degree
    }

    pub fn connections(&self) -> u64 {
        self.layers.iter().map(LayerSpec::connections).sum()
    }

    /// Descriptor of an instantiated model; conv output sizes come from the
    /// model's shape inference.
    pub fn from_model(name: impl Into<String>, model: &Model) -> Result<Self> {
        let shapes = model.shapes()?;
        let mut layers = Vec::new();
        for (i, layer) in model.layers().iter().enumerate() {
            match layer {
                Layer::KanLinear(l) => layers.push(LayerSpec::Linear {
                    n_in: l.n_in() as u64,
                    n_out: l.n_out() as u64,
                }),
                Layer::ConvKan(c) => {
                    let Shape::Image { height, width, .. } = shapes[i + 1] else {
                        unreachable!("conv layers produce images")
                    };
                    layers.push(LayerSpec::Conv {
                        c_in: c.c_in() as u64,
                        c_out: c.c_out() as u64,
                        kernel: c.kernel() as u64,
                        h_out: height as u64,
                        w_out: width as u64,
                    });
                }
                Layer::MaxPool { .. } | Layer::Flatten => {}
            }
        }
        let g = model.grid();
        Self::new(name, g.intervals() as u64, g.degree() as u64, layers)
    }

    /// Built-in descriptors, all at `G = 3`, `P = 3`, batch 1.
    pub fn builtin(name: &str) -> Result<Self> {
        let layers = match name.to_ascii_lowercase().as_str() {
            "kanmlp1" => vec![LayerSpec::Linear { n_in: 784, n_out: 10 }],
            "kanmlp2" => vec![
                LayerSpec::Linear { n_in: 784, n_out: 64 },
                LayerSpec::Linear { n_in: 64, n_out: 10 },
            ],
            "lekan" => vec![
                conv(1, 6, 5, 28),
                conv(6, 16, 5, 10),
                LayerSpec::Linear { n_in: 400, n_out: 10 },
            ],
            "cnn3" => vec![conv(3, 32, 3, 32), conv(32, 64, 3, 16), conv(64, 128, 3, 8)],
            "cnn4" => vec![
                conv(3, 32, 3, 32),
                conv(32, 64, 3, 16),
                conv(64, 128, 3, 8),
                conv(128, 512, 3, 8),
            ],
            "reskan18" => reskan18_layers(),
            other => {
                return Err(KanError::InvalidArgument(format!(
                    "unknown architecture '{other}' (expected one of {BUILTIN_ARCHS:?})"
                )))
            }
        };
        Self::new(name.to_ascii_lowercase(), 3, 3, layers)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(s)?;
        a.validate()?;
        Ok(a)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| KanError::from(e).context(path.display().to_string()))?;
        Self::from_json(&s).map_err(|e| e.context(path.display().to_string()))
    }
}

// 32x32 input: 7x7/2 stem to 16x16, 2x2 max-pool to 8x8, then four stages
// of two basic blocks at 8, 4, 2, 1 with 1x1 projection shortcuts.
fn reskan18_layers() -> Vec<LayerSpec> {
    let mut l = vec![conv(3, 64, 7, 16)];
    let stages = [(64, 64, 8), (64, 128, 4), (128, 256, 2), (256, 512, 1)];
    for (c_in, c_out, s) in stages {
        l.push(conv(c_in, c_out, 3, s));
        l.push(conv(c_out, c_out, 3, s));
        if c_in != c_out {
            l.push(conv(c_in, c_out, 1, s));
        }
        l.push(conv(c_out, c_out, 3, s));
        l.push(conv(c_out, c_out, 3, s));
    }
    l.push(LayerSpec::Linear { n_in: 512, n_out: 10 });
    l
}

/// Multiplications of one layer: `(matmul, bspline)`.
pub fn layer_mul_counts(layer: &LayerSpec, g: u64, p: u64, batch: u64) -> (u64, u64) {
    let (n_in, n_out) = layer.effective_dims();
    let matmul = batch * n_out * n_in * (g + p);
    let nodes = p * (g + 2 * p) - p * p.saturating_sub(1) / 2;
    (matmul, 4 * batch * n_in * nodes)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct MulCounts {
    pub per_layer: Vec<(u64, u64)>,
    pub matmul: u64,
    pub bspline: u64,
}

pub fn mul_counts(arch: &ArchDescriptor, batch: u64) -> MulCounts {
    let per_layer: Vec<(u64, u64)> = arch
        .layers
        .iter()
        .map(|l| layer_mul_counts(l, arch.grid_size, arch.degree, batch))
        .collect();
    MulCounts {
        matmul: per_layer.iter().map(|c| c.0).sum(),
        bspline: per_layer.iter().map(|c| c.1).sum(),
        per_layer,
    }
}

/// `matmul·bw_B·bw_W + bspline·bw_A²`; the recursion term is dropped when
/// the basis is tabulated.
pub fn bitops_kan(arch: &ArchDescriptor, bw_w: u32, bw_a: u32, bw_b: u32, batch: u64, tabulated: bool) -> u64 {
    let c = mul_counts(arch, batch);
    let rec = if tabulated { 0 } else { c.bspline * (bw_a as u64).pow(2) };
    c.matmul * bw_b as u64 * bw_w as u64 + rec
}

/// BitOps of the equivalent MLP, `Σ M·N_out·N_in·bw_A·bw_W`.
pub fn bitops_mlp(arch: &ArchDescriptor, bw_w: u32, bw_a: u32, batch: u64) -> u64 {
    arch.layers
        .iter()
        .map(|l| {
            let (n_in, n_out) = l.effective_dims();
            batch * n_out * n_in
        })
        .sum::<u64>()
        * bw_a as u64
        * bw_w as u64
}

/// `2^k · ceil((P+1)/2) · h`.
pub fn lut_memory_bits(k: u32, h: u32, degree: u64) -> u64 {
    (1u64 << k) * (degree + 1).div_ceil(2) * h as u64
}

/// `Σ connections · 2^bw_A · h`.
pub fn spline_table_bits(arch: &ArchDescriptor, bw_a: u32, h: u32) -> u64 {
    arch.connections() * (1u64 << bw_a) * h as u64
}

/// `Σ connections · (G+P) · 32`.
pub fn fp32_coeff_bits(arch: &ArchDescriptor) -> u64 {
    param_count(arch) * 32
}

/// `Σ connections · (G+P)`.
pub fn param_count(arch: &ArchDescriptor) -> u64 {
    arch.connections() * arch.basis_count()
}

pub fn fpga_lut_estimate(arch: &ArchDescriptor) -> u64 {
    FPGA_LUTS_PER_CONNECTION * arch.connections()
}

/// How the B-spline stage is realized when costing a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Tabulation {
    /// Recursive evaluation.
    None,
    /// Shared B-spline LUT with `k` addressing bits and `h`-bit values.
    Lut { k: u32, h: u32 },
    /// Per-connection spline tables; no multiplications remain.
    SplineTable { bw_a: u32, h: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub muls_matmul: u64,
    pub muls_bspline: u64,
    pub bitops: u64,
    pub lut_memory_bits: u64,
    pub spline_table_bits: u64,
    pub fp32_coeff_bits: u64,
    pub param_count: u64,
    pub fpga_lut_estimate: u64,
}

impl CostReport {
    /// Costs at the descriptor's batch size for one bit-width triple.
    pub fn compute(arch: &ArchDescriptor, bw_w: u32, bw_a: u32, bw_b: u32, tab: Tabulation) -> Self {
        let c = mul_counts(arch, arch.batch);
        let (bitops, lut_memory_bits, spline_table_bits) = match tab {
            Tabulation::None => (bitops_kan(arch, bw_w, bw_a, bw_b, arch.batch, false), 0, 0),
            Tabulation::Lut { k, h } => (
                bitops_kan(arch, bw_w, bw_a, bw_b, arch.batch, true),
                lut_memory_bits(k, h, arch.degree),
                0,
            ),
            Tabulation::SplineTable { bw_a, h } => (0, 0, spline_table_bits(arch, bw_a, h)),
        };
        Self {
            muls_matmul: c.matmul,
            muls_bspline: c.bspline,
            bitops,
            lut_memory_bits,
            spline_table_bits,
            fp32_coeff_bits: fp32_coeff_bits(arch),
            param_count: param_count(arch),
            fpga_lut_estimate: fpga_lut_estimate(arch),
        }
    }
}
