//! Bit-width sweeps: configuration enumeration, per-configuration accuracy
//! and cost, Pareto fronts and report files.

mod pareto;
pub mod plot;

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{bitops_kan, fp32_coeff_bits, lut_memory_bits, spline_table_bits, ArchDescriptor};
use crate::data::Dataset;
use crate::error::{KanError, Result};
use crate::eval::{EvalMode, PreparedModel};
use crate::model::Model;
use crate::quant::{ActRangePolicy, QuantConfig, MAX_BITS, PASSTHROUGH_BITS};
use crate::tabulation::{build_bspline_lut, SplineTableSet};

pub use pareto::{pareto_front, pareto_front_brute_force};

/// Default number of evaluation samples per configuration.
pub const DEFAULT_SUBSET: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    FakeQuant,
    BsplineLut,
    SplineTable,
}

impl SweepMode {
    pub fn name(self) -> &'static str {
        match self {
            SweepMode::FakeQuant => "fake-quant",
            SweepMode::BsplineLut => "bspline-lut",
            SweepMode::SplineTable => "spline-table",
        }
    }

    pub fn is_tabulated(self) -> bool {
        self != SweepMode::FakeQuant
    }
}

impl fmt::Display for SweepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SweepMode {
    type Err = KanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fake-quant" => Ok(Self::FakeQuant),
            "bspline-lut" => Ok(Self::BsplineLut),
            "spline-table" => Ok(Self::SplineTable),
            other => Err(KanError::InvalidArgument(format!(
                "unknown mode '{other}' (expected fake-quant, bspline-lut or spline-table)"
            ))),
        }
    }
}

fn default_modes() -> Vec<SweepMode> {
    vec![SweepMode::FakeQuant]
}

fn default_subset() -> Option<usize> {
    Some(DEFAULT_SUBSET)
}

fn default_policy() -> ActRangePolicy {
    ActRangePolicy::GridBounds
}

/// Everything a sweep needs, loadable from JSON. Paths are optional so a
/// caller can supply the model and data directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Label written in the `model` column.
    #[serde(default)]
    pub name: Option<String>,
    pub bw_w: Vec<u32>,
    pub bw_a: Vec<u32>,
    pub bw_b: Vec<u32>,
    #[serde(default = "default_modes")]
    pub modes: Vec<SweepMode>,
    /// Samples per evaluation; `None` uses the whole dataset.
    #[serde(default = "default_subset")]
    pub subset: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_policy")]
    pub act_policy: ActRangePolicy,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl SweepSpec {
    pub fn new(bw_w: Vec<u32>, bw_a: Vec<u32>, bw_b: Vec<u32>, modes: Vec<SweepMode>) -> Self {
        Self {
            model: None,
            data: None,
            name: None,
            bw_w,
            bw_a,
            bw_b,
            modes,
            subset: Some(DEFAULT_SUBSET),
            seed: 0,
            act_policy: ActRangePolicy::GridBounds,
            out: None,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| KanError::from(e).context(path.display().to_string()))?;
        Self::from_json(&s).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, set) in [("bw_W", &self.bw_w), ("bw_A", &self.bw_a), ("bw_B", &self.bw_b)] {
            if set.is_empty() {
                return Err(KanError::InvalidArgument(format!("{name} set is empty")));
            }
            if let Some(bad) = set.iter().find(|&&b| b != PASSTHROUGH_BITS && !(1..=MAX_BITS).contains(&b)) {
                return Err(KanError::InvalidArgument(format!("{name} contains unsupported bit-width {bad}")));
            }
        }
        if self.modes.is_empty() {
            return Err(KanError::InvalidArgument("mode set is empty".into()));
        }
        if self.subset == Some(0) {
            return Err(KanError::InvalidArgument("evaluation subset must be positive".into()));
        }
        Ok(())
    }
}

/// One point of the design space. For spline-table mode `bw_b` holds the
/// table value width `h` and `bw_w` is the passthrough sentinel; for
/// bspline-lut mode `bw_a` is the LUT addressing width `k` and `bw_b` its
/// value width `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SweepConfig {
    pub mode: SweepMode,
    pub bw_w: u32,
    pub bw_a: u32,
    pub bw_b: u32,
}

impl fmt::Display for SweepConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} W={} A={} B={}", self.mode, self.bw_w, self.bw_a, self.bw_b)
    }
}

fn dedup_sorted(v: &[u32]) -> Vec<u32> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Cartesian product of the bit-width sets for each mode, in a fixed
/// order (mode, then bw_W, bw_A, bw_B ascending). Tabulated modes skip
/// widths their tables cannot use, and spline-table mode ignores bw_W.
pub fn enumerate_configs(spec: &SweepSpec) -> Result<Vec<SweepConfig>> {
    spec.validate()?;
    let (ws, as_, bs) = (dedup_sorted(&spec.bw_w), dedup_sorted(&spec.bw_a), dedup_sorted(&spec.bw_b));
    let mut modes = spec.modes.clone();
    modes.sort_unstable();
    modes.dedup();
    let table_ok = |a: u32, h: u32| (1..=8).contains(&a) && (2..=8).contains(&h);
    let mut out = Vec::new();
    for mode in modes {
        match mode {
            SweepMode::FakeQuant | SweepMode::BsplineLut => {
                for &bw_w in &ws {
                    for &bw_a in &as_ {
                        for &bw_b in &bs {
                            if mode == SweepMode::BsplineLut && !table_ok(bw_a, bw_b) {
                                continue;
                            }
                            out.push(SweepConfig { mode, bw_w, bw_a, bw_b });
                        }
                    }
                }
            }
            SweepMode::SplineTable => {
                for &bw_a in &as_ {
                    for &bw_b in &bs {
                        if table_ok(bw_a, bw_b) {
                            out.push(SweepConfig {
                                mode,
                                bw_w: PASSTHROUGH_BITS,
                                bw_a,
                                bw_b,
                            });
                        }
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(KanError::InvalidArgument("no valid configurations in the sweep".into()));
    }
    Ok(out)
}

/// One report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub model: String,
    pub mode: SweepMode,
    #[serde(rename = "bw_W")]
    pub bw_w: u32,
    #[serde(rename = "bw_A")]
    pub bw_a: u32,
    #[serde(rename = "bw_B")]
    pub bw_b: u32,
    pub accuracy: f64,
    pub bitops: u64,
    pub lut_mem_bits: u64,
    pub spline_mem_bits: u64,
    pub fp32_coeff_bits: u64,
}

impl SweepPoint {
    pub fn config(&self) -> SweepConfig {
        SweepConfig {
            mode: self.mode,
            bw_w: self.bw_w,
            bw_a: self.bw_a,
            bw_b: self.bw_b,
        }
    }

    /// Table memory of tabulated configurations.
    pub fn memory_bits(&self) -> u64 {
        self.lut_mem_bits + self.spline_mem_bits
    }
}

/// Cost columns of a configuration at batch 1.
pub fn config_costs(arch: &ArchDescriptor, c: &SweepConfig) -> (u64, u64, u64) {
    match c.mode {
        SweepMode::FakeQuant => (bitops_kan(arch, c.bw_w, c.bw_a, c.bw_b, 1, false), 0, 0),
        SweepMode::BsplineLut => (
            bitops_kan(arch, c.bw_w, c.bw_a, c.bw_b, 1, true),
            lut_memory_bits(c.bw_a, c.bw_b, arch.degree),
            0,
        ),
        SweepMode::SplineTable => (0, 0, spline_table_bits(arch, c.bw_a, c.bw_b)),
    }
}

/// The evaluation mode realizing `c`.
pub fn eval_mode(model: &Model, c: &SweepConfig, policy: ActRangePolicy) -> Result<EvalMode> {
    Ok(match c.mode {
        SweepMode::FakeQuant => EvalMode::FakeQuant(QuantConfig::new(c.bw_w, c.bw_a, c.bw_b).with_policy(policy)),
        SweepMode::BsplineLut => EvalMode::BsplineLut {
            lut: build_bspline_lut(model.grid().degree(), c.bw_a, c.bw_b)?,
            bw_w: c.bw_w,
        },
        SweepMode::SplineTable => EvalMode::SplineTable(SplineTableSet::build(model, c.bw_a, c.bw_b)?),
    })
}

pub fn evaluate_config(
    model: &Model,
    name: &str,
    arch: &ArchDescriptor,
    data: &Dataset,
    c: &SweepConfig,
    policy: ActRangePolicy,
) -> Result<SweepPoint> {
    let mode = eval_mode(model, c, policy)?;
    let accuracy = PreparedModel::new(model, &mode, Some(data.inputs()))?.accuracy(data)?;
    let (bitops, lut_mem_bits, spline_mem_bits) = config_costs(arch, c);
    Ok(SweepPoint {
        model: name.to_string(),
        mode: c.mode,
        bw_w: c.bw_w,
        bw_a: c.bw_a,
        bw_b: c.bw_b,
        accuracy,
        bitops,
        lut_mem_bits,
        spline_mem_bits,
        fp32_coeff_bits: fp32_coeff_bits(arch),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// Indices into `points` of the accuracy/BitOps front.
    pub pareto_bitops: Vec<usize>,
    /// Indices into `points` of the accuracy/table-memory front, over the
    /// tabulated modes only.
    pub pareto_memory: Vec<usize>,
}

/// Front over BitOps (all points) and over table memory (tabulated points).
pub fn fronts(points: &[SweepPoint]) -> Result<(Vec<usize>, Vec<usize>)> {
    let bitops: Vec<(f64, f64)> = points.iter().map(|p| (p.accuracy, p.bitops as f64)).collect();
    let by_bitops = pareto_front(&bitops)?;
    let tab: Vec<usize> = (0..points.len()).filter(|&i| points[i].mode.is_tabulated()).collect();
    let by_memory = if tab.is_empty() {
        Vec::new()
    } else {
        let mem: Vec<(f64, f64)> = tab.iter().map(|&i| (points[i].accuracy, points[i].memory_bits() as f64)).collect();
        pareto_front(&mem)?.into_iter().map(|k| tab[k]).collect()
    };
    Ok((by_bitops, by_memory))
}

/// Evaluates every configuration of `spec` on `data` (or on its fixed-seed
/// subset). The calibrated activation policy calibrates on the evaluation
/// inputs.
pub fn run_sweep(model: &Model, name: &str, data: &Dataset, spec: &SweepSpec) -> Result<SweepReport> {
    let configs = enumerate_configs(spec)?;
    let eval_data = match spec.subset {
        Some(n) if n < data.len() => data.random_subset(n, spec.seed)?,
        Some(n) if n > data.len() => {
            return Err(KanError::InvalidArgument(format!(
                "evaluation subset {n} exceeds the {} available samples",
                data.len()
            )))
        }
        _ => data.clone(),
    };
    let arch = ArchDescriptor::from_model(name, model)?;
    let points = configs
        .par_iter()
        .map(|c| {
            let p = evaluate_config(model, name, &arch, &eval_data, c, spec.act_policy).map_err(|e| e.context(c.to_string()))?;
            log::debug!("{c}: accuracy {:.4}", p.accuracy);
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let (pareto_bitops, pareto_memory) = fronts(&points)?;
    Ok(SweepReport {
        points,
        pareto_bitops,
        pareto_memory,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = KanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(KanError::InvalidArgument(format!("unknown format '{other}' (csv or json)"))),
        }
    }
}

pub fn points_to_csv(points: &[SweepPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if points.is_empty() {
        w.write_record([
            "model", "mode", "bw_W", "bw_A", "bw_B", "accuracy", "bitops", "lut_mem_bits", "spline_mem_bits", "fp32_coeff_bits",
        ])?;
    }
    for p in points {
        w.serialize(p)?;
    }
    let bytes = w.into_inner().map_err(|e| KanError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_points_csv(path: impl AsRef<Path>) -> Result<Vec<SweepPoint>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| KanError::from(e).context(path.display().to_string()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<SweepPoint>, _>>()
        .map_err(|e| KanError::from(e).context(path.display().to_string()))
}

impl SweepReport {
    fn select(&self, idx: &[usize]) -> Vec<SweepPoint> {
        idx.iter().map(|&i| self.points[i].clone()).collect()
    }

    /// Writes the points and both fronts into `dir` and returns the paths.
    pub fn write(&self, dir: impl AsRef<Path>, format: OutputFormat) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        match format {
            OutputFormat::Csv => {
                for (file, pts) in [
                    ("sweep.csv", self.points.clone()),
                    ("pareto_bitops.csv", self.select(&self.pareto_bitops)),
                    ("pareto_memory.csv", self.select(&self.pareto_memory)),
                ] {
                    let p = dir.join(file);
                    std::fs::write(&p, points_to_csv(&pts)?)?;
                    written.push(p);
                }
            }
            OutputFormat::Json => {
                let p = dir.join("sweep.json");
                std::fs::write(&p, serde_json::to_string_pretty(self)?)?;
                written.push(p);
            }
        }
        Ok(written)
    }

    /// Writes the two SVG plots. Failures are logged and skipped.
    pub fn write_plots(&self, dir: impl AsRef<Path>) -> Vec<PathBuf> {
        write_plots(&self.points, dir)
    }
}

/// Accuracy-vs-BitOps and accuracy-vs-memory plots of `points`. Plotting
/// never fails the caller: errors become warnings.
pub fn write_plots(points: &[SweepPoint], dir: impl AsRef<Path>) -> Vec<PathBuf> {
    let dir = dir.as_ref();
    let mut written = Vec::new();
    if points.is_empty() {
        log::warn!("no points to plot");
        return written;
    }
    let (by_bitops, by_memory) = match fronts(points) {
        Ok(f) => f,
        Err(e) => {
            log::warn!("skipping plots: {e}");
            return written;
        }
    };
    let tabulated: Vec<SweepPoint> = points.iter().filter(|p| p.mode.is_tabulated()).cloned().collect();
    let tab_index: Vec<usize> = (0..points.len()).filter(|&i| points[i].mode.is_tabulated()).collect();
    let mem_front: Vec<usize> = by_memory
        .iter()
        .filter_map(|i| tab_index.iter().position(|t| t == i))
        .collect();
    let plots = [
        ("accuracy_vs_bitops.svg", plot::render_svg(points, &by_bitops, |p| p.bitops, "Accuracy vs BitOps", "BitOps (log)")),
        (
            "accuracy_vs_memory.svg",
            plot::render_svg(&tabulated, &mem_front, |p| p.memory_bits(), "Accuracy vs table memory", "table memory bits (log)"),
        ),
    ];
    if let Err(e) = std::fs::create_dir_all(dir) {
        log::warn!("cannot create {}: {e}", dir.display());
        return written;
    }
    for (file, svg) in plots {
        let p = dir.join(file);
        match std::fs::write(&p, svg) {
            Ok(()) => written.push(p),
            Err(e) => log::warn!("cannot write {}: {e}", p.display()),
        }
    }
    written
}
