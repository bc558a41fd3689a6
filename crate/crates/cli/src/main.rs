//! `kantize` command-line tool.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use kantize::cost::{Tabulation, BUILTIN_ARCHS};
use kantize::data::{load_mnist, resolve_data_dir, Split, DATA_DIR_ENV};
use kantize::explore::{
    fronts, points_to_csv, read_points_csv, run_sweep, write_plots, OutputFormat, SweepMode, SweepPoint, SweepSpec,
};
use kantize::model::{load_container, save_model, save_model_with_tables};
use kantize::tabulation::build_bspline_lut;
use kantize::{
    ActRangePolicy, ArchDescriptor, CostReport, Dataset, EvalMode, GridSpec, Model, PreparedModel, QuantConfig,
    SplineTableSet, TrainConfig, PASSTHROUGH_BITS,
};

#[derive(Parser)]
#[command(name = "kantize", version, about = "Quantize, tabulate and cost KAN models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a KAN on MNIST and save it.
    Train(TrainArgs),
    /// Accuracy under one or more inference configurations.
    Eval(EvalArgs),
    /// Analytic cost report for an architecture.
    Cost(CostArgs),
    /// Build a B-spline LUT or per-connection spline tables.
    Tabulate(TabulateArgs),
    /// Evaluate every bit-width configuration and write reports.
    Sweep(SweepArgs),
    /// Pareto front of a sweep CSV.
    Pareto(ParetoArgs),
    /// SVG plots of a sweep CSV.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Fp32,
    FakeQuant,
    BsplineLut,
    SplineTable,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Objective {
    Bitops,
    Memory,
}

#[derive(Args)]
struct BitWidths {
    /// Weight bit-widths (comma list; 32 keeps floats).
    #[arg(long = "bw-w", value_delimiter = ',')]
    bw_w: Option<Vec<u32>>,
    /// Activation bit-widths; LUT addressing bits in bspline-lut mode.
    #[arg(long = "bw-a", value_delimiter = ',')]
    bw_a: Option<Vec<u32>>,
    /// B-spline output bit-widths; table value bits in tabulated modes.
    #[arg(long = "bw-b", value_delimiter = ',')]
    bw_b: Option<Vec<u32>>,
}

impl BitWidths {
    fn or_passthrough(v: &Option<Vec<u32>>) -> Vec<u32> {
        v.clone().unwrap_or_else(|| vec![PASSTHROUGH_BITS])
    }

    fn triples(&self) -> Vec<(u32, u32, u32)> {
        let (ws, as_, bs) = (Self::or_passthrough(&self.bw_w), Self::or_passthrough(&self.bw_a), Self::or_passthrough(&self.bw_b));
        let mut out = Vec::new();
        for &w in &ws {
            for &a in &as_ {
                for &b in &bs {
                    out.push((w, a, b));
                }
            }
        }
        out
    }
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding MNIST IDX files (plain or gzipped).
    #[arg(long, env = DATA_DIR_ENV)]
    data: Option<PathBuf>,
    /// Random subset of this many samples.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OutArgs {
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// kanmlp1, kanmlp2 or lekan.
    #[arg(long, default_value = "kanmlp1")]
    arch: String,
    #[arg(long, default_value_t = 3)]
    grid: usize,
    #[arg(long, default_value_t = 3)]
    degree: usize,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Model file to write.
    #[arg(long, default_value = "model.kant")]
    out: PathBuf,
    /// Per-epoch loss curve as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "fp32")]
    mode: Mode,
    #[command(flatten)]
    bits: BitWidths,
    /// grid-bounds, calibrated-minmax or knot-lattice.
    #[arg(long, default_value = "grid-bounds")]
    act_policy: ActRangePolicy,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct CostArgs {
    /// Built-in name or descriptor JSON file.
    #[arg(long, conflicts_with = "model")]
    arch: Option<String>,
    /// Derive the descriptor from a model file.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "fake-quant")]
    mode: Mode,
    #[command(flatten)]
    bits: BitWidths,
    /// Batch size the costs are reported at.
    #[arg(long)]
    batch: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct TabulateArgs {
    #[arg(long, value_enum, default_value = "spline-table")]
    mode: Mode,
    /// Model to tabulate; for bspline-lut only its degree is used.
    #[arg(long)]
    model: Option<PathBuf>,
    /// B-spline degree for a LUT built without a model.
    #[arg(long, default_value_t = 3)]
    degree: usize,
    /// Activation bits (spline tables) or addressing bits k (LUT).
    #[arg(long = "bw-a")]
    bw_a: u32,
    /// Table value bits h.
    #[arg(long = "bw-b")]
    bw_b: u32,
    /// Model file with tables, or LUT JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON sweep specification; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Directory holding MNIST IDX files (plain or gzipped).
    #[arg(long, env = DATA_DIR_ENV)]
    data: Option<PathBuf>,
    /// Modes to sweep (comma list of fake-quant, bspline-lut, spline-table).
    #[arg(long, value_delimiter = ',')]
    mode: Option<Vec<SweepMode>>,
    #[command(flatten)]
    bits: BitWidths,
    /// Samples per evaluation (default 2000).
    #[arg(long, conflicts_with = "full")]
    subset: Option<usize>,
    /// Evaluate on the whole test set.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    act_policy: Option<ActRangePolicy>,
    /// Label for the model column.
    #[arg(long)]
    name: Option<String>,
    /// Report directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Skip the SVG plots.
    #[arg(long)]
    no_plots: bool,
}

#[derive(Args)]
struct ParetoArgs {
    /// Sweep CSV.
    input: PathBuf,
    #[arg(long, value_enum, default_value = "bitops")]
    objective: Objective,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct PlotArgs {
    /// Sweep CSV.
    input: PathBuf,
    /// Directory for the SVG files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Cost(a) => cost(a),
        Cmd::Tabulate(a) => tabulate(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Pareto(a) => pareto(a),
        Cmd::Plot(a) => plot(a),
    }
}

fn load_split(dir: Option<&Path>, split: Split, grid: &GridSpec) -> Result<Dataset> {
    let dir = resolve_data_dir(dir)?;
    load_mnist(&dir, split, grid.domain()).with_context(|| format!("loading {}", dir.display()))
}

fn subset(data: Dataset, n: Option<usize>, seed: u64) -> Result<Dataset> {
    match n {
        Some(n) if n < data.len() => Ok(data.random_subset(n, seed)?),
        Some(n) if n > data.len() => bail!("subset {n} exceeds the {} available samples", data.len()),
        _ => Ok(data),
    }
}

fn emit<T: Serialize>(rows: &[T], out: &OutArgs) -> Result<()> {
    let text = match out.format {
        Format::Json => serde_json::to_string_pretty(rows)? + "\n",
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r)?;
            }
            String::from_utf8(w.into_inner()?)?
        }
    };
    match &out.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let grid = GridSpec::new(a.grid, a.degree, -1.0, 1.0)?;
    let mut model = Model::builtin(&a.arch, grid, a.data.seed)?;
    let data = subset(load_split(a.data.data.as_deref(), Split::Train, model.grid())?, a.data.subset, a.data.seed)?;
    let cfg = TrainConfig {
        lr: a.lr,
        epochs: a.epochs,
        batch: a.batch,
        momentum: a.momentum,
        seed: a.data.seed,
    };
    log::info!("training {} on {} samples", a.arch, data.len());
    let report = kantize::train::train(&mut model, &data, &cfg)?;
    save_model(&model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.loss_csv {
        report.write_loss_csv(p)?;
    }
    println!(
        "loss {:.4} -> {:.4}, train accuracy {:.4}, saved {}",
        report.initial_loss,
        report.final_loss,
        report.train_accuracy,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    mode: &'static str,
    #[serde(rename = "bw_W")]
    bw_w: u32,
    #[serde(rename = "bw_A")]
    bw_a: u32,
    #[serde(rename = "bw_B")]
    bw_b: u32,
    samples: usize,
    accuracy: f64,
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, stored_tables) = load_container(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let data = subset(load_split(a.data.data.as_deref(), Split::Test, model.grid())?, a.data.subset, a.data.seed)?;
    let use_stored = a.mode == Mode::SplineTable && a.bits.bw_a.is_none() && a.bits.bw_b.is_none();
    let modes: Vec<(u32, EvalMode)> = match (&stored_tables, use_stored) {
        (Some(t), true) => vec![(PASSTHROUGH_BITS, EvalMode::SplineTable(t.clone()))],
        _ if a.mode == Mode::Fp32 => vec![(PASSTHROUGH_BITS, EvalMode::Fp32)],
        _ => a
            .bits
            .triples()
            .into_iter()
            .map(|(w, act, b)| {
                Ok(match a.mode {
                    Mode::Fp32 => unreachable!(),
                    Mode::FakeQuant => (w, EvalMode::FakeQuant(QuantConfig::new(w, act, b).with_policy(a.act_policy))),
                    Mode::BsplineLut => (
                        w,
                        EvalMode::BsplineLut {
                            lut: build_bspline_lut(model.grid().degree(), act, b)?,
                            bw_w: w,
                        },
                    ),
                    Mode::SplineTable => (PASSTHROUGH_BITS, EvalMode::SplineTable(SplineTableSet::build(&model, act, b)?)),
                })
            })
            .collect::<Result<_>>()?,
    };
    let mut rows = Vec::new();
    for (bw_w, mode) in modes {
        let accuracy = PreparedModel::new(&model, &mode, Some(data.inputs()))?.accuracy(&data)?;
        let (bw_a, bw_b) = match &mode {
            EvalMode::FakeQuant(q) => (q.bw_a, q.bw_b),
            EvalMode::BsplineLut { lut, .. } => (lut.k(), lut.h()),
            EvalMode::SplineTable(t) => t.iter().next().map_or((PASSTHROUGH_BITS, PASSTHROUGH_BITS), |(_, t)| (t.bw_a(), t.h())),
            EvalMode::Fp32 => (PASSTHROUGH_BITS, PASSTHROUGH_BITS),
        };
        rows.push(EvalRow {
            mode: mode.name(),
            bw_w,
            bw_a,
            bw_b,
            samples: data.len(),
            accuracy,
        });
    }
    emit(&rows, &a.out)
}

fn load_arch(a: &CostArgs) -> Result<ArchDescriptor> {
    if let Some(m) = &a.model {
        let (model, _) = load_container(m).with_context(|| format!("reading {}", m.display()))?;
        let name = m.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
        return Ok(ArchDescriptor::from_model(name, &model)?);
    }
    let Some(arch) = &a.arch else {
        bail!("give --arch (one of {}) or --model", BUILTIN_ARCHS.join(", "));
    };
    if Path::new(arch).is_file() {
        return Ok(ArchDescriptor::load(arch)?);
    }
    Ok(ArchDescriptor::builtin(arch)?)
}

#[derive(Serialize)]
struct CostRow {
    arch: String,
    mode: &'static str,
    #[serde(rename = "bw_W")]
    bw_w: u32,
    #[serde(rename = "bw_A")]
    bw_a: u32,
    #[serde(rename = "bw_B")]
    bw_b: u32,
    muls_matmul: u64,
    muls_bspline: u64,
    bitops: u64,
    lut_memory_bits: u64,
    spline_table_bits: u64,
    fp32_coeff_bits: u64,
    param_count: u64,
    fpga_lut_estimate: u64,
}

fn cost(a: CostArgs) -> Result<()> {
    let mut arch = load_arch(&a)?;
    if let Some(b) = a.batch {
        arch = arch.with_batch(b);
    }
    let triples = if a.mode == Mode::Fp32 {
        vec![(PASSTHROUGH_BITS, PASSTHROUGH_BITS, PASSTHROUGH_BITS)]
    } else {
        a.bits.triples()
    };
    let mut rows = Vec::new();
    for (w, act, b) in triples {
        let (mode, tab, w) = match a.mode {
            Mode::Fp32 => ("fp32", Tabulation::None, w),
            Mode::FakeQuant => ("fake-quant", Tabulation::None, w),
            Mode::BsplineLut => ("bspline-lut", Tabulation::Lut { k: act, h: b }, w),
            Mode::SplineTable => ("spline-table", Tabulation::SplineTable { bw_a: act, h: b }, PASSTHROUGH_BITS),
        };
        let r = CostReport::compute(&arch, w, act, b, tab);
        rows.push(CostRow {
            arch: arch.name.clone(),
            mode,
            bw_w: w,
            bw_a: act,
            bw_b: b,
            muls_matmul: r.muls_matmul,
            muls_bspline: r.muls_bspline,
            bitops: r.bitops,
            lut_memory_bits: r.lut_memory_bits,
            spline_table_bits: r.spline_table_bits,
            fp32_coeff_bits: r.fp32_coeff_bits,
            param_count: r.param_count,
            fpga_lut_estimate: r.fpga_lut_estimate,
        });
    }
    emit(&rows, &a.out)
}

fn tabulate(a: TabulateArgs) -> Result<()> {
    let model = match &a.model {
        Some(p) => Some(load_container(p).with_context(|| format!("reading {}", p.display()))?.0),
        None => None,
    };
    match a.mode {
        Mode::BsplineLut => {
            let degree = model.as_ref().map_or(a.degree, |m| m.grid().degree());
            let lut = build_bspline_lut(degree, a.bw_a, a.bw_b)?;
            std::fs::write(&a.out, serde_json::to_string_pretty(&lut)? + "\n")
                .with_context(|| format!("writing {}", a.out.display()))?;
            println!(
                "LUT P={degree} k={} h={}: {} entries, {} bits, written to {}",
                a.bw_a,
                a.bw_b,
                lut.entries().len(),
                lut.accounted_memory_bits(),
                a.out.display()
            );
        }
        Mode::SplineTable => {
            let Some(model) = model else {
                bail!("spline-table tabulation needs --model");
            };
            let tables = SplineTableSet::build(&model, a.bw_a, a.bw_b)?;
            save_model_with_tables(&model, Some(&tables), &a.out).with_context(|| format!("writing {}", a.out.display()))?;
            println!(
                "{} spline tables ({} bits), written to {}",
                tables.iter().map(|(_, t)| t.table_count()).sum::<usize>(),
                tables.stored_bits(),
                a.out.display()
            );
        }
        _ => bail!("tabulate supports --mode bspline-lut or spline-table"),
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SweepSpec::load(p)?,
        None => {
            let all = vec![2, 3, 4, 5, 6, 7, 8, 32];
            SweepSpec::new(all.clone(), all.clone(), all, vec![SweepMode::FakeQuant])
        }
    };
    if let Some(v) = a.bits.bw_w {
        spec.bw_w = v;
    }
    if let Some(v) = a.bits.bw_a {
        spec.bw_a = v;
    }
    if let Some(v) = a.bits.bw_b {
        spec.bw_b = v;
    }
    if let Some(m) = a.mode {
        spec.modes = m;
    }
    if a.full {
        spec.subset = None;
    } else if let Some(n) = a.subset {
        spec.subset = Some(n);
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(p) = a.act_policy {
        spec.act_policy = p;
    }
    for (field, v) in [(&mut spec.model, a.model), (&mut spec.data, a.data), (&mut spec.out, a.out)] {
        if v.is_some() {
            *field = v;
        }
    }
    if a.name.is_some() {
        spec.name = a.name;
    }
    let Some(model_path) = spec.model.clone() else {
        bail!("no model given (--model or the spec's \"model\" field)");
    };
    let (model, _) = load_container(&model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let name = spec
        .name
        .clone()
        .unwrap_or_else(|| model_path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()));
    let data = load_split(spec.data.as_deref(), Split::Test, model.grid())?;
    let out = spec.out.clone().unwrap_or_else(|| PathBuf::from("sweep-out"));
    let report = run_sweep(&model, &name, &data, &spec)?;
    let mut files = report.write(&out, a.format.into())?;
    if !a.no_plots {
        files.extend(report.write_plots(&out));
    }
    let best = report.points.iter().map(|p| p.accuracy).fold(f64::NEG_INFINITY, f64::max);
    println!(
        "{} configurations, best accuracy {best:.4}, BitOps front {} points, memory front {} points",
        report.points.len(),
        report.pareto_bitops.len(),
        report.pareto_memory.len()
    );
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn pareto(a: ParetoArgs) -> Result<()> {
    let points = read_points_csv(&a.input)?;
    if points.is_empty() {
        bail!("{} has no rows", a.input.display());
    }
    let (by_bitops, by_memory) = fronts(&points)?;
    let idx = match a.objective {
        Objective::Bitops => by_bitops,
        Objective::Memory => by_memory,
    };
    let front: Vec<SweepPoint> = idx.into_iter().map(|i| points[i].clone()).collect();
    match a.out.format {
        Format::Csv => {
            let text = points_to_csv(&front)?;
            match &a.out.out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Format::Json => emit(&front, &a.out),
    }
}

fn plot(a: PlotArgs) -> Result<()> {
    let points = read_points_csv(&a.input)?;
    let files = write_plots(&points, &a.out);
    if files.is_empty() {
        bail!("no plots written");
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
