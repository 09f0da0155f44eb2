//! Command-line surface.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "epwsim",
    version,
    about = "LiDAR EPW sensor model: data generation, model fitting, inference, evaluation, and a simulation-engine service"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VariantArg {
    Unet,
    UnetLf,
    Tiny,
    TinyLf,
    Cae,
    CaeLf,
}

impl VariantArg {
    pub fn to_core(self) -> epwsim_core::net::Variant {
        use epwsim_core::net::Variant;
        match self {
            VariantArg::Unet => Variant::Unet,
            VariantArg::UnetLf => Variant::UnetLf,
            VariantArg::Tiny => Variant::TinyUnet,
            VariantArg::TinyLf => Variant::TinyUnetLf,
            VariantArg::Cae => Variant::Cae,
            VariantArg::CaeLf => Variant::CaeLf,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackendArg {
    Net,
    Lut,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Argmax,
    Sample,
}

impl ModeArg {
    pub fn to_core(self) -> epwsim_core::select::SelectionMode {
        match self {
            ModeArg::Argmax => epwsim_core::select::SelectionMode::Argmax,
            ModeArg::Sample => epwsim_core::select::SelectionMode::Sample,
        }
    }
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate synthetic dense frames with ground-truth scans.
    GenData {
        /// Number of frames to generate.
        #[arg(long)]
        frames: u64,
        /// Output directory (dense.jsonl + truth.csv).
        #[arg(long)]
        out: PathBuf,
        /// Sensor-spec JSON; defaults to the built-in 16x1160 scanner.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit the lookup-table EPW model and the echo-occurrence histogram.
    FitLut {
        /// Dataset directory produced by gen-data.
        #[arg(long = "in")]
        input: PathBuf,
        /// Model directory (epw.lut, echo.ehst, lut_report.csv).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train per-echo EPW networks.
    Train {
        /// Dataset directory produced by gen-data.
        #[arg(long = "in")]
        input: PathBuf,
        /// Model directory for the checkpoints.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = VariantArg::Unet)]
        variant: VariantArg,
        #[arg(long, default_value_t = 350)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        lr: f64,
        #[arg(long, default_value_t = 1e-4)]
        lambda: f64,
        #[arg(long, default_value_t = 20)]
        patience: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the full sensor model over dense frames and emit a scan CSV.
    Infer {
        /// Dense-frame JSON-lines file; stdin when omitted.
        input: Option<PathBuf>,
        /// Model directory (from fit-lut and/or train).
        #[arg(long = "in")]
        model: PathBuf,
        /// Output scan CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = VariantArg::Unet)]
        variant: VariantArg,
        #[arg(long, value_enum, default_value_t = BackendArg::Net)]
        backend: BackendArg,
        #[arg(long, value_enum, default_value_t = ModeArg::Argmax)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare two scan traces with the statistical KPI suite.
    Evaluate {
        /// Reference scan CSV.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Predicted scan CSV.
        #[arg(long)]
        pred: PathBuf,
        /// Oriented-box pairs JSON for box-to-box KPIs.
        #[arg(long)]
        boxes: Option<PathBuf>,
        /// Report path stem; stdout JSON when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Benchmark all six network variants (MSE, accuracy, latency).
    Bench {
        /// Model directory holding <variant>-echo0.ckpt for every variant.
        #[arg(long = "in")]
        model: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Forward-pass repetitions for the latency median.
        #[arg(long, default_value_t = 20)]
        frames: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the sensor model over newline-delimited JSON on TCP.
    Serve {
        #[arg(long)]
        port: u16,
        /// Model directory (from fit-lut and/or train).
        #[arg(long = "in")]
        model: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = VariantArg::Unet)]
        variant: VariantArg,
        #[arg(long, value_enum, default_value_t = BackendArg::Net)]
        backend: BackendArg,
        #[arg(long, value_enum, default_value_t = ModeArg::Argmax)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}
