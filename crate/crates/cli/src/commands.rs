//! Offline subcommand implementations.

use crate::cli::{BackendArg, ModeArg, VariantArg};
use crate::model::{checkpoint_name, ModelBundle, HIST_FILE, LUT_FILE};
use epwsim_core::eval::{
    full_report, hist_to_gnuplot, report_to_csv, report_to_json, KpiReport, OrientedBox,
};
use epwsim_core::lut::{fit_lut, lut_report, write_lut_path, LutBins};
use epwsim_core::net::{
    bench, make_training_set, read_checkpoint_path, train, write_checkpoint_path, TrainConfig,
    Variant,
};
use epwsim_core::pgm::{
    read_scan_csv_path, write_scan_csv_path, ScanFrame, SensorSpec,
};
use epwsim_core::scene::{
    make_dataset, read_dense_jsonl, read_dense_jsonl_path, write_dense_jsonl_path, CastOptions,
    SceneConfig, DEFAULT_CLUSTER_GAP_M,
};
use epwsim_core::select::{fit_echo_hist, EchoHistBins};
use epwsim_core::{DenseFrame, EpwNetwork, Error, Result};
use serde::Deserialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub fn load_spec(path: &Option<PathBuf>) -> Result<SensorSpec<f64>> {
    let spec = match path {
        None => SensorSpec::default(),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("sensor spec {}: {e}", p.display())))?
        }
    };
    spec.validate()?;
    Ok(spec)
}

pub fn dense_file(dir: &Path) -> PathBuf {
    dir.join("dense.jsonl")
}

pub fn truth_file(dir: &Path) -> PathBuf {
    dir.join("truth.csv")
}

pub fn gen_data(frames: u64, out: &Path, spec: &Option<PathBuf>, seed: u64) -> Result<()> {
    if frames == 0 {
        return Err(Error::Config("--frames must be >= 1".into()));
    }
    let spec = load_spec(spec)?;
    fs::create_dir_all(out)?;
    let config = SceneConfig::<f64>::default();
    let opts = CastOptions::default();
    // make_dataset wants a validation split; fold everything into one trace.
    let (mut pairs, val) = if frames == 1 {
        let (t, mut v) = make_dataset(&config, &spec, &opts, 1, 1, seed)?;
        v.clear();
        (t, v)
    } else {
        make_dataset(&config, &spec, &opts, frames as usize - 1, 1, seed)?
    };
    pairs.extend(val);
    let dense: Vec<DenseFrame> = pairs.iter().map(|p| p.0.clone()).collect();
    let truth: Vec<ScanFrame<f64>> = pairs.iter().map(|p| p.1.clone()).collect();
    write_dense_jsonl_path(&dense, &dense_file(out))?;
    write_scan_csv_path(&truth, &truth_file(out))?;
    eprintln!("wrote {} frames to {}", pairs.len(), out.display());
    Ok(())
}

fn load_pairs(dir: &Path, spec: &SensorSpec<f64>) -> Result<Vec<(DenseFrame, ScanFrame<f64>)>> {
    let dense = read_dense_jsonl_path::<f64>(&dense_file(dir))?;
    let truth = read_scan_csv_path::<f64>(&truth_file(dir))?;
    let mut truth_by_id: std::collections::BTreeMap<u64, ScanFrame<f64>> =
        truth.into_iter().map(|f| (f.frame_id, f)).collect();
    let mut pairs = Vec::with_capacity(dense.len());
    for d in dense {
        for ray in &d.rays {
            if ray.layer as usize >= spec.rows() || ray.az as usize >= spec.cols() {
                return Err(Error::Data(format!(
                    "ray ({}, {}) outside the sensor grid; wrong --spec?",
                    ray.layer, ray.az
                )));
            }
        }
        let t = truth_by_id
            .remove(&d.frame_id)
            .ok_or_else(|| Error::Data(format!("frame {} missing from truth.csv", d.frame_id)))?;
        pairs.push((d, t));
    }
    Ok(pairs)
}

pub fn fit_lut_cmd(input: &Path, out: &Path, spec_path: &Option<PathBuf>) -> Result<()> {
    let spec = load_spec(spec_path)?;
    let pairs = load_pairs(input, &spec)?;
    let truth: Vec<ScanFrame<f64>> = pairs.iter().map(|p| p.1.clone()).collect();
    let bins = LutBins::default_for(&spec)?;
    let lut = fit_lut(&truth, &bins, &spec)?;
    let hist = fit_echo_hist(&pairs, &EchoHistBins::default_for(&spec), &spec, DEFAULT_CLUSTER_GAP_M)?;
    fs::create_dir_all(out)?;
    write_lut_path(&lut, &out.join(LUT_FILE))?;
    epwsim_core::select::write_echo_hist_path(&hist, &out.join(HIST_FILE))?;
    fs::write(out.join("lut_report.csv"), lut_report(&lut))?;
    eprintln!(
        "fitted lookup table ({} non-empty bins) and echo histogram into {}",
        lut.non_empty_bins(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train_cmd(
    input: &Path,
    out: &Path,
    spec_path: &Option<PathBuf>,
    variant: VariantArg,
    epochs: usize,
    batch: usize,
    lr: f64,
    lambda: f64,
    patience: usize,
    seed: u64,
) -> Result<()> {
    let spec = load_spec(spec_path)?;
    let variant = variant.to_core();
    let pairs = load_pairs(input, &spec)?;
    if pairs.len() < 2 {
        return Err(Error::Config("training needs at least 2 frames".into()));
    }
    // Last fifth (at least one frame) validates; the rest trains.
    let n_val = (pairs.len() / 5).max(1);
    let split = pairs.len() - n_val;
    fs::create_dir_all(out)?;
    for echo in 0..3u8 {
        let train_set = make_training_set(&pairs[..split], &spec, echo)?;
        let val_set = make_training_set(&pairs[split..], &spec, echo)?;
        let cfg = TrainConfig {
            batch_size: batch,
            learning_rate: lr,
            max_epochs: epochs,
            lambda,
            patience,
            seed: epwsim_core::seed::derive(seed, &[echo as u64]),
        };
        let mut net: EpwNetwork =
            epwsim_core::net::build_network(variant, 16, epwsim_core::seed::derive(seed, &[7, echo as u64]))?;
        let history = train(&mut net, &train_set, &val_set, &cfg)?;
        let best = history
            .iter()
            .map(|e| e.val_l1)
            .fold(f64::INFINITY, f64::min);
        eprintln!(
            "echo {echo}: {} epochs, best val L1 {:.4} ns",
            history.len(),
            best
        );
        write_checkpoint_path(&net, &history, &out.join(checkpoint_name(variant, echo)))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn infer_cmd(
    input: &Option<PathBuf>,
    model: &Path,
    out: &Path,
    spec_path: &Option<PathBuf>,
    variant: VariantArg,
    backend: BackendArg,
    mode: ModeArg,
    seed: u64,
) -> Result<()> {
    let spec = load_spec(spec_path)?;
    let bundle = ModelBundle::load(model, spec, variant.to_core(), backend, mode, seed)?;
    let frames: Vec<DenseFrame> = match input {
        Some(path) => read_dense_jsonl_path(path)?,
        None => read_dense_jsonl(std::io::stdin().lock())?,
    };
    let mut scans = Vec::with_capacity(frames.len());
    for frame in &frames {
        scans.push(bundle.process(frame)?);
    }
    write_scan_csv_path(&scans, out)?;
    eprintln!("inferred {} frames into {}", scans.len(), out.display());
    Ok(())
}

#[derive(Deserialize)]
struct BoxPairJson {
    reference: OrientedBox<f64>,
    predicted: OrientedBox<f64>,
}

pub fn evaluate_cmd(
    reference: &Path,
    pred: &Path,
    boxes: &Option<PathBuf>,
    out: &Option<PathBuf>,
    spec_path: &Option<PathBuf>,
) -> Result<()> {
    let spec = load_spec(spec_path)?;
    let ref_frames = read_scan_csv_path::<f64>(reference)?;
    let pred_frames = read_scan_csv_path::<f64>(pred)?;
    let box_pairs: Option<Vec<(OrientedBox<f64>, OrientedBox<f64>)>> = match boxes {
        None => None,
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let parsed: Vec<BoxPairJson> = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("boxes {}: {e}", p.display())))?;
            Some(parsed.into_iter().map(|b| (b.reference, b.predicted)).collect())
        }
    };
    let report = full_report(&ref_frames, &pred_frames, box_pairs.as_deref(), &spec)?;
    emit_report(&report, out)
}

fn emit_report(report: &KpiReport, out: &Option<PathBuf>) -> Result<()> {
    let json = report_to_json(report)?;
    match out {
        None => {
            println!("{json}");
        }
        Some(path) => {
            fs::write(path, &json)?;
            fs::write(path.with_extension("csv"), report_to_csv(report))?;
            fs::write(
                path.with_extension("error_hist.dat"),
                hist_to_gnuplot(&report.error_histogram),
            )?;
            if let Some(d) = &report.overall_distribution {
                fs::write(path.with_extension("ref_epw_hist.dat"), hist_to_gnuplot(&d.reference_hist))?;
                fs::write(path.with_extension("pred_epw_hist.dat"), hist_to_gnuplot(&d.predicted_hist))?;
            }
            eprintln!("report written to {}", path.display());
        }
    }
    Ok(())
}

pub fn bench_cmd(
    model: &Path,
    spec_path: &Option<PathBuf>,
    reps: u64,
    seed: u64,
    out: &Option<PathBuf>,
) -> Result<()> {
    let spec = load_spec(spec_path)?;
    let mut nets = Vec::new();
    for variant in Variant::ALL {
        let path = model.join(checkpoint_name(variant, 0));
        if !path.exists() {
            return Err(Error::Data(format!("missing checkpoint {}", path.display())));
        }
        nets.push((variant, read_checkpoint_path::<f64>(&path)?.0));
    }
    // Deterministic synthetic validation set at the spec dimensions.
    let config = SceneConfig::<f64>::default();
    let opts = CastOptions::default();
    let (pairs, _) = make_dataset(&config, &spec, &opts, 4, 1, seed)?;
    let val = make_training_set(&pairs, &spec, 0)?;
    let entries: Vec<(Variant, &EpwNetwork)> = nets.iter().map(|(v, n)| (*v, n)).collect();
    let rows = bench(&entries, &val, reps as usize, 1.0)?;
    let mut table = String::from("variant     val_mse_ns2   accuracy_pct  latency_ms\n");
    for r in &rows {
        table.push_str(&format!(
            "{:<11} {:<13.6} {:<13.3} {:.3}\n",
            r.variant.slug(),
            r.val_mse,
            r.accuracy_pct,
            r.latency_ms
        ));
    }
    print!("{table}");
    if let Some(path) = out {
        let json: Vec<serde_json::Value> = rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "variant": r.variant.slug(),
                    "val_mse_ns2": r.val_mse,
                    "accuracy_pct": r.accuracy_pct,
                    "latency_ms": r.latency_ms,
                })
            })
            .collect();
        let mut f = fs::File::create(path)?;
        writeln!(f, "{}", serde_json::to_string_pretty(&json).unwrap())?;
    }
    Ok(())
}
