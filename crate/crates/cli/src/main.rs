mod cli;
mod commands;
mod model;
mod serve;

use clap::Parser;
use cli::{Cli, Cmd};
use epwsim_core::Error;

/// Exit codes: 0 success, 1 usage, 2 data/format, 3 runtime failure.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => 3,
        _ => 2,
    }
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("LIDAR_SIM_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        } else {
            eprintln!("ignoring unparsable LIDAR_SIM_THREADS={v}");
        }
    }
}

fn dispatch(cli: Cli) -> epwsim_core::Result<()> {
    match cli.cmd {
        Cmd::GenData { frames, out, spec, seed } => commands::gen_data(frames, &out, &spec, seed),
        Cmd::FitLut { input, out, spec } => commands::fit_lut_cmd(&input, &out, &spec),
        Cmd::Train { input, out, spec, variant, epochs, batch, lr, lambda, patience, seed } => {
            commands::train_cmd(
                &input, &out, &spec, variant, epochs, batch, lr, lambda, patience, seed,
            )
        }
        Cmd::Infer { input, model, out, spec, variant, backend, mode, seed } => {
            commands::infer_cmd(&input, &model, &out, &spec, variant, backend, mode, seed)
        }
        Cmd::Evaluate { reference, pred, boxes, out, spec } => {
            commands::evaluate_cmd(&reference, &pred, &boxes, &out, &spec)
        }
        Cmd::Bench { model, spec, frames, seed, out } => {
            commands::bench_cmd(&model, &spec, frames, seed, &out)
        }
        Cmd::Serve { port, model, spec, variant, backend, mode, seed } => {
            let spec = commands::load_spec(&spec)?;
            let bundle =
                model::ModelBundle::load(&model, spec, variant.to_core(), backend, mode, seed)?;
            serve::serve(port, bundle)
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    init_thread_pool();
    match dispatch(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}
