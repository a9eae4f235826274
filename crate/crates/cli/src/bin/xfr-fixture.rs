//! Reference scorer and bundle exporter built on the synthetic fixture
//! model, for trying the pipeline end to end without an ML stack.

use std::io::{self, BufReader};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use xfr_core::fixture::{export_set, FixtureModel};
use xfr_core::scorer::server::{serve, serve_listener, BrightnessModel, ConstantModel, ScoringModel};

#[derive(Parser)]
#[command(name = "xfr-fixture", version, about = "Fixture scorer and bundle exporter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Speak the scorer protocol on stdin/stdout, or on a TCP port.
    Serve {
        #[arg(long, value_enum, default_value_t = Model::Fixture)]
        model: Model,
        /// Class count of the brightness model.
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Output of the constant model; its class count is the list length.
        #[arg(long, value_delimiter = ',')]
        probs: Vec<f64>,
        /// Listen on this address (e.g. 127.0.0.1:7070) instead of stdio.
        #[arg(long)]
        tcp: Option<String>,
    },
    /// Write fixture bundles `b0000`, `b0001`, ... into a directory.
    Export {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Fixture,
    Brightness,
    Constant,
}

fn model(kind: Model, classes: usize, probs: Vec<f64>) -> Result<Arc<dyn ScoringModel>, String> {
    Ok(match kind {
        Model::Fixture => Arc::new(FixtureModel::new()),
        Model::Brightness => Arc::new(BrightnessModel::with_classes(classes)),
        Model::Constant => {
            if probs.is_empty() {
                return Err("the constant model needs --probs".into());
            }
            Arc::new(ConstantModel {
                classes: (0..probs.len()).map(|i| format!("class_{i}")).collect(),
                probs,
            })
        }
    })
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Serve {
            model: kind,
            classes,
            probs,
            tcp,
        } => {
            let model = model(kind, classes, probs)?;
            match tcp {
                Some(addr) => {
                    let listener = TcpListener::bind(&addr).map_err(|e| format!("{addr}: {e}"))?;
                    eprintln!("listening on {}", listener.local_addr().map_err(|e| e.to_string())?);
                    serve_listener(model, listener);
                    Ok(())
                }
                None => serve(&*model, BufReader::new(io::stdin().lock()), io::stdout().lock())
                    .map_err(|e| e.to_string()),
            }
        }
        Command::Export { out, count, seed } => {
            let paths = export_set(&FixtureModel::new(), &out, count, seed).map_err(|e| e.to_string())?;
            println!("wrote {} bundles to {}", paths.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("xfr-fixture: {e}");
            ExitCode::FAILURE
        }
    }
}
