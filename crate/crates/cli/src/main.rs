use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use pbit::graph::zoo::Arch;
use pbit_cli::bench::cmd_bench;
use pbit_cli::{cmd_gen_image, cmd_gen_model, cmd_run, cmd_verify};

/// Bit-packed binary neural network inference.
#[derive(Parser)]
#[command(name = "pbit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one image through a model and write the real-valued output.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare the engine with the f64 reference on random images.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt a threshold in this layer before comparing (self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<usize>,
    },
    /// Time each layer and the whole network.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Worker threads; 0 uses every available core.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Skip the comparison against the f64 reference convolution.
        #[arg(long)]
        no_oracle: bool,
    },
    /// Write a model with the given topology and random parameters.
    GenModel {
        #[arg(long)]
        arch: Arch,
        /// Square input resolution; defaults to the network's native size.
        #[arg(long)]
        input_size: Option<usize>,
        /// Width of the final layer; defaults to the network's native size.
        #[arg(long)]
        outputs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a random image matching a model's input shape.
    GenImage {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { model, input, output } => {
            let ms = cmd_run(&model, &input, &output)?;
            println!("wrote {} in {ms:.3} ms", output.display());
        }
        Command::Verify { model, trials, seed, inject_fault } => {
            let report = cmd_verify(&model, trials, seed, inject_fault)?;
            match report.mismatch {
                None => println!("ok: {} trials, {} layers, all outputs identical", report.trials, report.layers),
                Some(m) => {
                    println!(
                        "MISMATCH: trial {} layer {} element {}: engine {} oracle {}",
                        m.trial, m.layer, m.element, m.engine, m.oracle
                    );
                    return Ok(ExitCode::from(1));
                }
            }
        }
        Command::Bench { model, repeats, threads, json, no_oracle } => {
            let report = cmd_bench(&model, repeats, threads, !no_oracle)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_table());
            }
        }
        Command::GenModel { arch, input_size, outputs, seed, out } => {
            let bytes = cmd_gen_model(arch, input_size, outputs, seed, &out)?;
            println!("wrote {} ({bytes} bytes)", out.display());
        }
        Command::GenImage { model, seed, out } => {
            cmd_gen_image(&model, seed, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
