//! Command implementations behind the `pbit` binary.

pub mod bench;

use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use pbit::graph::zoo::{self, Arch};
use pbit::verify::{random_image, verify_graph, VerifyReport};
use pbit::{io, Layer, NetworkGraph};

pub fn load_model(path: &Path) -> Result<NetworkGraph> {
    pbit::load(path).with_context(|| format!("failed to load model {}", path.display()))
}

/// Runs one image through the model and writes the output tensor. Returns
/// the inference latency in milliseconds.
pub fn cmd_run(model: &Path, input: &Path, output: &Path) -> Result<f64> {
    let graph = load_model(model)?;
    let img = io::read_image(input).with_context(|| format!("failed to read input image {}", input.display()))?;
    let start = Instant::now();
    let out = graph.infer(&img).with_context(|| format!("inference on {} failed", input.display()))?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    io::write_output(output, &out).with_context(|| format!("failed to write output {}", output.display()))?;
    Ok(ms)
}

/// Corrupts the threshold of channel 0 in binary layer `layer` so that the
/// engine can no longer agree with the oracle.
pub fn inject_xi_fault(graph: &mut NetworkGraph, layer: usize) -> Result<()> {
    let l = graph.layers_mut().get_mut(layer).with_context(|| format!("no layer {layer}"))?;
    let (positive, xi) = match l {
        Layer::FirstConv(l) => (l.gamma_positive()[0], l.xi_mut()),
        Layer::Conv(l) | Layer::Dense(l) => (l.gamma_positive()[0], l.xi_mut()),
        _ => anyhow::bail!("layer {layer} has no thresholds"),
    };
    // past every reachable accumulator, so channel 0 is stuck at its opposite value
    xi[0] = if positive { 1e12 } else { -1e12 };
    Ok(())
}

pub fn cmd_verify(model: &Path, trials: usize, seed: u64, fault_layer: Option<usize>) -> Result<VerifyReport> {
    let mut graph = load_model(model)?;
    if let Some(layer) = fault_layer {
        inject_xi_fault(&mut graph, layer)?;
    }
    Ok(verify_graph(&graph, trials, seed)?)
}

pub fn cmd_gen_model(arch: Arch, input_size: Option<usize>, outputs: Option<usize>, seed: u64, out: &Path) -> Result<u64> {
    let (full_hw, full_out) = arch.full_size();
    let graph = zoo::random_graph(arch, input_size.unwrap_or(full_hw), outputs.unwrap_or(full_out), seed)?;
    let bytes = pbit::save(&graph, out).with_context(|| format!("failed to write {}", out.display()))?;
    Ok(bytes.len() as u64)
}

pub fn cmd_gen_image(model: &Path, seed: u64, out: &Path) -> Result<()> {
    let graph = load_model(model)?;
    let img = random_image(&graph, seed, 0);
    io::write_image(out, &img).with_context(|| format!("failed to write {}", out.display()))
}
