//! Per-layer latency measurement for `pbit bench`.

use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use pbit::layers::fused_binary_conv;
use pbit::oracle::{oracle_conv, RefTensor};
use pbit::verify::random_image;
use pbit::{exec, Activation, Layer, NetworkGraph, Shape};
use serde::Serialize;

/// JSON report; the schema is documented in `docs/bench-report.md`.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub input_shape: [usize; 4],
    pub threads: usize,
    pub repeats: usize,
    pub layers: Vec<LayerTiming>,
    pub layer_sum_ms: f64,
    pub total_ms: f64,
    pub throughput_ips: f64,
    pub oracle: Option<OracleComparison>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerTiming {
    pub name: String,
    /// Graph layer indices timed together: a weighted layer and the pools after it.
    pub graph_layers: Vec<usize>,
    pub output_shape: [usize; 4],
    pub median_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleComparison {
    pub layer: String,
    pub graph_layer: usize,
    pub fused_ms: f64,
    pub oracle_ms: f64,
    pub speedup: f64,
}

fn dims(s: Shape) -> [usize; 4] {
    [s.n, s.h, s.w, s.c]
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Row names and the graph layers each row covers.
fn rows(graph: &NetworkGraph) -> Vec<(String, Vec<usize>)> {
    let (mut convs, mut fcs) = (0, 0);
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, layer) in graph.layers().iter().enumerate() {
        match layer {
            Layer::Pool(_) => match out.last_mut() {
                Some(row) => row.1.push(i),
                None => out.push((format!("pool{i}"), vec![i])),
            },
            Layer::Dense(_) | Layer::OutputDense(_) => {
                fcs += 1;
                out.push((format!("fc{fcs}"), vec![i]));
            }
            _ => {
                convs += 1;
                out.push((format!("conv{convs}"), vec![i]));
            }
        }
    }
    out
}

/// Times the first hidden binary convolution against the `f64` reference
/// convolution on the same input.
fn oracle_comparison(graph: &NetworkGraph, acts: &[Activation], repeats: usize) -> Result<Option<OracleComparison>> {
    let Some(index) = graph.layers().iter().position(|l| matches!(l, Layer::Conv(_))) else {
        return Ok(None);
    };
    let Layer::Conv(layer) = &graph.layers()[index] else { unreachable!() };
    let Some(Activation::Bits(input)) = index.checked_sub(1).map(|i| &acts[i]) else {
        bail!("layer {index} is not fed by a binary activation");
    };
    let g = *layer.geometry();
    let x = RefTensor::from_signs(input.shape(), &input.unpack_channels())?;
    let w = RefTensor::from_signs(g.weight_shape(), &layer.weights().unpack_channels())?;

    let mut fused = Vec::with_capacity(repeats);
    let mut oracle = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(fused_binary_conv(input, layer)?);
        fused.push(ms(t.elapsed()));
        let t = Instant::now();
        std::hint::black_box(oracle_conv(&x, &w, &g)?);
        oracle.push(ms(t.elapsed()));
    }
    let (fused_ms, oracle_ms) = (median(&mut fused), median(&mut oracle));
    let name = rows(graph).into_iter().find(|(_, l)| l[0] == index).map(|r| r.0).unwrap_or_default();
    Ok(Some(OracleComparison { layer: name, graph_layer: index, fused_ms, oracle_ms, speedup: oracle_ms / fused_ms }))
}

/// Runs one warm-up inference, then `repeats` timed ones, and reports
/// per-row medians. `threads == 0` uses every available core.
pub fn bench_graph(graph: &NetworkGraph, model: &str, repeats: usize, threads: usize, with_oracle: bool) -> Result<BenchReport> {
    if repeats < 3 {
        bail!("--repeats must be at least 3, got {repeats}");
    }
    let img = random_image(graph, 0, 0);
    let rows = rows(graph);
    exec::with_threads(threads, || {
        graph.infer(&img)?;
        let mut per_row = vec![Vec::with_capacity(repeats); rows.len()];
        let mut totals = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            let (_, times) = graph.infer_profiled(&img)?;
            totals.push(ms(t.elapsed()));
            for (samples, (_, idx)) in per_row.iter_mut().zip(&rows) {
                samples.push(idx.iter().map(|&i| ms(times[i])).sum());
            }
        }
        let layers: Vec<LayerTiming> = rows
            .iter()
            .zip(&mut per_row)
            .map(|((name, idx), samples)| LayerTiming {
                name: name.clone(),
                graph_layers: idx.clone(),
                output_shape: dims(graph.shapes()[*idx.last().unwrap()]),
                median_ms: median(samples),
            })
            .collect();
        let total_ms = median(&mut totals);
        let oracle = if with_oracle {
            let acts = graph.run_layers(&img)?;
            oracle_comparison(graph, &acts, repeats)?
        } else {
            None
        };
        Ok(BenchReport {
            model: model.to_string(),
            input_shape: dims(graph.input_shape()),
            threads: exec::current_threads(),
            repeats,
            layer_sum_ms: layers.iter().map(|l| l.median_ms).sum(),
            layers,
            total_ms,
            throughput_ips: graph.input_shape().n as f64 * 1e3 / total_ms,
            oracle,
        })
    })
}

pub fn cmd_bench(model: &Path, repeats: usize, threads: usize, with_oracle: bool) -> Result<BenchReport> {
    let graph = crate::load_model(model)?;
    bench_graph(&graph, &model.display().to_string(), repeats, threads, with_oracle)
        .with_context(|| format!("benchmark of {} failed", model.display()))
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "{} ({} threads, {} repeats)", self.model, self.threads, self.repeats);
        let _ = writeln!(s, "{:<8} {:>22} {:>12}", "layer", "output", "median ms");
        for l in &self.layers {
            let [n, h, w, c] = l.output_shape;
            let _ = writeln!(s, "{:<8} {:>22} {:>12.3}", l.name, format!("{n}x{h}x{w}x{c}"), l.median_ms);
        }
        let _ = writeln!(s, "{:<8} {:>22} {:>12.3}", "sum", "", self.layer_sum_ms);
        let _ = writeln!(s, "{:<8} {:>22} {:>12.3}", "total", "", self.total_ms);
        let _ = writeln!(s, "throughput: {:.2} images/s", self.throughput_ips);
        if let Some(o) = &self.oracle {
            let _ = writeln!(
                s,
                "{}: fused {:.3} ms, f64 reference {:.3} ms, speedup {:.1}x",
                o.layer, o.fused_ms, o.oracle_ms, o.speedup
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pbit::graph::zoo::{random_graph, Arch};

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn yolo_rows_fold_pools() {
        let g = random_graph(Arch::Yolov2Tiny, 32, 125, 1).unwrap();
        let r = rows(&g);
        assert_eq!(r.len(), 9);
        assert_eq!(r[0].0, "conv1");
        assert_eq!(r[0].1, vec![0, 1]);
        assert_eq!(r[8].0, "conv9");
    }

    #[test]
    fn alexnet_rows() {
        let g = random_graph(Arch::AlexNet, 67, 10, 1).unwrap();
        let names: Vec<_> = rows(&g).into_iter().map(|r| r.0).collect();
        assert_eq!(names, ["conv1", "conv2", "conv3", "conv4", "conv5", "fc1", "fc2", "fc3"]);
    }

    #[test]
    fn report_is_consistent() {
        let g = random_graph(Arch::Yolov2Tiny, 32, 125, 1).unwrap();
        let r = bench_graph(&g, "yolo", 3, 1, true).unwrap();
        assert_eq!(r.threads, 1);
        assert!(r.total_ms > 0.0 && r.layer_sum_ms <= r.total_ms * 1.5);
        let o = r.oracle.unwrap();
        assert_eq!(o.layer, "conv2");
        assert!(bench_graph(&g, "yolo", 2, 1, false).is_err());
    }
}
