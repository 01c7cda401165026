//! Engine-versus-oracle comparison on random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::exec::map_indices;
use crate::graph::{Activation, NetworkGraph};
use crate::oracle::{OracleNet, RefTensor};
use crate::tensor::ByteTensor;

/// First element where the engine and the oracle disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub trial: usize,
    pub layer: usize,
    /// Flat NHWC index into the layer output.
    pub element: usize,
    pub engine: f64,
    pub oracle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub trials: usize,
    pub layers: usize,
    pub mismatch: Option<Mismatch>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none()
    }
}

/// Deterministic random image for `(seed, trial)`.
pub fn random_image(graph: &NetworkGraph, seed: u64, trial: usize) -> ByteTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let shape = graph.input_shape();
    let data = (0..shape.len()).map(|_| rng.gen()).collect();
    ByteTensor::new(shape, data).expect("length matches shape")
}

fn compare(trial: usize, layer: usize, engine: &Activation, oracle: &RefTensor) -> Option<Mismatch> {
    let values: Vec<f64> = match engine {
        Activation::Bits(t) => t.unpack_channels().into_iter().map(f64::from).collect(),
        Activation::Real(t) => t.data().iter().map(|&v| f64::from(v)).collect(),
        Activation::Bytes(t) => t.data().iter().map(|&v| f64::from(v)).collect(),
    };
    let real = matches!(engine, Activation::Real(_));
    if engine.shape() != oracle.shape {
        return Some(Mismatch { trial, layer, element: 0, engine: f64::NAN, oracle: f64::NAN });
    }
    values.iter().zip(&oracle.data).enumerate().find_map(|(element, (&e, &o))| {
        // engine reals are f32; the oracle is rounded the same way before comparing
        let expected = if real { f64::from(o as f32) } else { o };
        (e.to_bits() != expected.to_bits()).then_some(Mismatch { trial, layer, element, engine: e, oracle: o })
    })
}

fn run_trial(graph: &NetworkGraph, oracle: &OracleNet, seed: u64, trial: usize) -> Result<Option<Mismatch>> {
    let img = random_image(graph, seed, trial);
    let engine = graph.run_layers(&img)?;
    let reference = oracle.run_stages(&img)?;
    Ok(engine.iter().zip(&reference).enumerate().find_map(|(layer, (e, o))| compare(trial, layer, e, o)))
}

/// Runs `trials` random images through the fused engine and the unfused
/// oracle, layer by layer. Trials may run in parallel; the reported mismatch
/// is always the one with the lowest trial index.
pub fn verify_graph(graph: &NetworkGraph, trials: usize, seed: u64) -> Result<VerifyReport> {
    let oracle = OracleNet::from_graph(graph);
    let results = map_indices(trials, |t| run_trial(graph, &oracle, seed, t));
    let mut mismatch = None;
    for r in results {
        if let Some(m) = r? {
            mismatch = Some(m);
            break;
        }
    }
    Ok(VerifyReport { trials, layers: graph.layers().len(), mismatch })
}
