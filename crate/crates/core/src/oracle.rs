//! Full-precision reference path.
//!
//! Every layer is evaluated literally in `f64` on unpacked values: a
//! nested-loop convolution, then `x2 = x1 + b`, then
//! `x3 = gamma * (x2 - mu) / sigma + beta`, then `x3 >= 0`. Nothing here uses
//! packed words or folded thresholds. Slow on purpose.

use crate::error::{dim_err, Result};
use crate::graph::{group_stages, NetworkGraph, RawLayerSpec, StageKind};
use crate::layers::{BnParams, ConvGeometry, PoolGeometry};
use crate::tensor::{ByteTensor, Shape};

/// Dense `f64` NHWC tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RefTensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl RefTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return dim_err(format!("{} values for shape {shape}", data.len()));
        }
        Ok(RefTensor { shape, data })
    }

    pub fn from_bytes(img: &ByteTensor) -> Self {
        RefTensor { shape: img.shape(), data: img.data().iter().map(|&b| f64::from(b)).collect() }
    }

    pub fn from_signs(shape: Shape, signs: &[i8]) -> Result<Self> {
        Self::new(shape, signs.iter().map(|&s| f64::from(s)).collect())
    }

    /// `1` where the value is `+1`, as packed tensors encode it.
    pub fn sign_bits(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v > 0.0).collect()
    }

    fn flattened(&self) -> RefTensor {
        RefTensor { shape: self.shape.flattened(), data: self.data.clone() }
    }
}

/// Direct convolution with zero padding. `weights` has shape
/// `(out, kernel_h, kernel_w, in)`.
pub fn oracle_conv(input: &RefTensor, weights: &RefTensor, g: &ConvGeometry) -> Result<RefTensor> {
    g.validate()?;
    if weights.shape != g.weight_shape() {
        return dim_err(format!("weights are {}, geometry needs {}", weights.shape, g.weight_shape()));
    }
    let out_shape = g.output_shape(input.shape)?;
    let s = input.shape;
    let mut out = vec![0f64; out_shape.len()];
    for n in 0..s.n {
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                for o in 0..g.out_channels {
                    let mut acc = 0f64;
                    for ky in 0..g.kernel_h {
                        let iy = (oy * g.stride_h + ky) as isize - g.pad_h as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..g.kernel_w {
                            let ix = (ox * g.stride_w + kx) as isize - g.pad_w as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let a = &input.data[s.index(n, iy as usize, ix as usize, 0)..][..s.c];
                            let w = &weights.data[weights.shape.index(o, ky, kx, 0)..][..s.c];
                            for (x, y) in a.iter().zip(w) {
                                acc += x * y;
                            }
                        }
                    }
                    out[out_shape.index(n, oy, ox, o)] = acc;
                }
            }
        }
    }
    RefTensor::new(out_shape, out)
}

/// `x2 = x + b` and, when `bn` is given, `x3 = gamma * (x2 - mu) / sigma + beta`.
pub fn oracle_bias_bn(x: &RefTensor, bias: &[f32], bn: Option<&BnParams>) -> Result<RefTensor> {
    let c = x.shape.c;
    if bias.len() != c {
        return dim_err(format!("bias has {} entries for {c} channels", bias.len()));
    }
    if let Some(bn) = bn {
        bn.validate(c)?;
    }
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let o = i % c;
            let x2 = v + f64::from(bias[o]);
            match bn {
                Some(bn) => {
                    let (g, b, m, s) =
                        (f64::from(bn.gamma[o]), f64::from(bn.beta[o]), f64::from(bn.mean[o]), f64::from(bn.sigma[o]));
                    g * (x2 - m) / s + b
                }
                None => x2,
            }
        })
        .collect();
    RefTensor::new(x.shape, data)
}

/// Bias, batch norm and sign: `+1` where `x3 >= 0`, `-1` elsewhere.
pub fn oracle_bn_sign(x: &RefTensor, bias: &[f32], bn: &BnParams) -> Result<RefTensor> {
    let mut x3 = oracle_bias_bn(x, bias, Some(bn))?;
    x3.data.iter_mut().for_each(|v| *v = if *v >= 0.0 { 1.0 } else { -1.0 });
    Ok(x3)
}

/// Max over the in-bounds window cells.
pub fn oracle_maxpool(x: &RefTensor, g: &PoolGeometry) -> Result<RefTensor> {
    g.validate()?;
    let s = x.shape;
    let out = g.output_shape(s);
    let mut data = vec![f64::NEG_INFINITY; out.len()];
    for n in 0..s.n {
        for oy in 0..out.h {
            for ox in 0..out.w {
                for y in oy * g.stride_h..(oy * g.stride_h + g.window_h).min(s.h) {
                    for xx in ox * g.stride_w..(ox * g.stride_w + g.window_w).min(s.w) {
                        for c in 0..s.c {
                            let d = &mut data[out.index(n, oy, ox, c)];
                            *d = d.max(x.data[s.index(n, y, xx, c)]);
                        }
                    }
                }
            }
        }
    }
    RefTensor::new(out, data)
}

/// Unfused network evaluated layer by layer.
#[derive(Debug, Clone)]
pub struct OracleNet {
    input_shape: Shape,
    specs: Vec<RawLayerSpec>,
}

impl OracleNet {
    pub fn from_specs(specs: Vec<RawLayerSpec>, input_shape: Shape) -> Result<Self> {
        group_stages(&specs)?;
        Ok(OracleNet { input_shape, specs })
    }

    pub fn from_graph(graph: &NetworkGraph) -> Self {
        OracleNet { input_shape: graph.input_shape(), specs: graph.to_raw_specs() }
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    /// Output of every stage, aligned with the layers of the built graph.
    /// Binarized stages hold ±1 values.
    pub fn run_stages(&self, img: &ByteTensor) -> Result<Vec<RefTensor>> {
        let stages = group_stages(&self.specs)?;
        let mut x = RefTensor::from_bytes(img);
        let mut outs = Vec::with_capacity(stages.len());
        for stage in &stages {
            x = match stage.main {
                RawLayerSpec::Pool(g) => oracle_maxpool(&x, g)?,
                spec => {
                    let (g, w, bias) = spec.weighted_parts().expect("weighted stage");
                    let input = if matches!(spec, RawLayerSpec::Dense { .. }) { x.flattened() } else { x };
                    let weights = RefTensor::new(g.weight_shape(), w.iter().map(|&v| f64::from(v)).collect())?;
                    let x1 = oracle_conv(&input, &weights, &g)?;
                    let zero = vec![0f32; g.out_channels];
                    let bias = bias.unwrap_or(&zero);
                    match stage.kind {
                        StageKind::Output | StageKind::OutputDense => oracle_bias_bn(&x1, bias, stage.bn)?,
                        _ => {
                            let identity = BnParams::identity(g.out_channels);
                            oracle_bn_sign(&x1, bias, stage.bn.unwrap_or(&identity))?
                        }
                    }
                }
            };
            outs.push(x.clone());
        }
        Ok(outs)
    }

    pub fn run(&self, img: &ByteTensor) -> Result<RefTensor> {
        Ok(self.run_stages(img)?.pop().expect("at least one stage"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let s = Shape::new(1, 3, 3, 1).unwrap();
        let x = RefTensor::new(s, (0..9).map(f64::from).collect()).unwrap();
        let g = ConvGeometry::square(1, 1, 0, 1, 1);
        let w = RefTensor::new(g.weight_shape(), vec![1.0]).unwrap();
        assert_eq!(oracle_conv(&x, &w, &g).unwrap(), x);
    }

    #[test]
    fn bn_sign_examples() {
        let s = Shape::new(1, 1, 3, 1).unwrap();
        let x = RefTensor::new(s, vec![-0.5, 0.0, 3.0]).unwrap();
        let out = oracle_bn_sign(&x, &[0.0], &BnParams::identity(1)).unwrap();
        assert_eq!(out.data, vec![-1.0, 1.0, 1.0]);

        // 2.4 + 0.1 = 2.5 -> 0.5 * (2.5 - 0.5) / 2 + 1 = 1.5
        let bn = BnParams { gamma: vec![0.5], beta: vec![1.0], mean: vec![0.5], sigma: vec![2.0] };
        let one = RefTensor::new(Shape::new(1, 1, 1, 1).unwrap(), vec![2.4]).unwrap();
        let x3 = oracle_bias_bn(&one, &[0.1], Some(&bn)).unwrap();
        assert!((x3.data[0] - 1.5).abs() < 1e-6);
        assert_eq!(oracle_bn_sign(&one, &[0.1], &bn).unwrap().data, vec![1.0]);

        // x3 lands exactly on zero
        let bn = BnParams { gamma: vec![2.0], beta: vec![-1.0], mean: vec![1.0], sigma: vec![4.0] };
        let x = RefTensor::new(Shape::new(1, 1, 1, 1).unwrap(), vec![3.0]).unwrap();
        assert_eq!(oracle_bias_bn(&x, &[0.0], Some(&bn)).unwrap().data, vec![0.0]);
        assert_eq!(oracle_bn_sign(&x, &[0.0], &bn).unwrap().data, vec![1.0]);
    }

    #[test]
    fn rejects_nonpositive_sigma() {
        let x = RefTensor::new(Shape::new(1, 1, 1, 1).unwrap(), vec![1.0]).unwrap();
        let bn = BnParams { gamma: vec![1.0], beta: vec![0.0], mean: vec![0.0], sigma: vec![0.0] };
        assert!(oracle_bn_sign(&x, &[0.0], &bn).is_err());
    }

    #[test]
    fn pool_takes_max() {
        let s = Shape::new(1, 2, 2, 1).unwrap();
        let x = RefTensor::new(s, vec![-1.0, 1.0, -1.0, -1.0]).unwrap();
        assert_eq!(oracle_maxpool(&x, &PoolGeometry::square(2, 2)).unwrap().data, vec![1.0]);
    }
}
