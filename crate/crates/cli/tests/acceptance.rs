//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use pbit::exec::with_threads;
use pbit::graph::zoo::{random_graph, Arch};
use pbit::graph::float32_size;
use pbit::kernels::{binary_dot, PackedVectorView};
use pbit::layers::{
    binarize, first_layer_conv, fused_binary_conv, fused_binary_conv_planned, output_conv_bytes, schedule_conv,
    BnParams, ConvGeometry, ExecutionPlan, FirstConvLayer, FusedConvLayer, OutputConvLayer, DEFAULT_PACK_THRESHOLD,
};
use pbit::oracle::{oracle_bn_sign, oracle_conv, RefTensor};
use pbit::{BitTensor, ByteTensor, NetworkGraph, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn signs(rng: &mut impl Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect()
}

fn random_bits(rng: &mut impl Rng, shape: Shape) -> (BitTensor, RefTensor) {
    let s = signs(rng, shape.len());
    let reference = RefTensor::new(shape, s.iter().map(|&v| f64::from(v)).collect()).unwrap();
    (BitTensor::pack_channels(shape, &s).unwrap(), reference)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn binary_dot_equivalence() -> Outcome {
    let mut rng = rng(1);
    let start = Instant::now();
    for pair in 0..10_000 {
        let len = rng.gen_range(1..=4096);
        let a = signs(&mut rng, len);
        let b = signs(&mut rng, len);
        let pa: BitTensor = BitTensor::pack_channels(Shape::new(1, 1, 1, len).unwrap(), &a).unwrap();
        let pb: BitTensor = BitTensor::pack_channels(Shape::new(1, 1, 1, len).unwrap(), &b).unwrap();
        let got = binary_dot(
            PackedVectorView::new(pa.words(), len).unwrap(),
            PackedVectorView::new(pb.words(), len).unwrap(),
        )
        .unwrap();
        let want: f64 = a.iter().zip(&b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
        ensure!(f64::from(got) == want, "pair {pair} (len {len}): packed {got}, float {want}");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}, limit 5 s");
    Ok(format!("10000 pairs exact in {:.2} s", elapsed.as_secs_f64()))
}

fn integer_conv(img: &ByteTensor, w: &[f32], g: &ConvGeometry) -> Vec<i64> {
    let s = img.shape();
    let out = g.output_shape(s).unwrap();
    let mut acc = vec![0i64; out.len()];
    for oy in 0..out.h {
        for ox in 0..out.w {
            for o in 0..g.out_channels {
                let mut sum = 0i64;
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let iy = (oy * g.stride_h + ky) as i64 - g.pad_h as i64;
                        let ix = (ox * g.stride_w + kx) as i64 - g.pad_w as i64;
                        if iy < 0 || ix < 0 || iy >= s.h as i64 || ix >= s.w as i64 {
                            continue;
                        }
                        for c in 0..s.c {
                            let x = i64::from(img.data()[s.index(0, iy as usize, ix as usize, c)]);
                            sum += x * w[((o * g.kernel_h + ky) * g.kernel_w + kx) * s.c + c] as i64;
                        }
                    }
                }
                acc[out.index(0, oy, ox, o)] = sum;
            }
        }
    }
    acc
}

fn bitplane_first_layer() -> Outcome {
    let mut rng = rng(2);
    let mut checked = 0;
    for i in 0..200 {
        let c = rng.gen_range(1..=3);
        let shape = Shape::new(1, rng.gen_range(1..=16), rng.gen_range(1..=16), c).unwrap();
        let g = loop {
            let g = ConvGeometry::square(rng.gen_range(1..=3), rng.gen_range(1..=2), rng.gen_range(0..=1), c, rng.gen_range(1..=16));
            if g.output_shape(shape).is_ok() {
                break g;
            }
        };
        let img = ByteTensor::new(shape, (0..shape.len()).map(|_| rng.gen()).collect()).unwrap();
        let w = signs(&mut rng, g.weight_shape().len());
        let packed: BitTensor = BitTensor::pack_channels(g.weight_shape(), &w).unwrap();
        let want = integer_conv(&img, &w, &g);

        // raw accumulator, via an output layer with no bias or batch norm
        let probe = OutputConvLayer::new(g, packed.clone(), vec![0.0; g.out_channels], None).unwrap();
        let got: Vec<i64> = output_conv_bytes(&img, &probe).unwrap().data().iter().map(|&v| v as i64).collect();
        ensure!(got == want, "image {i}: accumulators differ");

        // thresholded form: sign(x1 - t) with integer thresholds t
        let mut bn = BnParams::identity(g.out_channels);
        bn.mean = (0..g.out_channels).map(|_| rng.gen_range(-2000..=2000) as f32).collect();
        let first = FirstConvLayer::new(0, g, packed, vec![0.0; g.out_channels], bn.clone()).unwrap();
        let bits = first_layer_conv(&img, &first).unwrap().unpack_channels();
        for (j, (&b, &x1)) in bits.iter().zip(&want).enumerate() {
            let expected = if x1 as f32 >= bn.mean[j % g.out_channels] { 1 } else { -1 };
            ensure!(b == expected, "image {i}: bit {j} is {b}, accumulator {x1}");
        }
        checked += 1;
    }
    Ok(format!("{checked} images exact"))
}

/// Dyadic parameters that put the threshold of every channel exactly on
/// `targets`, so ties are exact in both the fused and the reference path.
fn tie_params(rng: &mut impl Rng, targets: &[f64], positive: &[bool]) -> (Vec<f32>, BnParams) {
    let c = targets.len();
    let mut bias = vec![0f32; c];
    let mut bn = BnParams::identity(c);
    for o in 0..c {
        let gamma = 2f64.powi(rng.gen_range(-2..=2)) * if positive[o] { 1.0 } else { -1.0 };
        let sigma = 2f64.powi(rng.gen_range(-2..=2));
        let beta = f64::from(rng.gen_range(-16i32..=16)) / 8.0;
        let b = f64::from(rng.gen_range(-16i32..=16)) / 8.0;
        bias[o] = b as f32;
        bn.gamma[o] = gamma as f32;
        bn.sigma[o] = sigma as f32;
        bn.beta[o] = beta as f32;
        bn.mean[o] = (targets[o] + beta * sigma / gamma + b) as f32;
    }
    (bias, bn)
}

fn fusion_soundness() -> Outcome {
    let mut rng = rng(3);
    // [gamma>0 above, gamma>0 below, gamma<0 below, gamma<0 above]
    let mut cases = [0usize; 4];
    let mut ties = [0usize; 2];
    for i in 0..500 {
        let g = ConvGeometry {
            kernel_h: rng.gen_range(1..=3),
            kernel_w: rng.gen_range(1..=3),
            stride_h: rng.gen_range(1..=2),
            stride_w: rng.gen_range(1..=2),
            pad_h: rng.gen_range(0..=1),
            pad_w: rng.gen_range(0..=1),
            in_channels: rng.gen_range(1..=96),
            out_channels: rng.gen_range(2..=8),
        };
        let shape = Shape::new(1, rng.gen_range(3..=6), rng.gen_range(3..=6), g.in_channels).unwrap();
        let (x, xr) = random_bits(&mut rng, shape);
        let (w, wr) = random_bits(&mut rng, g.weight_shape());
        let x1 = oracle_conv(&xr, &wr, &g).unwrap();
        let oc = g.out_channels;
        let positions = x1.data.len() / oc;
        let targets: Vec<f64> = (0..oc).map(|o| x1.data[rng.gen_range(0..positions) * oc + o]).collect();
        // both signs of gamma in every layer
        let positive: Vec<bool> = (0..oc).map(|o| o % 2 == 0).collect();
        let (bias, bn) = tie_params(&mut rng, &targets, &positive);
        let layer = FusedConvLayer::new(0, g, w, bias.clone(), bn.clone(), DEFAULT_PACK_THRESHOLD).unwrap();
        ensure!(layer.xi() == &targets[..], "layer {i}: thresholds not exact");
        let got: Vec<f64> = fused_binary_conv(&x, &layer).unwrap().unpack_channels().into_iter().map(f64::from).collect();
        let want = oracle_bn_sign(&x1, &bias, &bn).unwrap().data;
        ensure!(got == want, "layer {i}: fused bits differ from conv, bias, batch norm, sign");
        for (j, &v) in x1.data.iter().enumerate() {
            let (xi, p) = (targets[j % oc], positive[j % oc]);
            match (p, v.partial_cmp(&xi).unwrap()) {
                (true, std::cmp::Ordering::Equal) => ties[0] += 1,
                (false, std::cmp::Ordering::Equal) => ties[1] += 1,
                (true, std::cmp::Ordering::Greater) => cases[0] += 1,
                (true, std::cmp::Ordering::Less) => cases[1] += 1,
                (false, std::cmp::Ordering::Less) => cases[2] += 1,
                (false, std::cmp::Ordering::Greater) => cases[3] += 1,
            }
        }
    }
    ensure!(cases.iter().all(|&c| c > 0), "a sign/side case never occurred: {cases:?}");
    ensure!(ties.iter().all(|&c| c > 0), "ties missing for a gamma sign: {ties:?}");
    Ok(format!("500 layers exact; cases {cases:?}, ties (gamma>0, gamma<0) {ties:?}"))
}

fn branchless_matches_cases() -> Outcome {
    let xi = 3.0;
    let mut agree = 0;
    for x1 in [2, 3, 4] {
        for gamma_positive in [true, false] {
            let four_case = if gamma_positive { f64::from(x1) >= xi } else { f64::from(x1) <= xi };
            // reference with gamma = ±1, sigma = 1, beta = 0, b = 0, mu = xi
            let gamma = if gamma_positive { 1.0 } else { -1.0 };
            let reference = gamma * (f64::from(x1) - xi) >= 0.0;
            let logic = binarize(x1, xi, gamma_positive);
            ensure!(logic == four_case && logic == reference, "x1={x1} gamma>0={gamma_positive}: {logic}");
            agree += 1;
        }
    }
    Ok(format!("{agree}/6 agree"))
}

fn threshold_algebra() -> Outcome {
    let mut rng = rng(5);
    let mut worst = 0f64;
    for i in 0..10_000 {
        let gamma: f32 = rng.gen_range(0.01..4.0) * if rng.gen() { 1.0 } else { -1.0 };
        let sigma: f32 = rng.gen_range(0.01..4.0);
        let beta: f32 = rng.gen_range(-4.0..4.0);
        let mean: f32 = rng.gen_range(-500.0..500.0);
        let bias: f32 = rng.gen_range(-4.0..4.0);
        let x1: i32 = rng.gen_range(-1000..=1000);
        let bn = BnParams { gamma: vec![gamma], beta: vec![beta], mean: vec![mean], sigma: vec![sigma] };
        let g = ConvGeometry::dense(1, 1);
        let w: BitTensor = BitTensor::pack_channels(g.weight_shape(), &[1.0f32]).unwrap();
        let layer = FusedConvLayer::new(0, g, w, vec![bias], bn, DEFAULT_PACK_THRESHOLD).unwrap();
        let xi = layer.xi()[0];
        let (g64, s64, b64, m64, c64, x) =
            (f64::from(gamma), f64::from(sigma), f64::from(beta), f64::from(mean), f64::from(bias), f64::from(x1));
        let folded = g64 / s64 * (x - xi);
        let direct = g64 * (x + c64 - m64) / s64 + b64;
        let rel = (folded - direct).abs() / direct.abs();
        ensure!(rel <= 1e-5 || folded == direct, "draw {i}: {folded} vs {direct}");
        if folded != direct {
            worst = worst.max(rel);
        }
    }
    Ok(format!("10000 draws, worst relative error {worst:.2e}"))
}

fn schedule_equivalence() -> Outcome {
    let mut rng = rng(6);
    let mut plans = [0usize; 2];
    for i in 0..100 {
        let c = rng.gen_range(192..=320);
        let g = ConvGeometry::square(rng.gen_range(1..=3), 1, 1, c, rng.gen_range(1..=40));
        let (x, _) = random_bits(&mut rng, Shape::new(1, 5, 5, c).unwrap());
        let (w, _) = random_bits(&mut rng, g.weight_shape());
        let bn = BnParams {
            gamma: (0..g.out_channels).map(|_| rng.gen_range(0.5..1.5) * if rng.gen() { 1.0 } else { -1.0 }).collect(),
            beta: vec![0.0; g.out_channels],
            mean: (0..g.out_channels).map(|_| rng.gen_range(-30.0..30.0)).collect(),
            sigma: vec![1.0; g.out_channels],
        };
        let layer = FusedConvLayer::new(0, g, w, vec![0.0; g.out_channels], bn, DEFAULT_PACK_THRESHOLD).unwrap();
        plans[usize::from(schedule_conv(&layer, DEFAULT_PACK_THRESHOLD) == ExecutionPlan::SeparatePack)] += 1;
        let a = fused_binary_conv_planned(&x, &layer, ExecutionPlan::Integrated).unwrap();
        let b = fused_binary_conv_planned(&x, &layer, ExecutionPlan::SeparatePack).unwrap();
        ensure!(a.words() == b.words(), "layer {i} ({c} channels): plans disagree");
    }
    ensure!(plans[0] > 0 && plans[1] > 0, "threshold not spanned: {plans:?}");
    Ok(format!("100 layers identical ({} integrated, {} separate-pack by default)", plans[0], plans[1]))
}

fn compression() -> Outcome {
    let g = random_graph(Arch::Vgg16, 224, 1000, 7).map_err(|e| e.to_string())?;
    let packed = g.to_bytes().len() as f64;
    let float = float32_size(&g) as f64;
    let ratio = float / packed;
    ensure!(ratio >= 15.0, "ratio {ratio:.2} below 15");
    Ok(format!(
        "VGG16 224/1000: {:.1} MB float32 vs {:.1} MB packed, {ratio:.1}x",
        float / 1e6,
        packed / 1e6
    ))
}

fn performance() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(8);
    let g = ConvGeometry::square(3, 1, 1, 256, 256);
    let (x, xr) = random_bits(&mut rng, Shape::new(1, 32, 32, 256).unwrap());
    let (w, wr) = random_bits(&mut rng, g.weight_shape());
    let bn = BnParams::identity(256);
    let layer = FusedConvLayer::new(0, g, w, vec![0.0; 256], bn, DEFAULT_PACK_THRESHOLD).unwrap();
    let (fused, oracle) = with_threads(1, || {
        let (mut fused, mut oracle) = (Vec::new(), Vec::new());
        for _ in 0..5 {
            let t = Instant::now();
            std::hint::black_box(fused_binary_conv(&x, &layer).unwrap());
            fused.push(t.elapsed().as_secs_f64());
            let t = Instant::now();
            std::hint::black_box(oracle_conv(&xr, &wr, &g).unwrap());
            oracle.push(t.elapsed().as_secs_f64());
        }
        (median(fused), median(oracle))
    });
    let total = start.elapsed();
    let speedup = oracle / fused;
    ensure!(total < Duration::from_secs(60), "bench took {total:?}, limit 60 s");
    ensure!(speedup >= 4.0, "speedup {speedup:.2}x below 4x (fused {fused:.4} s, f64 {oracle:.4} s)");
    Ok(format!(
        "fused {:.2} ms vs f64 {:.1} ms median of 5, {speedup:.0}x, {:.1} s total",
        fused * 1e3,
        oracle * 1e3,
        total.as_secs_f64()
    ))
}

fn pbit(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pbit")).args(args).output().expect("failed to start pbit")
}

const E2E: [(Arch, usize, &str); 3] = [(Arch::AlexNet, 67, "10"), (Arch::Vgg16, 32, "10"), (Arch::Yolov2Tiny, 64, "125")];

fn model_path(dir: &Path, arch: Arch) -> String {
    dir.join(format!("{arch}.pbit")).display().to_string()
}

fn end_to_end(dir: &Path) -> Outcome {
    let mut parts = Vec::new();
    for (arch, size, outputs) in E2E {
        let model = model_path(dir, arch);
        let size = size.to_string();
        let arch = arch.to_string();
        let gen = pbit(&["gen-model", "--arch", &arch, "--input-size", &size, "--outputs", outputs, "--seed", "1", "--out", &model]);
        ensure!(gen.status.success(), "gen-model {arch}: {}", String::from_utf8_lossy(&gen.stderr));
        let t = Instant::now();
        let out = pbit(&["verify", "--model", &model, "--trials", "20", "--seed", "42"]);
        ensure!(
            out.status.code() == Some(0),
            "verify {arch} exited {:?}: {}{}",
            out.status.code(),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        parts.push(format!("{arch}@{size} {:.1} s", t.elapsed().as_secs_f64()));
    }
    Ok(format!("verify exit 0 with 20 trials: {}", parts.join(", ")))
}

fn serialization(dir: &Path) -> Outcome {
    let mut rng = rng(10);
    let mut count = 0;
    for (arch, _, _) in E2E {
        let path = model_path(dir, arch);
        let bytes = std::fs::read(&path).map_err(|e| format!("{path}: {e}"))?;
        let g = pbit::load(&path).map_err(|e| e.to_string())?;
        ensure!(g.to_bytes() == bytes, "{arch}: save(load(file)) differs");
        let again = NetworkGraph::from_bytes(&g.to_bytes()).map_err(|e| e.to_string())?;
        ensure!(again.to_bytes() == bytes, "{arch}: second round trip differs");
        for _ in 0..200 {
            let i = rng.gen_range(0..bytes.len());
            let mut bad = bytes.clone();
            bad[i] ^= 1 << rng.gen_range(0..8);
            ensure!(NetworkGraph::from_bytes(&bad).is_err(), "{arch}: damaged byte {i} accepted");
            count += 1;
        }
        ensure!(NetworkGraph::from_bytes(&bytes[..bytes.len() - 1]).is_err(), "{arch}: truncated file accepted");
    }
    Ok(format!("3 fixtures byte-identical, {count} corrupted copies rejected"))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        ("binary dot equals float dot", Box::new(binary_dot_equivalence)),
        ("bit-plane first layer equals integer conv", Box::new(bitplane_first_layer)),
        ("fused threshold equals conv/bias/bn/sign", Box::new(fusion_soundness)),
        ("branchless form equals four-case rule", Box::new(branchless_matches_cases)),
        ("folded threshold algebra", Box::new(threshold_algebra)),
        ("integrated and separate-pack plans agree", Box::new(schedule_equivalence)),
        ("model compression vs float32", Box::new(compression)),
        ("fused conv speed vs f64 conv", Box::new(performance)),
        ("end-to-end verify", Box::new(|| end_to_end(dir.path()))),
        ("serialization round trip and corruption", Box::new(|| serialization(dir.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
