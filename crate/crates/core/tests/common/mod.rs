//! Finite-difference oracles shared by the gradient and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ura::imaging::{Image, PairedSample};
use ura::metrics::{self, SsimParams};
use ura::nets::{DerainConfig, DerainNet, Generator, GeneratorConfig};
use ura::nn::{ModelParams, Tensor};
use ura::trainer::{self, AttackHyper, AttackSample};
use ura::warp::{self, FlowField, FlowMapping};

pub const STEP: f64 = 1e-3;

/// Tiny end-to-end instance whose step-1e-3 stencil crosses no ReLU or
/// bilinear kink.
pub const END_TO_END_SEED: u64 = 10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform pixels kept away from the clip boundaries.
pub fn random_image(seed: u64, h: usize, w: usize) -> Image<f64> {
    let mut r = rng(seed);
    let data = (0..3 * h * w).map(|_| r.random_range(0.05..0.95)).collect();
    Image::new(h, w, data).unwrap()
}

/// Smooth image with structure, kept inside (0.1, 0.9).
pub fn smooth_image(seed: u64, h: usize, w: usize) -> Image<f64> {
    let mut r = rng(seed);
    let (a, b, c): (f64, f64, f64) = (r.random_range(0.2..0.9), r.random_range(0.2..0.9), r.random_range(0.0..6.0));
    Image::from_fn(h, w, |ch, y, x| {
        0.5 + 0.35 * ((a * x as f64 + b * y as f64 + c + ch as f64).sin() * 0.7 + 0.3 * ((x * y) as f64 * 0.1).cos())
    })
    .unwrap()
}

/// ‖analytic − numeric‖ / ‖numeric‖ over the checked coordinates; 0 when
/// both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let an: f64 = analytic.iter().map(|n| n * n).sum::<f64>().sqrt();
    if norm.max(an) < 1e-14 {
        0.0
    } else {
        diff / norm.max(an)
    }
}

/// Central difference of `f` at `x` along each index in `idx`.
pub fn central(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], idx: &[usize], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    idx.iter()
        .map(|&i| {
            let x0 = x[i];
            x[i] = x0 + h;
            let up = f(&x);
            x[i] = x0 - h;
            let down = f(&x);
            x[i] = x0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn sample_indices(seed: u64, len: usize, n: usize) -> Vec<usize> {
    let mut r = rng(seed ^ 0x5eed);
    if len <= n {
        return (0..len).collect();
    }
    (0..n).map(|_| r.random_range(0..len)).collect()
}

fn with_data(img: &Image<f64>, data: &[f64]) -> Image<f64> {
    Image::from_unclipped(img.height(), img.width(), data.to_vec()).unwrap()
}

pub fn small_window() -> SsimParams {
    SsimParams {
        window_size: 7,
        ..SsimParams::default()
    }
}

/// Worst relative error of the SSIM gradient w.r.t. either input.
pub fn ssim_grad_error(seed: u64, size: usize, p: &SsimParams) -> f64 {
    let x = random_image(seed, size, size);
    let y = random_image(seed + 1000, size, size);
    let g = metrics::ssim_grad(&x, &y, p).unwrap();
    let idx = sample_indices(seed, x.data().len(), 60);
    let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let nx = central(
        &mut |d| metrics::ssim(&with_data(&x, d), &y, p).unwrap(),
        x.data(),
        &idx,
        STEP,
    );
    let ny = central(
        &mut |d| metrics::ssim(&x, &with_data(&y, d), p).unwrap(),
        y.data(),
        &idx,
        STEP,
    );
    rel_err(&pick(&g.grad_x), &nx).max(rel_err(&pick(&g.grad_y), &ny))
}

pub fn derain_loss_grad_error(seed: u64, size: usize, p: &SsimParams) -> f64 {
    // keep |pred - b| away from 0 so L1 is smooth under the step
    let b = random_image(seed, size, size);
    let pred = Image::from_fn(size, size, |c, y, x| {
        let v = b.get(c, y, x);
        if v < 0.5 { v + 0.3 } else { v - 0.3 }
    })
    .unwrap();
    let pred = with_data(&pred, &pred.data().iter().zip(random_image(seed + 7, size, size).data()).map(|(a, n)| a + 0.1 * (n - 0.5)).collect::<Vec<_>>());
    let lambda = 0.7;
    let (_, g) = metrics::derain_loss_grad(&pred, &b, lambda, p).unwrap();
    let idx = sample_indices(seed, pred.data().len(), 60);
    let n = central(
        &mut |d| metrics::derain_loss(&with_data(&pred, d), &b, lambda, p).unwrap(),
        pred.data(),
        &idx,
        STEP,
    );
    rel_err(&idx.iter().map(|&i| g[i]).collect::<Vec<_>>(), &n)
}

pub fn attack_loss_grad_error(seed: u64, size: usize, p: &SsimParams) -> f64 {
    let adv = random_image(seed, size, size);
    let clean = random_image(seed + 1, size, size);
    let b = random_image(seed + 2, size, size);
    let phi = 0.8;
    let (_, g) = metrics::attack_loss_grad(&adv, &clean, &b, phi, p).unwrap();
    let idx = sample_indices(seed, adv.data().len(), 60);
    let n = central(
        &mut |d| metrics::attack_loss(&with_data(&adv, d), &clean, &b, phi, p).unwrap(),
        adv.data(),
        &idx,
        STEP,
    );
    rel_err(&idx.iter().map(|&i| g[i]).collect::<Vec<_>>(), &n)
}

fn weighted_warp(img: &Image<f64>, f: &FlowField<f64>, weights: &[f64]) -> f64 {
    let out = warp::spatial_transform(img, f).unwrap();
    out.data().iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Centered flow whose sampling coordinates stay inside the image and at
/// least `margin` away from integers.
pub fn non_integer_flow(seed: u64, h: usize, w: usize, eps: f64, margin: f64) -> FlowField<f64> {
    let mut r = rng(seed);
    let mut raw = vec![0.0; 2 * h * w];
    for plane in 0..2 {
        let n = if plane == 0 { h } else { w };
        for y in 0..h {
            for x in 0..w {
                let base = if plane == 0 { y } else { x } as f64;
                raw[plane * h * w + y * w + x] = loop {
                    let d: f64 = r.random_range(-0.9 * eps..0.9 * eps);
                    let c = base + d;
                    let frac = c - c.floor();
                    if c > margin && c < (n - 1) as f64 - margin && frac > margin && frac < 1.0 - margin {
                        break (d / eps + 1.0) / 2.0;
                    }
                };
            }
        }
    }
    FlowField::new(h, w, raw, FlowMapping::Centered, eps).unwrap()
}

/// Relative error of the warp gradient w.r.t. raw flow values at
/// non-integer coordinates.
pub fn warp_flow_grad_error(seed: u64, size: usize) -> f64 {
    let img = random_image(seed, size, size);
    let f = non_integer_flow(seed, size, size, 1.0, 0.02);
    let weights = random_image(seed + 3, size, size).into_data();
    let g = warp::spatial_transform_backward(&img, &f, &weights).unwrap();
    let idx: Vec<usize> = (0..f.raw().len()).collect();
    let n = central(
        &mut |raw| {
            let ff = FlowField::new(size, size, raw.to_vec(), f.mapping(), f.budget_eps()).unwrap();
            weighted_warp(&img, &ff, &weights)
        },
        f.raw(),
        &idx,
        STEP,
    );
    rel_err(&g.raw, &n)
}

/// Relative error of the warp gradient w.r.t. input pixels, for any flow.
pub fn warp_pixel_grad_error(seed: u64, size: usize) -> f64 {
    let img = random_image(seed, size, size);
    let f = warp::random_flow(seed + 9, size, size, FlowMapping::Centered, 2.0).unwrap();
    let weights = random_image(seed + 3, size, size).into_data();
    let g = warp::spatial_transform_backward(&img, &f, &weights).unwrap();
    let idx: Vec<usize> = (0..img.data().len()).collect();
    let n = central(
        &mut |d| weighted_warp(&with_data(&img, d), &f, &weights),
        img.data(),
        &idx,
        STEP,
    );
    rel_err(&g.image, &n)
}

pub fn tiny_derain() -> DerainNet {
    DerainNet::new(DerainConfig {
        widths: [3, 4],
        residual_blocks: 1,
        skip: true,
    })
    .unwrap()
}

/// 8x8 generator with noise at 2x2.
pub fn tiny_generator() -> Generator {
    Generator::new(GeneratorConfig {
        height: 8,
        width: 8,
        noise_channels: 2,
        noise_height: 2,
        noise_width: 2,
        down_channels: [3, 3, 3],
        down_strides: [1, 1, 1],
        residual_blocks: 1,
        up_channels: [3, 3],
        up_strides: [2, 2, 1],
    })
    .unwrap()
}

fn flat(p: &ModelParams<f64>) -> Vec<f64> {
    p.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
}

fn unflat(template: &ModelParams<f64>, v: &[f64]) -> ModelParams<f64> {
    let mut p = template.clone();
    let mut k = 0;
    for t in &mut p.tensors {
        let n = t.data.len();
        t.data.copy_from_slice(&v[k..k + n]);
        k += n;
    }
    p
}

/// Adds uniform noise in `[-amount, amount]` to every weight, moving zero
/// biases (and the exact ReLU ties they cause) off the kinks.
pub fn jittered(mut p: ModelParams<f64>, seed: u64, amount: f64) -> ModelParams<f64> {
    if amount > 0.0 {
        let mut r = rng(seed ^ 0x717);
        for t in &mut p.tensors {
            for v in &mut t.data {
                *v += r.random_range(-amount..amount);
            }
        }
    }
    p
}

/// Indices covering every tensor: its first element and a few random ones.
fn weight_indices(p: &ModelParams<f64>, seed: u64, extra: usize) -> Vec<usize> {
    let mut idx = Vec::new();
    let mut k = 0;
    for t in &p.tensors {
        idx.push(k);
        k += t.data.len();
    }
    idx.extend(sample_indices(seed, k, extra));
    idx
}

fn tiny_pairs(seed: u64, n: usize) -> Vec<PairedSample<f64>> {
    (0..n as u64)
        .map(|i| {
            let b = smooth_image(seed + 10 * i, 8, 8);
            let noise = random_image(seed + 10 * i + 1, 8, 8);
            let o = Image::new(8, 8, b.data().iter().zip(noise.data()).map(|(a, r)| (0.7 * a + 0.3 * r).clamp(0.0, 1.0)).collect()).unwrap();
            PairedSample::new(format!("{i}"), o, b).unwrap()
        })
        .collect()
}

/// End-to-end rain-removal training loss w.r.t. network weights.
pub fn derain_end_to_end_error(seed: u64, step: f64, jitter: f64) -> f64 {
    let net = tiny_derain();
    let params = jittered(net.init(seed), seed, jitter);
    let pairs = tiny_pairs(seed, 2);
    let refs: Vec<&PairedSample<f64>> = pairs.iter().collect();
    let p = small_window();
    let (_, g) = trainer::derain_objective_grad(&net, &params, &refs, 1.0, &p).unwrap();
    let gflat: Vec<f64> = g.0.iter().flatten().copied().collect();
    let x = flat(&params);
    let idx = weight_indices(&params, seed, 30);
    let n = central(
        &mut |v| trainer::derain_objective(&net, &unflat(&params, v), &refs, 1.0, &p).unwrap(),
        &x,
        &idx,
        step,
    );
    rel_err(&idx.iter().map(|&i| gflat[i]).collect::<Vec<_>>(), &n)
}

/// End-to-end attack loss (generator → flow → warp → frozen network →
/// SSIM terms) w.r.t. generator weights.
pub fn attack_end_to_end_error(seed: u64, step: f64, jitter: f64) -> f64 {
    let net = tiny_derain();
    let theta: ModelParams<f64> = net.init(seed + 1);
    let gen = tiny_generator();
    let gp = jittered(gen.init(seed + 2), seed, jitter);
    let z: Tensor<f64> = gen.sample_noise(&mut rng(seed + 3));
    let pairs = tiny_pairs(seed, 2);
    let samples = trainer::prepare_attack_samples(&net, &theta, &pairs).unwrap();
    let refs: Vec<&AttackSample<f64>> = samples.iter().collect();
    let hyper = AttackHyper {
        budget_eps: 0.75,
        ..AttackHyper::default()
    };
    let p = small_window();
    let (_, g) = trainer::attack_objective_grad(&gen, &gp, &z, &net, &theta, &refs, &hyper, &p).unwrap();
    let gflat: Vec<f64> = g.0.iter().flatten().copied().collect();
    let x = flat(&gp);
    let idx = weight_indices(&gp, seed, 30);
    let n = central(
        &mut |v| trainer::attack_objective(&gen, &unflat(&gp, v), &z, &net, &theta, &refs, &hyper, &p).unwrap(),
        &x,
        &idx,
        step,
    );
    rel_err(&idx.iter().map(|&i| gflat[i]).collect::<Vec<_>>(), &n)
}
