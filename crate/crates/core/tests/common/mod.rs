#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tunet::data::{load_sample, Normalization, Sample, TilePair};

/// Scene pair where image B is image A plus a few solid squares; the label
/// marks the squares.
pub fn square_pair(size: u32, seed: u64) -> TilePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = [
        rng.random_range(60..140u8),
        rng.random_range(60..140u8),
        rng.random_range(60..140u8),
    ];
    let a = RgbImage::from_fn(size, size, |_, _| {
        Rgb(base.map(|v| v.saturating_add(rng.random_range(0..24))))
    });
    let mut b = a.clone();
    let mut label = GrayImage::new(size, size);
    let n = rng.random_range(1..=3);
    for _ in 0..n {
        let side = rng.random_range(size / 8..=size / 4);
        let x0 = rng.random_range(0..size - side);
        let y0 = rng.random_range(0..size - side);
        let colour = Rgb([
            rng.random_range(200..=255),
            rng.random_range(0..40),
            rng.random_range(150..=255),
        ]);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                b.put_pixel(x, y, colour);
                label.put_pixel(x, y, Luma([255]));
            }
        }
    }
    TilePair {
        image_a: a,
        image_b: b,
        label,
        source_id: format!("synthetic{seed}"),
        row: 0,
        col: 0,
    }
}

pub fn square_samples(n: usize, size: u32, seed: u64) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            load_sample(
                &square_pair(size, seed + i as u64),
                &Normalization::IMAGENET,
            )
            .unwrap()
        })
        .collect()
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

pub fn random_var(shape: &[usize], seed: u64) -> Var {
    Var::from_tensor(&random_tensor(shape, seed)).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Worst relative error between backprop and central differences over up
/// to `per_tensor` sampled coordinates of each variable.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// entries that are zero up to rounding from dominating.
pub fn gradient_check<F>(
    vars: &[(&str, &Var)],
    f: F,
    per_tensor: usize,
    step: f64,
    floor: f64,
) -> (f64, String)
where
    F: Fn() -> Tensor,
{
    let loss = f();
    let grads = loss.backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = (0.0f64, String::new());
    for (name, var) in vars {
        let analytic = grads
            .get(var.as_tensor())
            .map(flat)
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let original = var.as_tensor().copy().unwrap();
        let base = flat(&original);
        let n = base.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let eval_at = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, original.dims(), &Device::Cpu).unwrap();
                var.set(&t.to_dtype(original.dtype()).unwrap()).unwrap();
                scalar(&f())
            };
            let numeric = (eval_at(step) - eval_at(-step)) / (2.0 * step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst.0 {
                worst = (
                    rel,
                    format!("{name}[{i}]: analytic {a:.6e}, numeric {numeric:.6e}"),
                );
            }
        }
        var.set(&original).unwrap();
    }
    worst
}

/// Weighted sum of `out` with fixed random weights: a scalar whose gradient
/// touches every output element.
pub fn probe(out: &Tensor, seed: u64) -> Tensor {
    let w = random_tensor(out.dims(), seed)
        .to_dtype(out.dtype())
        .unwrap();
    out.mul(&w).unwrap().sum_all().unwrap()
}
