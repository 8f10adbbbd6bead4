#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitscale::laws::Point;
use vitscale::tensor::{grad_check, grad_check_many, grad_check_steps, GradCheckReport, Tape, Tensor, Var};
use vitscale::vit::{forward, init_params, HeadType, ParamSet, ParamVars, ShapeConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Micro-ViT parameters with a non-zero classifier, so that every body
/// parameter receives gradient.
pub fn micro_params(head: HeadType, seed: u64) -> (ShapeConfig, ParamSet) {
    let shape = ShapeConfig::micro(head);
    let mut params = init_params(&shape, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for (name, t) in params.iter_mut() {
        if name.starts_with("head/") || name == "pos_embedding" || name == "cls" || name == "map/query" {
            let fresh = random_tensor(t.shape(), &mut r);
            *t = fresh.map(|x| 0.5 * x);
        }
    }
    (shape, params)
}

/// Central-difference check of the batch-mean cross-entropy of the micro
/// model with respect to every parameter tensor.
pub const MODEL_STEPS: [f64; 3] = [1e-3, 1e-4, 1e-5];

pub fn micro_vit_gradcheck(head: HeadType, per_input: usize) -> GradCheckReport {
    let (shape, params) = micro_params(head, 7);
    let mut r = rng(11);
    let images = random_tensor(&[2, shape.image_res, shape.image_res, shape.channels], &mut r);
    let labels = vec![1usize, 3];
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    grad_check_steps(
        |tape, vars| {
            let pv = ParamVars::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let out = forward(tape, &pv, &images, &shape)?;
            tape.softmax_cross_entropy(out.logits, &labels)
        },
        &inputs,
        &MODEL_STEPS,
        Some(per_input),
    )
    .unwrap()
}

fn check1(f: impl Fn(&mut Tape, Var) -> vitscale::Result<Var> + Sync, x: &Tensor) -> f64 {
    grad_check(f, x, 1e-6).unwrap()
}

fn check_many(f: impl Fn(&mut Tape, &[Var]) -> vitscale::Result<Var> + Sync, xs: &[Tensor]) -> f64 {
    grad_check_many(f, xs, 1e-6, None).unwrap().max_rel_error
}

/// Max relative central-difference error (h = 1e-6) for every tape op,
/// each composed into a scalar with non-trivial gradients.
pub fn op_gradchecks() -> Vec<(&'static str, f64)> {
    let mut r = rng(2);
    let x = random_tensor(&[3, 4], &mut r);
    let w = random_tensor(&[3, 4], &mut r);
    // Weighting by a fixed random tensor avoids trivially-constant gradients.
    let weighted = |t: &mut Tape, y| {
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv)?;
        Ok(t.sum_all(p))
    };
    let mut out: Vec<(&'static str, f64)> = vec![
        (
            "gelu",
            check1(
                |t, v| {
                    let y = t.gelu(v);
                    weighted(t, y)
                },
                &x,
            ),
        ),
        (
            "softmax0",
            check1(
                |t, v| {
                    let y = t.softmax(v, 0)?;
                    weighted(t, y)
                },
                &x,
            ),
        ),
        (
            "softmax1",
            check1(
                |t, v| {
                    let y = t.softmax(v, 1)?;
                    weighted(t, y)
                },
                &x,
            ),
        ),
        (
            "scale",
            check1(
                |t, v| {
                    let y = t.scale(v, -2.5);
                    weighted(t, y)
                },
                &x,
            ),
        ),
        (
            "transpose",
            check1(
                |t, v| {
                    let y = t.transpose(v)?;
                    let y = t.transpose(y)?;
                    weighted(t, y)
                },
                &x,
            ),
        ),
        (
            "reshape",
            check1(
                |t, v| {
                    let y = t.reshape(v, &[12])?;
                    let y = t.reshape(y, &[3, 4])?;
                    weighted(t, y)
                },
                &x,
            ),
        ),
        (
            "slice_concat",
            check1(
                |t, v| {
                    let a = t.slice(v, 1, 0, 1)?;
                    let b = t.slice(v, 1, 1, 3)?;
                    let y = t.concat(&[b, a], 1)?;
                    let y = t.mul(y, y)?;
                    Ok(t.sum_all(y))
                },
                &x,
            ),
        ),
        (
            "mean_sum",
            check1(
                |t, v| {
                    let sq = t.mul(v, v)?;
                    let m = t.mean(sq, 0)?;
                    let s = t.sum(sq, 1)?;
                    let a = t.sum_all(m);
                    let b = t.sum_all(s);
                    t.add(a, b)
                },
                &x,
            ),
        ),
        (
            "permute",
            check1(
                |t, v| {
                    let y = t.reshape(v, &[3, 2, 2])?;
                    let y = t.permute(y, &[2, 0, 1])?;
                    let y = t.reshape(y, &[2, 6])?;
                    let y = t.reshape(y, &[3, 4])?;
                    weighted(t, y)
                },
                &x,
            ),
        ),
    ];

    let mut r = rng(1);
    let (a, b) = (random_tensor(&[5, 7], &mut r), random_tensor(&[7, 3], &mut r));
    out.push((
        "matmul",
        check_many(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                Ok(t.sum_all(c))
            },
            &[a, b],
        ),
    ));

    let mut r = rng(3);
    let a = random_tensor(&[2, 3, 4], &mut r);
    let b = random_tensor(&[4], &mut r);
    let c = random_tensor(&[2, 4, 3], &mut r);
    out.push((
        "add_sub_mul_bmm",
        check_many(
            |t, v| {
                let x = t.add(v[0], v[1])?;
                let y = t.mul(x, v[1])?;
                let z = t.sub(y, v[0])?;
                let m = t.bmm(z, v[2])?;
                let m = t.mul(m, m)?;
                Ok(t.sum_all(m))
            },
            &[a, b, c],
        ),
    ));

    let mut r = rng(4);
    let x3 = random_tensor(&[3, 6], &mut r);
    let g = random_tensor(&[6], &mut r);
    let bias = random_tensor(&[6], &mut r);
    let w3 = random_tensor(&[3, 6], &mut r);
    out.push((
        "layer_norm",
        check_many(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
                let wv = t.constant(w3.clone());
                let y = t.mul(y, wv)?;
                Ok(t.sum_all(y))
            },
            &[x3, g, bias],
        ),
    ));

    let mut r = rng(5);
    let logits = random_tensor(&[4, 5], &mut r);
    out.push(("softmax_cross_entropy", check1(|t, v| t.softmax_cross_entropy(v, &[0, 4, 2, 2]), &logits)));
    let targets = Tensor::new(vec![4, 5], (0..20).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect()).unwrap();
    out.push(("sigmoid_cross_entropy", check1(|t, v| t.sigmoid_cross_entropy(v, &targets), &logits)));

    let mut r = rng(6);
    let x1 = random_tensor(&[1, 4], &mut r);
    out.push((
        "expand",
        check1(
            |t, v| {
                let y = t.expand(v, 3)?;
                let y = t.gelu(y);
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
            &x1,
        ),
    ));
    out
}

/// O(n²) dominance filter, sorted by compute then error.
pub fn brute_force_frontier(points: &[Point]) -> Vec<Point> {
    let mut keep: Vec<Point> = points
        .iter()
        .enumerate()
        .filter(|&(i, p)| {
            !points.iter().enumerate().any(|(j, q)| {
                j != i && q.compute <= p.compute && (q.error < p.error || (q.error == p.error && q.compute < p.compute))
            })
        })
        .map(|(_, p)| *p)
        .collect();
    keep.sort_by(|a, b| a.compute.total_cmp(&b.compute).then(a.error.total_cmp(&b.error)));
    keep
}

/// Gradient descent on `½‖XW − Y‖² + ½λ‖W‖²` with the exact optimal step for
/// the quadratic's largest curvature.
pub fn gd_ridge(x: &Tensor, y: &Tensor, lambda: f64, iters: usize) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = y.shape()[1];
    let (xd, yd) = (x.data(), y.data());
    let mut gram = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            gram[i * d + j] =
                (0..n).map(|r| xd[r * d + i] * xd[r * d + j]).sum::<f64>() + if i == j { lambda } else { 0.0 };
        }
    }
    let xty: Vec<f64> = (0..d * k).map(|ij| (0..n).map(|r| xd[r * d + ij / k] * yd[r * k + ij % k]).sum()).collect();
    // Power iteration for the largest eigenvalue.
    let mut v = vec![1.0; d];
    let mut lmax = 0.0;
    for _ in 0..500 {
        let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| gram[i * d + j] * v[j]).sum()).collect();
        lmax = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        v = w.iter().map(|a| a / lmax).collect();
    }
    let step = 1.0 / lmax;
    let mut w = vec![0.0; d * k];
    for _ in 0..iters {
        let grad: Vec<f64> = (0..d * k)
            .map(|ij| {
                let (i, c) = (ij / k, ij % k);
                (0..d).map(|j| gram[i * d + j] * w[j * k + c]).sum::<f64>() - xty[ij]
            })
            .collect();
        for (wi, g) in w.iter_mut().zip(grad) {
            *wi -= step * g;
        }
    }
    w
}
