//! Central finite differences against the tape's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalpel_seg::autodiff::{Graph, OpKind, RoiBox, Tensor, Var};

pub const STEP: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const SEEDS: u64 = 20;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Loss = <projection, op output>, with the projection fixed per case. The
/// analytic side runs through the tape (reshape + linear + sum); the
/// numeric side accumulates the same inner product in f64.
pub struct Case {
    pub name: &'static str,
    inputs: Vec<Tensor>,
    /// Which inputs get gradients checked.
    check: Vec<bool>,
    build: Box<Build>,
}

fn forward(case: &Case, inputs: &[Tensor]) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().zip(&case.check).map(|(t, &c)| g.leaf(t.clone().with_requires_grad(c))).collect();
    let out = (case.build)(&mut g, &vars);
    (g, vars, out)
}

fn projection(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn numeric_loss(case: &Case, inputs: &[Tensor], proj: &[f32]) -> f64 {
    let (g, _, out) = forward(case, inputs);
    g.value(out).data().iter().zip(proj).map(|(&o, &p)| o as f64 * p as f64).sum()
}

/// Worst norm-wise relative error `|a - n| / max(|a|, |n|)` over the checked
/// inputs.
pub fn run(case: &Case, seed: u64) -> f64 {
    let (mut g, vars, out) = forward(case, &case.inputs);
    let n = g.value(out).numel();
    let proj = projection(n, seed);
    let flat = g.reshape(out, [1, n]).unwrap();
    let w = g.constant(Tensor::new([1, n], proj.clone()));
    let y = g.linear(flat, w, None).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (k, &checked) in case.check.iter().enumerate() {
        if !checked {
            continue;
        }
        let analytic: Vec<f64> = g.grad(vars[k]).expect("gradient populated").iter().map(|&v| v as f64).collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..case.inputs[k].numel() {
            let mut plus = case.inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = case.inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            // Use the actually representable step.
            let h = plus[k].data()[i] as f64 - minus[k].data()[i] as f64;
            numeric.push((numeric_loss(case, &plus, &proj) - numeric_loss(case, &minus, &proj)) / h);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Values bounded away from zero, so no finite-difference step crosses the
/// ReLU kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05f32..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Distinct values at least 0.01 apart, so a step never changes a max.
fn spread(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), idx.into_iter().map(|i| i as f32 * 0.01 - 0.3).collect())
}

pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = 1 + (seed as usize % 2);
    let pad = (seed as usize / 2) % 2;
    let ce_targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    let weights4: Vec<f32> = (0..4).map(|_| rng.random_range(0.2f32..1.0)).collect();
    let sl_targets: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let weights8: Vec<f32> = (0..8).map(|_| rng.random_range(0.2f32..1.0)).collect();
    let bce_targets: Vec<f32> = (0..8).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    let rois = vec![
        RoiBox {
            batch: 0,
            level: 0,
            x1: rng.random_range(0.0..8.0),
            y1: rng.random_range(0.0..8.0),
            x2: rng.random_range(12.0..24.0),
            y2: rng.random_range(12.0..24.0),
        },
        RoiBox {
            batch: 1,
            level: 1,
            x1: rng.random_range(0.0..10.0),
            y1: rng.random_range(0.0..10.0),
            x2: rng.random_range(14.0..30.0),
            y2: rng.random_range(14.0..30.0),
        },
    ];

    vec![
        Case {
            name: "conv2d",
            inputs: vec![randn(&[2, 3, 6, 6], &mut rng), randn(&[4, 3, 3, 3], &mut rng), randn(&[4], &mut rng)],
            check: vec![true, true, true],
            build: Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap()),
        },
        Case {
            name: "group_norm",
            inputs: vec![randn(&[2, 4, 3, 3], &mut rng), randn(&[4], &mut rng), randn(&[4], &mut rng)],
            check: vec![true, true, true],
            build: Box::new(|g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5).unwrap()),
        },
        Case { name: "relu", inputs: vec![away_from_zero(&[3, 7], &mut rng)], check: vec![true], build: Box::new(|g, v| g.relu(v[0]).unwrap()) },
        Case {
            name: "linear",
            inputs: vec![randn(&[3, 5], &mut rng), randn(&[4, 5], &mut rng), randn(&[4], &mut rng)],
            check: vec![true, true, true],
            build: Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap()),
        },
        Case {
            name: "max_pool",
            inputs: vec![spread(&[1, 2, 6, 6], &mut rng)],
            check: vec![true],
            build: Box::new(|g, v| g.max_pool(v[0], 3, 2, 1).unwrap()),
        },
        Case {
            name: "nearest_upsample",
            inputs: vec![randn(&[1, 2, 3, 3], &mut rng)],
            check: vec![true],
            build: Box::new(|g, v| g.upsample(v[0], 2).unwrap()),
        },
        Case {
            name: "upconv2x2",
            inputs: vec![randn(&[2, 3, 3, 3], &mut rng), randn(&[3, 2, 2, 2], &mut rng), randn(&[2], &mut rng)],
            check: vec![true, true, true],
            build: Box::new(|g, v| g.upconv2x2(v[0], v[1], Some(v[2])).unwrap()),
        },
        Case {
            name: "add",
            inputs: vec![randn(&[2, 5], &mut rng), randn(&[2, 5], &mut rng)],
            check: vec![true, true],
            build: Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
        },
        Case { name: "sigmoid", inputs: vec![randn(&[3, 4], &mut rng)], check: vec![true], build: Box::new(|g, v| g.sigmoid(v[0]).unwrap()) },
        Case { name: "softmax", inputs: vec![randn(&[3, 5], &mut rng)], check: vec![true], build: Box::new(|g, v| g.softmax(v[0]).unwrap()) },
        Case {
            name: "cross_entropy",
            inputs: vec![randn(&[4, 3], &mut rng)],
            check: vec![true],
            build: Box::new(move |g, v| {
                g.forward_op(OpKind::CrossEntropy { targets: ce_targets.clone(), weights: weights4.clone() }, &[v[0]]).unwrap()
            }),
        },
        Case {
            name: "smooth_l1",
            inputs: vec![randn(&[2, 4], &mut rng)],
            check: vec![true],
            build: Box::new(move |g, v| {
                g.forward_op(OpKind::SmoothL1 { targets: sl_targets.clone(), weights: weights8.clone(), beta: 0.5 }, &[v[0]]).unwrap()
            }),
        },
        Case {
            name: "binary_cross_entropy",
            inputs: vec![randn(&[2, 4], &mut rng)],
            check: vec![true],
            build: Box::new(move |g, v| {
                g.forward_op(OpKind::BinaryCrossEntropy { targets: bce_targets.clone(), weights: vec![1.0; 8] }, &[v[0]]).unwrap()
            }),
        },
        Case {
            name: "roi_crop_resize",
            inputs: vec![randn(&[2, 2, 8, 8], &mut rng), randn(&[2, 2, 4, 4], &mut rng)],
            check: vec![true, true],
            build: Box::new(move |g, v| {
                g.forward_op(OpKind::RoiCropResize { rois: rois.clone(), output_size: 3, spatial_scales: vec![0.25, 0.125] }, &[v[0], v[1]]).unwrap()
            }),
        },
        Case { name: "reshape", inputs: vec![randn(&[2, 6], &mut rng)], check: vec![true], build: Box::new(|g, v| g.reshape(v[0], [3, 4]).unwrap()) },
        Case { name: "sum", inputs: vec![randn(&[3, 3], &mut rng)], check: vec![true], build: Box::new(|g, v| g.sum(v[0]).unwrap()) },
        Case { name: "scale", inputs: vec![randn(&[4], &mut rng)], check: vec![true], build: Box::new(|g, v| g.scale(v[0], -1.75).unwrap()) },
    ]
}

/// `(op, seed, relative error)` for every op and seed.
pub fn op_errors() -> Vec<(&'static str, u64, f64)> {
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        for case in cases(seed) {
            let err = run(&case, seed);
            out.push((case.name, seed, err));
        }
    }
    out
}

/// A small conv / norm / sigmoid / upsample / scale chain.
pub fn composite_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    Case {
        name: "composite",
        inputs: vec![randn(&[1, 2, 8, 8], &mut rng), randn(&[4, 2, 3, 3], &mut rng), randn(&[4], &mut rng), randn(&[4], &mut rng)],
        check: vec![true, true, true, true],
        build: Box::new(|g, v| {
            let c = g.conv2d(v[0], v[1], None, 1, 1).unwrap();
            let n = g.group_norm(c, v[2], v[3], 2, 1e-5).unwrap();
            let s = g.sigmoid(n).unwrap();
            let u = g.upsample(s, 2).unwrap();
            g.scale(u, 0.5).unwrap()
        }),
    }
}
