#![allow(dead_code)]

use dcam::tensor::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OPS: &[&str] = &[
    "add",
    "add_broadcast",
    "mul",
    "mul_broadcast",
    "matmul",
    "conv2d_rowwise",
    "conv2d_rowwise_rank3",
    "relu",
    "batchnorm",
    "batchnorm_frozen",
    "global_avg_pool",
    "softmax_cross_entropy",
    "reshape",
    "sum",
    "mean",
    "variance",
    "scale",
];

/// One randomly shaped instance of an op: its inputs, which of them are
/// differentiated, and how to apply the op to them.
pub type Apply = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId>;

pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub differentiable: Vec<bool>,
    pub apply: Apply,
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dims(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

pub fn case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let two = |rng: &mut ChaCha8Rng, a: &[usize], b: &[usize]| vec![random_tensor(rng, a), random_tensor(rng, b)];
    match op {
        "add" | "mul" | "add_broadcast" | "mul_broadcast" => {
            let rank = rng.random_range(1..=4);
            let a = dims(rng, rank, 4);
            let b = if op.ends_with("broadcast") {
                a[rng.random_range(0..rank)..].to_vec()
            } else {
                a.clone()
            };
            let is_add = op.starts_with("add");
            Case {
                inputs: two(rng, &a, &b),
                differentiable: vec![true, true],
                apply: Box::new(move |g, n| if is_add { g.add(n[0], n[1]) } else { g.mul(n[0], n[1]) }.unwrap()),
            }
        }
        "matmul" => {
            let (m, k, n) = (
                rng.random_range(1..=6),
                rng.random_range(1..=6),
                rng.random_range(1..=6),
            );
            Case {
                inputs: two(rng, &[m, k], &[k, n]),
                differentiable: vec![true, true],
                apply: Box::new(|g, n| g.matmul(n[0], n[1]).unwrap()),
            }
        }
        "conv2d_rowwise" | "conv2d_rowwise_rank3" => {
            let rank3 = op.ends_with("rank3");
            let b = rng.random_range(1..=3);
            let cin = rng.random_range(1..=3);
            let h = if rank3 { 1 } else { rng.random_range(1..=3) };
            let w = rng.random_range(1..=9);
            let cout = rng.random_range(1..=3);
            let l = rng.random_range(1..=5);
            let kernel = if rank3 {
                vec![cout, cin, l]
            } else {
                vec![cout, cin, 1, l]
            };
            Case {
                inputs: vec![
                    random_tensor(rng, &[b, cin, h, w]),
                    random_tensor(rng, &kernel),
                    random_tensor(rng, &[cout]),
                ],
                differentiable: vec![true, true, true],
                apply: Box::new(|g, n| g.conv2d_rowwise(n[0], n[1], n[2]).unwrap()),
            }
        }
        "relu" => {
            let shape = {
                let rank = rng.random_range(1..=4);
                dims(rng, rank, 5)
            };
            Case {
                inputs: vec![away_from_zero(rng, &shape)],
                differentiable: vec![true],
                apply: Box::new(|g, n| g.relu(n[0]).unwrap()),
            }
        }
        "batchnorm" | "batchnorm_frozen" => {
            let mut shape = vec![rng.random_range(2..=4), rng.random_range(1..=3)];
            shape.extend({
                let rank = rng.random_range(0..=2);
                dims(rng, rank, 4)
            });
            let c = shape[1];
            let mut inputs = vec![
                random_tensor(rng, &shape),
                random_tensor(rng, &[c]),
                random_tensor(rng, &[c]),
            ];
            if op == "batchnorm" {
                Case {
                    inputs,
                    differentiable: vec![true, true, true],
                    apply: Box::new(|g, n| g.batchnorm(n[0], n[1], n[2], 1e-5).unwrap()),
                }
            } else {
                inputs.push(random_tensor(rng, &[c]));
                inputs.push(Tensor::new(vec![c], (0..c).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap());
                Case {
                    inputs,
                    differentiable: vec![true, true, true, false, false],
                    apply: Box::new(|g, n| g.batchnorm_frozen(n[0], n[1], n[2], n[3], n[4], 1e-5).unwrap()),
                }
            }
        }
        "global_avg_pool" => {
            let mut shape = dims(rng, 2, 3);
            shape.extend({
                let rank = rng.random_range(1..=2);
                dims(rng, rank, 5)
            });
            Case {
                inputs: vec![random_tensor(rng, &shape)],
                differentiable: vec![true],
                apply: Box::new(|g, n| g.global_avg_pool(n[0]).unwrap()),
            }
        }
        "softmax_cross_entropy" => {
            let (b, k) = (rng.random_range(1..=5), rng.random_range(1..=5));
            let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            let mut logits = random_tensor(rng, &[b, k]);
            logits.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            Case {
                inputs: vec![logits],
                differentiable: vec![true],
                apply: Box::new(move |g, n| g.softmax_cross_entropy(n[0], &targets).unwrap()),
            }
        }
        "reshape" => {
            let shape = {
                let rank = rng.random_range(1..=3);
                dims(rng, rank, 4)
            };
            let n: usize = shape.iter().product();
            let target = vec![1, n];
            Case {
                inputs: vec![random_tensor(rng, &shape)],
                differentiable: vec![true],
                apply: Box::new(move |g, x| g.reshape(x[0], &target).unwrap()),
            }
        }
        "sum" | "mean" | "variance" | "scale" => {
            let shape = {
                let rank = rng.random_range(1..=3);
                dims(rng, rank, 5)
            };
            let factor = rng.random_range(-2.0..2.0);
            let op = op.to_string();
            Case {
                inputs: vec![random_tensor(rng, &shape)],
                differentiable: vec![true],
                apply: Box::new(move |g, n| {
                    match op.as_str() {
                        "sum" => g.sum(n[0]),
                        "mean" => g.mean(n[0]),
                        "variance" => g.variance(n[0]),
                        _ => g.scale(n[0], factor),
                    }
                    .unwrap()
                }),
            }
        }
        other => panic!("no gradient case for {other}"),
    }
}

/// `sum(op(inputs) * weights)` and the graph nodes of the inputs.
fn projected_loss(c: &Case, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> (Graph<f64>, Vec<NodeId>, NodeId) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .zip(&c.differentiable)
        .map(|(t, &d)| g.leaf(t.clone(), d))
        .collect();
    let out = (c.apply)(&mut g, &ids);
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    (g, ids, loss)
}

/// Largest relative error between backprop and central differences over one
/// case. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn check_case(c: &Case, rng: &mut ChaCha8Rng) -> f64 {
    let shape = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = c.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (c.apply)(&mut g, &ids);
        g.value(out).shape().to_vec()
    };
    let weights = random_tensor(rng, &shape);
    let (g, ids, loss) = projected_loss(c, &c.inputs, &weights);
    let grads = g.backward(loss).unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, &diff) in c.differentiable.iter().enumerate() {
        if !diff {
            continue;
        }
        let analytic = grads.get(ids[i]).expect("gradient for differentiable input");
        for j in 0..c.inputs[i].numel() {
            let eval = |delta: f64| {
                let mut inputs = c.inputs.clone();
                inputs[i].data_mut()[j] += delta;
                let (g, _, loss) = projected_loss(c, &inputs, &weights);
                g.value(loss).item().unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Worst relative error of `op` over `shapes` random instances.
pub fn check_op(op: &str, shapes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..shapes)
        .map(|_| {
            let c = case(op, &mut rng);
            check_case(&c, &mut rng)
        })
        .fold(0.0, f64::max)
}
