#![allow(dead_code)]

use esc::tensor::{BatchNormState, Graph, NormMode, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 20;
const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;
pub type Case = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>);

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Inputs bounded away from zero so ReLU kinks stay out of the difference stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn evaluate(inputs: &[Tensor<f64>], build: &Build, projection: &[f64]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    g.value(out).data().iter().zip(projection).map(|(a, b)| a * b).sum()
}

/// Compares analytic gradients of `sum(projection * build(inputs))` with
/// central differences for every input element; returns the worst relative error.
fn check(inputs: Vec<Tensor<f64>>, build: &Build, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let projection: Vec<f64> = (0..g.value(out).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.backward_with(out, projection.clone()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).ok_or(format!("input {k} has no gradient"))?.to_vec();
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (evaluate(&plus, build, &projection) - evaluate(&minus, build, &projection)) / (2.0 * STEP);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel >= TOLERANCE {
                return Err(format!("input {k} element {i}: analytic {a} numeric {numeric} (rel {rel:.2e})"));
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Runs `case` for every seed; returns the worst relative error.
pub fn run_case(case: Case) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, build) = case(&mut rng);
        worst = worst.max(check(inputs, &build, &mut rng).map_err(|e| format!("seed {seed}: {e}"))?);
    }
    Ok(worst)
}

fn conv<const K: usize, const S: usize>(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let (n, cin, cout, size) = (2, rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(5..=7));
    let inputs = vec![random(rng, &[n, cin, size, size]), random(rng, &[cout, cin, K, K]), random(rng, &[cout])];
    (inputs, Box::new(|g, v| g.conv2d(v[0], v[1], v[2], S).unwrap()))
}

fn batch_norm_train(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let c = rng.random_range(1..=3);
    let inputs = vec![random(rng, &[3, c, 3, 3]), random(rng, &[c]), random(rng, &[c])];
    (
        inputs,
        Box::new(move |g, v| {
            let mut state = BatchNormState::new(c);
            g.batch_norm(v[0], v[1], v[2], &mut state, NormMode::Train).unwrap()
        }),
    )
}

fn batch_norm_eval(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let c = rng.random_range(1..=3);
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
    let inputs = vec![random(rng, &[2, c, 3, 3]), random(rng, &[c]), random(rng, &[c])];
    (
        inputs,
        Box::new(move |g, v| {
            let mut state = BatchNormState {
                running_mean: mean.clone(),
                running_var: var.clone(),
            };
            g.batch_norm(v[0], v[1], v[2], &mut state, NormMode::Eval).unwrap()
        }),
    )
}

fn relu(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    (vec![off_zero(rng, &[2, 3, 4, 4])], Box::new(|g, v| g.relu(v[0])))
}

fn add(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let shape = [2, 2, 3, 3];
    (vec![random(rng, &shape), random(rng, &shape)], Box::new(|g, v| g.add(v[0], v[1]).unwrap()))
}

fn global_avg_pool(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let size = rng.random_range(1..=5);
    (vec![random(rng, &[2, 3, size, size])], Box::new(|g, v| g.global_avg_pool(v[0]).unwrap()))
}

fn scramble(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let mut mapping: Vec<usize> = (0..16).collect();
    mapping.shuffle(rng);
    (vec![random(rng, &[2, 3, 4, 4])], Box::new(move |g, v| g.scramble(v[0], &mapping).unwrap()))
}

fn dense(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let (n, c, k) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=4));
    let inputs = vec![random(rng, &[n, c]), random(rng, &[k, c]), random(rng, &[k])];
    (inputs, Box::new(|g, v| g.dense(v[0], v[1], v[2]).unwrap()))
}

fn softmax_cross_entropy(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let (n, k) = (rng.random_range(1..=5), rng.random_range(2..=6));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut logits = random(rng, &[n, k]);
    logits.data_mut().iter_mut().for_each(|v| *v *= 3.0);
    (vec![logits], Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels).unwrap()))
}

fn residual_chain(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let (n, c, classes) = (3, 2, 3);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let inputs = vec![
        random(rng, &[n, c, 4, 4]),
        random(rng, &[c, c, 3, 3]),
        random(rng, &[c]),
        random(rng, &[c]),
        random(rng, &[c]),
        random(rng, &[classes, c]),
        random(rng, &[classes]),
    ];
    (
        inputs,
        Box::new(move |g, v| {
            let mut state = BatchNormState::new(c);
            let y = g.conv2d(v[0], v[1], v[2], 1).unwrap();
            let y = g.batch_norm(y, v[3], v[4], &mut state, NormMode::Train).unwrap();
            let y = g.add(y, v[0]).unwrap();
            let y = g.relu(y);
            let y = g.global_avg_pool(y).unwrap();
            let y = g.dense(y, v[5], v[6]).unwrap();
            g.softmax_cross_entropy(y, &labels).unwrap()
        }),
    )
}

/// Every differentiable operation, plus one composite residual unit.
pub const GRADIENT_CASES: &[(&str, Case)] = &[
    ("conv2d k1 s1", conv::<1, 1>),
    ("conv2d k1 s2", conv::<1, 2>),
    ("conv2d k3 s1", conv::<3, 1>),
    ("conv2d k3 s2", conv::<3, 2>),
    ("conv2d k5 s2", conv::<5, 2>),
    ("batch_norm train", batch_norm_train),
    ("batch_norm eval", batch_norm_eval),
    ("relu", relu),
    ("add", add),
    ("global_avg_pool", global_avg_pool),
    ("scramble", scramble),
    ("dense", dense),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("conv-bn-residual-relu-gap-dense-loss", residual_chain),
];
