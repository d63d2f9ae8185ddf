//! Central finite-difference checks of every tape operation the network and
//! losses use, in double precision.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{CaseResult, Failure};
use crate::error::Result;
use crate::tensor::{BatchNormConfig, Mode, RunningStats, Tape, Tensor, Var};
use crate::training::{contrastive_loss_var, triplet_loss_var};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// One random instance: differentiable inputs, fixed auxiliary values, and
/// the projection that reduces the output to a scalar.
#[derive(Debug, Clone, Serialize)]
pub struct Instance {
    pub shapes: Vec<Vec<usize>>,
    pub inputs: Vec<Vec<f64>>,
    pub aux: Vec<f64>,
    pub projection: Vec<f64>,
}

type Build = fn(&mut Tape<f64>, &[Var], &[f64]) -> Result<Var>;
type Make = fn(&mut ChaCha8Rng) -> Instance;

pub struct GradCase {
    pub name: &'static str,
    make: Make,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values bounded away from zero so ReLU kinks sit outside the stencil.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if v.abs() > 0.01 {
                break v;
            }
        })
        .collect()
}

fn instance(rng: &mut ChaCha8Rng, inputs: Vec<(Vec<usize>, Vec<f64>)>, aux: Vec<f64>, out_len: usize) -> Instance {
    let projection = uniform(rng, out_len);
    let (shapes, inputs) = inputs.into_iter().unzip();
    Instance {
        shapes,
        inputs,
        aux,
        projection,
    }
}

fn random_input(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (shape, uniform(rng, n))
}

fn conv_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, c, f) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..4));
    let k = [1, 3][rng.gen_range(0..2)];
    let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..2));
    let side = rng.gen_range(k.max(3)..6);
    let out = (side + 2 * pad - k) / stride + 1;
    let x = random_input(rng, vec![n, c, side, side]);
    let w = random_input(rng, vec![f, c, k, k]);
    let b = random_input(rng, vec![f]);
    instance(rng, vec![x, w, b], vec![stride as f64, pad as f64], n * f * out * out)
}

fn conv_build(t: &mut Tape<f64>, v: &[Var], aux: &[f64]) -> Result<Var> {
    t.conv2d(v[0], v[1], Some(v[2]), aux[0] as usize, aux[1] as usize)
}

fn maxpool_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, c) = (rng.gen_range(1..3), rng.gen_range(1..3));
    let side = rng.gen_range(2..6);
    let len = n * c * side * side;
    // distinct values spaced well beyond the stencil width
    let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.05 - 1.0).collect();
    vals.shuffle(rng);
    let out = (side - 2) / 2 + 1;
    instance(rng, vec![(vec![n, c, side, side], vals)], vec![], n * c * out * out)
}

fn maxpool_build(t: &mut Tape<f64>, v: &[Var], _: &[f64]) -> Result<Var> {
    t.maxpool2d(v[0], 2, 2)
}

fn batchnorm_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, c, side) = (rng.gen_range(2..4), rng.gen_range(1..4), rng.gen_range(1..4));
    let x = random_input(rng, vec![n, c, side, side]);
    let gamma = (vec![c], (0..c).map(|_| rng.gen_range(0.5..1.5)).collect());
    let beta = random_input(rng, vec![c]);
    instance(rng, vec![x, gamma, beta], vec![], n * c * side * side)
}

fn batchnorm_build(t: &mut Tape<f64>, v: &[Var], _: &[f64]) -> Result<Var> {
    let mut stats = RunningStats::standard(t.shape(v[0])[1]);
    t.batchnorm2d(v[0], v[1], v[2], Mode::Train, &mut stats, BatchNormConfig::default())
}

fn dense_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, d, k) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..5));
    let x = random_input(rng, vec![n, d]);
    let w = random_input(rng, vec![d, k]);
    let b = random_input(rng, vec![k]);
    instance(rng, vec![x, w, b], vec![], n * k)
}

fn dense_build(t: &mut Tape<f64>, v: &[Var], _: &[f64]) -> Result<Var> {
    t.dense(v[0], v[1], Some(v[2]))
}

fn map_case(rng: &mut ChaCha8Rng) -> Instance {
    let shape = vec![rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4)];
    let len: usize = shape.iter().product();
    let x = (shape, off_zero(rng, len));
    instance(rng, vec![x], vec![], len)
}

fn relu_build(t: &mut Tape<f64>, v: &[Var], _: &[f64]) -> Result<Var> {
    Ok(t.relu(v[0]))
}

fn sigmoid_build(t: &mut Tape<f64>, v: &[Var], _: &[f64]) -> Result<Var> {
    Ok(t.sigmoid(v[0]))
}

fn flatten_build(t: &mut Tape<f64>, v: &[Var], _: &[f64]) -> Result<Var> {
    t.flatten(v[0])
}

fn reshape_build(t: &mut Tape<f64>, v: &[Var], _: &[f64]) -> Result<Var> {
    let s = t.shape(v[0]).to_vec();
    t.reshape(v[0], vec![s[0] * s[1], s[2] * s[3]])
}

fn dropout_build(t: &mut Tape<f64>, v: &[Var], _: &[f64]) -> Result<Var> {
    // same mask on every evaluation
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    t.dropout(v[0], 0.3, Mode::Train, &mut rng)
}

fn gap_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, c) = (rng.gen_range(1..3), rng.gen_range(1..4));
    let shape = vec![n, c, rng.gen_range(1..4), rng.gen_range(1..4)];
    let x = random_input(rng, shape);
    instance(rng, vec![x], vec![], n * c)
}

fn gap_build(t: &mut Tape<f64>, v: &[Var], _: &[f64]) -> Result<Var> {
    t.global_avg_pool(v[0])
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn contrastive_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, d) = (rng.gen_range(1..5), rng.gen_range(1..5));
    loop {
        let a = uniform(rng, n * d);
        let b = uniform(rng, n * d);
        let dists: Vec<f64> = a.chunks(d).zip(b.chunks(d)).map(|(x, y)| distance(x, y)).collect();
        // keep the hinge and the distance away from their kinks
        if dists.iter().any(|&x| (1.0 - x).abs() < 0.01 || x < 0.01) {
            continue;
        }
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
        return instance(rng, vec![(vec![n, d], a), (vec![n, d], b)], y, 1);
    }
}

fn contrastive_build(t: &mut Tape<f64>, v: &[Var], aux: &[f64]) -> Result<Var> {
    let d = t.row_distance(v[0], v[1])?;
    contrastive_loss_var(t, d, aux, 1.0)
}

fn triplet_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, d) = (rng.gen_range(1..5), rng.gen_range(1..5));
    loop {
        let a = uniform(rng, n * d);
        let p = uniform(rng, n * d);
        let q = uniform(rng, n * d);
        let ok = (0..n).all(|i| {
            let r = i * d..(i + 1) * d;
            let (dp, dn) = (distance(&a[r.clone()], &p[r.clone()]), distance(&a[r.clone()], &q[r]));
            dp > 0.01 && dn > 0.01 && (dp - dn + 1.0).abs() > 0.01
        });
        if ok {
            return instance(rng, vec![(vec![n, d], a), (vec![n, d], p), (vec![n, d], q)], vec![], 1);
        }
    }
}

fn triplet_build(t: &mut Tape<f64>, v: &[Var], _: &[f64]) -> Result<Var> {
    let dp = t.row_distance(v[0], v[1])?;
    let dn = t.row_distance(v[0], v[2])?;
    triplet_loss_var(t, dp, dn, 1.0)
}

fn similarity_case(rng: &mut ChaCha8Rng) -> Instance {
    let (n, d) = (rng.gen_range(1..5), rng.gen_range(1..5));
    let x = (vec![n, d], off_zero(rng, n * d));
    let w = random_input(rng, vec![d, 1]);
    let b = random_input(rng, vec![1]);
    let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
    instance(rng, vec![x, w, b], y, 1)
}

fn similarity_build(t: &mut Tape<f64>, v: &[Var], aux: &[f64]) -> Result<Var> {
    let abs = t.abs(v[0]);
    let logit = t.dense(abs, v[1], Some(v[2]))?;
    let p = t.sigmoid(logit);
    t.binary_cross_entropy(p, aux.to_vec())
}

pub fn cases() -> Vec<GradCase> {
    let case = |name, make: Make, build: Build| GradCase { name, make, build };
    vec![
        case("conv", conv_case, conv_build),
        case("batchnorm", batchnorm_case, batchnorm_build),
        case("maxpool", maxpool_case, maxpool_build),
        case("flatten", map_case, flatten_build),
        case("reshape", map_case, reshape_build),
        case("dense", dense_case, dense_build),
        case("dropout", map_case, dropout_build),
        case("relu", map_case, relu_build),
        case("sigmoid", map_case, sigmoid_build),
        case("global_avg_pool", gap_case, gap_build),
        case("similarity", similarity_case, similarity_build),
        case("contrastive_loss", contrastive_case, contrastive_build),
        case("triplet_loss", triplet_case, triplet_build),
    ]
}

/// Scalar `Σ projection·output` and, if `grads`, the analytic gradient of
/// every input.
fn evaluate(build: Build, inst: &Instance, inputs: &[Vec<f64>], grads: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inst
        .shapes
        .iter()
        .zip(inputs)
        .map(|(s, v)| Ok(tape.leaf(&Tensor::new(s.clone(), v.clone())?.with_grad())))
        .collect::<Result<_>>()?;
    let out = build(&mut tape, &vars, &inst.aux)?;
    let weighted = tape.mul_const(out, inst.projection.clone())?;
    let total = tape.sum(weighted);
    let value = tape.value(total)[0];
    if !grads {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(total)?;
    let analytic = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| g.get(*v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
        .collect();
    Ok((value, analytic))
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Serialize)]
struct GradFailure<'a> {
    instance: usize,
    seed: u64,
    error: f64,
    case: &'a Instance,
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

/// Checks `instances` random instances of `case`; `perturb` scales the
/// analytic gradient by `1 + perturb` to exercise the failure path.
pub fn check_case(case: &GradCase, instances: usize, seed: u64, perturb: f64) -> Result<CaseResult> {
    let started = std::time::Instant::now();
    let mut worst = 0.0f64;
    let mut failure = None;
    for k in 0..instances {
        let inst_seed = seed.wrapping_add(k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(inst_seed);
        let inst = (case.make)(&mut rng);
        let (_, analytic) = evaluate(case.build, &inst, &inst.inputs, true)?;
        let mut inputs = inst.inputs.clone();
        let mut flat_a = Vec::new();
        let mut flat_n = Vec::new();
        for (i, grad) in analytic.iter().enumerate() {
            for j in 0..inputs[i].len() {
                let x0 = inputs[i][j];
                inputs[i][j] = x0 + STEP;
                let (up, _) = evaluate(case.build, &inst, &inputs, false)?;
                inputs[i][j] = x0 - STEP;
                let (down, _) = evaluate(case.build, &inst, &inputs, false)?;
                inputs[i][j] = x0;
                flat_n.push((up - down) / (2.0 * STEP));
                flat_a.push(grad[j] * (1.0 + perturb));
            }
        }
        let err = relative_error(&flat_a, &flat_n);
        worst = worst.max(err);
        if !(err < TOLERANCE) && failure.is_none() {
            let report = GradFailure {
                instance: k,
                seed: inst_seed,
                error: err,
                case: &inst,
                analytic: flat_a,
                numeric: flat_n,
            };
            failure = Some(Failure {
                message: format!("layer `{}`: relative error {err:.3e} ≥ {TOLERANCE:e}", case.name),
                inputs: serde_json::to_string(&report).expect("serializable"),
            });
        }
    }
    Ok(CaseResult {
        suite: "gradcheck",
        case: case.name.to_string(),
        instances,
        worst,
        tolerance: TOLERANCE,
        seconds: started.elapsed().as_secs_f64(),
        failure,
    })
}
