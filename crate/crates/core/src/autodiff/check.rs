//! Central finite-difference checks of the reverse pass.
//!
//! A graph `f(inputs)` is scalarized as `sum(f(inputs) * w)` with fixed random
//! weights `w`; every input element's analytic gradient is compared with
//! `(L(x + h) - L(x - h)) / 2h`. Errors are relative to `max(|a|, |fd|, 1)`.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

type Graph = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One graph with its inputs.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub graph: Graph,
}

impl Case {
    pub fn new(name: &'static str, inputs: Vec<Tensor>, graph: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Self {
        Self {
            name,
            inputs,
            graph: Box::new(graph),
        }
    }
}

fn eval(graph: &Graph, xs: &[Tensor], w: Option<&Tensor>) -> Result<(f64, Vec<Tensor>, Vec<usize>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let Some(w) = w else {
        return Ok((0.0, Vec::new(), shape));
    };
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod);
    let g = tape.gradients(loss)?;
    let grads = vars
        .iter()
        .map(|v| g.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape())))
        .collect();
    Ok((tape.value(loss).data()[0], grads, shape))
}

/// Worst relative error between the tape's gradient and the central
/// difference over every element of every input.
pub fn gradient_error(case: &Case, seed: u64, h: f64) -> Result<f64> {
    let (_, _, shape) = eval(&case.graph, &case.inputs, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let weights = random(&mut rng, &shape);
    let (_, analytic, _) = eval(&case.graph, &case.inputs, Some(&weights))?;
    let mut worst = 0.0f64;
    for (i, x) in case.inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&case.graph, &plus, Some(&weights))?.0 - eval(&case.graph, &minus, Some(&weights))?.0) / (2.0 * h);
            let a = analytic[i].data()[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if !rel.is_finite() {
                return Err(Error::Contract(alloc::format!("{}: non-finite gradient", case.name)));
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Entries with magnitude in `[0.05, 1)` and random sign, which keeps every
/// entry clear of relu's kink by more than any sensible step.
pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn scaled(t: Tensor, c: f64) -> Tensor {
    let data = t.data().iter().map(|v| v * c).collect();
    Tensor::new(t.shape(), data).expect("same shape")
}

/// Random graphs exercising every differentiable primitive, plus a composed
/// network with fan-out.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let s = seed as usize;
    let mut c = Vec::new();

    let (x, w, b) = (random(r, &[3, 2, 4]), random(r, &[4, 3]), random(r, &[3]));
    c.push(Case::new("linear", vec![x.clone(), w.clone(), b], |t, v| t.linear(v[0], v[1], Some(v[2]))));
    c.push(Case::new("linear-nobias", vec![x, w], |t, v| t.linear(v[0], v[1], None)));

    let dil = 1 + s % 3;
    let ks = [3, 5, 7][s % 3];
    let (x, k, b) = (random(r, &[2, 2, 9]), random(r, &[3, 2, ks]), random(r, &[3]));
    c.push(Case::new("conv1d", vec![x, k, b], move |t, v| t.conv1d(v[0], v[1], Some(v[2]), dil)));

    c.push(Case::new("repeat_channels", vec![random(r, &[2, 1, 6])], |t, v| t.repeat_channels(v[0], 3)));
    let (a, b) = (random(r, &[2, 2, 4]), random(r, &[2, 3, 4]));
    c.push(Case::new("concat_channels", vec![a, b], |t, v| t.concat_channels(&[v[0], v[1]])));
    let x = random(r, &[2, 3, 8]);
    c.push(Case::new("avg_pool", vec![x.clone()], |t, v| t.avg_pool(v[0], 4)));
    for axis in 0..3 {
        c.push(Case::new("mean_axis", vec![x.clone()], move |t, v| t.mean_axis(v[0], axis)));
    }
    c.push(Case::new("transpose12", vec![x.clone()], |t, v| t.transpose12(v[0])));
    let sc = random(r, &[2, 3]);
    c.push(Case::new("scale_channels", vec![x.clone(), sc], |t, v| t.scale_channels(v[0], v[1])));
    let st = random(r, &[2, 8]);
    c.push(Case::new("scale_time", vec![x, st], |t, v| t.scale_time(v[0], v[1])));

    let (a, b) = (random(r, &[3, 4]), random(r, &[3, 4]));
    c.push(Case::new("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])));
    c.push(Case::new("mul", vec![a.clone(), b], |t, v| t.mul(v[0], v[1])));
    c.push(Case::new("mul-self", vec![a.clone()], |t, v| t.mul(v[0], v[0])));
    c.push(Case::new("add_const", vec![a.clone()], |t, v| Ok(t.add_const(v[0], 0.7))));
    c.push(Case::new("scale", vec![a.clone()], |t, v| Ok(t.scale(v[0], -1.3))));
    c.push(Case::new("sum", vec![a.clone()], |t, v| Ok(t.sum(v[0]))));
    c.push(Case::new("relu", vec![a.clone()], |t, v| Ok(t.relu(v[0]))));
    c.push(Case::new("sigmoid", vec![a.clone()], |t, v| Ok(t.sigmoid(v[0]))));
    c.push(Case::new("softmax", vec![scaled(a, 3.0)], |t, v| Ok(t.softmax(v[0]))));
    let (x, rows) = (random(r, &[2, 5, 3]), random(r, &[2, 3]));
    c.push(Case::new("add_rows", vec![x, rows], |t, v| t.add_rows(v[0], v[1])));

    let (x, w, a) = (random(r, &[2, 5, 3]), random(r, &[3]), random(r, &[2, 5]));
    c.push(Case::new("row_dot", vec![x.clone(), w.clone()], |t, v| t.row_dot(v[0], v[1])));
    c.push(Case::new("weighted_sum", vec![a, x.clone()], |t, v| t.weighted_sum(v[0], v[1])));
    c.push(Case::new("pool_mean", vec![x.clone()], |t, v| t.pool_mean(v[0])));
    c.push(Case::new("pool_attention", vec![x, w], |t, v| t.pool_attention(v[0], v[1])));

    let x = random(r, &[4, 3, 2]);
    c.push(Case::new("gather_rows", vec![x.clone()], |t, v| t.gather_rows(v[0], &[2, 0, 2])));
    c.push(Case::new("scatter_rows", vec![random(r, &[3, 3, 2])], |t, v| t.scatter_rows(v[0], &[1, 3, 1], 4)));
    c.push(Case::new("gather_entries", vec![random(r, &[3, 4])], |t, v| {
        t.gather_entries(v[0], &[(0, 1), (2, 3), (0, 1)])
    }));
    let sr = random(r, &[4]);
    c.push(Case::new("scale_rows", vec![x, sr], |t, v| t.scale_rows(v[0], v[1])));

    let logits = scaled(random(r, &[4, 3]), 2.0);
    let labels: Vec<usize> = (0..4).map(|i| (i + s) % 3).collect();
    c.push(Case::new("cross_entropy", vec![logits], move |t, v| t.cross_entropy(v[0], &labels)));

    let (x, k, w) = (random(r, &[2, 1, 8]), random(r, &[2, 1, 3]), random(r, &[2, 2]));
    c.push(Case::new("composed", vec![x, k, w], |t, v| {
        let c = t.conv1d(v[0], v[1], None, 2)?;
        let r = t.relu(c);
        let rep = t.repeat_channels(v[0], 2)?;
        let res = t.add(r, rep)?;
        let tr = t.transpose12(res)?;
        let h = t.linear(tr, v[2], None)?;
        let g = t.sigmoid(h);
        t.mul(g, tr)
    }));
    c
}

/// Per primitive: number of checked cases and the worst relative error over
/// seeds `0..n_seeds`.
pub fn primitive_suite(n_seeds: u64, h: f64) -> Result<BTreeMap<&'static str, (usize, f64)>> {
    let mut out: BTreeMap<&'static str, (usize, f64)> = BTreeMap::new();
    for seed in 0..n_seeds {
        for case in primitive_cases(seed) {
            let err = gradient_error(&case, seed, h)?;
            let e = out.entry(case.name).or_insert((0, 0.0));
            e.0 += 1;
            e.1 = e.1.max(err);
        }
    }
    Ok(out)
}
