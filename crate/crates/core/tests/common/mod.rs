#![allow(dead_code)]

pub mod oracles;

use cct::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute norm when both are tiny.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite differences of a scalar function of several tensors.
pub fn numeric_grads(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], step: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let mut g = vec![0.0; t.numel()];
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            g[j] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Builds `build` on a fresh graph with every input as a variable, runs backward and
/// compares against finite differences. Returns the worst relative error over inputs.
pub fn grad_check(build: &dyn Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(|x| x.to_vec()).unwrap_or(vec![0.0; t.numel()]))
        .collect();
    let f = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.variable(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };
    let numeric = numeric_grads(&f, inputs, 1e-5);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

use cct::budget::BudgetSpec;
use cct::model::{CctModel, ModelConfig, ModelKind};
use cct::tensor::randn;

pub fn small_config(kind: ModelKind, d: usize, layers: usize, m: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        kind,
        vocab: 20,
        d,
        d_ff: 2 * d * m.max(1),
        heads: 2,
        m,
        enc_layers: layers,
        dec_layers: if kind == ModelKind::Seq2seq { layers } else { 0 },
        gate_hidden: 6,
        max_len: 12,
        dropout: 0.0,
        tie_output: true,
        init_seed: seed,
        ..ModelConfig::default()
    }
}

pub fn small_model(kind: ModelKind, d: usize, layers: usize, m: usize, seed: u64) -> CctModel {
    let budgets = match kind {
        ModelKind::Seq2seq => BudgetSpec::new(vec![vec![1.0, 1.0], vec![0.5, 0.5], vec![0.2, 0.3]]).unwrap(),
        ModelKind::Mlm => BudgetSpec::scalar(&[1.0, 0.5], 1).unwrap(),
    };
    CctModel::new(small_config(kind, d, layers, m, seed), budgets).unwrap()
}

/// Gives control networks nonzero output weights (so gates differ per token) and layer
/// norms non-trivial affine terms.
pub fn perturb(model: &mut CctModel, seed: u64, gate_scale: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let shape = model.store.get(id).shape().to_vec();
        let t = model.store.get_mut(id);
        if name.contains("gate.") && (name.ends_with(".w2") || name.ends_with(".b")) {
            *t = randn(&mut r, &shape, gate_scale);
        } else if name.ends_with(".gain") {
            let noise = randn(&mut r, &shape, 0.1);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += n);
        } else if name.ends_with(".bias") {
            *t = randn(&mut r, &shape, 0.1);
        }
    }
}

/// Random sequences of content tokens wrapped in bos/eos.
pub fn random_seqs(r: &mut ChaCha8Rng, n: usize, vocab: usize, min: usize, max: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let len = r.random_range(min..=max);
            let mut s = vec![1];
            s.extend((0..len).map(|_| r.random_range(4..vocab)));
            s.push(2);
            s
        })
        .collect()
}

/// Makes every control logit `gain * s_a * (x . u)` for a random direction `u` and random
/// signs `s_a`, so gates vary per token yet sit far from 0 for all but measure-zero inputs.
pub fn saturate_gates(model: &mut CctModel, seed: u64, gain: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        if !name.contains("gate.") {
            continue;
        }
        let shape = model.store.get(id).shape().to_vec();
        let t = model.store.get_mut(id);
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        if name.ends_with(".w1") {
            let (rows, cols) = (shape[0], shape[1]);
            for i in 0..rows {
                let u: f64 = r.random_range(-1.0..1.0);
                t.data_mut()[i * cols] = u;
                t.data_mut()[i * cols + 1] = -u;
            }
        } else if name.ends_with(".w2") {
            let cols = shape[1];
            let signs: Vec<f64> = (0..cols).map(|_| if r.random_bool(0.5) { gain } else { -gain }).collect();
            for (a, s) in signs.iter().enumerate() {
                t.data_mut()[a] = *s;
                t.data_mut()[cols + a] = -*s;
            }
        }
    }
}
