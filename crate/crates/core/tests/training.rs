mod common;

use cct::budget::BudgetSpec;
use cct::data::{TaskKind, TaskSpec};
use cct::gate::{NoiseMode, NoiseSchedule};
use cct::model::reference::PlainTransformer;
use cct::model::{CctModel, ModelConfig};
use cct::tensor::{Graph, ParamStore, Tensor};
use cct::train::{
    clip_grads, evaluate, heldout_batches, lr_at, Adam, BatchStream, EvalMode, StepMetrics, TrainConfig, Trainer,
};
use cct::CctError;
use proptest::prelude::*;

fn tiny_config(d: usize) -> ModelConfig {
    ModelConfig {
        vocab: 16,
        d,
        d_ff: 2 * d,
        heads: 2,
        m: 2,
        enc_layers: 1,
        dec_layers: 1,
        gate_hidden: 8,
        max_len: 12,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn tiny_task(kind: TaskKind) -> TaskSpec {
    TaskSpec {
        kind,
        vocab: 16,
        min_len: 2,
        max_len: 6,
        ..TaskSpec::default()
    }
}

fn train_config(steps: usize, lambda: f64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        warmup_steps: 50,
        lambda,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn ramp(steps: usize) -> NoiseSchedule {
    NoiseSchedule {
        alpha_max: 5.0,
        ramp_steps: steps,
        mode: NoiseMode::LinearRamp,
    }
}

fn trainer(budgets: BudgetSpec, kind: TaskKind, cfg: TrainConfig) -> Trainer {
    let model = CctModel::new(tiny_config(16), budgets).unwrap();
    Trainer::new(model, tiny_task(kind), cfg, ramp(200)).unwrap()
}

fn two_budgets() -> BudgetSpec {
    BudgetSpec::new(vec![vec![1.0, 1.0], vec![0.5, 0.3]]).unwrap()
}

#[test]
fn lr_schedule_examples() {
    let w = 400;
    let knee = lr_at(1.0, 64, w, w).unwrap();
    let s = w as f64;
    assert!((knee - 64f64.powf(-0.5) * s.powf(-0.5)).abs() < 1e-15);
    assert!((knee - 64f64.powf(-0.5) * s * s.powf(-1.5)).abs() < 1e-15);
    assert!(matches!(lr_at(1.0, 64, w, 0), Err(CctError::Contract(_))));
}

proptest! {
    #[test]
    fn lr_rises_to_the_knee_then_decays(warmup in 1usize..500, a in 1usize..2000, b in 1usize..2000, scale in 0.1f64..5.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        let f = |s| lr_at(scale, 32, warmup, s).unwrap();
        if hi <= warmup {
            prop_assert!(f(lo) <= f(hi));
        }
        if lo >= warmup {
            prop_assert!(f(lo) >= f(hi));
        }
        prop_assert!((lr_at(2.0 * scale, 32, warmup, a).unwrap() - 2.0 * f(a)).abs() <= 1e-15 * f(a));
    }
}

fn scalar_store(x: f64) -> (ParamStore, cct::tensor::ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::new(vec![1], vec![x]).unwrap());
    (store, id)
}

#[test]
fn adam_first_steps_follow_the_textbook_formulas() {
    let (mut store, id) = scalar_store(1.0);
    let mut adam = Adam::with_betas(&store, 0.9, 0.98, 1e-9);
    let (b1, b2, eps, lr) = (0.9f64, 0.98f64, 1e-9, 0.1);
    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for (t, g) in [0.5, -2.0, 3.0].into_iter().enumerate() {
        adam.update(&mut store, &[Tensor::new(vec![1], vec![g]).unwrap()], lr).unwrap();
        let t = t as i32 + 1;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        assert!((store.get(id).data()[0] - x).abs() < 1e-15);
    }
    assert_eq!(adam.steps(), 3);
}

#[test]
fn adam_converges_on_a_scalar_quadratic() {
    // minimise (x - 3)^2 from x = -4
    let (mut store, id) = scalar_store(-4.0);
    let mut adam = Adam::new(&store);
    for t in 0..20_000i32 {
        let x = store.get(id).data()[0];
        let grad = Tensor::new(vec![1], vec![2.0 * (x - 3.0)]).unwrap();
        let lr = 0.1 * 0.999f64.powi(t);
        adam.update(&mut store, &[grad], lr).unwrap();
    }
    let x = store.get(id).data()[0];
    assert!((x - 3.0).abs() < 1e-6, "x = {x}");
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), Tensor::new(vec![1], vec![12.0]).unwrap()];
    assert_eq!(clip_grads(&mut g, 1.0), 13.0);
    let after: f64 = g.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
    assert!((after - 1.0).abs() < 1e-15);
    let mut small = vec![Tensor::new(vec![1], vec![0.5]).unwrap()];
    clip_grads(&mut small, 1.0);
    assert_eq!(small[0].data(), &[0.5]);
}

#[test]
fn copy_task_loss_falls_without_budget_pressure() {
    let mut t = trainer(two_budgets(), TaskKind::Copy, train_config(200, 0.0));
    let m = t.run(200, None).unwrap();
    assert_eq!(m[0].alpha, 0.0);
    assert!(m.iter().all(|s| s.budget_loss == 0.0 || s.loss == s.task_loss));
    let mean = |s: &[StepMetrics]| s.iter().map(|x| x.task_loss).sum::<f64>() / s.len() as f64;
    let windows: Vec<f64> = m.chunks(50).map(mean).collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "windowed task loss {windows:?}");
    }
}

#[test]
fn fixed_seed_reproduces_the_loss_curve_bit_for_bit() {
    let run = || {
        let mut cfg = tiny_config(16);
        cfg.dropout = 0.1;
        let model = CctModel::new(cfg, two_budgets()).unwrap();
        let mut t = Trainer::new(model, tiny_task(TaskKind::ToyTranslation), train_config(30, 1.0), ramp(30)).unwrap();
        let mut log = Vec::new();
        t.run(30, Some(&mut log)).unwrap();
        log
    };
    let a = run();
    assert!(!a.is_empty());
    assert_eq!(a, run());
}

#[test]
fn budget_metrics_cover_exactly_each_symbols_sub_batch() {
    let cfg = train_config(5, 1.0);
    let spec = BudgetSpec::new(vec![vec![1.0, 1.0], vec![0.5, 0.3], vec![0.2, 0.2]]).unwrap();
    let mut t = trainer(spec.clone(), TaskKind::Copy, cfg.clone());
    let mut stream = BatchStream::new(&tiny_task(TaskKind::Copy), cfg.seed).unwrap();
    for _ in 0..5 {
        let m = t.train_step().unwrap();
        let (_, symbols) = stream.next(cfg.batch_size, &spec).unwrap();
        for term in &m.budget_terms {
            let n = symbols.iter().filter(|&&s| s == term.symbol).count();
            assert_eq!(term.sequences, n);
            assert_eq!(term.target, spec.budgets[term.symbol][term.component as usize]);
        }
        let present: std::collections::BTreeSet<usize> = symbols.iter().copied().collect();
        assert_eq!(m.budget_terms.len(), 2 * present.len());
        let total: f64 = m.budget_terms.iter().map(|t| t.loss).sum();
        assert!((total - m.budget_loss).abs() < 1e-12);
        // Token-weighted per-symbol losses recombine to the batch task loss.
        assert_eq!(m.symbol_losses.len(), present.len());
        let tokens: f64 = m.symbol_losses.iter().map(|s| s.tokens).sum();
        let pooled: f64 = m.symbol_losses.iter().map(|s| s.tokens * s.task_loss).sum::<f64>() / tokens;
        assert!((pooled - m.task_loss).abs() < 1e-10);
    }
}

#[test]
fn forced_on_training_follows_the_ungated_baseline() {
    let steps = 25;
    let cfg = TrainConfig {
        ungated: true,
        ..train_config(steps, 1.0)
    };
    let task = tiny_task(TaskKind::ToyTranslation);
    let full = BudgetSpec::new(vec![vec![1.0, 1.0]]).unwrap();
    let model = CctModel::new(tiny_config(16), full.clone()).unwrap();
    let mut store = model.store.clone();
    let mcfg = model.config.clone();
    let mut t = Trainer::new(model, task.clone(), cfg.clone(), ramp(steps)).unwrap();
    let gated = t.run(steps, None).unwrap();

    let mut adam = Adam::new(&store);
    let mut stream = BatchStream::new(&task, cfg.seed).unwrap();
    for (step, m) in gated.iter().enumerate() {
        let (batch, symbols) = stream.next(cfg.batch_size, &full).unwrap();
        let mut g = Graph::new();
        let plain = PlainTransformer::new(&mcfg, &store);
        let loss = plain.seq2seq_loss(&mut g, &batch.src(), &batch.tgt(), &symbols, None).unwrap();
        let value = g.value(loss).item();
        assert!((value - m.task_loss).abs() < 1e-9, "step {step}: {value} vs {}", m.task_loss);
        assert_eq!(m.budget_loss, 0.0);
        g.backward(loss).unwrap();
        let mut grads = g.param_grads(&store);
        let norm = clip_grads(&mut grads, cfg.clip_norm);
        assert!((norm - m.grad_norm).abs() < 1e-8 * norm.max(1.0));
        let lr = lr_at(cfg.lr_scale, mcfg.d, cfg.warmup_steps, step + 1).unwrap();
        adam.update(&mut store, &grads, lr).unwrap();
    }
}

#[test]
fn untrained_model_predicts_near_uniformly() {
    let model = CctModel::new(tiny_config(16), two_budgets()).unwrap();
    let batches = heldout_batches(&tiny_task(TaskKind::Copy), 2, 16, 3).unwrap();
    let r = evaluate(&model, &batches, 0, EvalMode::Discrete).unwrap();
    let v = model.config.vocab as f64;
    // Random tied embeddings give logits of roughly unit spread, so the predictor is close
    // to, but a little sharper than, uniform.
    assert!(r.perplexity > v / 2.0 && r.perplexity < 2.0 * v, "perplexity {}", r.perplexity);
    assert!(matches!(evaluate(&model, &batches, 2, EvalMode::Discrete), Err(CctError::Index(_))));
}

#[test]
fn saturated_gates_give_equal_continuous_and_discrete_accuracy() {
    let mut model = CctModel::new(tiny_config(16), two_budgets()).unwrap();
    common::perturb(&mut model, 3, 1.0);
    common::saturate_gates(&mut model, 9, 1e5);
    let batches = heldout_batches(&tiny_task(TaskKind::ToyTranslation), 2, 8, 4).unwrap();
    for symbol in 0..2 {
        let c = evaluate(&model, &batches, symbol, EvalMode::Continuous).unwrap();
        let d = evaluate(&model, &batches, symbol, EvalMode::Discrete).unwrap();
        assert_eq!(c.token_accuracy, d.token_accuracy);
        assert!((c.perplexity - d.perplexity).abs() < 1e-6 * d.perplexity);
    }
}

#[test]
fn non_finite_loss_names_the_term() {
    let mut t = trainer(two_budgets(), TaskKind::Copy, train_config(1, 1.0));
    let id = t.model.store.find("embed.tokens").unwrap();
    t.model.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = f64::NAN);
    match t.train_step() {
        Err(CctError::NonFinite { term, step, .. }) => {
            assert_eq!(term, "task loss");
            assert_eq!(step, 0);
        }
        other => panic!("expected a non-finite error, got {:?}", other.map(|m| m.loss)),
    }
}

#[test]
fn config_validation_names_fields() {
    let bad = TrainConfig {
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(CctError::Config { field, .. }) if field == "train.warmup_steps"));
    let model = CctModel::new(tiny_config(16), two_budgets()).unwrap();
    let mlm = tiny_task(TaskKind::Mlm);
    assert!(matches!(
        Trainer::new(model, mlm, train_config(1, 1.0), ramp(1)),
        Err(CctError::Config { field, .. }) if field == "task.kind"
    ));
}
